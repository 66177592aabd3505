"""NIfTI-1 reading and writing, FSL gradient sidecars, transform files.

Only the single-file ``.nii`` and the ``.hdr``/``.img`` pair layouts of NIfTI-1
are understood.  A ``.gz`` suffix (or gzip magic) is decompressed transparently.
"""

from __future__ import annotations

import gzip
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import NiftiFormatError, TransformError, TruncatedFileError, UnsupportedDatatypeError
from .volume import DwiSeries, Grid, GridTransform, Volume3D

HEADER_SIZE = 348
VOX_OFFSET = 352

HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "i4"),
        ("session_error", "i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "i2", (8,)),
        ("intent_p1", "f4"),
        ("intent_p2", "f4"),
        ("intent_p3", "f4"),
        ("intent_code", "i2"),
        ("datatype", "i2"),
        ("bitpix", "i2"),
        ("slice_start", "i2"),
        ("pixdim", "f4", (8,)),
        ("vox_offset", "f4"),
        ("scl_slope", "f4"),
        ("scl_inter", "f4"),
        ("slice_end", "i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "f4"),
        ("cal_min", "f4"),
        ("slice_duration", "f4"),
        ("toffset", "f4"),
        ("glmax", "i4"),
        ("glmin", "i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "i2"),
        ("sform_code", "i2"),
        ("quatern_b", "f4"),
        ("quatern_c", "f4"),
        ("quatern_d", "f4"),
        ("qoffset_x", "f4"),
        ("qoffset_y", "f4"),
        ("qoffset_z", "f4"),
        ("srow_x", "f4", (4,)),
        ("srow_y", "f4", (4,)),
        ("srow_z", "f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert HEADER_DTYPE.itemsize == HEADER_SIZE

# NIfTI datatype code -> numpy dtype (native byte order applied at read time)
DATATYPE_CODES = {
    2: "u1",
    4: "i2",
    8: "i4",
    16: "f4",
    64: "f8",
    256: "i1",
    512: "u2",
    768: "u4",
    1024: "i8",
    1280: "u8",
}
_WRITE_CODES = {"uint8": 2, "int32": 8, "float32": 16}
INTENT_VECTOR = 1007
XFORM_SCANNER = 1


def _open(path, mode="rb"):
    path = Path(path)
    if "r" in mode:
        with open(path, "rb") as fh:
            gz = fh.read(2) == b"\x1f\x8b"
    else:
        gz = path.suffix == ".gz"
    return gzip.open(path, mode) if gz else open(path, mode)


def read_header(path):
    """Parse a NIfTI-1 header; returns ``(record, byteorder)``."""
    with _open(path) as fh:
        raw = fh.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(f"{path}: file shorter than a NIfTI-1 header")
    for order in "<>":
        hdr = np.frombuffer(raw, dtype=HEADER_DTYPE.newbyteorder(order), count=1)[0]
        if int(hdr["sizeof_hdr"]) == HEADER_SIZE:
            break
    else:
        raise NiftiFormatError(f"{path}: sizeof_hdr is not 348")
    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    if magic not in (b"n+1", b"ni1"):
        raise NiftiFormatError(f"{path}: bad magic {magic!r}")
    return hdr, order


def header_affine(hdr):
    """Voxel-to-world matrix: sform if set, else qform, else spacing diagonal."""
    if int(hdr["sform_code"]) > 0:
        aff = np.eye(4)
        aff[0], aff[1], aff[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
        return aff
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    spacing = np.where(pixdim[1:4] > 0, pixdim[1:4], 1.0)
    if int(hdr["qform_code"]) > 0:
        b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
        a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
        rot = np.array(
            [
                [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
                [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
                [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ]
        )
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        aff = np.eye(4)
        aff[:3, :3] = rot * np.array([spacing[0], spacing[1], spacing[2] * qfac])
        aff[:3, 3] = [float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"])]
        return aff
    return np.diag([*spacing, 1.0])


def read_array(path):
    """Decode the payload of any NIfTI-1 file.

    Returns ``(array, affine, header)`` where ``array`` has one axis per used
    dimension (trailing singleton dimensions dropped) and scaling applied.
    """
    path = Path(path)
    hdr, order = read_header(path)
    ndim = int(hdr["dim"][0])
    if not 1 <= ndim <= 7:
        raise NiftiFormatError(f"{path}: dim[0] = {ndim} out of range")
    shape = tuple(int(x) for x in hdr["dim"][1 : ndim + 1])
    if min(shape) < 1:
        raise NiftiFormatError(f"{path}: non-positive dimension in {shape}")
    code = int(hdr["datatype"])
    if code not in DATATYPE_CODES:
        raise UnsupportedDatatypeError(f"{path}: unsupported NIfTI datatype code {code}")
    dt = np.dtype(DATATYPE_CODES[code]).newbyteorder(order)
    count = int(np.prod(shape))
    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    offset = int(hdr["vox_offset"])
    if magic == b"n+1":
        data_path = path
        offset = max(offset, HEADER_SIZE)
    else:
        data_path = _pair_image(path)
    with _open(data_path) as fh:
        fh.seek(offset)
        raw = fh.read(count * dt.itemsize)
    if len(raw) < count * dt.itemsize:
        raise TruncatedFileError(
            f"{data_path}: payload has {len(raw)} bytes, header needs {count * dt.itemsize}"
        )
    arr = np.frombuffer(raw, dtype=dt, count=count).reshape(shape, order="F")
    arr = arr.astype(dt.newbyteorder("="))
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if np.isfinite(slope) and slope != 0 and (slope != 1 or (np.isfinite(inter) and inter != 0)):
        arr = arr.astype(np.float32) * np.float32(slope) + np.float32(inter if np.isfinite(inter) else 0)
    while arr.ndim > 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    return arr, header_affine(hdr), hdr


def _pair_image(hdr_path):
    name = str(hdr_path)
    for suffix in (".hdr.gz", ".hdr"):
        if name.endswith(suffix):
            stem = name[: -len(suffix)]
            for cand in (stem + ".img", stem + ".img.gz"):
                if os.path.exists(cand):
                    return Path(cand)
    raise NiftiFormatError(f"{hdr_path}: 'ni1' header without a matching .img file")


def _stem(path):
    name = str(path)
    for suffix in (".nii.gz", ".nii", ".hdr.gz", ".hdr"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return os.path.splitext(name)[0]


def sidecar_paths(path):
    stem = _stem(path)
    return Path(stem + ".bval"), Path(stem + ".bvec")


def _as_volume_array(arr):
    if arr.dtype == np.uint8:
        return arr, "uint8"
    if arr.dtype.kind in "iu":
        info = np.iinfo(np.int32)
        if arr.size and (arr.min() < info.min or arr.max() > info.max):
            raise UnsupportedDatatypeError("integer values do not fit in int32")
        return arr.astype(np.int32), "int32"
    return arr.astype(np.float32), "float32"


def read_nifti(path):
    """Load a 3D volume, or a 4D series with FSL sidecars as a :class:`DwiSeries`."""
    arr, affine, _ = read_array(path)
    if arr.ndim == 3:
        data, tag = _as_volume_array(arr)
        return Volume3D(data, affine, tag)
    if arr.ndim == 4:
        bval, bvec = sidecar_paths(path)
        if bval.exists() and bvec.exists():
            return read_dwi(path, bval, bvec)
        raise NiftiFormatError(f"{path}: 4D file without gradient sidecars ({bval.name}, {bvec.name})")
    raise NiftiFormatError(f"{path}: cannot interpret a {arr.ndim}D payload as a volume")


def read_gradients(bval_path, bvec_path, b0_threshold=50.0):
    """Read FSL ``.bval`` / ``.bvec`` text files.

    Diffusion-weighted directions are renormalised to unit length, since
    sidecars usually store them to a few decimals only.
    """
    for p in (bval_path, bvec_path):
        if not Path(p).exists():
            raise FileNotFoundError(f"gradient sidecar not found: {p}")
    bvals = np.loadtxt(bval_path, dtype=np.float64, ndmin=1).ravel()
    bvecs = np.loadtxt(bvec_path, dtype=np.float64, ndmin=2)
    if bvecs.shape[0] != 3 and bvecs.shape[1] == 3:
        bvecs = bvecs.T
    if bvecs.shape != (3, bvals.size):
        raise NiftiFormatError(f"{bvec_path}: expected 3 rows of {bvals.size} components, got {bvecs.shape}")
    bvecs = bvecs.T.copy()
    norms = np.linalg.norm(bvecs, axis=1)
    w = (bvals > b0_threshold) & (norms > 0)
    bvecs[w] /= norms[w, None]
    return bvals, bvecs


def write_gradients(bvals, bvecs, bval_path, bvec_path):
    bvecs = np.asarray(bvecs, dtype=float)
    np.savetxt(bval_path, np.asarray(bvals, dtype=float)[None, :], fmt="%.10g")
    np.savetxt(bvec_path, bvecs.T, fmt="%.17g")


def read_dwi(path, bval_path=None, bvec_path=None):
    arr, affine, _ = read_array(path)
    if arr.ndim != 4:
        raise NiftiFormatError(f"{path}: DWI file must be 4D, got {arr.ndim}D")
    default_bval, default_bvec = sidecar_paths(path)
    bvals, bvecs = read_gradients(bval_path or default_bval, bvec_path or default_bvec)
    return DwiSeries(arr.astype(np.float32), affine, bvals, bvecs)


def _quaternion(affine):
    """(qfac, b, c, d) for an affine with an orthogonal direction matrix, else None."""
    m = np.asarray(affine, dtype=np.float64)[:3, :3]
    spacing = np.linalg.norm(m, axis=0)
    rot = m / spacing
    if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
        return None
    qfac = 1.0
    if np.linalg.det(rot) < 0:
        qfac = -1.0
        rot = rot.copy()
        rot[:, 2] *= -1
    trace = np.trace(rot)
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        a = 0.25 / s
        b = (rot[2, 1] - rot[1, 2]) * s
        c = (rot[0, 2] - rot[2, 0]) * s
        d = (rot[1, 0] - rot[0, 1]) * s
    elif rot[0, 0] > rot[1, 1] and rot[0, 0] > rot[2, 2]:
        s = 2.0 * np.sqrt(1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2])
        a = (rot[2, 1] - rot[1, 2]) / s
        b = 0.25 * s
        c = (rot[0, 1] + rot[1, 0]) / s
        d = (rot[0, 2] + rot[2, 0]) / s
    elif rot[1, 1] > rot[2, 2]:
        s = 2.0 * np.sqrt(1.0 + rot[1, 1] - rot[0, 0] - rot[2, 2])
        a = (rot[0, 2] - rot[2, 0]) / s
        b = (rot[0, 1] + rot[1, 0]) / s
        c = 0.25 * s
        d = (rot[1, 2] + rot[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + rot[2, 2] - rot[0, 0] - rot[1, 1])
        a = (rot[1, 0] - rot[0, 1]) / s
        b = (rot[0, 2] + rot[2, 0]) / s
        c = (rot[1, 2] + rot[2, 1]) / s
        d = 0.25 * s
    if a < 0:
        b, c, d = -b, -c, -d
    return qfac, b, c, d


def make_header(shape, affine, datatype, intent_code=0):
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"][0] = len(shape)
    hdr["dim"][1 : len(shape) + 1] = shape
    hdr["dim"][len(shape) + 1 :] = 1
    code = _WRITE_CODES[datatype]
    hdr["datatype"] = code
    hdr["bitpix"] = np.dtype(DATATYPE_CODES[code]).itemsize * 8
    hdr["intent_code"] = intent_code
    affine = np.asarray(affine, dtype=np.float64)
    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    hdr["pixdim"][:] = 1.0
    hdr["pixdim"][1:4] = spacing
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2 | 8  # mm, s
    quat = _quaternion(affine)
    if quat is not None:
        qfac, b, c, d = quat
        hdr["pixdim"][0] = qfac
        hdr["qform_code"] = XFORM_SCANNER
        hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"] = b, c, d
        hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = affine[:3, 3]
    hdr["sform_code"] = XFORM_SCANNER
    hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = affine[0], affine[1], affine[2]
    hdr["magic"] = b"n+1"
    return hdr


def write_array(arr, affine, path, datatype, intent_code=0):
    """Write an N-D array (x-fastest on disk) as single-file NIfTI-1.

    The file is written to a temporary sibling and renamed into place so a
    failed write never leaves a partial file behind.
    """
    path = Path(path)
    arr = np.asarray(arr)
    hdr = make_header(arr.shape, affine, datatype, intent_code)
    payload = np.asarray(arr, dtype=np.dtype(DATATYPE_CODES[_WRITE_CODES[datatype]]).newbyteorder("<"))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=path.name, dir=path.parent or ".")
    os.close(fd)
    try:
        with open(tmp, "wb") as raw:
            # fixed mtime and empty name keep gzip output reproducible
            fh = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) if path.suffix == ".gz" else raw
            fh.write(hdr.tobytes())
            fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
            fh.write(payload.tobytes(order="F"))
            if fh is not raw:
                fh.close()
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_nifti(v: Volume3D, path):
    write_array(v.data, v.affine, path, v.dtype)


def write_dwi(dwi: DwiSeries, path, bval_path=None, bvec_path=None):
    write_array(dwi.data, dwi.affine, path, "float32")
    default_bval, default_bvec = sidecar_paths(path)
    write_gradients(dwi.bvals, dwi.bvecs, bval_path or default_bval, bvec_path or default_bvec)


def read_transform(path, inverse_path=None):
    """Load a :class:`GridTransform` from JSON (16 row-major floats) or a displacement NIfTI."""
    path = Path(path)
    if path.suffix == ".json":
        with open(path) as fh:
            spec = json.load(fh)
        values = spec.get("affine", spec.get("matrix")) if isinstance(spec, dict) else spec
        mat = np.asarray(values, dtype=np.float64)
        if mat.size != 16:
            raise TransformError(f"{path}: expected 16 affine values, got {mat.size}")
        xf = GridTransform("affine", mat.reshape(4, 4))
        if not xf.invertible:
            raise TransformError(f"{path}: affine transform is singular")
        return xf
    arr, affine, _ = read_array(path)
    if arr.ndim == 5 and arr.shape[3] == 1:
        arr = arr[:, :, :, 0, :]
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise TransformError(f"{path}: displacement field must have 3 components, got shape {arr.shape}")
    inverse = read_transform(inverse_path) if inverse_path else None
    return GridTransform("displacement", field=arr, field_grid=Grid(arr.shape[:3], affine), inverse_transform=inverse)


def write_transform(xf: GridTransform, path):
    path = Path(path)
    if xf.kind == "affine":
        with open(path, "w") as fh:
            json.dump({"affine": [float(x) for x in xf.matrix.ravel()]}, fh)
            fh.write("\n")
        return
    write_array(xf.field[:, :, :, None, :], xf.field_grid.affine, path, "float32", intent_code=INTENT_VECTOR)
