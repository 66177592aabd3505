"""Two-stage coarse-to-fine parcellation around pluggable segmenter backends."""

from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import config_hash
from .backends import make_backend
from .errors import BackendContractError, ConfigurationError, DwiparcError, StageError
from .postprocess import PostprocessConfig, postprocess_results, to_native
from .resample import CONFORM_DIM, conform_grid, resample_to
from .schema import LabelSchema, LabelVolume, load_schema, merge_fine, to_freesurfer_lut
from .sliding_window import SlidingWindowConfig, sliding_window_predict
from .tensor import CODE_TO_MAP, derive_maps, eigendecompose, fit_tensor
from .volume import DwiSeries, GridTransform, Volume3D

DEFAULT_MAP_CODES = ("F", "T", "S", "E1")
# coarse ids are scaled by the largest group id for the fine-stage mask channel
MAX_GROUP_ID = 7


@dataclass
class PipelineConfig:
    """Everything a parcellation run needs.

    Path fields are only used by :func:`load_inputs` / the CLI; the library
    entry point :func:`run_pipeline` takes already-loaded objects.
    """

    map_codes: tuple = DEFAULT_MAP_CODES
    sliding_window: SlidingWindowConfig = field(default_factory=lambda: SlidingWindowConfig())
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    input_space: str = "native"
    conform_dim: int = CONFORM_DIM
    workers: int = 1
    backends: dict = field(default_factory=dict)
    maps: dict = field(default_factory=dict)
    dwi: dict = field(default_factory=dict)
    transform: str | None = None
    inverse_transform: str | None = None
    schema: str | None = None
    output_dir: str | None = None
    base_dir: str = "."

    def __post_init__(self):
        self.map_codes = tuple(self.map_codes)
        bad = [c for c in self.map_codes if c not in CODE_TO_MAP]
        if bad or not self.map_codes:
            raise ConfigurationError(f"unknown or missing map codes {bad or self.map_codes}")
        if self.input_space not in ("native", "conformed"):
            raise ConfigurationError(f"input_space must be 'native' or 'conformed', got {self.input_space!r}")

    @classmethod
    def from_dict(cls, d, base_dir="."):
        d = dict(d)
        known = {
            "map_codes", "sliding_window", "postprocess", "input_space", "conform_dim", "workers",
            "backends", "maps", "dwi", "transform", "inverse_transform", "schema", "output_dir",
        }
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys {unknown}")
        try:
            return cls(
                map_codes=tuple(d.get("map_codes", DEFAULT_MAP_CODES)),
                sliding_window=SlidingWindowConfig.from_dict(d.get("sliding_window")),
                postprocess=PostprocessConfig.from_dict(d.get("postprocess")),
                input_space=d.get("input_space", "native"),
                conform_dim=int(d.get("conform_dim", CONFORM_DIM)),
                workers=int(d.get("workers", 1)),
                backends=dict(d.get("backends", {})),
                maps=dict(d.get("maps", {})),
                dwi=dict(d.get("dwi", {})),
                transform=d.get("transform"),
                inverse_transform=d.get("inverse_transform"),
                schema=d.get("schema"),
                output_dir=d.get("output_dir"),
                base_dir=str(base_dir),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc, base_dir=path.parent)

    def runtime_dict(self):
        """The parameters that influence results (hashed into the run manifest)."""
        return {
            "map_codes": list(self.map_codes),
            "sliding_window": self.sliding_window.to_dict(),
            "postprocess": self.postprocess.to_dict(),
            "input_space": self.input_space,
            "conform_dim": self.conform_dim,
        }

    def resolve(self, p):
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p


@dataclass
class PipelineResult:
    labels: LabelVolume  # FreeSurfer LUT ids, native grid
    fine: LabelVolume  # internal ids, native grid
    coarse: LabelVolume  # coarse group ids, native grid
    conformed_coarse: LabelVolume
    conformed_fine: LabelVolume
    manifest: dict


# stage functions


def _channels(maps, codes):
    missing = [c for c in codes if c not in maps]
    if missing:
        raise ConfigurationError(f"missing input maps {missing}")
    return [maps[c] for c in codes]


def run_coarse(maps, backend, schema: LabelSchema, cfg: SlidingWindowConfig | None = None,
               map_codes=DEFAULT_MAP_CODES, workers=1) -> LabelVolume:
    """Predict the background + seven-group map from the input scalar maps."""
    channels = _channels(maps, map_codes)
    n_classes = len(schema.groups) + 1
    if backend.n_classes != n_classes:
        raise BackendContractError(f"coarse backend must output {n_classes} classes, declares {backend.n_classes}")
    prob = sliding_window_predict(channels, backend, cfg, workers=workers)
    return LabelVolume(Volume3D(prob.argmax(), channels[0].affine, "int32"), schema, "coarse")


def build_fine_input(maps, coarse: LabelVolume):
    """Scalar maps plus the coarse map scaled to [0, 1] by the largest group id."""
    maps = list(maps)
    mask = (coarse.data.astype(np.float32) / np.float32(MAX_GROUP_ID)).astype(np.float32)
    return maps + [Volume3D(mask, coarse.volume.affine, "float32")]


def run_fine(stack, group, backend, schema: LabelSchema, cfg: SlidingWindowConfig | None = None, workers=1) -> LabelVolume:
    """Predict one fine-stage group; class i > 0 maps to the i-th label of the group's partition."""
    grp = schema.group(group)
    if grp.passthrough:
        raise ConfigurationError(f"group {group} ({grp.name}) has no fine stage")
    if backend.n_classes != len(grp.labels) + 1:
        raise BackendContractError(
            f"backend for group {group} ({grp.name}) must output {len(grp.labels) + 1} classes, declares {backend.n_classes}"
        )
    prob = sliding_window_predict(stack, backend, cfg, workers=workers)
    table = np.array([0, *grp.labels], dtype=np.int32)
    return LabelVolume(Volume3D(table[prob.argmax()], stack[0].affine, "int32"), schema, "fine-internal")


def _backend_key(key, schema):
    if key == "coarse":
        return "coarse"
    for g in schema.groups:
        if str(key) in (str(g.id), g.name):
            return g.id
    raise ConfigurationError(f"backend key {key!r} names no coarse group")


def check_backends(backends, schema: LabelSchema):
    """Normalise backend keys to ``"coarse"`` / group ids and require all six."""
    norm = {_backend_key(k, schema): v for k, v in backends.items()}
    needed = ["coarse"] + [g.id for g in schema.fine_groups]
    missing = [k if k == "coarse" else f"{k} ({schema.group(k).name})" for k in needed if k not in norm]
    if missing:
        raise ConfigurationError(f"missing backends for {missing}")
    return {k: norm[k] for k in needed}


def conformed_space(native_grid, transform: GridTransform | None, dim=CONFORM_DIM):
    """Target lattice for the conformed stage.

    A displacement field defines its own lattice; otherwise the conformed
    grid is centred on the native centre mapped through the inverse transform.
    """
    if transform is not None and transform.kind == "displacement":
        return transform.field_grid
    center = native_grid.center
    if transform is not None:
        center = transform.inverse().apply(center[None])[0]
    return conform_grid(native_grid, dim=dim, center=center)


@contextmanager
def _stage(name, timings):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except DwiparcError as exc:
        raise StageError(name, exc) from exc
    finally:
        timings.append({"stage": name, "seconds": round(time.perf_counter() - t0, 6)})


def run_pipeline(inputs, backends, schema: LabelSchema | None = None, config: PipelineConfig | None = None,
                 transform: GridTransform | None = None) -> PipelineResult:
    """Full framework: maps -> conformed space -> coarse -> 5 fine stages -> post-processing -> native LUT labels.

    ``inputs`` is a :class:`DwiSeries` (tensor fit and map derivation run
    first) or a dict of map code -> Volume3D.  ``backends`` maps ``"coarse"``
    and each fine-stage group id (or name) to a backend object.
    ``transform`` maps conformed-space world points to native world points;
    identity when omitted.  With ``config.input_space == "conformed"`` the
    maps are taken as already conformed and no resampling happens.
    """
    config = config or PipelineConfig()
    schema = schema or load_schema(None)
    timings = []
    with _stage("configuration", timings):
        backends = check_backends(backends, schema)
        for key, be in backends.items():
            want = len(config.map_codes) + (0 if key == "coarse" else 1)
            if be.in_channels != want:
                raise BackendContractError(f"backend {key!r} takes {be.in_channels} channels, pipeline feeds {want}")

    codes = config.map_codes
    sw = config.sliding_window
    if isinstance(inputs, DwiSeries):
        with _stage("fit_tensor", timings):
            tensors = fit_tensor(inputs)
        with _stage("derive_maps", timings):
            derived = derive_maps(eigendecompose(tensors, vectors=False), [CODE_TO_MAP[c] for c in codes])
            native_maps = {c: derived[CODE_TO_MAP[c]] for c in codes}
    else:
        native_maps = {c: inputs[c] if c in inputs else inputs.get(CODE_TO_MAP[c]) for c in codes}
        missing = [c for c, v in native_maps.items() if v is None]
        if missing:
            raise StageError("configuration", ConfigurationError(f"missing input maps {missing}"))
    native_grid = native_maps[codes[0]].grid

    with _stage("conform", timings):
        if config.input_space == "conformed":
            maps = native_maps
            conf_grid = native_grid
        else:
            conf_grid = conformed_space(native_grid, transform, config.conform_dim)
            maps = {c: resample_to(v, conf_grid, transform, "trilinear") for c, v in native_maps.items()}

    with _stage("coarse", timings):
        coarse = run_coarse(maps, backends["coarse"], schema, sw, codes, config.workers)

    fine_results = {}
    for grp in schema.fine_groups:
        with _stage(f"fine:{grp.name}", timings):
            stack = build_fine_input([maps[c] for c in codes], coarse)
            fine_results[grp.id] = run_fine(stack, grp.id, backends[grp.id], schema, sw, config.workers)

    with _stage("postprocess", timings):
        cleaned = postprocess_results(fine_results, coarse, config.postprocess)
        merged = merge_fine(coarse, cleaned)

    with _stage("to_native", timings):
        if config.input_space == "conformed":
            native_fine, native_coarse = merged, coarse
        else:
            inverse = transform.inverse() if transform is not None else None
            native_fine = to_native(merged, inverse, native_grid)
            native_coarse = to_native(coarse, inverse, native_grid)

    with _stage("to_freesurfer_lut", timings):
        lut = to_freesurfer_lut(native_fine)

    manifest = {
        "version": __version__,
        "config_hash": config_hash(config.runtime_dict()),
        "config": config.runtime_dict(),
        "schema": schema.name,
        "backends": {str(k): b.identity() for k, b in backends.items()},
        "timings": timings,
    }
    return PipelineResult(lut, native_fine, native_coarse, coarse, merged, manifest)


def load_inputs(config: PipelineConfig):
    """Read maps or DWI, transform and schema named in ``config``."""
    from .nifti import read_dwi, read_nifti, read_transform

    schema = load_schema(config.resolve(config.schema)) if config.schema else load_schema(None)
    if config.dwi:
        d = config.dwi
        inputs = read_dwi(config.resolve(d["path"]), config.resolve(d.get("bval")), config.resolve(d.get("bvec")))
    elif config.maps:
        inputs = {}
        for code, path in config.maps.items():
            code = {v: k for k, v in CODE_TO_MAP.items()}.get(code, code)
            inputs[code] = read_nifti(config.resolve(path))
    else:
        raise ConfigurationError("config needs either 'dwi' or 'maps'")
    transform = None
    if config.transform:
        transform = read_transform(config.resolve(config.transform), config.resolve(config.inverse_transform))
    return inputs, schema, transform


def build_backends(config: PipelineConfig, schema: LabelSchema):
    specs = check_backends(config.backends, schema)
    return {k: make_backend(v, config.sliding_window.patch_shape) for k, v in specs.items()}


def validate_paths(config: PipelineConfig):
    """Every referenced input path must exist before any compute starts."""
    paths = []
    if config.dwi:
        paths.append(config.dwi.get("path"))
        paths += [config.dwi.get("bval"), config.dwi.get("bvec")]
    paths += list(config.maps.values())
    paths += [config.transform, config.inverse_transform, config.schema]
    missing = [str(config.resolve(p)) for p in paths if p and not config.resolve(p).exists()]
    if missing:
        raise ConfigurationError(f"missing input files: {missing}")
