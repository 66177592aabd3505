"""Segmenter backends: the patch-in / class-scores-out contract.

Out-of-process backends speak a framed binary protocol over stdin/stdout.
Every message is a 28-byte little-endian header followed by a float32 payload::

    magic     4s   b"DWPT"
    channels  u32  channels in the payload (C for requests, K for responses)
    classes   u32  class count K the caller expects
    nx,ny,nz  u32  patch shape
    dtype     u32  1 = float32

The payload is channel-major; within a channel x varies fastest.  A backend
process answers each request with exactly one response and exits on EOF.
``python -m dwiparc.backends <name> ...`` serves the built-in backends.
"""

from __future__ import annotations

import json
import os
import queue
import struct
import subprocess
import sys
import threading

import numpy as np

from .errors import BackendContractError, BackendError

MAGIC = b"DWPT"
HEADER = struct.Struct("<4sIIIIII")
DTYPE_FLOAT32 = 1
TIMEOUT_ENV = "DWIPARC_BACKEND_TIMEOUT"
DEFAULT_TIMEOUT = 600.0


def encode_message(array, n_classes):
    """Frame a ``(channels, nx, ny, nz)`` array."""
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim != 4:
        raise ValueError(f"expected (channels, nx, ny, nz), got shape {arr.shape}")
    c, nx, ny, nz = arr.shape
    head = HEADER.pack(MAGIC, c, n_classes, nx, ny, nz, DTYPE_FLOAT32)
    # channel-major, x-fastest within each channel
    return head + np.ascontiguousarray(arr.transpose(0, 3, 2, 1)).tobytes()


def decode_header(raw):
    if len(raw) != HEADER.size:
        raise BackendError(f"truncated header ({len(raw)} of {HEADER.size} bytes)")
    magic, c, k, nx, ny, nz, dtype = HEADER.unpack(raw)
    if magic != MAGIC:
        raise BackendError(f"bad message magic {magic!r}")
    if dtype != DTYPE_FLOAT32:
        raise BackendError(f"unsupported payload dtype code {dtype}")
    return c, k, (nx, ny, nz)


def decode_payload(raw, channels, shape):
    nx, ny, nz = shape
    need = channels * nx * ny * nz * 4
    if len(raw) != need:
        raise BackendError(f"truncated payload ({len(raw)} of {need} bytes)")
    arr = np.frombuffer(raw, dtype="<f4").reshape(channels, nz, ny, nx)
    return arr.transpose(0, 3, 2, 1).astype(np.float32)


def read_message(stream):
    """Read one framed message; returns ``None`` on clean EOF."""
    raw = _read_exact(stream, HEADER.size)
    if not raw:
        return None
    c, k, shape = decode_header(raw)
    payload = _read_exact(stream, c * shape[0] * shape[1] * shape[2] * 4)
    return decode_payload(payload, c, shape), k


def _read_exact(stream, n):
    chunks, got = [], 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            break
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


class SegmenterBackend:
    """Base class.  Subclasses implement :meth:`predict`.

    ``patch_shape`` of ``None`` accepts any patch size.
    """

    name = "backend"

    def __init__(self, in_channels, n_classes, patch_shape=None):
        self.in_channels = int(in_channels)
        self.n_classes = int(n_classes)
        self.patch_shape = tuple(patch_shape) if patch_shape is not None else None

    def predict(self, patch):
        raise NotImplementedError

    def __call__(self, patch):
        patch = np.asarray(patch, dtype=np.float32)
        if patch.ndim != 4 or patch.shape[0] != self.in_channels:
            raise BackendContractError(
                f"{self.name}: expected {self.in_channels} input channels, got patch of shape {patch.shape}"
            )
        if self.patch_shape is not None and patch.shape[1:] != self.patch_shape:
            raise BackendContractError(f"{self.name}: declared patch {self.patch_shape}, got {patch.shape[1:]}")
        out = np.asarray(self.predict(patch), dtype=np.float32)
        if out.shape != (self.n_classes,) + patch.shape[1:]:
            raise BackendContractError(
                f"{self.name}: returned shape {out.shape}, expected {(self.n_classes,) + patch.shape[1:]}"
            )
        return out

    def close(self):
        pass

    def identity(self):
        """Stable description used in run manifests."""
        return {"name": self.name, "in_channels": self.in_channels, "n_classes": self.n_classes}


class ConstantBackend(SegmenterBackend):
    """Emits the same class-score vector at every voxel."""

    name = "constant"

    def __init__(self, scores, in_channels, patch_shape=None):
        self.scores = np.asarray(scores, dtype=np.float32)
        super().__init__(in_channels, len(self.scores), patch_shape)

    def predict(self, patch):
        return np.broadcast_to(self.scores[:, None, None, None], (self.n_classes,) + patch.shape[1:]).copy()

    def identity(self):
        return dict(super().identity(), scores=self.scores.tolist())


class OracleBackend(SegmenterBackend):
    """One-hot predictor that decodes the true label from an input channel.

    The label at a voxel is ``round(patch[channel] / scale)``; ``classes`` maps
    that label to an output class index (unmapped labels become class 0).
    Phantoms built for testing encode their ground truth this way, which
    makes the backend a pure function of the patch.
    """

    name = "oracle"

    def __init__(self, in_channels, n_classes, classes, channel=0, scale=1.0, patch_shape=None):
        super().__init__(in_channels, n_classes, patch_shape)
        self.classes = {int(k): int(v) for k, v in dict(classes).items()}
        if any(not 0 <= v < n_classes for v in self.classes.values()):
            raise BackendContractError("oracle class index out of range")
        self.channel = int(channel)
        self.scale = float(scale)
        size = max(self.classes, default=0) + 1
        self._table = np.zeros(size, dtype=np.int64)
        for k, v in self.classes.items():
            self._table[k] = v

    def predict(self, patch):
        labels = np.rint(patch[self.channel].astype(np.float64) / self.scale).astype(np.int64)
        ok = (labels >= 0) & (labels < self._table.size)
        cls = np.where(ok, self._table[np.clip(labels, 0, self._table.size - 1)], 0)
        out = np.zeros((self.n_classes,) + patch.shape[1:], dtype=np.float32)
        np.put_along_axis(out, cls[None], 1.0, axis=0)
        return out

    def identity(self):
        return dict(super().identity(), channel=self.channel, scale=self.scale, classes=sorted(self.classes.items()))


class ProcessBackend(SegmenterBackend):
    """Backend living in external processes speaking the framed protocol.

    Processes are started lazily, reused across requests, and pooled (one
    in-flight request per process).
    """

    name = "process"

    def __init__(self, command, in_channels, n_classes, patch_shape=None, pool_size=1, timeout=None, env=None):
        super().__init__(in_channels, n_classes, patch_shape)
        self.command = [str(c) for c in command]
        self.timeout = float(timeout if timeout is not None else os.environ.get(TIMEOUT_ENV, DEFAULT_TIMEOUT))
        self.env = env
        self._idle = queue.LifoQueue()
        self._all = []
        self._lock = threading.Lock()
        self.pool_size = max(1, int(pool_size))

    def _acquire(self):
        try:
            return self._idle.get_nowait()
        except queue.Empty:
            pass
        with self._lock:
            if len(self._all) < self.pool_size:
                try:
                    proc = subprocess.Popen(
                        self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.PIPE, env=self.env
                    )
                except OSError as exc:
                    raise BackendError(f"cannot launch backend {self.command}: {exc}") from exc
                self._all.append(proc)
                return proc
        return self._idle.get()

    def predict(self, patch):
        proc = self._acquire()
        result = {}

        def exchange():
            try:
                proc.stdin.write(encode_message(patch, self.n_classes))
                proc.stdin.flush()
                result["msg"] = read_message(proc.stdout)
            except Exception as exc:  # surfaced below
                result["err"] = exc

        worker = threading.Thread(target=exchange, daemon=True)
        worker.start()
        worker.join(self.timeout)
        if worker.is_alive():
            proc.kill()
            self._drop(proc)
            raise BackendError(f"backend {self.command[0]} timed out after {self.timeout:g} s")
        if "err" in result or result.get("msg") is None:
            err = result.get("err")
            stderr = self._drain_stderr(proc)
            self._drop(proc)
            raise BackendError(f"backend {self.command[0]} failed: {err or 'no response'} {stderr}".strip())
        self._idle.put(proc)
        scores, _ = result["msg"]
        return scores

    def _drop(self, proc):
        with self._lock:
            if proc in self._all:
                self._all.remove(proc)

    @staticmethod
    def _drain_stderr(proc):
        try:
            proc.kill()
            return proc.stderr.read().decode(errors="replace")[-500:]
        except Exception:
            return ""

    def close(self):
        with self._lock:
            procs, self._all = self._all, []
        for proc in procs:
            try:
                proc.stdin.close()
                proc.wait(timeout=5)
            except Exception:
                proc.kill()
            for s in (proc.stdout, proc.stderr):
                s.close()
        self._idle = queue.LifoQueue()

    def identity(self):
        return dict(super().identity(), command=self.command)


def make_backend(spec, patch_shape=None):
    """Build a backend from a launch spec (dict).

    ``{"command": [...], "in_channels": C, "n_classes": K}`` starts a process;
    ``{"builtin": "oracle" | "constant", ...}`` instantiates in-process.
    """
    spec = dict(spec)
    if "command" in spec:
        return ProcessBackend(
            spec["command"], spec["in_channels"], spec["n_classes"], patch_shape,
            pool_size=spec.get("pool_size", 1), timeout=spec.get("timeout"),
        )
    kind = spec.get("builtin")
    if kind == "oracle":
        return OracleBackend(
            spec["in_channels"], spec["n_classes"], _int_keys(spec["classes"]),
            spec.get("channel", 0), spec.get("scale", 1.0), patch_shape,
        )
    if kind == "constant":
        return ConstantBackend(spec["scores"], spec["in_channels"], patch_shape)
    raise BackendContractError(f"backend spec needs 'command' or a known 'builtin', got {sorted(spec)}")


def _int_keys(mapping):
    if isinstance(mapping, list):
        return {int(k): int(v) for k, v in mapping}
    return {int(k): int(v) for k, v in mapping.items()}


def serve(backend, instream=None, outstream=None):
    """Answer framed requests until EOF."""
    instream = instream or sys.stdin.buffer
    outstream = outstream or sys.stdout.buffer
    while True:
        msg = read_message(instream)
        if msg is None:
            return
        patch, k = msg
        if k != backend.n_classes:
            raise BackendContractError(f"caller expects {k} classes, backend has {backend.n_classes}")
        outstream.write(encode_message(backend(patch), backend.n_classes))
        outstream.flush()


def main(argv=None):
    import argparse

    parser = argparse.ArgumentParser(prog="python -m dwiparc.backends", description="Serve a built-in backend over stdin/stdout.")
    parser.add_argument("spec", help="JSON backend spec with a 'builtin' key, or @file.json")
    args = parser.parse_args(argv)
    text = args.spec
    if text.startswith("@"):
        with open(text[1:]) as fh:
            text = fh.read()
    serve(make_backend(json.loads(text)))


if __name__ == "__main__":
    main()
