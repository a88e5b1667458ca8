"""Tensor files, model manifests, toy-model generation and reports.

Tensor file layout (all little-endian)::

    offset  size       field
    0       4          magic b"BTSR"
    4       1          version (1)
    5       1          dtype (0 = float32, 1 = float64)
    6       1          rank (1, 2 or 3)
    7       1          reserved, must be 0
    8       8 * rank   dims, unsigned 64-bit
    ...                payload, row-major

Manifests and reports are JSON documents written with sorted keys.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .model import AttentionBlock, CalibrationSet, LAYER_NAMES

__all__ = [
    "TensorFormatError",
    "BadMagic",
    "UnsupportedVersion",
    "UnsupportedDtype",
    "TruncatedPayload",
    "DimMismatch",
    "ManifestError",
    "InvalidDims",
    "IoFailure",
    "MAGIC",
    "encode_tensor",
    "decode_tensor",
    "write_tensor",
    "read_tensor",
    "Manifest",
    "write_manifest",
    "read_manifest",
    "load_model",
    "gen_toy_model",
    "write_report",
    "read_report",
    "dumps_report",
    "SCHEMA_VERSION",
    "PRNG_NAME",
]

MAGIC = b"BTSR"
VERSION = 1
SCHEMA_VERSION = 1
PRNG_NAME = "numpy.random.Philox"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFormatError(ValueError):
    pass


class BadMagic(TensorFormatError):
    pass


class UnsupportedVersion(TensorFormatError):
    pass


class UnsupportedDtype(TensorFormatError):
    pass


class TruncatedPayload(TensorFormatError):
    pass


class DimMismatch(TensorFormatError):
    pass


class ManifestError(ValueError):
    pass


class InvalidDims(ValueError):
    pass


class IoFailure(OSError):
    pass


def encode_tensor(m, dtype=np.float64):
    m = np.asarray(m)
    if m.ndim not in (1, 2, 3):
        raise DimMismatch(f"rank {m.ndim} not in (1, 2, 3)")
    code = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}.get(np.dtype(dtype))
    if code is None:
        raise UnsupportedDtype(f"cannot store dtype {dtype}")
    header = MAGIC + struct.pack("<BBBB", VERSION, code, m.ndim, 0)
    header += struct.pack(f"<{m.ndim}Q", *m.shape)
    return header + np.ascontiguousarray(m, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf, expected_shape=None):
    buf = bytes(buf)
    if len(buf) < 8:
        raise TruncatedPayload("header shorter than 8 bytes")
    if buf[:4] != MAGIC:
        raise BadMagic(f"bad magic {buf[:4]!r}")
    version, code, rank, reserved = struct.unpack_from("<BBBB", buf, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    if code not in _DTYPES:
        raise UnsupportedDtype(f"dtype code {code}")
    if rank not in (1, 2, 3) or reserved != 0:
        raise DimMismatch(f"rank {rank} / reserved byte {reserved}")
    offset = 8 + 8 * rank
    if len(buf) < offset:
        raise TruncatedPayload("dims truncated")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    dt = _DTYPES[code]
    need = dt.itemsize * math.prod(dims)
    have = len(buf) - offset
    if have < need:
        raise TruncatedPayload(f"payload has {have} bytes, expected {need}")
    if have > need:
        raise DimMismatch(f"payload has {have - need} trailing bytes")
    if expected_shape is not None and tuple(dims) != tuple(expected_shape):
        raise DimMismatch(f"shape {dims}, expected {tuple(expected_shape)}")
    return np.frombuffer(buf, dtype=dt, offset=offset).reshape(dims).copy()


def write_tensor(path, m, dtype=np.float64):
    try:
        Path(path).write_bytes(encode_tensor(m, dtype))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_tensor(path, expected_shape=None):
    """Read a tensor file; float32 payloads are widened to float64."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return decode_tensor(buf, expected_shape).astype(np.float64, copy=False)


# manifest -------------------------------------------------------------------


class Manifest(dict):
    """JSON manifest; paths are relative to the manifest's directory."""

    @property
    def root(self):
        return Path(self["_root"]) if "_root" in self else Path(".")


def write_manifest(path, d, heads, weights, calibration=(), causal=False, extra=None):
    doc = {
        "schema_version": SCHEMA_VERSION,
        "d": int(d),
        "heads": int(heads),
        "d_h": int(d) // int(heads),
        "causal": bool(causal),
        "weights": dict(weights),
        "calibration": list(calibration),
    }
    if extra:
        doc.update(extra)
    _write_json(path, doc)


def read_manifest(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: top level must be an object")
    for key in ("d", "heads", "d_h", "weights"):
        if key not in doc:
            raise ManifestError(f"{path}: missing field {key!r}")
    d, heads, d_h = doc["d"], doc["heads"], doc["d_h"]
    if not all(isinstance(v, int) and v > 0 for v in (d, heads, d_h)) or d != heads * d_h:
        raise ManifestError(f"{path}: inconsistent dims d={d}, heads={heads}, d_h={d_h}")
    weights = doc["weights"]
    if not isinstance(weights, dict) or set(weights) != set(LAYER_NAMES):
        raise ManifestError(f"{path}: weights must name exactly {LAYER_NAMES}")
    if not isinstance(doc.get("calibration", []), list):
        raise ManifestError(f"{path}: calibration must be a list")
    m = Manifest(doc)
    m["_root"] = str(path.parent)
    return m


def load_model(manifest):
    """Build the block and calibration set a manifest describes."""
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    d = manifest["d"]
    root = manifest.root
    weights = {}
    for name in LAYER_NAMES:
        p = root / manifest["weights"][name]
        if not p.is_file():
            raise ManifestError(f"missing weight file {p}")
        try:
            weights[name] = read_tensor(p, (d, d))
        except TensorFormatError as exc:
            raise ManifestError(f"{p}: {exc}") from None
    samples = []
    for rel in manifest.get("calibration", []):
        p = root / rel
        if not p.is_file():
            raise ManifestError(f"missing calibration file {p}")
        try:
            x = read_tensor(p)
        except TensorFormatError as exc:
            raise ManifestError(f"{p}: {exc}") from None
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1] != d:
            raise ManifestError(f"{p}: calibration tensor shape {x.shape} lacks {d} rows")
        samples.extend(x)
    block = AttentionBlock(heads=manifest["heads"], causal=bool(manifest.get("causal", False)),
                           **weights)
    calib = CalibrationSet(tuple(samples)) if samples else None
    return block, calib


def gen_toy_model(out_dir, d, heads, seq_len, n_samples, seed, causal=False):
    """Random attention block plus calibration data, written to ``out_dir``.

    Weights are i.i.d. normal scaled by ``1/sqrt(d)``; calibration samples
    are i.i.d. standard normal ``d x seq_len`` tensors. Streams come from
    Philox keyed by ``seed`` (weights and calibration use separate spawned
    streams), so the output is byte-for-byte reproducible.
    """
    if heads < 1 or d % heads or d // heads < 2:
        raise InvalidDims(f"need d = heads * d_h with d_h >= 2 (d={d}, heads={heads})")
    if seq_len < 1 or n_samples < 1:
        raise InvalidDims("seq_len and n_samples must be positive")
    root = np.random.SeedSequence(seed)
    w_seq, x_seq = root.spawn(2)
    w_rng = np.random.Generator(np.random.Philox(w_seq))
    x_rng = np.random.Generator(np.random.Philox(x_seq))
    weights = {n: w_rng.standard_normal((d, d)) / np.sqrt(d) for n in LAYER_NAMES}
    samples = [x_rng.standard_normal((d, seq_len)) for _ in range(n_samples)]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rel_w = {n: f"{n}.btsr" for n in LAYER_NAMES}
    for n in LAYER_NAMES:
        write_tensor(out / rel_w[n], weights[n])
    rel_x = [f"calib_{i:03d}.btsr" for i in range(n_samples)]
    for rel, x in zip(rel_x, samples):
        write_tensor(out / rel, x)
    write_manifest(
        out / "manifest.json", d, heads, rel_w, rel_x, causal,
        extra={"generator": {"prng": PRNG_NAME, "seed": int(seed), "seq_len": int(seq_len)}},
    )
    block = AttentionBlock(heads=heads, causal=causal, **weights)
    return block, CalibrationSet(tuple(samples))


# reports --------------------------------------------------------------------


def _check_finite(obj, where="report"):
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError(f"non-finite value in {where}")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{where}.{k}")
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            _check_finite(v, where)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dumps_report(report):
    doc = {"schema_version": SCHEMA_VERSION}
    doc.update(_plain(report))
    _check_finite(doc)
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_report(path, report):
    text = dumps_report(report)
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_report(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _write_json(path, doc):
    try:
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
