"""Model and density file formats.

Binary layout (all little-endian):

    magic       4 bytes  b"TPBS" (model) / b"TPDF" (density)
    version     u32
    model:      N u32, R u32, M u32,
                degrees u32[N], knot_counts u32[N], knots f64[sum counts],
                coeffs f64[R*K_n] per dimension (row-major),
                out_vectors f64[R*M],
                has_scaler u32, then eps f64, mins f64[N], maxs f64[N]
    density:    S u32, N u32, bins u32[N],
                weights f64[S],
                bin values f64[S*bins_n] per dimension (row-major)

A text mode (one value per whitespace-separated token, repr-exact floats,
same field order) exists for diffing; files are detected by their first
bytes.  load(save(m)) reproduces outputs bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ScalerParams, TpbsModel
from .splines import SplineSpace

__all__ = [
    "ModelFileError",
    "BadMagicError",
    "BadVersionError",
    "TruncatedFileError",
    "DimensionMismatchError",
    "save_model",
    "load_model",
    "save_density",
    "load_density",
]

FORMAT_VERSION = 1
_MODEL_MAGIC = b"TPBS"
_DENSITY_MAGIC = b"TPDF"


class ModelFileError(Exception):
    """Base error for model/density file problems."""


class BadMagicError(ModelFileError):
    pass


class BadVersionError(ModelFileError):
    pass


class TruncatedFileError(ModelFileError):
    pass


class DimensionMismatchError(ModelFileError):
    pass


class _Reader:
    """Sequential binary reader that raises TruncatedFileError on short reads."""

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise TruncatedFileError(
                f"{self.path}: needed {count} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else list(vals)

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").copy()


class _TokenReader:
    """Sequential token reader for the text mode."""

    def __init__(self, text: str, path: str):
        self.tokens = text.split()
        self.pos = 0
        self.path = path

    def take(self, count: int) -> list[str]:
        if self.pos + count > len(self.tokens):
            raise TruncatedFileError(
                f"{self.path}: needed {count} tokens at position {self.pos}, "
                f"file has {len(self.tokens)}"
            )
        out = self.tokens[self.pos : self.pos + count]
        self.pos += count
        return out

    def u32(self, count: int = 1):
        vals = [int(t) for t in self.take(count)]
        return vals[0] if count == 1 else vals

    def f64(self, count: int) -> np.ndarray:
        return np.array([float(t) for t in self.take(count)])


def _check_header(reader, magic: bytes, path: str) -> None:
    got = reader.take(len(magic)) if isinstance(reader, _Reader) else reader.take(1)[0]
    if isinstance(reader, _Reader):
        if got != magic:
            raise BadMagicError(f"{path}: bad magic {got!r}, expected {magic!r}")
    else:
        if got != magic.decode():
            raise BadMagicError(f"{path}: bad magic {got!r}, expected {magic.decode()!r}")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise BadVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")


def _model_fields(model: TpbsModel):
    """Flat (u32 header values, f64 payload arrays) in serialization order."""
    n, r, m = model.input_dim, model.rank, model.output_dim
    header = [n, r, m]
    header += [sp.degree for sp in model.spaces]
    header += [len(sp.knots) for sp in model.spaces]
    payload = [sp.knots for sp in model.spaces]
    payload += [c.ravel() for c in model.coeffs]
    payload.append(model.out_vectors.ravel())
    return header, payload


def save_model(model: TpbsModel, path: str | Path, text: bool = False) -> None:
    """Write a model file (binary by default, text mode for diffing)."""
    path = Path(path)
    header, payload = _model_fields(model)
    scaler = model.scaler
    if text:
        tokens: list[str] = [_MODEL_MAGIC.decode(), str(FORMAT_VERSION)]
        tokens += [str(v) for v in header]
        for arr in payload:
            tokens += [repr(float(v)) for v in arr]
        tokens.append("1" if scaler is not None else "0")
        if scaler is not None:
            tokens.append(repr(float(scaler.eps)))
            tokens += [repr(float(v)) for v in scaler.mins]
            tokens += [repr(float(v)) for v in scaler.maxs]
        path.write_text("\n".join(tokens) + "\n")
        return
    blob = bytearray()
    blob += _MODEL_MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += struct.pack(f"<{len(header)}I", *header)
    for arr in payload:
        blob += np.asarray(arr, dtype="<f8").tobytes()
    blob += struct.pack("<I", 1 if scaler is not None else 0)
    if scaler is not None:
        blob += struct.pack("<d", scaler.eps)
        blob += np.asarray(scaler.mins, dtype="<f8").tobytes()
        blob += np.asarray(scaler.maxs, dtype="<f8").tobytes()
    path.write_bytes(bytes(blob))


def load_model(path: str | Path) -> TpbsModel:
    """Read a model file written by :func:`save_model` (either mode).

    Raises:
        BadMagicError, BadVersionError, TruncatedFileError,
        DimensionMismatchError: per failure mode.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:5] == _MODEL_MAGIC + b"\n":  # text mode: magic on its own line
        reader = _TokenReader(raw.decode("utf-8", errors="replace"), str(path))
    else:
        reader = _Reader(raw, str(path))
    _check_header(reader, _MODEL_MAGIC, str(path))
    n = reader.u32()
    r = reader.u32()
    m = reader.u32()
    if n < 1 or r < 1 or m < 1:
        raise DimensionMismatchError(f"{path}: nonpositive dims N={n} R={r} M={m}")
    degrees = reader.u32(n) if n > 1 else [reader.u32()]
    knot_counts = reader.u32(n) if n > 1 else [reader.u32()]
    spaces = []
    for deg, count in zip(degrees, knot_counts):
        num_basis = count - deg - 1
        if num_basis < deg + 1:
            raise DimensionMismatchError(
                f"{path}: knot count {count} inconsistent with degree {deg}"
            )
        knots = reader.f64(count)
        spaces.append(
            SplineSpace(degree=deg, num_basis=num_basis, knots=knots, quad_order=deg + 1)
        )
    coeffs = [reader.f64(r * sp.num_basis).reshape(r, sp.num_basis) for sp in spaces]
    out_vectors = reader.f64(r * m).reshape(r, m)
    scaler = None
    if reader.u32() == 1:
        eps = float(reader.f64(1)[0])
        mins = reader.f64(n)
        maxs = reader.f64(n)
        scaler = ScalerParams(mins=mins, maxs=maxs, eps=eps)
    try:
        return TpbsModel(spaces=spaces, coeffs=coeffs, out_vectors=out_vectors, scaler=scaler)
    except ValueError as exc:
        raise DimensionMismatchError(f"{path}: {exc}") from exc


def save_density(density, path: str | Path, text: bool = False) -> None:
    """Write a density file; mirrors the model format with magic TPDF."""
    path = Path(path)
    s = density.num_components
    n = density.input_dim
    bins = [b.shape[1] for b in density.bins]
    if text:
        tokens = [_DENSITY_MAGIC.decode(), str(FORMAT_VERSION), str(s), str(n)]
        tokens += [str(b) for b in bins]
        tokens += [repr(float(v)) for v in density.weights]
        for n_i in range(n):
            tokens += [repr(float(v)) for v in density.bins[n_i].ravel()]
        path.write_text("\n".join(tokens) + "\n")
        return
    blob = bytearray()
    blob += _DENSITY_MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += struct.pack("<II", s, n)
    blob += struct.pack(f"<{n}I", *bins)
    blob += np.asarray(density.weights, dtype="<f8").tobytes()
    for n_i in range(n):
        blob += np.asarray(density.bins[n_i], dtype="<f8").tobytes()
    path.write_bytes(bytes(blob))


def load_density(path: str | Path):
    """Read a density file written by :func:`save_density`."""
    from .density import DensityModel

    path = Path(path)
    raw = path.read_bytes()
    if raw[:5] == _DENSITY_MAGIC + b"\n":  # text mode: magic on its own line
        reader = _TokenReader(raw.decode("utf-8", errors="replace"), str(path))
    else:
        reader = _Reader(raw, str(path))
    _check_header(reader, _DENSITY_MAGIC, str(path))
    s = reader.u32()
    n = reader.u32()
    if s < 1 or n < 1:
        raise DimensionMismatchError(f"{path}: nonpositive dims S={s} N={n}")
    bins = reader.u32(n) if n > 1 else [reader.u32()]
    weights = reader.f64(s)
    bin_arrays = [reader.f64(s * b).reshape(s, b) for b in bins]
    try:
        return DensityModel(weights=weights, bins=bin_arrays)
    except ValueError as exc:
        raise DimensionMismatchError(f"{path}: {exc}") from exc
