"""Deterministic dense-tensor substrate.

All values travel as row-major numpy arrays, float64 on verification paths
(float32 is accepted for bulk forward passes). Every public operation checks
its output for NaN/Inf and raises NumericError on violation; shape problems
raise ShapeError before any arithmetic runs.

Seeded randomness uses numpy's PCG64 generator exclusively: equal seeds give
bit-identical streams on every platform numpy supports.

A process-global multiply-accumulate counter can be armed with
``count_macs()``; while armed, ``matmul`` and ``depthwise_conv1d`` record the
MACs they perform. The analytic cost model is validated against forward
passes traversed under this counter.
"""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is out of contract."""


class NumericError(ValueError):
    """An operation produced NaN or Inf."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the only randomness source in the package."""
    return np.random.Generator(np.random.PCG64(int(seed)))


# ---------------------------------------------------------------------------
# MAC counting

class MacCounter:
    """Accumulates multiply-accumulate counts from ops run while armed."""

    def __init__(self) -> None:
        self.macs = 0

    @property
    def flops(self) -> int:
        """FLOPs under the multiply-accumulate = 2 FLOPs convention."""
        return 2 * self.macs


_ACTIVE_COUNTERS: list[MacCounter] = []


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Arm a counter for the duration of the block. Not thread-safe."""
    counter = MacCounter()
    _ACTIVE_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTERS.remove(counter)


def _record_macs(n: int) -> None:
    for counter in _ACTIVE_COUNTERS:
        counter.macs += n


def _check_finite(name: str, out: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{name} produced non-finite values")
    return out


# ---------------------------------------------------------------------------
# Core ops

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a 2-D (m, k) by a 2-D (k, n) array."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    _record_macs(a.shape[0] * a.shape[1] * b.shape[1])
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return _check_finite("matmul", out)


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, always max-subtracted for stability.

    -inf entries (masked logits) map to exact zeros.
    """
    x = np.asarray(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return _check_finite("softmax", e / np.sum(e, axis=-1, keepdims=True))


def depthwise_conv1d(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 1-D cross-correlation with same padding.

    x: (C, L) signal, kernel: (C, K) with K odd. Output keeps length L;
    K // 2 zeros are assumed on each side.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    if x.ndim != 2 or kernel.ndim != 2:
        raise ShapeError("depthwise_conv1d expects 2-D x and kernel")
    if x.shape[0] != kernel.shape[0]:
        raise ShapeError(f"channel counts differ: x {x.shape} kernel {kernel.shape}")
    k = kernel.shape[1]
    if k % 2 == 0:
        raise ConfigError(f"kernel width must be odd, got {k}")
    channels, length = x.shape
    pad = k // 2
    padded = np.zeros((channels, length + 2 * pad), dtype=x.dtype)
    padded[:, pad:pad + length] = x
    out = np.zeros_like(x)
    for j in range(k):
        out += kernel[:, j:j + 1] * padded[:, j:j + length]
    _record_macs(channels * length * k)
    return _check_finite("depthwise_conv1d", out)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x). Also known as SiLU."""
    x = np.asarray(x)
    return _check_finite("swish", x * sigmoid(x))


silu = swish


def swish_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(np.asarray(x))
    return s + x * s * (1.0 - s)


_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU."""
    x = np.asarray(x)
    return _check_finite("gelu", 0.5 * x * (1.0 + erf(x / _SQRT2)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def sinusoid_positions(positions: np.ndarray | list[int], dim: int) -> np.ndarray:
    """Fixed sinusoidal encodings, one row per position.

    Even channels carry sin(pos / 10000^(c/dim)), odd channels the matching
    cos. Position 0 therefore encodes as zeros on sin channels and ones on
    cos channels.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    out = np.zeros((pos.shape[0], dim), dtype=np.float64)
    even = np.arange(0, dim, 2)
    rates = 1.0 / np.power(10000.0, even / dim)
    angles = pos * rates
    out[:, even] = np.sin(angles)
    odd = even + 1
    odd = odd[odd < dim]
    out[:, odd] = np.cos(angles[:, : odd.shape[0]])
    return out


# ---------------------------------------------------------------------------
# Tensor file I/O
#
# A manifest is a text file of lines `name shape=d0xd1x... dtype=f64`; the
# companion `.bin` file holds the raw little-endian row-major values of each
# tensor, concatenated in manifest order.

_DTYPES = {"f64": "<f8", "f32": "<f4"}
_DTYPE_NAMES = {np.dtype(np.float64): "f64", np.dtype(np.float32): "f32"}


def _bin_path(manifest_path: Path) -> Path:
    return manifest_path.with_suffix(".bin")


def save_tensors(manifest_path: str | Path, named: Mapping[str, np.ndarray]) -> None:
    """Write a tensor manifest and its companion binary file."""
    manifest_path = Path(manifest_path)
    lines = []
    blobs = []
    for name, arr in named.items():
        arr = np.asarray(arr)
        if " " in name:
            raise ConfigError(f"tensor name may not contain spaces: {name!r}")
        dtype_name = _DTYPE_NAMES.get(arr.dtype)
        if dtype_name is None:
            raise ConfigError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        shape = "x".join(str(d) for d in arr.shape)
        lines.append(f"{name} shape={shape} dtype={dtype_name}")
        blobs.append(np.ascontiguousarray(arr).astype(_DTYPES[dtype_name]).tobytes())
    manifest_path.write_text("\n".join(lines) + "\n")
    _bin_path(manifest_path).write_bytes(b"".join(blobs))


def load_tensors(manifest_path: str | Path) -> dict[str, np.ndarray]:
    """Read back tensors written by save_tensors, in manifest order."""
    manifest_path = Path(manifest_path)
    raw = _bin_path(manifest_path).read_bytes()
    out: dict[str, np.ndarray] = {}
    offset = 0
    for line in manifest_path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            name, shape_field, dtype_field = line.split(" ")
            shape = tuple(int(d) for d in shape_field.removeprefix("shape=").split("x"))
            dtype = _DTYPES[dtype_field.removeprefix("dtype=")]
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"malformed manifest line: {line!r}") from exc
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(dtype).itemsize
        if offset + nbytes > len(raw):
            raise ConfigError(f"binary file too short for tensor {name!r}")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        out[name] = arr.astype(np.dtype(dtype).newbyteorder("=")).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise ConfigError("binary file has trailing bytes not covered by the manifest")
    return out
