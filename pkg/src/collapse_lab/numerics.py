"""Dense numerics used by every other module.

Vectors and matrices are plain ``float64`` numpy arrays.  The functions here
check their preconditions and raise :class:`ContractError` instead of
returning garbage.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericalFailure

NORM_EPS = 1e-6


def as_vec(x, name="x") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ContractError(f"{name} must be one-dimensional, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{name} has non-finite entries")
    return a


def _same_length(a, b):
    a = as_vec(a, "a")
    b = as_vec(b, "b")
    if a.shape != b.shape:
        raise ContractError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def softmax(x, axis=-1) -> np.ndarray:
    """Softmax with max-subtraction.

    Works along ``axis`` for arrays of any rank; the 1-D case is the
    contract-checked path.
    """
    a = np.asarray(x, dtype=np.float64)
    if a.size == 0 or a.shape[axis] == 0:
        raise ContractError("softmax of an empty vector")
    if not np.all(np.isfinite(a)):
        raise ContractError("softmax input has non-finite entries")
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def total_variation(p, q, tol=1e-9) -> float:
    """Sum of absolute differences between two distributions.

    No factor of 1/2, so the range is [0, 2].
    """
    p, q = _same_length(p, q)
    for name, d in (("p", p), ("q", q)):
        if np.any(d < 0) or abs(d.sum() - 1.0) > tol:
            raise ContractError(f"{name} is not a probability distribution")
    return float(np.sum(np.abs(p - q)))


def l1_dist(a, b) -> float:
    a, b = _same_length(a, b)
    return float(np.sum(np.abs(a - b)))


def linf_dist(a, b) -> float:
    a, b = _same_length(a, b)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))


def rms_norm(x, scale=1.0, axis=-1) -> np.ndarray:
    """``scale * x / sqrt(mean(x**2) + 1e-6)`` along ``axis``."""
    if scale <= 0:
        raise ContractError("rms_norm scale must be positive")
    a = np.asarray(x, dtype=np.float64)
    if a.size == 0:
        raise ContractError("rms_norm of an empty vector")
    r = np.sqrt(np.mean(a * a, axis=axis, keepdims=True) + NORM_EPS)
    return scale * a / r


def rms_norm_backward(x, grad_out, scale=1.0) -> np.ndarray:
    """Vector-Jacobian product of :func:`rms_norm` along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    dot = np.sum(grad_out * x, axis=-1, keepdims=True)
    return scale * (grad_out / r - x * dot / (d * r**3))


def spectral_norm(w, max_iter=500, tol=1e-10, seed=0) -> float:
    """Largest singular value of ``w`` by power iteration on ``w.T @ w``."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(w.shape[1])
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(max_iter):
        y = w.T @ (w @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        new_sigma = float(np.linalg.norm(w @ x))
        if abs(new_sigma - sigma) <= tol * max(new_sigma, 1.0):
            sigma = new_sigma
            break
        sigma = new_sigma
    return sigma


class FormatTag(enum.Enum):
    BINARY64 = "f64"
    BINARY32 = "f32"
    BFLOAT16 = "bf16"
    BINARY16 = "f16"


_LAYOUT = {
    FormatTag.BINARY64: (52, 11),
    FormatTag.BINARY32: (23, 8),
    FormatTag.BFLOAT16: (7, 8),
    FormatTag.BINARY16: (10, 5),
}


@dataclass(frozen=True)
class FloatFormat:
    tag: FormatTag
    mantissa_bits: int
    exponent_bits: int

    def __post_init__(self):
        if _LAYOUT[self.tag] != (self.mantissa_bits, self.exponent_bits):
            raise ContractError(f"bit layout does not match {self.tag.name}")

    @classmethod
    def of(cls, tag) -> "FloatFormat":
        if isinstance(tag, str):
            tag = parse_format_tag(tag)
        m, e = _LAYOUT[tag]
        return cls(tag, m, e)

    @property
    def name(self) -> str:
        return self.tag.value

    @property
    def emax(self) -> int:
        return 2 ** (self.exponent_bits - 1) - 1

    @property
    def emin(self) -> int:
        return 1 - self.emax

    @property
    def max_finite(self) -> float:
        return float(np.ldexp(2.0 - 2.0 ** -self.mantissa_bits, self.emax))

    @property
    def epsilon(self) -> float:
        """Gap between 1 and the next representable value."""
        return 2.0 ** -self.mantissa_bits


BINARY64 = FloatFormat.of(FormatTag.BINARY64)
BINARY32 = FloatFormat.of(FormatTag.BINARY32)
BFLOAT16 = FloatFormat.of(FormatTag.BFLOAT16)
BINARY16 = FloatFormat.of(FormatTag.BINARY16)

_ALIASES = {
    "f64": FormatTag.BINARY64, "fp64": FormatTag.BINARY64, "binary64": FormatTag.BINARY64,
    "float64": FormatTag.BINARY64,
    "f32": FormatTag.BINARY32, "fp32": FormatTag.BINARY32, "binary32": FormatTag.BINARY32,
    "float32": FormatTag.BINARY32,
    "bf16": FormatTag.BFLOAT16, "bfloat16": FormatTag.BFLOAT16,
    "f16": FormatTag.BINARY16, "fp16": FormatTag.BINARY16, "binary16": FormatTag.BINARY16,
    "float16": FormatTag.BINARY16,
}


def parse_format_tag(name: str) -> FormatTag:
    try:
        return _ALIASES[name.lower()]
    except KeyError:
        raise ContractError(
            f"unknown precision {name!r}; expected one of {sorted(set(_ALIASES))}"
        ) from None


def round_to_format(x, fmt: FloatFormat, strict=False):
    """Round to the nearest value of ``fmt`` (ties to even), returned as float64.

    Accepts a scalar or an array.  Subnormals of the target format are
    honoured.  Values beyond the format's range become signed infinities,
    or raise :class:`NumericalFailure` when ``strict``.
    """
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ContractError("round_to_format input has non-finite entries")
    if fmt.tag is FormatTag.BINARY64:
        out = a.copy()
    else:
        _, k = np.frexp(a)
        # frexp gives |a| = f * 2**k with f in [0.5, 1), so the unbiased exponent is k - 1
        exp = np.maximum(k - 1, fmt.emin)
        shift = fmt.mantissa_bits - exp
        out = np.ldexp(np.rint(np.ldexp(a, shift)), -shift)
        over = np.abs(out) > fmt.max_finite
        if np.any(over):
            if strict:
                raise NumericalFailure(f"value overflows {fmt.name}")
            out = np.where(over, np.copysign(np.inf, a), out)
    if out.ndim == 0:
        return float(out)
    return out
