"""Positional-encoding schemes for single-head causal attention.

Each scheme acts on attention scores in three steps: a position-dependent
map applied to queries, the same kind of map applied to keys, and an additive
bias that depends on the query/key positions.  ``score`` composes them for a
single pair; the model uses the vectorised pieces directly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import CausalityError, ContractError


class PEKind(enum.Enum):
    NOPE = "nope"
    SINUSOIDAL = "ape"
    ROPE = "rope"
    ALIBI = "alibi"


# single-head instance of the geometric ALiBi slope rule 2**(-8h/H), h = H = 1
DEFAULT_ALIBI_SLOPE = 2.0**-8


@dataclass(frozen=True)
class PEScheme:
    """Positional-encoding configuration.

    ``placement`` only matters for the sinusoidal scheme: ``"score"`` adds the
    sinusoid to queries and keys inside the score, ``"embed"`` adds it once to
    the token vectors before the first layer.
    """

    kind: PEKind = PEKind.NOPE
    dim: int = 64
    base_theta: float = 10000.0
    slope: float = DEFAULT_ALIBI_SLOPE
    placement: str = "score"

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 2:
            raise ContractError("positional-encoding dim must be a positive even integer")
        if self.base_theta <= 1:
            raise ContractError("base_theta must exceed 1")
        if self.slope <= 0:
            raise ContractError("ALiBi slope must be positive")
        if self.placement not in ("score", "embed"):
            raise ContractError(f"unknown placement {self.placement!r}")

    @property
    def tag(self) -> str:
        if self.kind is PEKind.SINUSOIDAL and self.placement == "embed":
            return "ape-embed"
        return self.kind.value

    @property
    def frequencies(self) -> np.ndarray:
        t = np.arange(self.dim // 2, dtype=np.float64)
        return self.base_theta ** (-2.0 * t / self.dim)

    @property
    def in_score(self) -> bool:
        return not (self.kind is PEKind.SINUSOIDAL and self.placement == "embed")

    def sinusoids(self, positions) -> np.ndarray:
        """Rows ``s_m`` with ``s_m[2t] = sin(m w_t)`` and ``s_m[2t+1] = cos(m w_t)``."""
        pos = np.asarray(positions, dtype=np.float64)
        ang = pos[..., None] * self.frequencies
        out = np.empty(pos.shape + (self.dim,))
        out[..., 0::2] = np.sin(ang)
        out[..., 1::2] = np.cos(ang)
        return out

    def rotate(self, x, positions, inverse=False) -> np.ndarray:
        """Rotate each pair ``(x[2t], x[2t+1])`` by angle ``m * w_t``."""
        x = np.asarray(x, dtype=np.float64)
        pos = np.asarray(positions, dtype=np.float64)
        ang = pos[..., None] * self.frequencies
        if inverse:
            ang = -ang
        c, s = np.cos(ang), np.sin(ang)
        even, odd = x[..., 0::2], x[..., 1::2]
        out = np.empty(np.broadcast_shapes(x.shape, ang.shape[:-1] + (self.dim,)))
        out[..., 0::2] = even * c - odd * s
        out[..., 1::2] = even * s + odd * c
        return out

    def transform(self, x, positions) -> np.ndarray:
        """Position-dependent map applied to queries and keys alike."""
        if self.kind is PEKind.ROPE:
            return self.rotate(x, positions)
        if self.kind is PEKind.SINUSOIDAL and self.placement == "score":
            return np.asarray(x, dtype=np.float64) + self.sinusoids(positions)
        return np.asarray(x, dtype=np.float64)

    def transform_backward(self, grad, positions) -> np.ndarray:
        """Transpose of :meth:`transform` applied to a cotangent."""
        if self.kind is PEKind.ROPE:
            return self.rotate(grad, positions, inverse=True)
        return grad

    def bias(self, qpos, kpos) -> np.ndarray:
        """Additive score term for query positions ``qpos`` and key positions ``kpos``."""
        qpos = np.asarray(qpos, dtype=np.float64)
        kpos = np.asarray(kpos, dtype=np.float64)
        if self.kind is PEKind.ALIBI:
            return -self.slope * (qpos[..., :, None] - kpos[..., None, :])
        return np.zeros(qpos.shape + kpos.shape[-1:])


def nope(dim=64) -> PEScheme:
    return PEScheme(PEKind.NOPE, dim)


def parse_scheme(name: str, dim=64, theta=10000.0, slope=DEFAULT_ALIBI_SLOPE) -> PEScheme:
    name = name.lower()
    if name in ("ape", "sinusoidal"):
        return PEScheme(PEKind.SINUSOIDAL, dim, theta, slope, "score")
    if name == "ape-embed":
        return PEScheme(PEKind.SINUSOIDAL, dim, theta, slope, "embed")
    try:
        kind = PEKind(name)
    except ValueError:
        raise ContractError(
            f"unknown positional encoding {name!r}; expected nope, ape, ape-embed, rope or alibi"
        ) from None
    return PEScheme(kind, dim, theta, slope)


def score(q, k, i: int, j: int, scheme: PEScheme) -> float:
    """Attention logit of query ``q`` at position ``i`` against key ``k`` at ``j``."""
    if j > i:
        raise CausalityError(f"key position {j} is after query position {i}")
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != (scheme.dim,) or k.shape != (scheme.dim,):
        raise ContractError(f"q and k must have length {scheme.dim}")
    qt = scheme.transform(q, i)
    kt = scheme.transform(k, j)
    b = scheme.bias(np.array([i]), np.array([j]))[0, 0]
    return float(qt @ kt / np.sqrt(scheme.dim) + b)


def decay_profile(scheme: PEScheme, q, k, max_dist: int) -> np.ndarray:
    """``|score(q, k, i, i - D) - score_nope(q, k)|`` for ``D = 0..max_dist``.

    ``q`` and ``k`` may be single vectors or ``(m, dim)`` batches of samples,
    in which case the profile is averaged over samples.  The query sits at
    position ``max_dist`` so every key position is non-negative.
    """
    if max_dist < 1:
        raise ContractError("max_dist must be at least 1")
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    k = np.atleast_2d(np.asarray(k, dtype=np.float64))
    i = max_dist
    dists = np.arange(max_dist + 1)
    kpos = i - dists
    base = np.sum(q * k, axis=-1) / np.sqrt(scheme.dim)
    qt = scheme.transform(q, np.full(q.shape[0], i))
    # (samples, distances, dim)
    kt = scheme.transform(k[:, None, :], kpos[None, :])
    s = np.einsum("sd,sjd->sj", qt, kt) / np.sqrt(scheme.dim)
    s = s + scheme.bias(np.array([i]), kpos)[0][None, :]
    return np.mean(np.abs(s - base[:, None]), axis=0)
