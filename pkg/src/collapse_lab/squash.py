"""Sensitivity of the last output to each input token.

The path-sum bound holds for a surrogate of the model in which attention is
frozen (it does not depend on the input), norms are fixed divisions by a
constant, and values are the token states themselves.  ``ConsistentModel``
implements exactly that surrogate so the inequality can be checked without
mixing up theorem scope with implementation error.  The full model's
sensitivity is measured by :func:`sensitivity_profile` but not asserted
against the bound.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import ContractError, InvariantViolation
from .model import ModelConfig, forward, init_model, output_jacobians

log = logging.getLogger(__name__)

STOCHASTIC_TOL = 1e-9


def jacobian_fd(cfg: ModelConfig, weights, tokens, i: int, delta: float = 1e-5, out_index=None) -> np.ndarray:
    """Central-difference estimate of ``d y_out / d v_i`` (float64 forward only)."""
    x = np.asarray(tokens, dtype=np.float64)
    n, d = x.shape
    if not 0 <= i < n:
        raise ContractError(f"token index {i} out of range for length {n}")
    t = n - 1 if out_index is None else out_index
    J = np.empty((d, d))
    for c in range(d):
        xp, xm = x.copy(), x.copy()
        xp[i, c] += delta
        xm[i, c] -= delta
        yp = forward(cfg, weights, xp, record=False).outputs[t]
        ym = forward(cfg, weights, xm, record=False).outputs[t]
        J[:, c] = (yp - ym) / (2 * delta)
    if not np.all(np.isfinite(J)):
        raise ContractError("finite differences produced non-finite entries")
    return J


def jacobian_analytic(cfg: ModelConfig, weights, tokens, i: int, out_index=None) -> np.ndarray:
    """Exact ``d y_out / d v_i`` by reverse-mode differentiation of the forward pass."""
    n = np.asarray(tokens).shape[0]
    if not 0 <= i < n:
        raise ContractError(f"token index {i} out of range for length {n}")
    return output_jacobians(cfg, weights, tokens, out_index)[i]


def block_norms(J):
    """Max-column L2, Frobenius and spectral norms of a stack of blocks."""
    col = np.max(np.linalg.norm(J, axis=-2), axis=-1)
    fro = np.linalg.norm(J, axis=(-2, -1))
    spec = np.linalg.norm(J, ord=2, axis=(-2, -1))
    return col, fro, spec


@dataclass(frozen=True)
class SensitivityProfile:
    max_column: np.ndarray
    frobenius: np.ndarray
    spectral: np.ndarray

    def __len__(self):
        return len(self.frobenius)


def sensitivity_profile(cfg: ModelConfig, weights, tokens) -> SensitivityProfile:
    """Norms of ``d y_n / d v_i`` for every input position ``i``."""
    x = np.asarray(tokens, dtype=np.float64)
    if x.shape[0] < 2:
        raise ContractError("sensitivity profile needs at least two tokens")
    return SensitivityProfile(*block_norms(output_jacobians(cfg, weights, x)))


def check_stochastic(attn, tol=STOCHASTIC_TOL) -> np.ndarray:
    """Validate a lower-triangular row-stochastic matrix and return it as an array."""
    A = np.asarray(attn, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError("attention matrix must be square")
    if np.any(A < 0) or np.any(np.triu(A, 1) != 0):
        raise ContractError("attention matrix must be non-negative and lower-triangular")
    if np.max(np.abs(A.sum(axis=1) - 1.0)) > tol:
        raise ContractError("attention matrix rows must sum to 1")
    return A


@dataclass(frozen=True)
class BoundConstants:
    sigma_psi: tuple
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0
    beta_attn: float | None = None

    def __post_init__(self):
        if min(self.beta1, self.beta2, self.beta3) <= 0:
            raise ContractError("norm constants must be positive")
        if any(s < 0 for s in self.sigma_psi):
            raise ContractError("Lipschitz constants must be non-negative")
        if self.beta_attn is None:
            object.__setattr__(self, "beta_attn", self.beta1)

    @property
    def C(self) -> float:
        return float(np.prod([s / self.beta2 + 1.0 for s in self.sigma_psi]) / self.beta3)


@dataclass(frozen=True)
class PathBound:
    values: np.ndarray
    path_sums: np.ndarray
    C: float


def operator_norm(w) -> float:
    return float(np.linalg.norm(w, ord=2))


def normalized_attention(A, beta_attn) -> np.ndarray:
    return A / beta_attn + np.eye(A.shape[0])


def path_sum_bound(attn, consts: BoundConstants, target: int | None = None) -> PathBound:
    """``C * [Abar^(L-1) ... Abar^(0)]_{target, i}`` with ``Abar = A / beta + I``."""
    mats = [check_stochastic(A) for A in attn]
    if len(mats) != len(consts.sigma_psi):
        raise ContractError("need one Lipschitz constant per attention matrix")
    if not mats:
        raise ContractError("attention stack is empty")
    n = mats[0].shape[0]
    t = n - 1 if target is None else target
    P = np.eye(n)
    for A in mats:
        P = normalized_attention(A, consts.beta_attn) @ P
    sums = P[t].copy()
    return PathBound(consts.C * sums, sums, consts.C)


def path_enumeration(attn, beta_attn: float, target: int | None = None) -> np.ndarray:
    """Brute-force sum over monotone index paths ``i <= k_1 <= ... <= target``.

    Independent of the matrix-product route; exponential, for small ``n`` only.
    """
    mats = [normalized_attention(np.asarray(A, dtype=np.float64), beta_attn) for A in attn]
    L = len(mats)
    n = mats[0].shape[0]
    t = n - 1 if target is None else target
    out = np.zeros(n)
    for i in range(n):
        total = 0.0
        for mids in itertools.combinations_with_replacement(range(i, t + 1), L - 1):
            path = (i,) + mids + (t,)
            prod = 1.0
            for layer, (a, b) in enumerate(zip(path[:-1], path[1:])):
                prod *= mats[layer][b, a]
            total += prod
        out[i] = total
    return out


@dataclass
class ConsistentModel:
    """Surrogate with frozen attention, constant norms and identity values.

    ``mlps`` holds ``(w1, w2)`` per layer, or ``None`` for a zero MLP.
    """

    attn: list
    mlps: list
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0

    def __post_init__(self):
        self.attn = [check_stochastic(A) for A in self.attn]
        if len(self.mlps) != len(self.attn):
            raise ContractError("need one MLP per attention matrix")

    @property
    def layers(self) -> int:
        return len(self.attn)

    def sigma_psi(self) -> tuple:
        """``||W2|| ||W1||`` per layer (tanh is 1-Lipschitz).

        Uses exact SVD norms: power iteration approaches from below, and an
        underestimate here would make the bound unsound.
        """
        return tuple(
            0.0 if m is None else operator_norm(m[1]) * operator_norm(m[0]) for m in self.mlps
        )

    def constants(self) -> BoundConstants:
        return BoundConstants(self.sigma_psi(), self.beta1, self.beta2, self.beta3)

    def forward(self, tokens):
        v = np.asarray(tokens, dtype=np.float64)
        cache = []
        for A, m in zip(self.attn, self.mlps):
            z = A @ v / self.beta1 + v
            if m is None:
                g = None
                v = z
            else:
                g = np.tanh((z / self.beta2) @ m[0].T)
                v = g @ m[1].T + z
            cache.append(g)
        return v / self.beta3, cache

    def jacobians(self, tokens, out_index=None) -> np.ndarray:
        """``J[i] = d y_out / d v_i`` for every ``i``, shape ``(n, d, d)``."""
        x = np.asarray(tokens, dtype=np.float64)
        n, d = x.shape
        t = n - 1 if out_index is None else out_index
        _, cache = self.forward(x)
        gv = np.zeros((d, n, d))
        gv[np.arange(d), t, np.arange(d)] = 1.0 / self.beta3
        for A, m, g in zip(reversed(self.attn), reversed(self.mlps), reversed(cache)):
            gz = gv
            if m is not None:
                gz = gv + ((gv @ m[1]) * (1.0 - g**2)) @ m[0] / self.beta2
            gv = gz + np.einsum("ji,bjd->bid", A, gz) / self.beta1
        return np.transpose(gv, (1, 0, 2))


def random_stochastic_lower(n: int, g: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Dense lower-triangular row-stochastic matrix from masked softmax of Gaussian logits."""
    s = g.standard_normal((n, n)) * scale
    mask = np.tril(np.ones((n, n), dtype=bool))
    s = np.where(mask, s, -np.inf)
    s -= s.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(s), 0.0)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class BoundReport:
    instances: int = 0
    violations: list = field(default_factory=list)
    worst_ratio: float = 0.0
    rows: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def consistent_instance(cfg: ModelConfig, seed: int, n: int, layers: int):
    """Surrogate model whose attention is recorded from one reference forward pass."""
    c = cfg.with_(seed=seed, layers=layers)
    weights = init_model(c)
    tokens = rng.stream(seed, rng.DATA).standard_normal((n, c.d))
    trace = forward(c, weights, tokens)
    b1, b2, b3 = c.norm_scales
    model = ConsistentModel(trace.attention, [(w.w1, w.w2) for w in weights], b1, b2, b3)
    return model, tokens


def bound_check(
    cfg: ModelConfig, seeds, max_n: int = 16, max_layers: int = 3, rel_tol: float = 1e-12
) -> BoundReport:
    """Compare measured sensitivities of the surrogate with the path-sum bound.

    Each seed draws its own ``n`` in ``[2, max_n]`` and layer count in
    ``[1, max_layers]``.  The spectral norm of every block must not exceed the
    bound, and its Frobenius norm must not exceed ``sqrt(d)`` times the bound.
    """
    report = BoundReport()
    for seed in seeds:
        g = rng.stream(seed, "instance-shape")
        n = int(g.integers(2, max_n + 1))
        L = int(g.integers(1, max_layers + 1))
        model, tokens = consistent_instance(cfg, int(seed), n, L)
        bound = path_sum_bound(model.attn, model.constants())
        _, fro, spec = block_norms(model.jacobians(tokens))
        report.instances += 1
        limit = bound.values * (1.0 + rel_tol)
        for i in range(n):
            ratio = spec[i] / bound.values[i] if bound.values[i] > 0 else (np.inf if spec[i] > 0 else 0.0)
            report.worst_ratio = max(report.worst_ratio, float(ratio))
            report.rows.append((int(seed), n, L, i, float(spec[i]), float(fro[i]), float(bound.values[i])))
            if spec[i] > limit[i] or fro[i] > np.sqrt(cfg.d) * limit[i]:
                report.violations.append((int(seed), n, L, i, float(spec[i]), float(bound.values[i])))
    if report.violations:
        log.error("path-sum bound violated in %d cases, first: %s", len(report.violations), report.violations[0])
    return report


def first_column_ones(n: int) -> np.ndarray:
    E = np.zeros((n, n))
    E[:, 0] = 1.0
    return E


def limit_hypothesis_holds(A) -> bool:
    """Every row but the first has at least two non-zero entries."""
    return bool(np.all(np.count_nonzero(A[1:], axis=1) >= 2))


@dataclass(frozen=True)
class LimitRecord:
    converged: bool
    steps: int | None
    distances: np.ndarray
    hypothesis_ok: bool


def limit_case(attn, L_max: int = 4096, tol: float = 1e-8) -> LimitRecord:
    """Iterate ``M_L = ((A + I) / 2)^L`` and track its max-entry distance to ``E1``.

    ``E1`` has a first column of ones and zeros elsewhere.  The distance
    equals ``max_i (1 - M_L[i, 0])`` and never increases with ``L``.
    """
    A = check_stochastic(attn)
    ok = limit_hypothesis_holds(A)
    if not ok:
        warnings.warn("a row after the first has a single non-zero entry; convergence to E1 is not guaranteed")
    n = A.shape[0]
    M1 = (A + np.eye(n)) / 2.0
    E1 = first_column_ones(n)
    M = np.eye(n)
    dists = []
    steps = None
    for L in range(1, L_max + 1):
        M = M1 @ M
        dist = float(np.max(np.abs(M - E1)))
        dists.append(dist)
        if dist < tol:
            steps = L
            break
    return LimitRecord(steps is not None, steps, np.array(dists), ok)


@dataclass(frozen=True)
class LemmaReport:
    samples: int
    max_eigen_residual: float
    max_spectral_radius: float
    max_product_rowsum_error: float
    max_product_upper: float
    min_product_entry: float

    @property
    def ok(self) -> bool:
        return (
            self.max_eigen_residual <= 1e-12
            and self.max_spectral_radius <= 1 + 1e-9
            and self.max_product_rowsum_error <= 1e-12
            and self.max_product_upper == 0.0
            and self.min_product_entry >= 0.0
        )


def power_iteration_radius(A, iters: int = 200, seed: int = 0) -> float:
    """Spectral-radius estimate ``||A x||_inf / ||x||_inf`` after power iteration."""
    x = np.abs(np.random.default_rng(seed).standard_normal(A.shape[0])) + 1.0
    x /= np.max(np.abs(x))
    lam = 0.0
    for _ in range(iters):
        y = A @ x
        lam = float(np.max(np.abs(y)))
        if lam == 0.0:
            return 0.0
        x = y / lam
    return lam


def stochastic_lemma_checks(samples: int = 1000, max_n: int = 32, seed: int = 0) -> LemmaReport:
    """Constant-vector eigenpair, spectral radius and closure under products."""
    g = rng.stream(seed, "lemmas")
    eig = rad = rowerr = upper = 0.0
    min_entry = np.inf
    for _ in range(samples):
        n = int(g.integers(2, max_n + 1))
        A = random_stochastic_lower(n, g)
        B = random_stochastic_lower(n, g)
        eig = max(eig, float(np.max(np.abs(A @ np.ones(n) - 1.0))))
        rad = max(rad, power_iteration_radius(A))
        P = A @ B
        rowerr = max(rowerr, float(np.max(np.abs(P.sum(axis=1) - 1.0))))
        upper = max(upper, float(np.max(np.abs(np.triu(P, 1)))))
        min_entry = min(min_entry, float(P.min()))
    return LemmaReport(samples, eig, rad, rowerr, upper, min_entry)


def ensure_bound(report: BoundReport):
    if not report.ok:
        raise InvariantViolation(f"path-sum bound violated: {report.violations[0]}")
