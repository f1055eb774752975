"""Representational collapse experiments.

Two sequences that differ only by a repeated final token end up with
last-token representations that approach each other as the shared prefix
grows.  This module measures that convergence at the softmax level (tail
mass, total variation) and through the full model, and finds the length at
which a narrow float format can no longer tell the two apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import ContractError
from .model import ModelConfig, forward, init_model, last_token_output
from .numerics import BINARY64, FloatFormat, l1_dist, linf_dist, softmax, total_variation
from .tokens import make_tokens, symbol_vectors, with_separators, PROMPT, SEPARATOR

ALTERNATING_TV = 2.0 * (math.e - 1.0) / (math.e + 1.0)


@dataclass(frozen=True)
class SequencePair:
    base: np.ndarray
    extended: np.ndarray

    def __post_init__(self):
        n = self.base.shape[0]
        if self.extended.shape[0] != n + 1:
            raise ContractError("extended sequence must be one token longer than base")
        if not (np.array_equal(self.extended[:n], self.base) and np.array_equal(self.extended[n], self.base[n - 1])):
            raise ContractError("extended sequence must be base with its last token repeated")


def build_repeated_pair(base) -> SequencePair:
    base = np.asarray(base, dtype=np.float64)
    if base.ndim != 2 or base.shape[0] < 1:
        raise ContractError("base sequence must be non-empty with shape (n, d)")
    return SequencePair(base, np.concatenate([base, base[-1:]], axis=0))


def softmax_tail_gap(a, b: float, c: float, bound: float = 10.0):
    """Last-entry softmax mass of ``[a, c]`` versus ``[a, b, c]``.

    Returns ``(s_n, s_star, gap)``.  The gap is evaluated from its closed form
    ``e^(b+c) / ((S + e^c)(S + e^b + e^c))`` with ``S = sum(e^a)``, which is
    algebraically ``s_n - s_star`` but stays accurate when both are tiny.
    """
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    vals = np.concatenate([a, [b, c]])
    if not np.all(np.isfinite(vals)) or np.max(np.abs(vals)) > bound:
        raise ContractError(f"entries must be finite and bounded by {bound}")
    s_n = softmax(np.concatenate([a, [c]]))[-1]
    s_star = softmax(vals)[-1]
    m = np.max(vals)
    S = np.sum(np.exp(a - m))
    eb, ec = math.exp(b - m), math.exp(c - m)
    gap = eb * ec / ((S + ec) * (S + eb + ec))
    return float(s_n), float(s_star), float(gap)


@dataclass(frozen=True)
class TVRecord:
    n: int
    seed: int
    tv: float


def tv_oracle_bound(n: int, k: int = 200, noise: float = 0.1) -> float:
    """Deterministic ceiling on the perturbed-prefix total variation.

    With ``x`` in [0, 1] and ``x*`` equal to ``x`` plus ``eta`` in [0, noise]
    on the first ``k`` entries, write ``e^x* = e^x + r`` with ``r >= 0``.
    Then ``p - p* = (D p - r) / Z*`` where ``D = sum(r)``, so the total
    variation is at most ``2 D / Z*``.  ``D <= k e (e^noise - 1)`` and
    ``Z* >= n``.
    """
    return 2.0 * k * math.e * math.expm1(noise) / n


def tv_decay_experiment(n_values, k: int = 200, noise: float = 0.1, seeds=range(5)) -> list[TVRecord]:
    """Total variation between softmax(x) and softmax(x*) for growing ``n``.

    ``x`` is Uniform[0, 1]; ``x*`` adds Uniform[0, noise] to its first ``k``
    entries.  Data and noise come from separate streams of each seed, so the
    sequences for different ``n`` share their prefixes.
    """
    n_values = sorted(int(n) for n in n_values)
    if not n_values:
        raise ContractError("n_values must be non-empty")
    if k >= n_values[0]:
        raise ContractError("k must be smaller than every sequence length")
    out = []
    for seed in seeds:
        eta = rng.stream(seed, rng.NOISE).uniform(0.0, noise, size=k) if noise > 0 else np.zeros(k)
        for n in n_values:
            x = rng.stream(seed, rng.DATA).uniform(0.0, 1.0, size=n)
            xs = x.copy()
            xs[:k] += eta
            out.append(TVRecord(n, int(seed), total_variation(softmax(x), softmax(xs))))
    return out


def alternating_tv(n: int) -> float:
    """TV between softmax(1, 0, 1, 0, ...) and softmax(0, 1, 0, 1, ...)."""
    if n < 2 or n % 2:
        raise ContractError("alternating_tv needs an even n >= 2")
    x = np.tile([1.0, 0.0], n // 2)
    return total_variation(softmax(x), softmax(1.0 - x))


@dataclass(frozen=True)
class CollapseRecord:
    n: int
    seed: int
    pe: str
    precision: str
    l1: float
    linf: float
    length: int


def pair_distance(cfg: ModelConfig, weights, base, quantized=False, measure="output"):
    """L1 and L-infinity distance between the last-token representations of a pair."""
    pair = build_repeated_pair(base)
    if measure == "output":
        a = last_token_output(cfg, weights, pair.base, quantized)
        b = last_token_output(cfg, weights, pair.extended, quantized)
    elif measure == "state":
        prec = cfg.precision if quantized else None
        a = forward(cfg, weights, pair.base, record=False, last_only=True, precision=prec).states[-1][-1]
        b = forward(cfg, weights, pair.extended, record=False, last_only=True, precision=prec).states[-1][-1]
    else:
        raise ContractError(f"unknown measure {measure!r}")
    return l1_dist(a, b), linf_dist(a, b), a, b


def collapse_curve(
    cfg: ModelConfig,
    n_values,
    seeds,
    preset: str = "gaussian",
    token_maker=None,
    quantized: bool = False,
    measure: str = "output",
    symbols_seed: int = 0,
) -> list[CollapseRecord]:
    """Last-token distance between each base sequence and its repeated-last-token twin.

    ``token_maker(n, seed)`` overrides ``preset`` when given.  The model
    weights for seed ``s`` come from ``cfg.with_(seed=s)``.
    """
    n_values = sorted(set(int(n) for n in n_values))
    if not n_values:
        raise ContractError("n_values must be non-empty")
    if token_maker is None:
        def token_maker(n, seed):
            return make_tokens(preset, n, seed, cfg.d, symbols_seed)
    prec = cfg.precision.name if quantized else BINARY64.name
    out = []
    for seed in seeds:
        c = cfg.with_(seed=int(seed))
        weights = init_model(c)
        for n in n_values:
            base = token_maker(n, int(seed))
            l1, linf, _, _ = pair_distance(c, weights, base, quantized, measure)
            out.append(CollapseRecord(n, int(seed), cfg.pe.tag, prec, l1, linf, base.shape[0]))
    return out


def comma_tokens(n: int, d: int, period: int = 3, separator=None, symbols_seed: int = 0) -> np.ndarray:
    """Prompt, then ``n`` ones with ``separator`` after every ``period`` of them."""
    names = list(PROMPT) + with_separators(["1"] * n, SEPARATOR, period)
    toks = symbol_vectors(names, d, symbols_seed)
    if separator is not None:
        toks[[i for i, s in enumerate(names) if s == SEPARATOR]] = separator
    return toks


def separator_experiment(
    cfg: ModelConfig, n_values, period: int = 3, seeds=range(5), separator=None, symbols_seed: int = 0
) -> dict:
    """Collapse curves for plain ones and for ones broken up by a separator.

    Returns ``{"ones": [...], "commas": [...]}``.  ``separator`` replaces the
    default comma vector.
    """
    if period < 2:
        raise ContractError("separator period must be at least 2")
    plain = collapse_curve(cfg, n_values, seeds, preset="ones", symbols_seed=symbols_seed)
    commas = collapse_curve(
        cfg, n_values, seeds,
        token_maker=lambda n, s: comma_tokens(n, cfg.d, period, separator, symbols_seed),
    )
    return {"ones": plain, "commas": commas}


@dataclass(frozen=True)
class Threshold:
    seed: int
    precision: str
    n: int | None
    distances: tuple

    @property
    def detected(self) -> bool:
        return self.n is not None


def precision_threshold(
    cfg: ModelConfig, n_values, fmt: FloatFormat, seeds, preset: str = "ones", symbols_seed: int = 0
) -> list[Threshold]:
    """First length at which the quantized last-token outputs are bitwise equal.

    Scans ``n_values`` in increasing order for every seed; ``n`` is ``None``
    when no collapse shows up below the largest length.
    """
    c0 = cfg.with_(precision=fmt)
    out = []
    for seed in seeds:
        c = c0.with_(seed=int(seed))
        weights = init_model(c)
        found, dists = None, []
        for n in sorted(set(int(n) for n in n_values)):
            base = make_tokens(preset, n, int(seed), c.d, symbols_seed)
            _, linf, a, b = pair_distance(c, weights, base, quantized=True)
            dists.append((n, linf))
            if np.array_equal(a, b):
                found = n
                break
        out.append(Threshold(int(seed), fmt.name, found, tuple(dists)))
    return out
