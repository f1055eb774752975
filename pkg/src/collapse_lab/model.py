"""Single-head Pre-LN decoder-only Transformer.

One layer maps token states ``v`` to::

    u  = norm1(v)
    z_i = sum_{j<=i} a_ij * Wv u_j + v_i        a_i = softmax_j(score(Wq u_i, Wk u_j))
    v'  = psi(norm2(z)) + z                      psi(h) = W2 tanh(W1 h)

and the outputs are ``y = norm3(v^(L))``.  All norms are RMS norms with a
fixed scalar scale.  A forward pass can record every attention matrix and
can emulate a narrower storage format by rounding each stored activation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .errors import ContractError, NumericalFailure
from .numerics import BINARY64, FloatFormat, FormatTag, rms_norm, rms_norm_backward, round_to_format
from .posenc import PEScheme

ROW_BLOCK = 1024


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    layers: int = 1
    hidden: int | None = None
    seed: int = 0
    pe: PEScheme = field(default_factory=PEScheme)
    norm_scales: tuple = (1.0, 1.0, 1.0)
    precision: FloatFormat = BINARY64

    def __post_init__(self):
        if self.d <= 0 or self.d % 2:
            raise ContractError("model dimension d must be a positive even integer")
        if self.layers < 0:
            raise ContractError("layer count must be non-negative")
        if self.hidden is None:
            object.__setattr__(self, "hidden", 4 * self.d)
        if self.hidden < 1:
            raise ContractError("MLP hidden width must be at least 1")
        if self.pe.dim != self.d:
            object.__setattr__(self, "pe", replace(self.pe, dim=self.d))
        if len(self.norm_scales) != 3 or min(self.norm_scales) <= 0:
            raise ContractError("norm_scales must be three positive scalars")

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass(frozen=True)
class ForwardTrace:
    """Result of a forward pass.

    ``states[l]`` holds ``v^(l)`` for l = 0..L.  ``attention[l]`` is the full
    ``n x n`` matrix when recording was requested, else ``None``.  When the
    pass was run for the last token only, the final state and the outputs
    hold a single row and ``rows`` is ``[n - 1]``.
    """

    states: list
    attention: list | None
    outputs: np.ndarray
    rows: np.ndarray

    @property
    def n(self) -> int:
        return self.states[0].shape[0]


def init_model(cfg: ModelConfig) -> list[LayerWeights]:
    """Draw i.i.d. N(0, 1/d) weights for every layer from the ``weights`` stream."""
    g = rng.stream(cfg.seed, rng.WEIGHTS)
    sd = 1.0 / np.sqrt(cfg.d)
    d, h = cfg.d, cfg.hidden
    out = []
    for _ in range(cfg.layers):
        out.append(
            LayerWeights(
                wq=g.standard_normal((d, d)) * sd,
                wk=g.standard_normal((d, d)) * sd,
                wv=g.standard_normal((d, d)) * sd,
                w1=g.standard_normal((h, d)) * sd,
                w2=g.standard_normal((d, h)) * sd,
            )
        )
    return out


def _check_tokens(cfg, tokens) -> np.ndarray:
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != cfg.d:
        raise ContractError(f"token sequence must have shape (n>=1, {cfg.d}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError("token sequence has non-finite entries")
    return x


def _ensure_finite(a, layer, what):
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(np.atleast_2d(a)))[0][0]
        raise NumericalFailure(f"non-finite {what}", layer=layer, token=int(bad))


def _attention_rows(cfg, q, k, rows, n):
    """Softmax rows for query indices ``rows`` against keys ``0..n-1`` with a causal mask."""
    pe = cfg.pe
    kpos = np.arange(n)
    s = q[rows] @ k.T / np.sqrt(cfg.d)
    s = s + pe.bias(rows, kpos)
    mask = kpos[None, :] <= rows[:, None]
    s = np.where(mask, s, -np.inf)
    s = s - np.max(s, axis=1, keepdims=True)
    e = np.where(mask, np.exp(s), 0.0)
    return e / np.sum(e, axis=1, keepdims=True)


def _quantizer(fmt: FloatFormat, layer_ref):
    if fmt.tag is FormatTag.BINARY64:
        return lambda a, what: a

    def q(a, what):
        try:
            return round_to_format(a, fmt, strict=True)
        except NumericalFailure:
            r = round_to_format(a, fmt)
            bad = np.argwhere(~np.isfinite(np.atleast_2d(r)))[0][0]
            raise NumericalFailure(
                f"{what} overflows {fmt.name}", layer=layer_ref[0], token=int(bad)
            ) from None

    return q


def forward(
    cfg: ModelConfig,
    weights,
    tokens,
    *,
    record: bool = True,
    last_only: bool = False,
    precision: FloatFormat | None = None,
    _cache: list | None = None,
) -> ForwardTrace:
    """Run the decoder stack on ``tokens`` (shape ``(n, d)``).

    ``last_only`` skips work that cannot reach ``y_n``: the final layer is
    evaluated for the last token only.  ``precision`` defaults to Binary64,
    which is exact float64 arithmetic; anything narrower rounds each stored
    activation (projections, attention output, residual sums, norm and MLP
    outputs) while softmax and accumulations stay in float64.
    """
    x = _check_tokens(cfg, tokens)
    if len(weights) != cfg.layers:
        raise ContractError(f"expected {cfg.layers} layers of weights, got {len(weights)}")
    fmt = precision or BINARY64
    layer_ref = [None]
    rnd = _quantizer(fmt, layer_ref)
    b1, b2, b3 = cfg.norm_scales
    pe = cfg.pe
    n = x.shape[0]
    pos = np.arange(n)

    v = x
    if not pe.in_score:
        v = v + pe.sinusoids(pos)
    v = rnd(v, "input")
    states = [v]
    attention = [] if record else None
    out_rows = pos

    for layer, w in enumerate(weights):
        layer_ref[0] = layer
        final = layer == cfg.layers - 1
        rows = pos[-1:] if (last_only and final) else pos
        u = rnd(rms_norm(v, b1), "norm1")
        q = rnd(u[rows] @ w.wq.T, "query")
        k = rnd(u @ w.wk.T, "key")
        val = rnd(u @ w.wv.T, "value")
        qt_full = np.zeros((n, cfg.d))
        qt_full[rows] = pe.transform(q, rows)
        kt = pe.transform(k, pos)
        a = np.empty((len(rows), cfg.d))
        mats = np.zeros((n, n)) if (record and len(rows) == n) else None
        for start in range(0, len(rows), ROW_BLOCK):
            blk = rows[start:start + ROW_BLOCK]
            A = _attention_rows(cfg, qt_full, kt, blk, n)
            a[start:start + len(blk)] = A @ val
            if mats is not None:
                mats[blk] = A
        a = rnd(a, "attention output")
        z = rnd(a + v[rows], "residual")
        h = rnd(rms_norm(z, b2), "norm2")
        pre = h @ w.w1.T
        g = rnd(np.tanh(pre), "mlp hidden")
        m = rnd(g @ w.w2.T, "mlp output")
        v_next = rnd(m + z, "layer output")
        _ensure_finite(v_next, layer, "layer output")
        if _cache is not None:
            _cache.append(dict(v=v, u=u, val=val, qt=qt_full, kt=kt, A=mats, z=z, g=g))
        if attention is not None:
            attention.append(mats)
        v = v_next
        states.append(v)
        out_rows = rows

    layer_ref[0] = None
    y = rnd(rms_norm(v, b3), "norm3")
    _ensure_finite(y, None, "output")
    return ForwardTrace(states=states, attention=attention, outputs=y, rows=np.asarray(out_rows))


def forward_quantized(cfg: ModelConfig, weights, tokens, **kw) -> ForwardTrace:
    """Forward pass in ``cfg.precision``."""
    return forward(cfg, weights, tokens, precision=cfg.precision, **kw)


def last_token_rep(trace: ForwardTrace) -> np.ndarray:
    return trace.outputs[-1]


def last_token_output(cfg: ModelConfig, weights, tokens, quantized=False) -> np.ndarray:
    """``y_n`` without recording attention; cheap for long sequences."""
    trace = forward(
        cfg, weights, tokens, record=False, last_only=True,
        precision=cfg.precision if quantized else None,
    )
    return last_token_rep(trace)


def output_jacobians(cfg: ModelConfig, weights, tokens, out_index: int | None = None) -> np.ndarray:
    """Exact Jacobian of ``y[out_index]`` with respect to every input token.

    Returns an array ``J`` of shape ``(n, d, d)`` with
    ``J[i] = d y_out / d v_i^(0)`` (rows index output components).
    """
    x = _check_tokens(cfg, tokens)
    n, d = x.shape
    t = n - 1 if out_index is None else out_index
    if not 0 <= t < n:
        raise ContractError(f"output index {t} out of range for length {n}")
    cache: list = []
    trace = forward(cfg, weights, x, record=True, _cache=cache)
    b1, b2, b3 = cfg.norm_scales
    pe = cfg.pe
    pos = np.arange(n)

    # cotangent batch: one unit vector per output component of y_t
    gy = np.zeros((d, n, d))
    gy[np.arange(d), t, np.arange(d)] = 1.0
    gv = rms_norm_backward(trace.states[-1][None], gy, b3)

    for w, c in zip(reversed(weights), reversed(cache)):
        gz = gv.copy()
        gg = gv @ w.w2
        gpre = gg * (1.0 - c["g"] ** 2)
        gh = gpre @ w.w1
        gz += rms_norm_backward(c["z"][None], gh, b2)
        A = c["A"]
        gA = gz @ c["val"].T
        gval = np.einsum("ij,bid->bjd", A, gz)
        gS = A * (gA - np.sum(A * gA, axis=-1, keepdims=True))
        gqt = gS @ c["kt"] / np.sqrt(d)
        gkt = np.einsum("bij,id->bjd", gS, c["qt"]) / np.sqrt(d)
        gq = pe.transform_backward(gqt, pos)
        gk = pe.transform_backward(gkt, pos)
        gu = gq @ w.wq + gk @ w.wk + gval @ w.wv
        gv = gz + rms_norm_backward(c["v"][None], gu, b1)

    # gv[b, i, :] = d y_t[b] / d v_i
    return np.transpose(gv, (1, 0, 2))
