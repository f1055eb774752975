"""Token vocabularies and sequence presets.

Symbol vectors come from the ``symbols`` stream of a symbols seed that is
independent of the weights seed.  Sampled content (digits, Gaussian tokens)
comes from the ``data`` stream of the experiment seed.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import rng
from .errors import ContractError

DIGITS = tuple("0123456789")
SEPARATOR = ","
PROMPT = tuple(f"<p{i}>" for i in range(8))
VOCAB = DIGITS + (SEPARATOR,) + PROMPT
PRESETS = ("ones", "digits", "commas", "gaussian")
FINAL_TOKEN = "final-token"


@lru_cache(maxsize=32)
def _symbol_table(d: int, symbols_seed: int) -> np.ndarray:
    g = rng.stream(symbols_seed, rng.SYMBOLS)
    table = g.standard_normal((len(VOCAB), d))
    table /= np.linalg.norm(table, axis=1, keepdims=True)
    table.flags.writeable = False
    return table


def symbol_vectors(names, d: int, symbols_seed: int = 0) -> np.ndarray:
    """Unit-norm vectors for a list of symbol names."""
    table = _symbol_table(d, symbols_seed)
    idx = [VOCAB.index(s) for s in names]
    return table[idx].copy()


def with_separators(symbols, sep=SEPARATOR, period=3) -> list:
    """Insert ``sep`` after every ``period`` symbols (``len // period`` insertions)."""
    if period < 2:
        raise ContractError("separator period must be at least 2")
    out = []
    for i, s in enumerate(symbols, start=1):
        out.append(s)
        if i % period == 0:
            out.append(sep)
    return out


def preset_symbols(preset: str, n: int, seed: int, period: int = 3) -> list:
    """Symbol names for a preset with ``n`` content tokens after the prompt."""
    if n < 1:
        raise ContractError("preset length must be at least 1")
    if preset == "ones":
        return list(PROMPT) + ["1"] * n
    if preset == "digits":
        g = rng.stream(seed, rng.DATA)
        drawn = [DIGITS[i] for i in g.integers(0, 10, size=n - 1)]
        return list(PROMPT) + drawn + ["1"]
    if preset == "commas":
        return list(PROMPT) + with_separators(["1"] * n, SEPARATOR, period)
    raise ContractError(f"unknown symbolic preset {preset!r}; expected one of {PRESETS}")


def make_tokens(preset: str, n: int, seed: int, d: int, symbols_seed: int = 0, period: int = 3) -> np.ndarray:
    """Base token sequence for ``preset``.

    ``gaussian`` draws ``n - 1`` i.i.d. standard normal vectors and ends with
    a final token that is fixed per seed, so growing ``n`` only grows the
    prefix.  The symbolic presets prepend an eight-token prompt and count
    ``n`` content tokens.
    """
    if preset == "gaussian":
        if n < 1:
            raise ContractError("preset length must be at least 1")
        body = rng.stream(seed, rng.DATA).standard_normal((n - 1, d))
        last = rng.stream(seed, FINAL_TOKEN).standard_normal((1, d))
        return np.vstack([body, last])
    if preset not in PRESETS:
        raise ContractError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    return symbol_vectors(preset_symbols(preset, n, seed, period), d, symbols_seed)
