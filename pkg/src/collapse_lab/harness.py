"""Experiment runner, configuration, CSV and SVG output.

Sweeps are split into independent cells, one per (pe, precision, seed).
Cells may run on a thread pool; results are merged by a deterministic sort so
thread count never changes the bytes written.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import collapse
from .errors import ContractError, NumericalFailure
from .model import ModelConfig
from .numerics import BINARY64, FloatFormat, parse_format_tag
from .posenc import parse_scheme

log = logging.getLogger(__name__)

ENV_SEED = "COLLAPSE_LAB_SEED"
ENV_THREADS = "COLLAPSE_LAB_THREADS"

METRICS = frozenset({"l1", "linf", "tv", "measured_norm", "bound_value", "gap", "threshold", "distance"})
EXPERIMENTS = ("collapse", "tv")
FIELDS = ("experiment", "preset", "pe", "precision", "n", "seed", "metric", "value")
LOG_FLOOR = 1e-16


class CellFailure(RuntimeError):
    """A sweep cell raised; the message names the cell."""

    def __init__(self, cell, cause):
        super().__init__(f"cell {cell} failed: {cause}")
        self.cell = cell
        self.cause = cause


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    preset: str
    pe: str
    precision: str
    n: int
    seed: int
    metric: str
    value: float

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ContractError(f"unregistered metric {self.metric!r}")
        if not math.isfinite(self.value):
            raise NumericalFailure(f"non-finite {self.metric} at n={self.n}, seed={self.seed}")

    def key(self):
        return (self.experiment, self.preset, self.pe, self.precision, self.n, self.seed, self.metric)


@dataclass(frozen=True)
class ExperimentSpec:
    experiment: str
    preset: str = "gaussian"
    cfg: ModelConfig = field(default_factory=ModelConfig)
    lengths: tuple = (16, 64, 256)
    seeds: tuple = (0,)
    pes: tuple = ("nope",)
    precisions: tuple = ("f64",)
    out: str | None = None
    params: tuple = ()

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ContractError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        for name in ("lengths", "seeds", "pes", "precisions"):
            if not getattr(self, name):
                raise ContractError(f"{name} must be non-empty")
        if min(self.lengths) < 1:
            raise ContractError("lengths must be positive")
        for p in self.precisions:
            parse_format_tag(p)
        for p in self.pes:
            parse_scheme(p, self.cfg.d)
        if self.out is not None:
            parent = Path(self.out).resolve().parent
            if not (parent.is_dir() and os.access(parent, os.W_OK)):
                raise ContractError(f"output directory {parent} is not writable")

    def option(self, key, default=None):
        return dict(self.params).get(key, default)


def _collapse_cell(spec: ExperimentSpec, pe: str, precision: str, seed: int):
    fmt = FloatFormat.of(parse_format_tag(precision))
    cfg = spec.cfg.with_(pe=parse_scheme(pe, spec.cfg.d), precision=fmt)
    quantized = fmt != BINARY64
    recs = collapse.collapse_curve(cfg, spec.lengths, [seed], preset=spec.preset, quantized=quantized)
    rows = []
    for r in recs:
        for metric in ("l1", "linf"):
            rows.append(ResultRow(spec.experiment, spec.preset, r.pe, r.precision, r.n, r.seed, metric, getattr(r, metric)))
    return rows


def _tv_cell(spec: ExperimentSpec, pe: str, precision: str, seed: int):
    k = int(spec.option("k", 200))
    noise = float(spec.option("noise", 0.1))
    recs = collapse.tv_decay_experiment(spec.lengths, k, noise, [seed])
    return [ResultRow("tv", spec.preset, pe, precision, r.n, r.seed, "tv", r.tv) for r in recs]


CELLS = {"collapse": _collapse_cell, "tv": _tv_cell}


def default_threads() -> int:
    raw = os.environ.get(ENV_THREADS)
    if raw is None:
        return 1
    try:
        t = int(raw)
    except ValueError:
        raise ContractError(f"{ENV_THREADS} must be an integer, got {raw!r}") from None
    if t < 1:
        raise ContractError(f"{ENV_THREADS} must be at least 1")
    return t


def run(spec: ExperimentSpec, threads: int | None = None) -> list[ResultRow]:
    """Evaluate every cell of ``spec`` and return rows in canonical order.

    Writes the CSV to ``spec.out`` when set.  The first failing cell aborts
    the run with a :class:`CellFailure`.
    """
    threads = threads or default_threads()
    fn = CELLS[spec.experiment]
    cells = [(pe, prec, int(s)) for pe in spec.pes for prec in spec.precisions for s in spec.seeds]

    def work(cell):
        try:
            return fn(spec, *cell)
        except (ContractError, NumericalFailure, ArithmeticError) as exc:
            raise CellFailure(cell, exc) from exc

    if threads == 1:
        chunks = [work(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(work, cells))
    rows = sorted((r for chunk in chunks for r in chunk), key=ResultRow.key)
    if spec.out is not None:
        write_csv(rows, spec.out)
    return rows


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            raise NumericalFailure(f"refusing to write non-finite value {v}")
        return repr(v)
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_value(v) for v in row])
    return buf.getvalue()


def write_table(path, header, rows) -> Path:
    path = Path(path)
    path.write_text(csv_text(header, rows))
    return path


def write_csv(rows, path) -> Path:
    return write_table(path, FIELDS, [[getattr(r, f) for f in FIELDS] for r in rows])


def read_rows(path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"n", "value"} - set(reader.fieldnames or ())
            if missing:
                raise ContractError(f"{path}: missing columns {sorted(missing)}")
            rows = []
            for i, row in enumerate(reader, start=2):
                try:
                    row["n"] = int(row["n"])
                    row["value"] = float(row["value"])
                except (TypeError, ValueError):
                    raise ContractError(f"{path}:{i}: malformed n or value") from None
                rows.append(row)
    except OSError as exc:
        raise ContractError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise ContractError(f"{path}: no data rows")
    return rows


@dataclass(frozen=True)
class PlotSpec:
    metric: str | None = None
    log_y: bool = False
    log_x: bool = True
    floor: float = LOG_FLOOR
    title: str = ""
    width: int = 640
    height: int = 420


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _series(rows, metric):
    groups = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if metric is not None and r.get("metric") != metric:
            continue
        key = tuple(r.get(k, "") for k in ("preset", "pe", "precision"))
        groups[key][r["n"]].append(r["value"])
    out = {}
    for key in sorted(groups):
        ns = sorted(groups[key])
        vals = [groups[key][n] for n in ns]
        out[key] = (
            np.array(ns, dtype=float),
            np.array([np.min(v) for v in vals]),
            np.array([np.median(v) for v in vals]),
            np.array([np.max(v) for v in vals]),
        )
    return out


def emit_svg(curve_csv, out_path, spec: PlotSpec = PlotSpec()) -> Path:
    """Line plot of value against ``n`` with a min/max band over seeds."""
    rows = read_rows(curve_csv)
    metric = spec.metric
    if metric is None and "metric" in rows[0]:
        metric = rows[0]["metric"]
    series = _series(rows, metric)
    if not series:
        raise ContractError(f"no rows for metric {metric!r}")

    def ty(v):
        if not spec.log_y:
            return v
        if np.any(v <= spec.floor):
            log.warning("values at or below %g clamped for log-scale plotting", spec.floor)
        return np.log10(np.maximum(v, spec.floor))

    def tx(v):
        return np.log2(v) if spec.log_x and np.all(v > 0) else v

    xs = np.concatenate([tx(s[0]) for s in series.values()])
    ys = np.concatenate([ty(np.concatenate([s[1], s[3]])) for s in series.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    W, H, m = spec.width, spec.height, 60
    px = lambda x: m + (x - x0) / (x1 - x0) * (W - 2 * m)  # noqa: E731
    py = lambda y: H - m - (y - y0) / (y1 - y0) * (H - 2 * m)  # noqa: E731

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{m}" y1="{H - m}" x2="{W - m}" y2="{H - m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{H - m}" stroke="black"/>',
        f'<text x="{W / 2:.1f}" y="{H - 15}" text-anchor="middle" font-size="13">'
        f'{"log2 n" if spec.log_x else "n"}</text>',
        f'<text x="15" y="{H / 2:.1f}" transform="rotate(-90 15 {H / 2:.1f})" text-anchor="middle" '
        f'font-size="13">{("log10 " if spec.log_y else "") + (metric or "value")}</text>',
    ]
    if spec.title:
        parts.append(f'<text x="{W / 2:.1f}" y="25" text-anchor="middle" font-size="15">{spec.title}</text>')
    for t, label in ((y0, y0), (y1, y1)):
        parts.append(f'<text x="{m - 5}" y="{py(t):.1f}" text-anchor="end" font-size="10">{label:.3g}</text>')
    for t in (x0, x1):
        parts.append(f'<text x="{px(t):.1f}" y="{H - m + 15}" text-anchor="middle" font-size="10">{t:.3g}</text>')

    for idx, (key, (n, lo, med, hi)) in enumerate(series.items()):
        color = PALETTE[idx % len(PALETTE)]
        X = tx(n)
        label = "/".join(k for k in key if k)
        if len(X) == 1:
            parts.append(
                f'<circle cx="{px(X[0]):.2f}" cy="{py(ty(med)[0]):.2f}" r="4" fill="{color}"><title>{label}</title></circle>'
            )
        else:
            band = [(px(a), py(b)) for a, b in zip(X, ty(hi))] + [(px(a), py(b)) for a, b in zip(X[::-1], ty(lo)[::-1])]
            parts.append(
                '<polygon points="' + " ".join(f"{a:.2f},{b:.2f}" for a, b in band)
                + f'" fill="{color}" fill-opacity="0.15" stroke="none"/>'
            )
            parts.append(
                '<polyline points="' + " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(X, ty(med)))
                + f'" fill="none" stroke="{color}" stroke-width="2"><title>{label}</title></polyline>'
            )
        parts.append(
            f'<text x="{W - m + 5}" y="{m + 14 * idx}" font-size="10" fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    out = Path(out_path)
    out.write_text("\n".join(parts) + "\n")
    return out


REGISTRY = (
    ("collapse run --preset gaussian", "collapse of random Gaussian sequences with sinusoidal scores"),
    ("collapse run --preset ones", "constant-token sequences converging as they grow"),
    ("collapse run --preset digits", "random digit strings ending in a repeated digit"),
    ("collapse run --pe nope,ape,rope,alibi", "collapse under each positional encoding"),
    ("collapse separator", "separator tokens slowing collapse of repeated ones"),
    ("collapse threshold", "length at which a narrow float format stops telling two sequences apart"),
    ("tv", "total variation decay when only the first k logits move"),
    ("alt-tv", "alternating logits whose softmax distance never decays"),
    ("squash profile", "sensitivity of the last output to each input token"),
    ("squash bound-check", "sensitivity bounded by sums over attention paths"),
    ("squash limit-case", "deep stacks sensitive only to the first token"),
    ("squash lemmas", "eigenvalue and product closure of causal attention matrices"),
    ("limit-case", "deep stacks sensitive only to the first token"),
    ("counting ratio-check", "unmasked position-free attention depends only on symbol ratios"),
    ("counting collapse-demo", "counts n and n+1 sharing one quantized output"),
    ("selftest", "every acceptance check in one run"),
)


def preset_registry() -> list[tuple[str, str]]:
    return list(REGISTRY)


def families() -> list[str]:
    return sorted({cmd.split()[0] for cmd, _ in REGISTRY})


def lookup(command: str) -> str:
    for cmd, anchor in REGISTRY:
        if cmd == command:
            return anchor
    raise ContractError(f"unknown preset {command!r}; valid presets: " + ", ".join(c for c, _ in REGISTRY))


def load_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ContractError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ContractError(f"{path}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out
