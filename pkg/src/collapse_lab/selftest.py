"""End-to-end acceptance checks.

Each check computes its quantity, writes the numbers it judged to a CSV in
the output directory and returns a :class:`CheckResult`.  The CSVs carry no
timings, so two runs with the same code produce identical bytes.
"""

from __future__ import annotations

import filecmp
import statistics
import tempfile
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import collapse, counting, squash
from .harness import write_table
from .model import ModelConfig, init_model, output_jacobians
from .numerics import BFLOAT16, BINARY16, BINARY32
from .posenc import parse_scheme
from .rng import stream

SEEDS = tuple(range(5))
PE_NAMES = ("nope", "ape", "rope", "alibi")

# pilot-derived settings
GAP_THRESHOLD_N = 1000
SEPARATOR_MARGIN = 10.0
SINUSOIDAL_BETA1 = 0.125


@dataclass(frozen=True)
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] criterion {self.number:2d} {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(number, name, limit=None):
    def wrap(fn):
        def run(out_dir: Path) -> CheckResult:
            t = time.perf_counter()
            ok, detail = fn(out_dir)
            dt = time.perf_counter() - t
            if limit is not None and dt >= limit:
                ok, detail = False, f"{detail}; exceeded {limit}s"
            return CheckResult(number, name, bool(ok), detail, dt)

        run.number = number
        return run

    return wrap


@_timed(1, "softmax tail gap", limit=10)
def check_tail_gap(out: Path):
    g = stream(0, "tail-gap")
    rows = []
    for _ in range(10_000):
        n = int(np.exp(g.uniform(np.log(2), np.log(1e4))))
        v = g.uniform(-10.0, 10.0, size=n + 1)
        rows.append((n, collapse.softmax_tail_gap(v[: n - 1], v[n - 1], v[n])[2]))
    write_table(out / "tail_gap.csv", ("n", "gap"), rows)
    gaps = np.array([r[1] for r in rows])
    late = np.array([r[1] for r in rows if r[0] >= GAP_THRESHOLD_N])
    ok = bool(np.all(gaps > 0) and np.all(late < 1e-3))
    return ok, f"min gap {gaps.min():.3e}, max gap for n>={GAP_THRESHOLD_N} {late.max():.3e} over {len(late)}"


@_timed(2, "alternating TV constant", limit=5)
def check_alternating(out: Path):
    ns = range(2, 10_001, 2)
    errs = [abs(collapse.alternating_tv(n) - collapse.ALTERNATING_TV) for n in ns]
    worst = max(errs)
    write_table(out / "alternating_tv.csv", ("n", "abs_error"), [(n, e) for n, e in zip(ns, errs) if n <= 64 or n % 1000 == 0])
    return worst < 1e-12, f"max |TV - 2(e-1)/(e+1)| = {worst:.2e}"


@_timed(3, "total variation decay", limit=30)
def check_tv_decay(out: Path):
    ns = (1000, 10_000, 100_000)
    recs = collapse.tv_decay_experiment(ns, 200, 0.1, SEEDS)
    write_table(out / "tv_decay.csv", ("n", "seed", "tv"), [(r.n, r.seed, r.tv) for r in recs])
    med = [statistics.median(r.tv for r in recs if r.n == n) for n in ns]
    bound = collapse.tv_oracle_bound(ns[-1])
    ok = med[0] > med[1] > med[2] and med[2] < bound
    return ok, "medians " + ", ".join(f"{m:.3e}" for m in med) + f"; bound at 1e5 {bound:.3e}"


@_timed(4, "synthetic collapse, sinusoidal", limit=120)
def check_synthetic(out: Path):
    cfg = ModelConfig(d=64, layers=1, pe=parse_scheme("ape", 64), norm_scales=(SINUSOIDAL_BETA1, 1.0, 1.0))
    recs = collapse.collapse_curve(cfg, (16, 64, 256, 1024, 4096), SEEDS)
    write_table(out / "synthetic_collapse.csv", ("n", "seed", "l1", "linf"), [(r.n, r.seed, r.l1, r.linf) for r in recs])
    m16 = statistics.median(r.l1 for r in recs if r.n == 16)
    m4k = statistics.median(r.l1 for r in recs if r.n == 4096)
    return m4k < 0.1 * m16, f"median L1 {m16:.4f} at n=16, {m4k:.4f} at n=4096 (ratio {m4k / m16:.4f})"


@_timed(5, "positional-encoding ablation", limit=300)
def check_pe_ablation(out: Path):
    rows, worst = [], {}
    for pe in PE_NAMES:
        cfg = ModelConfig(d=64, layers=1, pe=parse_scheme(pe, 64))
        recs = collapse.collapse_curve(cfg, (64, 4096), SEEDS)
        by = {(r.n, r.seed): r.l1 for r in recs}
        rows += [(pe, r.n, r.seed, r.l1) for r in recs]
        worst[pe] = min(by[(64, s)] / by[(4096, s)] if by[(4096, s)] > 0 else np.inf for s in SEEDS)
    write_table(out / "pe_ablation.csv", ("pe", "n", "seed", "l1"), rows)
    ok = all(w > 1.0 for w in worst.values())
    return ok, "smallest dist(64)/dist(4096) per PE: " + ", ".join(f"{k} {v:.2f}" for k, v in worst.items())


@_timed(6, "separator mitigation")
def check_separator(out: Path):
    cfg = ModelConfig(d=64, layers=1)
    res = collapse.separator_experiment(cfg, (2048,), 3, SEEDS)
    ones = {r.seed: r.l1 for r in res["ones"]}
    commas = {r.seed: r.l1 for r in res["commas"]}
    write_table(out / "separator.csv", ("seed", "ones_l1", "commas_l1"), [(s, ones[s], commas[s]) for s in SEEDS])
    ok = all(commas[s] > SEPARATOR_MARGIN * ones[s] and commas[s] > ones[s] for s in SEEDS)
    ratio = min(commas[s] / ones[s] if ones[s] > 0 else np.inf for s in SEEDS)
    return ok, f"smallest commas/ones L1 ratio at n=2048: {ratio:.1f} (margin {SEPARATOR_MARGIN:g})"


@_timed(7, "precision thresholds")
def check_thresholds(out: Path):
    cfg = ModelConfig(d=64, layers=1)
    ns = [2**k for k in range(2, 14)]
    found = {f.name: collapse.precision_threshold(cfg, ns, f, SEEDS) for f in (BFLOAT16, BINARY16, BINARY32)}
    rows = [(name, t.seed, t.n if t.detected else "none") for name, ts in found.items() for t in ts]
    write_table(out / "precision_thresholds.csv", ("precision", "seed", "threshold"), rows)
    bf, f32 = found["bf16"], found["f32"]
    exists = all(t.detected and t.n <= 8192 for t in bf)
    ordered = all(a.n <= b.n for a, b in zip(bf, f32) if a.detected and b.detected)
    both = sum(a.detected and b.detected for a, b in zip(bf, f32))
    half = all(a.n <= b.n for a, b in zip(bf, found["f16"]) if a.detected and b.detected)
    detail = (
        "bf16 " + ",".join(str(t.n) for t in bf)
        + "; f16 " + ",".join(str(t.n) for t in found["f16"])
        + "; f32 " + ",".join(str(t.n) for t in f32)
        + f"; bf16 <= f32 where both exist ({both} seeds); bf16 <= f16 {'holds' if half else 'fails'}"
    )
    return exists and ordered, detail


@_timed(8, "Jacobian cross-validation")
def check_jacobians(out: Path):
    rows, worst, causal = [], 0.0, True
    for inst in range(20):
        g = stream(inst, "jacobian-instance")
        n, L = int(g.integers(2, 17)), int(g.integers(1, 4))
        pe = PE_NAMES[inst % len(PE_NAMES)]
        cfg = ModelConfig(d=16, layers=L, seed=inst, pe=parse_scheme(pe, 16))
        w = init_model(cfg)
        x = g.standard_normal((n, 16))
        i = int(g.integers(0, n))
        Ja = squash.jacobian_analytic(cfg, w, x, i)
        Jf = squash.jacobian_fd(cfg, w, x, i)
        scale = np.linalg.norm(Ja)
        err = np.linalg.norm(Ja - Jf) / scale if scale > 0 else np.linalg.norm(Jf)
        worst = max(worst, err)
        t = int(g.integers(0, n))
        J = output_jacobians(cfg, w, x, t)
        sparse = bool(np.all(J[t + 1:] == 0.0))
        causal &= sparse
        rows.append((inst, pe, n, L, i, err, str(sparse).lower()))
    write_table(out / "jacobians.csv", ("instance", "pe", "n", "layers", "token", "rel_error", "causal"), rows)
    return worst < 1e-5 and causal, f"max relative Frobenius error {worst:.2e}; causal sparsity {'exact' if causal else 'broken'}"


@_timed(9, "path-sum bound")
def check_bound(out: Path):
    rep = squash.bound_check(ModelConfig(d=16), range(100))
    write_table(
        out / "bound_check.csv",
        ("seed", "n", "layers", "token_index", "measured_norm", "frobenius", "bound_value"),
        rep.rows,
    )
    g = stream(0, "enumeration")
    worst = 0.0
    for n in range(1, 7):
        for L in range(1, 4):
            for _ in range(5):
                A = [squash.random_stochastic_lower(n, g) for _ in range(L)]
                beta = float(g.uniform(0.5, 2.0))
                consts = squash.BoundConstants((0.0,) * L, beta1=beta)
                diff = np.max(np.abs(squash.path_sum_bound(A, consts).path_sums - squash.path_enumeration(A, beta)))
                worst = max(worst, float(diff))
    ok = rep.ok and rep.instances == 100 and worst < 1e-10
    return ok, f"{len(rep.violations)} violations in {rep.instances} instances (worst ratio {rep.worst_ratio:.3f}); enumeration gap {worst:.1e}"


@_timed(10, "limit case")
def check_limit(out: Path):
    g = stream(0, "limit-case")
    rows, ok = [], True
    for inst in range(20):
        n = int(g.integers(2, 65))
        rec = squash.limit_case(squash.random_stochastic_lower(n, g), 4096, 1e-8)
        ok &= rec.converged and rec.hypothesis_ok and bool(np.all(np.diff(rec.distances) <= 1e-15))
        rows.append((inst, n, rec.steps if rec.converged else "none", rec.distances[-1]))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ident = squash.limit_case(np.eye(8), 4096, 1e-8)
    flagged = (not ident.converged) and (not ident.hypothesis_ok) and bool(caught)
    rows.append(("identity", 8, "none" if not ident.converged else ident.steps, ident.distances[-1]))
    write_table(out / "limit_case.csv", ("instance", "n", "steps", "final_distance"), rows)
    done = [r[2] for r in rows[:-1] if r[2] != "none"]
    detail = f"{len(done)}/20 converged"
    if done:
        detail += f" (max steps {max(done)})"
    detail += "; identity flagged" if flagged else "; identity not flagged"
    return ok and flagged, detail


@_timed(11, "stochastic matrix lemmas")
def check_lemmas(out: Path):
    rep = squash.stochastic_lemma_checks(1000, 32, 0)
    write_table(
        out / "lemmas.csv",
        ("samples", "eigen_residual", "spectral_radius", "rowsum_error", "upper_max", "min_entry"),
        [(rep.samples, rep.max_eigen_residual, rep.max_spectral_radius, rep.max_product_rowsum_error,
          rep.max_product_upper, rep.min_product_entry)],
    )
    return rep.ok, (
        f"eigen residual {rep.max_eigen_residual:.1e}, radius {rep.max_spectral_radius:.15f}, "
        f"product row-sum error {rep.max_product_rowsum_error:.1e}"
    )


@_timed(12, "ratio invariance")
def check_ratio(out: Path):
    rows, ok, details = [], True, []
    for L in (1, 2, 3):
        rep = counting.ratio_invariance_check(ModelConfig(d=64), [(1, 1), (1, 2), (2, 3)], [2, 4, 8], L)
        ok &= rep.ok
        rows += [(L, f"{r[0][0]}:{r[0][1]}", r[1], r[2]) for r in rep.rows]
        details.append(f"L={L} gap {rep.max_gap:.1e} perm {rep.permutation_gap:.1e} counter {rep.counterexample_gap:.2f}")
    write_table(out / "ratio_invariance.csv", ("layers", "ratio", "multiplier", "gap"), rows)
    return ok, "; ".join(details)


@_timed(13, "counting collapse")
def check_counting(out: Path):
    cfg = ModelConfig(d=64, layers=1)
    readout = counting.fit_count_readout(cfg, (4, 8, 16, 32, 64), seed=0)
    demo = counting.counting_collapse_demo(cfg.with_(seed=0), readout, BFLOAT16, 8192)
    write_table(
        out / "counting_collapse.csv",
        ("precision", "n", "prediction"),
        [(demo.precision, demo.n if demo.detected else "none", demo.prediction if demo.detected else "none")],
    )
    return demo.detected, demo.describe()


CHECKS = (
    check_tail_gap, check_alternating, check_tv_decay, check_synthetic, check_pe_ablation,
    check_separator, check_thresholds, check_jacobians, check_bound, check_limit,
    check_lemmas, check_ratio, check_counting,
)


def run_checks(out_dir, only=None) -> list[CheckResult]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [c(out) for c in CHECKS if only is None or c.number in only]


def compare_dirs(a, b) -> list[str]:
    """Names of CSV files that differ or are missing between two directories."""
    a, b = Path(a), Path(b)
    names = sorted({p.name for p in a.glob("*.csv")} | {p.name for p in b.glob("*.csv")})
    return [n for n in names if not ((a / n).exists() and (b / n).exists() and filecmp.cmp(a / n, b / n, shallow=False))]


def determinism_result(first_dir, second_dir, seconds: float) -> CheckResult:
    diffs = compare_dirs(first_dir, second_dir)
    count = len(list(Path(first_dir).glob("*.csv")))
    detail = f"{count} CSV files byte-identical" if not diffs else "differing files: " + ", ".join(diffs)
    return CheckResult(14, "determinism", not diffs and count > 0, detail, seconds)


def selftest(out_dir, rerun: bool = True) -> list[CheckResult]:
    """Run every check; with ``rerun`` repeat them in a scratch directory and compare CSV bytes."""
    results = run_checks(out_dir)
    if rerun:
        t = time.perf_counter()
        with tempfile.TemporaryDirectory() as tmp:
            run_checks(tmp)
            results.append(determinism_result(out_dir, tmp, time.perf_counter() - t))
    return results
