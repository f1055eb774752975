"""Command-line entry point: ``collapse-lab <command> [options]``.

Settings come from flags, then a ``--config`` key=value file, then the
``COLLAPSE_LAB_SEED`` / ``COLLAPSE_LAB_THREADS`` environment variables.
"""

from __future__ import annotations

import argparse
import logging
import os
import statistics
import sys
import warnings
from pathlib import Path

import numpy as np

from . import collapse, counting, harness, selftest, squash
from .errors import ContractError, InvariantViolation, NumericalFailure
from .model import ModelConfig, init_model
from .numerics import FloatFormat, parse_format_tag
from .posenc import parse_scheme
from .rng import stream
from .tokens import PRESETS, make_tokens

EXIT_OK, EXIT_CONTRACT, EXIT_NUMERIC, EXIT_SELFTEST = 0, 1, 2, 3



def parse_lengths(text: str) -> list[int]:
    """``"16..8192"`` gives powers of two; otherwise a comma-separated list."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = (int(s) for s in text.split("..", 1))
            if lo < 1 or hi < lo:
                raise ContractError(f"bad length range {text!r}")
            out, n = [], lo
            while n <= hi:
                out.append(n)
                n *= 2
            return out
        out = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ContractError(f"cannot parse lengths {text!r}") from None
    if not out:
        raise ContractError("length list is empty")
    return out


def parse_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def parse_ratios(text: str) -> list[tuple[int, int]]:
    out = []
    for item in parse_list(text):
        try:
            a, b = (int(s) for s in item.split(":"))
        except ValueError:
            raise ContractError(f"bad ratio {item!r}; expected a:b") from None
        out.append((a, b))
    return out


def _fmt(name: str) -> FloatFormat:
    return FloatFormat.of(parse_format_tag(name))


def _seeds(args) -> list[int]:
    return list(range(args.seed, args.seed + args.seeds))


def _cfg(args, pe: str = "nope") -> ModelConfig:
    return ModelConfig(
        d=args.d, layers=args.layers, seed=args.seed,
        pe=parse_scheme(pe, args.d, args.theta, args.slope),
        norm_scales=(args.beta1, args.beta2, args.beta3),
    )


def _write_or_print(header, rows, out):
    if out:
        harness.write_table(out, header, rows)
        print(f"wrote {len(rows)} rows to {out}")
    else:
        sys.stdout.write(harness.csv_text(header, rows))


def cmd_collapse_run(args):
    cfg = _cfg(args)
    spec = harness.ExperimentSpec(
        "collapse", args.preset, cfg, tuple(parse_lengths(args.lengths)), tuple(_seeds(args)),
        tuple(parse_list(args.pe)), tuple(parse_list(args.precision)), args.out,
    )
    rows = harness.run(spec, args.threads)
    if not args.out:
        sys.stdout.write(harness.csv_text(harness.FIELDS, [[getattr(r, f) for f in harness.FIELDS] for r in rows]))
    else:
        print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_collapse_separator(args):
    cfg = _cfg(args, args.pe)
    res = collapse.separator_experiment(cfg, parse_lengths(args.lengths), args.period, _seeds(args))
    rows = [(preset, r.n, r.seed, r.l1, r.linf) for preset in ("ones", "commas") for r in res[preset]]
    _write_or_print(("preset", "n", "seed", "l1", "linf"), rows, args.out)
    return EXIT_OK


def cmd_collapse_threshold(args):
    cfg = _cfg(args, args.pe)
    rows = []
    for name in parse_list(args.precision):
        for t in collapse.precision_threshold(cfg, parse_lengths(args.lengths), _fmt(name), _seeds(args), args.preset):
            rows.append((t.precision, t.seed, t.n if t.detected else "none"))
    _write_or_print(("precision", "seed", "threshold"), rows, args.out)
    return EXIT_OK


def cmd_tv(args):
    cfg = ModelConfig(d=2)
    spec = harness.ExperimentSpec(
        "tv", "uniform", cfg, tuple(parse_lengths(args.lengths)), tuple(_seeds(args)),
        ("nope",), ("f64",), args.out, (("k", args.k), ("noise", args.noise)),
    )
    rows = harness.run(spec, args.threads)
    for n in spec.lengths:
        med = statistics.median(r.value for r in rows if r.n == n)
        print(f"n={n} median TV {med:.6e} ceiling {collapse.tv_oracle_bound(n, args.k, args.noise):.6e}")
    return EXIT_OK


def cmd_alt_tv(args):
    rows = [(n, collapse.alternating_tv(n)) for n in parse_lengths(args.lengths)]
    _write_or_print(("n", "tv"), rows, args.out)
    print(f"closed form 2(e-1)/(e+1) = {collapse.ALTERNATING_TV!r}", file=sys.stderr)
    return EXIT_OK


def cmd_squash_profile(args):
    cfg = _cfg(args, args.pe)
    rows = []
    for seed in _seeds(args):
        c = cfg.with_(seed=seed)
        if args.mode == "consistent":
            model, x = squash.consistent_instance(c, seed, args.n, c.layers)
            bound = squash.path_sum_bound(model.attn, model.constants()).values
            measured = squash.block_norms(model.jacobians(x))[2]
        else:
            x = make_tokens("gaussian", args.n, seed, c.d)
            measured = squash.sensitivity_profile(c, init_model(c), x).max_column
            bound = None
        for i in range(args.n):
            rows.append((seed, i, measured[i]) + (() if bound is None else (bound[i],)))
    header = ("seed", "token_index", "measured_norm") + (("bound_value",) if args.mode == "consistent" else ())
    _write_or_print(header, rows, args.out)
    return EXIT_OK


def cmd_squash_bound(args):
    if args.mode != "consistent":
        raise ContractError("the path-sum bound is only checked in consistent mode")
    cfg = ModelConfig(d=args.d, norm_scales=(args.beta1, args.beta2, args.beta3))
    rep = squash.bound_check(cfg, range(args.seed, args.seed + args.instances), args.max_n, args.max_layers)
    if args.out:
        harness.write_table(args.out, ("seed", "n", "layers", "token_index", "measured_norm", "frobenius", "bound_value"), rep.rows)
    print(f"{rep.instances} instances, {len(rep.violations)} violations, worst measured/bound {rep.worst_ratio:.4f}")
    for v in rep.violations[:10]:
        print(f"violation: seed={v[0]} n={v[1]} layers={v[2]} token={v[3]} measured={v[4]!r} bound={v[5]!r}")
    return EXIT_OK if rep.ok else EXIT_SELFTEST


def cmd_limit_case(args):
    g = stream(args.seed, "limit-case")
    A = np.eye(args.n) if args.identity else squash.random_stochastic_lower(args.n, g)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rec = squash.limit_case(A, args.lmax, args.tol)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if rec.converged:
        print(f"n={args.n}: within {args.tol:g} of the first-column matrix after {rec.steps} steps")
    else:
        print(f"n={args.n}: not converged after {args.lmax} steps (distance {rec.distances[-1]:.3e})")
    if args.out:
        harness.write_table(args.out, ("steps", "distance"), [(i + 1, d) for i, d in enumerate(rec.distances)])
    return EXIT_OK


def cmd_squash_lemmas(args):
    rep = squash.stochastic_lemma_checks(args.samples, args.max_n, args.seed)
    print(rep)
    return EXIT_OK if rep.ok else EXIT_SELFTEST


def cmd_ratio_check(args):
    cfg = ModelConfig(d=args.d)
    mults = [int(m) for m in parse_list(args.multipliers)]
    rep = counting.ratio_invariance_check(cfg, parse_ratios(args.ratios), mults, args.layers, args.seed)
    rows = [(f"{r[0][0]}:{r[0][1]}", r[1], r[2]) for r in rep.rows]
    _write_or_print(("ratio", "multiplier", "gap"), rows, args.out)
    print(
        f"max gap {rep.max_gap:.3e}, permutation gap {rep.permutation_gap:.3e}, "
        f"counterexample gap {rep.counterexample_gap:.3e}, normed gap {rep.normed_gap:.3e}",
        file=sys.stderr,
    )
    return EXIT_OK if rep.ok else EXIT_SELFTEST


def cmd_collapse_demo(args):
    cfg = _cfg(args, args.pe)
    readout = counting.fit_count_readout(cfg, parse_lengths(args.train), args.seed)
    demo = counting.counting_collapse_demo(cfg, readout, _fmt(args.precision), args.nmax)
    print(demo.describe())
    return EXIT_OK


def cmd_plot(args):
    spec = harness.PlotSpec(metric=args.metric, log_y=args.log_y, log_x=not args.linear_x, title=args.title)
    path = harness.emit_svg(args.csv, args.out, spec)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_selftest(args):
    out = Path(args.out_dir)
    results = selftest.selftest(out, rerun=not args.no_rerun)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_SELFTEST if failed else EXIT_OK


def _model_args(p, pe_default=None):
    p.add_argument("--d", type=int, default=64, help="model dimension")
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--beta1", type=float, default=1.0, help="scale of the attention norm")
    p.add_argument("--beta2", type=float, default=1.0, help="scale of the MLP norm")
    p.add_argument("--beta3", type=float, default=1.0, help="scale of the output norm")
    p.add_argument("--theta", type=float, default=10000.0, help="rotary/sinusoid base")
    p.add_argument("--slope", type=float, default=2.0**-8, help="ALiBi slope")
    if pe_default is not None:
        p.add_argument("--pe", default=pe_default)


def _sweep_args(p, lengths, seeds=5):
    p.add_argument("--lengths", default=lengths, help="comma list or lo..hi (powers of two)")
    p.add_argument("--seeds", type=int, default=seeds, help="number of seeds")
    p.add_argument("--out", default=None, help="CSV path (stdout if omitted)")


def build_parser():
    parser = argparse.ArgumentParser(prog="collapse-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--list", action="store_true", help="print the experiment registry and exit")
    parser.add_argument("--config", default=None, help="key=value file; flags win over it")
    parser.add_argument("--seed", type=int, default=None, help=f"base seed (env {harness.ENV_SEED})")
    parser.add_argument("--threads", type=int, default=None, help=f"worker threads (env {harness.ENV_THREADS})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")
    leaves = []

    def leaf(container, name, fn, **kw):
        p = container.add_parser(name, **kw)
        p.set_defaults(func=fn)
        leaves.append(p)
        return p

    col = sub.add_parser("collapse", help="representational collapse sweeps").add_subparsers(dest="action", required=True)
    p = leaf(col, "run", cmd_collapse_run, help="distance curves over n")
    _model_args(p)
    _sweep_args(p, "16..4096")
    p.add_argument("--preset", default="gaussian", choices=PRESETS)
    p.add_argument("--pe", default="ape", help="comma list of nope, ape, ape-embed, rope, alibi")
    p.add_argument("--precision", default="f64", help="comma list of f64, f32, bf16, f16")
    p = leaf(col, "separator", cmd_collapse_separator, help="ones with and without separators")
    _model_args(p, "nope")
    _sweep_args(p, "2048")
    p.add_argument("--period", type=int, default=3)
    p = leaf(col, "threshold", cmd_collapse_threshold, help="first bitwise-collapse length per precision")
    _model_args(p, "nope")
    _sweep_args(p, "4..8192")
    p.add_argument("--preset", default="ones", choices=PRESETS)
    p.add_argument("--precision", default="bf16,f16,f32")

    p = leaf(sub, "tv", cmd_tv, help="total variation decay with a perturbed prefix")
    _sweep_args(p, "1000,10000,100000")
    p.add_argument("--k", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.1)
    p = leaf(sub, "alt-tv", cmd_alt_tv, help="alternating-logit total variation")
    p.add_argument("--lengths", default="2..8192")
    p.add_argument("--out", default=None)

    sq = sub.add_parser("squash", help="sensitivity and path-sum bounds").add_subparsers(dest="action", required=True)
    p = leaf(sq, "profile", cmd_squash_profile, help="per-token Jacobian norms")
    _model_args(p, "nope")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--mode", choices=("full", "consistent"), default="full")
    p.add_argument("--out", default=None)
    p = leaf(sq, "bound-check", cmd_squash_bound, help="check the bound on random surrogate instances")
    _model_args(p)
    p.add_argument("--mode", choices=("consistent",), default="consistent")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--max-n", type=int, default=16)
    p.add_argument("--max-layers", type=int, default=3)
    p.add_argument("--out", default=None)
    for container, name in ((sq, "limit-case"), (sub, "limit-case")):
        p = leaf(container, name, cmd_limit_case, help="powers of (A + I) / 2")
        p.add_argument("--n", type=int, default=64)
        p.add_argument("--lmax", type=int, default=4096)
        p.add_argument("--tol", type=float, default=1e-8)
        p.add_argument("--identity", action="store_true", help="use the identity matrix")
        p.add_argument("--out", default=None)
    p = leaf(sq, "lemmas", cmd_squash_lemmas, help="row-stochastic matrix lemmas")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--max-n", type=int, default=32)

    cnt = sub.add_parser("counting", help="ratio invariance and counting collapse").add_subparsers(dest="action", required=True)
    p = leaf(cnt, "ratio-check", cmd_ratio_check, help="class representations across count multiples")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--ratios", default="1:1,1:2,2:3")
    p.add_argument("--multipliers", default="1,2,4,8")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--out", default=None)
    p = leaf(cnt, "collapse-demo", cmd_collapse_demo, help="counts n and n+1 with identical outputs")
    _model_args(p, "nope")
    p.add_argument("--precision", default="bf16")
    p.add_argument("--nmax", type=int, default=8192)
    p.add_argument("--train", default="4,8,16,32,64", help="lengths used to fit the readout")

    p = leaf(sub, "plot", cmd_plot, help="SVG from a result CSV")
    p.add_argument("csv")
    p.add_argument("--out", required=True)
    p.add_argument("--metric", default=None)
    p.add_argument("--log-y", action="store_true")
    p.add_argument("--linear-x", action="store_true")
    p.add_argument("--title", default="")

    p = leaf(sub, "selftest", cmd_selftest, help="run every acceptance check")
    p.add_argument("--out-dir", default="selftest-out")
    p.add_argument("--no-rerun", action="store_true", help="skip the determinism re-run")
    return parser, leaves


def _apply_config(leaves, config: dict):
    for p in leaves:
        known = {a.dest for a in p._actions}
        p.set_defaults(**{k: v for k, v in config.items() if k in known})


def main(argv=None) -> int:
    parser, leaves = build_parser()
    raw = list(sys.argv[1:] if argv is None else argv)
    try:
        if "--config" in raw:
            i = raw.index("--config")
            if i + 1 >= len(raw):
                raise ContractError("--config needs a path")
            _apply_config([parser, *leaves], harness.load_config(raw[i + 1]))
        args = parser.parse_args(raw)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        if args.list:
            for cmd, anchor in harness.preset_registry():
                print(f"{cmd:40s} {anchor}")
            return EXIT_OK
        if not getattr(args, "func", None):
            parser.print_help()
            return EXIT_CONTRACT
        if args.seed is None:
            args.seed = int(os.environ.get(harness.ENV_SEED, 0))
        if args.threads is None:
            args.threads = harness.default_threads()
        return args.func(args)
    except (ContractError, harness.CellFailure) as exc:
        cause = getattr(exc, "cause", None)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(cause, NumericalFailure) else EXIT_CONTRACT
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_SELFTEST


if __name__ == "__main__":
    sys.exit(main())
