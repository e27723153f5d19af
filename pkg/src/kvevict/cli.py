"""Command-line entry point: ``kvevict {gen-trace,run,oracle,report}``.

Exit codes: 0 success, 1 bad configuration or infeasible budget, 2 I/O or
trace-format failure, 3 an invariant was violated during an audited run.
"""

import argparse
import csv
import io
import json
import sys
from collections import OrderedDict

import numpy as np

from kvevict import engine, metrics, trace
from kvevict.errors import ConfigError, FeasibilityError, KVEvictError
from kvevict.toymodel import ModelConfig, init_random_model, prefill, random_inputs

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INVARIANT = 0, 1, 2, 3

RUN_COLUMNS = (
    "layer",
    "policy",
    "budget_total",
    "budget_layer",
    "retained",
    "true_l1_loss",
    "theorem1_bound",
    "adakv_bound",
    "entropy_e",
    "logit_ce",
)
ORACLE_COLUMNS = (
    "instance",
    "seed",
    "layer",
    "policy",
    "budget_layer",
    "greedy_loss",
    "oracle_loss",
    "greedy_bound",
    "gap",
)
REPORT_COLUMNS = (
    "policy",
    "runs",
    "mean_true_l1_loss",
    "mean_theorem1_bound",
    "mean_adakv_bound",
    "mean_logit_ce",
)

# Relative slack for comparisons between independently accumulated losses.
AUDIT_RTOL = 1e-9


class InvariantViolation(Exception):
    pass


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def render(rows, columns, fmt):
    """Serialise rows deterministically as CSV or JSON text."""
    if fmt == "json":
        payload = [OrderedDict((c, row.get(c)) for c in columns) for row in rows]
        return json.dumps({"columns": list(columns), "rows": payload}, indent=2) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def _emit(text, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _add_model_args(p, layers=4, heads=4, kv_heads=2, dh=8, tokens=32, window=4, vocab=32):
    p.add_argument("--layers", type=int, default=layers)
    p.add_argument("--heads", type=int, default=heads)
    p.add_argument("--kv-heads", type=int, default=kv_heads)
    p.add_argument("--dh", type=int, default=dh)
    p.add_argument("--tokens", type=int, default=tokens)
    p.add_argument("--window", type=int, default=window)
    p.add_argument("--vocab", type=int, default=vocab)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input-scale", type=float, default=1.0)


def _add_policy_args(p):
    p.add_argument("--budget", type=int, default=None, help="total budget (default: half the scored entries)")
    p.add_argument("--kernel", type=int, default=7, help="max-pool kernel; 1 disables pooling")
    p.add_argument("--beta", type=float, default=5.0)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--gamma1", type=float, default=1.0)
    p.add_argument("--gamma2", type=float, default=1.0)


def _add_output_args(p):
    p.add_argument("--out", default=None, help="output path (default stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")


def build_parser():
    parser = argparse.ArgumentParser(prog="kvevict", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-trace", help="prefill a seeded toy model and write a trace file")
    _add_model_args(gen)
    gen.add_argument("--out", required=True)

    run = sub.add_parser("run", help="compress with one policy and report losses")
    _add_model_args(run)
    _add_policy_args(run)
    run.add_argument("--policy", default="lava", choices=sorted(engine.BUNDLES))
    run.add_argument("--trace", default=None, help="read the model from a trace instead")
    _add_output_args(run)

    orc = sub.add_parser("oracle", help="compare greedy eviction to the exhaustive optimum")
    _add_model_args(orc, layers=1, heads=2, kv_heads=2, dh=4, tokens=8, window=2, vocab=8)
    _add_policy_args(orc)
    orc.add_argument("--policy", default="all", help="comma-separated bundles or 'all'")
    orc.add_argument("--instances", type=int, default=1)
    _add_output_args(orc)

    rep = sub.add_parser("report", help="aggregate run CSVs into a per-policy summary")
    rep.add_argument("inputs", nargs="+")
    _add_output_args(rep)
    return parser


def model_config(args, seed=None):
    return ModelConfig(
        n_layers=args.layers,
        n_heads=args.heads,
        n_kv_heads=args.kv_heads,
        head_dim=args.dh,
        window=args.window,
        vocab=args.vocab,
        seed=args.seed if seed is None else seed,
    )


def synthetic_prefill(cfg, n_tokens, input_scale=1.0, keep_full_attention=False):
    weights = init_random_model(cfg)
    return prefill(cfg, weights, random_inputs(cfg, n_tokens, input_scale), keep_full_attention)


def default_budget(n_layers, n_kv_heads, n_tokens, window):
    return n_layers * n_kv_heads * (window + (n_tokens - window) // 2)


def policy_config(args, name, total, window):
    kernel = None if args.kernel == 1 else args.kernel
    return engine.bundle(
        name,
        total,
        window,
        kernel=kernel,
        gamma=args.gamma,
        beta=args.beta,
        gamma1=args.gamma1,
        gamma2=args.gamma2,
    )


def run_rows(report, plan):
    rows = []
    for l, budget in enumerate(plan.per_layer):
        rows.append(
            {
                "layer": l,
                "policy": report.policy,
                "budget_total": report.total_budget,
                "budget_layer": budget,
                "retained": report.retained[l],
                "true_l1_loss": report.true_l1_loss[l],
                "theorem1_bound": report.theorem1_bound[l],
                "adakv_bound": report.adakv_bound[l],
                "entropy_e": report.entropy_e[l],
            }
        )
    rows.append(
        {
            "layer": "model",
            "policy": report.policy,
            "budget_total": report.total_budget,
            "retained": sum(report.retained),
            "logit_ce": report.logit_ce,
        }
    )
    return rows


def execute_run(pre, cfg):
    """Compress, evaluate and audit one run; returns (rows, list of violations)."""
    n_kv, n_tok = pre.layers[0].keys.shape[:2]
    ceiling = cfg.total_budget + n_kv * n_tok
    violations = []

    def audit(event, layer, live):
        if live > ceiling:
            violations.append(f"{event} layer {layer}: {live} live entries > {ceiling}")

    result = engine.compress(pre, cfg, audit=audit)
    report = metrics.evaluate(pre, result)
    if sum(result.plan.per_layer) != cfg.total_budget:
        violations.append("layer budgets do not sum to the total budget")
    problem = report.validate(AUDIT_RTOL)
    if problem:
        violations.append(problem)
    return run_rows(report, result.plan), violations


def cmd_gen_trace(args):
    cfg = model_config(args)
    pre = synthetic_prefill(cfg, args.tokens, args.input_scale)
    trace.write_trace(args.out, pre)
    return EXIT_OK


def cmd_run(args):
    if args.trace:
        pre = trace.read_trace(args.trace)
    else:
        pre = synthetic_prefill(
            model_config(args), args.tokens, args.input_scale, keep_full_attention=args.policy == "h2o"
        )
    mcfg = pre.config
    total = args.budget
    if total is None:
        total = default_budget(mcfg.n_layers, mcfg.n_kv_heads, pre.n_tokens, mcfg.window)
    cfg = policy_config(args, args.policy, total, mcfg.window)
    rows, violations = execute_run(pre, cfg)
    _emit(render(rows, RUN_COLUMNS, args.format), args.out)
    if violations:
        raise InvariantViolation("; ".join(violations))
    return EXIT_OK


def _policies(spec):
    if spec == "all":
        return sorted(engine.BUNDLES)
    names = [s.strip() for s in spec.split(",") if s.strip()]
    for name in names:
        if name not in engine.BUNDLES:
            raise ConfigError(f"unknown policy {name!r}")
    return names


def oracle_rows(args):
    """Greedy vs exhaustive rows for ``args.instances`` seeded instances."""
    names = _policies(args.policy)
    rows, violations = [], []
    for i in range(args.instances):
        seed = args.seed + i
        mcfg = model_config(args, seed)
        scored = mcfg.n_kv_heads * (args.tokens - args.window)
        if scored > metrics.ENUMERATION_CAP:
            raise FeasibilityError(
                f"{scored} scored entries per layer exceed the enumeration cap of "
                f"{metrics.ENUMERATION_CAP}"
            )
        pre = synthetic_prefill(mcfg, args.tokens, args.input_scale, keep_full_attention=True)
        total = args.budget
        if total is None:
            lo = mcfg.n_layers * mcfg.n_kv_heads * args.window
            hi = mcfg.n_layers * mcfg.n_kv_heads * args.tokens
            total = int(np.random.default_rng([seed, 2]).integers(lo, hi + 1))
        for name in names:
            cfg = policy_config(args, name, total, args.window)
            result = engine.compress(pre, cfg)
            for l, (state, mask) in enumerate(zip(pre.layers, result.masks)):
                budget = int(mask.sum())
                greedy, bound, _ = metrics.layer_bounds(state, mask)
                _, best = metrics.oracle_exhaustive_evict(state, budget, args.window)
                rows.append(
                    {
                        "instance": i,
                        "seed": seed,
                        "layer": l,
                        "policy": name,
                        "budget_layer": budget,
                        "greedy_loss": greedy,
                        "oracle_loss": best,
                        "greedy_bound": bound,
                        "gap": greedy - best,
                    }
                )
                if best > greedy * (1 + AUDIT_RTOL) + 1e-12:
                    violations.append(f"seed {seed} {name} layer {l}: oracle {best!r} > greedy {greedy!r}")
                if greedy > bound * (1 + AUDIT_RTOL) + 1e-12:
                    violations.append(f"seed {seed} {name} layer {l}: greedy {greedy!r} > bound {bound!r}")
    return rows, violations


def cmd_oracle(args):
    rows, violations = oracle_rows(args)
    _emit(render(rows, ORACLE_COLUMNS, args.format), args.out)
    if violations:
        raise InvariantViolation("; ".join(violations[:5]))
    return EXIT_OK


def summarize(paths):
    """Mean per-layer losses and logit loss per policy across run CSVs."""
    acc = OrderedDict()
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                entry = acc.setdefault(
                    row["policy"], {"runs": 0, "loss": [], "t1": [], "ada": [], "ce": []}
                )
                if row["layer"] == "model":
                    entry["runs"] += 1
                    entry["ce"].append(float(row["logit_ce"]))
                else:
                    entry["loss"].append(float(row["true_l1_loss"]))
                    entry["t1"].append(float(row["theorem1_bound"]))
                    entry["ada"].append(float(row["adakv_bound"]))

    def mean(xs):
        return float(np.mean(xs)) if xs else None

    return [
        {
            "policy": name,
            "runs": e["runs"],
            "mean_true_l1_loss": mean(e["loss"]),
            "mean_theorem1_bound": mean(e["t1"]),
            "mean_adakv_bound": mean(e["ada"]),
            "mean_logit_ce": mean(e["ce"]),
        }
        for name, e in acc.items()
    ]


def cmd_report(args):
    _emit(render(summarize(args.inputs), REPORT_COLUMNS, args.format), args.out)
    return EXIT_OK


COMMANDS = {"gen-trace": cmd_gen_trace, "run": cmd_run, "oracle": cmd_oracle, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except InvariantViolation as exc:
        print(f"kvevict: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except trace.TraceFormatError as exc:
        print(f"kvevict: bad trace: {exc}", file=sys.stderr)
        return EXIT_IO
    except KVEvictError as exc:
        print(f"kvevict: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, KeyError, csv.Error) as exc:
        print(f"kvevict: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
