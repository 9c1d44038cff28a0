"""Command-line entry point.

Subcommands: gen (datasets), eval (directory evaluation and statistics),
theory (score-model training, closed-form checks, guided sampling),
mitigate (contrastive classifier and filtering).  Every run writes a
resolved-config JSON next to its outputs.  Exit codes: 0 success, 2 for
configuration errors, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, mitigation, scenegen, theory, vision

OUTPUT_ROOT_ENV = "RULELAB_OUT"


class CliConfigError(ValueError):
    pass


def _out_dir(args) -> Path:
    root = Path(args.out or os.environ.get(OUTPUT_ROOT_ENV, "out"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def _write_resolved_config(out_dir: Path, args) -> None:
    # "out" and "config" are machine-local paths; dropping them keeps the
    # resolved config (and hence the whole output tree) rerun-identical.
    cfg = {k: (str(v) if isinstance(v, Path) else v)
           for k, v in sorted(vars(args).items())
           if k not in ("func", "out", "config")}
    (out_dir / "resolved_config.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True), encoding="utf-8")


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _jsonable(v)
                for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True),
                    encoding="utf-8")


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    if args.n < 1:
        raise CliConfigError("--n must be >= 1")
    out = _out_dir(args)
    _write_resolved_config(out, args)
    if args.contrastive:
        sets = scenegen.generate_contrastive(
            args.task, args.n, args.size, args.seed,
            offsets=(args.offset_low, args.offset_high))
        for label, (man, imgs) in enumerate(sets):
            scenegen.write_dataset(out / f"class{label}", man, imgs)
    elif args.bias != 0.0 or args.noise_sd != 0.0:
        man, imgs = scenegen.generate_perturbed(
            args.task, args.n, args.size, args.seed, args.bias, args.noise_sd)
        scenegen.write_dataset(out, man, imgs)
        if man.warning:
            print(f"warning: {man.warning}", file=sys.stderr)
    else:
        man, imgs = scenegen.generate_dataset(
            args.task, args.n, args.size, args.seed)
        scenegen.write_dataset(out, man, imgs)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    out = _out_dir(args)
    _write_resolved_config(out, args)
    if args.memcheck:
        if not (args.train and args.query):
            raise CliConfigError("--memcheck needs --train and --query")
        tr_recs, _ = vision.evaluate_directory(args.train, args.task,
                                               size=args.size, eps=args.eps)
        q_recs, _ = vision.evaluate_directory(args.query, args.task,
                                              size=args.size, eps=args.eps)
        rep = analysis.memorization(
            analysis.embed(q_recs, args.task, args.dim),
            analysis.embed(tr_recs, args.task, args.dim))
        (out / "memorization.json").write_text(rep.to_json(), encoding="utf-8")
        return 0
    if not args.dir:
        raise CliConfigError("eval needs --dir")
    records, summary = vision.evaluate_directory(
        args.dir, args.task, size=args.size, eps=args.eps,
        csv_out=out / "features.csv", summary_out=out / "summary.json")
    if summary["n_images"] == 0:
        print("warning: empty directory", file=sys.stderr)
        return 0
    try:
        reg = analysis.fit_rule_regression(records, args.task)
        (out / "regression.json").write_text(reg.to_json(), encoding="utf-8")
    except analysis.AnalysisError as e:
        print(f"warning: regression skipped: {e}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# theory
# ---------------------------------------------------------------------------

def _theory_train_one(dist, t, args, activation):
    sched = theory.NoiseSchedulePoint.from_t(t)
    lr = args.lr if args.lr is not None else theory.default_lr(activation)
    return theory.train_gd(
        dist, sched, activation=activation, m=args.m, n=args.n,
        n_eps=args.n_eps, epochs=args.epochs, lr=lr, seed=args.seed,
        noise_mode=args.noise_mode), sched


def cmd_theory(args) -> int:
    out = _out_dir(args)
    _write_resolved_config(out, args)
    dist = theory.MultiPatchDistribution(d=args.d)
    ts = [float(t) for t in args.t.split(",")]
    acts = list(theory.ACTIVATIONS) if args.all_activations \
        else [args.activation]
    if args.verify_stationary:
        results = {}
        for t in ts:
            res, sched = _theory_train_one(dist, t, args, "linear")
            x0 = theory.sample_data(dist, args.n, args.seed)
            z = x0[:, 0, :] @ dist.u
            stat = theory.stationary_linear(float(z.mean()),
                                            float((z * z).mean()),
                                            sched.alpha, sched.beta)
            checks = {}
            for p, patch in enumerate(("patch1", "patch2")):
                w = res.net.weights[p][0]
                direction = dist.u if p == 0 else dist.v
                proj = float((w @ direction) ** 2)
                norm = float(w @ w)
                ref = stat[patch]
                checks[patch] = {
                    "proj_sq": proj, "norm_sq": norm,
                    "proj_sq_closed": ref["proj_sq_aligned"],
                    "norm_sq_closed": ref["norm_sq_aligned"],
                    "proj_rel_err": abs(proj - ref["proj_sq_aligned"])
                    / ref["proj_sq_aligned"],
                    "norm_rel_err": abs(norm - ref["norm_sq_aligned"])
                    / ref["norm_sq_aligned"],
                }
            ok = all(c["proj_rel_err"] < 1e-3 and c["norm_rel_err"] < 1e-3
                     for c in checks.values())
            results[str(t)] = {"pass": ok, **checks}
        _dump(out / "stationary_check.json", results)
        print("stationary check:",
              "pass" if all(r["pass"] for r in results.values()) else "FAIL")
        return 0
    if args.sample:
        nets = {}
        for t in ts:
            res, _ = _theory_train_one(dist, t, args, acts[0])
            nets[t] = res.net
        fn = theory.make_net_score_fn(nets)
        stats = {}
        for lam in sorted({0.0, args.guidance}):
            r = theory.ancestral_sample(fn, args.d, args.n_samples,
                                        lam=lam, seed=args.seed)
            stats[str(lam)] = r["stats"]
        _dump(out / "sampler_stats.json", stats)
        return 0
    for act in acts:
        psi_cols = {}
        for t in ts:
            res, sched = _theory_train_one(dist, t, args, act)
            res.save_history_csv(out / f"loss_{act}_t{t}.csv")
            rep = theory.rule_error(res.net, dist, sched,
                                    n_mc=args.n_mc, seed=args.seed + 7)
            (out / f"rule_error_{act}_t{t}.json").write_text(
                rep.to_json(), encoding="utf-8")
            x0 = theory.sample_data(dist, args.n_mc, args.seed + 8)[:, :2, :]
            rng = np.random.default_rng(args.seed + 9)
            x_t = sched.alpha * x0 + sched.beta * rng.standard_normal(x0.shape)
            psi_cols[f"t{t}"] = theory.psi(res.net, x_t, dist)
        cols = list(psi_cols)
        arr = np.column_stack([psi_cols[c] for c in cols])
        np.savetxt(out / f"psi_{act}.csv", arr, delimiter=",",
                   header=",".join(cols), comments="")
    return 0


# ---------------------------------------------------------------------------
# mitigate
# ---------------------------------------------------------------------------

def cmd_mitigate(args) -> int:
    out = _out_dir(args)
    _write_resolved_config(out, args)
    if args.train_classifier:
        if not args.dir:
            raise CliConfigError(
                "--train-classifier needs --dir with class0/class1/class2")
        recs, labels = [], []
        for label in (0, 1, 2):
            sub = Path(args.dir) / f"class{label}"
            if not sub.is_dir():
                raise CliConfigError(f"missing class directory {sub}")
            rs, _ = vision.evaluate_directory(sub, args.task, size=args.size,
                                              eps=args.eps)
            rs = [r for r in rs if r.valid]
            recs.extend(rs)
            labels.extend([label] * len(rs))
        x = mitigation.features_for_classifier(recs, args.task)
        cfg = mitigation.MitigationConfig(lam=args.guidance, tau=args.tau,
                                          seed=args.seed)
        clf, rep = mitigation.train_classifier(x, np.array(labels), cfg)
        (out / "classifier.json").write_text(clf.to_json(), encoding="utf-8")
        (out / "accuracy.json").write_text(rep.to_json(), encoding="utf-8")
        return 0
    if args.filter:
        if not args.dir:
            raise CliConfigError("--filter needs --dir")
        clf = None
        if args.classifier:
            clf = mitigation.Classifier.from_json(
                Path(args.classifier).read_text(encoding="utf-8"))
        result = mitigation.filter_directory(args.dir, args.task,
                                             eps=args.eps, size=args.size,
                                             classifier=clf)
        if result["warning"]:
            print(f"warning: {result['warning']}", file=sys.stderr)
        _dump(out / "filter_report.json", result)
        (out / "kept.txt").write_text("\n".join(result["kept"]) + "\n",
                                      encoding="utf-8")
        (out / "rejected.txt").write_text("\n".join(result["rejected"]) + "\n",
                                          encoding="utf-8")
        return 0
    raise CliConfigError("mitigate needs --train-classifier or --filter")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="rulelab",
        description="Rule-governed image lab: generate, evaluate, analyze.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default=None,
                       help=f"output directory (default ${OUTPUT_ROOT_ENV} or ./out)")
        p.add_argument("--config", default=None,
                       help="JSON file with default argument values")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1,
                       help="worker count (1 = bit-reproducible)")

    g = sub.add_parser("gen", help="generate a dataset")
    common(g)
    g.add_argument("--task", required=True, choices=scenegen.TASKS)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--bias", type=float, default=0.0)
    g.add_argument("--noise-sd", dest="noise_sd", type=float, default=0.0)
    g.add_argument("--contrastive", action="store_true")
    g.add_argument("--offset-low", dest="offset_low", type=float, default=0.8)
    g.add_argument("--offset-high", dest="offset_high", type=float,
                   default=1.25)
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("eval", help="evaluate an image directory")
    common(e)
    e.add_argument("--task", required=True, choices=scenegen.TASKS)
    e.add_argument("--dir", default=None)
    e.add_argument("--size", type=int, default=32)
    e.add_argument("--eps", type=float, default=0.01)
    e.add_argument("--memcheck", action="store_true")
    e.add_argument("--train", default=None)
    e.add_argument("--query", default=None)
    e.add_argument("--dim", type=int, default=13, choices=(4, 13))
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("theory", help="score-model experiments")
    common(t)
    t.add_argument("--activation", default="relu",
                   choices=theory.ACTIVATIONS)
    t.add_argument("--all-activations", dest="all_activations",
                   action="store_true")
    t.add_argument("--m", type=int, default=20)
    t.add_argument("--d", type=int, default=100)
    t.add_argument("--n", type=int, default=1000)
    t.add_argument("--n-eps", dest="n_eps", type=int, default=1000)
    t.add_argument("--epochs", type=int, default=5000)
    t.add_argument("--lr", type=float, default=None,
                   help="default depends on the activation")
    t.add_argument("--t", default="0.2,0.4,0.6,0.8")
    t.add_argument("--n-mc", dest="n_mc", type=int, default=5000)
    t.add_argument("--noise-mode", dest="noise_mode", default="sample",
                   choices=("sample", "analytic"))
    t.add_argument("--verify-stationary", dest="verify_stationary",
                   action="store_true")
    t.add_argument("--sample", action="store_true")
    t.add_argument("--lambda", dest="guidance", type=float, default=0.0)
    t.add_argument("--n-samples", dest="n_samples", type=int, default=2000)
    t.set_defaults(func=cmd_theory)

    m = sub.add_parser("mitigate", help="classifier training and filtering")
    common(m)
    m.add_argument("--task", required=True, choices=scenegen.TASKS)
    m.add_argument("--dir", default=None)
    m.add_argument("--size", type=int, default=32)
    m.add_argument("--eps", type=float, default=0.01)
    m.add_argument("--train-classifier", dest="train_classifier",
                   action="store_true")
    m.add_argument("--filter", action="store_true")
    m.add_argument("--classifier", default=None,
                   help="serialized classifier JSON for the learned filter")
    m.add_argument("--lambda", dest="guidance", type=float, default=1.0)
    m.add_argument("--tau", type=float, default=0.5)
    m.set_defaults(func=cmd_mitigate)
    return ap


def _apply_config_file(ap: argparse.ArgumentParser, argv: list[str]):
    """File values override parser defaults; explicit flags override both."""
    args = ap.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise CliConfigError(f"bad --config file: {e}")
        if not isinstance(overrides, dict):
            raise CliConfigError("--config must hold a JSON object")
        sub = next(a for a in ap._subparsers._group_actions[0].choices.values()
                   if a.prog.endswith(args.command))
        known = {a.dest for a in sub._actions}
        bad = set(overrides) - known
        if bad:
            raise CliConfigError(f"unknown config keys: {sorted(bad)}")
        sub.set_defaults(**overrides)
        args = ap.parse_args(argv)
    return args


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    ap = build_parser()
    try:
        args = _apply_config_file(ap, argv)
        return args.func(args)
    except (CliConfigError, scenegen.ConfigError,
            theory.TheoryConfigError, mitigation.MitigationError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
