"""Command-line interface: ``trajlab <command> [flags]``.

Exit codes: 0 when every primary output was written, 1 when a run or sweep
produced no completed run, 2 for invalid input (bad config, missing runs,
too little data for a fit).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plotting
from .analysis import (
    InsufficientDataError,
    align_and_smooth,
    decay_report,
    detect_invariance,
    eigen_dynamics,
    fit_document,
    fit_L0_elr,
    fit_noise_elr,
    fit_paraboloid,
    fit_run_power_law,
    fit_scaling_laws,
    group_distance,
    loss_at,
    optimum_from_fit,
    pairwise_matrix,
    shuffled_labels,
    stable_noise_level,
    write_document,
)
from .analysis.invariance import DegenerateGroupingError, GROUP_KEYS
from .config import ConfigError, TrainConfig, template
from .numkit import DegenerateFitError
from .optim import BsSchedule
from .runner import COMPLETED, MissingRunsError, Registry, SweepSpec, resume_into, run_sweep, train_into

log = logging.getLogger("trajlab")

ANALYSES = ("invariance", "powerlaw", "paraboloid", "eigen", "scaling", "decay")


class UsageError(ValueError):
    pass


@dataclass
class ReportBundle:
    kind: str
    inputs: list[str]
    flags: dict
    files: list[str] = field(default_factory=list)
    generated_at: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    summary: dict = field(default_factory=dict)

    def add(self, path) -> Path:
        self.files.append(str(path))
        return Path(path)

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        body = {"kind": self.kind, "inputs": sorted(self.inputs), "flags": self.flags, "files": self.files,
                "generated_at": self.generated_at, "summary": self.summary}
        path.write_text(json.dumps(body, indent=2, default=str) + "\n")
        return path


def write_csv(path: Path, header: list[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else v for v in r])
    return path


# ---------------------------------------------------------------------------
# run commands
# ---------------------------------------------------------------------------

def _registry(args) -> Registry:
    root = args.registry or os.environ.get("TRAJLAB_REGISTRY")
    if not root:
        raise UsageError("no registry: pass --registry or set TRAJLAB_REGISTRY")
    return Registry(root)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from None


def cmd_gen_config(args) -> int:
    doc = template(args.template, sweep=args.sweep)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _status_line(rec) -> str:
    last = rec.final
    val = next((p.val_loss for p in reversed(rec.points) if p.val_loss is not None), None)
    tail = f" tokens={last.tokens} val_loss={val:.4f}" if last and val is not None else ""
    return f"{rec.config_hash} eta={rec.config.eta:.4g} lam={rec.config.lam:.4g} {rec.status}{tail}"


def cmd_train(args) -> int:
    cfg = TrainConfig.from_dict(_read_json(args.config))
    reg = _registry(args)
    h = cfg.config_hash()
    if reg.has(h):
        print(f"skipped 1 completed ({h})")
        rec = reg.load(h)
    else:
        rec = train_into(reg, cfg)
    print(_status_line(rec))
    return 0 if rec.status == COMPLETED else 1


def cmd_sweep(args) -> int:
    spec = SweepSpec.from_dict(_read_json(args.spec))
    reg = _registry(args)
    res = run_sweep(spec, reg, workers=args.workers)
    if res.skipped:
        print(f"skipped {len(res.skipped)} completed")
    for h, rec in res.records.items():
        print(_status_line(rec))
    ok = sum(r.status == COMPLETED for r in res.records.values())
    print(f"{ok}/{len(res.records)} cells completed")
    return 0 if ok else 1


def cmd_resume(args) -> int:
    reg = _registry(args)
    ov = {}
    if args.eta is not None:
        ov["peak_lr"] = args.eta
    if args.lam is not None:
        ov["weight_decay"] = args.lam
    if args.batch_size is not None:
        ov["bs_schedule"] = BsSchedule.fixed(args.batch_size)
    if args.extra_tokens is not None:
        ov["extra_tokens"] = args.extra_tokens
    rec = resume_into(reg, args.checkpoint, ov)
    print(_status_line(rec))
    return 0 if rec.status == COMPLETED else 1


# ---------------------------------------------------------------------------
# analyses
# ---------------------------------------------------------------------------

def _records(reg: Registry, hashes):
    recs = reg.load_many(hashes or None)
    if not recs:
        raise InsufficientDataError("registry holds no runs")
    return recs


def _window(spec: str | None):
    if not spec:
        return None, None
    lo, _, hi = spec.partition(":")
    return (float(lo) if lo else None), (float(hi) if hi else None)


def analyze_invariance(args, recs, out: Path, bundle: ReportBundle) -> None:
    recs = [r for r in recs if r.status == COMPLETED]
    dropped = len(bundle.inputs) - len(recs)
    lo, hi = _window(args.window)
    starts, ends = [], []
    for r in recs:
        t, _ = r.series(args.metric)
        if t.size:
            starts.append(t[0])
            ends.append(t[-1])
    if len(starts) < 2:
        raise InsufficientDataError("invariance needs at least two completed runs with the metric")
    lo = max(starts) if lo is None else lo
    hi = min(ends) if hi is None else hi
    grid = np.linspace(lo, hi, args.grid_points)
    curves = align_and_smooth(recs, grid, args.metric, args.smooth_halflife)
    pw = pairwise_matrix(curves, args.threshold)
    gm = group_distance(curves, args.group_by, args.threshold, pairwise=pw.matrix)
    verdict = detect_invariance(curves, args.group_by, args.threshold, args.margin, pairwise=pw.matrix)
    control = detect_invariance(shuffled_labels(curves, args.group_by, seed=0), args.group_by, args.threshold,
                                args.margin, pairwise=pw.matrix)
    hashes = [c.meta["hash"] for c in curves]
    key_field = GROUP_KEYS[args.group_by]
    bundle.add(write_csv(out / "pairwise.csv", ["run_a", "run_b", "distance", "below_threshold"],
                         [(hashes[i], hashes[j], pw.matrix[i, j], bool(pw.below[i, j]))
                          for i in range(len(curves)) for j in range(i + 1, len(curves))]))
    bundle.add(write_csv(out / "groups.csv", ["group_a", "group_b", "mean_distance"],
                         [(a, b, gm.matrix[i, j]) for i, a in enumerate(gm.keys) for j, b in enumerate(gm.keys)]))
    bundle.add(write_csv(out / "verdict.csv", ["group", "members", "within", "across", "invariant"],
                         [(g.key, g.members, g.within, g.across, g.invariant) for g in verdict.groups]
                         + [("overall", len(curves), "", "", verdict.invariant),
                            ("permutation_control", len(curves), "", "", control.invariant)]))
    doc = fit_document("invariance", {
        "verdict": verdict.invariant, "summary": verdict.summary(),
        "groups": [vars(g) for g in verdict.groups],
        "permutation_control": {"verdict": control.invariant, "groups": [vars(g) for g in control.groups]},
        "pairwise": pw.matrix, "group_keys": gm.keys, "group_matrix": gm.matrix,
    }, hashes, {"metric": args.metric, "window": [lo, hi], "grid_points": args.grid_points,
                "smoothing": "raw" if args.smooth_halflife <= 0 else f"ema halflife {args.smooth_halflife} tokens",
                "excluded_runs": dropped})
    bundle.add(write_document(out / "invariance.json", doc))
    labels = [f"{c.label()}" for c in curves]
    bundle.add(plotting.curves_by_group(curves, key_field, out / "curves.svg", ylabel=args.metric))
    bundle.add(plotting.heatmap(pw.matrix, labels, out / "pairwise.svg", "pairwise relative distance", args.threshold))
    bundle.add(plotting.heatmap(gm.matrix, [f"{k:.4g}" if isinstance(k, float) else str(k) for k in gm.keys],
                                out / "groups.svg", f"mean distance by {args.group_by}", args.threshold))
    bundle.summary = {"verdict": "invariant" if verdict.invariant else "not invariant",
                      "permutation_control": "invariant" if control.invariant else "not invariant"}
    print(f"verdict: {verdict.summary()}")
    print(f"permutation control: {control.summary()}")


def _post_warmup(rec, metric="val_loss"):
    w = rec.config.lr_schedule.warmup_tokens
    pts = [p for p in rec.points if getattr(p, metric) is not None and p.tokens > w]
    return np.array([p.iter for p in pts], dtype=float), np.array([getattr(p, metric) for p in pts], dtype=float)


def analyze_powerlaw(args, recs, out: Path, bundle: ReportBundle) -> None:
    recs = [r for r in recs if r.status == COMPLETED and r.config.lr_schedule.kind == "constant"]
    rows, L0s, gams, levels, level_gams = [], [], [], [], []
    for r in recs:
        t, y = _post_warmup(r)
        try:
            fit = fit_run_power_law(t, y, r.config.eta)
        except InsufficientDataError as e:
            log.warning("run %s: %s", r.config_hash, e)
            continue
        G = stable_noise_level(r)
        rows.append((r.config_hash, r.config.eta, r.config.lam, r.config.gamma, fit["L0"], fit["A"], fit["alpha"],
                     fit.r2, fit.degenerate, G))
        if not fit.degenerate:
            L0s.append(fit["L0"])
            gams.append(r.config.gamma)
        if np.isfinite(G):
            levels.append(G)
            level_gams.append(r.config.gamma)
    header = ["run", "eta", "lam", "gamma", "L0", "A", "alpha", "r2", "degenerate", "stable_noise"]
    bundle.add(write_csv(out / "powerlaw_runs.csv", header, rows))
    result = {"runs": [dict(zip(header, r)) for r in rows]}
    agg = []
    try:
        f0 = fit_L0_elr(L0s, gams)
        result["L0_elr"] = f0.to_dict()
        agg.append(("L0_elr", f0["L01"], f0["L02"], f0["L03"], f0.r2))
    except InsufficientDataError as e:
        result["L0_elr"] = {"error": str(e)}
    try:
        fg = fit_noise_elr(levels, level_gams)
        result["noise_elr"] = fg.to_dict()
        agg.append(("noise_elr", fg["G1"], fg["G2"], None, fg.r2))
    except InsufficientDataError as e:
        result["noise_elr"] = {"error": str(e)}
    bundle.add(write_csv(out / "elr_fits.csv", ["law", "p1", "p2", "p3", "r2"], agg))
    bundle.add(write_document(out / "powerlaw.json", fit_document("powerlaw", result, [r.config_hash for r in recs],
                                                                     {"weighting": "equal per run"})))
    if "L01" in result.get("L0_elr", {}).get("params", {}):
        p = result["L0_elr"]["params"]
        gx = np.geomspace(min(gams), max(gams), 100)
        bundle.add(plotting.scatter_fit(gams, L0s, gx, p["L01"] + p["L02"] * gx ** p["L03"], out / "L0_vs_elr.svg",
                                        "eta * lambda", "L0"))
    for name, fit in result.items():
        if isinstance(fit, dict) and "params" in fit:
            print(f"{name}: " + " ".join(f"{k}={v:.4g}" for k, v in fit["params"].items()) + f" r2={fit['r2']:.4f}")


def _final_loss(rec) -> float:
    return loss_at(rec, rec.config.total_tokens) if rec.status == COMPLETED else float("nan")


def analyze_paraboloid(args, recs, out: Path, bundle: ReportBundle) -> None:
    budgets = sorted({r.config.total_tokens for r in recs})
    if len(budgets) > 1:
        raise UsageError(f"runs span {len(budgets)} token budgets {budgets}; select one budget with --runs")
    eta = np.array([r.config.eta for r in recs])
    lam = np.array([r.config.lam for r in recs])
    L = np.array([_final_loss(r) for r in recs])
    fit = fit_paraboloid(eta, lam, L)
    bundle.add(write_csv(out / "cells.csv", ["run", "eta", "lam", "final_val_loss", "status"],
                         [(r.config_hash, r.config.eta, r.config.lam, None if not np.isfinite(v) else v, r.status)
                          for r, v in zip(recs, L)]))
    bundle.add(write_document(out / "paraboloid.json",
                              fit_document("paraboloid", fit, [r.config_hash for r in recs],
                                           {"coordinates": "log2 eta, log2 lambda"})))
    ok = np.isfinite(L)
    bundle.add(plotting.surface(eta[ok], lam[ok], L[ok], fit, out / "paraboloid.svg"))
    print(f"eigenvalues={fit.eigenvalues.tolist()} v1_angle={fit.angle:.1f}deg pd={fit.pd} "
          f"optimum={fit.optimum()} excluded={fit.n_excluded}")


def analyze_eigen(args, recs, out: Path, bundle: ReportBundle) -> None:
    if args.horizons:
        horizons = [float(h) for h in args.horizons.split(",")]
    else:
        total = min(r.config.total_tokens for r in recs)
        horizons = list(np.linspace(total / 8, total, 8))
    pts = eigen_dynamics(recs, horizons)
    bundle.add(write_csv(out / "eigen.csv", ["tokens", "lam1", "lam2", "v1_angle_deg", "pd", "error"],
                         [(p.tokens, p.lam1, p.lam2, p.angle, p.pd, p.error) for p in pts]))
    bundle.add(write_document(out / "eigen.json", fit_document("eigen", pts, [r.config_hash for r in recs],
                                                                 {"horizons": horizons})))
    x = [p.tokens for p in pts]
    bundle.add(plotting.series(x, {"v1 angle": [p.angle for p in pts]}, out / "eigen_angle.svg", "tokens", "degrees"))
    bundle.add(plotting.series(x, {"lambda1": [p.lam1 for p in pts], "lambda2": [p.lam2 for p in pts]},
                               out / "eigenvalues.svg", "tokens", "eigenvalue"))
    for p in pts:
        print(f"tokens={p.tokens:.0f} lam1={p.lam1:.4g} lam2={p.lam2:.4g} angle={p.angle:.1f}")


def analyze_scaling(args, recs, out: Path, bundle: ReportBundle) -> None:
    by_D: dict[int, list] = {}
    for r in recs:
        by_D.setdefault(r.config.total_tokens, []).append(r)
    if len(by_D) < 4:
        raise InsufficientDataError(f"scaling laws need >= 4 budgets, registry has {len(by_D)}")
    optima, rows = [], []
    for D, rs in sorted(by_D.items()):
        fit = fit_paraboloid([r.config.eta for r in rs], [r.config.lam for r in rs], [_final_loss(r) for r in rs])
        try:
            o = optimum_from_fit(D, fit)
        except DegenerateFitError as e:
            rows.append((D, None, None, None, None, str(e)))
            continue
        optima.append(o)
        rows.append((D, o.eta, o.lam, o.gamma, o.loss, ""))
    bundle.add(write_csv(out / "optima.csv", ["D", "eta", "lam", "gamma", "loss", "error"], rows))
    laws = fit_scaling_laws(optima)
    bundle.add(write_document(out / "scaling.json", fit_document("scaling", laws, [r.config_hash for r in recs])))
    D = np.array([o.D for o in optima], dtype=float)
    bundle.add(plotting.series(D, {"eta*": [o.eta for o in optima], "lambda*": [o.lam for o in optima],
                                   "gamma*": [o.gamma for o in optima]}, out / "optima.svg", "tokens D", "optimum",
                               logx=True, logy=True))
    for name, f in laws.to_dict().items():
        print(f"{name}: " + " ".join(f"{k}={v:.4g}" for k, v in f["params"].items()) + f" r2={f['r2']:.4f}")


def _pair_key(cfg: TrainConfig):
    return (cfg.eta, cfg.lam, cfg.model, cfg.data, cfg.bs_schedule, cfg.run_seed)


def analyze_decay(args, recs, out: Path, bundle: ReportBundle) -> None:
    const = [r for r in recs if r.config.lr_schedule.kind == "constant" and r.status == COMPLETED]
    wsd = [r for r in recs if r.config.lr_schedule.kind == "wsd" and r.status == COMPLETED]
    rows = []
    for c in const:
        partners = [w for w in wsd if _pair_key(w.config) == _pair_key(c.config)]
        for row in decay_report(c, partners):
            rows.append({"const_hash": c.config_hash, **row})
    paired = any("wsd_hash" in r for r in rows)
    cols = ["const_hash", "tau", "matched_tau", "tokens", "loss", "lr", "batch_size", "tr_noise", "predicted"]
    if paired:
        cols += ["wsd_hash", "actual", "actual_tau", "rel_error"]
    cols.append("refused")
    bundle.add(write_csv(out / "decay.csv", cols, [[r.get(c) for c in cols] for r in rows]))
    bundle.add(write_document(out / "decay.json", fit_document("decay", {"paired": paired, "rows": rows},
                                                                 [r.config_hash for r in const + wsd])))
    if paired:
        ok = [r for r in rows if r.get("rel_error") is not None]
        bundle.add(plotting.series([r["tau"] for r in ok], {"predicted": [r["predicted"] for r in ok],
                                                             "actual": [r["actual"] for r in ok]},
                                   out / "decay.svg", "gradient-flow time", "loss after decay"))
    print(f"{len(rows)} decay rows ({'paired' if paired else 'prediction only'})")


ANALYZERS = {
    "invariance": analyze_invariance,
    "powerlaw": analyze_powerlaw,
    "paraboloid": analyze_paraboloid,
    "eigen": analyze_eigen,
    "scaling": analyze_scaling,
    "decay": analyze_decay,
}


def cmd_analyze(args) -> int:
    reg = _registry(args)
    recs = _records(reg, args.runs)
    out = Path(args.out or f"report-{args.kind}")
    out.mkdir(parents=True, exist_ok=True)
    flags = {k: getattr(args, k) for k in ("registry", "out", "threshold", "group_by", "smooth_halflife", "window",
                                           "margin", "metric", "grid_points", "horizons", "runs")}
    flags["registry"] = str(reg.root)
    flags["out"] = str(out)
    bundle = ReportBundle(args.kind, [r.config_hash for r in recs], flags)
    ANALYZERS[args.kind](args, recs, out, bundle)
    bundle.write(out)
    print(f"report written to {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajlab", description="Train small LMs on synthetic text and analyze "
                                "how their trajectories depend on learning rate and weight decay.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-config", help="write a populated config from a named template")
    g.add_argument("template")
    g.add_argument("--out")
    g.add_argument("--sweep", action="store_true", help="emit a sweep spec over the default grid")
    g.set_defaults(func=cmd_gen_config)

    def registry_flag(sp):
        sp.add_argument("--registry", default=None, help="run registry directory (default: $TRAJLAB_REGISTRY)")

    t = sub.add_parser("train", help="train one config into the registry")
    t.add_argument("config")
    registry_flag(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="train every cell of a sweep spec")
    s.add_argument("spec")
    s.add_argument("--workers", type=int, default=1)
    registry_flag(s)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("resume", help="continue from a checkpoint, optionally with new hyperparameters")
    r.add_argument("checkpoint")
    r.add_argument("--eta", type=float)
    r.add_argument("--lam", type=float)
    r.add_argument("--batch-size", type=int)
    r.add_argument("--extra-tokens", type=int)
    registry_flag(r)
    r.set_defaults(func=cmd_resume)

    a = sub.add_parser("analyze", help="fit and plot results from the registry")
    a.add_argument("kind", choices=ANALYSES)
    registry_flag(a)
    a.add_argument("--out")
    a.add_argument("--runs", nargs="*", help="config hashes to include (default: all)")
    a.add_argument("--threshold", type=float, default=0.005)
    a.add_argument("--margin", type=float, default=3.0)
    a.add_argument("--group-by", choices=sorted(GROUP_KEYS), default="elr")
    a.add_argument("--smooth-halflife", type=float, default=0.0, help="EMA half-life in tokens; 0 uses raw curves")
    a.add_argument("--window", help="token window lo:hi for curve comparisons")
    a.add_argument("--metric", default="val_loss")
    a.add_argument("--grid-points", type=int, default=200)
    a.add_argument("--horizons", help="comma-separated token counts for eigen dynamics")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except MissingRunsError as e:
        print("error: missing runs:\n" + "\n".join(f"  {h}" for h in e.hashes), file=sys.stderr)
    except (ConfigError, UsageError, InsufficientDataError, DegenerateGroupingError, DegenerateFitError) as e:
        print(f"error: {e}", file=sys.stderr)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
