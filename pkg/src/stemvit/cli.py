"""Command-line front door.

Commands:
  train        one training run from a config file
  sweep        run an ablation grid (stems x lrs x optimizers x warmups x seeds)
  verify       numerical theorem verifiers (theorem1 | theorem2 | bounds)
  profile      layer-wise token-diversity profile + SVG chart from checkpoints
  convergence  accuracy-at-epoch comparison across run reports

Config files are JSON; every file the CLI writes (configs echoed, reports,
tables) can be re-read by the CLI. Crashed grid cells are rendered literally
as `crash` to mirror the ablation tables.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import multiprocessing as mp
import os
import sys

import numpy as np

from .model import ModelConfig, Model, save_checkpoint, load_checkpoint
from .train import TrainConfig, RunReport, run_training, load_dataset
from .tensor import Tensor, Tape
from . import diagnostics as diag


class ConfigError(ValueError):
    pass


_TOP_KEYS = {"name", "model", "train", "sweep", "seeds", "out"}
_SWEEP_KEYS = {"stem", "lr", "optimizer", "warmup", "ffn_variant"}
_STEM_KEYS = {"spec", "strides", "kernels", "lr", "warmup"}


def parse_config(path):
    """Load and eagerly validate an experiment config."""
    with open(path) as fh:
        raw = json.load(fh)
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown config key {key!r}; allowed: {sorted(_TOP_KEYS)}")
    name = raw.get("name", "experiment")
    if "/" in name or name != name.strip() or not name:
        raise ConfigError(f"name {name!r} is not filesystem-safe")
    model_cfg = ModelConfig.from_dict(raw.get("model", {}))
    train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    sweep = raw.get("sweep", {})
    for key in sweep:
        if key not in _SWEEP_KEYS:
            raise ConfigError(f"unknown sweep axis {key!r}; allowed: {sorted(_SWEEP_KEYS)}")
    stems = sweep.get("stem", [{"spec": model_cfg.stem_spec, "strides": list(model_cfg.strides),
                                "kernels": list(model_cfg.kernels) if model_cfg.kernels else None}])
    norm_stems = []
    for entry in stems:
        if isinstance(entry, str):
            entry = {"spec": entry, "strides": list(model_cfg.strides)}
        for key in entry:
            if key not in _STEM_KEYS:
                raise ConfigError(f"unknown stem entry key {key!r}; allowed: {sorted(_STEM_KEYS)}")
        # validates grammar, stride count and stride product at parse time
        from .stems import parse_stem_spec

        parse_stem_spec(entry["spec"], entry["strides"], entry.get("kernels"), model_cfg.patch_size)
        norm_stems.append(entry)
    seeds = raw.get("seeds", [train_cfg.seed])
    if not seeds:
        raise ConfigError("seeds list must be non-empty")
    axes = {
        "stem": norm_stems,
        "lr": sweep.get("lr", [train_cfg.lr]),
        "optimizer": sweep.get("optimizer", [train_cfg.optimizer]),
        "warmup": sweep.get("warmup", [train_cfg.warmup_epochs]),
        "ffn_variant": sweep.get("ffn_variant", [model_cfg.ffn_variant]),
    }
    return {
        "name": name,
        "model": model_cfg,
        "train": train_cfg,
        "axes": axes,
        "seeds": seeds,
        "out": raw.get("out", "runs/" + name),
    }


def plan_rows(config):
    rows = []
    axes = config["axes"]
    for stem in axes["stem"]:
        for lr in axes["lr"]:
            for opt in axes["optimizer"]:
                for warmup in axes["warmup"]:
                    for variant in axes["ffn_variant"]:
                        for seed in config["seeds"]:
                            rows.append({
                                "stem": stem["spec"],
                                "strides": stem["strides"],
                                "kernels": stem.get("kernels"),
                                "lr": stem.get("lr", lr),
                                "optimizer": opt,
                                "warmup": stem.get("warmup", warmup),
                                "ffn_variant": variant,
                                "seed": seed,
                            })
    return rows


def _row_tag(row):
    stride_tag = "x".join(str(s) for s in row["strides"])
    return (f"{row['stem'].replace('+', '_')}-s{stride_tag}-lr{row['lr']:g}-"
            f"{row['optimizer']}-wm{row['warmup']}-{row['ffn_variant']}-seed{row['seed']}")


def _run_row(args):
    row, model_cfg_dict, train_cfg_dict, out_dir = args
    model_cfg = ModelConfig.from_dict(model_cfg_dict)
    train_cfg = TrainConfig.from_dict(train_cfg_dict)
    model_cfg.stem_spec = row["stem"]
    model_cfg.strides = tuple(row["strides"])
    model_cfg.kernels = tuple(row["kernels"]) if row["kernels"] else None
    model_cfg.ffn_variant = row["ffn_variant"]
    train_cfg.lr = row["lr"]
    train_cfg.optimizer = row["optimizer"]
    train_cfg.warmup_epochs = row["warmup"]
    train_cfg.seed = row["seed"]
    tag = _row_tag(row)
    try:
        report = run_training(model_cfg, train_cfg)
        payload = report.to_dict()
        payload["row"] = row
        path = os.path.join(out_dir, tag + ".json")
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
        return {"row": row, "tag": tag, "diverged": report.diverged,
                "final_top1": report.final_top1, "error": None,
                "checkpoints": {str(e["epoch"]): e["val_accuracy"] for e in report.epochs}}
    except Exception as exc:  # record, never abort the grid
        return {"row": row, "tag": tag, "diverged": None, "final_top1": None,
                "error": f"{type(exc).__name__}: {exc}", "checkpoints": {}}


TABLE_FIELDS = ["stem", "strides", "lr", "optimizer", "warmup", "ffn_variant", "seed", "top1"]


def write_sweep_table(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_FIELDS)
        for r in results:
            row = r["row"]
            if r["error"]:
                cell = "error"
            elif r["diverged"]:
                cell = "crash"
            else:
                cell = f"{r['final_top1']:.4f}" if r["final_top1"] is not None else ""
            w.writerow([row["stem"], "x".join(map(str, row["strides"])), row["lr"],
                        row["optimizer"], row["warmup"], row["ffn_variant"], row["seed"], cell])


def cmd_sweep(config, jobs=1):
    out_dir = config["out"]
    os.makedirs(out_dir, exist_ok=True)
    rows = plan_rows(config)
    tasks = [(row, config["model"].to_dict(), config["train"].to_dict(), out_dir) for row in rows]
    if jobs > 1:
        with mp.get_context("spawn").Pool(jobs) as pool:
            results = pool.map(_run_row, tasks)
    else:
        results = [_run_row(t) for t in tasks]
    write_sweep_table(results, os.path.join(out_dir, "summary.csv"))
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump({"name": config["name"], "rows": results}, fh, indent=1, sort_keys=True)
    return results


# -- SVG -----------------------------------------------------------------------


def svg_line_chart(series, path, width=640, height=400, x_label="layer", y_label="cos sim"):
    """Minimal dependency-free SVG line chart; one polyline per series."""
    pad = 50
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all + [0.0]), max(ys_all + [1.0])
    span_x = (x_hi - x_lo) or 1.0
    span_y = (y_hi - y_lo) or 1.0

    def px(x):
        return pad + (x - x_lo) / span_x * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y_lo) / span_y * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 10}" font-size="12">{x_label}</text>',
        f'<text x="12" y="{height // 2}" font-size="12" transform="rotate(-90 12 {height // 2})">{y_label}</text>',
    ]
    for i, (label, xs, ys) in enumerate(series):
        color = colors[i % len(colors)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 200}" y="{pad + 16 * i}" font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def cmd_profile(checkpoints, dataset, out_prefix, batch=16, seed=0, exclude_cls=True):
    data = load_dataset(dataset, seed)
    images = data.val_images[:batch]
    series = []
    profiles = []
    for ckpt in checkpoints:
        model = load_checkpoint(ckpt)
        model.set_training(False)
        with Tape():
            _, trace = model(Tensor(images), capture=True)
        profile = diag.layer_diversity(trace, exclude_cls, batch_descriptor=dataset)
        label = model.cfg.stem_spec
        series.append((label, list(range(len(profile.entries))), profile.values()))
        profiles.append((ckpt, label, profile))
    svg_line_chart(series, out_prefix + ".svg")
    with open(out_prefix + ".csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint", "stem", "layer_index", "layer", "cos_sim"])
        for ckpt, label, profile in profiles:
            for i, (layer, val) in enumerate(profile.entries):
                w.writerow([ckpt, label, i, layer, f"{val:.6f}"])
    return profiles


def cmd_convergence(report_paths, out=None):
    """Side-by-side accuracy-at-epoch table across >= 2 run reports."""
    if len(report_paths) < 2:
        raise ValueError("convergence needs at least 2 reports")
    runs = []
    for path in report_paths:
        with open(path) as fh:
            d = json.load(fh)
        accs = {int(e["epoch"]): e["val_accuracy"] for e in d["epochs"]}
        label = d.get("row", {}).get("stem", os.path.basename(path))
        runs.append((path, label, accs))
    common = sorted(set.intersection(*(set(a) for _, _, a in runs)))
    if not common:
        raise ValueError("reports share no epoch checkpoints")
    lines = [["epoch"] + [label for _, label, _ in runs]]
    for e in common:
        lines.append([str(e)] + [f"{accs[e]:.4f}" for _, _, accs in runs])
    text = "\n".join(",".join(row) for row in lines) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    return text


# -- verify ----------------------------------------------------------------------


def cmd_verify(which, params):
    """Run a verifier; returns (report dict, ok flag)."""
    if which == "theorem1":
        rng = np.random.default_rng(params.get("seed", 0))
        etas = params.get("etas", [0.1, 0.5, 2.0, 10.0])
        instances = params.get("instances", 100)
        worst = 0.0
        for _ in range(instances):
            alpha = float(rng.uniform(-2, 2))
            beta = float(rng.uniform(0.1, 3) * rng.choice([-1, 1]))
            W = rng.standard_normal((8, 6))
            X = rng.standard_normal((5, 8))
            worst = max(worst, diag.verify_rescaling_invariance(alpha, beta, W, X, etas))
        n_pen = params.get("penalty_instances", 1000)
        fro_ok = True
        worst_residual = 0.0
        for _ in range(n_pen):
            C = 4
            alphas = rng.uniform(-2, 2, C)
            betas = rng.uniform(0.1, 3, C)
            Ws = [rng.standard_normal((6, 9)) for _ in range(C)]
            rep = diag.verify_penalty_bound(alphas, betas, Ws, hw=36)
            fro_ok &= rep.frobenius_ok
            worst_residual = max(worst_residual,
                                 max(abs(c.frobenius_residual) for c in rep.channels))
        ok = worst < 1e-10 and fro_ok and worst_residual < 1e-9
        return {"which": which, "rescaling_max_deviation": worst,
                "frobenius_never_violated": bool(fro_ok),
                "frobenius_equality_residual": worst_residual, "ok": bool(ok)}, ok
    if which == "theorem2":
        dist = params.get("dist", "uniform")
        alpha = params.get("alpha", 0.0)
        beta = params.get("beta", 1.0)
        n, d = params.get("n", 50), params.get("d", 256)
        gamma = params.get("gamma", 0.5)
        trials = params.get("trials", 1000)
        rep = diag.verify_token_bounds(dist, alpha, beta, n, d, gamma, trials,
                                       seed=params.get("seed", 0))
        mom = diag.moment_oracle(dist, alpha, beta, seed=params.get("seed", 0))
        mu_true, var_true = diag.analytic_moments(dist, alpha, beta)
        mom_ok = (abs(mom["mu"] - mu_true) <= 3 * mom["se_mu"]
                  and abs(mom["var"] - var_true) <= 3 * mom["se_var"])
        ok = rep.cos_sim_bound_holds and rep.violation_fraction <= 0.05 and mom_ok
        out = rep.to_dict()
        out.update({"which": which, "moments_mc": mom,
                    "moments_analytic": {"mu": mu_true, "var": var_true},
                    "moments_ok": bool(mom_ok), "ok": bool(ok)})
        return out, ok
    if which == "bounds":
        path = params["matrix"]
        B = np.load(path) if path.endswith(".npy") else np.loadtxt(path, delimiter=",")
        res = diag.cos_sim_bound(B)
        res["which"] = which
        res["ok"] = res["holds"]
        return res, res["holds"]
    raise ValueError(f"unknown verifier {which!r} (theorem1 | theorem2 | bounds)")


# -- entry point --------------------------------------------------------------------


def main(argv=None):
    ap = argparse.ArgumentParser(prog="stemvit", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="single training run")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("sweep", help="run an ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, default=os.cpu_count())
    p.add_argument("--out")

    p = sub.add_parser("verify", help="numerical theorem verifiers")
    p.add_argument("which", choices=["theorem1", "theorem2", "bounds"])
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dist", default="uniform")
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--d", type=int, default=256)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--matrix", help="csv or .npy matrix for `bounds`")

    p = sub.add_parser("profile", help="token-diversity profile + SVG")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output prefix (.svg/.csv appended)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("convergence", help="accuracy-at-epoch table across reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")

    args = ap.parse_args(argv)

    if args.cmd == "train":
        config = parse_config(args.config)
        if args.seed is not None:
            config["train"].seed = args.seed
        out_dir = args.out or config["out"]
        os.makedirs(out_dir, exist_ok=True)
        report = run_training(config["model"], config["train"], log=print)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        model = getattr(report, "_model", None)
        if model is not None:
            save_checkpoint(os.path.join(out_dir, "checkpoint.npz"), model)
        print(f"diverged={report.diverged} final_top1={report.final_top1}")
        return 0 if not report.diverged else 1

    if args.cmd == "sweep":
        config = parse_config(args.config)
        if args.out:
            config["out"] = args.out
        results = cmd_sweep(config, jobs=args.jobs)
        errs = [r for r in results if r["error"]]
        print(f"{len(results)} rows, {sum(1 for r in results if r['diverged'])} crashed, "
              f"{len(errs)} errored -> {config['out']}/summary.csv")
        return 1 if errs else 0

    if args.cmd == "verify":
        params = {k: v for k, v in vars(args).items()
                  if k not in ("cmd", "which", "out") and v is not None}
        report, ok = cmd_verify(args.which, params)
        text = json.dumps(report, indent=1, sort_keys=True)
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text)
        print(text)
        return 0 if ok else 1

    if args.cmd == "profile":
        cmd_profile(args.checkpoints, args.dataset, args.out, seed=args.seed)
        print(f"wrote {args.out}.svg and {args.out}.csv")
        return 0

    if args.cmd == "convergence":
        text = cmd_convergence(args.reports, args.out)
        print(text, end="")
        return 0


if __name__ == "__main__":
    sys.exit(main())
