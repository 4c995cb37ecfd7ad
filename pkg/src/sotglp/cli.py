"""Command-line interface: ``sotglp <command> --config run.json [overrides]``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from . import plots
from .config import RunConfig
from .encoders import save_encoders
from .errors import ConfigError, FormatError, SizeError, SotGlpError
from .jsonio import read_json, write_json
from .model import build_encoders, featurize, forward
from .selftest import run_selftest
from .synthdata import load_episode, load_ood_pool, save_episode, save_ood_pool
from .train import CURVE_FIELDS, save_checkpoint

log = logging.getLogger("sotglp")

# flag spellings that differ from the field name
ALIASES = {"lam": ["--lambda"], "top_k": ["--top-k", "--k"]}
OOD_KINDS = ("background", "foreign")


# ----------------------------------------------------------------------------
# config resolution


def _add_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides (any RunConfig field)")
    for f in dataclasses.fields(RunConfig):
        flags = ALIASES.get(f.name, []) + [f"--{f.name.replace('_', '-')}"]
        kw = {"dest": f.name, "default": argparse.SUPPRESS}
        if f.type in ("bool", bool) and f.name.startswith("no_"):
            # BooleanOptionalAction would read "--no-vv" as the negation of "--vv"
            kw.update(action="store_const", const=True)
        elif f.type in ("bool", bool):
            kw["action"] = argparse.BooleanOptionalAction
        elif f.name == "seeds":
            kw.update(nargs="+", type=int, metavar="SEED")
        else:
            kw["type"] = {"int": int, "float": float, "str": str}.get(str(f.type), str)
        g.add_argument(*dict.fromkeys(flags), **kw)


def resolve_config(args) -> RunConfig:
    base = {}
    if args.config:
        base = read_json(args.config)
        base.pop("kind", None)
        base.pop("format_version", None)
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig) if hasattr(args, f.name)}
    return RunConfig.from_dict({**base, **overrides})


def explicit_overrides(args) -> dict:
    return {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig) if hasattr(args, f.name)}


def write_config(cfg: RunConfig, out: Path) -> None:
    write_json({"kind": "run_config", **cfg.to_dict()}, out / "config.json")


def out_dir(args, cfg: RunConfig) -> Path:
    path = Path(args.out) if args.out else Path(cfg.out_dir) / args.command
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_data(args, cfg: RunConfig):
    """Episode (and OOD pools) from ``--data``, or generated from the config."""
    if args.data:
        data = Path(args.data)
        ep = load_episode(data / "episode.json")
        pools = {k: load_ood_pool(data / f"ood_{k}.json") for k in OOD_KINDS if (data / f"ood_{k}.json").exists()}
        return ex.config_for_episode(cfg, ep), ep, pools
    ep = ex.episode_from_config(cfg)
    return cfg, ep, ex.ood_pools_from_config(cfg, ep)


def checkpoint_paths(path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        found = sorted(path.glob("seed_*/checkpoint.json"), key=lambda p: int(p.parent.name.split("_")[1]))
        if not found:
            raise FormatError(f"{path}: no seed_*/checkpoint.json files")
        return found
    if not path.exists():
        raise FormatError(f"{path}: no such checkpoint")
    return [path]


def write_csv(rows: list[dict], path: Path) -> None:
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _fmt(x) -> str:
    return f"{x:.4f}" if isinstance(x, float) else str(x)


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = out_dir(args, cfg)
    ep = ex.episode_from_config(cfg)
    save_episode(ep, out / "episode.json")
    for kind, pool in ex.ood_pools_from_config(cfg, ep).items():
        save_ood_pool(pool, out / f"ood_{kind}.json")
    write_config(cfg, out)
    print(f"episode: {ep.num_classes} classes, {len(ep.train_y)} train / {len(ep.test_y)} test images -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg, ep, _ = load_data(args, resolve_config(args))
    out = out_dir(args, cfg)
    write_config(cfg, out)
    save_encoders(build_encoders(cfg, ep), out / "encoders.json")
    results = ex.train_seeds(cfg, ep, out_dir=out)
    rows = []
    for seed, res in results.items():
        save_checkpoint(res.model, cfg.epochs, seed, out / f"seed_{seed}" / "checkpoint.json")
        rows.extend({"seed": seed, **{k: r[k] for k in CURVE_FIELDS}} for r in res.curve)
        acc = ex.branch_accuracy(forward(res.model, featurize(res.model.encoders, ep.test_x)), ep.test_y)
        last = res.curve[-1]["L_total"] if res.curve else float("nan")
        print(f"seed {seed}: final loss {last:.4f}  test fused {acc.fused:.4f} global {acc.global_only:.4f} local {acc.local_only:.4f}")
    write_csv(rows, out / "loss_curve.csv")
    if rows:
        plots.loss_curve({s: r.curve for s, r in results.items()}, out / "loss_curve.png")
    return 0


def cmd_eval(args) -> int:
    cfg, ep, _ = load_data(args, resolve_config(args))
    out = out_dir(args, cfg)
    over = explicit_overrides(args)
    rows = []
    for path in checkpoint_paths(args.checkpoint):
        model, seed = ex.model_from_checkpoint(path, ep, over)
        report, _ = ex.evaluate(model, ep)
        (out / f"metrics_seed_{seed}.json").write_text(report.to_json())
        rows.append({"seed": seed, **report.csv_row()})
        print(f"seed {seed}: fused {report.top1:.4f} global {report.extra['top1_global']:.4f} "
              f"local {report.extra['top1_local']:.4f} overlap {_fmt(report.prompt_overlap)}")
    write_csv(rows, out / "metrics.csv")
    return 0


def cmd_ood(args) -> int:
    cfg, ep, pools = load_data(args, resolve_config(args))
    if not pools:
        raise FormatError("no OOD pools found next to the episode")
    out = out_dir(args, cfg)
    over = explicit_overrides(args)
    rows, raw_all = [], {}
    for path in checkpoint_paths(args.checkpoint):
        model, seed = ex.model_from_checkpoint(path, ep, over)
        variants = [("no_proj" if model.cfg.no_proj else "full", model)]
        if not model.cfg.no_proj and not args.skip_no_proj:
            ab_cfg = model.cfg.replace(no_proj=True)
            trained = ex.train_seeds(ab_cfg, ep, seeds=[seed])[seed].model
            variants.append(("no_proj", trained))
        for name, m in variants:
            report, _ = ex.evaluate(m, ep)
            vrows, raw = ex.ood_rows(m, ep, pools, name, seed)
            rows.extend(vrows)
            main = next((r for r in vrows if r["pool"] == "background" and r["score"] == "glmcm"), vrows[0])
            report = dataclasses.replace(report, auroc=main["auroc"], fpr95=main["fpr95"])
            (out / f"ood_{name}_seed_{seed}.json").write_text(report.to_json())
            if name == variants[0][0]:
                raw_all.setdefault(seed, raw)
    for r in rows:
        print(f"{r['variant']:8s} seed {r['seed']} {r['pool']:10s} {r['score']:6s} auroc {r['auroc']:.4f} fpr95 {r['fpr95']:.4f}")
    write_csv(rows, out / "ood.csv")
    first = raw_all[min(raw_all)]
    plots.ood_histogram({k.replace("/", " "): v for k, v in first.items()}, out / "ood_scores.png")
    return 0


def cmd_sweep(args) -> int:
    cfg, ep, _ = load_data(args, resolve_config(args))
    out = out_dir(args, cfg)
    write_config(cfg, out)
    grid = args.grid or ([0.125, 0.25, 0.5, 1.0] if args.axis == "lambda" else [1, 5, 10, 20, 100])
    parallel = args.parallel or cfg.sweep_parallel
    rows = ex.run_sweep(cfg, ep, args.axis, grid, parallel=parallel, workers=args.workers)
    if parallel:
        for v in grid:
            write_csv([r for r in rows if r["value"] == float(v)], out / f"sweep_{args.axis}_{v:g}.csv")
    write_csv(rows, out / f"sweep_{args.axis}.csv")
    plots.sweep(rows, args.axis, out / f"sweep_{args.axis}.png")
    for v, acc in ex.summarize_sweep(rows).items():
        print(f"{args.axis}={v:g}: mean fused {acc:.4f}")
    return 0


def write_pgm(values: np.ndarray, path: Path) -> None:
    """Plain (ASCII) PGM, values rescaled to 0..255."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    pix = np.rint(255 * scaled).astype(int)
    lines = ["P2", f"{v.shape[1]} {v.shape[0]}", "255"] + [" ".join(map(str, row)) for row in pix]
    path.write_text("\n".join(lines) + "\n")


def cmd_dump_plan(args) -> int:
    cfg, ep, _ = load_data(args, resolve_config(args))
    out = out_dir(args, cfg)
    path = checkpoint_paths(args.checkpoint)[0]
    model, seed = ex.model_from_checkpoint(path, ep, explicit_overrides(args))
    images, labels, masks = (ep.test_x, ep.test_y, ep.test_mask) if args.split == "test" else (ep.train_x, ep.train_y, ep.train_mask)
    i = args.image_id
    if not 0 <= i < len(labels):
        raise SizeError(f"image id {i} outside [0, {len(labels)})")
    c = int(labels[i]) if args.class_id is None else args.class_id
    if not 0 <= c < ep.num_classes:
        raise SizeError(f"class id {c} outside [0, {ep.num_classes})")
    o = forward(model, featurize(model.encoders, images[i : i + 1]))
    plan = o.local.plan.plan.value[0, c]
    idx = o.local.indices[0, c]
    sal = o.local.saliency[0, c]
    # per prompt, the support patches carrying the most mass (ties to the smaller index)
    order = np.argsort(-plan, axis=0, kind="stable")[:3]
    top3 = [[int(idx[r]) for r in order[:, j]] for j in range(plan.shape[1])]
    record = {
        "kind": "plan_dump",
        "checkpoint": str(path),
        "seed": seed,
        "split": args.split,
        "image_id": i,
        "class_id": c,
        "label": int(labels[i]),
        "k": int(len(idx)),
        "support": idx.tolist(),
        "plan": plan.tolist(),
        "phi": float(o.local.phi.value[0, c]),
        "iterations_used": int(o.local.plan.iterations_used[0, c]),
        "final_violation": float(o.local.plan.final_violation[0, c]),
        "saliency": sal.tolist(),
        "per_prompt_top3": top3,
        "planted": np.flatnonzero(masks[i]).tolist(),
    }
    stem = f"plan_{args.split}{i}_class{c}"
    write_json(record, out / f"{stem}.json")
    side = ep.grid_side
    shape = (side, side) if side else (1, ep.num_patches)
    # combined-prompt map: saliency on the selected support, floor elsewhere
    support_map = np.full(ep.num_patches, sal[idx].min())
    support_map[idx] = sal[idx]
    write_pgm(support_map.reshape(shape), out / f"{stem}.pgm")
    if side:
        marks = {f"prompt {j} top-3": t for j, t in enumerate(top3)}
        marks["planted"] = record["planted"]
        plots.saliency_heatmap(support_map, side, marks, out / f"{stem}.png")
    print(f"image {i} (label {record['label']}) class {c}: support {record['support']}")
    for j, t in enumerate(top3):
        print(f"  prompt {j}: top-3 patches {t}")
    print(f"  planted patches {record['planted']}")
    return 0


def cmd_selftest(args) -> int:
    resolve_config(args)  # a bad config is reported before any check runs
    report = run_selftest(quick=args.quick)
    for c in report["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['value']:.3g} (threshold {c['threshold']:.3g}) {c['detail']}".rstrip())
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "selftest.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return 0 if report["passed"] else 1


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sotglp", description="Prompt learning with sparse OT over planted-part toy data.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_, data=True, ckpt=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run config; flags override its fields")
        p.add_argument("--out", help="output directory (default <out_dir>/<command>)")
        if data:
            p.add_argument("--data", help="directory written by gen-data (default: generate from config)")
        if ckpt:
            p.add_argument("--checkpoint", required=True, help="checkpoint file or a train output directory")
        _add_overrides(p)
        p.set_defaults(func=func)
        return p

    command("gen-data", cmd_gen_data, "write an episode and OOD pools", data=False)
    command("train", cmd_train, "train every seed, write checkpoints and loss curves")
    command("eval", cmd_eval, "fused / global / local accuracy of checkpoints", ckpt=True)
    p = command("ood", cmd_ood, "MCM and GL-MCM AUROC / FPR95", ckpt=True)
    p.add_argument("--skip-no-proj", action="store_true", help="do not train the no-projection comparison")
    p = command("sweep", cmd_sweep, "lambda or K sensitivity sweep")
    p.add_argument("--axis", choices=("lambda", "k"), required=True)
    p.add_argument("--grid", nargs="+", type=float, help="grid values (defaults per axis)")
    p.add_argument("--parallel", action="store_true", help="run grid points in worker processes")
    p.add_argument("--workers", type=int, default=None)
    p = command("dump-plan", cmd_dump_plan, "transport plan and saliency of one image", ckpt=True)
    p.add_argument("--image-id", type=int, required=True)
    p.add_argument("--class-id", type=int, default=None, help="default: the image's label")
    p.add_argument("--split", choices=("test", "train"), default="test")
    p = command("selftest", cmd_selftest, "solver oracle, gradient and config checks", data=False)
    p.add_argument("--quick", action="store_true", help="3 gradient seeds instead of 10")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, SizeError, OSError) as exc:
        print(f"sotglp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except SotGlpError as exc:
        print(f"sotglp {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
