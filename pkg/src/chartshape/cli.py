"""Command-line entry point: ``chartshape gen|filter|train|eval|sweep|ablate``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import load_config
from .policy import MLPPolicy
from .shaping import TrainConfig
from .trainer import (
    MODES,
    encode_items,
    evaluate,
    load_checkpoint,
    run_curriculum,
    sweep_coefficients,
    sweep_csv,
)
from .viewgen import GenConfig, Manifest, build_dataset, difficulty_filter, derive_seed, load_manifest, write_manifest


def _grid(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_gen(args) -> int:
    cfg = GenConfig.from_file(args.config) if args.config else GenConfig()
    if args.target is not None:
        cfg = replace(cfg, target=args.target)
    if args.prefix is not None:
        cfg = replace(cfg, id_prefix=args.prefix)
    manifest = build_dataset(cfg, args.seed)
    path = write_manifest(manifest, args.out)
    print(f"wrote {len(manifest.records)} records to {path}")
    print(json.dumps(manifest.counters))
    return 0


def cmd_filter(args) -> int:
    ck = load_checkpoint(args.policy)
    policy = MLPPolicy(ck.params)
    manifest = load_manifest(args.data, views=("image", "pres", "abl"))
    kept = []
    for item in manifest.records:
        verdict = difficulty_filter(item, policy, args.k, args.temperature, derive_seed(item.seed, 2))
        if verdict.keep:
            item.difficulty = verdict.passes
            kept.append(item)
    counters = dict(manifest.counters, refiltered=len(kept))
    path = write_manifest(Manifest(kept, counters), args.out)
    print(f"kept {len(kept)} of {len(manifest.records)} -> {path}")
    return 0


def _train_cfg(args) -> TrainConfig:
    return load_config(TrainConfig, args.config) if args.config else TrainConfig()


def _datasets(args, random_mask: bool = False):
    views = ("image",) if random_mask else ("image", "pres", "abl")
    train = load_manifest(args.data, views=views).records
    heldout = load_manifest(args.heldout).records
    return train, heldout


def cmd_train(args) -> int:
    cfg = _train_cfg(args)
    train, heldout = _datasets(args, random_mask=args.mode == "random_mask")
    result = run_curriculum(cfg, args.mode, train, heldout, args.seed, out_dir=args.out)
    for tag, rep in result.stage_reports:
        print(f"{tag}: accuracy={rep.accuracy:.3f} kl_abl={rep.kl_abl:.4f} shortcut={rep.shortcut:.3f}")
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    data = encode_items(load_manifest(args.data).records)
    report = evaluate(ck.params, data)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_sweep(args) -> int:
    cfg = _train_cfg(args)
    train, heldout = _datasets(args)
    results = sweep_coefficients(cfg, args.coef, _grid(args.grid), train, heldout, args.seed)
    text = sweep_csv(args.coef, results)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    cfg = _train_cfg(args)
    train, heldout = _datasets(args)
    modes = MODES if args.all else tuple(args.modes.split(","))
    out = Path(args.out)
    summary = {}
    for mode in modes:
        result = run_curriculum(cfg, mode, train, heldout, args.seed, out_dir=out / mode)
        summary[mode] = {tag: rep.accuracy for tag, rep in result.stage_reports}
        summary[mode]["kl_abl"] = result.final.kl_abl
        summary[mode]["shortcut"] = result.final.shortcut
        print(f"{mode:12s} accuracy={result.final.accuracy:.3f} kl_abl={result.final.kl_abl:.4f}")
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chartshape")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset manifest")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target", type=int)
    p.add_argument("--prefix", help="record id prefix (keep train and held-out sets distinct)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("filter", help="re-run difficulty filtering with a trained policy")
    p.add_argument("--policy", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--temperature", type=float, default=0.85)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_filter)

    def train_args(p):
        p.add_argument("--config")
        p.add_argument("--data", required=True, help="training manifest.jsonl")
        p.add_argument("--heldout", required=True, help="held-out manifest.jsonl")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="run one curriculum mode")
    train_args(p)
    p.add_argument("--mode", choices=MODES, default="bips")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="vary alpha or beta with the other fixed to 0")
    train_args(p)
    p.add_argument("--coef", choices=("alpha", "beta"), required=True)
    p.add_argument("--grid", default="0,0.005,0.01,0.02,0.08")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("ablate", help="run several modes on the same data and seed")
    train_args(p)
    p.add_argument("--all", action="store_true")
    p.add_argument("--modes", default="bips,grpo_only")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
