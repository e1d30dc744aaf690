"""Command-line entry points: gen | train | infer | eval | render."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import load_arrays
from .cloudio import load_cloud
from .config import PipelineConfig
from .pipeline import (
    build_net2d,
    format_eval_table,
    generate_dataset,
    run_eval,
    run_infer,
    train_stage_2d,
    train_stage_3d,
)
from .net2d import embed_view
from .pipeline import prepare_full_view
from .render import render_view


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _add_common(parser):
    parser.add_argument("--config", type=Path, default=None, help="key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bevis", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset with manifest")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-scenes", type=int, default=None)

    p = sub.add_parser("train", help="train one stage")
    _add_common(p)
    p.add_argument("--stage", choices=("2d", "3d"), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ckpt2d", type=Path, default=None, help="2d checkpoint (stage 3d)")
    p.add_argument("--resume", type=Path, default=None)

    p = sub.add_parser("infer", help="run the full pipeline on a dataset split")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ckpt2d", type=Path, required=True)
    p.add_argument("--ckpt3d", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--render", action="store_true")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    _add_common(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("render", help="emit PPM renders for one scene file")
    _add_common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ckpt2d", type=Path, default=None, help="adds the PCA embedding render")

    args = parser.parse_args(argv)
    cfg = _load_config(args)

    if args.command == "gen":
        if args.n_scenes is not None:
            cfg.n_scenes = args.n_scenes
        manifest = generate_dataset(cfg, args.out)
        print(f"wrote {cfg.n_scenes} scenes and {manifest}")
        return 0

    if args.command == "train":
        if args.stage == "2d":
            result = train_stage_2d(cfg, args.data, args.out, resume_from=args.resume)
        else:
            ckpt2d = args.ckpt2d or args.out / "ckpt_2d.bevis"
            result = train_stage_3d(cfg, args.data, args.out, ckpt2d, resume_from=args.resume)
        print(f"stage {args.stage}: {result.steps_run} steps, checkpoint {result.checkpoint}")
        return 0

    if args.command == "infer":
        written = run_infer(
            cfg, args.data, args.out, args.ckpt2d, args.ckpt3d,
            split=args.split, render=args.render,
        )
        print(f"wrote {len(written)} prediction files to {args.out}")
        return 0

    if args.command == "eval":
        result = run_eval(cfg, args.pred, args.gt, args.out, split=args.split)
        print(format_eval_table(result))
        print(f"metrics written to {result.csv_path}")
        return result.exit_code

    if args.command == "render":
        cloud = load_cloud(args.scene)
        view, _ = prepare_full_view(cloud, cfg)
        embeddings = None
        if args.ckpt2d is not None:
            net2d = build_net2d(cfg)
            net2d.load_arrays(load_arrays(args.ckpt2d))
            embeddings, _ = embed_view(net2d, view)
        written = render_view(view, embeddings, args.out, args.scene.stem)
        print("\n".join(str(w) for w in written))
        return 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
