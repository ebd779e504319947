"""Command-line entry point: gen-data, train, eval, ablate, inspect.

Exit codes: 0 ok, 2 config error, 3 IO error, 4 numeric failure. Every
artifact directory receives exactly one manifest.json tying the resolved
config, the seed and the input hashes together.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .configio import Config, ConfigError, config_to_dict, content_hash, load_config, serialize_config
from .diffcore import use_dtype
from .diffcore.dstn import DstnError
from .model import DualStreamModel
from .runner import assemble_report, run_inference
from .statstream import BevSpec
from .synthworld.dataset import Dataset, DatasetError, generate_and_write
from .synthworld.scene import WorldConfig, SceneConfigError
from .trainkit import (
    NumericError,
    OptimizerState,
    model_from_checkpoint,
    save_checkpoint,
    streaming_train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def effective_workers(cfg: Config) -> int:
    cap = os.environ.get("DUALSTREAM_THREADS")
    if cap is None:
        return max(1, cfg.threads)
    try:
        return max(1, min(cfg.threads, int(cap)))
    except ValueError:
        raise ConfigError(f"DUALSTREAM_THREADS must be an integer, got {cap!r}") from None


def world_from_config(cfg: Config) -> WorldConfig:
    return WorldConfig(
        duration=cfg.scene_frames, dt=cfg.scene_dt,
        agents_min=cfg.agents_min, agents_max=cfg.agents_max,
        speed_min=cfg.agent_speed_min, speed_max=cfg.agent_speed_max,
        fast_fraction=cfg.fast_fraction, fast_speed_min=cfg.fast_speed_min,
        fast_speed_max=cfg.fast_speed_max, pedestrian_fraction=cfg.pedestrian_fraction,
        ego_speed=cfg.ego_speed,
    )


def bev_from_config(cfg: Config) -> BevSpec:
    e = cfg.bev_extent
    return BevSpec(dims=(cfg.bev_cells, cfg.bev_cells), extent=(-e, e, -e, e))


def write_manifest(out_dir: Path, command: str, cfg: Config, seed: int,
                   config_path: str = "", data_hash: str = "") -> None:
    manifest = {
        "command": command,
        "config_path": config_path,
        "config": config_to_dict(cfg),
        "seed": seed,
        "out_dir": str(out_dir),
        "inputs_hash": content_hash(
            serialize_config(cfg).encode(), data_hash.encode(), __version__.encode()
        ),
        "code_version": __version__,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )


def dataset_hash(data_dir: Path) -> str:
    index = data_dir / "index.json"
    if not index.exists():
        raise DatasetError(f"{index}: missing dataset index")
    return content_hash(index.read_bytes())


def parse_seeds(spec: str) -> list[int]:
    if ".." in spec:
        lo, hi = spec.split("..", 1)
        seeds = list(range(int(lo), int(hi) + 1))
    else:
        seeds = [int(spec)]
    if not seeds:
        raise ConfigError(f"empty seed range {spec!r}")
    return seeds


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DatasetError(f"{out}: output directory not empty (use --force)")
    seeds = parse_seeds(args.seeds) if args.seeds else [cfg.seed]
    generate_and_write(
        seeds, out, world_from_config(cfg), bev_from_config(cfg),
        config_echo=config_to_dict(cfg), ranges=cfg.detection_ranges(),
        schedule_kind=cfg.schedule, image_size=(cfg.image_height, cfg.image_width),
        workers=effective_workers(cfg),
    )
    write_manifest(out, "gen-data", cfg, seeds[0], config_path=str(args.config))
    n_frames = len(seeds) * cfg.scene_frames
    print(f"wrote {len(seeds)} scenes, {n_frames} frames to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    data = Dataset(args.data)
    out = Path(args.out)
    start_epoch = 0
    start_step = 0
    opt = None
    if args.resume:
        model, opt, cfg, start_step = model_from_checkpoint(args.resume)
        if args.config:
            file_cfg = load_config(args.config)
            if config_to_dict(file_cfg) != config_to_dict(cfg):
                raise ConfigError("--config disagrees with the checkpoint's config")
        meta = json.loads((Path(args.resume) / "meta.json").read_text())
        start_epoch = int(meta.get("epoch", 0))
    else:
        if not args.config:
            raise ConfigError("train needs --config (or --resume)")
        cfg = load_config(args.config)
        with use_dtype(cfg.np_dtype()):
            model = DualStreamModel(cfg)
    if args.stop_after_epoch is not None and not (0 < args.stop_after_epoch <= cfg.epochs):
        raise ConfigError("--stop-after-epoch out of range")

    out.mkdir(parents=True, exist_ok=True)

    from dataclasses import replace

    from .trainkit import TrainResult, total_optimizer_steps

    # the cosine schedule always spans the config's full epoch count, so a
    # stopped-and-resumed run retraces the uninterrupted trajectory exactly
    full_steps = total_optimizer_steps(data, replace(cfg, epochs=cfg.epochs))
    one_epoch = replace(cfg, epochs=1)
    result = TrainResult()
    epoch_end = args.stop_after_epoch or cfg.epochs
    opt = opt or OptimizerState.fresh(model.store)
    step = start_step
    for epoch in range(start_epoch, epoch_end):
        res, opt = streaming_train(data, model, one_epoch, opt=opt, start_step=step,
                                   total_steps_override=full_steps)
        step = res.rows[-1].step if res.rows else step
        result.rows.extend(res.rows)
        ck = out / f"ckpt_epoch_{epoch + 1}"
        save_checkpoint(ck, model, opt, cfg, step)
        _stamp_epoch(ck, epoch + 1)
    final = out / "checkpoint"
    save_checkpoint(final, model, opt, cfg, step)
    _stamp_epoch(final, epoch_end)

    (out / "loss.csv").write_text(result.to_csv(), encoding="utf-8")
    write_manifest(out, "train", cfg, cfg.seed,
                   config_path=str(args.config or args.resume), data_hash=dataset_hash(Path(args.data)))
    print(f"trained to step {step} (epoch {epoch_end}/{cfg.epochs}); checkpoint at {final}")
    return EXIT_OK


def _stamp_epoch(ckpt_dir: Path, epoch: int) -> None:
    meta_path = ckpt_dir / "meta.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    meta["epoch"] = epoch
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def cmd_eval(args) -> int:
    model, _, cfg, step = model_from_checkpoint(args.ckpt)
    data = Dataset(args.data)
    if tuple(data.bev_spec.dims) != model.bev_spec.dims:
        raise ConfigError(
            f"dataset BEV {data.bev_spec.dims} does not match checkpoint {model.bev_spec.dims}"
        )
    out = Path(args.out)
    inference = run_inference(data, model, cfg, schedule_override=args.schedule)
    slices = ("all", "high-velocity") if args.slice == "high-velocity" else ("all",)
    run_id = content_hash(str(args.ckpt).encode(), str(args.data).encode(),
                          (args.schedule or "").encode(), (args.slice or "").encode())[:16]
    report = assemble_report(inference, cfg, run_id=run_id, code_version=__version__, slices=slices)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    write_manifest(out, "eval", cfg, cfg.seed, config_path=str(args.ckpt),
                   data_hash=dataset_hash(Path(args.data)))
    m = report.slices["all"]
    print(f"eval step={step} mAP={m.mAP:.4f} NDS={m.NDS:.4f} AMOTA={m.AMOTA:.4f} "
          f"IDS={m.IDS} seg_mIoU={report.seg['miou']:.4f}")
    return EXIT_OK


ABLATION_GRID = [
    ("full_temporal", "full", True),
    ("full_static", "full", False),
    ("none_temporal", "none", True),
    ("none_static", "none", False),
    ("bidir_temporal", "bidirectional", True),
    ("bidir_static", "bidirectional", False),
]


def cmd_ablate(args) -> int:
    from dataclasses import replace

    base = load_config(args.config)
    data = Dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_h = dataset_hash(Path(args.data))
    rows = ["variant,interaction,temporal_bev,mAP,NDS,lanes_iou,AMOTA,IDS"]
    for name, interaction, temporal in ABLATION_GRID:
        cfg = replace(base, interaction=interaction, temporal_bev=temporal)
        with use_dtype(cfg.np_dtype()):
            model = DualStreamModel(cfg)
        result, opt = streaming_train(data, model, cfg)
        vdir = out / name
        save_checkpoint(vdir / "checkpoint", model, opt, cfg, result.rows[-1].step if result.rows else 0)
        (vdir / "loss.csv").write_text(result.to_csv(), encoding="utf-8")
        inference = run_inference(data, model, cfg)
        report = assemble_report(inference, cfg, run_id=name, code_version=__version__)
        (vdir / "report.json").write_text(report.to_json(), encoding="utf-8")
        (vdir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
        write_manifest(vdir, "ablate", cfg, cfg.seed, config_path=str(args.config), data_hash=data_h)
        m = report.slices["all"]
        rows.append(f"{name},{interaction},{temporal},{m.mAP!r},{m.NDS!r},"
                    f"{report.seg['lanes']!r},{m.AMOTA!r},{m.IDS}")
        print(f"[{name}] mAP={m.mAP:.4f} NDS={m.NDS:.4f} AMOTA={m.AMOTA:.4f} IDS={m.IDS}")
    (out / "ablation.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    write_manifest(out, "ablate", base, base.seed, config_path=str(args.config), data_hash=data_h)
    print(f"wrote {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if (path / "meta.json").exists():
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
        names = meta.get("param_names", [])
        print(f"checkpoint: step={meta.get('step')} epoch={meta.get('epoch', '?')} "
              f"version={meta.get('format_version')}")
        from .diffcore.dstn import read_tensor

        total = 0
        for name in names:
            arr = read_tensor(path / "params" / f"{name.replace('/', '_')}.dstn")
            total += arr.size
        print(f"parameters: {len(names)} tensors, {total} scalars")
        for name in names[:10]:
            print(f"  {name}")
        if len(names) > 10:
            print(f"  ... {len(names) - 10} more")
        return EXIT_OK
    if path.name.endswith(".json") and path.exists():
        print(json.dumps(json.loads(path.read_text(encoding="utf-8")), indent=2, sort_keys=True))
        return EXIT_OK
    if (path / "index.json").exists():
        index = json.loads((path / "index.json").read_text(encoding="utf-8"))
        print(f"dataset: {len(index['scenes'])} scenes, dt={index['dt']}")
        for s in index["scenes"]:
            print(f"  scene {s['id']}: {s['n_frames']} frames (seed {s['seed']})")
        return EXIT_OK
    raise DatasetError(f"{path}: nothing recognizable to inspect")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualstream",
                                     description="dual-stream perception on a synthetic driving world")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate and write a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seeds", default=None, help="A..B inclusive, or a single seed")
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="streaming training")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None)
    t.add_argument("--stop-after-epoch", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--slice", choices=["high-velocity"], default=None)
    e.add_argument("--schedule", choices=["alternating"], default=None)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate the variant grid")
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    i = sub.add_parser("inspect", help="pretty-print a checkpoint, report or dataset")
    i.add_argument("path")
    i.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, SceneConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, DstnError, FileNotFoundError, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
