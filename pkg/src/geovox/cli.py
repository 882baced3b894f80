"""Command-line entry point: ``geovox <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig


def _config(args) -> TrainConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    for item in args.set or []:
        key, _, value = item.partition("=")
        parsed = TrainConfig.from_text(f"{key.strip()} = {value.strip()}")
        overrides[key.strip()] = getattr(parsed, key.strip())
    if args.config:
        return TrainConfig.load(args.config, **overrides)
    return TrainConfig(**overrides)


def _out(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _held_out(cfg, args):
    from .harness import make_scenes
    from .scenes import load_bundle

    if getattr(args, "scenes", None):
        return [load_bundle(p) for p in args.scenes]
    return make_scenes(cfg, "eval")


def cmd_gen_scenes(args) -> int:
    from .harness import scene_seeds, rig_for
    from .scenes import make_bundle, save_bundle

    cfg = _config(args)
    out = _out(args)
    train, held = scene_seeds(cfg)
    for split, seeds in (("train", train), ("eval", held)):
        for i, s in enumerate(seeds):
            b = make_bundle(s, rig=rig_for(cfg), grid_shape=cfg.grid_shape, shading=cfg.shading)
            save_bundle(b, out / split / f"scene_{i:03d}")
    print(f"wrote {len(train)} training and {len(held)} held-out scenes to {out}")
    return 0


def cmd_train(args) -> int:
    from .harness import evaluate_all, make_scenes, save_checkpoint, train, write_metrics_csv

    cfg = _config(args)
    out = _out(args)
    cfg.save(out / "config.txt")
    losses = open(out / "losses.csv", "w")
    losses.write("iteration,L_cls,L_cntr,L_loc,L_c,L_d,total,kept_rays\n")

    def log_loss(state, r):
        losses.write(f"{state.iteration},{r.L_cls!r},{r.L_cntr!r},{r.L_loc!r},{r.L_c!r},{r.L_d!r},"
                     f"{r.total!r},{r.kept_rays}\n")

    state = train(cfg, callback=log_loss)
    losses.close()
    metrics = {} if args.no_eval else evaluate_all(state.model, make_scenes(cfg, "eval"), cfg)
    save_checkpoint(state, cfg, out / "checkpoint", metrics)
    if metrics:
        write_metrics_csv(metrics, out / "metrics.csv")
        print(json.dumps(metrics, indent=1))
    return 0


def cmd_eval_nvs(args) -> int:
    from .harness import evaluate_nvs, load_checkpoint, write_metrics_csv

    state = load_checkpoint(args.checkpoint)
    cfg = state.model.config
    m = evaluate_nvs(state.model, _held_out(cfg, args), cfg)
    write_metrics_csv(m, _out(args) / "nvs.csv")
    print(json.dumps(m, indent=1))
    return 0


def cmd_eval_det(args) -> int:
    from .harness import evaluate_detection, write_metrics_csv

    from .harness import load_checkpoint
    state = load_checkpoint(args.checkpoint)
    cfg = state.model.config
    m = evaluate_detection(state.model, _held_out(cfg, args), cfg)
    write_metrics_csv(m, _out(args) / "det.csv")
    print(json.dumps(m, indent=1))
    return 0


def cmd_render(args) -> int:
    from PIL import Image

    from .harness import load_checkpoint, opacity_field, render_view
    from .model import build_cache

    state = load_checkpoint(args.checkpoint)
    cfg = state.model.config
    out = _out(args)
    for si, scene in enumerate(_held_out(cfg, args)[:args.n_scenes]):
        cache = build_cache(scene, cfg.n_novel_views)
        fmaps = state.model.encode(cache)
        for vi in range(min(args.n_views, len(scene.novel_views))):
            img, depth = render_view(state.model, cache, fmaps, vi, cfg)
            rgb8 = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(rgb8).save(out / f"scene{si:02d}_view{vi:02d}.png")
            np.asarray(depth, "<f4").tofile(out / f"scene{si:02d}_view{vi:02d}_depth.f32")
        w, _ = opacity_field(state.model, cache)
        if w is not None:
            # same x-fastest layout as the occupancy grid of the scene format
            np.ascontiguousarray(w.transpose(2, 1, 0), "<f4").tofile(out / f"scene{si:02d}_opacity.f32")
    print(f"wrote renders to {out}")
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck_suite import run_suite

    reports = run_suite()
    ok = True
    for name, rep in reports.items():
        lines = list(rep.lines())
        print(f"[{name}] {lines[0]}")
        for line in lines[1:]:
            print(line)
        ok &= rep.passed
    print("grad-check:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    from .harness import SUITES, run_ablation

    cfg = _config(args)
    out = _out(args)
    suites = list(SUITES) if args.suite == "all" else [args.suite]
    for suite in suites:
        name = suite.replace("/", "_")
        rows = run_ablation(suite, cfg, args.seeds, out / f"ablation_{name}.csv", out / "runs")
        for r in rows:
            print(suite, r["variant"], {k: round(v, 4) for k, v in r.items() if isinstance(v, float)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--deterministic", action="store_true",
                        help="deterministic kernels, single thread")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config entry (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="geovox", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-scenes", parents=[common], help="write synthetic scene bundles").set_defaults(fn=cmd_gen_scenes)
    t = sub.add_parser("train", parents=[common], help="joint training run")
    t.add_argument("--no-eval", action="store_true")
    t.set_defaults(fn=cmd_train)
    for name, fn, hlp in (("eval-nvs", cmd_eval_nvs, "novel-view PSNR/SSIM/RMSE"),
                          ("eval-det", cmd_eval_det, "detection mAP@.25/.50"),
                          ("render", cmd_render, "render novel views and opacity grids")):
        e = sub.add_parser(name, parents=[common], help=hlp)
        e.add_argument("checkpoint", help="checkpoint directory")
        e.add_argument("--scenes", nargs="*", help="scene bundle directories (default: held-out split)")
        if name == "render":
            e.add_argument("--n-scenes", type=int, default=1)
            e.add_argument("--n-views", type=int, default=3)
        e.set_defaults(fn=fn)
    sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite").set_defaults(fn=cmd_grad_check)
    a = sub.add_parser("ablate", parents=[common], help="run an ablation suite")
    a.add_argument("suite", help="suite name or 'all'")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
