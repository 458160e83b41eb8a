"""``ovo`` command line: synth, select, train, infer, eval, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Progress goes to stderr (``OVO_LOG=quiet|info|debug``); results go to files
or stdout and never depend on ``--workers``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import LossOptions, LossWeights, OptimizerConfig, TrainingError
from .evaluation import evaluate
from .numerics.tensor import load_tensor, save_tensor
from .parallel import default_workers, pmap
from .pipeline import TrainSettings, infer_scene, train_on_scenes
from .scenes import DatasetOracle, SynthConfig, find_scenes, load_scene, save_scene, synth_scene
from .selection import build_omega, parse_filters
from .vocab import EmbeddingBank, confidence_from_teacher
from .volumes import LabelVolume

log = logging.getLogger("ovo")


class UsageError(Exception):
    """Bad flags or configuration (exit code 2)."""


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in _csv(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _load_bank(path: str | None, scene) -> EmbeddingBank:
    return EmbeddingBank.load(path) if path else scene.bank


# --- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        config = SynthConfig(
            grid_dims=args.grid, image_size=args.image, sigma=args.sigma, seed=args.seed,
            feat_dim=args.feat_dim, embed_dim=args.embed_dim, student_dim=args.student_dim,
            base_names=tuple(_csv(args.base)), novel_names=tuple(_csv(args.novel)),
            temperature=args.temperature, teacher_vocab=args.teacher_vocab,
            corrupt_fraction=args.corrupt_fraction, corrupt_confidence=args.corrupt_confidence,
            objects=args.objects, object_size=args.object_size, voxel_size=args.voxel_size,
        )
        oracle = DatasetOracle(config)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    oracle.bank.save(out / "bank.json")
    _write_json(out / "synth_config.json", config.to_dict())

    def one(index):
        scene = synth_scene(config, args.first + index, oracle, with_features=not args.geometry_only)
        save_scene(scene, out / scene.name, bank_ref="../bank.json")
        log.info("wrote %s", scene.name)
        return scene.name

    try:
        names = pmap(one, list(range(args.scenes)), args.workers)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(json.dumps({"scenes": names, "bank": "bank.json"}, sort_keys=True))
    return 0


def cmd_select(args) -> int:
    try:
        filters = parse_filters(args.filters)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    scene = load_scene(args.scene)
    corr, counts = build_omega(scene.grid, scene.labels, scene.seg, scene.camera, scene.schema, filters,
                               args.occlusion_threshold, args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = {"applied": list(filters), "occlusion_threshold": args.occlusion_threshold}
    corr.save(out / "correspondence.json", cfg)
    _write_json(out / "counts.json", counts)
    print(json.dumps(counts, sort_keys=True))
    return 0


def _train_settings(args) -> TrainSettings:
    try:
        return TrainSettings(
            epochs=args.epochs, seed=args.seed,
            weights=LossWeights(args.lambda1, args.lambda2, args.lambda3),
            optimizer=OptimizerConfig(lr=args.lr, weight_decay=args.weight_decay),
            options=LossOptions(reweight=not args.no_reweight, pix_mean=args.pix_mean),
            filters=parse_filters(args.filters), occlusion_threshold=args.occlusion_threshold,
            hidden3d=tuple(args.hidden3d), fusion_hidden=args.fusion_hidden, use_2d=not args.no_2d,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    if args.lr < 0 or args.weight_decay < 0:
        raise UsageError("--lr and --weight-decay must be >= 0")
    settings = _train_settings(args)
    paths = find_scenes(args.scenes)
    if not paths:
        raise UsageError(f"no scene manifests match {args.scenes!r}")
    bank = EmbeddingBank.load(args.embeddings) if args.embeddings else None
    scenes = [load_scene(p, bank) for p in paths]
    bank = bank or scenes[0].bank
    for s in scenes:
        if s.schema.names != bank.schema.names or s.schema.novel != bank.schema.novel:
            raise UsageError(f"scene {s.name} uses a different category schema")
    if args.temperature is not None:
        if args.temperature <= 0:
            raise UsageError("--temperature must be > 0")
        for s in scenes:
            s.seg = confidence_from_teacher(s.teacher2d.astype(np.float64), bank, args.temperature)

    def progress(row):
        log.info("epoch %d total %.6f", row["epoch"], row["total"])

    result, counts = train_on_scenes(scenes, bank, settings, args.workers, progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.head3d.save(out, "head3d")
    if result.head2d is not None:
        result.head2d.save(out, "head2d")
    (out / "loss.csv").write_text(result.log_csv(), encoding="utf-8")
    _write_json(out / "train_summary.json", {
        "scenes": [s.name for s in scenes],
        "valid_counts": counts,
        "epochs": settings.epochs,
        "initial_total": result.log[0]["total"] if result.log else None,
        "final_total": result.log[-1]["total"] if result.log else None,
    })
    return 0


def cmd_infer(args) -> int:
    from .numerics.head import AlignmentHead

    scene = load_scene(args.scene)
    bank = _load_bank(args.embeddings, scene)
    queries = _csv(args.queries) if args.queries else list(bank.schema.names)
    missing = [q for q in queries if q not in bank.names]
    if missing:
        raise UsageError(f"unknown query names: {missing}")
    heads = Path(args.heads)
    head3d = AlignmentHead.load(heads / "head3d.json" if heads.is_dir() else heads)
    pred = infer_scene(scene, head3d, bank, queries, args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    X, Y, Z = scene.grid.dims
    save_tensor(out / "pred.json", pred.labels.reshape(Z, Y, X))
    _write_json(out / "pred_meta.json", {"scene": scene.name, "queries": queries, "grid": scene.grid.to_dict()})
    return 0


def cmd_eval(args) -> int:
    gt_scene = load_scene(args.gt)
    bank = EmbeddingBank.load(args.schema) if args.schema else gt_scene.bank
    X, Y, Z = gt_scene.grid.dims
    pred = LabelVolume(gt_scene.grid, load_tensor(args.pred, (Z, Y, X), name="pred").reshape(-1))
    report = evaluate(pred, gt_scene.labels, bank.schema, include_empty=args.include_empty)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    sys.stdout.write(report.to_json())
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import check_seed

    ok = True
    rows = []
    for s in range(args.seed, args.seed + args.seeds):
        for loss, rep in check_seed(s, h=args.h, tol=args.tol, corrupt=args.corrupt).items():
            ok &= rep.passed
            rows.append({"seed": s, "loss": loss, "passed": rep.passed,
                         "max_rel_error": float(f"{rep.max_rel_error:.6e}"), "checked": rep.checked})
    payload = {"passed": bool(ok), "tolerance": args.tol, "h": args.h, "results": rows}
    if args.out:
        _write_json(Path(args.out) / "gradcheck.json", payload)
    print(json.dumps({"passed": bool(ok), "configurations": args.seeds,
                      "max_rel_error": max(r["max_rel_error"] for r in rows)}, sort_keys=True))
    return 0 if ok else 1


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ovo", description="Open-vocabulary occupancy distillation pipeline")
    p.add_argument("--version", action="version", version=f"ovo {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_required=False):
        sp.add_argument("--config", help="JSON file of flag defaults (flags on the command line win)")
        sp.add_argument("--workers", type=_positive, default=default_workers())
        sp.add_argument("--seed", type=_u64, required=seed_required, default=None if seed_required else 0)

    sp = sub.add_parser("synth", help="write synthetic scenes")
    common(sp, seed_required=True)
    sp.add_argument("--scenes", type=_positive, default=1)
    sp.add_argument("--first", type=int, default=0, help="index of the first scene")
    sp.add_argument("--out", required=True)
    sp.add_argument("--grid", type=_ints, default=(24, 16, 24))
    sp.add_argument("--image", type=_ints, default=(64, 48), help="width,height")
    sp.add_argument("--voxel-size", type=float, default=0.1)
    sp.add_argument("--sigma", type=float, default=0.05)
    sp.add_argument("--feat-dim", type=int, default=200)
    sp.add_argument("--embed-dim", type=int, default=512)
    sp.add_argument("--student-dim", type=int, default=200)
    sp.add_argument("--base", default=",".join(SynthConfig.base_names))
    sp.add_argument("--novel", default=",".join(SynthConfig.novel_names))
    sp.add_argument("--objects", type=_ints, default=(3, 6))
    sp.add_argument("--object-size", type=_ints, default=(2, 6))
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--teacher-vocab", choices=("all", "base"), default="all")
    sp.add_argument("--corrupt-fraction", type=float, default=0.0)
    sp.add_argument("--corrupt-confidence", type=float, default=0.05)
    sp.add_argument("--geometry-only", action="store_true", help="skip 3D features and the student pyramid")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("select", help="run the voxel filters on one scene")
    common(sp)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--filters", default="range,occlusion,consistency")
    sp.add_argument("--occlusion-threshold", type=_positive, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("train", help="train the alignment heads")
    common(sp, seed_required=True)
    sp.add_argument("--scenes", required=True, help="scene directory, glob, or parent directory")
    sp.add_argument("--embeddings", help="embedding bank JSON (default: the scenes' bank)")
    sp.add_argument("--filters", default="range,occlusion,consistency")
    sp.add_argument("--occlusion-threshold", type=_positive, default=1)
    sp.add_argument("--lambda1", type=float, default=0.1)
    sp.add_argument("--lambda2", type=float, default=1.0)
    sp.add_argument("--lambda3", type=float, default=1.0)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--weight-decay", type=float, default=1e-3)
    sp.add_argument("--temperature", type=float, default=None,
                    help="recompute teacher classes and confidence at this softmax temperature "
                         "(default: use the stored confidence map)")
    sp.add_argument("--no-reweight", action="store_true")
    sp.add_argument("--pix-mean", action="store_true", help="average the pixel loss instead of summing")
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--hidden3d", type=_ints, default=())
    sp.add_argument("--fusion-hidden", type=_positive, default=512)
    sp.add_argument("--no-2d", action="store_true", help="train the 3D head only")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="classify a scene's occupied voxels")
    common(sp)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--heads", required=True, help="training output directory or head3d.json")
    sp.add_argument("--embeddings")
    sp.add_argument("--queries", help="comma-separated category names (default: all)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="per-class IoU and base/novel means")
    common(sp)
    sp.add_argument("--pred", required=True, help="predicted label tensor JSON")
    sp.add_argument("--gt", required=True, help="ground-truth scene")
    sp.add_argument("--schema", help="embedding bank / schema JSON (default: the scene's)")
    sp.add_argument("--include-empty", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    common(sp)
    sp.add_argument("--seeds", type=_positive, default=20)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--h", type=float, default=1e-6)
    sp.add_argument("--corrupt", action="store_true", help="perturb analytic gradients (self-test)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def _subparser(parser, name):
    """The named subcommand parser, or the name -> parser map when ``name`` is None."""
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices if name is None else action.choices[name]
    raise KeyError(name)


def parse_args(argv=None):
    parser = build_parser()
    # the config file must be read before the full parse so it can satisfy required flags
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    early, _ = pre.parse_known_args(argv)
    if early.config and early.command in _subparser(parser, None):
        try:
            with open(early.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {early.config}: {exc}")
        if not isinstance(cfg, dict):
            parser.error("config file must hold a JSON object")
        sp = _subparser(parser, None)[early.command]
        known = {a.dest for a in sp._actions}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - known - {"config"})
        if unknown:
            parser.error(f"unknown config keys: {unknown}")
        for a in sp._actions:
            if a.dest in cfg:
                v = cfg[a.dest]
                try:
                    a.default = a.type(",".join(map(str, v)) if isinstance(v, list) else str(v)) \
                        if a.type is not None else v
                except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                    parser.error(f"config key {a.dest}: {exc}")
                a.required = False
    return parser.parse_args(argv)


def _setup_logging():
    level = os.environ.get("OVO_LOG", "info").lower()
    levels = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "info"
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("ovo")
    root.handlers[:] = [handler]
    root.setLevel(levels[level])
    root.propagate = False


def main(argv=None) -> int:
    _setup_logging()
    args = parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ovo {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"ovo {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
