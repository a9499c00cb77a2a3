"""Command-line interface.

Subcommands: train-single-scene, pretrain, nvs, generate, evaluate,
render-grid, convert-dtu. Every command accepts a JSON config file plus flag
overrides and, when ``--run-dir`` is given, writes a run manifest (config
snapshot, seeds, digests) next to its outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .backend import BackendError, MockBackend, MockBackendConfig, PromptOverflowError, VocabularyError
from .conditioning import (
    MapperTokenSource,
    PromptTemplate,
    TEMPLATE_KIND_SCENE_ONLY,
    assemble_request,
    build_prompt,
)
from .data import (
    DTU_QUALITATIVE_VIEWS,
    ManifestEntry,
    ManifestError,
    SceneManifest,
    dtu_splits,
    load_image,
    load_scene,
    save_image,
    save_manifest,
)
from .geometry import CameraPose, to_pose_vector
from .metrics import MetricsReport, MockPerceptualAdapter, evaluate_nvs, render_grid
from .training import (
    BackendMismatchError,
    CheckpointError,
    TrainConfig,
    VIEW_PLACEHOLDER,
    finetune_nvs,
    load_checkpoint,
    pretrain_multi_scene,
    save_checkpoint,
    train_single_scene,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKEND = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(message)


def _load_train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as f:
            cfg = TrainConfig.from_dict(json.load(f))
    overrides = {}
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "log", None):
        overrides["log_path"] = args.log
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    return cfg


def _make_backend(args) -> MockBackend:
    kind = getattr(args, "backend", "mock")
    if kind != "mock":
        raise BackendError(
            f"backend {kind!r} is not bundled; only the mock backend ships with this "
            "package (real runtimes plug in via the adapter contract)"
        )
    return MockBackend(MockBackendConfig(seed=getattr(args, "backend_seed", 0)))


def _write_run_manifest(args, command: str, payload: dict) -> None:
    run_dir = getattr(args, "run_dir", None)
    if not run_dir:
        return
    os.makedirs(run_dir, exist_ok=True)
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "package_version": __version__,
        "timestamp": time.time(),
    }
    doc.update(payload)
    with open(os.path.join(run_dir, "run_manifest.json"), "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2, default=str)


def _add_backend_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", default="mock", help="backend kind (bundled: mock)")
    p.add_argument("--backend-seed", type=int, default=0, help="mock backend weight seed")
    p.add_argument("--run-dir", help="write a run manifest into this directory")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON train-config file")
    p.add_argument("--steps", type=int, help="override training steps")
    p.add_argument("--seed", type=int, help="override global seed")
    p.add_argument("--log", help="write per-step metrics (JSON lines) here")
    _add_backend_common(p)


def _cmd_train_single_scene(args) -> int:
    backend = _make_backend(args)
    config = _load_train_config(args)
    scene = load_scene(args.manifest)
    result = train_single_scene(scene, backend, config)
    save_checkpoint(result.checkpoint, args.out)
    _write_run_manifest(
        args,
        "train-single-scene",
        {
            "config": config.to_dict(),
            "scene_id": scene.scene_id,
            "backend_digest": backend.weight_digest(),
            "checkpoint": args.out,
            "checkpoint_digest": result.checkpoint.content_digest(),
            "final_loss": result.records[-1].loss if result.records else None,
            "warnings": result.warnings,
        },
    )
    print(f"trained {result.checkpoint.step} steps; checkpoint written to {args.out}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    backend = _make_backend(args)
    config = _load_train_config(args)
    scenes = [load_scene(p) for p in args.manifest]
    result = pretrain_multi_scene(scenes, backend, config)
    save_checkpoint(result.checkpoint, args.out)
    _write_run_manifest(
        args,
        "pretrain",
        {
            "config": config.to_dict(),
            "scene_ids": [s.scene_id for s in scenes],
            "backend_digest": backend.weight_digest(),
            "checkpoint": args.out,
            "checkpoint_digest": result.checkpoint.content_digest(),
        },
    )
    print(f"pretrained on {len(scenes)} scenes; checkpoint written to {args.out}")
    return EXIT_OK


def _cmd_nvs(args) -> int:
    backend = _make_backend(args)
    config = _load_train_config(args)
    scene = load_scene(args.manifest)
    if args.views:
        scene = scene.subset([int(v) for v in args.views.split(",")])
    pretrained = load_checkpoint(args.pretrained, backend)
    result = finetune_nvs(scene, pretrained, backend, config)
    save_checkpoint(result.checkpoint, args.out)
    _write_run_manifest(
        args,
        "nvs",
        {
            "config": config.to_dict(),
            "scene_id": scene.scene_id,
            "train_views": scene.view_indices(),
            "pretrained": args.pretrained,
            "backend_digest": backend.weight_digest(),
            "checkpoint": args.out,
            "checkpoint_digest": result.checkpoint.content_digest(),
            "warnings": result.warnings,
        },
    )
    print(f"fine-tuned scene mapper for {scene.scene_id}; checkpoint written to {args.out}")
    return EXIT_OK


def _cmd_generate(args) -> int:
    backend = _make_backend(args)
    ckpt = load_checkpoint(args.checkpoint, backend)
    tokenizer = backend.tokenizer
    tokenizer.register_placeholder(VIEW_PLACEHOLDER)
    ref_word = ckpt.view_mapper_config.reference_word
    ref_norm = ckpt.ref_norms.get(ref_word) or backend.reference_norm(ref_word)

    scene_src = None
    scene_ref = None
    if args.scene is not None:
        placeholder = f"<scene-{args.scene}>"
        tokenizer.register_placeholder(placeholder)
        scene_src = MapperTokenSource(
            ckpt.scene_mapper(args.scene), ckpt.scene_encoder(), ref_norm,
            prefix="scene", trainable=False,
        )
        scene_ref = placeholder

    if args.scene_only:
        if scene_src is None:
            raise UsageError("--scene-only requires --scene")
        template = PromptTemplate(
            text=args.template or "a photo of a {SCENE}",
            id="cli-scene-only",
            kind=TEMPLATE_KIND_SCENE_ONLY,
        )
        resolved = build_prompt(template, None, scene_ref, tokenizer)
        request = assemble_request(resolved, scene_source=scene_src)
    else:
        view_src = _view_source_from_args(args, ckpt, backend, ref_norm)
        template_text = args.template or (
            "{VIEW}. a photo of a {SCENE}" if scene_src is not None else
            "{VIEW}. a photo of a " + ckpt.config.get("class_word", "object")
        )
        template = PromptTemplate(text=template_text, id="cli-generate")
        resolved = build_prompt(
            template, VIEW_PLACEHOLDER, scene_ref if template.has_scene else None, tokenizer
        )
        request = assemble_request(resolved, view_source=view_src, scene_source=scene_src)

    image = backend.sample_image(request, steps=args.steps, seed=args.gen_seed)
    save_image(args.out, image)
    _write_run_manifest(
        args,
        "generate",
        {
            "checkpoint": args.checkpoint,
            "checkpoint_digest": ckpt.content_digest(),
            "backend_digest": backend.weight_digest(),
            "prompt": request.prompt,
            "sample_steps": args.steps,
            "sample_seed": args.gen_seed,
            "output": args.out,
        },
    )
    print(f"wrote {args.out} (prompt: {request.prompt!r}, steps={args.steps})")
    return EXIT_OK


def _view_source_from_args(args, ckpt, backend, ref_norm) -> MapperTokenSource:
    if args.pose_matrix:
        with open(args.pose_matrix, "r", encoding="utf-8") as f:
            vals = np.asarray(json.load(f), dtype=np.float64).reshape(4, 4)
        pose = CameraPose.from_matrix(vals)
    elif args.theta is not None and args.phi is not None:
        pose = CameraPose.from_spherical(
            math.radians(args.theta), math.radians(args.phi) % (2 * math.pi), args.radius
        )
    else:
        raise UsageError("generate requires either --pose-matrix or --theta/--phi")
    pv = to_pose_vector(pose, ckpt.pose_normalization)
    if pv.clamped:
        print("warning: pose outside the training range; components were clamped", file=sys.stderr)
    return MapperTokenSource(
        ckpt.view_mapper(), ckpt.view_encoder(), ref_norm,
        prefix="view", pose=pv.values, trainable=False,
    )


def _cmd_evaluate(args) -> int:
    backend = _make_backend(args)
    ckpt = load_checkpoint(args.checkpoint, backend)
    scene = load_scene(args.manifest)
    split = dtu_splits(args.regime if args.regime == "all" else int(args.regime))
    if args.views:
        views = [int(v) for v in args.views.split(",")]
    else:
        in_scene = set(scene.view_indices())
        views = [v for v in (split.test_views or DTU_QUALITATIVE_VIEWS) if v in in_scene]
        if not views:
            views = sorted(in_scene)
    adapter = None if args.adapter == "none" else MockPerceptualAdapter()
    report = evaluate_nvs(
        ckpt, scene, split, backend, views, adapter=adapter,
        global_seed=args.seed or 0, steps=args.steps or 50,
    )
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(report.to_json_str())
    print(report.table())
    _write_run_manifest(args, "evaluate", {"report": args.out, **report.metadata})
    return EXIT_OK


def _cmd_render_grid(args) -> int:
    rows = [[load_image(p) for p in row.split(",")] for row in args.row]
    marked = tuple(int(c) for c in args.mark.split(",")) if args.mark else ()
    grid = render_grid(
        rows,
        row_labels=args.row_labels.split(",") if args.row_labels else None,
        col_labels=args.col_labels.split(",") if args.col_labels else None,
        marked_columns=marked,
    )
    save_image(args.out, grid)
    print(f"wrote {args.out} ({grid.shape[0]}x{grid.shape[1]})")
    return EXIT_OK


def _decompose_projection(p: np.ndarray) -> np.ndarray:
    """3x4 projection matrix -> 4x4 camera-to-world matrix."""
    from scipy.linalg import rq

    k, r = rq(p[:, :3])
    signs = np.sign(np.diag(k))
    signs[signs == 0] = 1.0
    t_fix = np.diag(signs)
    k = k @ t_fix
    r = t_fix @ r
    t = np.linalg.solve(k, p[:, 3])
    if np.linalg.det(r) < 0:  # projective scale sign is arbitrary
        r = -r
        t = -t
    c2w = np.eye(4)
    c2w[:3, :3] = r.T
    c2w[:3, 3] = -r.T @ t
    return c2w


def _cmd_convert_dtu(args) -> int:
    import glob as globmod

    cam_dir = os.path.join(args.scan_dir, args.cameras_dir)
    img_dir = os.path.join(args.scan_dir, args.images_dir)
    cam_files = sorted(globmod.glob(os.path.join(cam_dir, "pos_*.txt")))
    if not cam_files:
        raise ManifestError(f"no camera files (pos_*.txt) found under {cam_dir}")
    entries = []
    image_size = None
    for cam_file in cam_files:
        stem = os.path.splitext(os.path.basename(cam_file))[0]
        num = int(stem.split("_")[1])
        view = num - 1  # camera files are 1-indexed, view indices 0-based
        p = np.loadtxt(cam_file, dtype=np.float64)
        if p.shape != (3, 4):
            raise ManifestError(f"{cam_file}: expected a 3x4 projection matrix, got {p.shape}")
        c2w = _decompose_projection(p)
        candidates = sorted(globmod.glob(os.path.join(img_dir, f"*{num:03d}*")))
        if not candidates:
            raise ManifestError(f"no image for view {view} (camera file {cam_file})")
        img_path = candidates[0]
        if image_size is None:
            arr = load_image(img_path)
            image_size = arr.shape[:2]
        entries.append(
            ManifestEntry(
                image_path=os.path.abspath(img_path),
                pose=CameraPose.from_matrix(c2w),
                view_index=view,
            )
        )
    scene_id = args.scene_id or os.path.basename(os.path.normpath(args.scan_dir))
    manifest = SceneManifest(scene_id=scene_id, entries=tuple(entries), image_size=image_size)
    save_manifest(manifest, args.out)
    print(f"wrote manifest for {scene_id} ({len(entries)} views) to {args.out}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="viewtoken", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-single-scene", help="optimize a view mapper on one scene")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=_cmd_train_single_scene)

    p = sub.add_parser("pretrain", help="jointly train view + scene mappers on many scenes")
    _add_common(p)
    p.add_argument("--manifest", action="append", required=True, help="repeat per scene")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("nvs", help="fine-tune a scene mapper under a frozen view mapper")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pretrained", required=True, help="pretraining checkpoint")
    p.add_argument("--views", help="comma-separated train view subset, e.g. '25'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_nvs)

    p = sub.add_parser("generate", help="view-controlled generation from a checkpoint")
    _add_backend_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--theta", type=float, help="polar angle in degrees")
    p.add_argument("--phi", type=float, help="azimuth in degrees")
    p.add_argument("--radius", type=float, default=4.0)
    p.add_argument("--pose-matrix", help="JSON file with 16 camera-to-world numbers")
    p.add_argument("--template", help="prompt template text with {VIEW}/{SCENE}")
    p.add_argument("--scene", help="scene id whose mapper conditions the prompt")
    p.add_argument("--scene-only", action="store_true", help="scene token only, no view token")
    p.add_argument("--steps", type=int, default=50, help="sampler steps (default 50)")
    p.add_argument("--gen-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output PNG")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("evaluate", help="render test views and score PSNR/SSIM/LPIPS")
    _add_backend_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--regime", default="1", help="view regime: 1, 3, 6, 9, or all")
    p.add_argument("--views", help="comma-separated view list (default: split test views)")
    p.add_argument("--adapter", default="mock", choices=["mock", "none"])
    p.add_argument("--seed", type=int, default=0, help="render seed policy base")
    p.add_argument("--steps", type=int, default=50, help="sampler steps (default 50)")
    p.add_argument("--out", required=True, help="JSON report path")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("render-grid", help="compose images into a labeled grid")
    p.add_argument("--row", action="append", required=True, help="comma-separated image paths")
    p.add_argument("--row-labels")
    p.add_argument("--col-labels")
    p.add_argument("--mark", help="comma-separated train-view column indices")
    p.add_argument("--out", required=True)
    p.add_argument("--run-dir")
    p.set_defaults(func=_cmd_render_grid)

    p = sub.add_parser("convert-dtu", help="convert a DTU scan directory into a manifest")
    p.add_argument("--scan-dir", required=True)
    p.add_argument("--cameras-dir", default="cameras", help="subdir with pos_NNN.txt files")
    p.add_argument("--images-dir", default="images")
    p.add_argument("--scene-id")
    p.add_argument("--out", required=True)
    p.add_argument("--run-dir")
    p.set_defaults(func=_cmd_convert_dtu)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (BackendError, VocabularyError, PromptOverflowError, BackendMismatchError) as e:
        print(f"backend error: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except (ManifestError, CheckpointError, FileNotFoundError, OSError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
