#!/usr/bin/env python3
"""Multi-scene pretraining and novel view synthesis from a single image.

Pretrains one shared view mapper plus per-scene mappers over three synthetic
scenes that share a camera rig, then fine-tunes a fresh scene mapper on ONE
image of a held-out scene while the view mapper stays frozen (digest-checked).
The fine-tuned pair renders the scene's other eight views.
"""

import os

import numpy as np

from viewtoken import (
    MapperTokenSource,
    MockBackend,
    TrainConfig,
    assemble_request,
    build_prompt,
    finetune_nvs,
    pretrain_multi_scene,
    render_grid,
    synth_scene,
    to_pose_vector,
)
from viewtoken.data import AugmentationConfig, save_image
from viewtoken.seeding import derive_key
from viewtoken.training import EVAL_TEMPLATE, VIEW_PLACEHOLDER

OUT = os.path.join(os.path.dirname(__file__), "output")
os.makedirs(OUT, exist_ok=True)

backend = MockBackend()
mild = AugmentationConfig(
    rotation_prob=0.5, rotation_degrees=8.0, crop_scale=(0.92, 1.08), jitter_prob=0.5, blur_prob=0.1
)

scenes, images = [], {}
for s in range(3):
    m, im = synth_scene(n_views=9, grid_size=16, seed=100 + s)
    scenes.append(m)
    images[m.scene_id] = im
held_manifest, held_images = synth_scene(n_views=9, grid_size=16, seed=200)

print("pretraining one view mapper + three scene mappers ...")
pre = pretrain_multi_scene(
    scenes, backend, TrainConfig(steps=900, seed=9, augmentation=mild), images=images
)
print("view-mapper digest:", pre.checkpoint.view_mapper_digest()[:16])

print("fine-tuning a fresh scene mapper on ONE image of the held-out scene ...")
ft = finetune_nvs(
    held_manifest.subset([4]),
    pre.checkpoint,
    backend,
    TrainConfig(steps=500, seed=10, augmentation=mild),
    images={4: held_images[4]},
)
assert ft.checkpoint.view_mapper_digest() == pre.checkpoint.view_mapper_digest()
print("view mapper untouched by fine-tuning (digest verified)")


def render(ckpt, scene_id, manifest, view):
    placeholder = f"<scene-{scene_id}>"
    backend.tokenizer.register_placeholder(placeholder)
    ref = ckpt.ref_norms["object"]
    pose = to_pose_vector(manifest.entry_for_view(view).pose, ckpt.pose_normalization)
    view_src = MapperTokenSource(
        ckpt.view_mapper(), ckpt.view_encoder(), ref, prefix="view",
        pose=pose.values, trainable=False,
    )
    scene_src = MapperTokenSource(
        ckpt.scene_mapper(scene_id), ckpt.scene_encoder(), ref, prefix="scene", trainable=False
    )
    prompt = build_prompt(EVAL_TEMPLATE, VIEW_PLACEHOLDER, placeholder, backend.tokenizer)
    return backend.sample_image(
        assemble_request(prompt, view_source=view_src, scene_source=scene_src),
        steps=8,
        seed=derive_key(42, scene_id, view),
    )


views = held_manifest.view_indices()
truth = [held_images[v] for v in views]
preds = [render(ft.checkpoint, held_manifest.scene_id, held_manifest, v) for v in views]
errs = [float(np.mean((t - p) ** 2)) for t, p in zip(truth, preds)]
for v, e in zip(views, errs):
    mark = "(the single input view)" if v == 4 else ""
    print(f"view {v}: mse = {e:.4f} {mark}")

grid = render_grid(
    [truth, preds],
    row_labels=["truth", "nvs"],
    col_labels=[str(v) for v in views],
    marked_columns=(4,),
)
path = os.path.join(OUT, "single_image_nvs_grid.png")
save_image(path, grid)
print("wrote", path)
