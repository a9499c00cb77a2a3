#!/usr/bin/env python3
"""DTU splits, the checkpoint container, and the command-line interface.

Prints the standard sparse-view DTU splits, round-trips a checkpoint through
the single-file container (checksums and all), and drives the CLI end to end:
train on a synthetic scene from disk, generate a view-controlled image, and
evaluate it.
"""

import os
import subprocess
import sys

from viewtoken import MockBackend, TrainConfig, dtu_splits, load_checkpoint, save_checkpoint
from viewtoken import synth_scene, train_single_scene
from viewtoken.data import identity_augmentations

OUT = os.path.join(os.path.dirname(__file__), "output", "cli-demo")
os.makedirs(OUT, exist_ok=True)

# The standard sparse-view splits.
for regime in (1, 3, 6, 9):
    print(f"{regime}-view train views:", dtu_splits(regime).train_views)
pre = dtu_splits("all")
print("pretraining scenes:", len(pre.train_scenes), " test scenes:", pre.test_scenes)
print("excluded views:", pre.excluded_views)

# Checkpoint round trip: bit-exact arrays, self-describing header.
backend = MockBackend()
manifest, images = synth_scene(n_views=6, grid_size=16, seed=7, out_dir=os.path.join(OUT, "scene"))
result = train_single_scene(
    manifest, backend, TrainConfig(steps=40, seed=1, augmentation=identity_augmentations()),
    images=images,
)
ckpt_path = os.path.join(OUT, "demo.vt")
save_checkpoint(result.checkpoint, ckpt_path)
loaded = load_checkpoint(ckpt_path, backend=backend)
print("\ncheckpoint:", os.path.getsize(ckpt_path), "bytes;",
      len(loaded.arrays), "arrays; regime:", loaded.regime)
print("stream algorithm:", loaded.prng_algorithm)

# The same flows through the CLI.
def run(*args):
    cmd = [sys.executable, "-m", "viewtoken.cli", *args]
    print("\n$", " ".join(args))
    subprocess.run(cmd, check=True)

manifest_path = os.path.join(OUT, "scene", "manifest.json")
run("train-single-scene", "--manifest", manifest_path, "--steps", "40", "--seed", "1",
    "--out", os.path.join(OUT, "cli.vt"), "--run-dir", OUT)
run("generate", "--checkpoint", os.path.join(OUT, "cli.vt"),
    "--theta", "75", "--phi", "80", "--steps", "8",
    "--out", os.path.join(OUT, "generated.png"))
run("evaluate", "--checkpoint", os.path.join(OUT, "cli.vt"),
    "--manifest", manifest_path, "--views", "1,4", "--steps", "8",
    "--out", os.path.join(OUT, "report.json"))
print("\nrun manifest + outputs under", OUT)
