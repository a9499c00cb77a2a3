#!/usr/bin/env python3
"""Cameras, pose normalization, view classification, and Fourier encodings.

Walks the geometry layer end to end: build a small camera rig on a sphere,
fit per-entry normalization over a training split, map poses to [-1, 1]
vectors, classify query views as interpolations or extrapolations of the
training set, and feed everything through the random-feature encoder.
"""

import math

import numpy as np

from viewtoken import (
    CameraPose,
    ConditioningInput,
    EncoderConfig,
    FourierEncoder,
    classify_view,
    fit_normalization,
    scene_encoder_variant,
    to_pose_vector,
)
from viewtoken.geometry import look_at_matrix

# A handful of cameras on a sphere sector, all pointed at the origin.
train_poses = [
    CameraPose.from_matrix(look_at_matrix(math.radians(theta), math.radians(phi), 4.0))
    for theta, phi in [(60, 20), (60, 120), (85, 20), (85, 120), (72, 70)]
]

stats = fit_normalization(train_poses, source_split="demo-train")
print("per-entry spans of the 12 free camera-to-world entries:")
print(np.round(stats.entry_max - stats.entry_min, 3))

# A training pose lands inside [-1, 1] by construction.
vec = to_pose_vector(train_poses[2], stats)
print("\npose vector (train view):", np.round(vec.values, 3), "clamped:", vec.clamped)

# A wildly different camera is clamped and flagged rather than rejected:
# extrapolation experiments stay runnable.
wild = CameraPose.from_matrix(look_at_matrix(math.radians(20), math.radians(300), 9.0))
print("wild pose clamped:", to_pose_vector(wild, stats).clamped)

# Interpolation vs extrapolation is a convex-hull test in (theta, phi).
inside = CameraPose.from_spherical(math.radians(70), math.radians(60), 4.0)
outside = CameraPose.from_spherical(math.radians(40), math.radians(60), 4.0)
print("\nquery inside the angle hull: ", classify_view(inside, train_poses))
print("query beyond the polar range:", classify_view(outside, train_poses))

# The conditioning input [t, layer, pose] becomes a 64-dim [sin, cos] code.
encoder = FourierEncoder(EncoderConfig(pose_dim=12, seed=0))
code = encoder.encode(ConditioningInput(timestep=37, layer=1, pose=vec.values))
print("\nencoding length:", code.shape[0], " range: [%.3f, %.3f]" % (code.min(), code.max()))

# Scene mappers use the same encoder minus the camera columns; the timestep
# and layer frequency columns are shared bit-for-bit.
scene_encoder = scene_encoder_variant(encoder.config)
print("scene-encoder input dim:", scene_encoder.input_dim)
print(
    "shared t/layer columns:",
    np.array_equal(encoder.frequencies[:, :2], scene_encoder.frequencies),
)
