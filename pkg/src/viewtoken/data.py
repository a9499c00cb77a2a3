"""Multi-view scene manifests, DTU splits, augmentations, synthetic scenes.

A scene manifest is one JSON document listing (image path, camera pose, view
index) entries plus the image size. Poses are either 4x4 camera-to-world
matrices (16 numbers, row-major) or spherical angles (theta, phi, radius);
a scene uses one kind throughout. Images live on disk as 8-bit PNG and are
handled in memory as float arrays in [0, 1].

The augmentation pipeline is rotation (white fill), area-scaled resized crop,
color jitter, and Gaussian blur, applied in that order; horizontal flipping is
structurally absent (it would corrupt the view supervision, and no
configuration can enable it). Per-sample randomness derives from
(global seed, scene id, view index, step), so augmented batches are
bit-reproducible regardless of worker scheduling.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import CameraPose

# ---------------------------------------------------------------------------
# Exceptions
# ---------------------------------------------------------------------------


class ManifestError(ValueError):
    """A manifest file is missing, malformed, or violates invariants."""


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------


def load_image(path: str) -> np.ndarray:
    """8-bit PNG -> float64 RGB array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def save_image(path: str, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# Scene manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    pose: CameraPose
    view_index: int


@dataclass(frozen=True)
class SceneManifest:
    scene_id: str
    entries: tuple[ManifestEntry, ...]
    image_size: tuple[int, int]  # (H, W)

    @property
    def pose_kind(self) -> str:
        return self.entries[0].pose.kind

    def view_indices(self) -> list[int]:
        return [e.view_index for e in self.entries]

    def entry_for_view(self, view_index: int) -> ManifestEntry:
        for e in self.entries:
            if e.view_index == view_index:
                return e
        raise ManifestError(f"scene {self.scene_id!r} has no view {view_index}")

    def subset(self, views: list[int]) -> "SceneManifest":
        entries = tuple(self.entry_for_view(v) for v in views)
        return replace(self, entries=entries)


def _entry_to_json(entry: ManifestEntry) -> dict:
    d = {"image": entry.image_path, "view": entry.view_index}
    if entry.pose.kind == "matrix":
        d["camera_to_world"] = [float(x) for x in entry.pose.matrix.reshape(16)]
    else:
        d["spherical"] = [entry.pose.theta, entry.pose.phi, entry.pose.radius]
    return d


def save_manifest(manifest: SceneManifest, path: str) -> None:
    doc = {
        "scene_id": manifest.scene_id,
        "image_size": list(manifest.image_size),
        "entries": [_entry_to_json(e) for e in manifest.entries],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)


def load_scene(path: str) -> SceneManifest:
    """Load and validate a scene manifest.

    Checks: parseable JSON, unique view indices, resolvable image paths, and
    pose invariants (camera-to-world bottom row, spherical angle ranges).
    """
    if not os.path.exists(path):
        raise ManifestError(f"manifest not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}") from e
    base = os.path.dirname(os.path.abspath(path))
    try:
        scene_id = str(doc["scene_id"])
        image_size = tuple(int(x) for x in doc["image_size"])
        raw_entries = doc["entries"]
    except (KeyError, TypeError) as e:
        raise ManifestError(f"manifest {path} is missing required fields: {e}") from e
    entries = []
    seen: set[int] = set()
    kinds: set[str] = set()
    for raw in raw_entries:
        view = int(raw["view"])
        if view in seen:
            raise ManifestError(f"duplicate view index {view} in scene {scene_id!r}")
        seen.add(view)
        img = raw["image"]
        img_path = img if os.path.isabs(img) else os.path.join(base, img)
        if not os.path.exists(img_path):
            raise ManifestError(f"image for view {view} not found: {img_path}")
        if "camera_to_world" in raw:
            vals = np.asarray(raw["camera_to_world"], dtype=np.float64)
            if vals.size != 16:
                raise ManifestError(
                    f"view {view}: camera_to_world must have 16 entries, got {vals.size}"
                )
            try:
                pose = CameraPose.from_matrix(vals.reshape(4, 4))
            except ValueError as e:
                raise ManifestError(f"view {view}: {e}") from e
        elif "spherical" in raw:
            try:
                theta, phi, radius = (float(x) for x in raw["spherical"])
                pose = CameraPose.from_spherical(theta, phi, radius)
            except (TypeError, ValueError) as e:
                raise ManifestError(f"view {view}: bad spherical pose: {e}") from e
        else:
            raise ManifestError(f"view {view}: entry has neither camera_to_world nor spherical")
        kinds.add(pose.kind)
        entries.append(ManifestEntry(image_path=img_path, pose=pose, view_index=view))
    if not entries:
        raise ManifestError(f"scene {scene_id!r} has no entries")
    if len(kinds) > 1:
        raise ManifestError(f"scene {scene_id!r} mixes pose parameterizations")
    return SceneManifest(scene_id=scene_id, entries=tuple(entries), image_size=image_size)


def load_scene_images(manifest: SceneManifest) -> dict[int, np.ndarray]:
    return {e.view_index: load_image(e.image_path) for e in manifest.entries}


# ---------------------------------------------------------------------------
# DTU splits
# ---------------------------------------------------------------------------

# The released DTU multi-view rig: 124 scans (ids 1-77 and 82-128), 49 camera
# positions per scan, view indices 0-based.
DTU_ALL_SCANS: tuple[int, ...] = tuple(range(1, 78)) + tuple(range(82, 129))
DTU_NUM_VIEWS = 49

DTU_TEST_SCENES: tuple[int, ...] = (8, 21, 30, 31, 34, 38, 40, 41, 45, 55, 63, 82, 103, 110, 114)

# Scans excluded from pretraining because their content overlaps the test set.
DTU_PRETRAIN_EXCLUDED_SCENES: tuple[int, ...] = (
    1, 2, 7, 25, 26, 27, 29, 39, 51, 54, 56, 57, 58, 73, 83, 111, 112, 113, 115, 116, 117,
)

DTU_TRAIN_VIEWS_9: tuple[int, ...] = (25, 22, 28, 40, 44, 48, 0, 8, 13)

# Views dropped from every split for image quality.
DTU_EXCLUDED_VIEWS: tuple[int, ...] = (3, 4, 5, 6, 7, 16, 17, 18, 19, 20, 21, 36, 37, 38, 39)

VIEW_REGIMES = (1, 3, 6, 9, "all")


@dataclass(frozen=True)
class SplitSpec:
    """Scene and view lists for one training regime; all sets are disjoint."""

    view_regime: int | str
    train_scenes: tuple[int, ...]
    test_scenes: tuple[int, ...]
    train_views: tuple[int, ...]
    test_views: tuple[int, ...]
    excluded_views: tuple[int, ...]

    def __post_init__(self):
        if set(self.train_scenes) & set(self.test_scenes):
            raise ValueError("train and test scenes overlap")
        if set(self.train_views) & set(self.test_views):
            raise ValueError("train and test views overlap")
        excl = set(self.excluded_views)
        if excl & (set(self.train_views) | set(self.test_views)):
            raise ValueError("excluded views appear in train or test views")


def dtu_splits(regime: int | str) -> SplitSpec:
    """The standard sparse-view DTU splits.

    ``regime`` selects how many train views: k in {1, 3, 6, 9} takes the first
    k of the 9-view list; "all" is the pretraining regime, which uses every
    non-excluded view for training and holds out no views.
    """
    if regime not in VIEW_REGIMES:
        raise ValueError(f"invalid view regime {regime!r}; expected one of {VIEW_REGIMES}")
    train_scenes = tuple(
        s
        for s in DTU_ALL_SCANS
        if s not in DTU_TEST_SCENES and s not in DTU_PRETRAIN_EXCLUDED_SCENES
    )
    usable = [
        v for v in range(DTU_NUM_VIEWS) if v not in DTU_EXCLUDED_VIEWS
    ]
    if regime == "all":
        train_views = tuple(sorted(usable))
        test_views: tuple[int, ...] = ()
    else:
        train_views = DTU_TRAIN_VIEWS_9[: int(regime)]
        test_views = tuple(sorted(v for v in usable if v not in train_views))
    return SplitSpec(
        view_regime=regime,
        train_scenes=train_scenes,
        test_scenes=DTU_TEST_SCENES,
        train_views=train_views,
        test_views=test_views,
        excluded_views=DTU_EXCLUDED_VIEWS,
    )


# Evaluation view sets: the representative qualitative subset, and the
# three-view set used for baseline comparisons.
DTU_QUALITATIVE_VIEWS: tuple[int, ...] = (1, 8, 12, 15, 24, 27, 29, 33, 40, 43, 48)
DTU_BASELINE_VIEWS: tuple[int, ...] = (1, 45, 22)


# ---------------------------------------------------------------------------
# Resize policy
# ---------------------------------------------------------------------------


def resize_policy(stage: str, descriptor=None) -> tuple[int, int]:
    """Working resolution per pipeline stage.

    Real-backend DTU runs train at (512, 384) and sample at (768, 576); runs
    against a desk-scale backend use that backend descriptor's image shape.
    """
    if stage not in ("train", "inference"):
        raise ValueError(f"stage must be 'train' or 'inference', got {stage!r}")
    if descriptor is not None:
        return (descriptor.image_shape[0], descriptor.image_shape[1])
    return (512, 384) if stage == "train" else (768, 576)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    """Image augmentation parameters. There is deliberately no flip option."""

    rotation_degrees: float = 10.0
    rotation_fill: float = 1.0  # white
    rotation_prob: float = 0.75
    crop_scale: tuple[float, float] = (0.70, 1.30)
    jitter_strength: float = 0.04  # brightness/contrast/saturation/hue alike
    jitter_prob: float = 0.75
    blur_kernel: int = 5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    blur_prob: float = 0.20
    out_size: tuple[int, int] | None = None  # None: keep input size

    def __post_init__(self):
        if not 0.0 <= self.rotation_prob <= 1.0:
            raise ValueError("rotation_prob must be in [0, 1]")
        if not 0.0 <= self.jitter_prob <= 1.0:
            raise ValueError("jitter_prob must be in [0, 1]")
        if not 0.0 <= self.blur_prob <= 1.0:
            raise ValueError("blur_prob must be in [0, 1]")
        if not 0 < self.crop_scale[0] <= self.crop_scale[1]:
            raise ValueError("crop_scale must satisfy 0 < lo <= hi")
        if self.blur_kernel % 2 != 1:
            raise ValueError("blur_kernel must be odd")


def single_view_nvs_augmentations(**kw) -> AugmentationConfig:
    return AugmentationConfig(crop_scale=(0.70, 1.30), **kw)


def three_view_nvs_augmentations(**kw) -> AugmentationConfig:
    return AugmentationConfig(crop_scale=(0.95, 1.05), **kw)


def identity_augmentations(**kw) -> AugmentationConfig:
    return AugmentationConfig(
        rotation_prob=0.0, crop_scale=(1.0, 1.0), jitter_prob=0.0, blur_prob=0.0, **kw
    )


@dataclass
class AugmentationTrace:
    """What one augmentation draw actually applied."""

    rotation_applied: bool
    rotation_angle: float
    crop_scale: float
    jitter_applied: bool
    jitter_factors: tuple[float, float, float, float]
    blur_applied: bool
    blur_sigma: float


def _luma(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    delta = maxc - minc
    safe_max = np.where(maxc > 0, maxc, 1.0)
    s = np.where(maxc > 0, delta / safe_max, 0.0)
    safe_delta = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe_delta
    gc = (maxc - g) / safe_delta
    bc = (maxc - b) / safe_delta
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices = [
        np.stack([v, t, p], -1),
        np.stack([q, v, p], -1),
        np.stack([p, v, t], -1),
        np.stack([p, q, v], -1),
        np.stack([t, p, v], -1),
        np.stack([v, p, q], -1),
    ]
    out = np.zeros_like(hsv)
    for k in range(6):
        out = np.where((i == k)[..., None], choices[k], out)
    return out


def resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel-center alignment; exact no-op on equal size."""
    h_out, w_out = size
    h_in, w_in = img.shape[:2]
    if (h_in, w_in) == (h_out, w_out):
        return img.copy()
    ys = (np.arange(h_out) + 0.5) * h_in / h_out - 0.5
    xs = (np.arange(w_out) + 0.5) * w_in / w_out - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    coords = np.stack([grid[0].ravel(), grid[1].ravel()])
    out = np.empty((h_out, w_out, img.shape[2]))
    for c in range(img.shape[2]):
        out[..., c] = ndimage.map_coordinates(
            img[..., c], coords, order=1, mode="nearest"
        ).reshape(h_out, w_out)
    return out


def _scaled_crop(img: np.ndarray, scale: float, u_y: float, u_x: float) -> np.ndarray:
    """Extract an area-scaled window (white-padded when it exceeds the image)."""
    h, w = img.shape[:2]
    side = math.sqrt(scale)
    wh = max(1, int(round(side * h)))
    ww = max(1, int(round(side * w)))
    lo_y, hi_y = min(0, h - wh), max(0, h - wh)
    lo_x, hi_x = min(0, w - ww), max(0, w - ww)
    ty = int(round(lo_y + u_y * (hi_y - lo_y)))
    tx = int(round(lo_x + u_x * (hi_x - lo_x)))
    if ty == 0 and tx == 0 and wh == h and ww == w:
        return img
    window = np.full((wh, ww, img.shape[2]), 1.0)
    ys0, ys1 = max(0, ty), min(h, ty + wh)
    xs0, xs1 = max(0, tx), min(w, tx + ww)
    if ys0 < ys1 and xs0 < xs1:
        window[ys0 - ty : ys1 - ty, xs0 - tx : xs1 - tx] = img[ys0:ys1, xs0:xs1]
    return window


def _color_jitter(img: np.ndarray, fb: float, fc: float, fs: float, dh: float) -> np.ndarray:
    out = np.clip(img * fb, 0.0, 1.0)
    gray_mean = float(_luma(out).mean())
    out = np.clip(out * fc + (1.0 - fc) * gray_mean, 0.0, 1.0)
    gray = _luma(out)[..., None]
    out = np.clip(out * fs + (1.0 - fs) * gray, 0.0, 1.0)
    hsv = rgb_to_hsv(out)
    hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def _gaussian_blur(img: np.ndarray, kernel: int, sigma: float) -> np.ndarray:
    half = kernel // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    k /= k.sum()
    out = ndimage.correlate1d(img, k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def augment_traced(
    image: np.ndarray, config: AugmentationConfig, rng: np.random.Generator
) -> tuple[np.ndarray, AugmentationTrace]:
    """Apply the augmentation pipeline and report what was applied.

    All random draws happen unconditionally and in a fixed order, so the
    consumed stream is independent of which ops fire.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    out_size = config.out_size or img.shape[:2]

    u_rot = rng.uniform()
    angle = rng.uniform(-config.rotation_degrees, config.rotation_degrees)
    scale = rng.uniform(config.crop_scale[0], config.crop_scale[1])
    u_y = rng.uniform()
    u_x = rng.uniform()
    u_jit = rng.uniform()
    s = config.jitter_strength
    fb = rng.uniform(1.0 - s, 1.0 + s)
    fc = rng.uniform(1.0 - s, 1.0 + s)
    fs = rng.uniform(1.0 - s, 1.0 + s)
    dh = rng.uniform(-s, s)
    u_blur = rng.uniform()
    sigma = rng.uniform(config.blur_sigma[0], config.blur_sigma[1])

    rotated = u_rot < config.rotation_prob
    if rotated:
        img = np.clip(
            ndimage.rotate(
                img, angle, axes=(1, 0), reshape=False, order=1,
                mode="constant", cval=config.rotation_fill,
            ),
            0.0,
            1.0,
        )
    img = resize_image(_scaled_crop(img, scale, u_y, u_x), tuple(out_size))
    jittered = u_jit < config.jitter_prob
    if jittered:
        img = _color_jitter(img, fb, fc, fs, dh)
    blurred = u_blur < config.blur_prob
    if blurred:
        img = np.clip(_gaussian_blur(img, config.blur_kernel, sigma), 0.0, 1.0)
    trace = AugmentationTrace(
        rotation_applied=bool(rotated),
        rotation_angle=float(angle),
        crop_scale=float(scale),
        jitter_applied=bool(jittered),
        jitter_factors=(float(fb), float(fc), float(fs), float(dh)),
        blur_applied=bool(blurred),
        blur_sigma=float(sigma),
    )
    return img, trace


def augment(image: np.ndarray, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    return augment_traced(image, config, rng)[0]


# ---------------------------------------------------------------------------
# Synthetic view-dependent scenes
# ---------------------------------------------------------------------------

SYNTH_THETA_RANGE = (math.radians(60.0), math.radians(90.0))
SYNTH_PHI_RANGE = (0.0, math.radians(160.0))
SYNTH_RADIUS = 4.0
_BLOB_SIGMA = 3.0
_BLOB_MARGIN = 3.5


@dataclass(frozen=True)
class SynthSceneParams:
    """Per-scene appearance: a smooth background plus a fixed white blob."""

    bg_level: float
    bg_slope_x: float
    bg_slope_y: float


def _synth_params(seed: int) -> SynthSceneParams:
    from .seeding import derive_rng

    rng = derive_rng(seed, "synth-scene-appearance")
    return SynthSceneParams(
        bg_level=float(rng.uniform(0.15, 0.35)),
        bg_slope_x=float(rng.uniform(-0.12, 0.12)),
        bg_slope_y=float(rng.uniform(-0.12, 0.12)),
    )


def synth_blob_center(theta: float, phi: float, grid_size: int) -> tuple[float, float]:
    """Blob center in pixels: a smooth injective map of the camera angles."""
    t0, t1 = SYNTH_THETA_RANGE
    p0, p1 = SYNTH_PHI_RANGE
    cy = _BLOB_MARGIN + (theta - t0) / (t1 - t0) * (grid_size - 1 - 2 * _BLOB_MARGIN)
    cx = _BLOB_MARGIN + (phi - p0) / (p1 - p0) * (grid_size - 1 - 2 * _BLOB_MARGIN)
    return cy, cx


def render_synth_view(theta: float, phi: float, grid_size: int, params: SynthSceneParams) -> np.ndarray:
    """Deterministic grayscale-content rendering of the blob scene."""
    cy, cx = synth_blob_center(theta, phi, grid_size)
    ys, xs = np.mgrid[0:grid_size, 0:grid_size].astype(np.float64)
    bg = (
        params.bg_level
        + params.bg_slope_x * (xs / (grid_size - 1) - 0.5)
        + params.bg_slope_y * (ys / (grid_size - 1) - 0.5)
    )
    blob = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * _BLOB_SIGMA**2))
    img = np.clip(bg + blob, 0.0, 1.0)
    return np.repeat(img[..., None], 3, axis=2)


def synth_view_angles(n_views: int, seed: int) -> list[tuple[float, float]]:
    """Stratified, jittered (theta, phi) coverage of the synthetic angle box."""
    from .seeding import derive_rng

    rng = derive_rng(seed, "synth-scene-views")
    cols = int(math.ceil(math.sqrt(n_views)))
    rows = int(math.ceil(n_views / cols))
    t0, t1 = SYNTH_THETA_RANGE
    p0, p1 = SYNTH_PHI_RANGE
    angles = []
    for i in range(n_views):
        r, c = divmod(i, cols)
        jt = rng.uniform(0.2, 0.8)
        jp = rng.uniform(0.2, 0.8)
        theta = t0 + (r + jt) / rows * (t1 - t0)
        phi = p0 + (c + jp) / cols * (p1 - p0)
        angles.append((theta, phi))
    return angles


def synth_scene(
    n_views: int,
    grid_size: int = 16,
    seed: int = 0,
    out_dir: str | None = None,
    rig_seed: int | None = None,
) -> tuple[SceneManifest, dict[int, np.ndarray]]:
    """Generate a synthetic multi-view scene of a Gaussian blob.

    Cameras sit on a sphere (spherical poses at fixed radius) spanning the
    angle box above; the blob center moves smoothly and injectively with
    (theta, phi). ``seed`` controls scene appearance; ``rig_seed`` (defaults
    to ``seed``) controls the camera positions, so multiple scenes can share
    one camera rig the way a fixed capture setup would. When ``out_dir`` is
    given, PNG images plus a ``manifest.json`` are written there and the
    manifest points at them.
    """
    if n_views < 3:
        raise ValueError(f"n_views must be >= 3, got {n_views}")
    params = _synth_params(seed)
    scene_id = f"synth-{seed:04d}"
    entries = []
    images: dict[int, np.ndarray] = {}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    rig = synth_view_angles(n_views, seed if rig_seed is None else rig_seed)
    for view, (theta, phi) in enumerate(rig):
        # Snap to the 8-bit grid so in-memory and PNG round-trip pixels agree.
        img = np.round(render_synth_view(theta, phi, grid_size, params) * 255.0) / 255.0
        images[view] = img
        path = ""
        if out_dir is not None:
            path = os.path.join(out_dir, f"view_{view:03d}.png")
            save_image(path, img)
        entries.append(
            ManifestEntry(
                image_path=path,
                pose=CameraPose.from_spherical(theta, phi, SYNTH_RADIUS),
                view_index=view,
            )
        )
    manifest = SceneManifest(
        scene_id=scene_id, entries=tuple(entries), image_size=(grid_size, grid_size)
    )
    if out_dir is not None:
        save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest, images
