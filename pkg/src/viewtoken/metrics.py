"""Image quality metrics, NVS evaluation reports, and comparison grids.

PSNR is computed on [0, 1] images as 10*log10(1/MSE), capped at 100 dB when
the images are identical (avoids infinities in reports). SSIM follows the
standard formulation: luma conversion for RGB, local statistics under an
11x11 Gaussian window (sigma 1.5), stability constants C1=(0.01)^2 and
C2=(0.03)^2, averaged over valid window positions. Perceptual distance goes
through an adapter contract; CI uses a deterministic mock adapter built from
frozen random convolutional features, and reports always record the adapter
identity so mock numbers are never conflated with real ones.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .backend import DiffusionBackend
from .conditioning import MapperTokenSource, assemble_request, build_prompt
from .data import SceneManifest, SplitSpec, resize_image
from .geometry import classify_view, to_pose_vector
from .seeding import derive_key, derive_rng
from .training import Checkpoint, EVAL_TEMPLATE, VIEW_PLACEHOLDER

PSNR_CAP_DB = 100.0

_LUMA = np.array([0.299, 0.587, 0.114])


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; capped at 100 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def _to_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        return img @ _LUMA
    return img


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Mean local structural similarity over valid window positions."""
    a, b = _check_pair(a, b)
    x = _to_gray(a)
    y = _to_gray(b)
    if min(x.shape) < window:
        raise ValueError(f"image of shape {x.shape} is smaller than the {window}x{window} window")
    k = _gaussian_window(window, sigma)

    def smooth(img: np.ndarray) -> np.ndarray:
        out = ndimage.correlate1d(img, k, axis=0, mode="nearest")
        out = ndimage.correlate1d(out, k, axis=1, mode="nearest")
        half = window // 2
        return out[half:-half, half:-half]

    c1 = 0.01**2
    c2 = 0.03**2
    mu_x = smooth(x)
    mu_y = smooth(y)
    xx = smooth(x * x) - mu_x**2
    yy = smooth(y * y) - mu_y**2
    xy = smooth(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Perceptual distance adapter
# ---------------------------------------------------------------------------


class PerceptualAdapter:
    """Contract: a symmetric nonnegative distance with d(a, a) = 0.

    Real perceptual networks plug in behind this interface; the report always
    records ``identity`` so their numbers are attributable.
    """

    identity: str = "abstract"

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        raise NotImplementedError


def _conv2d(x: np.ndarray, kernels: np.ndarray, stride: int) -> np.ndarray:
    """x: (H, W, Cin); kernels: (k, k, Cin, Cout) -> (H', W', Cout)."""
    k = kernels.shape[0]
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(0, 1))
    windows = windows[::stride, ::stride]  # (H', W', Cin, k, k)
    return np.einsum("hwcij,ijco->hwo", windows, kernels)


class MockPerceptualAdapter(PerceptualAdapter):
    """Deterministic stand-in: distances between frozen random conv features.

    Two rectified convolution layers with channel-normalized activations,
    LPIPS-style; weights are frozen at construction from the seed.
    """

    identity = "mock-random-conv-v1"

    def __init__(self, seed: int = 0):
        rng = derive_rng(seed, "mock-perceptual")
        self.k1 = rng.standard_normal((5, 5, 3, 8)) / math.sqrt(5 * 5 * 3)
        self.k2 = rng.standard_normal((3, 3, 8, 8)) / math.sqrt(3 * 3 * 8)

    def _features(self, img: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(img, dtype=np.float64)
        if x.ndim == 2:
            x = np.repeat(x[..., None], 3, axis=2)
        f1 = np.maximum(_conv2d(x, self.k1, stride=2), 0.0)
        f2 = np.maximum(_conv2d(f1, self.k2, stride=2), 0.0)
        out = []
        for f in (f1, f2):
            norm = np.sqrt(np.sum(f**2, axis=-1, keepdims=True)) + 1e-10
            out.append(f / norm)
        return out

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        a, b = _check_pair(a, b)
        fa = self._features(a)
        fb = self._features(b)
        return float(sum(np.mean((x - y) ** 2) for x, y in zip(fa, fb)))


def lpips(adapter: PerceptualAdapter, a: np.ndarray, b: np.ndarray) -> float:
    """Perceptual distance through the configured adapter."""
    return adapter.distance(a, b)


# ---------------------------------------------------------------------------
# NVS evaluation
# ---------------------------------------------------------------------------


@dataclass
class PerViewMetrics:
    scene_id: str
    view_index: int
    psnr: float | None = None
    ssim: float | None = None
    lpips: float | None = None
    classification: str | None = None
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "view_index": self.view_index,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "lpips": self.lpips,
            "classification": self.classification,
            "error": self.error,
        }


@dataclass
class MetricsReport:
    per_view: list[PerViewMetrics]
    aggregates: dict[str, float]
    metadata: dict

    def to_json(self) -> dict:
        return {
            "per_view": [m.to_json() for m in self.per_view],
            "aggregates": self.aggregates,
            "metadata": self.metadata,
        }

    def to_json_str(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)

    def table(self) -> str:
        """Human-readable fixed-width table."""
        lines = [f"{'scene':>10} {'view':>5} {'psnr(dB)':>9} {'ssim':>7} {'lpips':>8}  class"]
        for m in self.per_view:
            if m.error:
                lines.append(f"{m.scene_id:>10} {m.view_index:>5} {'-':>9} {'-':>7} {'-':>8}  error: {m.error}")
                continue
            lp = f"{m.lpips:.4f}" if m.lpips is not None else "absent"
            lines.append(
                f"{m.scene_id:>10} {m.view_index:>5} {m.psnr:>9.3f} {m.ssim:>7.4f} {lp:>8}  {m.classification}"
            )
        agg = "  ".join(f"{k}={v:.4f}" for k, v in sorted(self.aggregates.items()))
        lines.append(f"mean: {agg}")
        return "\n".join(lines)


def _render_view(
    checkpoint: Checkpoint,
    backend: DiffusionBackend,
    scene: SceneManifest,
    view_index: int,
    global_seed: int,
    steps: int,
) -> np.ndarray:
    tokenizer = backend.tokenizer
    tokenizer.register_placeholder(VIEW_PLACEHOLDER)
    entry = scene.entry_for_view(view_index)
    pose_vec = to_pose_vector(entry.pose, checkpoint.pose_normalization)
    ref_word = checkpoint.view_mapper_config.reference_word
    ref_norm = checkpoint.ref_norms.get(ref_word) or backend.reference_norm(ref_word)
    view_src = MapperTokenSource(
        checkpoint.view_mapper(),
        checkpoint.view_encoder(),
        ref_norm,
        prefix="view",
        pose=pose_vec.values,
        trainable=False,
    )
    scene_src = None
    if scene.scene_id in checkpoint.scene_ids:
        placeholder = f"<scene-{scene.scene_id}>"
        tokenizer.register_placeholder(placeholder)
        scene_src = MapperTokenSource(
            checkpoint.scene_mapper(scene.scene_id),
            checkpoint.scene_encoder(),
            ref_norm,
            prefix="scene",
            trainable=False,
        )
        scene_ref = placeholder
    else:
        scene_ref = checkpoint.config.get("class_word", "object")
    resolved = build_prompt(EVAL_TEMPLATE, VIEW_PLACEHOLDER, scene_ref, tokenizer)
    request = assemble_request(resolved, view_source=view_src, scene_source=scene_src)
    # Per-view seed depends only on (global seed, scene, view): adding views
    # to an evaluation never perturbs existing renders.
    seed = derive_key(global_seed, "nvs-render", scene.scene_id, view_index)
    return backend.sample_image(request, steps=steps, seed=seed)


def evaluate_nvs(
    checkpoint: Checkpoint,
    scene: SceneManifest,
    split: SplitSpec,
    backend: DiffusionBackend,
    views: list[int],
    adapter: PerceptualAdapter | None = None,
    global_seed: int = 0,
    steps: int = 50,
) -> MetricsReport:
    """Render the requested views and score them against ground truth.

    Predictions are resized to the ground-truth resolution before scoring.
    Views whose ground-truth image cannot be read are recorded as per-view
    errors and excluded from the aggregates. Each view is annotated as an
    interpolation or extrapolation of the split's train views.
    """
    from .data import load_image  # local import to keep module load light

    train_poses = [
        e.pose for e in scene.entries if e.view_index in set(split.train_views)
    ]
    per_view: list[PerViewMetrics] = []
    for view in views:
        entry = scene.entry_for_view(view)
        classification = (
            classify_view(entry.pose, train_poses) if train_poses else None
        )
        try:
            truth = load_image(entry.image_path)
        except Exception as e:
            per_view.append(
                PerViewMetrics(
                    scene_id=scene.scene_id,
                    view_index=view,
                    classification=classification,
                    error=f"missing ground truth: {e}",
                )
            )
            continue
        pred = _render_view(checkpoint, backend, scene, view, global_seed, steps)
        if pred.shape != truth.shape:
            pred = resize_image(pred, truth.shape[:2])
        per_view.append(
            PerViewMetrics(
                scene_id=scene.scene_id,
                view_index=view,
                psnr=psnr(pred, truth),
                ssim=ssim(pred, truth),
                lpips=None if adapter is None else lpips(adapter, pred, truth),
                classification=classification,
            )
        )
    scored = [m for m in per_view if m.error is None]
    aggregates: dict[str, float] = {}
    if scored:
        aggregates["psnr"] = float(np.mean([m.psnr for m in scored]))
        aggregates["ssim"] = float(np.mean([m.ssim for m in scored]))
        if adapter is not None:
            aggregates["lpips"] = float(np.mean([m.lpips for m in scored]))
    metadata = {
        "scene_id": scene.scene_id,
        "view_regime": str(split.view_regime),
        "train_views": list(split.train_views),
        "checkpoint_digest": checkpoint.content_digest(),
        "backend_digest": checkpoint.backend_digest,
        "perceptual_adapter": None if adapter is None else adapter.identity,
        "global_seed": global_seed,
        "sample_steps": steps,
        "resolution_policy": "predictions resized to ground-truth resolution",
    }
    return MetricsReport(per_view=per_view, aggregates=aggregates, metadata=metadata)


# ---------------------------------------------------------------------------
# Comparison grids
# ---------------------------------------------------------------------------

_MARK_COLOR = np.array([1.0, 0.85, 0.1])  # top bar over train-view columns
_LABEL_HEIGHT = 14
_LABEL_WIDTH = 56
_MARK_HEIGHT = 3


def _label_strip(text: str, width: int, height: int) -> np.ndarray:
    img = Image.new("L", (width, height), 255)
    ImageDraw.Draw(img).text((2, 1), text, fill=0)
    return np.repeat(np.asarray(img, dtype=np.float64)[..., None] / 255.0, 3, axis=2)


def render_grid(
    images: list[list[np.ndarray]],
    row_labels: list[str] | None = None,
    col_labels: list[str] | None = None,
    marked_columns: tuple[int, ...] = (),
    gutter: int = 2,
) -> np.ndarray:
    """Compose a labeled grid of equally sized tiles into one image.

    Tiles are copied pixel-for-pixel (no resampling); labels and train-view
    column marks are drawn only in the margins. Raises on ragged input.
    """
    if not images or not images[0]:
        raise ValueError("grid must have at least one row and one column")
    rows = len(images)
    cols = len(images[0])
    if any(len(r) != cols for r in images):
        raise ValueError("ragged grid: all rows must have the same number of tiles")
    tiles = [[np.asarray(t, dtype=np.float64) for t in row] for row in images]
    th, tw = tiles[0][0].shape[:2]
    for row in tiles:
        for t in row:
            if t.shape[:2] != (th, tw) or t.ndim != 3 or t.shape[2] != 3:
                raise ValueError("all tiles must be (H, W, 3) images of one size")
    top = _LABEL_HEIGHT + _MARK_HEIGHT
    left = _LABEL_WIDTH if row_labels else 0
    height = top + rows * th + (rows - 1) * gutter
    width = left + cols * tw + (cols - 1) * gutter
    canvas = np.ones((height, width, 3))
    for j in range(cols):
        x0 = left + j * (tw + gutter)
        if col_labels and j < len(col_labels):
            canvas[0:_LABEL_HEIGHT, x0 : x0 + tw] = _label_strip(col_labels[j], tw, _LABEL_HEIGHT)
        if j in marked_columns:
            canvas[_LABEL_HEIGHT : _LABEL_HEIGHT + _MARK_HEIGHT, x0 : x0 + tw] = _MARK_COLOR
    for i in range(rows):
        y0 = top + i * (th + gutter)
        if row_labels and i < len(row_labels):
            canvas[y0 : y0 + th, 0:_LABEL_WIDTH] = resize_image(
                _label_strip(row_labels[i], _LABEL_WIDTH, _LABEL_HEIGHT), (th, _LABEL_WIDTH)
            )
        for j in range(cols):
            x0 = left + j * (tw + gutter)
            canvas[y0 : y0 + th, x0 : x0 + tw] = np.clip(tiles[i][j], 0.0, 1.0)
    return canvas
