"""Training regimes, optimizer, and the checkpoint container.

Three regimes share one loop: single-scene optimization of the view mapper
against a literal class word; joint multi-scene pretraining of one view mapper
plus per-scene bypass-enabled scene mappers; and NVS fine-tuning of a fresh
scene mapper under a frozen pretrained view mapper. A fourth path optimizes a
classic free word embedding per training view (no mapper, no encoder) as the
calibration oracle that lower-bounds what a mapper can reach.

Determinism contract: every stochastic draw (view sampling, template choice,
noise, timestep, augmentation) comes from a stream keyed on content
(seed, purpose, step, slot), never on loop structure, so micro-batching and
gradient accumulation do not change which samples are drawn, and two runs with
the same (config, seed, data) produce bit-identical checkpoints.

Checkpoints are single-file containers: an 8-byte magic, a length-prefixed
JSON header (config, shapes, checksums — no timestamps), then raw
little-endian float64 array blocks. Every array is SHA-256 checksummed, and a
checkpoint records the digest of the frozen backend it was trained against;
loading against a different backend is a hard error.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .backend import DiffusionBackend, LossSample
from .conditioning import (
    MapperTokenSource,
    FreeEmbeddingSource,
    PromptTemplate,
    assemble_request,
    build_prompt,
    sample_text_template,
)
from .data import (
    AugmentationConfig,
    SceneManifest,
    augment,
    load_scene_images,
    resize_image,
    single_view_nvs_augmentations,
    three_view_nvs_augmentations,
)
from .encoding import EncoderConfig, FourierEncoder, scene_encoder_variant
from .geometry import (
    CameraPose,
    NormalizationStats,
    SphericalRanges,
    fit_normalization,
    to_pose_vector,
)
from .mappers import MapperConfig, TokenMapper, init_mapper
from .seeding import PRNG_ALGORITHM, derive_key, derive_rng

CHECKPOINT_MAGIC = b"VTCKPT01"
CHECKPOINT_FORMAT_VERSION = 1

VIEW_PLACEHOLDER = "<view>"

DEFAULT_STEPS_SINGLE_SCENE = 3000
DEFAULT_STEPS_PRETRAIN = 100000
DEFAULT_STEPS_NVS_ONE_VIEW = 1500
DEFAULT_STEPS_NVS_THREE_VIEW = 3000

# Fixed template used for evaluation-time prompts (not for training, which
# samples from the augmentation pool).
EVAL_TEMPLATE = PromptTemplate(text="{VIEW}. a photo of a {SCENE}", id="eval")


class CheckpointError(ValueError):
    """Checkpoint file is unreadable, corrupt, or of the wrong version."""


class BackendMismatchError(CheckpointError):
    """Checkpoint was produced against a different frozen backend."""


class FrozenBackendViolation(RuntimeError):
    """Backend weights changed during a training run."""


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.09
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-2
    micro_batch: int = 3
    grad_accumulation: int = 3
    steps: int | None = None  # None: regime default
    seed: int = 0
    checkpoint_interval: int = 0  # 0: no mid-run snapshots
    class_word: str = "object"
    reference_word: str = "object"
    scene_sampling: str = "pairs"  # "pairs": uniform over (scene, view); "scenes": scene first
    bypass_alpha: float = 0.2
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augmentation: AugmentationConfig | None = None  # None: regime default
    log_path: str | None = None

    def __post_init__(self):
        if self.micro_batch < 1 or self.grad_accumulation < 1:
            raise ValueError("micro_batch and grad_accumulation must be >= 1")
        if self.scene_sampling not in ("pairs", "scenes"):
            raise ValueError("scene_sampling must be 'pairs' or 'scenes'")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.grad_accumulation

    def to_dict(self) -> dict:
        d = {
            "learning_rate": self.learning_rate,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "weight_decay": self.weight_decay,
            "micro_batch": self.micro_batch,
            "grad_accumulation": self.grad_accumulation,
            "steps": self.steps,
            "seed": self.seed,
            "checkpoint_interval": self.checkpoint_interval,
            "class_word": self.class_word,
            "reference_word": self.reference_word,
            "scene_sampling": self.scene_sampling,
            "bypass_alpha": self.bypass_alpha,
            "encoder": self.encoder.to_dict(),
            "augmentation": None
            if self.augmentation is None
            else {
                "rotation_degrees": self.augmentation.rotation_degrees,
                "rotation_fill": self.augmentation.rotation_fill,
                "rotation_prob": self.augmentation.rotation_prob,
                "crop_scale": list(self.augmentation.crop_scale),
                "jitter_strength": self.augmentation.jitter_strength,
                "jitter_prob": self.augmentation.jitter_prob,
                "blur_kernel": self.augmentation.blur_kernel,
                "blur_sigma": list(self.augmentation.blur_sigma),
                "blur_prob": self.augmentation.blur_prob,
                "out_size": None
                if self.augmentation.out_size is None
                else list(self.augmentation.out_size),
            },
            "log_path": self.log_path,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        enc = d.pop("encoder", None)
        aug = d.pop("augmentation", None)
        kwargs = dict(d)
        if enc is not None:
            kwargs["encoder"] = EncoderConfig.from_dict(enc)
        if aug is not None:
            aug = dict(aug)
            aug["crop_scale"] = tuple(aug["crop_scale"])
            aug["blur_sigma"] = tuple(aug["blur_sigma"])
            if aug.get("out_size") is not None:
                aug["out_size"] = tuple(aug["out_size"])
            kwargs["augmentation"] = AugmentationConfig(**aug)
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adaptive moments with decoupled weight decay; updates params in place."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float = 0.09,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    @classmethod
    def from_config(cls, params: dict[str, np.ndarray], config: TrainConfig) -> "AdamW":
        return cls(
            params,
            lr=config.learning_rate,
            beta1=config.adam_beta1,
            beta2=config.adam_beta2,
            eps=config.adam_eps,
            weight_decay=config.weight_decay,
        )

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= self.lr * self.weight_decay * p


def params_digest(arrays: dict[str, np.ndarray]) -> str:
    """SHA-256 over named arrays in canonical (sorted-name) order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype=np.float64).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict
    global_seed: int
    step: int
    regime: str
    pose_normalization: NormalizationStats | SphericalRanges
    view_encoder_config: EncoderConfig
    view_mapper_config: MapperConfig
    arrays: dict[str, np.ndarray]
    ref_norms: dict[str, float]
    backend_digest: str
    backend_descriptor: dict
    scene_encoder_config: EncoderConfig | None = None
    scene_mapper_config: MapperConfig | None = None
    scene_ids: list[str] = field(default_factory=list)
    format_version: int = CHECKPOINT_FORMAT_VERSION
    prng_algorithm: str = PRNG_ALGORITHM

    # -- reconstruction ------------------------------------------------------

    def view_encoder(self) -> FourierEncoder:
        return FourierEncoder(self.view_encoder_config, self.arrays["view_encoder/frequencies"])

    def scene_encoder(self) -> FourierEncoder:
        if self.scene_encoder_config is None:
            raise CheckpointError("checkpoint has no scene encoder")
        return FourierEncoder(self.scene_encoder_config, self.arrays["scene_encoder/frequencies"])

    def view_mapper(self) -> TokenMapper:
        params = {
            name.split("/", 1)[1]: self.arrays[name].copy()
            for name in self.arrays
            if name.startswith("view_mapper/")
        }
        return TokenMapper(self.view_mapper_config, params)

    def scene_mapper(self, scene_id: str) -> TokenMapper:
        if self.scene_mapper_config is None:
            raise CheckpointError("checkpoint has no scene mappers")
        prefix = f"scene_mapper:{scene_id}/"
        params = {
            name[len(prefix):]: self.arrays[name].copy()
            for name in self.arrays
            if name.startswith(prefix)
        }
        if not params:
            raise CheckpointError(f"checkpoint has no scene mapper for scene {scene_id!r}")
        return TokenMapper(self.scene_mapper_config, params)

    def view_mapper_digest(self) -> str:
        return params_digest(
            {k: v for k, v in self.arrays.items() if k.startswith("view_mapper/")}
        )

    def content_digest(self) -> str:
        return params_digest(self.arrays)


def _normalization_to_json(norm: NormalizationStats | SphericalRanges) -> dict:
    if isinstance(norm, NormalizationStats):
        return {
            "kind": "matrix",
            "entry_min": [float(x) for x in norm.entry_min],
            "entry_max": [float(x) for x in norm.entry_max],
            "source_split": norm.source_split,
        }
    return {
        "kind": "spherical",
        "theta_range": list(norm.theta_range),
        "phi_range": list(norm.phi_range),
    }


def _normalization_from_json(d: dict) -> NormalizationStats | SphericalRanges:
    if d["kind"] == "matrix":
        return NormalizationStats(
            entry_min=np.array(d["entry_min"]),
            entry_max=np.array(d["entry_max"]),
            source_split=d.get("source_split", ""),
        )
    return SphericalRanges(
        theta_range=tuple(d["theta_range"]), phi_range=tuple(d["phi_range"])
    )


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Write the single-file container atomically (temp file + rename)."""
    names = sorted(ckpt.arrays)
    blocks = []
    index = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype=np.float64)
        raw = arr.astype("<f8").tobytes()
        index.append(
            {
                "name": name,
                "dtype": "<f8",
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        blocks.append(raw)
        offset += len(raw)
    header = {
        "format_version": ckpt.format_version,
        "prng_algorithm": ckpt.prng_algorithm,
        "config": ckpt.config,
        "global_seed": ckpt.global_seed,
        "step": ckpt.step,
        "regime": ckpt.regime,
        "pose_normalization": _normalization_to_json(ckpt.pose_normalization),
        "view_encoder": ckpt.view_encoder_config.to_dict(),
        "scene_encoder": None
        if ckpt.scene_encoder_config is None
        else ckpt.scene_encoder_config.to_dict(),
        "view_mapper": ckpt.view_mapper_config.to_dict(),
        "scene_mapper": None
        if ckpt.scene_mapper_config is None
        else ckpt.scene_mapper_config.to_dict(),
        "scene_ids": list(ckpt.scene_ids),
        "ref_norms": {k: float(v) for k, v in ckpt.ref_norms.items()},
        "backend_digest": ckpt.backend_digest,
        "backend_descriptor": ckpt.backend_descriptor,
        "arrays": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for raw in blocks:
            f.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str, backend: DiffusionBackend | None = None) -> Checkpoint:
    """Read and verify a checkpoint container.

    Verifies the magic, format version, per-array SHA-256 checksums, and when
    ``backend`` is given, that the stored backend digest matches it.
    """
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < len(CHECKPOINT_MAGIC) + 8 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    hlen = int.from_bytes(data[8:16], "little")
    header_end = 16 + hlen
    if len(data) < header_end:
        raise CheckpointError(f"{path} is truncated (header)")
    try:
        header = json.loads(data[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has a corrupt header: {e}") from e
    version = header.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version} (expected {CHECKPOINT_FORMAT_VERSION})"
        )
    arrays: dict[str, np.ndarray] = {}
    body = data[header_end:]
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        raw = body[start : start + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path} is truncated (array {entry['name']!r})")
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"checksum mismatch in array {entry['name']!r}: corrupt checkpoint")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(
            entry["shape"]
        ).copy()
    ckpt = Checkpoint(
        config=header["config"],
        global_seed=header["global_seed"],
        step=header["step"],
        regime=header["regime"],
        pose_normalization=_normalization_from_json(header["pose_normalization"]),
        view_encoder_config=EncoderConfig.from_dict(header["view_encoder"]),
        scene_encoder_config=None
        if header["scene_encoder"] is None
        else EncoderConfig.from_dict(header["scene_encoder"]),
        view_mapper_config=MapperConfig.from_dict(header["view_mapper"]),
        scene_mapper_config=None
        if header["scene_mapper"] is None
        else MapperConfig.from_dict(header["scene_mapper"]),
        scene_ids=list(header["scene_ids"]),
        arrays=arrays,
        ref_norms=dict(header["ref_norms"]),
        backend_digest=header["backend_digest"],
        backend_descriptor=header["backend_descriptor"],
        format_version=version,
        prng_algorithm=header["prng_algorithm"],
    )
    if backend is not None and ckpt.backend_digest != backend.weight_digest():
        raise BackendMismatchError(
            "checkpoint was trained against a different backend (weight digest mismatch)"
        )
    return ckpt


# ---------------------------------------------------------------------------
# Training engine
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    loss: float
    learning_rate: float
    timestamp: float
    per_scene: dict[str, float] | None = None

    def to_json(self) -> dict:
        d = {
            "step": self.step,
            "loss": self.loss,
            "learning_rate": self.learning_rate,
            "timestamp": self.timestamp,
        }
        if self.per_scene is not None:
            d["per_scene"] = self.per_scene
        return d


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: list[StepRecord]
    warnings: list[str] = field(default_factory=list)


@dataclass
class _SceneData:
    manifest: SceneManifest
    images: dict[int, np.ndarray]
    pose_vectors: dict[int, np.ndarray]
    placeholder: str | None  # scene token identifier; None = use literal class word


def _default_augmentation(n_views: int) -> AugmentationConfig:
    # Strong crops for single-view optimization, reduced for few-view NVS.
    if 2 <= n_views <= 4:
        return three_view_nvs_augmentations()
    return single_view_nvs_augmentations()


def _prepare_image(img: np.ndarray, backend: DiffusionBackend) -> np.ndarray:
    shape = backend.descriptor.image_shape
    if img.shape != shape:
        img = resize_image(img, (shape[0], shape[1]))
    return img


def _fit_normalizer(
    scenes: list[SceneManifest], split_name: str
) -> NormalizationStats | SphericalRanges:
    kinds = {s.pose_kind for s in scenes}
    if len(kinds) > 1:
        raise ValueError("scenes mix pose parameterizations")
    if kinds == {"spherical"}:
        return SphericalRanges()
    poses = [e.pose for s in scenes for e in s.entries]
    return fit_normalization(poses, source_split=split_name)


def _pose_vectors(
    manifest: SceneManifest,
    normalizer: NormalizationStats | SphericalRanges,
    warnings: list[str],
) -> dict[int, np.ndarray]:
    out = {}
    for e in manifest.entries:
        pv = to_pose_vector(e.pose, normalizer)
        if pv.clamped:
            warnings.append(
                f"pose for scene {manifest.scene_id!r} view {e.view_index} was clamped to [-1, 1]"
            )
        out[e.view_index] = pv.values
    return out


def _write_log(path: str | None, records: list[StepRecord]) -> None:
    if path is None:
        return
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def _run_training(
    backend: DiffusionBackend,
    config: TrainConfig,
    steps: int,
    scene_data: dict[str, _SceneData],
    view_mapper: TokenMapper,
    view_encoder: FourierEncoder,
    view_trainable: bool,
    scene_mappers: dict[str, TokenMapper],
    scene_encoder: FourierEncoder | None,
    ref_norm: float,
    augmentation: AugmentationConfig,
) -> tuple[list[StepRecord], dict[str, np.ndarray]]:
    """The shared step loop; returns per-step records and the trainable dict."""
    tokenizer = backend.tokenizer
    tokenizer.register_placeholder(VIEW_PLACEHOLDER)
    for data in scene_data.values():
        if data.placeholder is not None:
            tokenizer.register_placeholder(data.placeholder)

    trainable: dict[str, np.ndarray] = {}
    if view_trainable:
        trainable.update({f"view/{k}": v for k, v in view_mapper.params.items()})
    for sid, mapper in scene_mappers.items():
        trainable.update({f"scene:{sid}/{k}": v for k, v in mapper.params.items()})
    opt = AdamW.from_config(trainable, config)

    scene_ids = sorted(scene_data)
    pairs = [(sid, v) for sid in scene_ids for v in sorted(scene_data[sid].images)]
    digest0 = backend.weight_digest()
    batch = config.effective_batch
    records: list[StepRecord] = []
    for k in range(steps):
        grads: dict[str, np.ndarray] = {}
        loss_sum = 0.0
        scene_loss: dict[str, list[float]] = {}
        for a in range(config.grad_accumulation):
            micro_grads: dict[str, np.ndarray] = {}
            for i in range(config.micro_batch):
                j = a * config.micro_batch + i
                rng_pick = derive_rng(config.seed, "pick", k, j)
                if config.scene_sampling == "pairs" or len(scene_ids) == 1:
                    sid, view = pairs[int(rng_pick.integers(0, len(pairs)))]
                else:
                    sid = scene_ids[int(rng_pick.integers(0, len(scene_ids)))]
                    views = sorted(scene_data[sid].images)
                    view = views[int(rng_pick.integers(0, len(views)))]
                data = scene_data[sid]
                template = sample_text_template(rng_pick)
                rng_aug = derive_rng(config.seed, sid, view, k)
                img = augment(data.images[view], augmentation, rng_aug)
                z0 = backend.encode_image(_prepare_image(img, backend))
                rng_noise = derive_rng(config.seed, "noise", k, j)
                t = int(rng_noise.integers(1, backend.descriptor.timestep_range + 1))
                eps = rng_noise.standard_normal(backend.descriptor.latent_shape)
                scene_ref = data.placeholder if data.placeholder is not None else config.class_word
                resolved = build_prompt(template, VIEW_PLACEHOLDER, scene_ref, tokenizer)
                view_src = MapperTokenSource(
                    view_mapper,
                    view_encoder,
                    ref_norm,
                    prefix="view",
                    pose=data.pose_vectors[view],
                    trainable=view_trainable,
                )
                scene_src = None
                if data.placeholder is not None:
                    scene_src = MapperTokenSource(
                        scene_mappers[sid],
                        scene_encoder,
                        ref_norm,
                        prefix=f"scene:{sid}",
                    )
                req = assemble_request(resolved, view_source=view_src, scene_source=scene_src)
                loss, _ = backend.denoise_loss(LossSample(z0, eps, t, req), micro_grads)
                loss_sum += loss
                scene_loss.setdefault(sid, []).append(loss)
            inv = 1.0 / batch
            for key, val in micro_grads.items():
                if key in grads:
                    grads[key] += inv * val
                else:
                    grads[key] = inv * val
        opt.step(grads)
        records.append(
            StepRecord(
                step=k,
                loss=loss_sum / batch,
                learning_rate=config.learning_rate,
                timestamp=time.time(),
                per_scene={s: float(np.mean(v)) for s, v in scene_loss.items()}
                if len(scene_ids) > 1
                else None,
            )
        )
        if config.checkpoint_interval and (k + 1) % config.checkpoint_interval == 0:
            if backend.weight_digest() != digest0:
                raise FrozenBackendViolation("backend weights changed mid-run")
    if backend.weight_digest() != digest0:
        raise FrozenBackendViolation("backend weights changed during training")
    return records, trainable


def _build_checkpoint(
    backend: DiffusionBackend,
    config: TrainConfig,
    steps: int,
    regime: str,
    normalizer,
    view_encoder: FourierEncoder,
    view_mapper: TokenMapper,
    scene_encoder: FourierEncoder | None,
    scene_mappers: dict[str, TokenMapper],
    scene_mapper_config: MapperConfig | None,
    ref_norm: float,
) -> Checkpoint:
    arrays: dict[str, np.ndarray] = {
        "view_encoder/frequencies": view_encoder.frequencies.copy(),
    }
    if scene_encoder is not None:
        arrays["scene_encoder/frequencies"] = scene_encoder.frequencies.copy()
    for name, arr in view_mapper.params.items():
        arrays[f"view_mapper/{name}"] = arr.copy()
    for sid, mapper in scene_mappers.items():
        for name, arr in mapper.params.items():
            arrays[f"scene_mapper:{sid}/{name}"] = arr.copy()
    cfg = config.to_dict()
    cfg["resolved_steps"] = steps
    return Checkpoint(
        config=cfg,
        global_seed=config.seed,
        step=steps,
        regime=regime,
        pose_normalization=normalizer,
        view_encoder_config=view_encoder.config,
        scene_encoder_config=None if scene_encoder is None else scene_encoder.config,
        view_mapper_config=view_mapper.config,
        scene_mapper_config=scene_mapper_config,
        scene_ids=sorted(scene_mappers),
        arrays=arrays,
        ref_norms={config.reference_word: ref_norm},
        backend_digest=backend.weight_digest(),
        backend_descriptor=backend.descriptor.to_dict(),
    )


def _resolve_encoder_config(config: TrainConfig, pose_dim: int) -> EncoderConfig:
    enc = config.encoder
    seed = enc.seed if enc.seed is not None else config.seed
    return replace(enc, pose_dim=pose_dim, seed=seed)


def _mapper_seed(config: TrainConfig, tag: str, *extra) -> int:
    return derive_key(config.seed, tag, *extra)


# ---------------------------------------------------------------------------
# Regimes
# ---------------------------------------------------------------------------


def train_single_scene(
    scene: SceneManifest,
    backend: DiffusionBackend,
    config: TrainConfig,
    images: dict[int, np.ndarray] | None = None,
) -> TrainResult:
    """Optimize a view mapper on one scene with a literal class word prompt."""
    if not scene.entries:
        raise ValueError("scene has no posed images")
    steps = config.steps if config.steps is not None else DEFAULT_STEPS_SINGLE_SCENE
    images = images if images is not None else load_scene_images(scene)
    warnings: list[str] = []
    normalizer = _fit_normalizer([scene], split_name=f"single:{scene.scene_id}")
    pose_dim = 2 if scene.pose_kind == "spherical" else 12
    view_encoder = FourierEncoder(_resolve_encoder_config(config, pose_dim))
    mapper_cfg = MapperConfig(
        embed_dim=backend.descriptor.embed_dim, reference_word=config.reference_word
    )
    view_mapper = init_mapper(mapper_cfg, _mapper_seed(config, "view-mapper"))
    ref_norm = backend.reference_norm(config.reference_word)
    aug = config.augmentation or _default_augmentation(len(scene.entries))
    scene_data = {
        scene.scene_id: _SceneData(
            manifest=scene,
            images=images,
            pose_vectors=_pose_vectors(scene, normalizer, warnings),
            placeholder=None,
        )
    }
    records, _ = _run_training(
        backend, config, steps, scene_data, view_mapper, view_encoder, True, {}, None,
        ref_norm, aug,
    )
    _write_log(config.log_path, records)
    ckpt = _build_checkpoint(
        backend, config, steps, "single-scene", normalizer, view_encoder, view_mapper,
        None, {}, None, ref_norm,
    )
    return TrainResult(checkpoint=ckpt, records=records, warnings=warnings)


def pretrain_multi_scene(
    scenes: list[SceneManifest],
    backend: DiffusionBackend,
    config: TrainConfig,
    images: dict[str, dict[int, np.ndarray]] | None = None,
) -> TrainResult:
    """Jointly optimize one view mapper and per-scene bypass scene mappers."""
    if len(scenes) < 2:
        raise ValueError(f"pretraining requires >= 2 scenes, got {len(scenes)}")
    ids = [s.scene_id for s in scenes]
    if len(set(ids)) != len(ids):
        raise ValueError("scene-id collision in pretraining set")
    steps = config.steps if config.steps is not None else DEFAULT_STEPS_PRETRAIN
    warnings: list[str] = []
    normalizer = _fit_normalizer(scenes, split_name="pretrain")
    pose_dim = 2 if scenes[0].pose_kind == "spherical" else 12
    view_encoder = FourierEncoder(_resolve_encoder_config(config, pose_dim))
    scene_encoder = scene_encoder_variant(view_encoder.config)
    embed_dim = backend.descriptor.embed_dim
    view_mapper = init_mapper(
        MapperConfig(embed_dim=embed_dim, reference_word=config.reference_word),
        _mapper_seed(config, "view-mapper"),
    )
    scene_mapper_cfg = MapperConfig(
        embed_dim=embed_dim,
        bypass=True,
        bypass_alpha=config.bypass_alpha,
        reference_word=config.reference_word,
    )
    scene_mappers = {
        s.scene_id: init_mapper(scene_mapper_cfg, _mapper_seed(config, "scene-mapper", s.scene_id))
        for s in scenes
    }
    ref_norm = backend.reference_norm(config.reference_word)
    aug = config.augmentation or _default_augmentation(
        min(len(s.entries) for s in scenes)
    )
    scene_data = {}
    for s in scenes:
        scene_data[s.scene_id] = _SceneData(
            manifest=s,
            images=(images or {}).get(s.scene_id) or load_scene_images(s),
            pose_vectors=_pose_vectors(s, normalizer, warnings),
            placeholder=f"<scene-{s.scene_id}>",
        )
    records, _ = _run_training(
        backend, config, steps, scene_data, view_mapper, view_encoder, True,
        scene_mappers, scene_encoder, ref_norm, aug,
    )
    _write_log(config.log_path, records)
    ckpt = _build_checkpoint(
        backend, config, steps, "pretrain", normalizer, view_encoder, view_mapper,
        scene_encoder, scene_mappers, scene_mapper_cfg, ref_norm,
    )
    return TrainResult(checkpoint=ckpt, records=records, warnings=warnings)


def finetune_nvs(
    scene: SceneManifest,
    pretrained: Checkpoint,
    backend: DiffusionBackend,
    config: TrainConfig,
    images: dict[int, np.ndarray] | None = None,
) -> TrainResult:
    """Train a fresh scene mapper against a frozen pretrained view mapper.

    Pose normalization reuses the stored stats; poses that clamp are recorded
    as warnings, not errors. The view mapper's weight digest is asserted
    unchanged by construction and rechecked after the run.
    """
    if pretrained.backend_digest != backend.weight_digest():
        raise BackendMismatchError(
            "pretrained checkpoint does not match this backend (weight digest mismatch)"
        )
    if config.steps is not None:
        steps = config.steps
    elif len(scene.entries) == 1:
        steps = DEFAULT_STEPS_NVS_ONE_VIEW
    else:
        steps = DEFAULT_STEPS_NVS_THREE_VIEW
    images = images if images is not None else load_scene_images(scene)
    warnings: list[str] = []
    normalizer = pretrained.pose_normalization
    view_mapper = pretrained.view_mapper()
    view_encoder = pretrained.view_encoder()
    view_digest_before = params_digest(view_mapper.params)
    if pretrained.scene_encoder_config is not None:
        scene_encoder = pretrained.scene_encoder()
    else:
        scene_encoder = scene_encoder_variant(view_encoder.config)
    embed_dim = backend.descriptor.embed_dim
    scene_mapper_cfg = pretrained.scene_mapper_config or MapperConfig(
        embed_dim=embed_dim,
        bypass=True,
        bypass_alpha=config.bypass_alpha,
        reference_word=config.reference_word,
    )
    scene_mapper = init_mapper(
        scene_mapper_cfg, _mapper_seed(config, "scene-mapper", scene.scene_id)
    )
    ref_word = pretrained.view_mapper_config.reference_word
    ref_norm = pretrained.ref_norms.get(ref_word) or backend.reference_norm(ref_word)
    aug = config.augmentation or _default_augmentation(len(scene.entries))
    scene_data = {
        scene.scene_id: _SceneData(
            manifest=scene,
            images=images,
            pose_vectors=_pose_vectors(scene, normalizer, warnings),
            placeholder=f"<scene-{scene.scene_id}>",
        )
    }
    records, _ = _run_training(
        backend, config, steps, scene_data, view_mapper, view_encoder, False,
        {scene.scene_id: scene_mapper}, scene_encoder, ref_norm, aug,
    )
    if params_digest(view_mapper.params) != view_digest_before:
        raise FrozenBackendViolation("view mapper changed during NVS fine-tuning")
    _write_log(config.log_path, records)
    ckpt = _build_checkpoint(
        backend, config, steps, "nvs-finetune", normalizer, view_encoder, view_mapper,
        scene_encoder, {scene.scene_id: scene_mapper}, scene_mapper_cfg, ref_norm,
    )
    return TrainResult(checkpoint=ckpt, records=records, warnings=warnings)


# ---------------------------------------------------------------------------
# Free-embedding calibration oracle
# ---------------------------------------------------------------------------


@dataclass
class OracleResult:
    per_view_loss: dict[int, float]
    embeddings: dict[int, np.ndarray]
    records: dict[int, list[float]]


def oracle_free_embedding(
    scene: SceneManifest,
    backend: DiffusionBackend,
    config: TrainConfig,
    images: dict[int, np.ndarray] | None = None,
    eval_samples: int = 64,
) -> OracleResult:
    """Optimize one unconstrained word embedding per training view.

    No mapper, no encoder, no norm constraint: a dedicated embedding per view
    under the same loss and prompt augmentation. Weight decay is disabled so
    the oracle approaches the true per-view optimum; its evaluated loss is the
    lower bound mapper training is compared against.
    """
    steps = config.steps if config.steps is not None else 400
    images = images if images is not None else load_scene_images(scene)
    tokenizer = backend.tokenizer
    tokenizer.register_placeholder(VIEW_PLACEHOLDER)
    init_embedding = _class_word_embedding(backend, config.class_word)
    aug = config.augmentation or _default_augmentation(len(scene.entries))
    per_view_loss: dict[int, float] = {}
    embeddings: dict[int, np.ndarray] = {}
    records: dict[int, list[float]] = {}
    for entry in scene.entries:
        view = entry.view_index
        emb = init_embedding.copy()
        params = {"free/embedding": emb}
        opt = AdamW.from_config(params, config)
        opt.weight_decay = 0.0
        losses = []
        batch = config.effective_batch
        for k in range(steps):
            grads: dict[str, np.ndarray] = {}
            loss_sum = 0.0
            for j in range(batch):
                rng_pick = derive_rng(config.seed, "oracle-pick", view, k, j)
                template = sample_text_template(rng_pick)
                rng_aug = derive_rng(config.seed, scene.scene_id, view, k)
                img = augment(images[view], aug, rng_aug)
                z0 = backend.encode_image(_prepare_image(img, backend))
                rng_noise = derive_rng(config.seed, "oracle-noise", view, k, j)
                t = int(rng_noise.integers(1, backend.descriptor.timestep_range + 1))
                eps = rng_noise.standard_normal(backend.descriptor.latent_shape)
                resolved = build_prompt(template, VIEW_PLACEHOLDER, config.class_word, tokenizer)
                src = FreeEmbeddingSource(emb, prefix="free")
                req = assemble_request(resolved, view_source=src)
                loss, _ = backend.denoise_loss(LossSample(z0, eps, t, req), grads)
                loss_sum += loss
            opt.step({k2: v / batch for k2, v in grads.items()})
            losses.append(loss_sum / batch)
        z0_eval = backend.encode_image(_prepare_image(images[view], backend))
        req = assemble_request(
            build_prompt(EVAL_TEMPLATE, VIEW_PLACEHOLDER, config.class_word, tokenizer),
            view_source=FreeEmbeddingSource(emb, prefix="free", trainable=False),
        )
        per_view_loss[view] = expected_denoise_loss(
            backend, req, z0_eval, n_samples=eval_samples, seed=config.seed
        )
        embeddings[view] = emb.copy()
        records[view] = losses
    return OracleResult(per_view_loss=per_view_loss, embeddings=embeddings, records=records)


def _class_word_embedding(backend: DiffusionBackend, word: str) -> np.ndarray:
    ids = backend.tokenizer.encode(word)
    return np.array(backend.token_embedding(ids[1]), dtype=np.float64)


def expected_denoise_loss(
    backend: DiffusionBackend,
    request,
    latent: np.ndarray,
    n_samples: int = 64,
    seed: int = 0,
) -> float:
    """Monte-Carlo estimate of the denoising loss over (t, noise) draws."""
    total = 0.0
    for i in range(n_samples):
        rng = derive_rng(seed, "loss-eval", i)
        t = int(rng.integers(1, backend.descriptor.timestep_range + 1))
        eps = rng.standard_normal(backend.descriptor.latent_shape)
        loss, _ = backend.denoise_loss(LossSample(latent, eps, t, request), {})
        total += loss
    return total / n_samples
