"""Prompt templates and per-(timestep, layer) conditioning requests.

A prompt template contains one ``{VIEW}`` placeholder and optionally one
``{SCENE}`` placeholder (scene-only templates, used for the disentanglement
probe, carry a ``{SCENE}`` but no ``{VIEW}``). Placeholders resolve to fresh
tokenizer identifiers that never collide with real words. A conditioning
request carries, per placeholder position, a token source that predicts the
word-embedding override for any (t, layer) pair, and optionally a bypass
source whose vector is added to the text-encoder *output* at that position.

Token sources are pure given a mapper weight snapshot: re-evaluating the same
(t, layer) yields the same vectors, and overrides are re-predicted at every
denoising step and cross-attention layer.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import numpy as np

from .encoding import ConditioningInput, FourierEncoder
from .mappers import TokenMapper, _norm_scale, _norm_scale_backward

PAD_LENGTH = 77

TEMPLATE_KIND_STANDARD = "standard"
TEMPLATE_KIND_SCENE_ONLY = "scene-only"


@dataclass(frozen=True)
class PromptTemplate:
    text: str
    id: str = ""
    kind: str = TEMPLATE_KIND_STANDARD

    def __post_init__(self):
        n_view = self.text.count("{VIEW}")
        n_scene = self.text.count("{SCENE}")
        if self.kind == TEMPLATE_KIND_STANDARD:
            if n_view != 1:
                raise ValueError(
                    f"template {self.id!r} must contain exactly one {{VIEW}}, found {n_view}"
                )
        elif self.kind == TEMPLATE_KIND_SCENE_ONLY:
            if n_view != 0:
                raise ValueError(f"scene-only template {self.id!r} must not contain {{VIEW}}")
            if n_scene != 1:
                raise ValueError(f"scene-only template {self.id!r} must contain one {{SCENE}}")
        else:
            raise ValueError(f"unknown template kind {self.kind!r}")
        if n_scene > 1:
            raise ValueError(f"template {self.id!r} contains more than one {{SCENE}}")

    @property
    def has_scene(self) -> bool:
        return "{SCENE}" in self.text


def load_template_pool() -> list[PromptTemplate]:
    """The bundled text-augmentation pool, one template per line."""
    raw = importlib.resources.files("viewtoken").joinpath("templates.txt").read_text("utf-8")
    pool = []
    for i, line in enumerate(raw.splitlines()):
        line = line.strip()
        if line:
            pool.append(PromptTemplate(text=line, id=f"pool-{i:03d}"))
    return pool


def sample_text_template(
    rng: np.random.Generator, pool: list[PromptTemplate] | None = None
) -> PromptTemplate:
    """Uniform draw from the template pool."""
    if pool is None:
        pool = _default_pool()
    if not pool:
        raise ValueError("template pool is empty")
    return pool[int(rng.integers(0, len(pool)))]


_POOL_CACHE: list[PromptTemplate] | None = None


def _default_pool() -> list[PromptTemplate]:
    global _POOL_CACHE
    if _POOL_CACHE is None:
        _POOL_CACHE = load_template_pool()
    return _POOL_CACHE


@dataclass(frozen=True)
class ResolvedPrompt:
    """A template with placeholders substituted and token positions recorded."""

    text: str
    view_position: int | None
    scene_position: int | None


def build_prompt(
    template: PromptTemplate,
    view_token: str | None,
    scene: str | None,
    tokenizer,
) -> ResolvedPrompt:
    """Substitute placeholder identifiers and locate them in the token stream.

    ``scene`` is either a registered placeholder identifier (for scene-mapper
    conditioning) or a literal class word. Positions are indices into the
    backend tokenizer's output for the resolved text.
    """
    text = template.text
    if template.kind == TEMPLATE_KIND_STANDARD:
        if view_token is None:
            raise ValueError("standard template requires a view token identifier")
        text = text.replace("{VIEW}", view_token)
    if template.has_scene:
        if scene is None:
            raise ValueError(f"template {template.id!r} has a {{SCENE}} slot but no scene was given")
        text = text.replace("{SCENE}", scene)
    ids = tokenizer.encode(text)
    view_pos = None
    if template.kind == TEMPLATE_KIND_STANDARD:
        view_pos = ids.index(tokenizer.token_id(view_token))
    scene_pos = None
    if template.has_scene and tokenizer.is_placeholder_name(scene):
        scene_pos = ids.index(tokenizer.token_id(scene))
    return ResolvedPrompt(text=text, view_position=view_pos, scene_position=scene_pos)


class MapperTokenSource:
    """Predicts token (and bypass) overrides from a mapper + encoder snapshot.

    The forward pass is cached per (t, layer) so the backward pass can reuse
    intermediates. ``trainable=False`` turns backprop into a no-op, which is
    how frozen mappers are excluded from a regime's gradient set.
    """

    def __init__(
        self,
        mapper: TokenMapper,
        encoder: FourierEncoder,
        ref_norm: float,
        prefix: str,
        pose: np.ndarray | None = None,
        trainable: bool = True,
    ):
        if encoder.config.pose_dim > 0:
            pose_arr = np.asarray(pose, dtype=np.float64).reshape(-1) if pose is not None else None
            if pose_arr is None or pose_arr.shape[0] != encoder.config.pose_dim:
                got = 0 if pose_arr is None else pose_arr.shape[0]
                raise ValueError(
                    f"pose vector length {got} does not match view-encoder pose_dim "
                    f"{encoder.config.pose_dim}"
                )
            pose = pose_arr
        else:
            pose = None
        if not ref_norm > 0:
            raise ValueError(f"reference norm must be positive, got {ref_norm}")
        self.mapper = mapper
        self.encoder = encoder
        self.ref_norm = float(ref_norm)
        self.prefix = prefix
        self.pose = pose
        self.trainable = trainable
        self._cache: dict[tuple[int, int], dict] = {}

    def _forward(self, t: int, layer: int) -> dict:
        key = (int(t), int(layer))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        enc = self.encoder.encode(ConditioningInput(timestep=t, layer=layer, pose=self.pose))
        raw, cache = self.mapper.forward_raw(enc)
        cfg = self.mapper.config
        entry: dict = {"raw": raw, "mlp_cache": cache}
        if cfg.bypass:
            d = cfg.embed_dim
            token, tnorm = _norm_scale(raw[:d], self.ref_norm)
            unit, bnorm = _norm_scale(raw[d:], 1.0)
            entry.update(token=token, token_norm=tnorm, bypass=cfg.bypass_alpha * unit, bypass_norm=bnorm)
        else:
            token, tnorm = _norm_scale(raw, self.ref_norm)
            entry.update(token=token, token_norm=tnorm, bypass=None, bypass_norm=None)
        self._cache[key] = entry
        return entry

    def token_value(self, t: int, layer: int) -> np.ndarray:
        return self._forward(t, layer)["token"]

    def bypass_value(self, t: int, layer: int) -> np.ndarray:
        entry = self._forward(t, layer)
        if entry["bypass"] is None:
            raise ValueError("this source has no bypass head")
        return entry["bypass"]

    def backprop_token(self, t, layer, d_token: np.ndarray, grads: dict[str, np.ndarray]) -> None:
        if not self.trainable:
            return
        entry = self._forward(t, layer)
        cfg = self.mapper.config
        raw = entry["raw"]
        if cfg.bypass:
            d = cfg.embed_dim
            d_raw = np.zeros_like(raw)
            d_raw[:d] = _norm_scale_backward(raw[:d], entry["token_norm"], self.ref_norm, d_token)
        else:
            d_raw = _norm_scale_backward(raw, entry["token_norm"], self.ref_norm, d_token)
        self.mapper.backward_raw(entry["mlp_cache"], d_raw, grads, prefix=self.prefix + "/")

    def backprop_bypass(self, t, layer, d_bypass: np.ndarray, grads: dict[str, np.ndarray]) -> None:
        if not self.trainable:
            return
        entry = self._forward(t, layer)
        if entry["bypass"] is None:
            raise ValueError("this source has no bypass head")
        cfg = self.mapper.config
        d = cfg.embed_dim
        raw = entry["raw"]
        d_raw = np.zeros_like(raw)
        d_raw[d:] = _norm_scale_backward(
            raw[d:], entry["bypass_norm"], cfg.bypass_alpha, d_bypass
        )
        self.mapper.backward_raw(entry["mlp_cache"], d_raw, grads, prefix=self.prefix + "/")


class FreeEmbeddingSource:
    """A single unconstrained word embedding, constant in (t, layer).

    This is the classic textual-inversion parameterization, used as the
    calibration oracle for mapper training.
    """

    def __init__(self, embedding: np.ndarray, prefix: str, trainable: bool = True):
        self.embedding = np.array(embedding, dtype=np.float64)
        self.prefix = prefix
        self.trainable = trainable

    def token_value(self, t: int, layer: int) -> np.ndarray:
        return self.embedding

    def backprop_token(self, t, layer, d_token: np.ndarray, grads: dict[str, np.ndarray]) -> None:
        if not self.trainable:
            return
        key = self.prefix + "/embedding"
        if key in grads:
            grads[key] += d_token
        else:
            grads[key] = np.array(d_token, dtype=np.float64)


@dataclass
class ConditioningRequest:
    """A resolved prompt plus per-position override and injection sources."""

    prompt: str
    overrides: dict[int, MapperTokenSource | FreeEmbeddingSource] = field(default_factory=dict)
    bypass_injections: dict[int, MapperTokenSource] = field(default_factory=dict)
    pad_length: int = PAD_LENGTH


def assemble_request(
    resolved: ResolvedPrompt,
    view_source: MapperTokenSource | FreeEmbeddingSource | None = None,
    scene_source: MapperTokenSource | None = None,
    pad_length: int = PAD_LENGTH,
) -> ConditioningRequest:
    """Wire token sources to the placeholder positions of a resolved prompt.

    The scene source contributes both its token override and, when its mapper
    has a bypass head, a post-encoder injection at the same position.
    """
    overrides: dict[int, MapperTokenSource | FreeEmbeddingSource] = {}
    injections: dict[int, MapperTokenSource] = {}
    if resolved.view_position is not None:
        if view_source is None:
            raise ValueError("prompt has a view position but no view source was given")
        overrides[resolved.view_position] = view_source
    if resolved.scene_position is not None:
        if scene_source is None:
            raise ValueError("prompt has a scene position but no scene source was given")
        overrides[resolved.scene_position] = scene_source
        if scene_source.mapper.config.bypass:
            injections[resolved.scene_position] = scene_source
    return ConditioningRequest(
        prompt=resolved.text,
        overrides=overrides,
        bypass_injections=injections,
        pad_length=pad_length,
    )
