"""Token mappers: small MLPs from the Fourier encoding to word-embedding space.

A mapper is ``blocks`` repetitions of (affine map, layer normalization, leaky
rectifier) followed by an affine head. The view mapper's head emits one
word-space vector, rescaled to the L2 norm of a reference word's embedding.
A scene mapper's head is twice as wide; its output is chunked in two, the
first half norm-scaled as above to form the scene token and the second half
scaled to unit norm and multiplied by ``bypass_alpha`` to form the bypass
vector that is added to the text-encoder *output* at the token's position.

Forward passes return caches so the training loop can backpropagate without a
framework; gradients are checked against central finite differences in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import derive_rng

LEAKY_SLOPE = 0.01
LN_EPS = 1e-5
DEGENERATE_EPS = 1e-12


class DegenerateTokenError(ValueError):
    """Raised when a raw mapper output has (near-)zero norm: norm scaling is undefined."""


def _accum(grads: dict[str, np.ndarray], key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = np.array(value, dtype=np.float64)


@dataclass(frozen=True)
class MapperConfig:
    embed_dim: int
    input_dim: int = 64
    hidden_dim: int = 64
    blocks: int = 2
    bypass: bool = False
    bypass_alpha: float = 0.2
    reference_word: str = "object"

    def __post_init__(self):
        if self.embed_dim <= 0 or self.input_dim <= 0 or self.hidden_dim <= 0 or self.blocks < 1:
            raise ValueError("mapper dimensions must be positive")
        if self.bypass_alpha < 0:
            raise ValueError("bypass_alpha must be >= 0")

    @property
    def head_dim(self) -> int:
        return 2 * self.embed_dim if self.bypass else self.embed_dim

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "blocks": self.blocks,
            "bypass": self.bypass,
            "bypass_alpha": self.bypass_alpha,
            "reference_word": self.reference_word,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MapperConfig":
        return cls(**d)


@dataclass(frozen=True)
class TokenPrediction:
    """A word-space token (norm-scaled) and, for scene mappers, its bypass vector."""

    token: np.ndarray
    bypass: np.ndarray | None = None


def parameter_count(config: MapperConfig) -> int:
    """Exact trainable parameter count implied by the architecture."""
    total = 0
    fan_in = config.input_dim
    for _ in range(config.blocks):
        total += fan_in * config.hidden_dim + config.hidden_dim  # affine
        total += 2 * config.hidden_dim  # layer-norm gain + bias
        fan_in = config.hidden_dim
    total += config.hidden_dim * config.head_dim + config.head_dim  # head
    return total


def _glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class TokenMapper:
    """MLP weights plus forward/backward passes. Parameters live in ``params``."""

    def __init__(self, config: MapperConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @property
    def param_names(self) -> list[str]:
        return sorted(self.params)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- forward -----------------------------------------------------------

    def forward_raw(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        """Head output (pre norm-scaling) and the cache needed for backward."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape[0] != self.config.input_dim:
            raise ValueError(
                f"encoder output length {x.shape[0]} does not match mapper input_dim "
                f"{self.config.input_dim}"
            )
        cache: dict = {"inputs": [], "pre_ln": [], "xhat": [], "inv_std": [], "pre_act": []}
        h = x
        for b in range(self.config.blocks):
            w = self.params[f"block{b}.weight"]
            bias = self.params[f"block{b}.bias"]
            gain = self.params[f"block{b}.ln_gain"]
            beta = self.params[f"block{b}.ln_bias"]
            a = w @ h + bias
            mu = a.mean()
            inv_std = 1.0 / np.sqrt(a.var() + LN_EPS)
            xhat = (a - mu) * inv_std
            ln = gain * xhat + beta
            cache["inputs"].append(h)
            cache["pre_ln"].append(a)
            cache["xhat"].append(xhat)
            cache["inv_std"].append(inv_std)
            cache["pre_act"].append(ln)
            h = np.where(ln > 0, ln, LEAKY_SLOPE * ln)
        raw = self.params["head.weight"] @ h + self.params["head.bias"]
        cache["head_input"] = h
        cache["raw"] = raw
        return raw, cache

    def backward_raw(
        self, cache: dict, d_raw: np.ndarray, grads: dict[str, np.ndarray], prefix: str = ""
    ) -> None:
        """Accumulate d(loss)/d(params) into ``grads`` given d(loss)/d(raw).

        Keys are ``prefix + name``; missing entries are created on first touch.
        """
        h = cache["head_input"]
        _accum(grads, prefix + "head.weight", np.outer(d_raw, h))
        _accum(grads, prefix + "head.bias", d_raw)
        dh = self.params["head.weight"].T @ d_raw
        for b in reversed(range(self.config.blocks)):
            ln = cache["pre_act"][b]
            d_ln = dh * np.where(ln > 0, 1.0, LEAKY_SLOPE)
            xhat = cache["xhat"][b]
            _accum(grads, f"{prefix}block{b}.ln_gain", d_ln * xhat)
            _accum(grads, f"{prefix}block{b}.ln_bias", d_ln)
            d_xhat = d_ln * self.params[f"block{b}.ln_gain"]
            inv_std = cache["inv_std"][b]
            da = inv_std * (d_xhat - d_xhat.mean() - xhat * np.mean(d_xhat * xhat))
            _accum(grads, f"{prefix}block{b}.weight", np.outer(da, cache["inputs"][b]))
            _accum(grads, f"{prefix}block{b}.bias", da)
            dh = self.params[f"block{b}.weight"].T @ da


def _norm_scale(raw: np.ndarray, target_norm: float) -> tuple[np.ndarray, float]:
    n = float(np.linalg.norm(raw))
    if n < DEGENERATE_EPS:
        raise DegenerateTokenError(
            "degenerate token direction: raw mapper output has near-zero norm"
        )
    return raw * (target_norm / n), n


def _norm_scale_backward(
    raw: np.ndarray, norm: float, target_norm: float, d_out: np.ndarray
) -> np.ndarray:
    # d/draw of raw * target/||raw||
    return (target_norm / norm) * (d_out - raw * (float(raw @ d_out) / norm**2))


def predict_view_token(mapper: TokenMapper, enc_out: np.ndarray, ref_norm: float) -> TokenPrediction:
    """Run the view mapper and rescale its output to the reference-word norm."""
    if mapper.config.bypass:
        raise ValueError("view mapper must not use a bypass head")
    if not ref_norm > 0:
        raise ValueError(f"reference norm must be positive, got {ref_norm}")
    raw, _ = mapper.forward_raw(enc_out)
    token, _ = _norm_scale(raw, ref_norm)
    return TokenPrediction(token=token)


def predict_scene_token(mapper: TokenMapper, enc_out: np.ndarray, ref_norm: float) -> TokenPrediction:
    """Run a bypass-enabled scene mapper: (token, bypass) from the chunked head."""
    if not mapper.config.bypass:
        raise ValueError("scene mapper requires a bypass head")
    if not ref_norm > 0:
        raise ValueError(f"reference norm must be positive, got {ref_norm}")
    raw, _ = mapper.forward_raw(enc_out)
    d = mapper.config.embed_dim
    token, _ = _norm_scale(raw[:d], ref_norm)
    unit, _ = _norm_scale(raw[d:], 1.0)
    return TokenPrediction(token=token, bypass=mapper.config.bypass_alpha * unit)


def init_mapper(config: MapperConfig, seed: int) -> TokenMapper:
    """Variance-scaled uniform affine weights, zero biases, identity layer norm."""
    rng = derive_rng(seed, "mapper-init")
    params: dict[str, np.ndarray] = {}
    fan_in = config.input_dim
    for b in range(config.blocks):
        params[f"block{b}.weight"] = _glorot_uniform(rng, config.hidden_dim, fan_in)
        params[f"block{b}.bias"] = np.zeros(config.hidden_dim)
        params[f"block{b}.ln_gain"] = np.ones(config.hidden_dim)
        params[f"block{b}.ln_bias"] = np.zeros(config.hidden_dim)
        fan_in = config.hidden_dim
    params["head.weight"] = _glorot_uniform(rng, config.head_dim, config.hidden_dim)
    params["head.bias"] = np.zeros(config.head_dim)
    return TokenMapper(config, params)
