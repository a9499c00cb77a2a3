"""Frozen diffusion backend interface and a deterministic differentiable mock.

The backend contract consumed by the rest of the library:

* ``encode_text(request, t, layer)`` builds the token-embedding sequence for a
  prompt, applies word-embedding overrides at placeholder positions, pads to
  77, runs the text encoder, then adds post-encoder bypass injections.
* ``denoise_loss(sample)`` returns the squared-error noise-prediction loss for
  one (latent, noise, timestep, conditioning) sample, with gradients flowing
  only into the request's trainable token sources; backend weights never
  receive gradients.
* ``sample_image(request, steps, seed)`` runs a deterministic reverse
  iteration and decodes an image.
* ``reference_norm(word)`` is the L2 norm of a vocabulary word's embedding.

``MockBackend`` implements the contract at desk scale with frozen random
weights. Its text encoder is a single linear map plus positional offsets
(column-wise, so override effects have closed forms), and its noise predictor
is

    eps_hat(z_t, c, t) = base_gain / sqrt(abar_t) * z_t + W @ meanpool(P @ c)

where ``c`` is the mean of the per-layer text encodings. The ``1/sqrt(abar_t)``
factor makes the optimal conditioning for a training image independent of the
timestep, and ``W`` maps through an orthonormal basis of low-frequency image
modes so that conditioning can express coherent image structure. All mixing
matrices are orthogonal (scaled), which keeps signal magnitudes exact and the
whole pipeline differentiable in closed form.

``RealBackendAdapter`` below documents the contract a production latent-
diffusion runtime must satisfy; this repository ships and tests against the
mock only.
"""

from __future__ import annotations

import abc
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .conditioning import ConditioningRequest, PAD_LENGTH, load_template_pool
from .seeding import derive_rng


class BackendError(RuntimeError):
    """A backend-runtime failure, surfaced with context."""


class VocabularyError(ValueError):
    """A word is not in the (mock) tokenizer's vocabulary."""


class PromptOverflowError(ValueError):
    """The tokenized prompt exceeds the padded sequence length."""


@dataclass(frozen=True)
class BackendDescriptor:
    """Dimensions and identity of a frozen backend."""

    embed_dim: int
    layer_count: int
    timestep_range: int
    latent_shape: tuple[int, int, int]
    image_shape: tuple[int, int, int]
    kind: str = "mock"
    frozen: bool = True

    def __post_init__(self):
        if min(self.embed_dim, self.layer_count, self.timestep_range) <= 0:
            raise ValueError("descriptor dimensions must be positive")
        if not self.frozen:
            raise ValueError("backends are frozen by contract")

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "layer_count": self.layer_count,
            "timestep_range": self.timestep_range,
            "latent_shape": list(self.latent_shape),
            "image_shape": list(self.image_shape),
            "kind": self.kind,
            "frozen": self.frozen,
        }


@dataclass
class LossSample:
    """One denoising-loss sample: clean latent, noise draw, timestep, conditioning."""

    latent: np.ndarray
    noise: np.ndarray
    timestep: int
    request: ConditioningRequest


class DiffusionBackend(abc.ABC):
    """Adapter contract for any diffusion runtime used behind this library.

    A real-runtime adapter must expose: descriptor discovery; token-level
    embedding override hooks applied *before* text encoding; additive
    injection hooks applied *after* text encoding; the noise-prediction loss
    with gradient pass-through to the override sources (runtime weights stay
    frozen); image-to-latent encoding; and a deterministic sampler defaulting
    to 50 solver steps. Model identifier and device come from the run config.
    """

    @property
    @abc.abstractmethod
    def descriptor(self) -> BackendDescriptor: ...

    @property
    @abc.abstractmethod
    def tokenizer(self): ...

    @abc.abstractmethod
    def token_embedding(self, token_id: int) -> np.ndarray: ...

    @abc.abstractmethod
    def encode_text(self, request: ConditioningRequest, t: int, layer: int) -> np.ndarray: ...

    @abc.abstractmethod
    def denoise_loss(
        self, sample: LossSample, grads: dict[str, np.ndarray] | None = None
    ) -> tuple[float, dict[str, np.ndarray]]: ...

    @abc.abstractmethod
    def sample_image(self, request: ConditioningRequest, steps: int, seed: int) -> np.ndarray: ...

    @abc.abstractmethod
    def reference_norm(self, word: str) -> float: ...

    @abc.abstractmethod
    def encode_image(self, image: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def weight_digest(self) -> str: ...


# ---------------------------------------------------------------------------
# Mock tokenizer
# ---------------------------------------------------------------------------

_PUNCT = ".,:;!?"


class MockTokenizer:
    """Whitespace tokenizer over a fixed small vocabulary plus placeholders.

    Words are lowercased and stripped of edge punctuation. Placeholder
    identifiers look like ``<view>`` and must be registered; they get fresh
    ids that never collide with real words.
    """

    BOS = 0
    EOS = 1
    PAD = 2

    def __init__(self, words: list[str]):
        self._words: dict[str, int] = {}
        for w in sorted(set(words)):
            self._words[w] = 3 + len(self._words)
        self._base_size = 3 + len(self._words)
        self._placeholders: dict[str, int] = {}

    @property
    def base_size(self) -> int:
        return self._base_size

    @staticmethod
    def is_placeholder_name(token: str | None) -> bool:
        return isinstance(token, str) and token.startswith("<") and token.endswith(">")

    def is_placeholder_id(self, token_id: int) -> bool:
        return token_id >= self._base_size

    def register_placeholder(self, name: str) -> int:
        if not self.is_placeholder_name(name):
            raise ValueError(f"placeholder identifiers must look like <name>, got {name!r}")
        if name not in self._placeholders:
            self._placeholders[name] = self._base_size + len(self._placeholders)
        return self._placeholders[name]

    def token_id(self, token: str) -> int:
        if self.is_placeholder_name(token):
            if token not in self._placeholders:
                raise VocabularyError(f"placeholder {token!r} is not registered")
            return self._placeholders[token]
        word = token.strip(_PUNCT).lower()
        if word not in self._words:
            raise VocabularyError(f"word not in vocabulary: {word!r}")
        return self._words[word]

    def encode(self, text: str) -> list[int]:
        ids = [self.BOS]
        for tok in text.split():
            cleaned = tok.strip(_PUNCT)
            if cleaned:
                ids.append(self.token_id(cleaned))
        ids.append(self.EOS)
        return ids

    def word_ids(self) -> dict[str, int]:
        return dict(self._words)


# ---------------------------------------------------------------------------
# Mock backend
# ---------------------------------------------------------------------------

# Words whose mock embeddings carry unit norm; everything else in the
# vocabulary is low-norm filler so prompts do not drown the token budget.
CONTENT_WORDS = (
    "object",
    "statue",
    "blob",
    "scene",
    "thing",
    "toy",
    "house",
    "car",
    "teddy",
    "bear",
)


@dataclass(frozen=True)
class MockBackendConfig:
    seed: int = 0
    embed_dim: int = 32
    layer_count: int = 2
    timestep_range: int = 100
    latent_shape: tuple[int, int, int] = (16, 16, 1)
    image_shape: tuple[int, int, int] = (16, 16, 3)
    beta_lo: float = 0.004
    beta_hi: float = 0.012
    base_gain: float = 1.4
    base_jitter: float = 0.05
    text_gain: float = 6.0
    text_rank: int = 24
    pool_gain: float = 5.0
    cond_gain: float = 130.0
    offset_scale: float = 0.01
    filler_norm: float = 0.05
    extra_words: tuple[str, ...] = ()


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Columns (rows >= cols) or rows (cols > rows) form an orthonormal set."""
    if rows >= cols:
        q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
        return q
    q, _ = np.linalg.qr(rng.standard_normal((cols, rows)))
    return q.T


def dct_modes(h: int, w: int, count: int) -> np.ndarray:
    """First ``count`` orthonormal 2-D DCT-II basis vectors, low frequency first.

    Returns shape (h*w, count); modes are ordered by (kx+ky, kx).
    """

    def axis_mode(n: int, k: int) -> np.ndarray:
        x = np.arange(n)
        c = math.sqrt((1.0 if k == 0 else 2.0) / n)
        return c * np.cos(math.pi * (2 * x + 1) * k / (2 * n))

    order = sorted(((kx + ky, kx, ky) for kx in range(h) for ky in range(w)))
    cols = []
    for _, kx, ky in order[:count]:
        cols.append(np.outer(axis_mode(h, kx), axis_mode(w, ky)).reshape(-1))
    return np.stack(cols, axis=1)


class MockBackend(DiffusionBackend):
    """Deterministic, frozen, differentiable stand-in for a latent-diffusion runtime."""

    def __init__(self, config: MockBackendConfig = MockBackendConfig()):
        self.config = config
        self._descriptor = BackendDescriptor(
            embed_dim=config.embed_dim,
            layer_count=config.layer_count,
            timestep_range=config.timestep_range,
            latent_shape=config.latent_shape,
            image_shape=config.image_shape,
            kind="mock",
        )
        words = set(CONTENT_WORDS) | set(config.extra_words)
        for template in load_template_pool():
            for tok in template.text.split():
                cleaned = tok.strip(_PUNCT)
                if cleaned and "{" not in cleaned:
                    words.add(cleaned.lower())
        self._tokenizer = MockTokenizer(sorted(words))

        d = config.embed_dim
        rng = derive_rng(config.seed, "mock-backend")
        # Word embeddings: unit norm for content words, low norm for filler.
        table = rng.standard_normal((self.tokenizer.base_size, d))
        table /= np.linalg.norm(table, axis=1, keepdims=True)
        for word, idx in self.tokenizer.word_ids().items():
            if word not in CONTENT_WORDS:
                table[idx] *= config.filler_norm
        table[[MockTokenizer.BOS, MockTokenizer.EOS, MockTokenizer.PAD]] = 0.0
        self.embeddings = table

        self.pos_offsets = config.offset_scale * rng.standard_normal((d, PAD_LENGTH))
        # Text encoder: scaled rank-deficient linear map. The null directions
        # let a fixed-norm token park excess magnitude without side effects.
        u = _orthogonal(rng, d, config.text_rank)
        v = _orthogonal(rng, config.text_rank, d)
        self.text_matrix = config.text_gain * (u @ v)
        self.pool_matrix = config.pool_gain * _orthogonal(rng, d, d)
        n_latent = int(np.prod(config.latent_shape))
        modes = dct_modes(config.latent_shape[0], config.latent_shape[1], d)
        if config.latent_shape[2] != 1:
            raise ValueError("mock backend expects a single-channel latent")
        self.cond_matrix = modes @ (config.cond_gain * _orthogonal(rng, d, d))
        assert self.cond_matrix.shape == (n_latent, d)
        # Base noise predictor: eps_base = base_gain / sqrt(abar_t) * z_t.
        self.base_gain = config.base_gain * (
            1.0 + config.base_jitter * rng.standard_normal(config.latent_shape)
        )

        self.betas = np.linspace(config.beta_lo, config.beta_hi, config.timestep_range)
        self.alpha_bar = np.cumprod(1.0 - self.betas)
        # Noise-to-signal ratio per timestep (index t-1 for timestep t).
        self.nsr = np.sqrt(1.0 - self.alpha_bar) / np.sqrt(self.alpha_bar)
        # Readout timestep for sampling: where the z_t coefficient of the
        # clean-latent estimate crosses zero.
        self.readout_t = int(np.argmin(np.abs(1.0 - config.base_gain * self.nsr))) + 1

        for arr in (
            self.embeddings,
            self.pos_offsets,
            self.text_matrix,
            self.pool_matrix,
            self.cond_matrix,
            self.base_gain,
            self.betas,
        ):
            arr.flags.writeable = False

    # -- descriptor & digests ------------------------------------------------

    @property
    def descriptor(self) -> BackendDescriptor:
        return self._descriptor

    @property
    def tokenizer(self) -> MockTokenizer:
        return self._tokenizer

    def weight_digest(self) -> str:
        """SHA-256 over all frozen weights; placeholder rows are always zero
        and excluded, so registering placeholders never changes the digest."""
        h = hashlib.sha256()
        for name, arr in (
            ("embeddings", self.embeddings),
            ("pos_offsets", self.pos_offsets),
            ("text_matrix", self.text_matrix),
            ("pool_matrix", self.pool_matrix),
            ("cond_matrix", self.cond_matrix),
            ("base_gain", self.base_gain),
            ("betas", self.betas),
        ):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()

    # -- embeddings ------------------------------------------------------------

    def token_embedding(self, token_id: int) -> np.ndarray:
        if self.tokenizer.is_placeholder_id(token_id):
            return np.zeros(self.config.embed_dim)
        return self.embeddings[token_id]

    def reference_norm(self, word: str) -> float:
        """L2 norm of the (first-token) embedding of a vocabulary word."""
        if self.tokenizer.is_placeholder_name(word):
            raise VocabularyError(f"reference word must be a real word, got placeholder {word!r}")
        ids = self.tokenizer.encode(word)
        if len(ids) < 3:
            raise VocabularyError(f"word {word!r} tokenizes to no tokens")
        return float(np.linalg.norm(self.token_embedding(ids[1])))

    # -- image <-> latent --------------------------------------------------------

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.shape != self.config.image_shape:
            raise ValueError(f"image shape {img.shape} != {self.config.image_shape}")
        luma = img.mean(axis=2)
        return (2.0 * luma - 1.0)[..., None]

    def decode_latent(self, latent: np.ndarray) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64).reshape(self.config.latent_shape)
        img = np.clip((z[..., 0] + 1.0) / 2.0, 0.0, 1.0)
        return np.repeat(img[..., None], 3, axis=2)

    # -- text encoding --------------------------------------------------------

    def _validate_t_layer(self, t: int, layer: int) -> None:
        if not 1 <= t <= self.config.timestep_range:
            raise ValueError(f"timestep {t} out of [1, {self.config.timestep_range}]")
        if not 0 <= layer < self.config.layer_count:
            raise ValueError(f"layer {layer} out of [0, {self.config.layer_count})")

    def encode_text(self, request: ConditioningRequest, t: int, layer: int) -> np.ndarray:
        """Embedding sequence with overrides, padded to 77, encoded, then injected."""
        self._validate_t_layer(t, layer)
        if request.pad_length > PAD_LENGTH:
            raise ValueError(f"pad length {request.pad_length} exceeds maximum {PAD_LENGTH}")
        ids = self.tokenizer.encode(request.prompt)
        if len(ids) > request.pad_length:
            raise PromptOverflowError(
                f"prompt overflow: {len(ids)} tokens > pad length {request.pad_length}"
            )
        d = self.config.embed_dim
        seq = np.zeros((d, request.pad_length))
        for i, token_id in enumerate(ids):
            seq[:, i] = self.token_embedding(token_id)
        seq[:, len(ids):] = self.token_embedding(MockTokenizer.PAD)[:, None]
        for pos, source in request.overrides.items():
            if not 0 <= pos < len(ids):
                raise ValueError(f"override position {pos} outside prompt of {len(ids)} tokens")
            seq[:, pos] = source.token_value(t, layer)
        out = self.text_matrix @ seq + self.pos_offsets[:, : request.pad_length]
        for pos, source in request.bypass_injections.items():
            if not 0 <= pos < len(ids):
                raise ValueError(f"injection position {pos} outside prompt of {len(ids)} tokens")
            out[:, pos] = out[:, pos] + source.bypass_value(t, layer)
        return out

    # -- denoising loss --------------------------------------------------------

    def _cond_pooled(self, request: ConditioningRequest, t: int) -> np.ndarray:
        encodings = [
            self.encode_text(request, t, layer) for layer in range(self.config.layer_count)
        ]
        c_avg = np.mean(encodings, axis=0)
        return self.pool_matrix @ c_avg.mean(axis=1)

    def predict_noise(self, z_t: np.ndarray, request: ConditioningRequest, t: int) -> np.ndarray:
        pooled = self._cond_pooled(request, t)
        cond = (self.cond_matrix @ pooled).reshape(self.config.latent_shape)
        abar = self.alpha_bar[t - 1]
        return self.base_gain / math.sqrt(abar) * z_t + cond

    def noise_latent(self, latent: np.ndarray, noise: np.ndarray, t: int) -> np.ndarray:
        abar = self.alpha_bar[t - 1]
        return math.sqrt(abar) * latent + math.sqrt(1.0 - abar) * noise

    def denoise_loss(
        self, sample: LossSample, grads: dict[str, np.ndarray] | None = None
    ) -> tuple[float, dict[str, np.ndarray]]:
        """Mean squared noise-prediction error and gradients for token sources.

        Gradients accumulate into ``grads`` (created when omitted) under each
        source's parameter prefix. Backend weights receive none by
        construction; frozen sources skip accumulation.
        """
        t = int(sample.timestep)
        if not 1 <= t <= self.config.timestep_range:
            raise ValueError(f"timestep {t} out of [1, {self.config.timestep_range}]")
        if grads is None:
            grads = {}
        z0 = np.asarray(sample.latent, dtype=np.float64).reshape(self.config.latent_shape)
        eps = np.asarray(sample.noise, dtype=np.float64).reshape(self.config.latent_shape)
        z_t = self.noise_latent(z0, eps, t)
        eps_hat = self.predict_noise(z_t, sample.request, t)
        resid = eps_hat - eps
        n = resid.size
        loss = float(np.mean(resid**2))

        d_cond = (2.0 / n) * resid.reshape(-1)
        d_pooled = self.cond_matrix.T @ d_cond
        # meanpool over columns, then mean over layers
        d_col = (self.pool_matrix.T @ d_pooled) / sample.request.pad_length
        d_col_layer = d_col / self.config.layer_count
        d_override = self.text_matrix.T @ d_col_layer
        for layer in range(self.config.layer_count):
            for pos, source in sample.request.overrides.items():
                source.backprop_token(t, layer, d_override, grads)
            for pos, source in sample.request.bypass_injections.items():
                source.backprop_bypass(t, layer, d_col_layer, grads)
        return loss, grads

    # -- sampling ---------------------------------------------------------------

    def sample_image(self, request: ConditioningRequest, steps: int, seed: int) -> np.ndarray:
        """Deterministic reverse iteration from pure noise, decoded to an image.

        The iteration follows the noise schedule from the final timestep down
        to the readout timestep (where the clean-latent estimate is dominated
        by the conditioning) and returns the decoded estimate there. Solver
        fidelity is out of scope; the contract is determinism plus dependence
        on the conditioning.
        """
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        rng = derive_rng(seed, "mock-sample-init")
        z = rng.standard_normal(self.config.latent_shape)
        t_hi, t_lo = self.config.timestep_range, self.readout_t
        grid = np.unique(np.linspace(t_hi, t_lo, steps + 1).round().astype(int))[::-1]
        z0_est = None
        for i, t in enumerate(grid):
            t = int(t)
            eps_hat = self.predict_noise(z, request, t)
            abar = self.alpha_bar[t - 1]
            z0_est = (z - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)
            if i + 1 < len(grid):
                abar_next = self.alpha_bar[int(grid[i + 1]) - 1]
                z = math.sqrt(abar_next) * z0_est + math.sqrt(1.0 - abar_next) * eps_hat
        return self.decode_latent(z0_est)
