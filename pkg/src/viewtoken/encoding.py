"""Random Fourier feature encoding of (timestep, layer, pose) conditioning.

The encoder owns a frozen frequency matrix F of shape (m, D) where D is the
number of input scalars and the output dimension is 2m: the encoding of an
input vector v is [sin(F v), cos(F v)]. Frequencies for each input column are
drawn from a zero-mean normal whose standard deviation depends on the column's
role: pose components use ``bandwidth_pose``, the diffusion timestep uses
``bandwidth_timestep``, and the cross-attention layer index uses
``bandwidth_layer``. Column streams are derived independently from
(seed, column tag), so a timestep/layer-only encoder built from the same seed
shares those columns bit-for-bit with its pose-conditioned sibling.

Timestep and layer index enter unnormalized by default (the small timestep
bandwidth is calibrated against raw values on the order of the schedule
length); set ``normalize_timestep`` to feed t/T instead.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .seeding import derive_rng

# Column tags for the per-column frequency streams.
_TAG_TIMESTEP = 0
_TAG_LAYER = 1
_TAG_POSE_BASE = 2


@dataclass(frozen=True)
class EncoderConfig:
    output_dim: int = 64
    pose_dim: int = 12
    bandwidth_pose: float = 0.5
    bandwidth_timestep: float = 0.03
    bandwidth_layer: float = 2.0
    normalize_timestep: bool = False
    timestep_range: int = 1000  # only used when normalize_timestep is set
    seed: int = 0

    def __post_init__(self):
        if self.output_dim <= 0 or self.output_dim % 2 != 0:
            raise ValueError(f"output_dim must be a positive even integer, got {self.output_dim}")
        if self.pose_dim < 0:
            raise ValueError(f"pose_dim must be >= 0, got {self.pose_dim}")

    def to_dict(self) -> dict:
        return {
            "output_dim": self.output_dim,
            "pose_dim": self.pose_dim,
            "bandwidth_pose": self.bandwidth_pose,
            "bandwidth_timestep": self.bandwidth_timestep,
            "bandwidth_layer": self.bandwidth_layer,
            "normalize_timestep": self.normalize_timestep,
            "timestep_range": self.timestep_range,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass(frozen=True)
class ConditioningInput:
    """Raw inputs to the encoder: integer t and layer index, normalized pose."""

    timestep: int
    layer: int
    pose: np.ndarray | None = None


class FourierEncoder:
    """Frozen random-feature encoder; reconstruction from (seed, config) is exact."""

    def __init__(self, config: EncoderConfig, frequencies: np.ndarray | None = None):
        self.config = config
        self.input_dim = 2 + config.pose_dim
        self.num_frequencies = config.output_dim // 2
        if frequencies is None:
            frequencies = self._generate_frequencies(config)
        freq = np.asarray(frequencies, dtype=np.float64)
        if freq.shape != (self.num_frequencies, self.input_dim):
            raise ValueError(
                f"frequency matrix must have shape {(self.num_frequencies, self.input_dim)}, "
                f"got {freq.shape}"
            )
        freq = freq.copy()
        freq.flags.writeable = False
        self.frequencies = freq

    @staticmethod
    def _generate_frequencies(config: EncoderConfig) -> np.ndarray:
        m = config.output_dim // 2
        cols = []
        tags_sigmas = [(_TAG_TIMESTEP, config.bandwidth_timestep), (_TAG_LAYER, config.bandwidth_layer)]
        tags_sigmas += [(_TAG_POSE_BASE + i, config.bandwidth_pose) for i in range(config.pose_dim)]
        for tag, sigma in tags_sigmas:
            rng = derive_rng(config.seed, "fourier-column", tag)
            cols.append(sigma * rng.standard_normal(m))
        return np.stack(cols, axis=1)

    def input_vector(self, inp: ConditioningInput) -> np.ndarray:
        t = float(inp.timestep)
        if self.config.normalize_timestep:
            t = t / float(self.config.timestep_range)
        parts = [t, float(inp.layer)]
        if self.config.pose_dim > 0:
            pose = np.asarray(inp.pose, dtype=np.float64).reshape(-1)
            if pose.shape[0] != self.config.pose_dim:
                raise ValueError(
                    f"pose vector length {pose.shape[0]} does not match encoder pose_dim "
                    f"{self.config.pose_dim}"
                )
            parts = parts + list(pose)
        elif inp.pose is not None and np.asarray(inp.pose).size > 0:
            raise ValueError("this encoder takes no pose components")
        return np.array(parts, dtype=np.float64)

    def encode(self, inp: ConditioningInput) -> np.ndarray:
        """[sin(F v), cos(F v)] for v = [t, layer, pose...]; length output_dim."""
        v = self.input_vector(inp)
        proj = self.frequencies @ v
        return np.concatenate([np.sin(proj), np.cos(proj)])


def scene_encoder_variant(config: EncoderConfig) -> FourierEncoder:
    """Encoder over (timestep, layer) only: same bandwidths, no pose columns."""
    return FourierEncoder(replace(config, pose_dim=0))
