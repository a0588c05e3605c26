"""Binary descriptors, pyramid bookkeeping, and reference-point policies.

Descriptors are fixed-length bit vectors compared by Hamming distance.
Map points summarize their descriptor sets by a single reference
descriptor chosen either by appearance (least median distance to the
rest) or by geometry (held by the keyframe closest to the query).  The
depth-invariance interval bounds the query depths at which a point's
appearance stays within a configured octave shift.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass

import numpy as np

from .errors import DescriptorMismatchError, InvalidDepthError

DESCRIPTOR_BITS = 256

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


@dataclass(frozen=True)
class Descriptor:
    """A packed binary descriptor (8 bits per byte, MSB first)."""

    bits: bytes

    def __post_init__(self):
        if len(self.bits) == 0:
            raise ValueError("descriptor must not be empty")

    @property
    def n_bits(self) -> int:
        return 8 * len(self.bits)

    @classmethod
    def random(cls, rng: np.random.Generator, n_bits: int = DESCRIPTOR_BITS) -> "Descriptor":
        if n_bits % 8 != 0:
            raise ValueError("n_bits must be a multiple of 8")
        return cls(rng.integers(0, 256, n_bits // 8, dtype=np.uint8).tobytes())

    @classmethod
    def from_hex(cls, text: str) -> "Descriptor":
        return cls(bytes.fromhex(text))

    def to_hex(self) -> str:
        return self.bits.hex()

    def flipped(self, rng: np.random.Generator, rate: float) -> "Descriptor":
        """Copy with each bit independently flipped with probability rate."""
        if rate <= 0:
            return self
        arr = np.frombuffer(self.bits, dtype=np.uint8)
        flips = rng.random(self.n_bits) < rate
        mask = np.packbits(flips)
        return Descriptor(np.bitwise_xor(arr, mask).tobytes())

    def as_array(self) -> np.ndarray:
        return np.frombuffer(self.bits, dtype=np.uint8)


def hamming(a: Descriptor, b: Descriptor) -> int:
    """Number of differing bits between two equal-length descriptors."""
    if len(a.bits) != len(b.bits):
        raise DescriptorMismatchError(
            f"descriptor lengths differ: {a.n_bits} vs {b.n_bits} bits"
        )
    return (int.from_bytes(a.bits, "big") ^ int.from_bytes(b.bits, "big")).bit_count()


def pack_descriptors(descriptors) -> np.ndarray:
    """Stack descriptors into a (N, n_bytes) uint8 matrix."""
    if len(descriptors) == 0:
        return np.zeros((0, DESCRIPTOR_BITS // 8), dtype=np.uint8)
    return np.stack([d.as_array() for d in descriptors])


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs Hamming distances between two packed descriptor stacks."""
    if a.shape[-1] != b.shape[-1]:
        raise DescriptorMismatchError("packed descriptor widths differ")
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.int32)
    xor = np.bitwise_xor(a[:, None, :], b[None, :, :])
    return _POPCOUNT[xor].sum(axis=-1, dtype=np.int32)


@dataclass(frozen=True)
class PyramidConfig:
    """Image-pyramid geometry: per-octave scale and octave count."""

    scale: float = 1.2
    n_octaves: int = 8
    base_width: int = 640
    base_height: int = 480
    base_sigma2: float = 1.0

    def __post_init__(self):
        if self.scale <= 1.0:
            raise ValueError("pyramid scale must be greater than 1")
        if self.n_octaves < 1:
            raise ValueError("pyramid needs at least one octave")

    def sigma2_at(self, octave) -> np.ndarray:
        """Keypoint variance at a given octave (vectorized)."""
        return self.base_sigma2 * self.scale ** (2.0 * np.asarray(octave))

    def octave_for_depth(self, z, z_far: float) -> np.ndarray:
        """Detection octave implied by depth: closer points sit higher."""
        z = np.asarray(z, dtype=np.float64)
        raw = np.log(z_far / z) / math.log(self.scale)
        return np.clip(np.rint(raw), 0, self.n_octaves - 1).astype(np.int64)


@dataclass(frozen=True)
class DepthInterval:
    """Closed depth interval; empty (z_min > z_max) is a valid state."""

    z_min: float
    z_max: float

    @property
    def is_empty(self) -> bool:
        return self.z_min > self.z_max

    def contains(self, z: float) -> bool:
        return self.z_min <= z <= self.z_max


def _median(values) -> float:
    return statistics.median(values)


def select_reference_appearance_index(descriptors) -> int:
    """Index of the descriptor with least median distance to the others.

    Ties break to the lowest index.  A singleton wins by definition.
    """
    n = len(descriptors)
    if n == 0:
        raise ValueError("cannot select a reference from an empty set")
    if n == 1:
        return 0
    packed = pack_descriptors(descriptors)
    dist = hamming_matrix(packed, packed)
    best_idx, best_med = 0, math.inf
    for i in range(n):
        others = [int(dist[i, j]) for j in range(n) if j != i]
        med = _median(others)
        if med < best_med:
            best_idx, best_med = i, med
    return best_idx


def select_reference_appearance(descriptors) -> Descriptor:
    return descriptors[select_reference_appearance_index(descriptors)]


def select_reference_geometric_index(holders, query_translation) -> int:
    """Index of the holder whose keyframe translation is nearest the query.

    ``holders`` is a sequence of (keyframe_id, translation, descriptor);
    ties break to the lowest keyframe id.
    """
    if len(holders) == 0:
        raise ValueError("cannot select a reference from an empty holder list")
    q = np.asarray(query_translation, dtype=np.float64)
    best_idx, best_key = 0, None
    for idx, (kf_id, t_k, _desc) in enumerate(holders):
        d = float(np.linalg.norm(np.asarray(t_k, dtype=np.float64) - q))
        key = (d, kf_id)
        if best_key is None or key < best_key:
            best_idx, best_key = idx, key
    return best_idx


def select_reference_geometric(holders, query_translation) -> Descriptor:
    return holders[select_reference_geometric_index(holders, query_translation)][2]


def depth_invariance_interval(observed_depths, pyramid: PyramidConfig,
                              delta_l: int = 1) -> DepthInterval:
    """Depth range over which appearance stays within delta_l octaves.

    Intersects per-observation bands [z_k * s^(-dl-0.5), z_k * s^(dl+0.5)];
    the result may be empty when observations disagree.
    """
    depths = np.asarray(list(observed_depths), dtype=np.float64)
    if depths.size == 0:
        raise ValueError("depth interval needs at least one observation")
    if np.any(depths <= 0):
        raise InvalidDepthError("observed depths must be positive")
    if delta_l < 0:
        raise ValueError("delta_l must be non-negative")
    s = pyramid.scale
    lo = float(np.max(depths * s ** (-delta_l - 0.5)))
    hi = float(np.min(depths * s ** (delta_l + 0.5)))
    return DepthInterval(lo, hi)


def passes_depth_filter(z_q: float, interval: DepthInterval) -> bool:
    """Closed-interval membership test for a candidate depth."""
    if z_q <= 0:
        raise InvalidDepthError("query depth must be positive")
    return interval.contains(z_q)
