"""Sequence containers and resampling/warping of sequences and label tracks.

Frame k of a length-L sequence sits at normalized time k/(L-1); both endpoints
are data points. Real-valued tracks are linearly interpolated, categorical
label tracks use nearest-neighbor lookup.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cpab import tess_for_theta, warp_points


@dataclass
class EmbeddingSequence:
    """Multi-channel per-frame feature sequence, channel-major (C, L)."""

    data: np.ndarray
    mask: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2:
            raise ValueError(f"data must be (channels, length), got shape {self.data.shape}")
        if self.length < 2:
            raise ValueError(f"sequence length must be >= 2, got {self.length}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=float)
            if self.mask.shape != self.data.shape:
                raise ValueError("mask shape must match data shape")
            if not np.all(np.isfinite(self.data[self.mask > 0])):
                raise ValueError(f"sequence {self.id!r} has non-finite values in valid region")
        elif not np.all(np.isfinite(self.data)):
            raise ValueError(f"sequence {self.id!r} has non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    def masked_data(self) -> np.ndarray:
        """Data with invalid entries zeroed (identity when no mask is set)."""
        return self.data if self.mask is None else self.data * self.mask

    def frame_mask(self) -> np.ndarray:
        """Per-frame validity: a frame is valid if any channel is valid there."""
        if self.mask is None:
            return np.ones(self.length)
        return self.mask.max(axis=0)


@dataclass
class LatentTrajectory:
    """Univariate latent sequence, optionally with a per-frame validity mask."""

    values: np.ndarray
    frame_mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1:
            raise ValueError("latent values must be 1-D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("latent trajectory has non-finite values")
        if self.frame_mask is not None:
            self.frame_mask = np.asarray(self.frame_mask, dtype=float)
            if self.frame_mask.shape != self.values.shape:
                raise ValueError("frame mask length must match values")

    @property
    def length(self) -> int:
        return self.values.size


@dataclass
class LabelTrack:
    """Per-frame integer phase labels."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if self.labels.ndim != 1:
            raise ValueError("labels must be 1-D")
        if np.any(self.labels < 0):
            raise ValueError("labels must be nonnegative")

    @property
    def length(self) -> int:
        return self.labels.size


def resample_array(values: np.ndarray, new_length: int) -> np.ndarray:
    """Linear resampling along the last axis onto new_length uniform positions."""
    if new_length < 2:
        raise ValueError(f"new_length must be >= 2, got {new_length}")
    length = values.shape[-1]
    pos = np.linspace(0.0, length - 1.0, new_length)
    return interp_at(values, pos)


def interp_at(values: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Linear interpolation of values (..., L) at fractional frame positions."""
    length = values.shape[-1]
    pos = np.clip(np.asarray(positions, dtype=float), 0.0, length - 1.0)
    lo = np.clip(np.floor(pos).astype(int), 0, length - 2)
    frac = pos - lo
    return (1.0 - frac) * values[..., lo] + frac * values[..., lo + 1]


def warp_positions(theta, in_length: int, out_length: int) -> np.ndarray:
    """Fractional source positions T^theta(k/(out-1)) * (in-1) for k = 0..out-1."""
    if out_length < 2:
        raise ValueError(f"out_length must be >= 2, got {out_length}")
    grid = np.linspace(0.0, 1.0, out_length)
    tau = warp_points(theta, tess_for_theta(theta), grid)
    return tau * (in_length - 1.0)


def resample(seq, new_length: int):
    """Linear resampling of a sequence or latent trajectory to a new length."""
    if isinstance(seq, EmbeddingSequence):
        mask = None if seq.mask is None else resample_array(seq.mask, new_length)
        return EmbeddingSequence(resample_array(seq.data, new_length), mask=mask, id=seq.id)
    if isinstance(seq, LatentTrajectory):
        fm = None if seq.frame_mask is None else resample_array(seq.frame_mask, new_length)
        return LatentTrajectory(resample_array(seq.values, new_length), frame_mask=fm)
    return resample_array(np.asarray(seq, dtype=float), new_length)


def apply_warp(seq, theta, out_length: int):
    """Compose a sequence with the warp: output k reads the input at T(k/(out-1))."""
    if isinstance(seq, EmbeddingSequence):
        pos = warp_positions(theta, seq.length, out_length)
        mask = None if seq.mask is None else interp_at(seq.mask, pos)
        return EmbeddingSequence(interp_at(seq.data, pos), mask=mask, id=seq.id)
    if isinstance(seq, LatentTrajectory):
        pos = warp_positions(theta, seq.length, out_length)
        fm = None if seq.frame_mask is None else interp_at(seq.frame_mask, pos)
        return LatentTrajectory(interp_at(seq.values, pos), frame_mask=fm)
    values = np.asarray(seq, dtype=float)
    pos = warp_positions(theta, values.shape[-1], out_length)
    return interp_at(values, pos)


def apply_warp_labels(track: LabelTrack, theta, out_length: int) -> LabelTrack:
    """Warp a categorical track by nearest-neighbor lookup at warped positions."""
    pos = warp_positions(theta, track.length, out_length)
    idx = np.clip(np.rint(pos).astype(int), 0, track.length - 1)
    return LabelTrack(track.labels[idx])


def zero_pad(seqs: list[EmbeddingSequence]) -> list[EmbeddingSequence]:
    """Pad all sequences with zeros to the maximum length, masking the padding."""
    if not seqs:
        raise ValueError("zero_pad needs at least one sequence")
    target = max(s.length for s in seqs)
    out = []
    for s in seqs:
        data = np.zeros((s.channels, target))
        data[:, : s.length] = s.data
        mask = np.zeros((s.channels, target))
        mask[:, : s.length] = 1.0 if s.mask is None else s.mask
        out.append(EmbeddingSequence(data, mask=mask, id=s.id))
    return out


def median_length(lengths) -> int:
    """Middle element of the sorted lengths; even counts take the lower middle."""
    lengths = sorted(int(v) for v in lengths)
    if not lengths:
        raise ValueError("median_length needs at least one length")
    return lengths[(len(lengths) - 1) // 2]
