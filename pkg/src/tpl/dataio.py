"""File formats, dataset manifests, and the seeded synthetic-data generator.

Embeddings travel as a small binary format (magic ``TPLE``); annotations and
manifests are JSON. The generator produces ground-truth-warped copies of one
base progression signal, so alignment claims can be checked against the true
warp parameters.
"""

from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import cpab
from .ioutil import FormatError, atomic_write_bytes, atomic_write_text
from .sequences import EmbeddingSequence, LabelTrack

EMB_MAGIC = b"TPLE"
EMB_VERSION = 1
_DTYPE_F32 = 0
_FLAG_MASK = 1


@dataclass
class PhaseAnnotation:
    """Per-frame phase labels plus named key-event frames for one video."""

    video_id: str
    action: str
    length: int
    labels: LabelTrack
    key_events: dict[str, int] = field(default_factory=dict)
    split: str = "train"

    def __post_init__(self):
        if self.labels.length != self.length:
            raise ValueError(
                f"annotation {self.video_id!r}: {self.labels.length} labels "
                f"for declared length {self.length}"
            )
        if self.split not in ("train", "val"):
            raise ValueError(f"unknown split {self.split!r}")


def save_embedding(path, seq: EmbeddingSequence):
    flags = _FLAG_MASK if seq.mask is not None else 0
    header = EMB_MAGIC + struct.pack(
        "<HIIBB", EMB_VERSION, seq.channels, seq.length, _DTYPE_F32, flags
    )
    payload = np.ascontiguousarray(seq.data, dtype="<f4").tobytes()
    parts = [header, payload]
    if seq.mask is not None:
        parts.append((seq.mask > 0).astype(np.uint8).tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_embedding(path, id: str | None = None) -> EmbeddingSequence:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16:
        raise FormatError(f"embedding file shorter than header ({len(data)} bytes)", offset=len(data))
    if data[:4] != EMB_MAGIC:
        raise FormatError("bad embedding magic (expected TPLE)", offset=0)
    version, channels, length, dtype, flags = struct.unpack("<HIIBB", data[4:16])
    if version != EMB_VERSION:
        raise FormatError(f"unsupported embedding version {version}", offset=4)
    if channels == 0 or length == 0:
        raise FormatError(f"invalid embedding shape {channels}x{length}", offset=6)
    if dtype != _DTYPE_F32:
        raise FormatError(f"unknown dtype code {dtype}", offset=14)
    n = channels * length
    offset = 16
    if len(data) < offset + 4 * n:
        raise FormatError(
            f"truncated embedding payload: wanted {4 * n} bytes, {len(data) - offset} present",
            offset=len(data),
        )
    values = np.frombuffer(data[offset : offset + 4 * n], dtype="<f4").astype(float)
    values = values.reshape(channels, length)
    offset += 4 * n
    mask = None
    if flags & _FLAG_MASK:
        if len(data) < offset + n:
            raise FormatError(
                f"truncated mask chunk: wanted {n} bytes, {len(data) - offset} present",
                offset=len(data),
            )
        mask = np.frombuffer(data[offset : offset + n], dtype=np.uint8).astype(float)
        mask = mask.reshape(channels, length)
    seq_id = id if id is not None else os.path.splitext(os.path.basename(os.fspath(path)))[0]
    valid = values if mask is None else values[mask > 0]
    if not np.all(np.isfinite(valid)):
        raise FormatError(f"embedding {seq_id!r} has non-finite values in its valid region")
    return EmbeddingSequence(values, mask=mask, id=seq_id)


def save_annotation(path, ann: PhaseAnnotation):
    doc = {
        "video_id": ann.video_id,
        "action": ann.action,
        "length": ann.length,
        "phase_labels": [int(v) for v in ann.labels.labels],
        "key_events": {k: int(v) for k, v in ann.key_events.items()},
        "split": ann.split,
    }
    atomic_write_text(path, json.dumps(doc, indent=1))


def load_annotation(path) -> PhaseAnnotation:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"annotation {path}: invalid JSON ({e})") from e
    for key in ("video_id", "action", "length", "phase_labels"):
        if key not in doc:
            raise FormatError(f"annotation {path}: missing field {key!r}")
    labels = np.asarray(doc["phase_labels"], dtype=int)
    if labels.size != int(doc["length"]):
        raise FormatError(
            f"annotation {doc['video_id']!r}: {labels.size} phase labels for "
            f"declared length {doc['length']}"
        )
    if np.any(np.diff(labels) < 0) or (labels.size and labels[0] != labels.min()):
        warnings.warn(
            f"annotation {doc['video_id']!r}: phase labels are not contiguous "
            "non-decreasing segments",
            stacklevel=2,
        )
    return PhaseAnnotation(
        video_id=str(doc["video_id"]),
        action=str(doc["action"]),
        length=int(doc["length"]),
        labels=LabelTrack(labels),
        key_events={str(k): int(v) for k, v in doc.get("key_events", {}).items()},
        split=str(doc.get("split", "train")),
    )


@dataclass
class VideoEntry:
    id: str
    embedding_path: str
    annotation_path: str
    split: str


@dataclass
class DatasetManifest:
    classes: dict[str, list[VideoEntry]]
    root: str = "."


def save_manifest(path, manifest: DatasetManifest):
    doc = {
        "classes": [
            {
                "name": name,
                "videos": [
                    {
                        "id": v.id,
                        "embedding_path": v.embedding_path,
                        "annotation_path": v.annotation_path,
                        "split": v.split,
                    }
                    for v in videos
                ],
            }
            for name, videos in manifest.classes.items()
        ]
    }
    atomic_write_text(path, json.dumps(doc, indent=1))


def load_manifest(path) -> DatasetManifest:
    root = os.path.dirname(os.path.abspath(os.fspath(path)))
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    classes: dict[str, list[VideoEntry]] = {}
    seen_ids = set()
    for cls in doc.get("classes", []):
        videos = []
        for v in cls.get("videos", []):
            entry = VideoEntry(
                id=str(v["id"]),
                embedding_path=str(v["embedding_path"]),
                annotation_path=str(v["annotation_path"]),
                split=str(v.get("split", "train")),
            )
            if entry.id in seen_ids:
                raise FormatError(f"manifest {path}: duplicate video id {entry.id!r}")
            seen_ids.add(entry.id)
            for p in (entry.embedding_path, entry.annotation_path):
                if not os.path.exists(os.path.join(root, p)):
                    raise FormatError(f"manifest {path}: missing file {p!r}")
            videos.append(entry)
        if not any(v.split == "train" for v in videos):
            raise FormatError(f"manifest {path}: class {cls['name']!r} has no train videos")
        classes[str(cls["name"])] = videos
    if not classes:
        raise FormatError(f"manifest {path}: no classes")
    return DatasetManifest(classes=classes, root=root)


def load_class(
    manifest: DatasetManifest, name: str, split: str | None = None
) -> list[tuple[EmbeddingSequence, PhaseAnnotation]]:
    """Embedding/annotation pairs for one class, optionally filtered by split."""
    out = []
    for v in manifest.classes[name]:
        if split is not None and v.split != split:
            continue
        seq = load_embedding(os.path.join(manifest.root, v.embedding_path), id=v.id)
        ann = load_annotation(os.path.join(manifest.root, v.annotation_path))
        if ann.length != seq.length:
            raise FormatError(
                f"video {v.id!r}: annotation length {ann.length} != embedding length {seq.length}"
            )
        out.append((seq, ann))
    return out


# -- synthetic ground-truth data ------------------------------------------------


@dataclass
class SyntheticSpec:
    n_videos: int = 40
    channels: int = 8
    length_range: tuple[int, int] = (60, 140)
    n_phases: int = 2
    sigma_theta: float = 1.0
    sigma_noise: float = 0.05
    seed: int = 0
    action: str = "synthetic"

    def __post_init__(self):
        lo, hi = self.length_range
        self.length_range = (int(lo), int(hi))
        if self.length_range[0] < 16:
            raise ValueError("minimum length must be >= 16")
        if self.length_range[1] < self.length_range[0]:
            raise ValueError("empty length range")
        if self.sigma_theta < 0 or self.sigma_noise < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.n_phases < 2:
            raise ValueError("need at least 2 phases")
        if self.n_videos < 1 or self.channels < 1:
            raise ValueError("n_videos and channels must be positive")

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticSpec":
        known = {k: doc[k] for k in cls.__dataclass_fields__ if k in doc}
        if "length_range" in known:
            known["length_range"] = tuple(known["length_range"])
        return cls(**known)


@dataclass
class SyntheticDataset:
    videos: list[EmbeddingSequence]
    annotations: list[PhaseAnnotation]
    true_thetas: np.ndarray  # (N, 15)


N_WARP_CELLS = 16  # tessellation used for ground-truth warps


def _base_progression(rng: np.random.Generator):
    """Monotone ramp plus three gentle seeded bumps; curvature kept low so
    resampled copies agree to interpolation accuracy."""
    amps = rng.uniform(0.02, 0.05, 3) * rng.choice([-1.0, 1.0], 3)
    centers = rng.uniform(0.15, 0.85, 3)
    widths = rng.uniform(0.3, 0.45, 3)

    def p(t):
        t = np.asarray(t, dtype=float)
        out = t.astype(float).copy()
        for a, c, s in zip(amps, centers, widths):
            out = out + a * np.exp(-((t - c) ** 2) / (2 * s * s))
        return out

    return p


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Ground-truth-warped copies of one base signal, with phase labels.

    Each video samples the base progression at CPAB-warped positions, lifts it
    to ``channels`` dimensions through a fixed seeded affine+tanh map, and adds
    Gaussian noise. Labels follow the warped phase boundaries (uniform
    quantiles of progression time); the true warp parameters are returned for
    oracle checks. Every fourth video lands in the validation split.
    """
    rng = np.random.default_rng(spec.seed)
    tess = cpab.Tessellation(N_WARP_CELLS)
    p = _base_progression(rng)
    lift_w = rng.uniform(0.3, 0.6, spec.channels) * rng.choice([-1.0, 1.0], spec.channels)
    lift_b = rng.uniform(-0.5, 0.5, spec.channels)
    boundaries = np.arange(1, spec.n_phases) / spec.n_phases

    videos, annotations, thetas = [], [], []
    lo, hi = spec.length_range
    for i in range(spec.n_videos):
        length = int(rng.integers(lo, hi + 1))
        grid = np.linspace(0.0, 1.0, length)
        # Redraw warps that sample so unevenly a phase vanishes.
        for _ in range(64):
            theta = rng.normal(0.0, spec.sigma_theta, tess.n_params)
            tau = cpab.warp_points(theta, tess, grid)
            labels = np.searchsorted(boundaries, tau, side="right")
            if np.unique(labels).size == spec.n_phases:
                break
        signal = p(tau)
        data = np.tanh(lift_w[:, None] * signal[None, :] + lift_b[:, None])
        if spec.sigma_noise > 0:
            data = data + rng.normal(0.0, spec.sigma_noise, data.shape)
        vid = f"{spec.action}_{i:03d}"
        key_events = {"start": 0, "end": length - 1}
        for phase in range(1, spec.n_phases):
            key_events[f"phase{phase}_onset"] = int(np.argmax(labels >= phase))
        videos.append(EmbeddingSequence(data, id=vid))
        annotations.append(
            PhaseAnnotation(
                video_id=vid,
                action=spec.action,
                length=length,
                labels=LabelTrack(labels),
                key_events=key_events,
                split="val" if i % 4 == 3 else "train",
            )
        )
        thetas.append(theta)
    return SyntheticDataset(videos, annotations, np.stack(thetas))


def write_synthetic_dataset(out_dir, dataset: SyntheticDataset, action: str = "synthetic"):
    """Write embeddings, annotations, the manifest, and the true warps."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for seq, ann in zip(dataset.videos, dataset.annotations):
        emb_rel = f"{seq.id}.tple"
        ann_rel = f"{seq.id}.json"
        save_embedding(os.path.join(out_dir, emb_rel), seq)
        save_annotation(os.path.join(out_dir, ann_rel), ann)
        entries.append(VideoEntry(seq.id, emb_rel, ann_rel, ann.split))
    manifest = DatasetManifest(classes={action: entries}, root=os.fspath(out_dir))
    save_manifest(os.path.join(out_dir, "manifest.json"), manifest)
    atomic_write_text(
        os.path.join(out_dir, "true_thetas.json"),
        json.dumps(
            {seq.id: [float(x) for x in th] for seq, th in zip(dataset.videos, dataset.true_thetas)},
            indent=1,
        ),
    )
    return os.path.join(out_dir, "manifest.json")
