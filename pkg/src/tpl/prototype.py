"""Prototype construction, annotation transfer, synchronization, and retrieval.

A class prototype is the average of warped member sequences on the shared
timeline, labeled by the per-frame mode of the warped annotations. A sync map
rounds each video frame onto prototype time, which turns frame retrieval into
a windowed search instead of an all-pairs scan.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .ioutil import atomic_write_text
from .model import AlignmentResult, DmtaeModel, infer_alignment
from .sequences import EmbeddingSequence, LabelTrack, apply_warp, apply_warp_labels, warp_positions


def label_mode(stacked: np.ndarray) -> np.ndarray:
    """Per-column most frequent label; ties resolve to the smallest label."""
    stacked = np.asarray(stacked, dtype=int)
    n_labels = stacked.max() + 1
    out = np.empty(stacked.shape[1], dtype=int)
    for t in range(stacked.shape[1]):
        out[t] = np.bincount(stacked[:, t], minlength=n_labels).argmax()
    return out


@dataclass
class Prototype:
    """Averaged aligned representation of one action class."""

    embedding: np.ndarray       # (C, L_med)
    latent: np.ndarray          # (L_med,)
    labels: LabelTrack          # (L_med,)
    class_name: str = ""
    n_sources: int = 0

    @property
    def length(self) -> int:
        return self.embedding.shape[1]


def build_prototype(
    seqs: list[EmbeddingSequence],
    labels: list[LabelTrack],
    alignment: AlignmentResult,
    class_name: str = "",
) -> Prototype:
    if not seqs:
        raise ValueError("cannot build a prototype from no sequences")
    if len(alignment.thetas) != len(seqs):
        raise ValueError("alignment does not cover all sequences")
    proto_length = alignment.latent_prototype.size
    warped = [
        apply_warp(seq.masked_data(), theta, proto_length)
        for seq, theta in zip(seqs, alignment.thetas)
    ]
    warped_labels = np.stack(
        [apply_warp_labels(t, theta, proto_length).labels for t, theta in zip(labels, alignment.thetas)]
    )
    return Prototype(
        embedding=np.mean(warped, axis=0),
        latent=alignment.latent_prototype.copy(),
        labels=LabelTrack(label_mode(warped_labels)),
        class_name=class_name,
        n_sources=len(seqs),
    )


def propagate_labels(proto: Prototype, theta, target_length: int) -> LabelTrack:
    """Prototype labels carried onto a video's own timeline via the inverse warp."""
    return apply_warp_labels(proto.labels, -np.asarray(theta, dtype=float), target_length)


def save_prototype(path_base, proto: Prototype):
    """Tensor payload next to a JSON sidecar (labels and provenance)."""
    base = os.fspath(path_base)
    save_tensors(base + ".tplc", {"embedding": proto.embedding, "latent": proto.latent})
    atomic_write_text(
        base + ".json",
        json.dumps(
            {
                "labels": [int(v) for v in proto.labels.labels],
                "class": proto.class_name,
                "n_sources": proto.n_sources,
                "length": proto.length,
            },
            indent=1,
        ),
    )


def load_prototype(path_base) -> Prototype:
    base = os.fspath(path_base)
    tensors = load_tensors(base + ".tplc")
    with open(base + ".json", "r", encoding="utf-8") as f:
        side = json.load(f)
    return Prototype(
        embedding=tensors["embedding"],
        latent=tensors["latent"],
        labels=LabelTrack(np.asarray(side["labels"], dtype=int)),
        class_name=side.get("class", ""),
        n_sources=int(side.get("n_sources", 0)),
    )


@dataclass
class SyncEntry:
    video_id: str
    theta: np.ndarray
    frame_to_proto: np.ndarray  # (L_i,) int, non-decreasing


@dataclass
class SyncMap:
    proto_length: int
    entries: list[SyncEntry] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["video_id,frame,prototype_index"]
        for e in self.entries:
            for k, p in enumerate(e.frame_to_proto):
                lines.append(f"{e.video_id},{k},{int(p)}")
        return "\n".join(lines) + "\n"


def frame_index_map(theta, length: int, proto_length: int) -> np.ndarray:
    """Round each frame's warped position onto the prototype grid."""
    pos = warp_positions(theta, proto_length, length)
    return np.clip(np.rint(pos).astype(int), 0, proto_length - 1)


def synchronize(videos: list[EmbeddingSequence], model: DmtaeModel) -> SyncMap:
    """Predicted warps plus frame-to-prototype index maps for a video set."""
    alignment = infer_alignment(model, videos)
    proto_length = model.config.prototype_length
    entries = [
        SyncEntry(v.id, th.copy(), frame_index_map(th, v.length, proto_length))
        for v, th in zip(videos, alignment.thetas)
    ]
    return SyncMap(proto_length=proto_length, entries=entries)


@dataclass
class RetrievalResult:
    labels: LabelTrack
    seconds: float
    comparisons: int


class FramePool:
    """All training frames flattened in (video, frame) order."""

    def __init__(self, seqs: list[EmbeddingSequence], labels: list[LabelTrack]):
        if not seqs:
            raise ValueError("empty train set")
        self.features = np.concatenate([s.data.T for s in seqs], axis=0)  # (T, C)
        self.labels = np.concatenate([t.labels for t in labels])
        self.proto_time: np.ndarray | None = None

    def attach_sync(self, sync: SyncMap, seqs: list[EmbeddingSequence]):
        by_id = {e.video_id: e for e in sync.entries}
        self.proto_time = np.concatenate([by_id[s.id].frame_to_proto for s in seqs])

    def __len__(self):
        return self.features.shape[0]


def _nearest(pool_features: np.ndarray, query: np.ndarray) -> int:
    d = pool_features - query[None, :]
    return int(np.einsum("ij,ij->i", d, d).argmin())


def retrieve_full_knn(test: EmbeddingSequence, pool: FramePool) -> RetrievalResult:
    """Per test frame, the label of the nearest train frame over the whole pool."""
    start = time.perf_counter()
    out = np.empty(test.length, dtype=int)
    for k in range(test.length):
        out[k] = pool.labels[_nearest(pool.features, test.data[:, k])]
    elapsed = time.perf_counter() - start
    return RetrievalResult(LabelTrack(out), elapsed, test.length * len(pool))


def retrieve_synced(
    test: EmbeddingSequence,
    model: DmtaeModel,
    pool: FramePool,
    window: int = 1,
) -> RetrievalResult:
    """Nearest-frame labels restricted to train frames near the same prototype time.

    The test video is aligned once; each of its frames then searches only the
    train frames whose prototype index falls within ``window`` of its own.
    Empty windows fall back to the full pool.
    """
    if pool.proto_time is None:
        raise ValueError("pool has no synchronization times attached")
    start = time.perf_counter()
    z = model.encode(test)
    theta = model.predict_theta(z)
    tmap = frame_index_map(theta, test.length, model.config.prototype_length)
    order = np.argsort(pool.proto_time, kind="stable")
    sorted_times = pool.proto_time[order]
    out = np.empty(test.length, dtype=int)
    comparisons = 0
    for k in range(test.length):
        lo = np.searchsorted(sorted_times, tmap[k] - window, side="left")
        hi = np.searchsorted(sorted_times, tmap[k] + window, side="right")
        cand = np.sort(order[lo:hi])  # pool order, so ties break like the full scan
        if cand.size == 0:
            out[k] = pool.labels[_nearest(pool.features, test.data[:, k])]
            comparisons += len(pool)
            continue
        best = _nearest(pool.features[cand], test.data[:, k])
        out[k] = pool.labels[cand[best]]
        comparisons += cand.size
    elapsed = time.perf_counter() - start
    return RetrievalResult(LabelTrack(out), elapsed, comparisons)
