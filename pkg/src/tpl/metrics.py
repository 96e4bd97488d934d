"""Alignment-quality metrics: cycle-back consistency, label propagation,
phase classification, and rank correlation of matched frames."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .nn import AdamW, ParamTensor
from .prototype import Prototype, label_mode, propagate_labels
from .sequences import EmbeddingSequence, LabelTrack, apply_warp_labels


def cbc(labels: list[LabelTrack], thetas, proto_length: int) -> float:
    """Frame agreement after warping labels onto the shared timeline, taking
    the per-frame mode, and unwarping that consensus back to each video."""
    thetas = np.asarray(thetas, dtype=float)
    if len(labels) != len(thetas):
        raise ValueError("one theta per label track required")
    warped = np.stack(
        [apply_warp_labels(t, th, proto_length).labels for t, th in zip(labels, thetas)]
    )
    consensus = LabelTrack(label_mode(warped))
    accs = []
    for t, th in zip(labels, thetas):
        back = apply_warp_labels(consensus, -th, t.length)
        accs.append(float(np.mean(back.labels == t.labels)))
    return float(np.mean(accs))


def cbc_identity_padded(labels: list[LabelTrack]) -> float:
    """Cycle-back agreement for the zero-pad baseline: the shared timeline is
    the longest video, each video occupies its leading frames, and consensus
    at time t polls only videos still valid there."""
    target = max(t.length for t in labels)
    consensus = np.empty(target, dtype=int)
    n_labels = max(int(t.labels.max()) for t in labels) + 1
    for t in range(target):
        votes = [trk.labels[t] for trk in labels if t < trk.length]
        consensus[t] = np.bincount(votes, minlength=n_labels).argmax()
    accs = [float(np.mean(consensus[: trk.length] == trk.labels)) for trk in labels]
    return float(np.mean(accs))


def plp(
    proto: Prototype,
    test_labels: list[LabelTrack],
    test_thetas,
) -> float:
    """Mean frame accuracy of prototype labels propagated to held-out videos."""
    test_thetas = np.asarray(test_thetas, dtype=float)
    accs = []
    for track, theta in zip(test_labels, test_thetas):
        guess = propagate_labels(proto, theta, track.length)
        accs.append(float(np.mean(guess.labels == track.labels)))
    return float(np.mean(accs))


def phase_classification(
    features: np.ndarray,
    labels: np.ndarray,
    train_mask: np.ndarray,
    steps: int = 500,
    lr: float = 1e-2,
    weight_decay: float = 1e-4,
    seed: int = 0,
) -> float:
    """Test-split frame accuracy of a multinomial logistic regression.

    features: (F, C) per-frame features; labels: (F,) ints; train_mask selects
    the training frames, the rest are evaluated.
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=int)
    train_mask = np.asarray(train_mask, dtype=bool)
    xs, ys = features[train_mask], labels[train_mask]
    xt, yt = features[~train_mask], labels[~train_mask]
    classes = np.unique(ys)
    if classes.size < 2:
        raise ValueError("phase classification needs >= 2 classes in the train split")
    k = int(labels.max()) + 1
    # Standardize with train statistics for a well-conditioned optimization.
    mu = xs.mean(axis=0)
    sd = xs.std(axis=0) + 1e-8
    xs = (xs - mu) / sd
    xt = (xt - mu) / sd
    w = ParamTensor("w", np.zeros((k, xs.shape[1])))
    b = ParamTensor("b", np.zeros(k))
    opt = AdamW([w, b], lr=lr, weight_decay=weight_decay)
    onehot = np.eye(k)[ys]
    n = xs.shape[0]
    del seed  # zero init + full-batch steps: nothing stochastic to seed
    for _ in range(steps):
        logits = xs @ w.value.T + b.value
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w.grad += g.T @ xs
        b.grad += g.sum(axis=0)
        opt.step()
        opt.zero_grad()
    pred = (xt @ w.value.T + b.value).argmax(axis=1)
    return float(np.mean(pred == yt))


def kendall_tau(videos: list[EmbeddingSequence]) -> float:
    """Rank correlation of nearest-frame matches, averaged over ordered pairs.

    For each ordered pair (U, V), frame i of U matches its nearest frame j(i)
    in V; concordant/discordant index pairs of U score +1/-1 and ties score 0,
    normalized by the total pair count. Averaging ordered pairs makes the
    report direction-averaged by construction.
    """
    if len(videos) < 2:
        raise ValueError("kendall_tau needs at least 2 videos")
    for v in videos:
        if v.length < 2:
            raise ValueError(f"video {v.id!r} has fewer than 2 frames")
    taus = []
    for a in videos:
        for b in videos:
            if a is b:
                continue
            d = (
                np.einsum("ci,ci->i", a.data, a.data)[:, None]
                + np.einsum("cj,cj->j", b.data, b.data)[None, :]
                - 2.0 * a.data.T @ b.data
            )
            match = d.argmin(axis=1)
            diff = match[None, :] - match[:, None]
            upper = np.triu_indices(match.size, k=1)
            s = np.sign(diff[upper])
            n = match.size
            taus.append(float(s.sum() / (n * (n - 1) / 2)))
    return float(np.mean(taus))


@dataclass
class MetricReport:
    """Aggregate plus per-class metric values for one method run."""

    method: str
    cbc: float
    plp: float
    phase_accuracy: float
    kendall_tau: float
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    runtime_seconds: float = 0.0
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "method": self.method,
                "seed": self.seed,
                "cbc": self.cbc,
                "plp": self.plp,
                "phase_accuracy": self.phase_accuracy,
                "kendall_tau": self.kendall_tau,
                "per_class": self.per_class,
                "runtime_seconds": self.runtime_seconds,
            },
            indent=1,
        )

    CSV_HEADER = "method,class,seed,cbc,plp,phase_accuracy,kendall_tau,runtime_seconds"

    def to_csv_rows(self) -> list[str]:
        rows = []
        for name, vals in self.per_class.items():
            rows.append(
                f"{self.method},{name},{self.seed},{vals['cbc']:.6f},{vals['plp']:.6f},"
                f"{vals['phase_accuracy']:.6f},{vals['kendall_tau']:.6f},{self.runtime_seconds:.3f}"
            )
        return rows


def aggregate_report(
    method: str, per_class: dict[str, dict[str, float]], weights: dict[str, float], **kw
) -> MetricReport:
    """Frame-count-weighted average of per-class values."""
    total = sum(weights.values())
    agg = {}
    for key in ("cbc", "plp", "phase_accuracy", "kendall_tau"):
        agg[key] = sum(per_class[c][key] * weights[c] for c in per_class) / total
    return MetricReport(method=method, per_class=per_class, **agg, **kw)
