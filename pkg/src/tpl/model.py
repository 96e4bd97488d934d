"""Alignment autoencoder for variable-length multi-channel sequences.

Three jointly trained parts: a temporal-conv encoder squeezing each C-channel
sequence to a univariate latent trajectory, a warp-predicting head that maps
the (standardized, fixed-length-resampled) latent to warp parameters, and a
mirror decoder reconstructing the input from the warped latent. The
inverse-consistency averaging loss pulls all warped latents toward a shared
prototype of median training length while unwarping that prototype back to
each sequence's own timeline; the reconstruction loss blocks latent collapse.
A sigmoid schedule ramps the alignment term in during the first half of
training.

A variational variant replaces the deterministic bottleneck with a per-frame
Gaussian and adds masked KL, smoothness, and trajectory-variance penalties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .checkpoint import load_tensors, save_tensors
from .cpab import Tessellation
from .nn import AdamW, ParamTensor, harvest_grads, init_conv, init_dense, param_vars
from .sequences import EmbeddingSequence, LatentTrajectory, median_length

VARIANTS = ("standard", "vae")


@dataclass
class ModelConfig:
    channels: int
    hidden: int = 32
    kernel: int = 5
    n_cells: int = 16
    loc_length: int = 128
    loc_width: int = 32
    prototype_length: int = 2
    variant: str = "standard"
    no_bottleneck: bool = False
    no_decoder: bool = False
    no_median: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.channels < 1 or self.hidden < 1:
            raise ValueError("channels and hidden width must be positive")
        if self.prototype_length < 2:
            raise ValueError("prototype_length must be >= 2")


@dataclass
class TrainConfig:
    """Optimization and annealing settings; defaults match full-scale training."""

    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 300
    alpha: float = 2.0
    t0: float | None = None  # annealing midpoint; defaults to epochs / 2
    seed: int = 0
    beta: float = 1e-3       # vae: KL weight
    gamma_smooth: float = 1e-2
    alpha_traj: float = 1e-3
    k_subsample: int = 32

    def __post_init__(self):
        if min(self.batch_size, self.epochs) < 1 or min(self.lr, self.weight_decay) < 0:
            raise ValueError("batch_size/epochs must be >= 1, rates nonnegative")
        if self.t0 is not None and self.t0 > self.epochs:
            raise ValueError("annealing midpoint t0 must not exceed epochs")

    @property
    def resolved_t0(self) -> float:
        return self.epochs / 2.0 if self.t0 is None else self.t0

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small-data settings: fewer epochs, smaller batches, faster rate."""
        base = dict(epochs=100, batch_size=8, lr=1e-3)
        base.update(overrides)
        return cls(**base)


@dataclass
class AlignmentResult:
    """Frozen-model alignment of a sequence set."""

    thetas: np.ndarray                       # (N, n_cells - 1)
    latents: list[LatentTrajectory]
    warped_latents: list[LatentTrajectory]   # all at prototype length
    latent_prototype: np.ndarray             # (prototype_length,)
    losses: dict[str, float]


class DmtaeModel:
    """Parameter container plus graph builders for encoder, aligner, decoder."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.tess = Tessellation(config.n_cells)
        self.params: dict[str, ParamTensor] = {}
        rng = np.random.default_rng(seed)
        c, h, k = config.channels, config.hidden, config.kernel
        if not config.no_bottleneck:
            latent_channels = 2 if config.variant == "vae" else 1
            self.params.update(init_conv(rng, "enc1", h, c, k))
            self.params.update(init_conv(rng, "enc2", h, h, k))
            self.params.update(init_conv(rng, "enc3", latent_channels, h, k))
            self.params.update(init_conv(rng, "dec1", h, 1, k))
            self.params.update(init_conv(rng, "dec2", h, h, k))
            self.params.update(init_conv(rng, "dec3", c, h, k))
        w = config.loc_width
        self.params.update(init_conv(rng, "loc1", w, 1, k))
        self.params.update(init_conv(rng, "loc2", w, w, k))
        self.params.update(init_conv(rng, "loc3", w, w, k))
        # Zero-initialized head: an untrained model predicts the identity warp.
        self.params.update(init_dense(rng, "head", self.tess.n_params, w, zero=True))

    @property
    def theta_dim(self) -> int:
        return self.tess.n_params

    def param_list(self) -> list[ParamTensor]:
        return [self.params[k] for k in sorted(self.params)]

    # -- graph builders ----------------------------------------------------

    def encode_graph(self, leaves, seq: EmbeddingSequence, eps: np.ndarray | None = None):
        """Latent trajectory for one sequence: (z, mu, logvar); mu/logvar are
        None for the standard variant. Invalid input entries are zeroed first."""
        if seq.channels != self.config.channels:
            raise ValueError(
                f"sequence has {seq.channels} channels, model expects {self.config.channels}"
            )
        u = ad.const(seq.masked_data())
        if self.config.no_bottleneck:
            return ad.const(seq.masked_data().mean(axis=0)), None, None
        h = ad.relu(ad.conv1d(u, leaves["enc1.w"], leaves["enc1.b"]))
        h = ad.relu(ad.conv1d(h, leaves["enc2.w"], leaves["enc2.b"]))
        y = ad.conv1d(h, leaves["enc3.w"], leaves["enc3.b"])
        if self.config.variant == "standard":
            return ad.take_row(y, 0), None, None
        mu = ad.take_row(y, 0)
        logvar = ad.take_row(y, 1)
        if eps is None:
            eps = np.zeros(seq.length)
        sigma = ad.exp(ad.scale(logvar, 0.5))
        z = ad.add(mu, ad.mul_const(sigma, eps))
        return z, mu, logvar

    def align_graph(self, leaves, z: Var) -> Var:
        """Warp parameters from a latent trajectory of any length."""
        zn = ad.standardize(ad.resample_linear(z, self.config.loc_length))
        h = ad.reshape(zn, (1, self.config.loc_length))
        h = ad.relu(ad.conv1d(h, leaves["loc1.w"], leaves["loc1.b"]))
        h = ad.relu(ad.conv1d(h, leaves["loc2.w"], leaves["loc2.b"]))
        h = ad.relu(ad.conv1d(h, leaves["loc3.w"], leaves["loc3.b"]))
        pooled = ad.global_avg_pool(h)
        return ad.dense(pooled, leaves["head.w"], leaves["head.b"])

    def decode_graph(self, leaves, z: Var) -> Var:
        x = ad.reshape(z, (1, z.value.size))
        h = ad.relu(ad.conv1d(x, leaves["dec1.w"], leaves["dec1.b"]))
        h = ad.relu(ad.conv1d(h, leaves["dec2.w"], leaves["dec2.b"]))
        return ad.conv1d(h, leaves["dec3.w"], leaves["dec3.b"])

    # -- frozen-model conveniences ------------------------------------------

    def encode(self, seq: EmbeddingSequence, eps_seed: int | None = None) -> LatentTrajectory:
        """Latent trajectory of a sequence. For the variational variant, a
        seed draws the per-frame noise; without one the mean is returned."""
        leaves = param_vars(self.params)
        eps = None
        if self.config.variant == "vae" and eps_seed is not None:
            eps = np.random.default_rng(eps_seed).standard_normal(seq.length)
        z, _, _ = self.encode_graph(leaves, seq, eps=eps)
        return LatentTrajectory(z.value, frame_mask=seq.frame_mask() if seq.mask is not None else None)

    def predict_theta(self, z: LatentTrajectory) -> np.ndarray:
        leaves = param_vars(self.params)
        return self.align_graph(leaves, ad.const(z.values)).value.copy()


def annealing_weight(t: float, t0: float, alpha: float = 2.0) -> float:
    """Sigmoid ramp of the alignment weight, clamped to 1 from t0 onward."""
    if t < 0:
        raise ValueError("epoch must be nonnegative")
    if t >= t0:
        return 1.0
    z = alpha * (t - t0)
    return math.exp(z) / (1.0 + math.exp(z))


def _masked_mean_graph(values: Var, mask: np.ndarray) -> Var:
    total = float(mask.sum())
    if total <= 0:
        raise ValueError("no valid entries under mask")
    return ad.scale(ad.vsum(ad.mul_const(values, mask)), 1.0 / total)


@dataclass
class _SeqGraph:
    seq: EmbeddingSequence
    z: Var
    mu: Var | None
    logvar: Var | None
    theta: Var
    neg_theta: Var
    ztil: Var               # latent warped to prototype length
    back_flow: tuple        # flow of -theta on the sequence's own grid


def _forward_batch(model: DmtaeModel, leaves, seqs, eps_list):
    L_med = model.config.prototype_length
    out = []
    for seq, eps in zip(seqs, eps_list):
        z, mu, logvar = model.encode_graph(leaves, seq, eps=eps)
        theta = model.align_graph(leaves, z)
        neg_theta = ad.neg(theta)
        ztil = ad.warp(z, theta, L_med)
        back_flow = ad.flow_with_grad(neg_theta.value, seq.length)
        out.append(_SeqGraph(seq, z, mu, logvar, theta, neg_theta, ztil, back_flow))
    return out


def batch_loss_graph(
    model: DmtaeModel,
    leaves,
    seqs: list[EmbeddingSequence],
    lam: float,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
):
    """Total loss graph for one mini-batch.

    Returns (total, components, per-sequence graphs). The prototype is the
    mean of this batch's warped latents; components are plain floats.
    """
    n = len(seqs)
    if n < 2:
        raise ValueError("joint alignment needs at least 2 sequences per batch")
    vae = model.config.variant == "vae" and not model.config.no_bottleneck
    eps_list = [
        rng.standard_normal(s.length) if (vae and rng is not None) else None for s in seqs
    ]
    graphs = _forward_batch(model, leaves, seqs, eps_list)
    L_med = model.config.prototype_length

    acc = graphs[0].ztil
    for g in graphs[1:]:
        acc = ad.add(acc, g.ztil)
    zhat = ad.scale(acc, 1.0 / n)

    icae_acc = None
    for g in graphs:
        back = ad.warp(zhat, g.neg_theta, g.seq.length, flow=g.back_flow)
        term = ad.vmean(ad.square(ad.sub(back, g.z)))
        icae_acc = term if icae_acc is None else ad.add(icae_acc, term)
    icae = ad.scale(icae_acc, 1.0 / n)

    components = {}
    use_decoder = not (model.config.no_decoder or model.config.no_bottleneck)
    if use_decoder:
        rec_acc = None
        for g in graphs:
            decoded = model.decode_graph(leaves, g.ztil)          # (C, L_med)
            back = ad.warp(decoded, g.neg_theta, g.seq.length, flow=g.back_flow)
            resid = ad.sub(ad.const(g.seq.data), back)
            mask = g.seq.mask if g.seq.mask is not None else np.ones_like(g.seq.data)
            term = ad.scale(ad.vsum(ad.mul_const(ad.square(resid), mask)), 1.0 / mask.sum())
            rec_acc = term if rec_acc is None else ad.add(rec_acc, term)
        rec = ad.scale(rec_acc, 1.0 / n)
        total = ad.add(ad.scale(icae, lam), rec)
        components["rec"] = float(rec.value)
    else:
        total = ad.scale(icae, lam)
        components["rec"] = 0.0
    components["icae"] = float(icae.value)
    components.update(kl=0.0, smooth=0.0, trajvar=0.0)

    if vae:
        kl_acc = None
        smooth_acc = None
        subs = []
        sub_rng = rng if rng is not None else np.random.default_rng(0)
        for g in graphs:
            fm = g.seq.frame_mask()
            # KL to the unit Gaussian, averaged over valid frames.
            sig2 = ad.exp(g.logvar)
            kl_t = ad.scale(
                ad.shift(ad.sub(ad.add(ad.square(g.mu), sig2), g.logvar), -1.0), 0.5
            )
            term = _masked_mean_graph(kl_t, fm)
            kl_acc = term if kl_acc is None else ad.add(kl_acc, term)
            # Squared latent increments over adjacent valid frames.
            d = ad.sub(
                ad.gather_last(g.z, np.arange(1, g.seq.length)),
                ad.gather_last(g.z, np.arange(0, g.seq.length - 1)),
            )
            pair = fm[1:] * fm[:-1]
            term = _masked_mean_graph(ad.square(d), pair)
            smooth_acc = term if smooth_acc is None else ad.add(smooth_acc, term)
            valid = np.nonzero(fm > 0)[0]
            if valid.size == 0:
                raise ValueError(f"sequence {g.seq.id!r} has no valid frames")
            idx = valid[
                np.clip(
                    np.floor(sub_rng.uniform(0, valid.size, cfg.k_subsample)).astype(int),
                    0,
                    valid.size - 1,
                )
            ]
            subs.append(ad.gather_last(g.z, idx))
        kl = ad.scale(kl_acc, 1.0 / n)
        smooth = ad.scale(smooth_acc, 1.0 / n)
        sub_acc = subs[0]
        for s in subs[1:]:
            sub_acc = ad.add(sub_acc, s)
        sub_mean = ad.scale(sub_acc, 1.0 / n)
        tv_acc = None
        for s in subs:
            term = ad.vsum(ad.square(ad.sub(s, sub_mean)))
            tv_acc = term if tv_acc is None else ad.add(tv_acc, term)
        trajvar = ad.scale(tv_acc, 1.0 / n)
        total = ad.add(total, ad.scale(kl, cfg.beta))
        total = ad.add(total, ad.scale(smooth, cfg.gamma_smooth))
        total = ad.add(total, ad.scale(trajvar, cfg.alpha_traj))
        components.update(
            kl=float(kl.value), smooth=float(smooth.value), trajvar=float(trajvar.value)
        )

    components["total"] = float(total.value)
    return total, components, graphs


# -- plain-array loss surfaces (mirror the graph path; cross-checked in tests) --


def icae_loss(latents, thetas, proto_length: int):
    """Inverse-consistency averaging loss and the latent prototype."""
    from .sequences import apply_warp

    values = [lt.values if isinstance(lt, LatentTrajectory) else np.asarray(lt, float) for lt in latents]
    if len(values) < 2:
        raise ValueError("joint alignment needs at least 2 sequences")
    warped = [apply_warp(v, th, proto_length) for v, th in zip(values, thetas)]
    zhat = np.mean(warped, axis=0)
    loss = 0.0
    for v, th in zip(values, thetas):
        back = apply_warp(zhat, -np.asarray(th, float), v.size)
        loss += np.mean((back - v) ** 2)
    return loss / len(values), zhat


def reconstruction_loss(model: DmtaeModel, seqs, thetas) -> float:
    """Misalignment-invariant reconstruction error under the given warps."""
    from .sequences import apply_warp

    leaves = param_vars(model.params)
    total = 0.0
    for seq, th in zip(seqs, thetas):
        z, _, _ = model.encode_graph(leaves, seq)
        ztil = apply_warp(z.value, th, model.config.prototype_length)
        decoded = model.decode_graph(leaves, ad.const(ztil)).value
        back = apply_warp(decoded, -np.asarray(th, float), seq.length)
        mask = seq.mask if seq.mask is not None else np.ones_like(seq.data)
        total += float((((seq.data - back) ** 2) * mask).sum() / mask.sum())
    return total / len(seqs)


def vae_losses(mus, logvars, zs, frame_masks, k_subsample: int, rng=None):
    """Masked KL, smoothness, and trajectory-variance terms over a batch."""
    rng = np.random.default_rng(0) if rng is None else rng
    n = len(mus)
    kl = smooth = 0.0
    subs = []
    for mu, logvar, z, fm in zip(mus, logvars, zs, frame_masks):
        mu, logvar, z = (np.asarray(a, float) for a in (mu, logvar, z))
        fm = np.ones_like(z) if fm is None else np.asarray(fm, float)
        if fm.sum() <= 0:
            raise ValueError("no valid frames")
        kl_t = -0.5 * (1.0 + logvar - mu**2 - np.exp(logvar))
        kl += float((kl_t * fm).sum() / fm.sum())
        pair = fm[1:] * fm[:-1]
        if pair.sum() <= 0:
            raise ValueError("no adjacent valid frame pairs")
        smooth += float(((np.diff(z) ** 2) * pair).sum() / pair.sum())
        valid = np.nonzero(fm > 0)[0]
        idx = valid[np.clip(np.floor(rng.uniform(0, valid.size, k_subsample)).astype(int), 0, valid.size - 1)]
        subs.append(z[idx])
    subs = np.stack(subs)
    trajvar = float(np.mean(np.sum((subs - subs.mean(axis=0)) ** 2, axis=1)))
    return kl / n, smooth / n, trajvar


def total_loss(
    icae: float,
    rec: float,
    lam: float,
    variant: str = "standard",
    kl: float = 0.0,
    smooth: float = 0.0,
    trajvar: float = 0.0,
    beta: float = 0.0,
    gamma_smooth: float = 0.0,
    alpha_traj: float = 0.0,
) -> float:
    base = lam * icae + rec
    if variant == "standard":
        return base
    if variant == "vae":
        return base + beta * kl + gamma_smooth * smooth + alpha_traj * trajvar
    raise ValueError(f"unknown variant {variant!r}")


# -- training -----------------------------------------------------------------


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("epoch", "lambda", "icae", "rec", "kl", "smooth", "trajvar", "total")

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(
                ",".join(
                    (str(r["epoch"]) if c == "epoch" else format(r[c], ".10g"))
                    for c in self.COLUMNS
                )
            )
        return "\n".join(lines) + "\n"


def _batches(order: np.ndarray, batch_size: int):
    chunks = [order[i : i + batch_size] for i in range(0, order.size, batch_size)]
    if len(chunks) > 1 and chunks[-1].size < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def train(model: DmtaeModel, seqs: list[EmbeddingSequence], cfg: TrainConfig):
    """Optimize the model on one class of sequences; returns the loss history."""
    if len(seqs) < 2:
        raise ValueError("training needs at least 2 sequences per class")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.param_list(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = TrainHistory()
    t0 = cfg.resolved_t0
    for epoch in range(cfg.epochs):
        lam = annealing_weight(epoch, t0, cfg.alpha)
        order = rng.permutation(len(seqs))
        sums = dict.fromkeys(("icae", "rec", "kl", "smooth", "trajvar", "total"), 0.0)
        for bi, batch in enumerate(_batches(order, cfg.batch_size)):
            leaves = param_vars(model.params)
            total, comps, _ = batch_loss_graph(
                model, leaves, [seqs[i] for i in batch], lam, cfg, rng=rng
            )
            if not np.isfinite(comps["total"]):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {bi}")
            ad.backward(total)
            harvest_grads(model.params, leaves)
            opt.step()
            opt.zero_grad()
            w = batch.size / len(seqs)
            for key in sums:
                sums[key] += comps[key] * w
        history.rows.append({"epoch": epoch, "lambda": lam, **sums})
    return history


def infer_alignment(model: DmtaeModel, seqs: list[EmbeddingSequence]) -> AlignmentResult:
    """Warps, latents, prototype, and loss components under the frozen model."""
    leaves = param_vars(model.params)
    cfg = TrainConfig(epochs=1, batch_size=len(seqs), seed=0)
    _, comps, graphs = batch_loss_graph(model, leaves, seqs, lam=1.0, cfg=cfg, rng=None)
    warped = [LatentTrajectory(g.ztil.value.copy()) for g in graphs]
    zhat = np.mean([w.values for w in warped], axis=0)
    return AlignmentResult(
        thetas=np.stack([g.theta.value.copy() for g in graphs]),
        latents=[LatentTrajectory(g.z.value.copy()) for g in graphs],
        warped_latents=warped,
        latent_prototype=zhat,
        losses=comps,
    )


def prototype_length_for(lengths, no_median: bool = False) -> int:
    """Median length rule (or max length when the median rule is ablated)."""
    return int(max(lengths)) if no_median else median_length(lengths)


# -- persistence ----------------------------------------------------------------

_META_FIELDS = (
    "channels",
    "hidden",
    "kernel",
    "n_cells",
    "loc_length",
    "loc_width",
    "prototype_length",
)


def save_model(path, model: DmtaeModel):
    tensors = {f"param.{name}": p.value for name, p in model.params.items()}
    for f_ in _META_FIELDS:
        tensors[f"meta.{f_}"] = np.array(float(getattr(model.config, f_)))
    tensors["meta.variant"] = np.array(float(VARIANTS.index(model.config.variant)))
    tensors["meta.flags"] = np.array(
        [
            float(model.config.no_bottleneck),
            float(model.config.no_decoder),
            float(model.config.no_median),
        ]
    )
    save_tensors(path, tensors)


def load_model(path) -> DmtaeModel:
    tensors = load_tensors(path)
    kwargs = {f_: int(tensors[f"meta.{f_}"]) for f_ in _META_FIELDS}
    flags = tensors["meta.flags"]
    config = ModelConfig(
        **kwargs,
        variant=VARIANTS[int(tensors["meta.variant"])],
        no_bottleneck=bool(flags[0]),
        no_decoder=bool(flags[1]),
        no_median=bool(flags[2]),
    )
    model = DmtaeModel(config, seed=0)
    for name, p in model.params.items():
        key = f"param.{name}"
        if key not in tensors:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        if tensors[key].shape != p.value.shape:
            raise ValueError(
                f"checkpoint parameter {name!r} has shape {tensors[key].shape}, "
                f"expected {p.value.shape}"
            )
        p.value[...] = tensors[key]
    return model
