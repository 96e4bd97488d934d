"""Scratch harness for tuning the desk training config (not part of the package)."""
import sys, time
import numpy as np

sys.path.insert(0, "src")
from tpl.dataio import SyntheticSpec, generate_synthetic
from tpl.model import DmtaeModel, ModelConfig, TrainConfig, train, infer_alignment, prototype_length_for
from tpl.prototype import build_prototype
from tpl import metrics

def run(train_cfg, seed_data=1234, hidden=32, loc_width=32, verbose=True):
    spec = SyntheticSpec(n_videos=40, channels=8, length_range=(60, 140),
                         sigma_theta=1.0, sigma_noise=0.05, seed=seed_data)
    ds = generate_synthetic(spec)
    train_idx = [i for i, a in enumerate(ds.annotations) if a.split == "train"]
    val_idx = [i for i, a in enumerate(ds.annotations) if a.split == "val"]
    tr_seqs = [ds.videos[i] for i in train_idx]
    tr_labels = [ds.annotations[i].labels for i in train_idx]
    va_seqs = [ds.videos[i] for i in val_idx]
    va_labels = [ds.annotations[i].labels for i in val_idx]

    L_med = prototype_length_for([s.length for s in tr_seqs])
    model = DmtaeModel(ModelConfig(channels=8, hidden=hidden, loc_width=loc_width,
                                   prototype_length=L_med), seed=train_cfg.seed)
    t = time.time()
    hist = train(model, tr_seqs, train_cfg)
    dt = time.time() - t
    al = infer_alignment(model, tr_seqs)
    icae0, icaeN = hist.rows[0]["icae"], hist.rows[-1]["icae"]
    c = metrics.cbc(tr_labels, al.thetas, L_med)
    ceuc = metrics.cbc_identity_padded(tr_labels)
    proto = build_prototype(tr_seqs, tr_labels, al)
    va_al = infer_alignment(model, va_seqs)
    p = metrics.plp(proto, va_labels, va_al.thetas)
    if verbose:
        print(f"  time {dt:.0f}s  icae {icae0:.4f}->{icaeN:.4f} (ratio {icaeN/icae0:.3f})  "
              f"CBC {c:.3f}  EucCBC {ceuc:.3f}  PLP {p:.3f}  |th| {np.linalg.norm(al.thetas,axis=1).mean():.2f}")
    return dict(time=dt, ratio=icaeN / icae0, cbc=c, euc=ceuc, plp=p)

if __name__ == "__main__":
    import itertools
    name = sys.argv[1] if len(sys.argv) > 1 else "base"
    if name == "base":
        print("desk default (epochs=100, batch=8, lr=1e-3):")
        run(TrainConfig.desk(seed=7))
    elif name == "sweep":
        for lr, bs in itertools.product([1e-3, 2e-3], [4, 8]):
            print(f"lr={lr} bs={bs}:")
            run(TrainConfig.desk(lr=lr, batch_size=bs, seed=7))
