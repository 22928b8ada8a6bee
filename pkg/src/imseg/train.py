"""Pre-training on unlabeled slices, few-label fine-tuning, and evaluation."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import data as D
from . import net as N
from . import tensor as T
from .boundary import CcConfig, cc_loss, entropy_map, sobel_edge
from .clustering import MiConfig, joint_distribution, marginal_perplexity, mi_loss
from .contrastive import ConConfig, supcon_loss

CSV_HEADER = "epoch,l_con,l_mi,l_cc,l_total,val_dsc_c1,val_dsc_c2,val_dsc_c3,perplexity,diag_mass"
CSV_FIELDS = CSV_HEADER.split(",")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, batch_seed, indices):
        super().__init__(message)
        self.batch_seed = batch_seed
        self.indices = indices


@dataclass
class PretrainConfig:
    alpha: float = 0.5
    lam: float = 1.0
    tau: float = 0.1
    K: int = 10
    batch_size: int = 8
    epochs: int = 30
    iters_per_epoch: int = 50
    warmup_multiplier: float = 10.0
    warmup_epochs: int = 10
    base_lr: float = 0.002
    momentum: float = 0.9
    seed: int = 0
    cc_radius: int = 4
    cc_sign: str = "neg"
    partitions: int = 3

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if min(self.batch_size, self.epochs, self.iters_per_epoch) < 1:
            raise ValueError("batch_size, epochs and iters_per_epoch must be >= 1")
        CcConfig(self.cc_radius, sign=self.cc_sign)


@dataclass
class FinetuneConfig:
    labeled_volume_count: int = 1
    epochs: int = 30
    iters_per_epoch: int = 10
    batch_size: int = 5
    warmup_multiplier: float = 10.0
    warmup_epochs: int = 10
    base_lr: float = 0.002
    momentum: float = 0.9
    seed: int = 0
    augment: bool = True
    # fresh head on unnormalized pre-trained features can start with huge logits
    max_grad_norm: float | None = 50.0

    def __post_init__(self):
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ValueError("max_grad_norm must be positive or None")
        if self.labeled_volume_count < 1:
            raise ValueError("need at least one labeled volume")
        if min(self.batch_size, self.epochs, self.iters_per_epoch) < 1:
            raise ValueError("batch_size, epochs and iters_per_epoch must be >= 1")


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)
    steps: list[tuple[float, float, float, float]] = field(default_factory=list)
    best_epoch: int | None = None

    def to_csv(self, path) -> None:
        lines = [CSV_HEADER]
        for row in self.rows:
            cells = []
            for name in CSV_FIELDS:
                v = row.get(name)
                cells.append("" if v is None else (str(v) if name == "epoch" else f"{v:.17g}"))
            lines.append(",".join(cells))
        Path(path).write_text("\n".join(lines) + "\n")


# -- optimization ---------------------------------------------------------------
def lr_at(epoch: int, base_lr: float, multiplier: float, epochs: int, warmup: int = 10) -> float:
    """Linear warm-up to ``multiplier * base_lr`` at ``warmup``, then cosine decay to 0 at ``epochs``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    peak = base_lr * multiplier
    if epoch < warmup:
        return base_lr + (peak - base_lr) * epoch / warmup
    span = max(epochs - warmup, 1)
    return peak * 0.5 * (1.0 + math.cos(math.pi * min(epoch - warmup, span) / span))


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float) -> None:
    """In place: v = momentum * v + g; theta -= lr * v.  Missing velocity starts at zero."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.isfinite(g).all():
            raise T.NonFiniteError(f"non-finite gradient for {name}")
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        params[name] = params[name] - lr * v


def _grads(theta: dict) -> dict:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in theta.items()}


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the norm before."""
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# -- pre-training ---------------------------------------------------------------
@dataclass
class StepLosses:
    l_con: T.Tensor
    l_mi: T.Tensor
    l_cc: T.Tensor
    l_total: T.Tensor


def pretrain_losses(model: N.SegNet, theta: dict, x: np.ndarray, meta: np.ndarray, specs, cfg: PretrainConfig,
                    mi_fn=mi_loss):
    """All three objectives for one batch of images and one transform per image."""
    B = x.shape[0]
    gs = [s.geometric for s in specs]
    xt = np.concatenate([D.apply_intensity(x[i : i + 1], s.gamma) for i, s in enumerate(specs)])
    xt = D.apply_geometric(xt, gs)
    feature, s = model.embed(T.Tensor(np.concatenate([x, xt])), theta)
    s_x, s_t = s[:B], s[B:]
    p_hat = model.project_clusters(s_t, theta)
    p_tilde = model.project_clusters(D.apply_geometric(s_x, gs), theta)
    weights = D.valid_mask(gs, B, *x.shape[2:])
    l_mi = mi_fn(p_hat, p_tilde, MiConfig(cfg.alpha), weights)
    p_x = model.project_clusters(s_x, theta)
    l_cc = cc_loss(sobel_edge(x), entropy_map(p_x), CcConfig(cfg.cc_radius, sign=cfg.cc_sign))
    z = model.project_global(feature, theta)
    l_con = supcon_loss(z, np.concatenate([meta, meta]), ConConfig(cfg.tau))
    total = l_con + l_cc * cfg.lam + l_mi
    return StepLosses(l_con, l_mi, l_cc, total), (p_hat, p_tilde, weights)


def cluster_diagnostics(model: N.SegNet, params: dict, dataset: D.SynthDataset, seed: int, alpha: float = 0.5):
    """(marginal perplexity, joint diagonal mass, per-image cluster argmax) on fixed transforms."""
    rng = np.random.default_rng([seed, 104729])
    x = dataset.images
    specs = [D.sample_transform(rng) for _ in range(len(x))]
    theta = N.as_leaves(params, requires_grad=False)
    p_hat_all, p_tilde_all, w_all, maps = [], [], [], []
    for lo in range(0, len(x), 16):
        xb, sb = x[lo : lo + 16], specs[lo : lo + 16]
        gs = [s.geometric for s in sb]
        xt = D.apply_geometric(np.concatenate([D.apply_intensity(xb[i : i + 1], s.gamma) for i, s in enumerate(sb)]), gs)
        _, s = model.embed(T.Tensor(np.concatenate([xb, xt])), theta)
        B = len(xb)
        p_x = model.project_clusters(s[:B], theta).data
        p_hat_all.append(model.project_clusters(s[B:], theta).data)
        p_tilde_all.append(model.project_clusters(D.apply_geometric(T.Tensor(s.data[:B]), gs), theta).data)
        w_all.append(D.valid_mask(gs, B, *xb.shape[2:]))
        maps.append(p_x.argmax(axis=1))
    p_hat, p_tilde = np.concatenate(p_hat_all), np.concatenate(p_tilde_all)
    J = joint_distribution(p_hat, p_tilde, weights=np.concatenate(w_all))
    return marginal_perplexity(p_hat), float(np.trace(J.P.data)), np.concatenate(maps)


def pretrain(dataset: D.SynthDataset, cfg: PretrainConfig, net_cfg: N.NetConfig | None = None,
             val: D.SynthDataset | None = None, init: dict | None = None, log=None):
    """Returns (params, RunRecord).  Never touches the masks of ``dataset``."""
    net_cfg = net_cfg or N.NetConfig(K=cfg.K)
    if net_cfg.K != cfg.K:
        raise ValueError("network K and pre-training K differ")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    model = N.SegNet(net_cfg)
    params = dict(init) if init is not None else N.init_params(net_cfg, cfg.seed)
    velocity: dict = {}
    meta_all = dataset.meta_labels
    record = RunRecord()
    diag_set = val if val is not None else dataset
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.base_lr, cfg.warmup_multiplier, cfg.epochs, cfg.warmup_epochs)
        sums = np.zeros(4)
        for it in range(cfg.iters_per_epoch):
            batch_seed = (cfg.seed, epoch, it)
            rng = np.random.default_rng(batch_seed)
            idx = rng.integers(len(dataset), size=cfg.batch_size)
            specs = [D.sample_transform(rng) for _ in idx]
            theta = N.as_leaves(params)
            try:
                with T.Tape() as tape:
                    losses, _ = pretrain_losses(model, theta, dataset.images[idx], meta_all[idx], specs, cfg)
                    tape.backward(losses.l_total)
                sgd_step(params, _grads(theta), velocity, lr, cfg.momentum)
            except (T.NonFiniteError, T.DomainError) as exc:
                raise TrainingDiverged(
                    f"non-finite value at epoch {epoch} step {it}, batch seed {batch_seed}: {exc}", batch_seed, idx
                ) from exc
            step = (losses.l_con.item(), losses.l_mi.item(), losses.l_cc.item(), losses.l_total.item())
            record.steps.append(step)
            sums += step
        perplexity, diag_mass, _ = cluster_diagnostics(model, params, diag_set, cfg.seed)
        l_con, l_mi, l_cc, l_total = sums / cfg.iters_per_epoch
        record.rows.append(dict(epoch=epoch, l_con=l_con, l_mi=l_mi, l_cc=l_cc, l_total=l_total,
                                perplexity=perplexity, diag_mass=diag_mass))
        if log:
            log(f"pretrain epoch {epoch} lr {lr:.4g} total {l_total:.4f} mi {l_mi:.4f} "
                f"cc {l_cc:.4f} con {l_con:.4f} perplexity {perplexity:.3f} diag {diag_mass:.3f}")
    return params, record


# -- fine-tuning ----------------------------------------------------------------
def transfer(pretrained: dict | None, net_cfg: N.NetConfig, seed: int) -> dict:
    """Fine-tune start point: pretrained backbone (or fresh init) with a fresh segmentation head."""
    fresh = N.init_params(net_cfg, seed)
    if pretrained is None:
        return fresh
    params = {}
    for name, value in fresh.items():
        keep = not name.startswith((N.SEG_PREFIX, N.CLUSTER_PREFIX, N.GLOBAL_PREFIX))
        if keep and pretrained[name].shape != value.shape:
            raise N.CheckpointError(f"{name}: checkpoint shape {pretrained[name].shape} != {value.shape}")
        params[name] = np.array(pretrained[name]) if keep else value
    return params


def cross_entropy(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    """Mean pixel-wise cross-entropy; ``labels`` holds class indices (B, H, W)."""
    C = logits.shape[1]
    onehot = (labels[:, None] == np.arange(C)[None, :, None, None]).astype(np.float64)
    return -T.sum(T.log_softmax(logits, axis=1) * onehot) * (1.0 / labels.size)


def predict(model: N.SegNet, params: dict, images: np.ndarray, chunk: int = 16) -> np.ndarray:
    theta = N.as_leaves(params, requires_grad=False)
    out = []
    for lo in range(0, len(images), chunk):
        _, s = model.embed(T.Tensor(images[lo : lo + chunk]), theta)
        out.append(model.segment_head(s, theta).data.argmax(axis=1))
    return np.concatenate(out)


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    denom = pred.sum() + truth.sum()
    return 1.0 if denom == 0 else 2.0 * float((pred & truth).sum()) / float(denom)


def evaluate(model: N.SegNet, params: dict, dataset: D.SynthDataset) -> tuple[np.ndarray, np.ndarray]:
    """(volume ids, (V, 3) per-class volume DSC) with slices stacked per volume."""
    pred = predict(model, params, dataset.images)
    truth = dataset.labels()
    vols = dataset.volumes
    scores = np.empty((len(vols), D.NUM_CLASSES))
    for r, v in enumerate(vols):
        sel = dataset.volume_id == v
        for c in range(D.NUM_CLASSES):
            scores[r, c] = dice(pred[sel] == c + 1, truth[sel] == c + 1)
    return vols, scores


def finetune(pretrained: dict | None, labeled: D.SynthDataset, val: D.SynthDataset, cfg: FinetuneConfig,
             net_cfg: N.NetConfig, log=None):
    """Cross-entropy training from ``pretrained`` (None = random init); returns the best-validation params."""
    if len(labeled) == 0:
        raise ValueError("empty labeled set")
    model = N.SegNet(net_cfg)
    params = transfer(pretrained, net_cfg, cfg.seed)
    labels = labeled.labels()
    velocity: dict = {}
    record = RunRecord()
    best, best_score = None, -np.inf
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.base_lr, cfg.warmup_multiplier, cfg.epochs, cfg.warmup_epochs)
        total = 0.0
        for it in range(cfg.iters_per_epoch):
            rng = np.random.default_rng((cfg.seed, epoch, it, 1))
            idx = rng.integers(len(labeled), size=cfg.batch_size)
            x, y = labeled.images[idx], labels[idx]
            if cfg.augment:
                specs = [D.sample_transform(rng) for _ in idx]
                gs = [s.geometric for s in specs]
                x = D.apply_geometric(np.concatenate([D.apply_intensity(x[i : i + 1], s.gamma)
                                                      for i, s in enumerate(specs)]), gs)
                y = D.apply_geometric(y[:, None], gs)[:, 0]
            theta = N.as_leaves(params)
            try:
                with T.Tape() as tape:
                    _, s = model.embed(T.Tensor(x), theta)
                    loss = cross_entropy(model.segment_head(s, theta), y)
                    tape.backward(loss)
                grads = _grads(theta)
                if cfg.max_grad_norm is not None:
                    clip_grad_norm(grads, cfg.max_grad_norm)
                sgd_step(params, grads, velocity, lr, cfg.momentum)
            except (T.NonFiniteError, T.DomainError) as exc:
                raise TrainingDiverged(
                    f"fine-tune diverged at epoch {epoch} step {it}, batch seed {(cfg.seed, epoch, it, 1)}: {exc}",
                    (cfg.seed, epoch, it, 1), idx) from exc
            total += loss.item()
        _, scores = evaluate(model, params, val)
        per_class = scores.mean(axis=0)
        record.rows.append(dict(epoch=epoch, l_total=total / cfg.iters_per_epoch,
                                **{f"val_dsc_c{c + 1}": float(per_class[c]) for c in range(D.NUM_CLASSES)}))
        score = float(per_class.mean())
        if score > best_score:
            best, best_score, record.best_epoch = copy.deepcopy(params), score, epoch
        if log:
            log(f"finetune epoch {epoch} lr {lr:.4g} ce {total / cfg.iters_per_epoch:.4f} val dsc {score:.4f}")
    return best, record


# -- boundary agreement ---------------------------------------------------------
def region_boundaries(labels: np.ndarray) -> np.ndarray:
    """Pixels whose label differs from a 4-neighbour, for (..., H, W) integer maps."""
    labels = np.asarray(labels)
    edge = np.zeros(labels.shape, dtype=bool)
    dy = labels[..., 1:, :] != labels[..., :-1, :]
    dx = labels[..., :, 1:] != labels[..., :, :-1]
    edge[..., 1:, :] |= dy
    edge[..., :-1, :] |= dy
    edge[..., :, 1:] |= dx
    edge[..., :, :-1] |= dx
    return edge


def boundary_f_measure(pred_labels: np.ndarray, true_labels: np.ndarray, tolerance: int = 2) -> float:
    """Mean per-image F-measure of boundary pixels matched within ``tolerance`` (Euclidean)."""
    pred_b, true_b = region_boundaries(pred_labels), region_boundaries(true_labels)
    scores = []
    for pb, tb in zip(pred_b, true_b):
        if not pb.any() and not tb.any():
            scores.append(1.0)
            continue
        if not pb.any() or not tb.any():
            scores.append(0.0)
            continue
        near_t = ndimage.distance_transform_edt(~tb) <= tolerance
        near_p = ndimage.distance_transform_edt(~pb) <= tolerance
        precision = (pb & near_t).sum() / pb.sum()
        recall = (tb & near_p).sum() / tb.sum()
        scores.append(0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall))
    return float(np.mean(scores))


def config_dict(cfg) -> dict:
    return asdict(cfg)
