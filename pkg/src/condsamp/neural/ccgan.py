"""Continuous-conditional GAN trained with the hard vicinal discriminator loss.

Labels are scalars mapped affinely to [0, 1].  Data columns are standardised
before they reach either network, so the generator works in z-score units and
``sample_ccgan`` maps back.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import io, rng
from ..samples import SampleSet
from .nets import AdamState, DenseNet, adam_step, backward, forward

log = logging.getLogger(__name__)

MAGIC = b"CSGAN001"


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, d_loss, g_loss):
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch} (d_loss={d_loss}, g_loss={g_loss}); "
                         "widen the vicinity or lower the learning rate")


@dataclass(frozen=True)
class HvdlParams:
    kappa_vicinity: float
    sigma_label: float
    C1: float = 1.0
    C2: float = 1.0
    g_objective: str = "nonsaturating"
    eps_draws: int = 1

    def __post_init__(self):
        for name in ("kappa_vicinity", "C1", "C2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma_label < 0:
            raise ValueError("sigma_label must be non-negative")
        if self.g_objective not in ("nonsaturating", "minimax"):
            raise ValueError(f"unknown generator objective {self.g_objective!r}")
        if self.eps_draws < 1:
            raise ValueError("eps_draws must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5000
    batch_size: int = 512
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    d_steps_per_g_step: int = 1
    early_stop_patience: Optional[int] = None
    early_stop_tol: float = 1e-3

    def __post_init__(self):
        for name in ("epochs", "batch_size", "d_steps_per_g_step"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 for batch normalisation")


def default_hvdl(labels, min_neighbours=50) -> HvdlParams:
    """Vicinity defaults on normalised labels.

    ``sigma`` is Silverman's rule-of-thumb bandwidth of the label sample;
    ``kappa`` is the smallest radius whose average vicinity holds at least
    ``min_neighbours`` training labels.
    """
    y = np.sort(np.asarray(labels, dtype=float))
    lo, hi = y[0], y[-1]
    span = hi - lo if hi > lo else 1.0
    u = (y - lo) / span
    n = u.size
    sd = u.std()
    sigma = (4.0 * sd ** 5 / (3.0 * n)) ** 0.2 if sd > 0 else 0.0
    target = min(min_neighbours, n)

    def mean_count(k):
        return np.mean(np.searchsorted(u, u + k, "right") - np.searchsorted(u, u - k, "left"))

    a, b = 0.0, 1.0
    if mean_count(a) >= target:
        return HvdlParams(kappa_vicinity=1e-6, sigma_label=sigma)
    for _ in range(60):
        mid = 0.5 * (a + b)
        if mean_count(mid) >= target:
            b = mid
        else:
            a = mid
    return HvdlParams(kappa_vicinity=b, sigma_label=sigma)


def _pyramid(noise_dim, data_dim, gen):
    g_sizes = [noise_dim + 1, 16, 32, 64, 128, 256, data_dim]
    G = DenseNet.build(g_sizes, ["identity"] * 6, [True] * 5 + [False], gen)
    D = _shared_disc(data_dim, gen)
    return G, D


def _wide(noise_dim, data_dim, gen):
    g_sizes = [noise_dim + 1] + [200] * 5 + [data_dim]
    G = DenseNet.build(g_sizes, ["leaky_relu"] * 5 + ["identity"], [True] * 5 + [False], gen)
    D = _shared_disc(data_dim, gen)
    return G, D


def _shared_disc(data_dim, gen):
    sizes = [data_dim + 1] + [100] * 5 + [1]
    return DenseNet.build(sizes, ["relu"] * 5 + ["sigmoid"], [False] * 6, gen)


def _small(noise_dim, data_dim, gen):
    G = DenseNet.build([noise_dim + 1, 32, 32, data_dim], ["leaky_relu", "leaky_relu", "identity"],
                       [True, True, False], gen)
    D = DenseNet.build([data_dim + 1, 32, 32, 1], ["relu", "relu", "sigmoid"], [False] * 3, gen)
    return G, D


ARCHITECTURES = {"pyramid": _pyramid, "wide": _wide, "small": _small}


@dataclass
class GanModel:
    generator: DenseNet
    discriminator: DenseNet
    noise_dim: int
    label_lo: float
    label_hi: float
    data_dim: int
    hvdl: HvdlParams
    arch_id: str = "custom"
    data_shift: np.ndarray = None
    data_scale: np.ndarray = None
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.noise_dim < 1:
            raise ValueError("noise_dim must be positive")
        if not self.label_hi > self.label_lo:
            raise ValueError("label_hi must exceed label_lo")
        if self.generator.n_in != self.noise_dim + 1 or self.generator.n_out != self.data_dim:
            raise ValueError("generator must map noise_dim + 1 -> data_dim")
        if self.discriminator.n_in != self.data_dim + 1 or self.discriminator.n_out != 1:
            raise ValueError("discriminator must map data_dim + 1 -> 1")
        if self.discriminator.layers[-1].activation != "sigmoid":
            raise ValueError("discriminator must end in a sigmoid")
        if self.data_shift is None:
            self.data_shift = np.zeros(self.data_dim)
        if self.data_scale is None:
            self.data_scale = np.ones(self.data_dim)

    def normalize_label(self, y):
        return (np.asarray(y, dtype=float) - self.label_lo) / (self.label_hi - self.label_lo)

    def denormalize_label(self, u):
        return self.label_lo + np.asarray(u, dtype=float) * (self.label_hi - self.label_lo)

    def standardize(self, x):
        return (np.asarray(x, dtype=float) - self.data_shift) / self.data_scale

    def unstandardize(self, s):
        return s * self.data_scale + self.data_shift

    def discriminate(self, x, y_norm):
        """``D(x, y)`` in eval mode for data ``x`` and normalised labels."""
        inp = np.column_stack([self.standardize(x), np.asarray(y_norm, dtype=float)])
        return forward(self.discriminator, inp, "eval")[0][:, 0]

    def save(self, path):
        header = {
            "arch_id": self.arch_id, "noise_dim": self.noise_dim, "data_dim": self.data_dim,
            "label_lo": self.label_lo, "label_hi": self.label_hi,
            "hvdl": self.hvdl.__dict__.copy(), "history": self.history,
            "nets": {name: _net_meta(net) for name, net in
                     (("generator", self.generator), ("discriminator", self.discriminator))},
        }
        blocks = {"data_shift": self.data_shift, "data_scale": self.data_scale}
        for name, net in (("generator", self.generator), ("discriminator", self.discriminator)):
            blocks.update(_net_blocks(name, net))
        io.save_model(path, MAGIC, header, blocks)

    @classmethod
    def load(cls, path) -> "GanModel":
        header, blocks = io.load_model(path, MAGIC)
        nets = {name: _net_from(name, header["nets"][name], blocks)
                for name in ("generator", "discriminator")}
        return cls(nets["generator"], nets["discriminator"], header["noise_dim"],
                   header["label_lo"], header["label_hi"], header["data_dim"],
                   HvdlParams(**header["hvdl"]), header["arch_id"],
                   blocks["data_shift"], blocks["data_scale"], header.get("history", {}))


def _net_meta(net):
    return [{"activation": L.activation, "slope": L.slope, "bn": L.bn is not None,
             "momentum": L.bn.momentum if L.bn else None,
             "eps_bn": L.bn.eps_bn if L.bn else None} for L in net.layers]


def _net_blocks(prefix, net):
    out = {}
    for i, L in enumerate(net.layers):
        out[f"{prefix}.{i}.W"] = L.W
        out[f"{prefix}.{i}.b"] = L.b
        if L.bn is not None:
            for attr in ("gamma", "beta", "running_mean", "running_var"):
                out[f"{prefix}.{i}.{attr}"] = getattr(L.bn, attr)
    return out


def _net_from(prefix, meta, blocks):
    from .nets import BatchNorm, Layer

    layers = []
    for i, m in enumerate(meta):
        bn = None
        if m["bn"]:
            bn = BatchNorm(*(blocks[f"{prefix}.{i}.{a}"].copy()
                             for a in ("gamma", "beta", "running_mean", "running_var")),
                           momentum=m["momentum"], eps_bn=m["eps_bn"])
        layers.append(Layer(blocks[f"{prefix}.{i}.W"].copy(), blocks[f"{prefix}.{i}.b"].copy(),
                            m["activation"], bn, m["slope"]))
    return DenseNet(layers, mode="eval")


def build_gan(arch_id, noise_dim, data_dim, label_lo, label_hi, hvdl: HvdlParams, seed=0,
              data_shift=None, data_scale=None) -> GanModel:
    if arch_id not in ARCHITECTURES:
        raise KeyError(f"unknown architecture {arch_id!r}; choose from {sorted(ARCHITECTURES)}")
    G, D = ARCHITECTURES[arch_id](int(noise_dim), int(data_dim), rng.stream(seed, 0))
    return GanModel(G, D, int(noise_dim), float(label_lo), float(label_hi), int(data_dim), hvdl,
                    arch_id, data_shift, data_scale)


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _sigmoid(z):
    return np.exp(_log_sigmoid(z))


def _vicinity_weights(targets, labels, kappa):
    """Row j: ``1{|targets_j - labels_i| <= kappa} / count_j``; empty rows zero."""
    mask = np.abs(targets[:, None] - labels[None, :]) <= kappa
    counts = mask.sum(axis=1)
    keep = counts > 0
    w = np.zeros(mask.shape)
    w[keep] = mask[keep] / counts[keep, None]
    return w, keep


def hvdl_losses(model: GanModel, real_batch, fake_batch, gen: np.random.Generator):
    """Exact hard vicinal losses over all vicinal pairs of two batches.

    ``real_batch = (x_r, y_r)`` and ``fake_batch = (x_g, y_g)`` carry data in
    physical units and labels already normalised to [0, 1].  Each anchor label
    ``y_j`` is perturbed once by ``N(0, sigma^2)``; the discriminator is scored
    on every sample ``i`` within ``kappa`` of the perturbed anchor, weighted by
    the inverse vicinity size.  Anchors with empty vicinities are dropped and
    the average taken over the remaining ones.
    """
    xr, yr = np.asarray(real_batch[0], float), np.asarray(real_batch[1], float).reshape(-1)
    xg, yg = np.asarray(fake_batch[0], float), np.asarray(fake_batch[1], float).reshape(-1)
    if xr.shape[0] == 0 or xg.shape[0] == 0:
        raise ValueError("batches must be non-empty")
    hv = model.hvdl

    def scored(x, y):
        tgt = y + hv.sigma_label * gen.standard_normal(y.size)
        w, keep = _vicinity_weights(tgt, y, hv.kappa_vicinity)
        if not keep.all():
            log.warning("%d of %d anchors have empty vicinities", int((~keep).sum()), keep.size)
        j, i = np.nonzero(w)
        if j.size == 0:
            return np.zeros(0), np.zeros(0), 0
        z = forward(model.discriminator,
                    np.column_stack([model.standardize(x[i]), tgt[j]]), "eval")[1].pre_act[-1][:, 0]
        return z, w[j, i], int(keep.sum())

    zr, wr, nr = scored(xr, yr)
    zg, wg, ng = scored(xg, yg)
    d_loss = 0.0
    if nr:
        d_loss -= hv.C1 * np.sum(wr * _log_sigmoid(zr)) / nr
    if ng:
        d_loss -= hv.C2 * np.sum(wg * _log_sigmoid(-zg)) / ng
    if not ng:
        return float(d_loss), 0.0
    if hv.g_objective == "nonsaturating":
        g_loss = -hv.C2 * np.sum(wg * _log_sigmoid(zg)) / ng
    else:
        g_loss = hv.C2 * np.sum(wg * _log_sigmoid(-zg)) / ng
    return float(d_loss), float(g_loss)


class _VicinitySampler:
    """Draws vicinal (real sample, perturbed label) pairs from sorted labels."""

    def __init__(self, labels_norm, kappa, sigma, gen):
        self.order = np.argsort(labels_norm, kind="stable")
        self.sorted = labels_norm[self.order]
        self.labels = labels_norm
        self.kappa, self.sigma, self.gen = kappa, sigma, gen

    def draw(self, n):
        g = self.gen
        anchors = self.labels[g.integers(0, self.labels.size, n)]
        tgt = anchors + self.sigma * g.standard_normal(n)
        lo = np.searchsorted(self.sorted, tgt - self.kappa, "left")
        hi = np.searchsorted(self.sorted, tgt + self.kappa, "right")
        count = hi - lo
        keep = count > 0
        tgt, lo, count = tgt[keep], lo[keep], count[keep]
        pick = lo + np.minimum((g.random(tgt.size) * count).astype(int), count - 1)
        return tgt, self.order[pick]


def _train_d(model, opt, xr_std, tgt, xg_std, hv, lr, b1, b2):
    D = model.discriminator
    out_r, cr = forward(D, np.column_stack([xr_std, tgt]), "train")
    out_g, cg = forward(D, np.column_stack([xg_std, tgt]), "train")
    zr, zg = cr.pre_act[-1], cg.pre_act[-1]
    n = zr.shape[0]
    loss = -(hv.C1 * _log_sigmoid(zr).mean() + hv.C2 * _log_sigmoid(-zg).mean())
    gr, _ = backward(D, cr, -hv.C1 * (1.0 - _sigmoid(zr)) / n, skip_last_activation=True)
    gg, _ = backward(D, cg, hv.C2 * _sigmoid(zg) / n, skip_last_activation=True)
    adam_step(D.params(), [a + b for a, b in zip(gr, gg)], opt, lr, b1, b2)
    D.touch()
    return float(loss)


def _train_g(model, opt, noise, tgt, hv, lr, b1, b2):
    G, D = model.generator, model.discriminator
    xg, cgen = forward(G, np.column_stack([noise, tgt]), "train")
    _, cd = forward(D, np.column_stack([xg, tgt]), "train")
    z = cd.pre_act[-1]
    n = z.shape[0]
    if hv.g_objective == "nonsaturating":
        loss = -hv.C2 * _log_sigmoid(z).mean()
        up = -hv.C2 * (1.0 - _sigmoid(z)) / n
    else:
        loss = hv.C2 * _log_sigmoid(-z).mean()
        up = -hv.C2 * _sigmoid(z) / n
    _, gin = backward(D, cd, up, skip_last_activation=True)
    grads, _ = backward(G, cgen, gin[:, :model.data_dim])
    adam_step(G.params(), grads, opt, lr, b1, b2)
    G.touch()
    return float(loss)


def train_ccgan(data: SampleSet, arch_id: str, cfg: TrainConfig, hvdl: Optional[HvdlParams] = None,
                noise_dim: int = 1) -> GanModel:
    """Alternating Adam updates of discriminator and generator.

    Each discriminator step draws ``batch_size`` perturbed target labels
    ``y + eps``, pairs each with one real sample chosen uniformly from its
    hard vicinity and with one fake sample generated at a label drawn
    uniformly from the same vicinity.  This is a one-draw Monte Carlo
    estimate of the full vicinal double sum in ``hvdl_losses``.  An epoch is
    ``ceil(N / batch_size)`` generator steps.
    """
    if data.labels is None:
        raise ValueError("training data needs scalar labels")
    x = np.asarray(data.points, dtype=float)
    y = np.asarray(data.labels, dtype=float).reshape(-1)
    if y.size != x.shape[0]:
        raise ValueError("labels must be scalar, one per sample")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("training data must be finite")
    lo, hi = float(y.min()), float(y.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    shift = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    u = (y - lo) / (hi - lo)
    hv = hvdl if hvdl is not None else default_hvdl(y)
    model = build_gan(arch_id, noise_dim, x.shape[1], lo, hi, hv, cfg.seed, shift, scale)
    xs = (x - shift) / scale

    gen = rng.stream(cfg.seed, 1)
    sampler = _VicinitySampler(u, hv.kappa_vicinity, hv.sigma_label, gen)
    d_opt = AdamState.zeros_like(model.discriminator.params())
    g_opt = AdamState.zeros_like(model.generator.params())
    B = cfg.batch_size
    per_epoch = int(np.ceil(x.shape[0] / B))
    hist = {"d_loss": [], "g_loss": []}
    stall = 0
    for epoch in range(cfg.epochs):
        d_acc = g_acc = 0.0
        for _ in range(per_epoch):
            for _ in range(cfg.d_steps_per_g_step):
                tgt, idx = sampler.draw(B)
                if tgt.size < 2:
                    continue
                yg = tgt + hv.kappa_vicinity * (2.0 * gen.random(tgt.size) - 1.0)
                noise = gen.standard_normal((tgt.size, noise_dim))
                xg = forward(model.generator, np.column_stack([noise, yg]), "train")[0]
                d_acc += _train_d(model, d_opt, xs[idx], tgt, xg, hv, cfg.lr, cfg.beta1, cfg.beta2)
            tgt, _ = sampler.draw(B)
            noise = gen.standard_normal((tgt.size, noise_dim))
            g_acc += _train_g(model, g_opt, noise, tgt, hv, cfg.lr, cfg.beta1, cfg.beta2)
        d_mean = d_acc / (per_epoch * cfg.d_steps_per_g_step)
        g_mean = g_acc / per_epoch
        if not (np.isfinite(d_mean) and np.isfinite(g_mean)):
            raise TrainingDiverged(epoch, d_mean, g_mean)
        hist["d_loss"].append(d_mean)
        hist["g_loss"].append(g_mean)
        if cfg.early_stop_patience and epoch > 0:
            if abs(hist["d_loss"][-1] - hist["d_loss"][-2]) < cfg.early_stop_tol:
                stall += 1
                if stall >= cfg.early_stop_patience:
                    log.info("early stop at epoch %d", epoch)
                    break
            else:
                stall = 0
    model.generator.mode = model.discriminator.mode = "eval"
    model.history = hist
    return model


def sample_ccgan(model: GanModel, label, n: int, seed: int = 0) -> SampleSet:
    """``n`` eval-mode generator draws at ``label`` (scalar or length-``n`` array)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    labels = np.broadcast_to(np.asarray(label, dtype=float), (n,)).copy()
    noise = rng.normals(rng.stream(seed, 0), n, model.noise_dim)
    inp = np.column_stack([noise, model.normalize_label(labels)])
    out = forward(model.generator, inp, "eval")[0]
    return SampleSet(model.unstandardize(out), labels=labels)
