"""Adaptive adversary: scheme-aware synthesis of surrogate key images and the attacks that use them."""
from __future__ import annotations

import json
import logging
import string
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import models as M
from . import removal as R
from .data import LabeledImageSet, Provenance, image_pool, load_png, quantize, save_png
from .nets import Discriminator, UNet, discriminator_step, fool_loss
from .schemes import (SCHEMES, WatermarkedModel, fgsm, mark_pattern, random_labels, superimpose,
                      text_mask, trigger_recall)
from .seeding import derive_seed, seed_everything

log = logging.getLogger(__name__)

MODES = {
    "content": "content",
    "noise": "residual",
    "mark": "residual",
    "exp": "indist",
    "encoder": "indist",
    "abstract": "pool",
    "passport": "pool",
    "deepsigns": "pool",
    "unrelated": "pool",
    "adv": "fgsm",
}
# out-of-task pools the adversary samples for pool-mode schemes
POOL_FOR = {"abstract": "abstract", "passport": "abstract", "deepsigns": "uniform", "unrelated": "objects"}
DEFAULT_LAMBDA = 1.0
DEFAULT_GAMMA = 0.01


class SynthError(RuntimeError):
    pass


@dataclass
class AdaptiveSynth:
    scheme_id: str
    y_t: int
    nets: dict
    lam: float
    gamma: float
    discriminator: nn.Module | None = None
    loss_log: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def mode(self):
        return MODES[self.scheme_id]

    def __post_init__(self):
        expected = {"content": {"content", "mask"}, "residual": {"z"}, "indist": {"ae"}, "pool": {"ae"},
                    "fgsm": set()}[self.mode]
        if set(self.nets) != expected:
            raise SynthError(f"{self.scheme_id} synth needs networks {sorted(expected)}, got {sorted(self.nets)}")
        if not (np.isfinite(self.lam) and np.isfinite(self.gamma)):
            raise SynthError("lambda and gamma must be finite")


@dataclass
class SurrogateTriggerSet:
    images: np.ndarray
    y_t: np.ndarray
    assigned_labels: np.ndarray
    scheme_id: str
    sources: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.y_t = np.asarray(self.y_t, dtype=np.int64).reshape(-1)
        self.assigned_labels = np.asarray(self.assigned_labels, dtype=np.int64).reshape(-1)
        if not (len(self.images) == len(self.y_t) == len(self.assigned_labels)):
            raise SynthError("images, y_t and assigned labels must have equal length")
        if np.any(self.assigned_labels == self.y_t):
            raise SynthError("every assigned label must differ from its y_t")

    def __len__(self):
        return len(self.y_t)

    @classmethod
    def empty(cls, shape, scheme_id="unrelated"):
        z = np.zeros(0, np.int64)
        return cls(np.zeros((0, *shape), np.float32), z, z, scheme_id, np.zeros((0, *shape), np.float32))

    def save(self, directory) -> Path:
        d = Path(directory)
        (d / "keys").mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(self.images):
            save_png(img, d / "keys" / f"{i}.png")
        if self.sources is not None:
            (d / "sources").mkdir(exist_ok=True)
            for i, img in enumerate(self.sources):
                save_png(img, d / "sources" / f"{i}.png")
        for fname, col, vals in (("labels.csv", "target_label", self.y_t), ("y_t.csv", "y_t", self.y_t),
                                 ("assigned_labels.csv", "assigned_label", self.assigned_labels)):
            with open(d / fname, "w") as fh:
                fh.write(f"idx,{col}\n")
                fh.writelines(f"{i},{int(v)}\n" for i, v in enumerate(vals))
        meta = {"scheme_id": self.scheme_id, "shape": list(self.images.shape[1:]),
                "has_sources": self.sources is not None, "meta": self.meta}
        (d / "meta.json").write_text(json.dumps(meta, indent=1))
        return d

    @classmethod
    def load(cls, directory) -> "SurrogateTriggerSet":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        c = meta["shape"][-1]

        def col(fname):
            return np.loadtxt(d / fname, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)[:, 1]

        y_t, assigned = col("y_t.csv"), col("assigned_labels.csv")
        n = len(y_t)
        imgs = np.stack([load_png(d / "keys" / f"{i}.png", c) for i in range(n)]) if n \
            else np.zeros((0, *meta["shape"]), np.float32)
        src = None
        if meta["has_sources"]:
            src = np.stack([load_png(d / "sources" / f"{i}.png", c) for i in range(n)]) if n \
                else np.zeros((0, *meta["shape"]), np.float32)
        return cls(imgs, y_t, assigned, meta["scheme_id"], src, meta.get("meta", {}))


# --------------------------------------------------------------------------- scheme-specific samplers

def random_content(rng, n, shape):
    """Random short glyph strings at random heights: content image C (white glyphs) and mask M."""
    h, w, c = shape
    out = np.zeros((n, h, w, c), np.float32)
    for i in range(n):
        text = "".join(rng.choice(list(string.ascii_uppercase), size=int(rng.integers(2, 5))))
        m = text_mask(text, shape, strip=float(rng.uniform(0.15, 0.3)))
        shift = int(rng.integers(0, h // 2))
        out[i] = np.roll(m, -shift, axis=0)
    return out, out.copy()


def random_residual(scheme_id, rng, n, shape, sigma=0.1):
    if scheme_id == "noise":
        return rng.normal(0.0, sigma, (n, *shape)).astype(np.float32)
    # mark: the owner's signature is secret, so sample patterns from random signatures
    return np.stack([mark_pattern(f"guess-{rng.integers(1 << 30)}", shape, sigma) for _ in range(n)])


def _classifier(wm):
    net = wm.model if isinstance(wm, WatermarkedModel) else wm
    return net


class _FrozenView:
    """Evaluate the watermarked model in bypass mode (if it has one) without mutating it for good."""

    def __init__(self, net):
        self.net = net
        self.prev = getattr(net, "mode", None)

    def __enter__(self):
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        if self.prev is not None:
            self.net.set_mode("bypass")
        return self.net

    def __exit__(self, *exc):
        for p in self.net.parameters():
            p.requires_grad_(True)
        if self.prev is not None:
            self.net.set_mode(self.prev)


def synth_sources(scheme_id, sources: LabeledImageSet, n_pool: int, seed: int) -> np.ndarray:
    """Images the synth networks transform: adversary test images, or a scheme-appropriate random pool."""
    if MODES[scheme_id] == "pool":
        return image_pool(POOL_FOR[scheme_id], n_pool, sources.shape, derive_seed(seed, "adaptive-pool", scheme_id))
    return sources.images


# --------------------------------------------------------------------------- synthesis

def total_loss(l_ae, lam, l_f):
    """Synth objective: reconstruction term plus lam-weighted push toward y_t."""
    return l_ae + lam * l_f


def content_ae_loss(mse, gamma, mask_l1):
    """Content-mode reconstruction term; the L1 penalty keeps the synthesized mask small."""
    return mse + gamma * mask_l1


def _forward(synth: AdaptiveSynth, x, aux):
    """x' for a batch; aux carries the scheme's random inputs (C, M) or Z. Returns x', L_ae parts."""
    mode = synth.mode
    if mode == "content":
        c, m = aux
        c2 = synth.nets["content"](c)
        m2 = synth.nets["mask"](m)
        xp = superimpose(x, c2, m2)
        mask_l1 = m2.flatten(1).abs().sum(1).mean()
        mse = F.mse_loss(c2, c)
        return xp, {"mse": mse, "mask_l1": mask_l1, "l_ae": content_ae_loss(mse, synth.gamma, mask_l1)}
    if mode == "residual":
        z = aux
        z2 = synth.nets["z"](z)
        xp = (x + z2).clamp(0.0, 1.0)
        return xp, {"l_ae": F.mse_loss(z2, z)}
    xp = synth.nets["ae"](x)
    mse = F.mse_loss(xp, x)
    if mode == "indist":
        dis = fool_loss(synth.discriminator, xp)
        return xp, {"mse": mse, "dis": dis, "l_ae": mse + synth.gamma * dis}
    return xp, {"l_ae": mse}


def _aux(synth, rng, n, shape):
    if synth.mode == "content":
        c, m = random_content(rng, n, shape)
        return torch.from_numpy(c).permute(0, 3, 1, 2), torch.from_numpy(m).permute(0, 3, 1, 2)
    if synth.mode == "residual":
        z = random_residual(synth.scheme_id, rng, n, shape, synth.meta.get("sigma", 0.1))
        return torch.from_numpy(z).permute(0, 3, 1, 2)
    return None


def _new_nets(scheme_id, channels):
    mode = MODES[scheme_id]
    if mode == "content":
        return {"content": UNet(channels), "mask": UNet(channels)}
    if mode == "residual":
        return {"z": UNet(channels, out="residual", residual_scale=0.5)}
    if mode in ("indist", "pool"):
        return {"ae": UNet(channels)}
    return {}


def train_synth(scheme_id: str, wm, sources: LabeledImageSet, y_t: int, lam: float = DEFAULT_LAMBDA,
                gamma: float = DEFAULT_GAMMA, spec: M.TrainSpec | None = None, n_pool: int = 500,
                seed: int = 0, sigma: float = 0.1) -> AdaptiveSynth:
    """Minimize L_ae + lam * CE(f(x'), y_t) with the watermarked model f frozen."""
    if scheme_id not in SCHEMES:
        raise SynthError(f"unknown scheme {scheme_id!r}")
    if lam < 0 or gamma < 0:
        raise SynthError("lambda and gamma must be non-negative")
    spec = spec or M.TrainSpec("adam", 1e-3, 5, 64, seed)
    net = _classifier(wm)
    K = net.num_classes
    if not 0 <= y_t < K:
        raise SynthError(f"y_t must lie in [0, {K})")
    gen = seed_everything(derive_seed(spec.seed, "synth", scheme_id, y_t))
    rng = np.random.default_rng(derive_seed(spec.seed, "synth-aux", scheme_id, y_t))
    shape = sources.shape
    nets = _new_nets(scheme_id, shape[-1])
    disc = Discriminator(shape[-1]) if MODES[scheme_id] == "indist" else None
    synth = AdaptiveSynth(scheme_id, int(y_t), nets, float(lam), float(gamma), disc, meta={"sigma": sigma})
    if synth.mode == "fgsm":
        return synth
    x_all = M.to_tensor(synth_sources(scheme_id, sources, n_pool, seed))
    real = M.to_tensor(sources.images)
    params = [p for n in nets.values() for p in n.parameters()]
    opt = M.make_optimizer(params, spec)
    opt_d = torch.optim.Adam(disc.parameters(), lr=spec.learning_rate) if disc is not None else None
    target = torch.full((spec.batch_size,), int(y_t), dtype=torch.long)
    step = 0
    with _FrozenView(net) as f:
        for epoch in range(spec.epochs):
            for n in nets.values():
                n.train()
            perm = torch.randperm(len(x_all), generator=gen)
            for s in range(0, len(x_all), spec.batch_size):
                xb = x_all[perm[s:s + spec.batch_size]]
                aux = _aux(synth, rng, len(xb), shape)
                if disc is not None:
                    with torch.no_grad():
                        fake = nets["ae"](xb)
                    ridx = torch.randint(0, len(real), (len(xb),), generator=gen)
                    discriminator_step(disc, opt_d, real[ridx], fake)
                opt.zero_grad()
                xp, parts = _forward(synth, xb, aux)
                l_f = F.cross_entropy(f(xp), target[:len(xb)])
                total = total_loss(parts["l_ae"], lam, l_f)
                if not torch.isfinite(total):
                    raise SynthError(f"synth loss diverged at step {step}")
                total.backward()
                opt.step()
                synth.loss_log.append({"step": step, "epoch": epoch, "l_ae": parts["l_ae"].item(),
                                       "l_f": l_f.item(), "total": total.item(),
                                       **{k: v.item() for k, v in parts.items() if k != "l_ae"}})
                step += 1
    for n in nets.values():
        n.eval()
    return synth


@torch.no_grad()
def synthesize(synth: AdaptiveSynth, wm, x: np.ndarray, seed: int = 0, epsilon: float = 0.1, labels=None):
    """Apply a trained synth to source images; returns (x', diagnostics)."""
    net = _classifier(wm)
    if synth.mode == "fgsm":
        with torch.enable_grad():
            with _FrozenView(net) as f:
                xp = fgsm(f, x, labels, epsilon)
        return xp, {}
    rng = np.random.default_rng(derive_seed(seed, "synth-gen", synth.scheme_id, synth.y_t))
    aux = _aux(synth, rng, len(x), x.shape[1:])
    xp, parts = _forward(synth, M.to_tensor(x), aux)
    diag = {}
    if synth.mode == "content":
        diag["mask_l1"] = float(aux[1].new_tensor(0) + synth.nets["mask"](aux[1]).flatten(1).sum(1).mean())
    return quantize(M.to_numpy_images(xp)), diag


def fooling_rate(wm, images, y_t) -> float:
    net = _classifier(wm)
    with _FrozenView(net) as f:
        pred = M.predict(f, images)
    return float((pred == y_t).mean())


def synth_trigger_pairs(wm, scheme_id: str, sources: LabeledImageSet, lam: float = DEFAULT_LAMBDA,
                        gamma: float = DEFAULT_GAMMA, spec: M.TrainSpec | None = None, label_seed: int = 0,
                        per_class: int = 50, n_pool: int = 500, epsilon: float = 0.1,
                        seed: int = 0) -> SurrogateTriggerSet:
    """Train one synth per target class, collect (x', y_t) and assign each a random label other than y_t."""
    net = _classifier(wm)
    K = net.num_classes
    rng = np.random.default_rng(derive_seed(seed, "pairs", scheme_id))
    pool = synth_sources(scheme_id, sources, n_pool, seed)
    imgs, yts, srcs, meta = [], [], [], {"lambda": lam, "gamma": gamma, "per_class": per_class,
                                         "mode": MODES[scheme_id], "fooling": {}, "mask_l1": {}}
    t0 = time.time()
    if MODES[scheme_id] == "fgsm":
        idx = np.sort(rng.choice(len(sources), size=min(len(sources), per_class * K), replace=False))
        x, y = sources.images[idx], sources.labels[idx]
        synth = train_synth(scheme_id, wm, sources, 0, lam, gamma, spec, n_pool, seed)
        xp, _ = synthesize(synth, wm, x, seed, epsilon, labels=y)
        imgs, yts, srcs = [xp], [y], [x]
        meta["fooling"]["all"] = fooling_rate(wm, xp, y)
    else:
        for y_t in range(K):
            synth = train_synth(scheme_id, wm, sources, y_t, lam, gamma, spec, n_pool, seed)
            idx = rng.choice(len(pool), size=min(per_class, len(pool)), replace=False)
            x = pool[idx]
            xp, diag = synthesize(synth, wm, x, seed)
            imgs.append(xp)
            srcs.append(x)
            yts.append(np.full(len(xp), y_t))
            meta["fooling"][str(y_t)] = fooling_rate(wm, xp, y_t)
            if "mask_l1" in diag:
                meta["mask_l1"][str(y_t)] = diag["mask_l1"]
    y_t = np.concatenate(yts)
    lrng = np.random.default_rng(label_seed)
    assigned = random_labels(lrng, len(y_t), K, y_t)
    meta["runtime_s"] = time.time() - t0
    log.info("synthesized %d %s pairs, mean fooling %.3f", len(y_t), scheme_id,
             float(np.mean(list(meta["fooling"].values()))))
    return SurrogateTriggerSet(np.concatenate(imgs), y_t, assigned, scheme_id, np.concatenate(srcs), meta)


# --------------------------------------------------------------------------- adaptive attacks

def adaptive_finetune(wm, adv_data, surrogate, st: SurrogateTriggerSet, spec: M.TrainSpec, eval_set):
    return R.finetune_attack(wm, adv_data, surrogate, spec, eval_set, st=st, attack_id="adaptive_finetune")


def adaptive_steal(wm, surrogate, adv_data, st: SurrogateTriggerSet, arch, spec: M.TrainSpec, eval_set):
    return R.steal_attack(wm, surrogate, adv_data, arch, spec, eval_set, st=st, attack_id="adaptive_steal")


def _fc_activations(net, images):
    """Pre-activation outputs of every dense layer (and their inputs) for a batch."""
    outs, ins = [], []

    def hook(mod, inp, out):
        ins.append(inp[0].detach())
        outs.append(out.detach())

    hooks = [m.register_forward_hook(hook) for m in net.fc_linears()]
    try:
        with torch.no_grad():
            net(M.to_tensor(images))
    finally:
        for h in hooks:
            h.remove()
    return ins, outs


def activation_scores(wm, st: SurrogateTriggerSet, mode: str = "neuron", post_activation: bool = False) -> np.ndarray:
    """Per-FC-weight contrast between source x and synthesized x' batches, flattened in fc_param_index order.

    neuron: every weight feeding neuron j scores mean|a_j(x) - a_j(x')|.
    contribution: weight w_ij scores |w_ij| * mean|h_i(x) - h_i(x')|.
    """
    if st.sources is None or len(st) == 0:
        raise SynthError("activation scores need paired (x, x') images")
    net = _classifier(wm)
    with _FrozenView(net) as f:
        ins_x, outs_x = _fc_activations(f, st.sources)
        ins_p, outs_p = _fc_activations(f, st.images)
    scores = []
    for lin, ix, ip, ox, op in zip(net.fc_linears(), ins_x, ins_p, outs_x, outs_p):
        if mode == "neuron":
            if post_activation:
                ox, op = F.relu(ox), F.relu(op)
            d = (ox - op).abs().mean(0)
            s = d[:, None].expand_as(lin.weight)
        elif mode == "contribution":
            d = (ix - ip).abs().mean(0)
            s = lin.weight.detach().abs() * d[None, :]
        else:
            raise SynthError(f"unknown activation score mode {mode!r}")
        scores.append(s.reshape(-1).numpy())
    return np.concatenate(scores)


def adaptive_prune(wm, st: SurrogateTriggerSet, p: float, eval_set, mode: str = "neuron",
                   post_activation: bool = False, scores=None, acc_before=None, recall_before=None):
    """Zero the p% FC weights whose downstream activations react most to the synthesized keys."""
    t0 = time.time()
    if scores is None:
        scores = activation_scores(wm, st, mode, post_activation)
    idx = R.prune_indices(scores, p, largest=True)
    model = M.clone_model(_classifier(wm))
    R.apply_prune(model, idx)
    model.tags.append("removal:adaptive_prune")
    return R._outcome("adaptive_prune", wm, model, eval_set,
                      {"p": p, "n_pruned": int(len(idx)), "score_mode": mode, "post_activation": post_activation},
                      t0, acc_before=acc_before, recall_before=recall_before)


def adaptive_prune_sweep(wm, st, eval_set, ps=R.PRUNE_SWEEP, mode="neuron", post_activation=False,
                         max_acc_drop=R.MAX_ACC_DROP):
    scores = activation_scores(wm, st, mode, post_activation)
    base = _classifier(wm)
    acc0, rec0 = M.evaluate_accuracy(base, eval_set), trigger_recall(base, wm.trigger)
    outs = [adaptive_prune(wm, st, p, eval_set, mode, post_activation, scores, acc0, rec0) for p in ps]
    return outs, R.select_min_recall(outs, max_acc_drop)
