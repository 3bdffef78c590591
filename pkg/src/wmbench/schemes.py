"""Trigger-set watermarking: key generation, target labels, embedding, and recall-based verification."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.utils.parametrize as parametrize
from PIL import Image, ImageDraw, ImageFont

from . import models as M
from .data import LabeledImageSet, Provenance, concat_sets, image_pool, load_png, quantize, save_png
from .seeding import derive_seed

log = logging.getLogger(__name__)

SCHEMES = ("content", "noise", "unrelated", "mark", "abstract", "adv", "passport", "encoder", "exp", "deepsigns")
SINGLE_LABEL = ("content", "noise", "unrelated")
FINETUNED = ("mark", "adv", "exp")
NEEDS_MODEL0 = ("adv", "deepsigns", "exp")
# schemes whose keys are carved out of the owner's training images
FROM_TRAIN = ("exp", "encoder")

DEFAULTS = {
    "n": 100,
    "sigma": 0.1,
    "epsilon": 0.1,
    "text": "TEST",
    "signature": "owner",
    "unrelated_pool": "faces",
    "abstract_pool": "abstract",
    "encoder_epochs": 3,
}


class SchemeError(ValueError):
    pass


@dataclass
class TriggerSet:
    key_images: np.ndarray
    target_labels: np.ndarray
    scheme_id: str
    gen_params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.key_images = np.asarray(self.key_images, dtype=np.float32)
        self.target_labels = np.asarray(self.target_labels, dtype=np.int64).reshape(-1)
        if len(self.key_images) != len(self.target_labels):
            raise SchemeError(f"{len(self.key_images)} keys but {len(self.target_labels)} labels")
        if self.scheme_id not in SCHEMES:
            raise SchemeError(f"unknown scheme {self.scheme_id!r}")

    def __len__(self):
        return len(self.target_labels)

    @property
    def source_index(self):
        idx = self.gen_params.get("source_index")
        return None if idx is None else np.asarray(idx, dtype=np.int64)

    def as_set(self, num_classes: int) -> LabeledImageSet:
        return LabeledImageSet(self.key_images, self.target_labels, Provenance.SYNTHETIC, num_classes,
                               f"trigger:{self.scheme_id}")

    def subset(self, idx) -> "TriggerSet":
        idx = np.asarray(idx, dtype=np.int64)
        params = dict(self.gen_params)
        for k in ("source_index", "source_labels"):
            if params.get(k) is not None:
                params[k] = [params[k][i] for i in idx]
        return TriggerSet(self.key_images[idx], self.target_labels[idx], self.scheme_id, params)

    def save(self, directory) -> Path:
        out = Path(directory)
        (out / "keys").mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(self.key_images):
            save_png(img, out / "keys" / f"{i}.png")
        with open(out / "labels.csv", "w") as fh:
            fh.write("idx,target_label\n")
            for i, y in enumerate(self.target_labels):
                fh.write(f"{i},{int(y)}\n")
        meta = {"scheme_id": self.scheme_id, "gen_params": self.gen_params,
                "shape": list(self.key_images.shape[1:])}
        (out / "meta.json").write_text(json.dumps(meta, indent=1, default=_jsonable))
        return out

    @classmethod
    def load(cls, directory) -> "TriggerSet":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        rows = np.loadtxt(d / "labels.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        channels = meta["shape"][-1]
        keys = np.stack([load_png(d / "keys" / f"{i}.png", channels) for i in rows[:, 0]]) if len(rows) \
            else np.zeros((0, *meta["shape"]), np.float32)
        return cls(keys, rows[:, 1], meta["scheme_id"], meta["gen_params"])


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not serializable: {type(o)}")


# --------------------------------------------------------------------------- primitives

def superimpose(x, content, mask):
    """(1 - M) * x + M * C, elementwise with broadcasting."""
    if isinstance(x, torch.Tensor):
        return (1 - mask) * x + mask * content
    x, content, mask = (np.asarray(a, dtype=np.float32) for a in (x, content, mask))
    try:
        np.broadcast_shapes(x.shape, content.shape, mask.shape)
    except ValueError as exc:
        raise SchemeError(f"shape mismatch: x {x.shape}, content {content.shape}, mask {mask.shape}") from exc
    return (1 - mask) * x + mask * content


def text_mask(text: str, shape, strip: float = 0.2) -> np.ndarray:
    """Binary glyph mask of ``text`` drawn in the bottom strip of an (H, W, C) image."""
    h, w, c = shape
    sh = max(4, int(round(h * strip)))
    font = ImageFont.load_default(size=max(6, sh + 2))
    canvas = Image.new("L", (w, sh), 0)
    draw = ImageDraw.Draw(canvas)
    left, top, right, bottom = draw.textbbox((0, 0), text, font=font)
    draw.text(((w - (right - left)) / 2 - left, (sh - (bottom - top)) / 2 - top), text, fill=255, font=font)
    m = np.zeros((h, w, c), np.float32)
    m[h - sh:] = (np.asarray(canvas) > 127).astype(np.float32)[..., None]
    return m


def fgsm(model, images, labels, epsilon: float) -> np.ndarray:
    """x' = clip(x + eps * sign(grad_x CE)), quantized to 8-bit levels."""
    if epsilon == 0:
        return np.array(images, dtype=np.float32, copy=True)
    g = M.input_gradient(model, images, labels)
    return quantize(images + epsilon * np.sign(g))


def random_labels(rng, n: int, num_classes: int, exclude=None) -> np.ndarray:
    """Uniform labels; ``exclude`` is a scalar or per-key array of forbidden classes."""
    if exclude is None:
        return rng.integers(0, num_classes, n)
    exclude = np.broadcast_to(np.asarray(exclude, dtype=np.int64), (n,))
    shift = rng.integers(1, num_classes, n)
    return (exclude + shift) % num_classes


def mark_pattern(signature: str, shape, sigma: float) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(signature.encode()).digest()[:8], "little")
    bits = np.random.default_rng(seed).integers(0, 2, shape)
    return (2 * bits - 1).astype(np.float32) * sigma


def mark_offset(signature: str, num_classes: int) -> int:
    return int.from_bytes(hashlib.sha256(("label:" + signature).encode()).digest()[:4], "little") % (num_classes - 1)


# --------------------------------------------------------------------------- trigger generation

def _pick(rng, sources: LabeledImageSet, n, cls=None):
    pool = np.flatnonzero(sources.labels == cls) if cls is not None else np.arange(len(sources))
    if len(pool) == 0:
        raise SchemeError(f"no source images of class {cls}")
    return np.sort(rng.choice(pool, size=n, replace=len(pool) < n))


def generate_trigger_set(scheme_id: str, sources: LabeledImageSet, model0=None, seed: int = 0, **params) -> TriggerSet:
    """Build a trigger set for ``scheme_id`` from the owner's ``sources`` (normally the training set)."""
    if scheme_id not in SCHEMES:
        raise SchemeError(f"unknown scheme {scheme_id!r}; choose from {', '.join(SCHEMES)}")
    if scheme_id in NEEDS_MODEL0 and model0 is None:
        raise SchemeError(f"scheme {scheme_id!r} needs a pretrained model0")
    p = {**DEFAULTS, **params}
    n, K, shape = int(p["n"]), sources.num_classes, sources.shape
    if n <= 0:
        raise SchemeError("empty trigger set requested")
    rng = np.random.default_rng(derive_seed(seed, "trigger", scheme_id))
    gen = {"n": n, "seed": seed}

    if scheme_id in ("content", "noise"):
        src = int(p.get("source_class", rng.integers(K)))
        target = int(p.get("target", random_labels(rng, 1, K, src)[0]))
        if target == src:
            raise SchemeError("target label must differ from the source class")
        idx = _pick(rng, sources, n, src)
        x = sources.images[idx]
        if scheme_id == "content":
            mask = text_mask(p["text"], shape)
            keys = quantize(superimpose(x, np.ones_like(mask), mask))
            gen.update(text=p["text"], mask_fraction=float(mask[..., 0].mean()))
        else:
            z = rng.normal(0.0, p["sigma"], x.shape)
            keys = quantize(x + z)
            gen.update(sigma=p["sigma"])
        labels = np.full(n, target)
        gen.update(source_class=src, target=target, source_index=sources.index[idx].tolist())

    elif scheme_id == "unrelated":
        target = int(p.get("target", rng.integers(K)))
        keys = image_pool(p["unrelated_pool"], n, shape, derive_seed(seed, "pool"), int(p.get("pool_offset", 0)))
        labels = np.full(n, target)
        gen.update(pool=p["unrelated_pool"], target=target)

    elif scheme_id in ("abstract", "passport"):
        keys = image_pool(p["abstract_pool"], n, shape, derive_seed(seed, "pool", scheme_id))
        labels = random_labels(rng, n, K)
        gen.update(pool=p["abstract_pool"])

    elif scheme_id == "mark":
        idx = _pick(rng, sources, n)
        y = sources.labels[idx]
        pattern = mark_pattern(p["signature"], shape, p["sigma"])
        keys = quantize(sources.images[idx] + pattern)
        offset = mark_offset(p["signature"], K)
        labels = (y + 1 + offset) % K
        gen.update(signature=p["signature"], sigma=p["sigma"], offset=offset,
                   source_index=sources.index[idx].tolist(), source_labels=y.tolist())

    elif scheme_id == "adv":
        idx = _pick(rng, sources, n)
        y = sources.labels[idx]
        keys = fgsm(model0, sources.images[idx], y, p["epsilon"])
        labels = y.copy()
        gen.update(epsilon=p["epsilon"], source_index=sources.index[idx].tolist(), source_labels=y.tolist(),
                   model0_flipped=float((M.predict(model0, keys) != y).mean()))

    elif scheme_id == "exp":
        idx = np.sort(rng.choice(len(sources), size=n, replace=False))
        y = sources.labels[idx]
        keys = sources.images[idx].copy()
        labels = random_labels(rng, n, K, y)
        gen.update(source_index=sources.index[idx].tolist(), source_labels=y.tolist())

    elif scheme_id == "encoder":
        from .nets import train_indist_autoencoder
        idx = np.sort(rng.choice(len(sources), size=n, replace=False))
        y = sources.labels[idx]
        rest = np.setdiff1d(np.arange(len(sources)), idx)
        ae = train_indist_autoencoder(sources.images[rest], epochs=int(p["encoder_epochs"]),
                                      seed=derive_seed(seed, "encoder"))
        with torch.no_grad():
            keys = quantize(M.to_numpy_images(ae(M.to_tensor(sources.images[idx]))))
        labels = random_labels(rng, n, K, y)
        gen.update(source_index=sources.index[idx].tolist(), source_labels=y.tolist(),
                   encoder_epochs=int(p["encoder_epochs"]))

    elif scheme_id == "deepsigns":
        keys = image_pool("uniform", n, shape, derive_seed(seed, "pool", "deepsigns"))
        labels = random_labels(rng, n, K)
        resampled = 0
        for _ in range(100):
            hit = M.predict(model0, keys) == labels
            if not hit.any():
                break
            resampled += int(hit.sum())
            keys[hit] = quantize(rng.random((int(hit.sum()), *shape)))
        gen.update(resampled=resampled)

    return TriggerSet(keys, labels, scheme_id, gen)


# --------------------------------------------------------------------------- watermarked models

@dataclass
class WatermarkedModel:
    model: M.Classifier
    trigger: TriggerSet
    scheme_id: str
    embed_spec: M.TrainSpec
    passport_params: dict | None = None
    embed_recall: float | None = None
    test_acc: float | None = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        if (self.passport_params is not None) != (self.scheme_id == "passport"):
            raise SchemeError("passport_params must be present exactly for the passport scheme")

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        M.checkpoint_save(self.model, d / "model.npz")
        self.trigger.save(d / "trigger")
        meta = {"scheme_id": self.scheme_id, "embed_spec": self.embed_spec.__dict__,
                "embed_recall": self.embed_recall, "test_acc": self.test_acc, "history": self.history}
        (d / "meta.json").write_text(json.dumps(meta, indent=1))
        return d

    @classmethod
    def load(cls, directory) -> "WatermarkedModel":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        model = M.checkpoint_load(d / "model.npz")
        pp = model.get_passports() if meta["scheme_id"] == "passport" else None
        return cls(model, TriggerSet.load(d / "trigger"), meta["scheme_id"], M.TrainSpec(**meta["embed_spec"]),
                   pp, meta["embed_recall"], meta["test_acc"], meta.get("history", []))


def _base_model(model):
    return model.model if isinstance(model, WatermarkedModel) else model


def trigger_recall(model, trigger: TriggerSet) -> float:
    """Fraction of keys classified as their target labels; passport models are queried with passports inserted."""
    if len(trigger) == 0:
        raise SchemeError("empty trigger set")
    net = _base_model(model)
    prev = getattr(net, "mode", None)
    if prev is not None and getattr(net, "has_passport", False):
        net.set_mode("passport")
    try:
        pred = M.predict(net, trigger.key_images)
    finally:
        if prev is not None and getattr(net, "has_passport", False):
            net.set_mode(prev)
    return float(np.count_nonzero(pred == trigger.target_labels) / len(trigger))


def embed_training_set(train: LabeledImageSet, trigger: TriggerSet, key_fraction: float = 0.2):
    """train (minus any key sources) plus the keys repeated until they make up about ``key_fraction`` of it."""
    if len(trigger) == 0:
        raise SchemeError("empty trigger set")
    if trigger.scheme_id in FROM_TRAIN and trigger.source_index is not None:
        keep = ~np.isin(train.index, trigger.source_index)
        train = train.subset(np.flatnonzero(keep))
    reps = max(1, int(round(key_fraction * len(train) / len(trigger))))
    keys = trigger.as_set(train.num_classes)
    return concat_sets([train] + [keys] * reps, Provenance.OWNER_TRAIN, "embed")


def pretrain(train: LabeledImageSet, arch: str, spec: M.TrainSpec, **kw) -> M.Classifier:
    model = M.build_classifier(arch, train.num_classes, train.shape, seed=spec.seed, **kw)
    M.train_classifier(model, train, spec)
    return model


def embed_watermark(train: LabeledImageSet, trigger: TriggerSet, arch: str, spec: M.TrainSpec,
                    model0=None, test: LabeledImageSet | None = None, key_fraction: float = 0.2,
                    finetune_spec: M.TrainSpec | None = None, theta: float = 2.0, passports=None) -> WatermarkedModel:
    """Train a watermarked model; mark/adv/exp fine-tune ``model0``, the rest train from scratch."""
    if len(trigger) == 0:
        raise SchemeError("empty trigger set")
    scheme = trigger.scheme_id
    data = embed_training_set(train, trigger, key_fraction)
    passport_params = None
    if scheme == "exp":
        if model0 is None:
            raise SchemeError("exp scheme needs model0")
        return exponential_weighting_train(model0, train, trigger, theta, finetune_spec or spec,
                                           test=test, key_fraction=key_fraction)
    if scheme in FINETUNED:
        if model0 is None:
            raise SchemeError(f"scheme {scheme!r} fine-tunes a pretrained model0")
        model = M.clone_model(model0)
        _, history = M.train_classifier(model, data, finetune_spec or spec)
    elif scheme == "passport":
        from .passport import multitask_loss
        model = build_passport_model(train.num_classes, train.shape, passports, seed=spec.seed)
        history = M.fit(model, data.images, data.labels, spec, loss_fn=multitask_loss)
        model.set_mode("passport")
        passport_params = model.get_passports()
    else:
        model = M.build_classifier(arch, train.num_classes, train.shape, seed=spec.seed)
        _, history = M.train_classifier(model, data, spec)
    model.tags.append(f"embed:{scheme}")
    wm = WatermarkedModel(model, trigger, scheme, finetune_spec or spec if scheme in FINETUNED else spec,
                          passport_params, history=history)
    wm.embed_recall = trigger_recall(wm, trigger)
    if test is not None:
        wm.test_acc = M.evaluate_accuracy(model, test)
    log.info("embedded %s: recall %.3f acc %s", scheme, wm.embed_recall, wm.test_acc)
    return wm


def build_passport_model(num_classes: int, input_shape, passports=None, seed: int = 0, **kw):
    model = M.build_classifier("resnet18_passport", num_classes, input_shape, seed=seed, **kw)
    if passports is not None:
        model.set_passports(passports)
    return model


# --------------------------------------------------------------------------- exponential weighting

class ExpWeight(nn.Module):
    """w -> exp(theta * (|w| - max|w|)) * w: large weights keep their value, small ones shrink."""

    def __init__(self, theta: float):
        super().__init__()
        self.theta = float(theta)

    def forward(self, w):
        a = w.abs()
        return torch.exp(self.theta * (a - a.max())) * w


def exponential_weighting_train(model0, train: LabeledImageSet, trigger: TriggerSet, theta: float,
                                spec: M.TrainSpec, test: LabeledImageSet | None = None,
                                key_fraction: float = 0.2) -> WatermarkedModel:
    if not theta > 0:
        raise SchemeError(f"exponent theta must be positive, got {theta}")
    model = M.clone_model(model0)
    layers = [m for m in model.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]
    for m in layers:
        parametrize.register_parametrization(m, "weight", ExpWeight(theta))
    data = embed_training_set(train, trigger, key_fraction)
    history = M.fit(model, data.images, data.labels, spec)
    # bake the transformed weights in so the released model is a plain network
    for m in layers:
        parametrize.remove_parametrizations(m, "weight", leave_parametrized=True)
    model.eval()
    model.tags.append(f"embed:{trigger.scheme_id}")
    wm = WatermarkedModel(model, trigger, trigger.scheme_id, spec, history=history)
    wm.embed_recall = trigger_recall(model, trigger)
    if test is not None:
        wm.test_acc = M.evaluate_accuracy(model, test)
    return wm
