"""Non-adaptive removal attacks (fine-tuning, stealing, pruning) and the key-image evasion detector."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import models as M
from .data import LabeledImageSet, Provenance, concat_sets
from .nets import ConvAutoencoder
from .schemes import TriggerSet, WatermarkedModel, trigger_recall

log = logging.getLogger(__name__)

ATTACKS = ("finetune", "steal", "prune", "evade",
           "adaptive_finetune", "adaptive_steal", "adaptive_prune", "piracy", "ambiguity")
PRUNE_SWEEP = (5, 10, 20, 40, 60, 80)
MAX_ACC_DROP = 0.05
# float slack so an accuracy drop of exactly the budget is still admitted
DROP_EPS = 1e-9
# attack data must never carry owner training images or owner keys
FORBIDDEN = (Provenance.OWNER_TRAIN,)


class AttackError(RuntimeError):
    pass


@dataclass
class AttackOutcome:
    attacked_model: M.Classifier | None
    attack_id: str
    params: dict
    recall_before: float
    recall_after: float
    acc_before: float
    acc_after: float
    scheme_id: str = ""
    dataset: str = ""
    seed: int = 0
    adversary_recall: float | None = None
    runtime_s: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def acc_drop(self) -> float:
        return self.acc_before - self.acc_after

    @property
    def valid_for_claims(self) -> bool:
        return self.acc_drop <= MAX_ACC_DROP + DROP_EPS

    def to_dict(self) -> dict:
        d = {"attack_id": self.attack_id, "scheme_id": self.scheme_id, "dataset": self.dataset,
             "params": self.params, "recall_before": self.recall_before, "recall_after": self.recall_after,
             "acc_before": self.acc_before, "acc_after": self.acc_after, "seed": self.seed,
             "runtime_s": self.runtime_s}
        if self.adversary_recall is not None:
            d["adversary_recall"] = self.adversary_recall
        if self.extra:
            d["extra"] = self.extra
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _model(wm):
    return wm.model if isinstance(wm, WatermarkedModel) else wm


def _check_attack_data(*sets):
    for s in sets:
        if s is not None and len(s) and s.provenance in FORBIDDEN:
            raise AttackError(f"attack data {s.name!r} has provenance {s.provenance.value}; "
                              "the adversary has no access to the owner's training set")


def relabel(model, data: LabeledImageSet, provenance=None) -> LabeledImageSet:
    """Replace labels with the queried model's argmax outputs."""
    labels = M.predict(model, data.images) if len(data) else data.labels
    return LabeledImageSet(data.images, labels, provenance or data.provenance, data.num_classes, data.name, data.index)


def _outcome(attack_id, wm, attacked, eval_set, params, t0, acc_before=None, recall_before=None, **kw):
    base = _model(wm)
    trig = wm.trigger
    return AttackOutcome(
        attacked, attack_id, params,
        recall_before if recall_before is not None else trigger_recall(base, trig),
        trigger_recall(attacked, trig),
        acc_before if acc_before is not None else M.evaluate_accuracy(base, eval_set),
        M.evaluate_accuracy(attacked, eval_set),
        scheme_id=wm.scheme_id, runtime_s=time.time() - t0, **kw)


def _pairs_set(st, num_classes):
    if st is None or len(st) == 0:
        return None
    return LabeledImageSet(st.images, st.assigned_labels, Provenance.SYNTHETIC, num_classes, "surrogate-trigger")


def attack_training_set(wm, adv_data, surrogate, st=None, relabel_adv=False,
                        allow_owner_data=False) -> LabeledImageSet:
    """adv_data (true labels unless relabeled) + surrogate labeled by the watermarked model (+ surrogate keys).

    ``allow_owner_data`` admits the owner's training set, only for the strong-adversary grid cell.
    """
    model = _model(wm)
    if not allow_owner_data:
        _check_attack_data(adv_data, surrogate)
    parts = []
    if adv_data is not None and len(adv_data):
        parts.append(relabel(model, adv_data) if relabel_adv else adv_data)
    if surrogate is not None and len(surrogate):
        parts.append(relabel(model, surrogate))
    extra = _pairs_set(st, model.num_classes)
    if extra is not None:
        parts.append(extra)
    if not parts:
        raise AttackError("empty attack data")
    return concat_sets(parts, Provenance.SURROGATE, "attack")


def finetune_attack(wm: WatermarkedModel, adv_data, surrogate, spec: M.TrainSpec, eval_set, st=None,
                    attack_id="finetune", allow_owner_data=False) -> AttackOutcome:
    t0 = time.time()
    data = attack_training_set(wm, adv_data, surrogate, st, allow_owner_data=allow_owner_data)
    model = M.clone_model(_model(wm))
    M.fit(model, data.images, data.labels, spec)
    model.tags.append(f"removal:{attack_id}")
    params = {"optimizer": spec.optimizer, "learning_rate": spec.learning_rate, "epochs": spec.epochs,
              "batch_size": spec.batch_size, "n_train": len(data),
              "n_surrogate_keys": 0 if st is None else len(st)}
    return _outcome(attack_id, wm, model, eval_set, params, t0, seed=spec.seed)


def steal_attack(wm: WatermarkedModel, surrogate, adv_data, arch: str | None, spec: M.TrainSpec, eval_set,
                 st=None, attack_id="steal") -> AttackOutcome:
    """Train a fresh model only on wm-labeled surrogate and adversary images (plus optional surrogate keys)."""
    t0 = time.time()
    if surrogate is None or len(surrogate) == 0:
        raise AttackError("model stealing needs a non-empty surrogate set")
    src = _model(wm)
    arch = arch or src.arch_id
    if arch != src.arch_id:
        raise AttackError(f"stealing copies the watermarked architecture {src.arch_id!r}, got {arch!r}")
    queried = attack_training_set(wm, adv_data, surrogate, None, relabel_adv=True)
    # audit: every queried label is exactly the watermarked model's answer
    audit = bool(np.array_equal(queried.labels, M.predict(src, queried.images)))
    if not audit:
        raise AttackError("stealing labels disagree with the watermarked model")
    provenances = sorted({s.provenance.value for s in (adv_data, surrogate) if s is not None and len(s)})
    extra = _pairs_set(st, src.num_classes)
    data = concat_sets([queried, extra] if extra is not None else [queried], Provenance.SURROGATE, "steal")
    kw = {}
    if hasattr(src, "config"):
        # the adversary never holds the owner's passports: same layout, no passport layers
        kw = {**src.config(), "passport": False, "mode": "bypass"}
    model = M.build_classifier(arch, src.num_classes, src.input_shape, seed=spec.seed, **kw)
    M.fit(model, data.images, data.labels, spec)
    model.tags.append(f"removal:{attack_id}")
    params = {"optimizer": spec.optimizer, "learning_rate": spec.learning_rate, "epochs": spec.epochs,
              "batch_size": spec.batch_size, "n_train": len(data), "label_audit": audit,
              "provenances": provenances, "n_surrogate_keys": 0 if st is None else len(st)}
    return _outcome(attack_id, wm, model, eval_set, params, t0, seed=spec.seed)


# --------------------------------------------------------------------------- pruning

def fc_weights(model) -> list[torch.Tensor]:
    params = dict(model.named_parameters())
    return [params[name] for name, _ in model.fc_param_index]


def prune_count(p: float, total: int) -> int:
    if not 0 <= p <= 100:
        raise AttackError(f"prune percentage must lie in [0, 100], got {p}")
    return min(total, math.ceil(round(p / 100.0 * total, 9)))


def prune_indices(scores: np.ndarray, p: float, largest: bool = False) -> np.ndarray:
    """Flat indices of the k lowest (or highest) scores; ties go to the earlier coordinate."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    k = prune_count(p, len(scores))
    key = -scores if largest else scores
    return np.argsort(key, kind="stable")[:k]


def apply_prune(model, flat_idx) -> None:
    sizes = [w.numel() for w in fc_weights(model)]
    offsets = np.cumsum([0] + sizes)
    with torch.no_grad():
        for w, lo, hi in zip(fc_weights(model), offsets[:-1], offsets[1:]):
            local = flat_idx[(flat_idx >= lo) & (flat_idx < hi)] - lo
            w.view(-1)[torch.as_tensor(local, dtype=torch.long)] = 0.0


def magnitude_scores(model) -> np.ndarray:
    return np.concatenate([w.detach().abs().numpy().reshape(-1) for w in fc_weights(model)])


def prune_attack(wm: WatermarkedModel, p: float, eval_set, attack_id="prune", acc_before=None,
                 recall_before=None) -> AttackOutcome:
    t0 = time.time()
    model = M.clone_model(_model(wm))
    idx = prune_indices(magnitude_scores(model), p)
    apply_prune(model, idx)
    model.tags.append(f"removal:{attack_id}")
    return _outcome(attack_id, wm, model, eval_set, {"p": p, "n_pruned": int(len(idx))}, t0,
                    acc_before=acc_before, recall_before=recall_before)


def select_min_recall(outcomes, max_acc_drop=MAX_ACC_DROP):
    """Lowest-recall outcome among those within the accuracy budget (None if none qualifies)."""
    ok = [o for o in outcomes if o.acc_drop <= max_acc_drop + DROP_EPS]
    return min(ok, key=lambda o: (o.recall_after, o.params.get("p", 0))) if ok else None


def prune_sweep(wm, eval_set, ps=PRUNE_SWEEP, max_acc_drop=MAX_ACC_DROP):
    base = _model(wm)
    acc0, rec0 = M.evaluate_accuracy(base, eval_set), trigger_recall(base, wm.trigger)
    outs = [prune_attack(wm, p, eval_set, acc_before=acc0, recall_before=rec0) for p in ps]
    return outs, select_min_recall(outs, max_acc_drop)


# --------------------------------------------------------------------------- evasion detector

def js_divergence(p, q, eps=1e-12) -> np.ndarray:
    """Row-wise Jensen-Shannon divergence in nats."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a, b):
        return np.where(a > 0, a * (np.log(np.maximum(a, eps)) - np.log(np.maximum(b, eps))), 0.0).sum(-1)

    return np.clip(0.5 * kl(p, m) + 0.5 * kl(q, m), 0.0, math.log(2))


METRICS = ("l1", "l2", "js")


@dataclass
class KeyDetector:
    autoencoders: list
    thresholds: dict | None = None
    calibration_fpr: float | None = None
    fpr_bound: float | None = None
    calibration_flagged: int | None = None
    temperature: float = 1.0

    @property
    def calibrated(self) -> bool:
        return self.thresholds is not None


def build_key_detector(adv_data: LabeledImageSet, model, spec: M.TrainSpec | None = None,
                       min_samples: int = 1, width: int = 16) -> KeyDetector:
    """One reconstruction autoencoder per class, trained on the adversary's regular images of that class."""
    spec = spec or M.TrainSpec("adam", 1e-3, 100, 32, 0)
    K = _model(model).num_classes
    counts = np.bincount(adv_data.labels, minlength=K)
    short = [c for c in range(K) if counts[c] < max(1, min_samples)]
    if short:
        raise AttackError(f"too few detector training samples for classes {short} (need {max(1, min_samples)})")
    aes = []
    c_in = adv_data.shape[-1]
    for c in range(K):
        torch.manual_seed(spec.seed + c)
        ae = ConvAutoencoder(c_in, width)
        x = adv_data.of_class(c).images
        M.fit(ae, x, np.zeros(len(x), dtype=np.int64), spec.replace(seed=spec.seed + c),
              loss_fn=lambda m, xb, yb: F.mse_loss(m(xb), xb), track_accuracy=False)
        ae.eval()
        aes.append(ae)
    return KeyDetector(aes)


@torch.no_grad()
def detector_metrics(det: KeyDetector, model, images) -> dict:
    net = _model(model)
    net.eval()
    x = M.to_tensor(images)
    z = net(x)
    pred = z.argmax(1)
    recon = torch.empty_like(x)
    for c in pred.unique().tolist():
        sel = pred == c
        recon[sel] = det.autoencoders[c](x[sel])
    zr = net(recon)
    diff = (x - recon).flatten(1)
    t = det.temperature
    js = js_divergence(F.softmax(z / t, 1).numpy(), F.softmax(zr / t, 1).numpy())
    # float64 so a threshold just above the largest calibration score is not rounded back onto it
    return {"l1": diff.abs().mean(1).double().numpy(), "l2": diff.norm(dim=1).double().numpy(),
            "js": np.asarray(js, np.float64), "pred": pred.numpy()}


def calibrate_threshold(scores, fpr_bound: float) -> float:
    """Smallest observed score t with at most floor(fpr_bound * n) scores >= t."""
    if not fpr_bound > 0:
        raise AttackError(f"fpr bound must be positive, got {fpr_bound}")
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if len(s) == 0:
        raise AttackError("no calibration scores")
    allowed = int(math.floor(fpr_bound * len(s) + 1e-9))
    u = np.unique(s)
    count_ge = len(s) - np.searchsorted(s, u, side="left")
    ok = np.flatnonzero(count_ge <= allowed)
    if len(ok) == 0:
        return float(np.nextafter(s[-1], np.inf))
    return float(u[ok[0]])


def calibrate_thresholds(det: KeyDetector, calibration: LabeledImageSet, model, fpr_bound: float = 0.001) -> KeyDetector:
    """Per-metric thresholds; an image is flagged if any metric fires, so the bound is split evenly
    across metrics and the union false-positive rate on the calibration set stays within it."""
    m = detector_metrics(det, model, calibration.images)
    det.thresholds = {k: calibrate_threshold(m[k], fpr_bound / len(METRICS)) for k in METRICS}
    det.fpr_bound = fpr_bound
    flags = np.zeros(len(calibration), dtype=bool)
    for k in METRICS:
        flags |= m[k] >= det.thresholds[k]
    det.calibration_flagged = int(flags.sum())
    det.calibration_fpr = float(flags.mean())
    return det


def detect_key_images(det: KeyDetector, model, images):
    if not det.calibrated:
        raise AttackError("detector has not been calibrated")
    m = detector_metrics(det, model, images)
    flags = np.zeros(len(images), dtype=bool)
    for k in METRICS:
        flags |= m[k] >= det.thresholds[k]
    return flags, m


def detect_key_image(det: KeyDetector, model, image):
    flags, m = detect_key_images(det, model, np.asarray(image)[None])
    return bool(flags[0]), (float(m["l1"][0]), float(m["l2"][0]), float(m["js"][0]))


def evasion_detection_accuracy(det: KeyDetector, keys: TriggerSet, regulars: LabeledImageSet, model) -> float:
    if len(keys) != len(regulars):
        raise AttackError(f"balanced evaluation needs equal counts, got {len(keys)} keys and {len(regulars)} regulars")
    fk, _ = detect_key_images(det, model, keys.key_images)
    fr, _ = detect_key_images(det, model, regulars.images)
    return float((fk.sum() + (~fr).sum()) / (2 * len(keys)))


class EvasiveModel:
    """Answers detected key queries with a random label, everything else with the model's prediction."""

    def __init__(self, model, det: KeyDetector, seed: int = 0):
        self.model = _model(model)
        self.det = det
        self.rng = np.random.default_rng(seed)

    def predict(self, images):
        flags, m = detect_key_images(self.det, self.model, images)
        pred = m["pred"].copy()
        pred[flags] = self.rng.integers(0, self.model.num_classes, int(flags.sum()))
        return pred
