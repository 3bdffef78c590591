"""Ownership-claim attacks run after watermark removal: piracy and ambiguity, reported as dual recalls."""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import models as M
from . import removal as R
from .data import LabeledImageSet, Provenance, concat_sets
from .schemes import TriggerSet, WatermarkedModel, generate_trigger_set, trigger_recall
from .seeding import derive_seed

log = logging.getLogger(__name__)

CLAIMS = ("piracy", "ambiguity")
REMOVALS = ("steal", "finetune", "prune", "none")


class ClaimError(RuntimeError):
    pass


@dataclass
class DualRecallReport:
    adversary_recall: float
    owner_recall: float
    test_acc_delta: float
    base_removal_attack: str
    claim: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def diff(self) -> float:
        return self.adversary_recall - self.owner_recall

    def to_dict(self) -> dict:
        return {"claim": self.claim, "base_removal_attack": self.base_removal_attack,
                "adversary_recall": self.adversary_recall, "owner_recall": self.owner_recall,
                "diff": self.diff, "test_acc_delta": self.test_acc_delta, "extra": self.extra}


def has_removal_tag(model) -> bool:
    return any(t.startswith("removal:") for t in getattr(model, "tags", []))


def _require_removal(model, allow_untagged: bool):
    if not allow_untagged and not has_removal_tag(model):
        raise ClaimError("claim attacks run on a removal-attacked model; pass allow_untagged=True to override")


def piracy_attack(base_model, adv_trigger: TriggerSet, adv_data, surrogate, spec: M.TrainSpec,
                  key_fraction: float = 0.2, allow_untagged: bool = False):
    """Fine-tune the removal-attacked model on attack data plus the adversary's own trigger set."""
    _require_removal(base_model, allow_untagged)
    R._check_attack_data(adv_data, surrogate)
    parts = []
    if adv_data is not None and len(adv_data):
        parts.append(adv_data)
    if surrogate is not None and len(surrogate):
        parts.append(R.relabel(base_model, surrogate))
    if not parts:
        raise ClaimError("piracy needs attack data")
    n = sum(len(p) for p in parts)
    if len(adv_trigger):
        reps = max(1, int(round(key_fraction * n / len(adv_trigger))))
        parts += [adv_trigger.as_set(base_model.num_classes)] * reps
    data = concat_sets(parts, Provenance.SURROGATE, "piracy")
    model = M.clone_model(base_model)
    M.fit(model, data.images, data.labels, spec)
    model.tags.append("claim:piracy")
    return model


def perturbation_stats(x0, x1) -> tuple[np.ndarray, np.ndarray]:
    """Per-image (mean squared per-pixel change, Euclidean norm of the change)."""
    d = (np.asarray(x1, np.float64) - np.asarray(x0, np.float64)).reshape(len(x0), -1)
    return (d ** 2).mean(1), np.sqrt((d ** 2).sum(1))


def ambiguity_attack(model, seeds: LabeledImageSet, targets, step_size: float = 0.01, max_iters: int = 500,
                     budget: float | None = None, allow_untagged: bool = True):
    """Gradient descent on each seed toward its target until the frozen model's argmax hits it.

    Returns (counterfeit TriggerSet of the successful keys, per-seed report). ``budget`` caps the mean
    squared per-pixel perturbation of an accepted key.
    """
    _require_removal(model, allow_untagged)
    net = model.model if isinstance(model, WatermarkedModel) else model
    net.eval()
    before = M.state_checksum(net)
    targets = np.broadcast_to(np.asarray(targets, dtype=np.int64), (len(seeds),)).copy()
    x0 = torch.from_numpy(M.to_tensor(seeds.images).numpy())
    x = x0.clone()
    t = torch.from_numpy(targets)
    iters = np.zeros(len(seeds), dtype=np.int64)
    done = np.zeros(len(seeds), dtype=bool)
    for p in net.parameters():
        p.requires_grad_(False)
    try:
        for it in range(max_iters + 1):
            with torch.no_grad():
                hit = (net(x).argmax(1) == t).numpy()
            done |= hit
            if done.all() or it == max_iters:
                break
            active = torch.from_numpy(~done)
            xa = x[active].clone().requires_grad_(True)
            loss = F.cross_entropy(net(xa), t[active], reduction="sum")
            (g,) = torch.autograd.grad(loss, xa)
            with torch.no_grad():
                x[active] = (xa - step_size * g).clamp(0.0, 1.0)
            iters[~done] += 1
    finally:
        for p in net.parameters():
            p.requires_grad_(True)
    if M.state_checksum(net) != before:
        raise ClaimError("ambiguity attack must not modify the model")
    xn = M.to_numpy_images(x)
    mse, l2 = perturbation_stats(seeds.images, xn)
    ok = done.copy()
    if budget is not None:
        ok &= mse <= budget
    report = {"iterations": iters.tolist(), "success": ok.tolist(), "perturbation_mse": mse.tolist(),
              "perturbation_l2": l2.tolist(), "step_size": step_size, "max_iters": max_iters,
              "mean_perturbation_mse": float(mse[ok].mean()) if ok.any() else None,
              "mean_perturbation_l2": float(l2[ok].mean()) if ok.any() else None,
              "success_rate": float(ok.mean()) if len(ok) else 0.0}
    if not ok.any():
        warnings.warn("ambiguity attack produced no successful counterfeit keys")
    # keys stay unquantized: 8-bit rounding could undo a just-crossed decision boundary
    counterfeit = TriggerSet(xn[ok], targets[ok], "unrelated",
                             {"counterfeit": True, "method": "ambiguity", "step_size": step_size,
                              "max_iters": max_iters, "n_seeds": len(seeds)})
    return counterfeit, report


@dataclass
class ClaimConfig:
    removal: str = "steal"
    adv_scheme: str = "unrelated"
    adv_pool: str = "letters"
    adv_trigger_size: int = 100
    steal_spec: M.TrainSpec = field(default_factory=lambda: M.TrainSpec("adam", 1e-3, 20, 64, 0))
    finetune_spec: M.TrainSpec = field(default_factory=lambda: M.TrainSpec("adam", 0.01, 10, 64, 0))
    prune_p: float = 40.0
    ambiguity_seeds: int = 100
    ambiguity_target: int | None = None
    step_size: float = 0.01
    max_iters: int = 500
    allow_no_removal: bool = False
    seed: int = 0


def run_removal(wm: WatermarkedModel, adv_data, surrogate, eval_set, cfg: ClaimConfig):
    if cfg.removal not in REMOVALS:
        raise ClaimError(f"unknown removal attack {cfg.removal!r}; choose from {', '.join(REMOVALS)}")
    if cfg.removal == "steal":
        return R.steal_attack(wm, surrogate, adv_data, None, cfg.steal_spec, eval_set).attacked_model
    if cfg.removal == "finetune":
        return R.finetune_attack(wm, adv_data, surrogate, cfg.finetune_spec, eval_set).attacked_model
    if cfg.removal == "prune":
        return R.prune_attack(wm, cfg.prune_p, eval_set).attacked_model
    if not cfg.allow_no_removal:
        raise ClaimError("skipping removal needs allow_no_removal=True")
    return M.clone_model(wm.model)


def claim_scenario(wm: WatermarkedModel, adv_data: LabeledImageSet, surrogate: LabeledImageSet,
                   eval_set: LabeledImageSet, claim: str = "piracy", cfg: ClaimConfig | None = None) -> DualRecallReport:
    """Removal first (stealing by default), then the claim attack; both recalls measured on the final model."""
    cfg = cfg or ClaimConfig()
    if claim not in CLAIMS:
        raise ClaimError(f"unknown claim attack {claim!r}; choose from {', '.join(CLAIMS)}")
    t0 = time.time()
    acc0 = M.evaluate_accuracy(wm.model, eval_set)
    base = run_removal(wm, adv_data, surrogate, eval_set, cfg)
    allow = cfg.removal == "none" and cfg.allow_no_removal
    extra = {"removal_owner_recall": trigger_recall(base, wm.trigger)}
    if claim == "piracy":
        adv_trigger = generate_trigger_set(cfg.adv_scheme, adv_data, seed=derive_seed(cfg.seed, "adversary"),
                                           n=cfg.adv_trigger_size, unrelated_pool=cfg.adv_pool,
                                           abstract_pool=cfg.adv_pool)
        final = piracy_attack(base, adv_trigger, adv_data, surrogate, cfg.finetune_spec, allow_untagged=allow)
        adv_recall = trigger_recall(final, adv_trigger)
        extra["adv_trigger_size"] = len(adv_trigger)
    else:
        rng = np.random.default_rng(derive_seed(cfg.seed, "ambiguity"))
        idx = np.sort(rng.choice(len(surrogate), size=min(cfg.ambiguity_seeds, len(surrogate)), replace=False))
        seeds = surrogate.subset(idx)
        target = cfg.ambiguity_target if cfg.ambiguity_target is not None else int(rng.integers(base.num_classes))
        counterfeit, rep = ambiguity_attack(base, seeds, target, cfg.step_size, cfg.max_iters,
                                            allow_untagged=allow)
        final = base
        adv_recall = trigger_recall(final, counterfeit) if len(counterfeit) else 0.0
        extra.update({k: rep[k] for k in ("success_rate", "mean_perturbation_mse", "mean_perturbation_l2")})
        extra["target"] = target
    report = DualRecallReport(adv_recall, trigger_recall(final, wm.trigger),
                              M.evaluate_accuracy(final, eval_set) - acc0, cfg.removal, claim, extra)
    report.extra["runtime_s"] = time.time() - t0
    return report
