"""Config-driven experiment runner, JSONL results, success flags and report rendering."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import adaptive as A
from . import claims as C
from . import models as M
from . import removal as R
from . import schemes as S
from .data import SplitSpec, load_dataset, split_adversary_data, surrogate_source
from .seeding import derive_seed, root_seed

log = logging.getLogger(__name__)

CODE_VERSION = "wmbench-1"
REMOVAL_KINDS = ("finetune", "steal", "prune", "adaptive_finetune", "adaptive_steal", "adaptive_prune", "grid")
CLAIM_KINDS = C.CLAIMS
ATTACK_TYPES = R.ATTACKS
GRID_AXES = ("optimizer", "data_source", "learning_rate")
# the four fine-tuning settings compared for the abstract scheme: (optimizer, data source, learning rate)
GRID_CELLS = (("sgd", "train", "last"), ("adam", "train", "last"), ("adam", "adversary", "last"),
                 ("adam", "adversary", "x10"))
# float slack so that a drop of exactly 0.05 computed as 0.95 - 0.90 still counts as inclusive
_EPS = 1e-9


class ConfigError(ValueError):
    pass


@dataclass
class Thresholds:
    min_recall_claim: float = 0.80
    min_detection: float = 0.85
    max_acc_drop: float = 0.05
    claim_margin: float = 0.60

    def validate(self):
        for k, v in dataclasses.asdict(self).items():
            if not (0.0 < float(v) <= 1.0):
                raise ConfigError(f"threshold {k} must lie in (0, 1], got {v}")
        return self


@dataclass
class ExperimentConfig:
    dataset: str = "mnist-5k"
    arch: str | None = None
    scheme_id: str = "content"
    attacks: list = field(default_factory=list)
    adversary_fraction: float = 0.5
    thresholds: Thresholds = field(default_factory=Thresholds)
    seeds: list = field(default_factory=lambda: [root_seed(0)])
    output: str = "results.jsonl"
    embed: dict = field(default_factory=dict)
    data_root: str | None = None

    def __post_init__(self):
        if isinstance(self.thresholds, dict):
            self.thresholds = Thresholds(**self.thresholds)
        self.attacks = [a if isinstance(a, dict) else {"type": a} for a in self.attacks]
        if os.environ.get("WMBENCH_SEED"):
            self.seeds = [root_seed()]

    def validate(self):
        if self.scheme_id not in S.SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme_id!r}")
        for a in self.attacks:
            if a.get("type") not in ATTACK_TYPES:
                raise ConfigError(f"unregistered attack {a.get('type')!r}; choose from {', '.join(ATTACK_TYPES)}")
        if not (0.0 < self.adversary_fraction <= 1.0):
            raise ConfigError("adversary_fraction must lie in (0, 1]")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.thresholds.validate()
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["thresholds"] = dataclasses.asdict(self.thresholds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def resolved_arch(self) -> str:
        if self.scheme_id == "passport":
            return "resnet18_passport"
        if self.arch:
            return self.arch
        return "lenet5" if self.dataset.startswith("mnist") else "resnet_small"

    def config_hash(self) -> str:
        # output path and thresholds do not change what gets computed
        d = self.to_dict()
        d.pop("output")
        d.pop("thresholds")
        return stable_hash(d)


def stable_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str) + CODE_VERSION
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------- success flags

def removal_success(recall_after: float, acc_drop: float, th: Thresholds) -> bool:
    """Strict recall threshold, inclusive accuracy filter."""
    return bool(recall_after < th.min_recall_claim and acc_drop <= th.max_acc_drop + _EPS)


def evasion_success(detection_accuracy: float, th: Thresholds) -> bool:
    return bool(detection_accuracy >= th.min_detection - _EPS)


def claim_success(diff: float, th: Thresholds) -> bool:
    return bool(diff >= th.claim_margin - _EPS)


def success_flag(record: dict, th: Thresholds) -> bool | None:
    kind = record.get("kind")
    if record.get("status") != "ok":
        return None
    if kind in REMOVAL_KINDS:
        return removal_success(record["recall_after"], record["acc_before"] - record["acc_after"], th)
    if kind == "evade":
        return evasion_success(record["detection_accuracy"], th)
    if kind in CLAIM_KINDS:
        return claim_success(record["adversary_recall"] - record["owner_recall"], th)
    return None


# --------------------------------------------------------------------------- results sink

class ResultsWriter:
    """Append-only JSONL; a file lock keeps concurrent writers from interleaving lines."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.path) + ".lock")

    def append(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True, default=_json_default) + "\n"
        with self.lock:
            with open(self.path, "a") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_records(path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        return []
    return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]


# --------------------------------------------------------------------------- experiment context

def cache_dir(override=None) -> Path:
    return Path(override or os.environ.get("WMBENCH_CACHE", ".wmbench_cache"))


def embed_recipe(scheme_id: str, dataset: str, seed: int, overrides: dict | None = None) -> dict:
    """Training settings for embedding one scheme; every value can be overridden from the config."""
    o = dict(overrides or {})
    # encoder keys are near-copies of held-out digits with wrong labels and need longer to memorize
    epochs = {"abstract": 20, "encoder": 25, "passport": 8}.get(scheme_id, 15)
    spec = M.TrainSpec(o.pop("optimizer", "adam"), o.pop("learning_rate", 1e-3), o.pop("epochs", epochs),
                       o.pop("batch_size", 64), derive_seed(seed, "embed"))
    ft_lr, ft_ep = (5e-4, 30) if scheme_id == "exp" else (1e-3, 10)
    ft = M.TrainSpec("adam", o.pop("finetune_lr", ft_lr), o.pop("finetune_epochs", ft_ep), spec.batch_size,
                     derive_seed(seed, "embed-finetune"))
    return {"spec": spec, "finetune_spec": ft, "key_fraction": o.pop("key_fraction", 0.2),
            "theta": o.pop("theta", 2.0), "trigger_params": o.pop("trigger", {}), "base_width": o.pop("base_width", 16),
            "unused": o}


class Context:
    """Data, cached base model and cached watermarked model for one (config, seed)."""

    def __init__(self, cfg: ExperimentConfig, seed: int, cache=None, force: bool = False):
        self.cfg, self.seed, self.force = cfg, seed, force
        self.cache = cache_dir(cache)
        self.train, test = load_dataset(cfg.dataset, cfg.data_root)
        self.adv, self.eval = split_adversary_data(test, SplitSpec(cfg.adversary_fraction, derive_seed(seed, "split")))
        self.surrogate = surrogate_source(cfg.dataset, cfg.data_root, seed=derive_seed(seed, "surrogate"))
        self.recipe = embed_recipe(cfg.scheme_id, cfg.dataset, seed, cfg.embed)
        if self.recipe["unused"]:
            raise ConfigError(f"unknown embed overrides: {sorted(self.recipe['unused'])}")
        self.arch = cfg.resolved_arch()
        self.cache_hit = False
        self._base = None
        self._wm = None
        self._st = {}

    def _key(self, *extra):
        r = self.recipe
        return stable_hash({"dataset": self.cfg.dataset, "arch": self.arch, "scheme": self.cfg.scheme_id,
                            "seed": self.seed, "spec": r["spec"].__dict__, "ft": r["finetune_spec"].__dict__,
                            "kf": r["key_fraction"], "theta": r["theta"], "trigger": r["trigger_params"],
                            "width": r["base_width"], "extra": extra})

    def base(self) -> M.Classifier:
        """Unwatermarked twin: same architecture and training recipe, no trigger set."""
        if self._base is not None:
            return self._base
        spec = self.recipe["spec"]
        arch = "resnet18_passport" if self.arch == "resnet18_passport" else self.arch
        kw = {"passport": False, "mode": "bypass", "base_width": self.recipe["base_width"]} \
            if arch == "resnet18_passport" else {}
        key = stable_hash({"dataset": self.cfg.dataset, "arch": arch, "spec": spec.__dict__, "kw": kw})
        path = self.cache / "base" / f"{key}.npz"
        if path.exists() and not self.force:
            self._base = M.checkpoint_load(path, arch)
        else:
            self._base = S.pretrain(self.train, arch, spec, **kw)
            M.checkpoint_save(self._base, path)
        return self._base

    def model0(self) -> M.Classifier:
        """Pretrained LeNet/ResNet that fine-tuning schemes start from (always the task architecture)."""
        if self.arch != "resnet18_passport":
            return self.base()
        return None

    def watermarked(self) -> S.WatermarkedModel:
        if self._wm is not None:
            return self._wm
        path = self.cache / "models" / self._key()
        if (path / "meta.json").exists() and not self.force:
            self._wm = S.WatermarkedModel.load(path)
            self.cache_hit = True
            return self._wm
        r = self.recipe
        scheme = self.cfg.scheme_id
        model0 = self.model0() if scheme in S.NEEDS_MODEL0 or scheme in S.FINETUNED else None
        trig = S.generate_trigger_set(scheme, self.train, model0, seed=derive_seed(self.seed, "trigger"),
                                      **r["trigger_params"])
        kw = {"passports": None} if scheme == "passport" else {}
        wm = S.embed_watermark(self.train, trig, self.arch, r["spec"], model0=model0, test=self.eval,
                               key_fraction=r["key_fraction"], finetune_spec=r["finetune_spec"], theta=r["theta"],
                               **kw)
        wm.save(path)
        self._wm = wm
        return wm

    def surrogate_keys(self, params: dict) -> A.SurrogateTriggerSet:
        p = {**ADAPTIVE_DEFAULTS, **{k: v for k, v in params.items() if k in ADAPTIVE_DEFAULTS}}
        key = self._key("st", p)
        if key in self._st:
            return self._st[key]
        path = self.cache / "surrogate-keys" / key
        if (path / "meta.json").exists() and not self.force:
            st = A.SurrogateTriggerSet.load(path)
        else:
            spec = M.TrainSpec("adam", p["synth_lr"], p["synth_epochs"], 64, derive_seed(self.seed, "synth"))
            st = A.synth_trigger_pairs(self.watermarked(), self.cfg.scheme_id, self.adv, p["lam"], p["gamma"], spec,
                                       label_seed=derive_seed(self.seed, "labels"), per_class=p["per_class"],
                                       n_pool=p["n_pool"], epsilon=p["epsilon"], seed=derive_seed(self.seed, "synth"))
            st.save(path)
        self._st[key] = st
        return st


ADAPTIVE_DEFAULTS = {"lam": A.DEFAULT_LAMBDA, "gamma": A.DEFAULT_GAMMA, "synth_epochs": 5, "synth_lr": 1e-3,
                     "per_class": 200, "n_pool": 800, "epsilon": 0.1}


def finetune_spec_for(ctx: Context, params: dict, seed_name="finetune") -> M.TrainSpec:
    mnist = ctx.cfg.dataset.startswith("mnist")
    lr = 0.01 if mnist else (1e-4 if ctx.cfg.scheme_id == "passport" else 5e-4)
    return M.TrainSpec(params.get("optimizer", "adam"), params.get("learning_rate", lr), params.get("epochs", 10),
                       params.get("batch_size", 64), derive_seed(ctx.seed, seed_name))


def steal_spec_for(ctx: Context, params: dict) -> M.TrainSpec:
    return M.TrainSpec(params.get("optimizer", "adam"), params.get("learning_rate", 1e-3), params.get("epochs", 20),
                       params.get("batch_size", 64), derive_seed(ctx.seed, "steal"))


def _sweep(params):
    p = params.get("p", R.PRUNE_SWEEP)
    return [p] if np.isscalar(p) else list(p)


def _outcome_record(o: R.AttackOutcome, kind: str) -> dict:
    d = o.to_dict()
    d["kind"] = kind
    return d


def run_attack(ctx: Context, attack: dict) -> list[dict]:
    """Run one attack entry; returns one or more partial records (no config/seed bookkeeping)."""
    kind = attack["type"]
    params = {k: v for k, v in attack.items() if k != "type"}
    wm = ctx.watermarked()
    if kind == "finetune":
        return [_outcome_record(R.finetune_attack(wm, ctx.adv, ctx.surrogate, finetune_spec_for(ctx, params),
                                                  ctx.eval), kind)]
    if kind == "steal":
        return [_outcome_record(R.steal_attack(wm, ctx.surrogate, ctx.adv, None, steal_spec_for(ctx, params),
                                               ctx.eval), kind)]
    if kind == "prune":
        outs, best = R.prune_sweep(wm, ctx.eval, _sweep(params), R.MAX_ACC_DROP)
        return [{**_outcome_record(o, kind), "selected": o is best} for o in outs]
    if kind == "evade":
        return [evade_record(ctx, wm, params)]
    if kind.startswith("adaptive_"):
        st = ctx.surrogate_keys(params)
        extra = {"n_surrogate_keys": len(st), "fooling": float(np.mean(list(st.meta["fooling"].values())))}
        if kind == "adaptive_finetune":
            o = A.adaptive_finetune(wm, ctx.adv, ctx.surrogate, st, finetune_spec_for(ctx, params), ctx.eval)
            return [{**_outcome_record(o, kind), **extra}]
        if kind == "adaptive_steal":
            o = A.adaptive_steal(wm, ctx.surrogate, ctx.adv, st, None, steal_spec_for(ctx, params), ctx.eval)
            return [{**_outcome_record(o, kind), **extra}]
        outs, best = A.adaptive_prune_sweep(wm, st, ctx.eval, _sweep(params), params.get("score_mode", "neuron"),
                                            params.get("post_activation", False))
        return [{**_outcome_record(o, kind), **extra, "selected": o is best} for o in outs]
    if kind in CLAIM_KINDS:
        cfg = C.ClaimConfig(removal=params.get("removal", "steal"),
                            steal_spec=steal_spec_for(ctx, params.get("steal", {})),
                            finetune_spec=finetune_spec_for(ctx, params.get("finetune", {}), "piracy"),
                            adv_pool=params.get("adv_pool", C.ClaimConfig.adv_pool),
                            ambiguity_seeds=params.get("ambiguity_seeds", 100),
                            step_size=params.get("step_size", 0.01), max_iters=params.get("max_iters", 500),
                            allow_no_removal=params.get("allow_no_removal", False),
                            seed=derive_seed(ctx.seed, "claim"))
        rep = C.claim_scenario(wm, ctx.adv, ctx.surrogate, ctx.eval, kind, cfg)
        d = rep.to_dict()
        d["kind"] = kind
        d["attack_id"] = kind
        d["scheme_id"] = wm.scheme_id
        d["params"] = params
        return [d]
    raise ConfigError(f"unknown attack {kind!r}")


def evade_record(ctx: Context, wm, params: dict) -> dict:
    t0 = time.time()
    spec = M.TrainSpec("adam", params.get("learning_rate", 1e-3), params.get("epochs", 100), 32,
                       derive_seed(ctx.seed, "detector"))
    det = R.build_key_detector(ctx.adv, wm.model, spec, min_samples=params.get("min_samples", 1))
    fpr = params.get("fpr_bound", 0.001)
    R.calibrate_thresholds(det, ctx.adv, wm.model, fpr)
    keys = wm.trigger
    rng = np.random.default_rng(derive_seed(ctx.seed, "evade-regulars"))
    n = min(len(keys), len(ctx.eval))
    if n < len(keys):
        keys = keys.subset(np.arange(n))
    regulars = ctx.eval.subset(np.sort(rng.choice(len(ctx.eval), n, replace=False)))
    acc = R.evasion_detection_accuracy(det, keys, regulars, wm.model)
    flagged_keys, _ = R.detect_key_images(det, wm.model, keys.key_images)
    flagged_reg, _ = R.detect_key_images(det, wm.model, regulars.images)
    return {"kind": "evade", "attack_id": "evade", "scheme_id": wm.scheme_id, "params": params,
            "detection_accuracy": acc, "key_flag_rate": float(flagged_keys.mean()),
            "regular_flag_rate": float(flagged_reg.mean()), "calibration_fpr": det.calibration_fpr,
            "calibration_flagged": det.calibration_flagged, "n_calibration": len(ctx.adv), "fpr_bound": fpr, "thresholds": det.thresholds, "runtime_s": time.time() - t0}


def _stamp(record: dict, cfg: ExperimentConfig, seed: int, chash: str) -> dict:
    record.update({"config_hash": chash, "dataset": cfg.dataset, "scheme_id": cfg.scheme_id, "seed": seed,
                   "adversary_fraction": cfg.adversary_fraction, "timestamp": time.time()})
    record.setdefault("status", "ok")
    record["success"] = success_flag(record, cfg.thresholds)
    return record


def run_experiment(cfg: ExperimentConfig, cache=None, force: bool = False, writer: ResultsWriter | None = None,
                   record_embed: bool = True):
    """Embed (or load) the watermarked model per seed, run every attack, append one record per evaluation.

    A config whose hash already has records in the output file is a cache hit and nothing is rerun.
    """
    cfg.validate()
    chash = cfg.config_hash()
    writer = writer or ResultsWriter(cfg.output)
    prior = [r for r in read_records(writer.path) if r.get("config_hash") == chash]
    if prior and not force:
        log.info("config %s already has %d records; pass force to rerun", chash, len(prior))
        for r in prior:
            r["cache_hit"] = True
        return prior
    out = []
    for seed in cfg.seeds:
        ctx = Context(cfg, seed, cache, force)
        t0 = time.time()
        wm = ctx.watermarked()
        base_acc = M.evaluate_accuracy(ctx.base(), ctx.eval)
        rec = _stamp({"kind": "embed", "attack_id": "embed", "embed_recall": wm.embed_recall,
                      "test_acc": M.evaluate_accuracy(wm.model, ctx.eval), "base_acc": base_acc,
                      "cache_hit": ctx.cache_hit, "runtime_s": time.time() - t0, "arch": ctx.arch}, cfg, seed, chash)
        rec["acc_drop"] = rec["base_acc"] - rec["test_acc"]
        if record_embed or not cfg.attacks:
            writer.append(rec)
            out.append(rec)
        for attack in cfg.attacks:
            try:
                recs = run_attack(ctx, attack)
            except Exception as exc:  # a failed stage is recorded and the run moves on
                log.exception("attack %s failed", attack)
                recs = [{"kind": attack["type"], "attack_id": attack["type"], "params": attack, "status": "failed",
                         "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc(limit=5)}]
            for r in recs:
                r = _stamp(r, cfg, seed, chash)
                writer.append(r)
                out.append(r)
    return out


def hyperparameter_grid(cfg: ExperimentConfig, grid: dict | None = None, cells=None, cache=None,
                        writer: ResultsWriter | None = None, epochs: int = 10) -> list[dict]:
    """Fine-tuning attacks over optimizer x data source x learning rate.

    ``learning_rate`` takes a float, "last" (the watermarked model's own final rate) or "x10" (ten times it).
    ``data_source`` is "train" (the owner's full training set) or "adversary" (test split + surrogate).
    """
    if cells is None:
        grid = grid or {}
        bad = set(grid) - set(GRID_AXES)
        if bad:
            raise ConfigError(f"grid axes must be a subset of {GRID_AXES}, got {sorted(bad)}")
        axes = {"optimizer": ["adam"], "data_source": ["adversary"], "learning_rate": ["last"], **grid}
        if any(len(v) == 0 for v in axes.values()):
            raise ConfigError("empty grid axis")
        cells = list(itertools.product(axes["optimizer"], axes["data_source"], axes["learning_rate"]))
    if not cells:
        raise ConfigError("empty grid")
    cfg.validate()
    chash = cfg.config_hash()
    writer = writer or ResultsWriter(cfg.output)
    out = []
    for seed in cfg.seeds:
        ctx = Context(cfg, seed, cache)
        wm = ctx.watermarked()
        last = wm.embed_spec.learning_rate
        for opt, source, lr in cells:
            rate = last if lr == "last" else (10 * last if lr == "x10" else float(lr))
            spec = M.TrainSpec(opt, rate, epochs, 64, derive_seed(seed, "grid"))
            if source == "train":
                o = R.finetune_attack(wm, ctx.train, None, spec, ctx.eval, attack_id="grid", allow_owner_data=True)
            elif source == "adversary":
                o = R.finetune_attack(wm, ctx.adv, ctx.surrogate, spec, ctx.eval, attack_id="grid")
            else:
                raise ConfigError(f"unknown data source {source!r}")
            r = _outcome_record(o, "grid")
            r["cell"] = {"optimizer": opt, "data_source": source, "learning_rate": lr}
            r = _stamp(r, cfg, seed, chash)
            writer.append(r)
            out.append(r)
    return out


# --------------------------------------------------------------------------- reports

def _pct(x):
    return "-" if x is None else f"{100 * x:.2f}"


def _removal_rows(records):
    """Collapse sweeps to their selected point; one row per (scheme, attack, seed)."""
    rows = {}
    for r in records:
        if r.get("kind") not in REMOVAL_KINDS or r.get("status") != "ok":
            continue
        if r["kind"] in ("prune", "adaptive_prune") and not r.get("selected"):
            continue
        rows[(r["scheme_id"], r["attack_id"], r["seed"])] = r
    return rows


def _md_table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines)


def success_matrix(records, th: Thresholds) -> dict:
    """scheme -> attack -> bool (any seed succeeded), plus per-scheme counts."""
    mat = {}
    for r in records:
        flag = success_flag(r, th)
        if flag is None:
            continue
        if r["kind"] in ("prune", "adaptive_prune") and not r.get("selected"):
            continue
        cell = mat.setdefault(r["scheme_id"], {})
        cell[r["attack_id"]] = cell.get(r["attack_id"], False) or flag
    return {s: {"attacks": a, "succeeded": sum(a.values())} for s, a in mat.items()}


def render_report(records, out_dir, formats=("md", "csv", "png"), thresholds: Thresholds | None = None) -> list[Path]:
    if not records:
        raise ConfigError("no records to report")
    th = thresholds or Thresholds()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    removal = _removal_rows(records)
    detections = [r for r in records if r.get("kind") == "evade" and r.get("status") == "ok"]
    claims = [r for r in records if r.get("kind") in CLAIM_KINDS and r.get("status") == "ok"]
    matrix = success_matrix(records, th)
    if "md" in formats:
        parts = ["# Results"]
        if removal:
            parts += ["", "## Removal: trigger set recall (%) after attack, test accuracy change in parentheses", "",
                      _md_table(["scheme", "attack", "seed", "recall before", "recall after (Δacc)", "success"],
                                [(s, a, sd, _pct(r["recall_before"]),
                                  f"{_pct(r['recall_after'])} ({100 * (r['acc_after'] - r['acc_before']):+.2f})",
                                  r["success"]) for (s, a, sd), r in sorted(removal.items())])]
        if detections:
            parts += ["", "## Evasion: detection accuracy (%)", "",
                      _md_table(["scheme", "seed", "detection", "key flag rate", "calibration FPR", "success"],
                                [(r["scheme_id"], r["seed"], _pct(r["detection_accuracy"]), _pct(r["key_flag_rate"]),
                                  _pct(r["calibration_fpr"]), r["success"]) for r in detections])]
        if claims:
            parts += ["", "## Ownership claims: adversary / owner recall (%), difference in parentheses", "",
                      _md_table(["scheme", "claim", "removal", "seed", "adversary", "owner (diff)", "success"],
                                [(r["scheme_id"], r["claim"], r["base_removal_attack"], r["seed"],
                                  _pct(r["adversary_recall"]),
                                  f"{_pct(r['owner_recall'])} ({_pct(r['adversary_recall'] - r['owner_recall'])})",
                                  r["success"]) for r in claims])]
        if matrix:
            attacks = sorted({a for m in matrix.values() for a in m["attacks"]})
            parts += ["", "## Success matrix", "",
                      _md_table(["scheme", *attacks, "# succeeded"],
                                [(s, *("✓" if m["attacks"].get(a) else ("✗" if a in m["attacks"] else "-")
                                       for a in attacks), m["succeeded"]) for s, m in sorted(matrix.items())])]
        p = out / "report.md"
        p.write_text("\n".join(parts) + "\n")
        written.append(p)
    if "csv" in formats:
        p = out / "records.csv"
        cols = ["kind", "scheme_id", "attack_id", "seed", "recall_before", "recall_after", "acc_before", "acc_after",
                "detection_accuracy", "adversary_recall", "owner_recall", "selected", "success", "status"]
        with open(p, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for r in records:
                w.writerow({c: r.get(c, "") for c in cols})
        written.append(p)
        p = out / "success_matrix.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            attacks = sorted({a for m in matrix.values() for a in m["attacks"]})
            w.writerow(["scheme", *attacks, "succeeded"])
            for s, m in sorted(matrix.items()):
                w.writerow([s, *(m["attacks"].get(a, "") for a in attacks), m["succeeded"]])
        written.append(p)
    if "png" in formats and removal:
        written.append(_bar_plot(removal, out / "removal_recall.png"))
    return written


def _bar_plot(removal: dict, path: Path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = {}
    for (s, a, _), r in removal.items():
        groups.setdefault((s, a), []).append(r["recall_after"])
    labels = [f"{s}\n{a}" for s, a in sorted(groups)]
    vals = [float(np.mean(groups[k])) for k in sorted(groups)]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(vals)), 3))
    ax.bar(range(len(vals)), vals)
    ax.axhline(0.8, ls="--", c="k", lw=0.8)
    ax.set_xticks(range(len(vals)))
    ax.set_xticklabels(labels, rotation=90, fontsize=6)
    ax.set_ylabel("recall after attack")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
