import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from wmbench import models as M
from wmbench import removal as R
from wmbench.data import Provenance
from wmbench.nets import ConvAutoencoder
from wmbench.schemes import TriggerSet, WatermarkedModel

from conftest import TinyNet, make_set


def tiny_wm(seed=0, n_keys=12):
    rng = np.random.default_rng(seed)
    net = TinyNet(seed=seed)
    trig = TriggerSet(rng.random((n_keys, 6, 6, 1), dtype=np.float32), rng.integers(0, 3, n_keys), "abstract")
    return WatermarkedModel(net, trig, "abstract", M.TrainSpec(epochs=1))


def small(n, seed, prov=Provenance.ADV_TEST_HALF):
    return make_set(n, (6, 6, 1), 3, seed, prov)


# ---------------------------------------------------------------- pruning

def test_prune_example_from_four_weights():
    assert sorted(R.prune_indices(np.abs([0.1, -0.05, 0.3, 0.2]), 50).tolist()) == [0, 1]


@settings(max_examples=100, deadline=None)
@given(w=arrays(np.float64, st.integers(1, 30), elements=st.floats(-1, 1)), p=st.floats(0, 100))
def test_prune_selection_matches_brute_force(w, p):
    scores = np.abs(w)
    k = math.ceil(round(p / 100 * len(w), 9))
    # oracle: repeatedly take the smallest remaining score, earliest index on ties
    remaining = list(range(len(w)))
    chosen = []
    for _ in range(k):
        j = min(remaining, key=lambda i: (scores[i], i))
        chosen.append(j)
        remaining.remove(j)
    assert R.prune_indices(scores, p).tolist() == chosen


def test_prune_zero_is_bit_identical_and_full_prune_zeroes_fc():
    wm = tiny_wm()
    eval_set = small(30, 1)
    out = R.prune_attack(wm, 0, eval_set)
    assert M.state_checksum(out.attacked_model) == M.state_checksum(wm.model)
    out = R.prune_attack(wm, 100, eval_set)
    assert all(float(w.detach().abs().sum()) == 0 for w in R.fc_weights(out.attacked_model))
    assert out.params["n_pruned"] == 36 * 5 + 5 * 3
    with pytest.raises(R.AttackError):
        R.prune_count(101, 10)


def test_prune_zeroes_exactly_the_smallest_weights():
    wm = tiny_wm(3)
    before = R.magnitude_scores(wm.model)
    out = R.prune_attack(wm, 40, small(20, 2))
    after = R.magnitude_scores(out.attacked_model)
    idx = R.prune_indices(before, 40)
    assert np.all(after[idx] == 0)
    keep = np.setdiff1d(np.arange(len(before)), idx)
    assert np.array_equal(after[keep], before[keep])


def test_select_min_recall_respects_accuracy_budget():
    mk = lambda p, rec, drop: R.AttackOutcome(None, "prune", {"p": p}, 1.0, rec, 0.9, 0.9 - drop)
    outs = [mk(10, 0.9, 0.0), mk(40, 0.3, 0.05), mk(80, 0.0, 0.2)]
    assert R.select_min_recall(outs).params["p"] == 40
    assert R.select_min_recall(outs[2:]) is None


# ---------------------------------------------------------------- fine-tuning and stealing

def test_zero_epoch_finetune_is_noop():
    wm = tiny_wm()
    out = R.finetune_attack(wm, small(20, 1), small(20, 2, Provenance.SURROGATE), M.TrainSpec(epochs=0),
                            small(20, 3))
    assert M.state_checksum(out.attacked_model) == M.state_checksum(wm.model)
    assert out.recall_after == out.recall_before
    assert "removal:finetune" in out.attacked_model.tags and "removal:finetune" not in wm.model.tags


def test_attack_data_rejects_owner_training_images():
    wm = tiny_wm()
    owner = small(20, 1, Provenance.OWNER_TRAIN)
    with pytest.raises(R.AttackError, match="owner"):
        R.finetune_attack(wm, owner, None, M.TrainSpec(epochs=1), small(10, 2))
    R.attack_training_set(wm, owner, None, allow_owner_data=True)


def test_steal_needs_surrogate_and_relabels_with_wm():
    wm = tiny_wm()
    with pytest.raises(R.AttackError, match="surrogate"):
        R.steal_attack(wm, small(0, 1), small(20, 1), None, M.TrainSpec(epochs=1), small(10, 2))
    with pytest.raises(R.AttackError):
        R.steal_attack(wm, small(10, 1), None, "lenet5", M.TrainSpec(epochs=1), small(10, 2))
    net = M.build_classifier("lenet5", 10, (28, 28, 1), seed=0)
    lwm = WatermarkedModel(net, TriggerSet(make_set(5, seed=9).images, np.zeros(5, dtype=np.int64), "abstract"),
                           "abstract", M.TrainSpec(epochs=1))
    out = R.steal_attack(lwm, make_set(20, seed=1, provenance=Provenance.SURROGATE), make_set(20, seed=2), None,
                         M.TrainSpec(epochs=1), make_set(10, seed=3))
    assert out.params["label_audit"] is True
    assert out.attacked_model is not net and out.attacked_model.arch_id == "lenet5"
    assert out.params["n_train"] == 40


def test_relabel_uses_argmax():
    net = TinyNet()
    s = small(15, 4)
    assert np.array_equal(R.relabel(net, s).labels, M.predict(net, s.images))


def test_outcome_flags_and_serialization():
    o = R.AttackOutcome(None, "finetune", {}, 1.0, 0.1, 0.99, 0.93)
    assert o.acc_drop == pytest.approx(0.06) and not o.valid_for_claims
    o2 = R.AttackOutcome(None, "finetune", {}, 1.0, 0.1, 0.99, 0.95)
    assert o2.valid_for_claims
    assert '"recall_after": 0.1' in o.to_json()


# ---------------------------------------------------------------- JS divergence

probs = arrays(np.float64, 4, elements=st.floats(0.0, 1.0)).filter(lambda a: a.sum() > 1e-3).map(lambda a: a / a.sum())


@settings(max_examples=100, deadline=None)
@given(p=probs, q=probs)
def test_js_symmetric_bounded_zero_on_equal(p, q):
    a, b = R.js_divergence(p, q), R.js_divergence(q, p)
    assert a == pytest.approx(b, abs=1e-12)
    assert 0.0 <= a <= math.log(2)
    assert R.js_divergence(p, p) == pytest.approx(0.0, abs=1e-12)


def test_js_disjoint_supports_reach_log2():
    assert R.js_divergence([1.0, 0.0], [0.0, 1.0]) == pytest.approx(math.log(2))


# ---------------------------------------------------------------- calibration and detection

@settings(max_examples=100, deadline=None)
@given(scores=arrays(np.float64, st.integers(1, 300), elements=st.floats(0, 10)),
       fpr=st.sampled_from([0.001, 0.01, 0.05, 0.1, 0.5, 1.0]))
def test_calibration_fpr_bound(scores, fpr):
    t = R.calibrate_threshold(scores, fpr)
    assert (scores >= t).sum() <= math.floor(fpr * len(scores) + 1e-9)
    # tightest: any lower observed score would flag too many
    lower = scores[scores < t]
    if len(lower):
        assert (scores >= lower.max()).sum() > math.floor(fpr * len(scores) + 1e-9)


def test_calibration_examples():
    s = np.random.default_rng(0).random(1000)
    assert R.calibrate_threshold(s, 0.001) == s.max()
    assert R.calibrate_threshold(s, 1.0) == s.min()
    with pytest.raises(R.AttackError):
        R.calibrate_threshold(s, 0.0)


class IdentityAE(torch.nn.Module):
    def forward(self, x):
        return x


def test_identity_reconstruction_scores_zero():
    net = TinyNet()
    det = R.KeyDetector([IdentityAE()] * 3)
    m = R.detector_metrics(det, net, small(8, 0).images)
    for k in R.METRICS:
        assert np.allclose(m[k], 0.0)
    det.thresholds = {k: 1e-3 for k in R.METRICS}
    flags, _ = R.detect_key_images(det, net, small(8, 0).images)
    assert not flags.any()


def test_flag_everything_gives_half_and_size_mismatch_errors():
    net = TinyNet()
    det = R.KeyDetector([IdentityAE()] * 3, thresholds={k: -1.0 for k in R.METRICS})
    keys = TriggerSet(small(10, 1).images, np.zeros(10, dtype=np.int64), "abstract")
    assert R.evasion_detection_accuracy(det, keys, small(10, 2), net) == 0.5
    with pytest.raises(R.AttackError, match="equal"):
        R.evasion_detection_accuracy(det, keys, small(9, 2), net)
    with pytest.raises(R.AttackError, match="calibrated"):
        R.detect_key_images(R.KeyDetector([IdentityAE()] * 3), net, keys.key_images)


def test_detector_builds_one_autoencoder_per_class_and_reports_missing():
    net = TinyNet()
    adv = small(30, 0)
    det = R.build_key_detector(adv, net, M.TrainSpec("adam", 1e-3, 1, 16, 0))
    assert len(det.autoencoders) == 3 and all(isinstance(a, ConvAutoencoder) for a in det.autoencoders)
    adv.labels[:] = 0
    with pytest.raises(R.AttackError, match=r"\[1, 2\]"):
        R.build_key_detector(adv, net, M.TrainSpec("adam", 1e-3, 1, 16, 0))


def test_detector_union_false_positive_rate_within_bound():
    net = TinyNet()
    adv = small(200, 0)
    det = R.build_key_detector(adv, net, M.TrainSpec("adam", 1e-3, 1, 16, 0))
    for fpr in (0.01, 0.05, 0.2):
        R.calibrate_thresholds(det, adv, net, fpr)
        flags, _ = R.detect_key_images(det, net, adv.images)
        assert flags.sum() == det.calibration_flagged <= math.floor(fpr * len(adv) + 1e-9)
        assert det.calibration_fpr == flags.mean()


def test_threshold_above_max_survives_float32_scores():
    s = np.random.default_rng(0).random(1000).astype(np.float32)
    t = R.calibrate_threshold(s, 0.0001)
    assert (s.astype(np.float64) >= t).sum() == 0
    assert t > float(s.max())
