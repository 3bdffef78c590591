import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from wmbench import adaptive as A
from wmbench import models as M
from wmbench import removal as R
from wmbench.data import Provenance, quantize
from wmbench.schemes import TriggerSet, WatermarkedModel

from conftest import make_set

SPEC = M.TrainSpec("adam", 1e-3, 1, 32, 0)


@pytest.fixture(scope="module")
def wm():
    net = M.build_classifier("lenet5", 10, (28, 28, 1), seed=0)
    data = make_set(200, seed=0)
    M.fit(net, data.images, data.labels, M.TrainSpec(epochs=1))
    keys = make_set(10, seed=5)
    return WatermarkedModel(net, TriggerSet(keys.images, np.full(10, 3), "content"), "content", SPEC)


@pytest.fixture(scope="module")
def sources():
    s = make_set(40, seed=1, provenance=Provenance.ADV_TEST_HALF)
    s.images[:] = quantize(s.images)
    return s


def test_loss_arithmetic_examples():
    assert A.total_loss(0.5, 2.0, 0.25) == pytest.approx(1.0)
    assert A.content_ae_loss(0.1, 0.01, 4.0) == pytest.approx(0.14)


@pytest.mark.parametrize("scheme", ["content", "noise", "exp", "unrelated"])
def test_logged_losses_are_additive(wm, sources, scheme):
    synth = A.train_synth(scheme, wm, sources, 2, lam=0.7, gamma=0.05, spec=SPEC, n_pool=40)
    assert synth.loss_log
    for e in synth.loss_log:
        assert e["total"] == pytest.approx(e["l_ae"] + 0.7 * e["l_f"], rel=1e-5)
        if scheme == "content":
            assert e["l_ae"] == pytest.approx(e["mse"] + 0.05 * e["mask_l1"], rel=1e-5)
        if scheme == "exp":
            assert e["l_ae"] == pytest.approx(e["mse"] + 0.05 * e["dis"], rel=1e-5)


def test_synth_rejects_bad_arguments(wm, sources):
    with pytest.raises(A.SynthError):
        A.train_synth("content", wm, sources, 1, lam=-1.0, spec=SPEC)
    with pytest.raises(A.SynthError):
        A.train_synth("content", wm, sources, 10, spec=SPEC)
    with pytest.raises(A.SynthError):
        A.train_synth("radioactive", wm, sources, 1, spec=SPEC)


def test_synth_leaves_watermarked_model_untouched(wm, sources):
    before = M.state_checksum(wm.model)
    A.train_synth("content", wm, sources, 1, spec=SPEC, n_pool=40)
    assert M.state_checksum(wm.model) == before
    assert all(p.requires_grad for p in wm.model.parameters())


def test_content_synth_output_is_a_superimposition(wm, sources, monkeypatch):
    synth = A.train_synth("content", wm, sources, 4, spec=SPEC, n_pool=40)
    calls = []
    real = A.superimpose

    def spy(x, c, m):
        calls.append(1)
        return real(x, c, m)

    monkeypatch.setattr(A, "superimpose", spy)
    xp, _ = A.synthesize(synth, wm, sources.images[:5])
    assert calls and xp.shape == (5, 28, 28, 1) and xp.min() >= 0 and xp.max() <= 1


def test_pairs_assigned_labels_differ_from_targets(wm, sources):
    st_ = A.synth_trigger_pairs(wm, "noise", sources, spec=SPEC, per_class=5, n_pool=40)
    assert len(st_) <= 50 and np.all(st_.assigned_labels != st_.y_t)
    assert set(np.unique(st_.y_t)) == set(range(10))
    fg = A.synth_trigger_pairs(wm, "adv", sources, per_class=2)
    assert np.all(fg.assigned_labels != fg.y_t)
    assert len(fg) == 20 and set(fg.y_t) <= set(sources.labels)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(2, 10), n=st.integers(0, 60))
def test_surrogate_labels_never_equal_target_exhaustive(seed, k, n):
    rng = np.random.default_rng(seed)
    y_t = rng.integers(0, k, n)
    st_ = A.SurrogateTriggerSet(np.zeros((n, 2, 2, 1)), y_t, A.random_labels(rng, n, k, y_t), "noise")
    assert all(a != t for a, t in zip(st_.assigned_labels, st_.y_t))


def test_surrogate_set_rejects_collisions_and_roundtrips(tmp_path, wm, sources):
    with pytest.raises(A.SynthError):
        A.SurrogateTriggerSet(np.zeros((2, 2, 2, 1)), [1, 2], [1, 3], "noise")
    st_ = A.synth_trigger_pairs(wm, "noise", sources, spec=SPEC, per_class=2, n_pool=40)
    st_.save(tmp_path / "st")
    back = A.SurrogateTriggerSet.load(tmp_path / "st")
    assert np.array_equal(back.images, st_.images) and np.array_equal(back.sources, st_.sources)
    assert np.array_equal(back.assigned_labels, st_.assigned_labels) and np.array_equal(back.y_t, st_.y_t)


def test_empty_surrogate_finetune_equals_plain_finetune(wm, sources):
    sur = make_set(30, seed=2, provenance=Provenance.SURROGATE)
    ev = make_set(20, seed=3)
    spec = M.TrainSpec("adam", 1e-3, 1, 16, 7)
    a = A.adaptive_finetune(wm, sources, sur, A.SurrogateTriggerSet.empty((28, 28, 1)), spec, ev)
    b = R.finetune_attack(wm, sources, sur, spec, ev)
    assert M.state_checksum(a.attacked_model) == M.state_checksum(b.attacked_model)
    assert (a.recall_after, a.acc_after) == (b.recall_after, b.acc_after)


def test_empty_surrogate_steal_equals_plain_steal(wm, sources):
    sur = make_set(30, seed=2, provenance=Provenance.SURROGATE)
    ev = make_set(20, seed=3)
    spec = M.TrainSpec("adam", 1e-3, 1, 16, 7)
    a = A.adaptive_steal(wm, sur, sources, A.SurrogateTriggerSet.empty((28, 28, 1)), None, spec, ev)
    b = R.steal_attack(wm, sur, sources, None, spec, ev)
    assert M.state_checksum(a.attacked_model) == M.state_checksum(b.attacked_model)


def test_identical_pairs_give_zero_scores_and_coordinate_order_ties(wm):
    x = make_set(6, seed=4).images
    st_ = A.SurrogateTriggerSet(x, np.zeros(6), np.ones(6), "unrelated", x.copy())
    for mode in ("neuron", "contribution"):
        assert np.all(A.activation_scores(wm, st_, mode) == 0)
    out = A.adaptive_prune(wm, st_, 1, make_set(10, seed=5))
    n = out.params["n_pruned"]
    w = torch.cat([p.detach().reshape(-1) for p in R.fc_weights(out.attacked_model)])
    assert torch.all(w[:n] == 0)
    w0 = torch.cat([p.detach().reshape(-1) for p in R.fc_weights(wm.model)])
    assert torch.equal(w[n:], w0[n:])


def test_adaptive_prune_zero_is_identity(wm):
    x = make_set(6, seed=4).images
    st_ = A.SurrogateTriggerSet(x, np.zeros(6), np.ones(6), "unrelated", np.clip(x + 0.1, 0, 1))
    out = A.adaptive_prune(wm, st_, 0, make_set(10, seed=5))
    assert M.state_checksum(out.attacked_model) == M.state_checksum(wm.model)


def test_scores_need_pairs(wm):
    with pytest.raises(A.SynthError):
        A.activation_scores(wm, A.SurrogateTriggerSet.empty((28, 28, 1)))
