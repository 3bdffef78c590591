import json

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from wmbench import models as M
from wmbench.data import LabeledImageSet, Provenance

from conftest import TinyNet, make_set


@pytest.mark.parametrize("arch,shape", [("lenet5", (28, 28, 1)), ("resnet_small", (32, 32, 3)),
                                        ("resnet18_passport", (28, 28, 1))])
def test_build_logit_shape_softmax_and_fc_index(arch, shape):
    m = M.build_classifier(arch, 10, shape, seed=0)
    x = np.random.default_rng(0).random((4, *shape), dtype=np.float32)
    z = M.logits(m, x)
    assert z.shape == (4, 10)
    assert np.allclose(M.softmax(z).sum(1), 1.0, atol=1e-5)
    assert m.fc_param_index and all(n > 0 for _, n in m.fc_param_index)
    assert m.num_parameters > 0


def test_lenet_rejects_cifar_shape():
    with pytest.raises(M.ModelError):
        M.build_classifier("lenet5", 10, (32, 32, 3))
    with pytest.raises(M.ModelError):
        M.build_classifier("vgg", 10, (32, 32, 3))


def test_fc_index_excludes_biases_and_convs():
    m = M.build_classifier("lenet5", 10, (28, 28, 1))
    assert [n for n, _ in m.fc_param_index] == ["fc1.weight", "fc2.weight", "fc3.weight"]
    assert sum(c for _, c in m.fc_param_index) == 400 * 120 + 120 * 84 + 84 * 10


@pytest.mark.parametrize("kw", [dict(optimizer="rmsprop"), dict(learning_rate=0.0), dict(batch_size=0),
                                dict(epochs=-1)])
def test_trainspec_validation(kw):
    with pytest.raises(ValueError):
        M.TrainSpec(**kw)


def test_fit_history_and_empty_error():
    s = make_set(100)
    m = M.build_classifier("lenet5", 10, (28, 28, 1))
    _, hist = M.train_classifier(m, s, M.TrainSpec(epochs=1))
    assert len(hist) == 1 and {"loss", "accuracy"} <= set(hist[0])
    empty = LabeledImageSet(np.zeros((0, 28, 28, 1)), [], Provenance.RAW_TEST, 10)
    with pytest.raises(ValueError):
        M.train_classifier(m, empty, M.TrainSpec(epochs=1))
    with pytest.raises(ValueError):
        M.evaluate_accuracy(m, empty)


def test_training_divergence_is_reported():
    s = make_set(64)
    m = M.build_classifier("lenet5", 10, (28, 28, 1))
    with torch.no_grad():
        m.fc3.weight.fill_(float("nan"))
    with pytest.raises(M.TrainingDiverged, match="non-finite loss"):
        M.fit(m, s.images, s.labels, M.TrainSpec(epochs=1))


def test_seeded_training_is_deterministic():
    s = make_set(80)
    accs = []
    for _ in range(2):
        m = M.build_classifier("lenet5", 10, (28, 28, 1), seed=5)
        M.train_classifier(m, s, M.TrainSpec(epochs=2, seed=5))
        accs.append(M.state_checksum(m))
    assert accs[0] == accs[1]


class ConstNet(TinyNet):
    def forward(self, x):
        z = torch.zeros(len(x), self.num_classes)
        z[:, 0] = 1.0
        return z


def test_accuracy_arithmetic():
    y = np.array([0] * 3 + [1] * 7)
    s = LabeledImageSet(np.zeros((10, 6, 6, 1)), y, Provenance.RAW_TEST, 3)
    assert M.evaluate_accuracy(ConstNet(), s) == pytest.approx(0.3)
    one = LabeledImageSet(np.zeros((1, 6, 6, 1)), [0], Provenance.RAW_TEST, 3)
    assert M.evaluate_accuracy(ConstNet(), one) == 1.0


def _fd_gradient(net, x, y, h=1e-3):
    xd = torch.from_numpy(x.astype(np.float64)).permute(0, 3, 1, 2)
    yt = torch.as_tensor(y)
    net = net.double()
    flat = xd.reshape(-1)
    g = np.zeros(flat.numel())
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        lp = nn.functional.cross_entropy(net(xd), yt, reduction="sum").item()
        flat[i] = old - h
        lm = nn.functional.cross_entropy(net(xd), yt, reduction="sum").item()
        flat[i] = old
        g[i] = (lp - lm) / (2 * h)
    return g.reshape(xd.shape).transpose(0, 2, 3, 1)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_input_gradient_matches_finite_differences(seed):
    net = TinyNet(seed=seed).double()
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.2, 0.8, (2, 6, 6, 1))
    y = rng.integers(0, 3, 2)
    xt = torch.from_numpy(x).permute(0, 3, 1, 2).requires_grad_(True)
    loss = nn.functional.cross_entropy(net(xt), torch.as_tensor(y), reduction="sum")
    (g,) = torch.autograd.grad(loss, xt)
    g = g.permute(0, 2, 3, 1).numpy()
    fd = _fd_gradient(net, x, y)
    rel = np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12)
    assert rel < 1e-3


def test_input_gradient_api_batch_independence_and_zero_layer():
    net = TinyNet(seed=1)
    rng = np.random.default_rng(0)
    x = rng.random((3, 6, 6, 1), dtype=np.float32)
    y = np.array([0, 1, 2])
    g_all = M.input_gradient(net, x, y)
    for i in range(3):
        gi = M.input_gradient(net, x[i:i + 1], y[i:i + 1])
        assert np.allclose(gi[0], g_all[i], atol=1e-6)
    with torch.no_grad():
        net.fc2.weight.zero_()
    assert np.all(M.input_gradient(net, x, y) == 0)


@pytest.mark.parametrize("arch,shape", [("lenet5", (28, 28, 1)), ("resnet18_passport", (28, 28, 1))])
def test_checkpoint_roundtrip_exact(tmp_path, arch, shape):
    m = M.build_classifier(arch, 10, shape, seed=2)
    m.tags.append("embed:content")
    probe = np.random.default_rng(1).random((5, *shape), dtype=np.float32)
    p = M.checkpoint_save(m, tmp_path / "m.npz")
    m2 = M.checkpoint_load(p)
    assert np.array_equal(M.logits(m, probe), M.logits(m2, probe))
    assert m2.tags == ["embed:content"]


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        M.checkpoint_load(tmp_path / "nope.npz")
    m = M.build_classifier("lenet5", 10, (28, 28, 1))
    p = M.checkpoint_save(m, tmp_path / "m.npz")
    with pytest.raises(M.CheckpointError, match="'lenet5'.*'resnet_small'"):
        M.checkpoint_load(p, expected_arch="resnet_small")
    z = dict(np.load(p))
    meta = json.loads(bytes(z["__meta__"]).decode())
    meta["format_version"] = 99
    z["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(tmp_path / "old.npz", **z)
    with pytest.raises(M.CheckpointError, match="format version 99"):
        M.checkpoint_load(tmp_path / "old.npz")
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(M.CheckpointError):
        M.checkpoint_load(bad)
