import numpy as np
import pytest
import torch

from wmbench import models as M
from wmbench.passport import plain_twin, random_passports
from wmbench.schemes import build_passport_model


def _model():
    m = build_passport_model(10, (28, 28, 1), seed=0, base_width=8)
    m.eval()
    return m


def test_bypass_mode_equals_plain_twin():
    m = _model()
    with torch.no_grad():
        for _, layer in m.passport_layers():
            layer.scale.uniform_(0.5, 1.5)
            layer.bias.uniform_(-0.2, 0.2)
    m.set_mode("bypass")
    x = np.random.default_rng(0).random((4, 28, 28, 1), dtype=np.float32)
    assert np.allclose(M.logits(m, x), M.logits(plain_twin(m), x), atol=1e-5)


def test_passport_shape_and_binding_mismatch():
    m = _model()
    good = m.get_passports()
    name = next(iter(good))
    bad = dict(good)
    bad[name] = (np.zeros((1, 2, 3, 3)), good[name][1])
    with pytest.raises(M.ModelError, match="shape"):
        m.set_passports(bad)
    with pytest.raises(M.ModelError, match="bind"):
        m.set_passports({k: v for k, v in good.items() if k != name})
    with pytest.raises(M.ModelError):
        m.set_mode("inserted")


def test_passport_mode_depends_on_passport():
    m = _model()
    x = np.random.default_rng(0).random((4, 28, 28, 1), dtype=np.float32)
    m.set_mode("passport")
    z1 = M.logits(m, x)
    m.set_passports(random_passports(m, torch.Generator().manual_seed(1)))
    assert not np.allclose(z1, M.logits(m, x))


def test_passport_checkpoint_keeps_passports(tmp_path):
    m = _model()
    p = M.checkpoint_save(m, tmp_path / "p.npz")
    m2 = M.checkpoint_load(p, "resnet18_passport")
    for k, (g, b) in m.get_passports().items():
        g2, b2 = m2.get_passports()[k]
        assert np.array_equal(g, g2) and np.array_equal(b, b2)
    assert m2.mode == m.mode
