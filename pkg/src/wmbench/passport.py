"""ResNet-18-shaped classifier whose last-stage normalization scale/bias can come from secret passports."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .models import Classifier, ModelError, _check_resnet_shape

MODES = ("passport", "bypass")


class PassportConvBN(nn.Module):
    """conv -> BN without affine -> per-channel scale/bias.

    In passport mode scale = mean(conv(P_gamma)) and bias = mean(conv(P_beta)) per output channel;
    in bypass mode the learnable ``scale``/``bias`` are used, which is exactly an affine BatchNorm.
    """

    def __init__(self, cin, cout, stride, passport_hw=4):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn = nn.BatchNorm2d(cout, affine=False)
        self.scale = nn.Parameter(torch.ones(cout))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.register_buffer("passport_gamma", torch.zeros(1, cin, passport_hw, passport_hw))
        self.register_buffer("passport_beta", torch.zeros(1, cin, passport_hw, passport_hw))
        self.mode = "bypass"

    def passport_affine(self):
        gamma = F.conv2d(self.passport_gamma, self.conv.weight, padding=1).mean(dim=(0, 2, 3))
        beta = F.conv2d(self.passport_beta, self.conv.weight, padding=1).mean(dim=(0, 2, 3))
        return gamma, beta

    def forward(self, x):
        out = self.bn(self.conv(x))
        if self.mode == "passport":
            gamma, beta = self.passport_affine()
        else:
            gamma, beta = self.scale, self.bias
        return out * gamma.view(1, -1, 1, 1) + beta.view(1, -1, 1, 1)


class ConvBN(nn.Sequential):
    def __init__(self, cin, cout, stride):
        super().__init__(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout))


class Block(nn.Module):
    def __init__(self, cin, cout, stride, passport=False, passport_hw=4):
        super().__init__()
        make = (lambda a, b, s: PassportConvBN(a, b, s, passport_hw)) if passport else ConvBN
        self.c1 = make(cin, cout, stride)
        self.c2 = make(cout, cout, 1)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.c1(x))
        return F.relu(self.c2(out) + self.shortcut(x))


class PassportResNet18(Classifier):
    """[2,2,2,2] basic blocks; every conv of the last stage is a passport layer."""

    arch_id = "resnet18_passport"

    def __init__(self, num_classes=10, input_shape=(32, 32, 3), seed=0, base_width=16,
                 passport_hw=4, mode="passport", passport=True):
        _check_resnet_shape(self.arch_id, input_shape)
        super().__init__(num_classes, input_shape)
        self.base_width = int(base_width)
        self.passport_hw = int(passport_hw)
        self.has_passport = bool(passport)
        w = self.base_width
        self.stem = ConvBN(input_shape[2], w, 1)
        stages, cin = [], w
        for i, (cout, stride) in enumerate(((w, 1), (2 * w, 2), (4 * w, 2), (8 * w, 2))):
            last = passport and i == 3
            stages.append(nn.Sequential(Block(cin, cout, stride, last, passport_hw),
                                        Block(cout, cout, 1, last, passport_hw)))
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.fc = nn.Linear(8 * w, num_classes)
        if passport:
            gen = torch.Generator().manual_seed(int(seed) + 7919)
            self.set_passports(random_passports(self, gen))
        self.set_mode(mode if passport else "bypass")

    def config(self):
        return {"base_width": self.base_width, "passport_hw": self.passport_hw,
                "mode": self.mode, "passport": self.has_passport}

    def passport_layers(self) -> list[tuple[str, PassportConvBN]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, PassportConvBN)]

    def passport_shapes(self) -> dict[str, tuple]:
        return {n: tuple(m.passport_gamma.shape) for n, m in self.passport_layers()}

    def get_passports(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {n: (m.passport_gamma.numpy().copy(), m.passport_beta.numpy().copy())
                for n, m in self.passport_layers()}

    def set_passports(self, passports: dict):
        layers = dict(self.passport_layers())
        if set(passports) != set(layers):
            raise ModelError(f"passports bind layers {sorted(passports)}, model has {sorted(layers)}")
        for name, (pg, pb) in passports.items():
            m = layers[name]
            for buf, val in ((m.passport_gamma, pg), (m.passport_beta, pb)):
                val = torch.as_tensor(np.asarray(val), dtype=torch.float32)
                if tuple(val.shape) != tuple(buf.shape):
                    raise ModelError(f"passport for {name} has shape {tuple(val.shape)}, "
                                     f"layer expects {tuple(buf.shape)}")
                buf.copy_(val)

    @property
    def mode(self):
        return self._mode

    def set_mode(self, mode: str):
        if mode not in MODES:
            raise ModelError(f"mode must be one of {MODES}, got {mode!r}")
        self._mode = mode
        for _, m in self.passport_layers():
            m.mode = mode
        return self

    def forward(self, x):
        x = F.relu(self.stem(x))
        x = self.stages(x)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


def random_passports(model: PassportResNet18, gen: torch.Generator | None = None) -> dict:
    out = {}
    for name, shape in model.passport_shapes().items():
        out[name] = (torch.randn(shape, generator=gen).numpy(), torch.randn(shape, generator=gen).numpy())
    return out


def plain_twin(model: PassportResNet18) -> PassportResNet18:
    """Same network with every passport layer replaced by conv + affine BN, weights copied from bypass mode."""
    twin = PassportResNet18(model.num_classes, model.input_shape, base_width=model.base_width,
                            passport_hw=model.passport_hw, passport=False)
    src = model.state_dict()
    state = {}
    for k, v in twin.state_dict().items():
        if k in src:
            state[k] = src[k]
            continue
        # ConvBN is Sequential(conv, bn): c1.0.weight <- c1.conv.weight, c1.1.weight <- c1.scale ...
        prefix, idx, leaf = k.rsplit(".", 2)
        if idx == "0":
            state[k] = src[f"{prefix}.conv.{leaf}"]
        elif leaf == "weight":
            state[k] = src[f"{prefix}.scale"]
        elif leaf == "bias":
            state[k] = src[f"{prefix}.bias"]
        else:
            state[k] = src[f"{prefix}.bn.{leaf}"]
    twin.load_state_dict(state)
    twin.eval()
    return twin


def multitask_loss(model: PassportResNet18, xb, yb):
    """Cross-entropy summed over bypass and passport modes so both stay usable."""
    model.set_mode("bypass")
    loss = F.cross_entropy(model(xb), yb)
    model.set_mode("passport")
    return loss + F.cross_entropy(model(xb), yb)
