"""Classifier architectures, supervised training, evaluation, input gradients, checkpoints."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import LabeledImageSet
from .seeding import seed_everything

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ARCHS = ("lenet5", "resnet_small", "resnet18_passport")


class ModelError(RuntimeError):
    pass


class TrainingDiverged(ModelError):
    pass


class CheckpointError(ModelError):
    pass


class Classifier(nn.Module):
    """Base for all classifiers: NCHW float input in [0, 1], logits out."""

    arch_id = ""

    def __init__(self, num_classes: int, input_shape):
        super().__init__()
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(v) for v in input_shape)
        # lineage tags, e.g. "removal:steal"; claim attacks check for a removal tag
        self.tags: list[str] = []

    @property
    def fc_param_index(self) -> list[tuple[str, int]]:
        """(parameter name, element count) of every dense-layer weight matrix, in forward order.

        Biases are excluded so that magnitude rankings compare weights only.
        """
        return [(f"{name}.weight", m.weight.numel())
                for name, m in self.named_modules() if isinstance(m, nn.Linear)]

    def fc_linears(self) -> list[nn.Linear]:
        return [m for m in self.modules() if isinstance(m, nn.Linear)]

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


class LeNet5(Classifier):
    arch_id = "lenet5"

    def __init__(self, num_classes=10, input_shape=(28, 28, 1)):
        if tuple(input_shape) != (28, 28, 1):
            raise ModelError(f"lenet5 expects input shape (28, 28, 1), got {tuple(input_shape)}")
        super().__init__(num_classes, input_shape)
        self.conv1 = nn.Conv2d(1, 6, 5, padding=2)
        self.conv2 = nn.Conv2d(6, 16, 5)
        self.fc1 = nn.Linear(16 * 5 * 5, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, num_classes)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = x.flatten(1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.fc3(x)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def _check_resnet_shape(arch, shape):
    h, w, c = shape
    if c not in (1, 3) or h < 8 or w < 8:
        raise ModelError(f"{arch} expects (H>=8, W>=8, C in {{1,3}}), got {tuple(shape)}")


class ResNetSmall(Classifier):
    """ResNet-20 layout: three stages of three basic blocks, widths 16/32/64."""

    arch_id = "resnet_small"

    def __init__(self, num_classes=10, input_shape=(32, 32, 3), blocks=3):
        _check_resnet_shape(self.arch_id, input_shape)
        super().__init__(num_classes, input_shape)
        self.conv = nn.Conv2d(input_shape[2], 16, 3, 1, 1, bias=False)
        self.bn = nn.BatchNorm2d(16)
        layers, cin = [], 16
        for cout, stride in ((16, 1), (32, 2), (64, 2)):
            for i in range(blocks):
                layers.append(BasicBlock(cin, cout, stride if i == 0 else 1))
                cin = cout
        self.layers = nn.Sequential(*layers)
        self.fc = nn.Linear(64, num_classes)

    def forward(self, x):
        x = F.relu(self.bn(self.conv(x)))
        x = self.layers(x)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


def build_classifier(arch_id: str, num_classes: int, input_shape, seed: int = 0, **kwargs) -> Classifier:
    if arch_id not in ARCHS:
        raise ModelError(f"unknown architecture {arch_id!r}; choose from {', '.join(ARCHS)}")
    torch.manual_seed(seed)
    if arch_id == "lenet5":
        model = LeNet5(num_classes, input_shape)
    elif arch_id == "resnet_small":
        model = ResNetSmall(num_classes, input_shape)
    else:
        from .passport import PassportResNet18
        model = PassportResNet18(num_classes, input_shape, seed=seed, **kwargs)
    log.debug("built %s with %d parameters", arch_id, model.num_parameters)
    return model


def clone_model(model: Classifier) -> Classifier:
    return copy.deepcopy(model)


# --------------------------------------------------------------------------- training

OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainSpec:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def replace(self, **kw) -> "TrainSpec":
        d = asdict(self)
        d.update(kw)
        return TrainSpec(**d)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


def to_numpy_images(x: torch.Tensor) -> np.ndarray:
    return x.detach().permute(0, 2, 3, 1).contiguous().numpy()


def make_optimizer(params, spec: TrainSpec):
    if spec.optimizer == "sgd":
        return torch.optim.SGD(params, lr=spec.learning_rate, momentum=spec.momentum)
    return torch.optim.Adam(params, lr=spec.learning_rate)


def fit(model: nn.Module, images: np.ndarray, labels: np.ndarray, spec: TrainSpec, loss_fn=None,
        track_accuracy: bool = True) -> list[dict]:
    """Minibatch training loop shared by every embedding and attack.

    ``loss_fn(model, xb, yb)`` overrides plain cross-entropy (passport multi-task training).
    """
    if len(labels) == 0:
        raise ValueError("cannot train on an empty dataset")
    gen = seed_everything(spec.seed)
    x_all = to_tensor(images)
    y_all = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    opt = make_optimizer([p for p in model.parameters() if p.requires_grad], spec)
    loss_fn = loss_fn or (lambda m, xb, yb: F.cross_entropy(m(xb), yb))
    history = []
    n = len(y_all)
    for epoch in range(spec.epochs):
        model.train()
        perm = torch.randperm(n, generator=gen)
        total, seen = 0.0, 0
        for start in range(0, n, spec.batch_size):
            idx = perm[start:start + spec.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            opt.zero_grad()
            loss = loss_fn(model, xb, yb)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at epoch {epoch} batch {start // spec.batch_size} "
                    f"(optimizer={spec.optimizer}, lr={spec.learning_rate})")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        model.eval()
        rec = {"epoch": epoch, "loss": total / seen}
        if track_accuracy:
            rec["accuracy"] = float((predict(model, images) == labels).mean())
        history.append(rec)
        log.debug("epoch %d %s", epoch, rec)
    model.eval()
    return history


def train_classifier(model: Classifier, data: LabeledImageSet, spec: TrainSpec):
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if data.labels.max() >= model.num_classes:
        raise ValueError("labels exceed the model's class count")
    history = fit(model, data.images, data.labels, spec)
    return model, history


@torch.no_grad()
def logits(model: nn.Module, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        out.append(model(to_tensor(images[start:start + batch_size])))
    if not out:
        return np.zeros((0, getattr(model, "num_classes", 0)), dtype=np.float32)
    return torch.cat(out).numpy()


def predict(model: nn.Module, images: np.ndarray) -> np.ndarray:
    return logits(model, images).argmax(1)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(1, keepdims=True)


def evaluate_accuracy(model: nn.Module, data: LabeledImageSet) -> float:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty set")
    return float((predict(model, data.images) == data.labels).mean())


def input_gradient(model: nn.Module, x: np.ndarray, y) -> np.ndarray:
    """d CE / d x for each input; losses are summed so rows stay independent."""
    model.eval()
    xt = to_tensor(x).requires_grad_(True)
    yt = torch.as_tensor(np.asarray(y, dtype=np.int64).reshape(-1))
    loss = F.cross_entropy(model(xt), yt, reduction="sum")
    (grad,) = torch.autograd.grad(loss, xt)
    return to_numpy_images(grad)


# --------------------------------------------------------------------------- checkpoints

def model_meta(model: Classifier) -> dict:
    meta = {"format_version": CHECKPOINT_VERSION, "arch_id": model.arch_id,
            "num_classes": model.num_classes, "input_shape": list(model.input_shape),
            "tags": list(model.tags)}
    if hasattr(model, "config"):
        meta["config"] = model.config()
    return meta


def checkpoint_save(model: Classifier, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    names = list(state.keys())
    arrays = {f"p{i:04d}": state[k].detach().cpu().numpy() for i, k in enumerate(names)}
    meta = model_meta(model)
    meta["param_names"] = names
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    return path


def checkpoint_load(path, expected_arch: str | None = None) -> Classifier:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            arrays = [z[f"p{i:04d}"] for i in range(len(meta["param_names"]))]
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {meta.get('format_version')}, expected {CHECKPOINT_VERSION}")
    if expected_arch is not None and meta["arch_id"] != expected_arch:
        raise CheckpointError(f"checkpoint {path} holds arch {meta['arch_id']!r}, expected {expected_arch!r}")
    model = build_classifier(meta["arch_id"], meta["num_classes"], tuple(meta["input_shape"]),
                             **meta.get("config", {}))
    state = {k: torch.from_numpy(np.array(a)) for k, a in zip(meta["param_names"], arrays)}
    model.load_state_dict(state)
    model.tags = list(meta.get("tags", []))
    model.eval()
    return model


def state_checksum(model: nn.Module) -> str:
    import hashlib
    h = hashlib.sha256()
    for k, v in model.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
