"""Datasets, adversary splits, and out-of-task image pools.

All image batches are float32 arrays shaped (N, H, W, C) with values in [0, 1]
and quantized to multiples of 1/255, so that any set survives a PNG round trip
bit-for-bit.
"""
from __future__ import annotations

import enum
import gzip
import logging
import os
import pickle
import tarfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw, ImageFont

log = logging.getLogger(__name__)


class DatasetError(RuntimeError):
    pass


class Provenance(str, enum.Enum):
    OWNER_TRAIN = "owner_train"
    RAW_TEST = "raw_test"
    ADV_TEST_HALF = "adv_test_half"
    EVAL_TEST_HALF = "eval_test_half"
    SURROGATE = "surrogate"
    SYNTHETIC = "synthetic"


def quantize(x) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.round(x * 255.0).astype(np.uint8).astype(np.float32) / 255.0


def from_uint8(x) -> np.ndarray:
    return np.asarray(x, dtype=np.uint8).astype(np.float32) / 255.0


@dataclass
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    provenance: Provenance
    num_classes: int
    name: str = ""
    # position of each row in the set it was carved from (split/provenance audits)
    index: np.ndarray = field(default=None)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.provenance = Provenance(self.provenance)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.images):
            if self.images.min() < 0.0 or self.images.max() > 1.0:
                raise ValueError("pixel values must lie in [0, 1]")
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.index is None:
            self.index = np.arange(len(self.labels))
        self.index = np.asarray(self.index, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx, provenance=None, name=None) -> "LabeledImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledImageSet(
            self.images[idx], self.labels[idx], provenance or self.provenance,
            self.num_classes, name or self.name, self.index[idx])

    def of_class(self, c: int) -> "LabeledImageSet":
        return self.subset(np.flatnonzero(self.labels == c))

    def export_png(self, directory, limit: int | None = None) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(self.images[:limit]):
            save_png(img, out / f"{i}.png")


def concat_sets(sets, provenance, name="") -> LabeledImageSet:
    sets = [s for s in sets if len(s)]
    if not sets:
        raise ValueError("nothing to concatenate")
    return LabeledImageSet(
        np.concatenate([s.images for s in sets]), np.concatenate([s.labels for s in sets]),
        provenance, max(s.num_classes for s in sets), name)


def save_png(img: np.ndarray, path) -> None:
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    if arr.shape[-1] == 1:
        Image.fromarray(arr[..., 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def load_png(path, channels: int) -> np.ndarray:
    im = Image.open(path)
    im = im.convert("L" if channels == 1 else "RGB")
    arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[..., None]
    return from_uint8(arr)


# --------------------------------------------------------------------------- loaders

def _open_maybe_gz(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _find(directory: Path, stem: str) -> Path:
    for cand in (directory / stem, directory / (stem + ".gz")):
        if cand.exists():
            return cand
    raise DatasetError(f"missing archive file {directory / stem}[.gz]")


def read_idx(path: Path) -> np.ndarray:
    try:
        with _open_maybe_gz(path) as fh:
            raw = fh.read()
    except (OSError, EOFError) as exc:
        raise DatasetError(f"corrupt archive {path}: {exc}") from exc
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] != 0x08:
        raise DatasetError(f"corrupt IDX file {path}: bad magic")
    ndim = raw[3]
    dims = [int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise DatasetError(f"corrupt IDX file {path}: expected {np.prod(dims)} values, got {body.size}")
    return body.reshape(dims)


def _load_idx_pair(directory: Path, prefix: str):
    images = read_idx(_find(directory, f"{prefix}-images-idx3-ubyte"))
    labels = read_idx(_find(directory, f"{prefix}-labels-idx1-ubyte"))
    return from_uint8(images[..., None]), labels.astype(np.int64)


def _load_mnist_like(name: str, root: Path):
    directory = root / name
    if not directory.is_dir():
        raise DatasetError(f"dataset directory not found: {directory}")
    xtr, ytr = _load_idx_pair(directory, "train")
    xte, yte = _load_idx_pair(directory, "t10k")
    return xtr, ytr, xte, yte


def _cifar_member_reader(directory: Path, folder: str):
    """Return a callable reading one pickled batch from either an extracted folder or the tarball."""
    extracted = directory / folder
    if extracted.is_dir():
        def read(member):
            p = extracted / member
            if not p.exists():
                raise DatasetError(f"missing archive file {p}")
            with open(p, "rb") as fh:
                return pickle.load(fh, encoding="latin1")
        return read
    tarballs = sorted(directory.glob("*.tar.gz"))
    if not tarballs:
        raise DatasetError(f"dataset files not found under {directory} (expected {folder}/ or a .tar.gz)")
    tar = tarfile.open(tarballs[0], "r:gz")

    def read(member):
        try:
            fh = tar.extractfile(f"{folder}/{member}")
        except KeyError as exc:
            raise DatasetError(f"{tarballs[0]} lacks {folder}/{member}") from exc
        return pickle.load(fh, encoding="latin1")
    return read


def _cifar_images(batch) -> np.ndarray:
    data = np.asarray(batch["data"], dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return from_uint8(data)


def _load_cifar10(root: Path):
    read = _cifar_member_reader(root / "cifar10", "cifar-10-batches-py")
    try:
        train = [read(f"data_batch_{i}") for i in range(1, 6)]
        test = read("test_batch")
    except (pickle.UnpicklingError, EOFError, KeyError) as exc:
        raise DatasetError(f"corrupt CIFAR-10 archive under {root / 'cifar10'}: {exc}") from exc
    xtr = np.concatenate([_cifar_images(b) for b in train])
    ytr = np.concatenate([np.asarray(b["labels"]) for b in train]).astype(np.int64)
    return xtr, ytr, _cifar_images(test), np.asarray(test["labels"], dtype=np.int64)


def _load_cifar100(root: Path):
    read = _cifar_member_reader(root / "cifar100", "cifar-100-python")
    try:
        train, test = read("train"), read("test")
    except (pickle.UnpicklingError, EOFError, KeyError) as exc:
        raise DatasetError(f"corrupt CIFAR-100 archive under {root / 'cifar100'}: {exc}") from exc
    return (_cifar_images(train), np.asarray(train["fine_labels"], dtype=np.int64),
            _cifar_images(test), np.asarray(test["fine_labels"], dtype=np.int64))


def _load_mnist_5k(root: Path):
    # 5000 genuine MNIST digits shipped inside mlxtend (500 per class, sorted by class)
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise DatasetError("mnist-5k needs the mlxtend package") from exc
    x, y = mnist_data()
    x = from_uint8(x.reshape(-1, 28, 28, 1))
    y = y.astype(np.int64)
    rng = np.random.default_rng(0)
    tr, te = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        tr.append(idx[:300])
        te.append(idx[300:])
    tr, te = np.sort(np.concatenate(tr)), np.sort(np.concatenate(te))
    return x[tr], y[tr], x[te], y[te]


_LOADERS = {
    "mnist": (lambda root: _load_mnist_like("mnist", root), 10),
    "fashion-mnist": (lambda root: _load_mnist_like("fashion-mnist", root), 10),
    "mnist-5k": (_load_mnist_5k, 10),
    "cifar10": (_load_cifar10, 10),
    "cifar10-subset": (_load_cifar10, 10),
    "cifar100": (_load_cifar100, 100),
}

PUBLIC_DATASETS = ("mnist", "mnist-5k", "cifar10", "cifar10-subset")
CIFAR_SUBSET_TRAIN = 10_000


def default_root() -> Path:
    return Path(os.environ.get("WMBENCH_DATA", "data"))


def load_dataset(name: str, root=None):
    """Load ``name`` from ``<root>/<name>/``; returns (train, test) image sets."""
    if name not in PUBLIC_DATASETS:
        raise DatasetError(f"unsupported dataset {name!r}; choose from {', '.join(PUBLIC_DATASETS)}")
    return _load(name, Path(root) if root is not None else default_root())


def _load(name: str, root: Path):
    loader, k = _LOADERS[name]
    xtr, ytr, xte, yte = loader(root)
    if name == "cifar10-subset":
        xtr, ytr = xtr[:CIFAR_SUBSET_TRAIN], ytr[:CIFAR_SUBSET_TRAIN]
    train = LabeledImageSet(xtr, ytr, Provenance.OWNER_TRAIN, k, name)
    test = LabeledImageSet(xte, yte, Provenance.RAW_TEST, k, name)
    log.info("loaded %s: train=%d test=%d K=%d shape=%s", name, len(train), len(test), k, train.shape)
    return train, test


# --------------------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitSpec:
    adversary_fraction: float = 0.5
    seed: int = 0


def split_adversary_data(test: LabeledImageSet, spec: SplitSpec):
    """Carve the adversary-accessible part of a test set; the remainder is the evaluation set."""
    f = spec.adversary_fraction
    if not (0.0 < f <= 1.0):
        raise ValueError(f"adversary_fraction must lie in (0, 1], got {f}")
    n = len(test)
    n_adv = int(np.floor(f * n + 0.5))
    perm = np.random.default_rng(spec.seed).permutation(n)
    adv_idx, eval_idx = np.sort(perm[:n_adv]), np.sort(perm[n_adv:])
    adv = test.subset(adv_idx, Provenance.ADV_TEST_HALF)
    ev = test.subset(eval_idx, Provenance.EVAL_TEST_HALF)
    return adv, ev


# --------------------------------------------------------------------------- resizing

def resize_images(images: np.ndarray, shape) -> np.ndarray:
    """Bilinear resize to (H, W) then match the channel count (broadcast up, luma down)."""
    h, w, c = shape
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2)
    if x.shape[-2:] != (h, w):
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    if x.shape[1] != c:
        if x.shape[1] == 1:
            x = x.expand(-1, c, -1, -1)
        elif c == 1:
            wts = torch.tensor([0.299, 0.587, 0.114]).view(1, 3, 1, 1)
            x = (x[:, :3] * wts).sum(1, keepdim=True)
        else:
            raise ValueError(f"cannot map {x.shape[1]} channels onto {c}")
    return quantize(x.permute(0, 2, 3, 1).numpy())


# --------------------------------------------------------------------------- surrogates & pools

SURROGATES = {
    "mnist": "fashion-mnist",
    "mnist-5k": "objects",
    "cifar10": "cifar100",
    "cifar10-subset": "cifar100",
}
SURROGATE_SIZE = {"fashion-mnist": None, "objects": 5000, "cifar100": 10_000}
_SHAPES = {"mnist": (28, 28, 1), "mnist-5k": (28, 28, 1), "cifar10": (32, 32, 3), "cifar10-subset": (32, 32, 3)}


def surrogate_source(target_dataset: str, root=None, n: int | None = None, seed: int = 0) -> LabeledImageSet:
    """Out-of-task images for fine-tuning/stealing; labels are placeholders (zeros)."""
    if target_dataset not in SURROGATES:
        pairs = ", ".join(f"{k}->{v}" for k, v in SURROGATES.items())
        raise DatasetError(f"no surrogate registered for {target_dataset!r}; registered: {pairs}")
    name = SURROGATES[target_dataset]
    shape = _SHAPES[target_dataset]
    n = n if n is not None else SURROGATE_SIZE[name]
    if name in POOLS:
        images = image_pool(name, n, shape, seed)
    else:
        train, _ = _load(name, Path(root) if root is not None else default_root())
        images = train.images if n is None else train.images[:n]
        images = resize_images(images, shape)
    return LabeledImageSet(images, np.zeros(len(images), dtype=np.int64), Provenance.SURROGATE, 10, name)


def _skimage_dir() -> Path:
    import skimage.data
    return Path(skimage.data.__file__).parent


_PHOTOS = ("astronaut.png", "camera.png", "coffee.png", "chelsea.png", "rocket.jpg", "brick.png",
           "grass.png", "gravel.png", "moon.png", "coins.png", "page.png", "text.png", "cell.png",
           "hubble_deep_field.jpg", "retina.jpg", "motorcycle_left.png", "ihc.png", "color.png",
           "clock_motion.png", "logo.png")


def _photos() -> list[np.ndarray]:
    out = []
    base = _skimage_dir()
    for fname in _PHOTOS:
        p = base / fname
        if p.exists():
            out.append(np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0)
    if not out:
        raise DatasetError("no bundled photographs found for the patches pool")
    return out


def _patches(n, shape, rng):
    photos = _photos()
    h, w, _ = shape
    crops = np.empty((n, h, w, 3), dtype=np.float32)
    for i in range(n):
        ph = photos[rng.integers(len(photos))]
        size = int(rng.integers(max(h, 24), min(ph.shape[0], ph.shape[1], 160) + 1))
        y0 = int(rng.integers(0, ph.shape[0] - size + 1))
        x0 = int(rng.integers(0, ph.shape[1] - size + 1))
        crop = ph[y0:y0 + size, x0:x0 + size]
        if rng.random() < 0.5:
            crop = crop[:, ::-1]
        im = Image.fromarray((crop * 255).astype(np.uint8)).resize((w, h), Image.BILINEAR)
        crops[i] = np.asarray(im, dtype=np.float32) / 255.0
    return crops


def _faces(n, shape, rng, offset=0):
    faces = np.load(_skimage_dir() / "lfw_subset.npy")[:100].astype(np.float32)
    order = np.arange(100)
    idx = order[(offset + np.arange(n)) % 100]
    imgs = faces[idx][..., None]
    if n + offset > 100:
        log.warning("faces pool holds 100 images; %d requested, reusing with jitter", n + offset)
        for j in range(100 - offset, n):
            imgs[j] = np.roll(imgs[j], int(rng.integers(-2, 3)), axis=1)
    return imgs


def _letters(n, shape, rng):
    h, w, _ = shape
    out = np.zeros((n, h, w, 1), dtype=np.float32)
    for i in range(n):
        ch = chr(ord("A") + int(rng.integers(26)))
        size = int(rng.integers(int(0.6 * h), int(0.85 * h) + 1))
        font = ImageFont.load_default(size=size)
        im = Image.new("L", (w, h), 0)
        d = ImageDraw.Draw(im)
        bbox = d.textbbox((0, 0), ch, font=font)
        tw, th = bbox[2] - bbox[0], bbox[3] - bbox[1]
        x = (w - tw) // 2 - bbox[0] + int(rng.integers(-2, 3))
        y = (h - th) // 2 - bbox[1] + int(rng.integers(-2, 3))
        d.text((x, y), ch, fill=255, font=font, stroke_width=int(rng.integers(0, 2)), stroke_fill=255)
        im = im.rotate(float(rng.uniform(-15, 15)), resample=Image.BILINEAR)
        out[i, ..., 0] = np.asarray(im, dtype=np.float32) / 255.0
    return out


def _abstract(n, shape, rng):
    """Random polygons and ellipses over a random color field, rendered at 4x and downsampled."""
    h, w, _ = shape
    s = 4
    out = np.empty((n, h, w, 3), dtype=np.float32)
    for i in range(n):
        bg = tuple(int(v) for v in rng.integers(0, 256, 3))
        im = Image.new("RGB", (w * s, h * s), bg)
        d = ImageDraw.Draw(im)
        for _ in range(int(rng.integers(3, 9))):
            color = tuple(int(v) for v in rng.integers(0, 256, 3))
            if rng.random() < 0.5:
                k = int(rng.integers(3, 7))
                pts = [(float(rng.uniform(0, w * s)), float(rng.uniform(0, h * s))) for _ in range(k)]
                d.polygon(pts, fill=color)
            else:
                x0, y0 = rng.uniform(-w * s / 4, w * s, 2)
                ex, ey = rng.uniform(w * s / 8, w * s / 2, 2)
                d.ellipse([float(x0), float(y0), float(x0 + ex), float(y0 + ey)], fill=color)
        im = im.resize((w, h), Image.LANCZOS)
        out[i] = np.asarray(im, dtype=np.float32) / 255.0
    return out


def _objects(n, shape, rng):
    """Textured silhouettes on a black background: photo patches cut out by random ellipse/polygon masks."""
    h, w, _ = shape
    tex = _patches(n, (h, w, 1), rng).mean(-1)
    out = np.zeros((n, h, w, 1), dtype=np.float32)
    s = 4
    for i in range(n):
        im = Image.new("L", (w * s, h * s), 0)
        d = ImageDraw.Draw(im)
        cx, cy = rng.uniform(0.4, 0.6, 2) * w * s
        for _ in range(int(rng.integers(1, 4))):
            if rng.random() < 0.5:
                ex, ey = rng.uniform(0.15, 0.45, 2) * w * s
                ox, oy = rng.uniform(-0.1, 0.1, 2) * w * s
                d.ellipse([float(cx + ox - ex), float(cy + oy - ey), float(cx + ox + ex), float(cy + oy + ey)], fill=255)
            else:
                k = int(rng.integers(3, 7))
                r = rng.uniform(0.2, 0.45) * w * s
                ang = np.sort(rng.uniform(0, 2 * np.pi, k))
                d.polygon([(float(cx + r * np.cos(a)), float(cy + r * np.sin(a))) for a in ang], fill=255)
        mask = np.asarray(im.resize((w, h), Image.LANCZOS), dtype=np.float32) / 255.0
        out[i, ..., 0] = mask * np.clip(tex[i] * rng.uniform(0.5, 1.0) + rng.uniform(0, 0.4), 0, 1)
    return out


POOLS = ("faces", "letters", "abstract", "patches", "objects", "uniform")


def image_pool(name: str, n: int, shape, seed: int = 0, offset: int = 0) -> np.ndarray:
    """Procedural or bundled out-of-task images, resized to ``shape`` and quantized."""
    if n <= 0:
        raise ValueError("empty pool requested")
    rng = np.random.default_rng(seed)
    if name == "faces":
        imgs = _faces(n, shape, rng, offset)
    elif name == "letters":
        imgs = _letters(n, shape, rng)
    elif name == "abstract":
        imgs = _abstract(n, shape, rng)
    elif name == "patches":
        imgs = _patches(n, shape, rng)
    elif name == "objects":
        imgs = _objects(n, shape, rng)
    elif name == "uniform":
        return quantize(rng.random((n, *shape)))
    else:
        raise DatasetError(f"unknown image pool {name!r}; choose from {', '.join(POOLS)}")
    return resize_images(imgs, shape)


def pool_set(name, n, shape, num_classes, seed=0, offset=0, provenance=Provenance.SYNTHETIC) -> LabeledImageSet:
    imgs = image_pool(name, n, shape, seed, offset)
    return LabeledImageSet(imgs, np.zeros(n, dtype=np.int64), provenance, num_classes, name)
