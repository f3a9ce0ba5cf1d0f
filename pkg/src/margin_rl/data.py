"""Dataset ingestion (MNIST, CIFAR-10, SVHN) and a synthetic 2-D set.

Images are kept as uint8 arrays and converted to float tensors in [0, 1] per
batch. Files live under ``$MARGIN_RL_DATA`` (default ``~/.cache/margin_rl``),
one subdirectory per dataset, and are checked against ``data_manifest.json``.
"""
from __future__ import annotations

import gzip
import hashlib
import io
import json
import logging
import os
import pickle
import tarfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

logger = logging.getLogger(__name__)

DATA_ENV = "MARGIN_RL_DATA"
DATASET_NAMES = ("mnist", "cifar10", "svhn", "synth2d")
MANIFEST = json.loads((Path(__file__).with_name("data_manifest.json")).read_text())


class DataError(RuntimeError):
    """Missing or corrupt dataset files."""


class ChecksumError(DataError):
    pass


def data_root(data_dir=None) -> Path:
    if data_dir is not None:
        return Path(data_dir)
    return Path(os.environ.get(DATA_ENV, Path.home() / ".cache" / "margin_rl"))


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    split: str = "train"
    seed: int = 0
    n: Optional[int] = None  # optional deterministic subset size

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise ValueError(f"unknown dataset {self.name!r}; expected one of {DATASET_NAMES}")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")


class ArrayDataset:
    def __init__(self, images: np.ndarray, labels: np.ndarray, name: str = ""):
        if len(images) != len(labels):
            raise ValueError("images and labels differ in length")
        self.images = images
        self.labels = labels.astype(np.int64)
        self.name = name
        self.scale = 255.0 if images.dtype == np.uint8 else 1.0

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def input_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def tensors(self, idx=None) -> tuple[torch.Tensor, torch.Tensor]:
        images = self.images if idx is None else self.images[idx]
        labels = self.labels if idx is None else self.labels[idx]
        x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32) / np.float32(self.scale))
        return x, torch.from_numpy(np.ascontiguousarray(labels))

    def subset(self, n: int, seed: int = 0) -> "ArrayDataset":
        if n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).permutation(len(self))[:n])
        return ArrayDataset(self.images[idx], self.labels[idx], self.name)

    def batches(self, batch_size: int, shuffle: bool = True, seed: int = 0, epoch: int = 0,
                augment: bool = False, drop_last: bool = False) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        """Deterministic minibatches; the order depends only on (seed, epoch)."""
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(self)) if shuffle else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            x, y = self.tensors(np.sort(idx) if not shuffle else idx)
            if augment:
                x = crop_flip(x, rng)
            yield x, y


def crop_flip(x: torch.Tensor, rng: np.random.Generator, pad: int = 4) -> torch.Tensor:
    n, _, h, w = x.shape
    padded = torch.nn.functional.pad(x, (pad, pad, pad, pad))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = torch.empty_like(x)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop.flip(-1) if flip[i] else crop
    return out


def _digest(path: Path, algo: str) -> str:
    h = hashlib.new(algo)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _find_layout(name: str, root: Path) -> tuple[str, dict]:
    layouts = MANIFEST["datasets"][name]["layouts"]
    for layout, files in layouts.items():
        if all((root / f).exists() for f in files):
            return layout, files
    expected = "; ".join(f"{k}: {', '.join(v)}" for k, v in layouts.items())
    raise DataError(f"{name} files not found under {root} (expected one of: {expected}); "
                    f"set ${DATA_ENV} or run `margin-rl data fetch {name}`")


def verify_files(root: Path, files: dict) -> None:
    for fname, sums in files.items():
        for algo, want in sums.items():
            got = _digest(root / fname, algo)
            if got != want:
                raise ChecksumError(f"{root / fname}: {algo} {got} != expected {want}")


def _read_idx(raw: bytes) -> np.ndarray:
    ndim = raw[3]
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    return np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def _load_mnist(root: Path, layout: str):
    opener = gzip.open if layout == "idx_gz" else open
    suffix = ".gz" if layout == "idx_gz" else ""
    out = {}
    for split, prefix in (("train", "train"), ("test", "t10k")):
        with opener(root / f"{prefix}-images-idx3-ubyte{suffix}", "rb") as f:
            images = _read_idx(f.read())
        with opener(root / f"{prefix}-labels-idx1-ubyte{suffix}", "rb") as f:
            labels = _read_idx(f.read())
        out[split] = ArrayDataset(images[:, None].copy(), labels.copy(), "mnist")
    return out


def _load_cifar10(root: Path, layout: str):
    if layout == "png":
        from PIL import Image

        def sprite(fname):
            # one image per row, 1024 RGB pixels in row-major HWC order
            rows = np.asarray(Image.open(root / fname).convert("RGB"))
            return rows.reshape(-1, 32, 32, 3).transpose(0, 3, 1, 2)

        train = np.concatenate([sprite(f"data_batch_{i}.png") for i in range(1, 6)])
        test = sprite("test_batch.png")
        y_train = np.array(json.loads((root / "train_lables.json").read_text()))
        y_test = np.array(json.loads((root / "test_lables.json").read_text()))
    else:
        batches = {}
        with tarfile.open(root / "cifar-10-python.tar.gz") as tar:
            for member in tar.getmembers():
                base = os.path.basename(member.name)
                if base.startswith(("data_batch_", "test_batch")):
                    batches[base] = pickle.load(tar.extractfile(member), encoding="latin1")
        def stack(names):
            x = np.concatenate([batches[n]["data"] for n in names]).reshape(-1, 3, 32, 32)
            y = np.concatenate([batches[n]["labels"] for n in names])
            return x, y
        train, y_train = stack([f"data_batch_{i}" for i in range(1, 6)])
        test, y_test = stack(["test_batch"])
    return {"train": ArrayDataset(np.ascontiguousarray(train), y_train, "cifar10"),
            "test": ArrayDataset(np.ascontiguousarray(test), y_test, "cifar10")}


def _load_svhn(root: Path, layout: str):
    from scipy.io import loadmat

    out = {}
    for split in ("train", "test"):
        mat = loadmat(root / f"{split}_32x32.mat")
        x = np.ascontiguousarray(mat["X"].transpose(3, 2, 0, 1))
        y = mat["y"].reshape(-1).astype(np.int64) % 10  # digit 0 is stored as label 10
        out[split] = ArrayDataset(x, y, "svhn")
    return out


def synth2d(n: int, seed: int = 0) -> ArrayDataset:
    """Uniform points in the unit square labelled by the side of x0 = x1."""
    rng = np.random.default_rng(seed)
    x = rng.random((n, 2)).astype(np.float32)
    y = (x[:, 0] < x[:, 1]).astype(np.int64)
    return ArrayDataset(x, y, "synth2d")


SYNTH2D_WEIGHTS = (1.0, -1.0)

_LOADERS = {"mnist": _load_mnist, "cifar10": _load_cifar10, "svhn": _load_svhn}
_cache: dict = {}


def load_dataset(spec: DatasetSpec, data_dir=None, verify: bool = True) -> ArrayDataset:
    """Load one split; a real dataset's checksums are verified on first load."""
    if spec.name == "synth2d":
        ds = synth2d(spec.n or 1000, seed=spec.seed + (0 if spec.split == "train" else 1))
        return ds
    root = data_root(data_dir) / spec.name
    key = (str(root), spec.name)
    if key not in _cache:
        layout, files = _find_layout(spec.name, root)
        if verify:
            verify_files(root, files)
        _cache[key] = _LOADERS[spec.name](root, layout)
    ds = _cache[key][spec.split]
    if spec.n is not None:
        ds = ds.subset(spec.n, spec.seed)
    return ds


def dataset_available(name: str, data_dir=None) -> bool:
    if name == "synth2d":
        return True
    try:
        _find_layout(name, data_root(data_dir) / name)
    except DataError:
        return False
    return True


def fetch_dataset(name: str, data_dir=None) -> Path:
    """Download a dataset mirror listed in the manifest and unpack it."""
    entry = MANIFEST["datasets"].get(name, {}).get("fetch")
    if entry is None:
        raise DataError(f"no download source known for {name}; place the files under {data_root(data_dir) / name}")
    root = data_root(data_dir) / name
    root.mkdir(parents=True, exist_ok=True)
    logger.info("downloading %s", entry["url"])
    with urllib.request.urlopen(entry["url"]) as resp:
        blob = resp.read()
    got = hashlib.sha256(blob).hexdigest()
    if got != entry["sha256"]:
        raise ChecksumError(f"{entry['url']}: sha256 {got} != expected {entry['sha256']}")
    with tarfile.open(fileobj=io.BytesIO(blob)) as tar:
        for member in tar.getmembers():
            for prefix, suffixes in entry["members"].items():
                rest = member.name[len(prefix):]
                if (member.isfile() and member.name.startswith(prefix) and "/" not in rest
                        and (not suffixes or rest.endswith(tuple(suffixes.split())))
                        and rest != "package.json"):
                    (root / rest).write_bytes(tar.extractfile(member).read())
    layout, files = _find_layout(name, root)
    verify_files(root, files)
    return root
