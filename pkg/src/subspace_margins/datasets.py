"""Synthetic training sets, IDX image ingestion and dataset-level frequency transforms."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .subspace import band_filter, flip_frequency, random_rotation

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    rotation: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    image_shape: tuple | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"features must be a non-empty N x D matrix, got {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValueError(f"{y.shape[0]} labels for {x.shape[0]} samples")
        if not np.all(np.isfinite(x)):
            raise ValueError("features contain non-finite values")
        if self.image_shape is not None and int(np.prod(self.image_shape)) != x.shape[1]:
            raise ValueError(f"image_shape {self.image_shape} does not match D={x.shape[1]}")
        for arr in (x, y):
            arr.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        if set(np.unique(self.labels)) <= {-1, 1}:
            return 2
        return int(self.labels.max()) + 1

    @property
    def is_binary(self) -> bool:
        return set(np.unique(self.labels)) <= {-1, 1}

    def direction(self, i: int) -> np.ndarray:
        """i-th canonical feature direction after rotation (u_1 is ``direction(0)``)."""
        if self.rotation is None:
            raise ValueError("dataset has no stored rotation")
        return self.rotation[:, i].copy()

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        return replace(self, features=self.features[index], labels=self.labels[index])

    def images(self) -> np.ndarray:
        if self.image_shape is None:
            raise ValueError("dataset has no image shape")
        return self.features.reshape((len(self),) + tuple(self.image_shape))


@dataclass(frozen=True)
class T1Params:
    epsilon: float = 5.0
    sigma: float = 1.0
    n_samples: int = 10000
    dim: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0 or self.sigma < 0:
            raise ValueError("T1 needs epsilon > 0 and sigma >= 0")
        if self.dim < 2 or self.n_samples < 1:
            raise ValueError("T1 needs dim >= 2 and n_samples >= 1")


@dataclass(frozen=True)
class T2Params:
    rho: float = 20.0
    epsilon: float = 1.0
    sigma: float = 1.0
    K: int = 3
    n_samples: int = 10000
    dim: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.rho < 0 or self.epsilon < 0 or self.sigma < 0:
            raise ValueError("T2 needs rho, epsilon, sigma >= 0")
        if self.K < 1 or self.dim < 3 or self.n_samples < 1:
            raise ValueError("T2 needs K >= 1, dim >= 3, n_samples >= 1")


def _sample_rng(seed: int) -> np.random.Generator:
    # independent of the stream random_rotation(dim, seed) consumes
    return np.random.default_rng([seed, 1])


def _rotate(latent, params, rotation):
    u = random_rotation(params.dim, params.seed) if rotation is None else np.asarray(rotation, dtype=float)
    if u.shape != (params.dim, params.dim):
        raise ValueError(f"rotation must be {params.dim} x {params.dim}")
    return latent @ u.T, u


def gen_t1(params: T1Params, rotation: np.ndarray | None = None) -> LabeledDataset:
    """``x = U (eps*y ⊕ n)`` with ``y`` uniform on {-1, +1} and ``n ~ N(0, sigma^2 I_{D-1})``.

    ``rotation`` overrides the seeded random ``U`` (pass the identity in tests,
    or a training set's rotation to draw held-out samples from the same law).
    """
    rng = _sample_rng(params.seed)
    y = rng.choice(np.array([-1, 1]), size=params.n_samples)
    latent = np.empty((params.n_samples, params.dim))
    latent[:, 0] = params.epsilon * y
    latent[:, 1:] = params.sigma * rng.standard_normal((params.n_samples, params.dim - 1))
    x, u = _rotate(latent, params, rotation)
    return LabeledDataset(x, y, u, {"generator": "t1", "params": asdict(params)})


def gen_t2(params: T2Params, rotation: np.ndarray | None = None) -> LabeledDataset:
    """``x = U (eps*y ⊕ rho*(k + [y = -1]/2) ⊕ n)`` with ``k`` uniform on {-K, ..., K-1}."""
    rng = _sample_rng(params.seed)
    y = rng.choice(np.array([-1, 1]), size=params.n_samples)
    k = rng.integers(-params.K, params.K, size=params.n_samples)
    latent = np.empty((params.n_samples, params.dim))
    latent[:, 0] = params.epsilon * y
    latent[:, 1] = params.rho * (k + np.where(y == -1, 0.5, 0.0))
    latent[:, 2:] = params.sigma * rng.standard_normal((params.n_samples, params.dim - 2))
    x, u = _rotate(latent, params, rotation)
    return LabeledDataset(x, y, u, {"generator": "t2", "params": asdict(params)})


# --- IDX ---------------------------------------------------------------------

def _read_idx(path: str, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(shape))
    if len(raw) - header < size:
        raise IdxFormatError(f"{path}: truncated data, expected {size} bytes, found {len(raw) - header}")
    if len(raw) - header > size:
        raise IdxFormatError(f"{path}: {len(raw) - header - size} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(shape)


def _write_idx(path: str, array: np.ndarray, magic: int) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    _atomic_write_bytes(path, header + array.tobytes())


def load_idx(images_path: str, labels_path: str) -> LabeledDataset:
    """Read an unsigned-byte IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"count mismatch: {images.shape[0]} images, {labels.shape[0]} labels")
    n, h, w = images.shape
    meta = {
        "generator": "idx",
        "source": {"images": os.path.basename(images_path), "labels": os.path.basename(labels_path)},
    }
    return LabeledDataset(images.reshape(n, h * w) / 255.0, labels.astype(np.int64), None, meta, (1, h, w))


def write_idx(dataset: LabeledDataset, images_path: str, labels_path: str) -> None:
    """Inverse of :func:`load_idx` for datasets whose pixels lie on the k/255 grid."""
    if dataset.image_shape is None or dataset.image_shape[0] != 1:
        raise ValueError("write_idx needs a single-channel image dataset")
    x = dataset.features
    if x.min() < 0 or x.max() > 1:
        raise ValueError("pixel values outside [0, 1] cannot be stored as unsigned bytes")
    if dataset.labels.min() < 0 or dataset.labels.max() > 255:
        raise ValueError("labels must fit in an unsigned byte")
    _, h, w = dataset.image_shape
    _write_idx(images_path, np.rint(x * 255.0).reshape(len(dataset), h, w), IDX_IMAGES_MAGIC)
    _write_idx(labels_path, dataset.labels, IDX_LABELS_MAGIC)


# --- transforms ----------------------------------------------------------------

def parse_transform(op) -> tuple[str, int | None]:
    """Accepts ``"flip"``, ``"low_pass:B"``, ``"high_pass:B"`` or ``(name, B)``."""
    if isinstance(op, (tuple, list)):
        name, arg = op[0], (int(op[1]) if len(op) > 1 else None)
    else:
        name, _, rest = str(op).partition(":")
        arg = int(rest) if rest else None
    if name == "flip":
        if arg is not None:
            raise ValueError("flip takes no argument")
    elif name in ("low_pass", "high_pass"):
        if arg is None:
            raise ValueError(f"{name} needs a band side, e.g. '{name}:16'")
    else:
        raise ValueError(f"unknown transform {op!r}")
    return name, arg


def transform_dataset(ds: LabeledDataset, op) -> LabeledDataset:
    name, side = parse_transform(op)
    if ds.image_shape is None:
        raise ValueError("transform_dataset needs an image dataset")
    images = ds.images()
    out = flip_frequency(images) if name == "flip" else band_filter(images, name, side)
    tag = name if side is None else f"{name}:{side}"
    meta = dict(ds.meta)
    meta["transforms"] = list(ds.meta.get("transforms", [])) + [tag]
    return replace(ds, features=out.reshape(len(ds), -1), meta=meta)


def concat(*datasets: LabeledDataset, meta: dict | None = None) -> LabeledDataset:
    first = datasets[0]
    if any(d.dim != first.dim for d in datasets):
        raise ValueError("datasets must share the feature dimension")
    return LabeledDataset(
        np.concatenate([d.features for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        first.rotation,
        meta if meta is not None else {"generator": "union", "parts": [d.meta for d in datasets]},
        first.image_shape,
    )


def split(ds: LabeledDataset, n_first: int, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded random split into ``n_first`` and the remaining samples."""
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(perm[:n_first])), ds.subset(np.sort(perm[n_first:]))


# --- on-disk format --------------------------------------------------------------

def _atomic_write_bytes(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _npy_bytes(array: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    np.save(buf, array, allow_pickle=False)
    return buf.getvalue()


def save_dataset(ds: LabeledDataset, directory: str) -> None:
    """Write ``features.npy``, ``labels.npy`` and ``meta.json`` (rotation included)."""
    os.makedirs(directory, exist_ok=True)
    _atomic_write_bytes(os.path.join(directory, "features.npy"), _npy_bytes(ds.features.astype("<f8")))
    _atomic_write_bytes(os.path.join(directory, "labels.npy"), _npy_bytes(ds.labels.astype("<i8")))
    meta = {
        "meta": ds.meta,
        "image_shape": list(ds.image_shape) if ds.image_shape is not None else None,
        "rotation": ds.rotation.tolist() if ds.rotation is not None else None,
    }
    _atomic_write_bytes(os.path.join(directory, "meta.json"), json.dumps(meta, sort_keys=True).encode())


def load_dataset(directory: str) -> LabeledDataset:
    x = np.load(os.path.join(directory, "features.npy"), allow_pickle=False)
    y = np.load(os.path.join(directory, "labels.npy"), allow_pickle=False)
    with open(os.path.join(directory, "meta.json")) as f:
        meta = json.load(f)
    rotation = np.array(meta["rotation"]) if meta["rotation"] is not None else None
    shape = tuple(meta["image_shape"]) if meta["image_shape"] is not None else None
    return LabeledDataset(x, y, rotation, meta["meta"], shape)
