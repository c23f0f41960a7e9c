"""Orthonormal bases, the 2D-DCT, subspace sequences and frequency operators.

Images are channel-major ``(C, H, W)`` arrays and are vectorized in C order,
so a flattened image and a subspace basis column index pixels identically.
Every image operator also accepts a leading batch axis ``(N, C, H, W)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ORTHO_TOL = 1e-10


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def random_rotation(dim: int, seed=None) -> np.ndarray:
    """Haar-distributed matrix in SO(dim).

    QR of a standard Gaussian matrix with the signs of ``diag(R)`` moved into
    ``Q``; if the result is a reflection, the first column is negated.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    gauss = _rng(seed).standard_normal((dim, dim))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal type-II DCT matrix; row k is the k-th cosine atom."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    k = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * j + 1) * k / (2 * n))
    m[0, :] = 1.0 / np.sqrt(n)
    return m


def dct2(image: np.ndarray) -> np.ndarray:
    """Separable per-channel 2D-DCT, ``M_H @ X @ M_W.T`` on the last two axes."""
    image = np.asarray(image, dtype=float)
    mh = dct_matrix(image.shape[-2])
    mw = dct_matrix(image.shape[-1])
    return mh @ image @ mw.T


def idct2(coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    mh = dct_matrix(coeffs.shape[-2])
    mw = dct_matrix(coeffs.shape[-1])
    return mh.T @ coeffs @ mw


def flip_frequency(image: np.ndarray) -> np.ndarray:
    """Swap low and high frequencies: DCT, reverse both frequency axes, inverse DCT."""
    return idct2(dct2(image)[..., ::-1, ::-1])


def band_filter(image: np.ndarray, mode: str, side: int) -> np.ndarray:
    """Keep (``low_pass``) or remove (``high_pass``) the top-left ``side x side``
    block of DCT coefficients."""
    image = np.asarray(image, dtype=float)
    h, w = image.shape[-2:]
    if not 1 <= side <= min(h, w):
        raise ValueError(f"band side {side} out of range [1, {min(h, w)}]")
    coeffs = dct2(image)
    mask = np.zeros((h, w), dtype=bool)
    mask[:side, :side] = True
    if mode == "low_pass":
        coeffs = np.where(mask, coeffs, 0.0)
    elif mode == "high_pass":
        coeffs = np.where(mask, 0.0, coeffs)
    else:
        raise ValueError(f"unknown band mode {mode!r}")
    return idct2(coeffs)


def check_orthonormal(basis: np.ndarray, tol: float = ORTHO_TOL) -> None:
    gram = basis.T @ basis
    err = np.max(np.abs(gram - np.eye(gram.shape[0]))) if gram.size else 0.0
    if err > tol:
        raise ValueError(f"basis columns are not orthonormal (max error {err:.3g})")


@dataclass(frozen=True, eq=False)
class Subspace:
    """Span of the orthonormal columns of ``basis`` (shape ``(D, S)``)."""

    basis: np.ndarray
    label: str = ""
    offset: tuple = ()

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=float)
        if basis.ndim != 2 or not 1 <= basis.shape[1] <= basis.shape[0]:
            raise ValueError(f"basis must be D x S with 1 <= S <= D, got {basis.shape}")
        check_orthonormal(basis)
        basis.setflags(write=False)
        object.__setattr__(self, "basis", basis)

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def project(self, v: np.ndarray) -> np.ndarray:
        return project(v, self)


def project(vector: np.ndarray, subspace: Subspace) -> np.ndarray:
    """Orthogonal projection ``B B^T v``; rows of a 2-D input are projected independently."""
    v = np.asarray(vector, dtype=float)
    if v.shape[-1] != subspace.ambient_dim:
        raise ValueError(
            f"dimension mismatch: vector has {v.shape[-1]}, subspace lives in {subspace.ambient_dim}"
        )
    b = subspace.basis
    return (v @ b) @ b.T


def span(vectors: np.ndarray, label: str = "") -> Subspace:
    """Orthonormalized span of the rows of ``vectors`` (full row rank assumed)."""
    v = np.atleast_2d(np.asarray(vectors, dtype=float))
    q, r = np.linalg.qr(v.T)
    if np.min(np.abs(np.diag(r))) < 1e-12:
        raise ValueError("vectors are linearly dependent")
    return Subspace(q, label)


def orthogonal_complement(subspace: Subspace, label: str = "") -> Subspace:
    d, s = subspace.basis.shape
    if s == d:
        raise ValueError("complement of the full space is trivial")
    q, _ = np.linalg.qr(subspace.basis, mode="complete")
    return Subspace(q[:, s:], label)


def full_space(dim: int, label: str = "full") -> Subspace:
    return Subspace(np.eye(dim), label)


@dataclass(frozen=True, eq=False)
class SubspaceSequence:
    items: tuple
    scheme: str
    K: int = 0
    T: int = 0
    image_shape: tuple = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        dims = {s.ambient_dim for s in self.items}
        if len(dims) > 1:
            raise ValueError("subspaces of a sequence must share the ambient dimension")

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.items]

    def descriptor(self) -> dict:
        return {
            "scheme": self.scheme,
            "K": self.K,
            "T": self.T,
            "image_shape": list(self.image_shape),
            "offsets": [list(s.offset) for s in self.items],
            "params": self.params,
        }

    def to_json(self) -> str:
        return json.dumps(self.descriptor(), sort_keys=True)

    @classmethod
    def from_descriptor(cls, desc: dict) -> "SubspaceSequence":
        scheme = desc["scheme"]
        shape = tuple(desc.get("image_shape", ()))
        params = desc.get("params", {})
        if scheme == "diagonal":
            return diagonal_subspaces(shape, desc["K"], desc["T"])
        if scheme == "grid":
            return grid_subspaces(shape, desc["K"], desc["T"], block=params.get("block", "full"))
        if scheme == "random":
            return random_subspace_sequence(params["ambient_dim"], params["dims"], params["seed"])
        raise ValueError(f"cannot regenerate scheme {scheme!r}")


def _dct_atom_columns(shape, positions) -> np.ndarray:
    """Vectorized DCT atoms ``D(i, j, :, :)`` replicated per channel, one column per (atom, channel)."""
    c, h, w = shape
    mh, mw = dct_matrix(h), dct_matrix(w)
    cols = np.zeros((c * h * w, len(positions) * c))
    for a, (i, j) in enumerate(positions):
        atom = np.outer(mh[i], mw[j]).ravel()
        for ch in range(c):
            cols[ch * h * w:(ch + 1) * h * w, a * c + ch] = atom
    return cols


def _check_window(shape, K, T):
    if len(shape) != 3:
        raise ValueError(f"image_shape must be (C, H, W), got {shape}")
    _, h, w = shape
    if K < 1 or T < 1:
        raise ValueError("K and T must be positive")
    if K > min(h, w):
        raise ValueError(f"window K={K} exceeds min(H, W)={min(h, w)}")


def diagonal_subspaces(image_shape, K: int, T: int) -> SubspaceSequence:
    """Sliding window of K diagonal DCT atoms with stride T, ordered low to high frequency.

    Subspace j is spanned by atoms ``(jT + k, jT + k)`` for ``k < K`` in every channel,
    so each has dimension ``K * C``.
    """
    shape = tuple(int(s) for s in image_shape)
    _check_window(shape, K, T)
    count = (min(shape[1:]) - K) // T + 1
    items = []
    for j in range(count):
        start = j * T
        positions = [(start + k, start + k) for k in range(K)]
        items.append(Subspace(_dct_atom_columns(shape, positions), f"diag{start}", (start, start)))
    return SubspaceSequence(items, "diagonal", K, T, shape)


def grid_subspaces(image_shape, K: int, T: int, block: str = "full") -> SubspaceSequence:
    """DCT blocks at every grid position ``(iT, jT)``.

    ``block="full"`` spans all K*K atoms of each block (with T == K the sequence
    tiles the spectrum); ``block="diagonal"`` keeps only the block's diagonal
    atoms, matching :func:`diagonal_subspaces` on the main diagonal.
    """
    shape = tuple(int(s) for s in image_shape)
    _check_window(shape, K, T)
    if block not in ("full", "diagonal"):
        raise ValueError(f"unknown block mode {block!r}")
    _, h, w = shape
    rows = (h - K) // T + 1
    cols = (w - K) // T + 1
    items = []
    for bi in range(rows):
        for bj in range(cols):
            r0, c0 = bi * T, bj * T
            if block == "full":
                positions = [(r0 + a, c0 + b) for a in range(K) for b in range(K)]
            else:
                positions = [(r0 + k, c0 + k) for k in range(K)]
            items.append(Subspace(_dct_atom_columns(shape, positions), f"grid{r0}_{c0}", (r0, c0)))
    return SubspaceSequence(items, "grid", K, T, shape, {"block": block, "rows": rows, "cols": cols})


def random_subspace_sequence(ambient_dim: int, dims: Sequence[int], seed=None) -> SubspaceSequence:
    """Consecutive disjoint column blocks of a single random rotation."""
    dims = [int(d) for d in dims]
    if any(d < 1 for d in dims):
        raise ValueError("subspace dims must be positive")
    if sum(dims) > ambient_dim:
        raise ValueError(f"requested {sum(dims)} dimensions, only {ambient_dim} available")
    u = random_rotation(ambient_dim, seed)
    items, start = [], 0
    for i, d in enumerate(dims):
        items.append(Subspace(u[:, start:start + d], f"rand{i}", (start,)))
        start += d
    params = {"ambient_dim": ambient_dim, "dims": dims, "seed": seed if isinstance(seed, int) else None}
    return SubspaceSequence(items, "random", params=params)
