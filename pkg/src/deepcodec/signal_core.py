"""Sparse test signals, Gaussian measurement operators, and dataset files.

Signals are column tensors of shape (length, 1), float64 throughout.  Every
random draw goes through a named substream of a single master seed so that
datasets, matrices, and Monte-Carlo trials are reproducible independent of
evaluation order or thread count.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

_MAGIC = b"DCDS"
_VERSION = 1

# Substream identifiers.  Spawn keys are tuples of small ints; these name the
# top-level branches hung off a master seed.
STREAM_TRAIN = 0
STREAM_TEST = 1
STREAM_MATRIX = 2
STREAM_TRIAL = 3


def substream(master_seed: int, *path: int) -> np.random.Generator:
    """Independent PCG64 generator for a named branch of `master_seed`.

    Two calls with the same (master_seed, path) return generators with
    identical output; distinct paths give statistically independent streams.
    """
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(path))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class SparseSignal:
    """Exactly-k-sparse column vector with its support and provenance."""

    vector: np.ndarray  # (n, 1)
    k: int
    support: tuple[int, ...]
    seed_path: tuple[int, ...] | None = None

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 1:
            raise ShapeError(f"signal must be (n, 1), got {v.shape}")
        self.vector = v
        nnz = int(np.count_nonzero(v))
        if nnz > self.k:
            raise ValueError(f"{nnz} nonzeros exceed declared sparsity {self.k}")
        if len(self.support) != self.k:
            raise ValueError("support size must equal k")

    @property
    def n(self) -> int:
        return self.vector.shape[0]


@dataclass
class MeasurementMatrix:
    """Dense sensing operator with recorded provenance."""

    entries: np.ndarray  # (m, n)
    seed_path: tuple[int, ...] | None = None

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2:
            raise ShapeError(f"matrix must be 2-d, got shape {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("matrix entries must be finite")
        self.entries = e

    @property
    def m(self) -> int:
        return self.entries.shape[0]

    @property
    def n(self) -> int:
        return self.entries.shape[1]


@dataclass
class Dataset:
    """Train/test split of sparse signals sharing one (n, k) geometry."""

    train: list[SparseSignal]
    test: list[SparseSignal]
    n: int
    k: int
    master_seed: int

    def __post_init__(self):
        for s in self.train + self.test:
            if s.n != self.n:
                raise ShapeError(f"signal length {s.n} != dataset length {self.n}")

    def train_array(self) -> np.ndarray:
        """Training signals stacked as (count, n, 1)."""
        return np.stack([s.vector for s in self.train])

    def test_array(self) -> np.ndarray:
        return np.stack([s.vector for s in self.test])


@dataclass(frozen=True)
class PhasePoint:
    """One (undersampling, sparsity) cell of a phase grid."""

    n: int
    m: int
    k: int

    def __post_init__(self):
        if not (1 <= self.m <= self.n):
            raise ValueError(f"need 1 <= m <= n, got m={self.m}, n={self.n}")
        if not (1 <= self.k <= self.m):
            raise ValueError(f"need 1 <= k <= m, got k={self.k}, m={self.m}")

    @property
    def delta(self) -> float:
        """Undersampling ratio m/n."""
        return self.m / self.n

    @property
    def rho(self) -> float:
        """Normalized sparsity k/m."""
        return self.k / self.m


def generate_sparse_signal(n: int, k: int, rng: np.random.Generator,
                           seed_path: tuple[int, ...] | None = None) -> SparseSignal:
    """Draw an exactly-k-sparse signal: uniform support, standard normal amplitudes.

    Support indices are drawn without replacement; amplitudes that round to an
    exact zero would be astronomically unlikely but are redrawn anyway so the
    nonzero count is exactly k.
    """
    if not (0 < k <= n):
        raise ValueError(f"need 0 < k <= n, got k={k}, n={n}")
    support = np.sort(rng.choice(n, size=k, replace=False))
    amps = rng.standard_normal(k)
    while np.any(amps == 0.0):  # pragma: no cover
        amps[amps == 0.0] = rng.standard_normal(int(np.sum(amps == 0.0)))
    v = np.zeros((n, 1))
    v[support, 0] = amps
    return SparseSignal(vector=v, k=k, support=tuple(int(i) for i in support),
                        seed_path=seed_path)


def generate_dataset(n: int, k: int, n_train: int, n_test: int,
                     master_seed: int) -> Dataset:
    """Build a train/test split where signal i of each split has its own substream.

    Per-signal streams mean the same (master_seed, split, i) always yields the
    same signal regardless of how many signals surround it.
    """
    def batch(stream_id: int, count: int) -> list[SparseSignal]:
        out = []
        for i in range(count):
            path = (stream_id, i)
            out.append(generate_sparse_signal(n, k, substream(master_seed, *path),
                                              seed_path=path))
        return out

    return Dataset(train=batch(STREAM_TRAIN, n_train),
                   test=batch(STREAM_TEST, n_test),
                   n=n, k=k, master_seed=master_seed)


def gaussian_matrix(m: int, n: int, rng: np.random.Generator,
                    seed_path: tuple[int, ...] | None = None) -> MeasurementMatrix:
    """i.i.d. N(0, 1/m) sensing matrix; columns have unit squared norm in expectation."""
    if m < 1 or n < 1:
        raise ValueError(f"matrix dims must be positive, got ({m}, {n})")
    entries = rng.standard_normal((m, n)) / np.sqrt(m)
    return MeasurementMatrix(entries=entries, seed_path=seed_path)


def measure(phi: MeasurementMatrix, x: np.ndarray) -> np.ndarray:
    """y = Phi x for a single (n, 1) signal or a (batch, n, 1) stack."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        if x.shape != (phi.n, 1):
            raise ShapeError(f"expected ({phi.n}, 1) signal, got {x.shape}")
        return phi.entries @ x
    if x.ndim == 3:
        if x.shape[1:] != (phi.n, 1):
            raise ShapeError(f"expected (b, {phi.n}, 1) batch, got {x.shape}")
        return (x[:, :, 0] @ phi.entries.T)[:, :, None]
    raise ShapeError(f"signal must be rank 2 or 3, got shape {x.shape}")


def adjoint_proxy(phi: MeasurementMatrix, y: np.ndarray) -> np.ndarray:
    """Phi^T y, the adjoint back-projection of a measurement into signal space."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 2:
        if y.shape != (phi.m, 1):
            raise ShapeError(f"expected ({phi.m}, 1) measurement, got {y.shape}")
        return phi.entries.T @ y
    if y.ndim == 3:
        if y.shape[1:] != (phi.m, 1):
            raise ShapeError(f"expected (b, {phi.m}, 1) batch, got {y.shape}")
        return (y[:, :, 0] @ phi.entries)[:, :, None]
    raise ShapeError(f"measurement must be rank 2 or 3, got shape {y.shape}")


def manifest_path(data_path: str) -> str:
    return str(data_path) + ".manifest.json"


def save_dataset(ds: Dataset, path: str) -> None:
    """Write signals to a little-endian binary file plus a JSON manifest.

    Layout: magic "DCDS", u32 version, u32 n, u32 k, u32 n_train, u32 n_test,
    then train vectors then test vectors as contiguous float64.
    """
    header = struct.pack("<4sIIIII", _MAGIC, _VERSION, ds.n, ds.k,
                         len(ds.train), len(ds.test))
    with open(path, "wb") as f:
        f.write(header)
        for s in ds.train + ds.test:
            f.write(s.vector.astype("<f8").tobytes(order="C"))
    manifest = {
        "format": _MAGIC.decode(),
        "version": _VERSION,
        "n": ds.n,
        "k": ds.k,
        "n_train": len(ds.train),
        "n_test": len(ds.test),
        "master_seed": ds.master_seed,
        "stream_ids": {"train": STREAM_TRAIN, "test": STREAM_TEST},
    }
    with open(manifest_path(path), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(path: str) -> Dataset:
    """Read a dataset written by save_dataset; validates magic and version."""
    with open(path, "rb") as f:
        header = f.read(24)
        if len(header) != 24:
            raise ValueError(f"{path}: truncated header")
        magic, version, n, k, n_train, n_test = struct.unpack("<4sIIIII", header)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        blob = f.read()
    want = (n_train + n_test) * n * 8
    if len(blob) != want:
        raise ValueError(f"{path}: expected {want} payload bytes, got {len(blob)}")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    vectors = flat.reshape(n_train + n_test, n, 1)

    master_seed = -1
    try:
        with open(manifest_path(path)) as f:
            master_seed = int(json.load(f).get("master_seed", -1))
    except FileNotFoundError:
        pass

    def wrap(vs: np.ndarray) -> list[SparseSignal]:
        out = []
        for v in vs:
            supp = tuple(int(i) for i in np.flatnonzero(v[:, 0]))
            out.append(SparseSignal(vector=v.copy(), k=len(supp), support=supp))
        return out

    train = wrap(vectors[:n_train])
    test = wrap(vectors[n_train:])
    # Stored support is recovered from the nonzero pattern, so a signal whose
    # draw produced fewer than k nonzeros would shrink here; generation makes
    # that impossible, and k is taken from the header for the dataset itself.
    ds = Dataset(train=train, test=test, n=n, k=k, master_seed=master_seed)
    return ds
