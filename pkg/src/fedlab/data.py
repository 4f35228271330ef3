"""Datasets, the synthetic blob generator, file I/O and label-skew partitioners."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedlab.errors import ConfigurationError, FormatError
from fedlab.nn import atomic_write_bytes

DATASET_MAGIC = b"FDS1"
MIN_CLIENT_SIZE = 10
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    m: int

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError(f"inputs {x.shape} and labels {y.shape} disagree")
        if self.m < 2:
            raise ValueError("a dataset needs at least two classes")
        if y.size and (y.min() < 0 or y.max() >= self.m):
            raise ValueError(f"labels must lie in [0, {self.m})")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "m", int(self.m))

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def __len__(self):
        return self.n

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.labels[indices], self.m)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.m)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.m == other.m
            and self.inputs.shape == other.inputs.shape
            and self.inputs.tobytes() == other.inputs.tobytes()
            and self.labels.tobytes() == other.labels.tobytes()
        )


def blob_centers(m: int, d: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 0xCE]).uniform(0.0, 1.0, size=(m, d))


def gen_blobs(m: int, d: int, n_per_class: int, spread: float, seed: int, center_seed: int | None = None) -> Dataset:
    """Isotropic Gaussian blobs around per-class centers, clipped to [0, 1].

    Centers come from ``center_seed`` (default ``seed``) so a held-out set can
    share centers with a training set while drawing fresh samples.
    """
    if m < 2 or d < 2 or n_per_class < 1 or not spread > 0:
        raise ConfigurationError("gen_blobs needs m >= 2, d >= 2, n_per_class >= 1 and spread > 0")
    centers = blob_centers(m, d, seed if center_seed is None else center_seed)
    rng = np.random.default_rng([seed, 0xB1])
    noise = rng.standard_normal((m, n_per_class, d))
    x = np.clip(centers[:, None, :] + spread * noise, 0.0, 1.0).reshape(m * n_per_class, d)
    y = np.repeat(np.arange(m), n_per_class)
    return Dataset(x, y, m)


# -- file format -------------------------------------------------------------


def dataset_bytes(ds: Dataset) -> bytes:
    if ds.m > 0xFFFF + 1:
        raise FormatError("class count does not fit u16 labels")
    return b"".join(
        [
            _HEADER.pack(DATASET_MAGIC, ds.n, ds.d, ds.m),
            np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes(),
            ds.labels.astype("<u2").tobytes(),
        ]
    )


def parse_dataset(data: bytes) -> Dataset:
    if len(data) < _HEADER.size:
        raise FormatError(f"file has {len(data)} bytes, header needs {_HEADER.size}", len(data))
    magic, n, d, m = _HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if n < 1 or m < 2:
        raise FormatError(f"invalid header n={n} m={m}", 4)
    off = _HEADER.size
    need = off + 8 * n * d + 2 * n
    if len(data) < need:
        truncated_at = len(data)
        raise FormatError(f"truncated: expected {need} bytes, got {len(data)}", truncated_at)
    if len(data) > need:
        raise FormatError("trailing bytes after labels", need)
    x = np.frombuffer(data, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    off += 8 * n * d
    y = np.frombuffer(data, dtype="<u2", count=n, offset=off)
    bad = np.flatnonzero(y >= m)
    if bad.size:
        raise FormatError(f"label {int(y[bad[0]])} >= m={m}", off + 2 * int(bad[0]))
    return Dataset(x.astype(np.float64), y.astype(np.int64), m)


def save_dataset(ds: Dataset, path):
    atomic_write_bytes(path, dataset_bytes(ds))


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


# -- partitions --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FederatedPartition:
    client_indices: tuple
    kind: str
    seed: int
    params: dict

    def __post_init__(self):
        idx = tuple(np.asarray(c, dtype=np.int64) for c in self.client_indices)
        allidx = np.concatenate(idx) if idx else np.array([], dtype=np.int64)
        if np.unique(allidx).size != allidx.size:
            raise ValueError("client index sets overlap")
        object.__setattr__(self, "client_indices", idx)

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list:
        return [len(c) for c in self.client_indices]

    def client_datasets(self, ds: Dataset) -> list:
        return [ds.subset(c) for c in self.client_indices]

    def describe(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, **self.params, "sizes": self.sizes()}


def _check_min_size(clients, min_client_size):
    return min(len(c) for c in clients) >= min_client_size


def partition_classes(
    ds: Dataset, n_clients: int, k: int, seed: int, min_client_size: int = MIN_CLIENT_SIZE
) -> FederatedPartition:
    """Give every client exactly ``k`` distinct classes (the ``#C=k`` split).

    Each class's shuffled samples are cut into contiguous shards, one per owner;
    the division remainder goes to the lowest-index owner. Assignments are
    redrawn until every class has an owner and every client is large enough.
    """
    m = ds.m
    if not 1 <= k <= m:
        raise ConfigurationError(f"k={k} must lie in [1, {m}]")
    if n_clients * k < m:
        raise ConfigurationError(f"{n_clients} clients x {k} classes cannot cover {m} classes")
    rng = np.random.default_rng([seed, 0xC1])
    by_class = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(m)]
    for _ in range(1000):
        owned = [np.sort(rng.choice(m, size=k, replace=False)) for _ in range(n_clients)]
        owners = [[i for i in range(n_clients) if c in owned[i]] for c in range(m)]
        if any(not o for o in owners):
            continue
        parts = [[] for _ in range(n_clients)]
        for c in range(m):
            idx = by_class[c]
            base, rem = divmod(len(idx), len(owners[c]))
            start = 0
            for j, client in enumerate(owners[c]):
                size = base + (rem if j == 0 else 0)
                parts[client].append(idx[start : start + size])
                start += size
        clients = [np.sort(np.concatenate(p)) for p in parts]
        if _check_min_size(clients, min_client_size) and all(
            np.unique(ds.labels[c]).size == k for c in clients
        ):
            return FederatedPartition(tuple(clients), "classes", seed, {"k": k})
    raise ConfigurationError(
        f"no #C={k} assignment over {n_clients} clients satisfied coverage and min size after 1000 draws"
    )


def partition_dirichlet(
    ds: Dataset, n_clients: int, beta: float, seed: int, min_client_size: int = MIN_CLIENT_SIZE
) -> FederatedPartition:
    """Per-class client proportions drawn from Dir(beta); redrawn until no client is too small."""
    if not beta > 0 or n_clients < 1:
        raise ConfigurationError("partition_dirichlet needs beta > 0 and at least one client")
    for attempt in range(100):
        rng = np.random.default_rng([seed, 0xD1, attempt])
        parts = [[] for _ in range(n_clients)]
        for c in range(ds.m):
            idx = rng.permutation(np.flatnonzero(ds.labels == c))
            p = rng.dirichlet(np.full(n_clients, beta))
            cuts = (np.cumsum(p) * len(idx)).astype(np.int64)[:-1]
            for client, chunk in enumerate(np.split(idx, cuts)):
                parts[client].append(chunk)
        clients = [np.sort(np.concatenate(p)) for p in parts]
        if _check_min_size(clients, min_client_size):
            return FederatedPartition(tuple(clients), "dirichlet", seed, {"beta": beta})
    raise ConfigurationError(
        f"Dir({beta}) over {n_clients} clients left a client below {min_client_size} samples "
        "in 100 draws; use a larger dataset or a larger beta"
    )


def partition_iid(ds: Dataset, n_clients: int, seed: int, min_client_size: int = MIN_CLIENT_SIZE) -> FederatedPartition:
    rng = np.random.default_rng([seed, 0x11D])
    clients = [np.sort(c) for c in np.array_split(rng.permutation(ds.n), n_clients)]
    if not _check_min_size(clients, min_client_size):
        raise ConfigurationError(f"{ds.n} samples cannot give {n_clients} clients {min_client_size} each")
    return FederatedPartition(tuple(clients), "iid", seed, {})
