"""Experiment configuration files.

A config is a JSON object with four sections::

    {
      "dataset":   {"kind": "blobs", "m": 10, "d": 32, "n_per_class": 500,
                    "test_per_class": 100, "spread": 1.0, "seed": 0},
      "partition": {"kind": "classes", "clients": 40, "k": 2, "seed": 0},
      "algorithm": {"variant": "fedconcat", "K": 5, "encoder_rounds": 31, ...},
      "output":    "runs/example"
    }

``dataset.kind`` may instead be ``"file"`` with ``path`` and ``test_path``
pointing at FDS1 files. ``partition.kind`` is ``classes`` (needs ``k``),
``dirichlet`` (needs ``beta``) or ``iid``. Every ``algorithm`` field is
optional; missing ones take the :class:`fedlab.engine.FedConfig` defaults and
are written back out in the resolved config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from fedlab.data import Dataset, gen_blobs, load_dataset, partition_classes, partition_dirichlet, partition_iid
from fedlab.engine import FedConfig
from fedlab.errors import ConfigurationError

DATASET_DEFAULTS = {"kind": "blobs", "m": 10, "d": 32, "n_per_class": 500, "test_per_class": 100, "spread": 1.0,
                    "seed": 0}
PARTITION_DEFAULTS = {"kind": "classes", "clients": 40, "k": 2, "beta": 0.5, "seed": 0}
# fields that do not change any reported number
NON_SEMANTIC = {"threads"}


class ConfigError(ConfigurationError):
    """Validation failure carrying the dotted path of the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


def _int(section, key, value, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{section}.{key}", f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{section}.{key}", f"must be >= {minimum}")
    return value


def _num(section, key, value, positive=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{section}.{key}", f"expected a number, got {value!r}")
    if positive and not value > 0:
        raise ConfigError(f"{section}.{key}", "must be positive")
    return float(value)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    partition: dict
    algorithm: FedConfig
    output: str | None = None
    base_dir: str = "."

    def resolved(self) -> dict:
        algo = dataclasses.asdict(self.algorithm)
        algo["layer_dims"] = list(algo["layer_dims"])
        return {"dataset": dict(self.dataset), "partition": dict(self.partition), "algorithm": algo,
                "output": self.output}

    def semantic(self) -> dict:
        r = self.resolved()
        r.pop("output")
        for k in NON_SEMANTIC:
            r["algorithm"].pop(k, None)
        return r

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.semantic(), sort_keys=True).encode()).hexdigest()

    def test_set_hash(self) -> str:
        """Identifies the evaluation data, for comparing runs."""
        return hashlib.sha256(json.dumps(self.dataset, sort_keys=True).encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(
            self,
            dataset={**self.dataset, "seed": seed},
            partition={**self.partition, "seed": seed},
            algorithm=dataclasses.replace(self.algorithm, seed=seed),
        )

    def with_threads(self, threads: int) -> "ExperimentConfig":
        return dataclasses.replace(self, algorithm=dataclasses.replace(self.algorithm, threads=threads))

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def build_datasets(self) -> tuple:
        ds = self.dataset
        if ds["kind"] == "blobs":
            train = gen_blobs(ds["m"], ds["d"], ds["n_per_class"], ds["spread"], ds["seed"])
            test = gen_blobs(ds["m"], ds["d"], ds["test_per_class"], ds["spread"], ds["seed"] + 1_000_003,
                             center_seed=ds["seed"])
            return train, test
        return load_dataset(self._path(ds["path"])), load_dataset(self._path(ds["test_path"]))

    def build_partition(self, train: Dataset):
        p = self.partition
        if p["kind"] == "classes":
            return partition_classes(train, p["clients"], p["k"], p["seed"])
        if p["kind"] == "dirichlet":
            return partition_dirichlet(train, p["clients"], p["beta"], p["seed"])
        return partition_iid(train, p["clients"], p["seed"])


def _parse_dataset(raw, base_dir) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("dataset", "expected an object")
    kind = raw.get("kind", "blobs")
    if kind == "blobs":
        out = {**DATASET_DEFAULTS, **raw}
        unknown = set(out) - set(DATASET_DEFAULTS)
        if unknown:
            raise ConfigError(f"dataset.{sorted(unknown)[0]}", "unknown field")
        _int("dataset", "m", out["m"], 2)
        _int("dataset", "d", out["d"], 2)
        _int("dataset", "n_per_class", out["n_per_class"], 1)
        _int("dataset", "test_per_class", out["test_per_class"], 1)
        _int("dataset", "seed", out["seed"], 0)
        out["spread"] = _num("dataset", "spread", out["spread"], positive=True)
        return out
    if kind == "file":
        out = {"kind": "file", **raw}
        for key in ("path", "test_path"):
            if not isinstance(out.get(key), str):
                raise ConfigError(f"dataset.{key}", "expected a file path")
            p = Path(out[key])
            if not (p if p.is_absolute() else Path(base_dir) / p).exists():
                raise ConfigError(f"dataset.{key}", f"file {out[key]!r} does not exist")
        return out
    raise ConfigError("dataset.kind", f"expected 'blobs' or 'file', got {kind!r}")


def _parse_partition(raw) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("partition", "expected an object")
    out = {**PARTITION_DEFAULTS, **raw}
    unknown = set(out) - set(PARTITION_DEFAULTS)
    if unknown:
        raise ConfigError(f"partition.{sorted(unknown)[0]}", "unknown field")
    if out["kind"] not in ("classes", "dirichlet", "iid"):
        raise ConfigError("partition.kind", f"expected classes, dirichlet or iid, got {out['kind']!r}")
    _int("partition", "clients", out["clients"], 1)
    _int("partition", "seed", out["seed"], 0)
    _int("partition", "k", out["k"], 1)
    out["beta"] = _num("partition", "beta", out["beta"], positive=True)
    return out


def _parse_algorithm(raw) -> FedConfig:
    if not isinstance(raw, dict):
        raise ConfigError("algorithm", "expected an object")
    fields = {f.name: f for f in dataclasses.fields(FedConfig)}
    defaults = FedConfig()
    kw = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"algorithm.{key}", "unknown field")
        default = getattr(defaults, key)
        if key == "layer_dims":
            if not isinstance(value, list) or len(value) < 2 or not all(
                isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in value
            ):
                raise ConfigError("algorithm.layer_dims", "expected a list of at least two positive integers")
            value = tuple(value)
        elif key == "K":
            if value != "elbow":
                _int("algorithm", key, value, 1)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"algorithm.{key}", f"expected true or false, got {value!r}")
        elif isinstance(default, int):
            _int("algorithm", key, value, 0)
        elif isinstance(default, float):
            value = _num("algorithm", key, value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"algorithm.{key}", f"expected a string, got {value!r}")
        kw[key] = value
    try:
        return FedConfig(**kw)
    except ConfigurationError as e:
        raise ConfigError("algorithm", str(e)) from e
    except ValueError as e:
        raise ConfigError("algorithm", str(e)) from e


def parse_config(obj, base_dir=".") -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("<root>", "expected a JSON object")
    unknown = set(obj) - {"dataset", "partition", "algorithm", "output"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    dataset = _parse_dataset(obj.get("dataset", {}), base_dir)
    partition = _parse_partition(obj.get("partition", {}))
    algorithm = _parse_algorithm(obj.get("algorithm", {}))
    output = obj.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigError("output", "expected a directory path")
    if dataset["kind"] == "blobs" and algorithm.layer_dims[0] != dataset["d"]:
        raise ConfigError("algorithm.layer_dims", f"input width {algorithm.layer_dims[0]} != dataset.d {dataset['d']}")
    if dataset["kind"] == "blobs" and algorithm.layer_dims[-1] != dataset["m"]:
        raise ConfigError("algorithm.layer_dims", f"output width {algorithm.layer_dims[-1]} != dataset.m {dataset['m']}")
    return ExperimentConfig(dataset, partition, algorithm, output, str(base_dir))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("<file>", f"{path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError("<file>", f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    return parse_config(obj, path.parent)
