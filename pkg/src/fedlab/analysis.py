"""Communication accounting, the averaging-degradation tracker and frozen-encoder probes."""

from __future__ import annotations

import math
import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from fedlab.data import Dataset
from fedlab.engine import ClientState, local_train, weighted_average
from fedlab.errors import ConfigurationError
from fedlab.nn import (
    Batch,
    ModelParams,
    OptimizerState,
    accuracy_from_logits,
    concat_encoders,
    forward,
    gradients,
    init_model,
    loss_ce,
    sgd_step,
)

BYTES_PER_PARAM = 8


# -- communication -----------------------------------------------------------


def fedconcat_cost(w, c, N, K, T_e, T_c):
    """Parameters moved by the concatenation pipeline: ``2wN(T_e + K/2 + cKT_c)``.

    Evaluated as ``wN(2T_e + K + 2cKT_c)`` so integer and ``Fraction`` inputs
    stay exact.
    """
    return w * N * (2 * T_e + K + 2 * c * K * T_c)


def fedconcat_id_cost(w, c, N, K, T_e, T_c):
    """As :func:`fedconcat_cost` plus one full-model round used for inference."""
    return fedconcat_cost(w, c, N, K, T_e, T_c) + 2 * w * N


def fedavg_cost(w, N, T):
    return 2 * w * N * T


def classifier_fraction(model: ModelParams, exact: bool = False):
    """Share of parameters held by the last layer."""
    if model.n_layers < 2:
        raise ValueError("classifier fraction needs at least two layers")
    last = model.weights[-1].size + model.biases[-1].size
    frac = Fraction(last, model.n_params)
    return frac if exact else float(frac)


def parity_encoder_rounds(c, K, T_c, T, extra_rounds=0) -> int:
    """Largest encoder round count whose total cost does not exceed ``T`` FedAvg rounds."""
    budget = T - extra_rounds - Fraction(K, 2) - Fraction(c) * K * T_c
    if budget < 0:
        raise ConfigurationError(
            f"K={K}, T_c={T_c}, c={float(c):.4f} already cost more than {T} FedAvg rounds"
        )
    return math.floor(budget)


def parity_classifier_rounds(c, K, T_e, T, extra_rounds=0) -> int:
    """Largest classifier round count whose total cost does not exceed ``T`` FedAvg rounds."""
    budget = T - extra_rounds - T_e - Fraction(K, 2)
    if budget < 0:
        raise ConfigurationError(f"T_e={T_e} and K={K} already cost more than {T} FedAvg rounds")
    return math.floor(budget / (Fraction(c) * K))


@dataclass(frozen=True)
class CommCostReport:
    w: int
    c: float
    N: int
    K: int
    T_e: int
    T_c: int
    T: int
    inference_round: bool = False

    def __post_init__(self):
        if not 0 < self.c < 1:
            raise ValueError("classifier fraction must lie in (0, 1)")

    @property
    def total_fedconcat(self):
        f = fedconcat_id_cost if self.inference_round else fedconcat_cost
        return f(self.w, self.c, self.N, self.K, self.T_e, self.T_c)

    @property
    def total_fedavg(self):
        return fedavg_cost(self.w, self.N, self.T)

    def to_json(self) -> dict:
        return {
            "w": self.w,
            "c": self.c,
            "N": self.N,
            "K": self.K,
            "T_e": self.T_e,
            "T_c": self.T_c,
            "T": self.T,
            "inference_round": self.inference_round,
            "total_fedconcat": self.total_fedconcat,
            "total_fedavg": self.total_fedavg,
            "total_fedconcat_bytes": self.total_fedconcat * BYTES_PER_PARAM,
            "total_fedavg_bytes": self.total_fedavg * BYTES_PER_PARAM,
        }


# -- averaging degradation ---------------------------------------------------


@dataclass
class DegradationCurve:
    """Accuracy time series of two locally trained models and their average.

    Each record is ``{"round", "epoch", "phase", "client", "accuracy"}`` with
    ``phase`` either ``"local"`` (after a local epoch) or ``"averaged"``.
    """

    records: list = field(default_factory=list)
    initial_accuracy: list = field(default_factory=list)

    def pre_average(self, round_index, client):
        local = [r for r in self.records if r["round"] == round_index and r["client"] == client and r["phase"] == "local"]
        return local[-1]["accuracy"] if local else None

    def post_average(self, round_index, client):
        for r in self.records:
            if r["round"] == round_index and r["client"] == client and r["phase"] == "averaged":
                return r["accuracy"]
        return None


def _restricted(test_set, classes):
    mask = np.isin(test_set.labels, list(classes))
    return test_set.subset(np.flatnonzero(mask))


def track_averaging_degradation(
    clients,
    test_set,
    rounds: int = 2,
    epochs: int = 10,
    layer_dims=(32, 64, 32, 10),
    opt: OptimizerState | None = None,
    batch_size: int = 64,
    seed: int = 0,
) -> DegradationCurve:
    """Train two clients locally, average, and record accuracy on each client's own classes."""
    opt = opt or OptimizerState()
    own_tests = [_restricted(test_set, np.unique(c.data.labels)) for c in clients]
    model = init_model(layer_dims, np.random.default_rng([seed, 0xF1]))
    curve = DegradationCurve()
    curve.initial_accuracy = [accuracy_from_logits(forward(model, t.inputs)[1], t.labels) for t in own_tests]
    for r in range(1, rounds + 1):
        trained = []
        for ci, client in enumerate(clients):
            local = model
            state = opt.reset()
            rng = np.random.default_rng([seed, 0xF2, r, ci])
            n = client.sample_count
            for e in range(1, epochs + 1):
                perm = rng.permutation(n)
                for start in range(0, n, batch_size):
                    idx = perm[start : start + batch_size]
                    local, state = sgd_step(local, state, Batch(client.data.inputs[idx], client.data.labels[idx]))
                acc = accuracy_from_logits(forward(local, own_tests[ci].inputs)[1], own_tests[ci].labels)
                curve.records.append({"round": r, "epoch": e, "phase": "local", "client": ci, "accuracy": acc})
            trained.append(local)
        model = weighted_average(trained, [c.sample_count for c in clients])
        for ci, t in enumerate(own_tests):
            acc = accuracy_from_logits(forward(model, t.inputs)[1], t.labels)
            curve.records.append({"round": r, "epoch": epochs, "phase": "averaged", "client": ci, "accuracy": acc})
    return curve


# -- frozen-encoder probes ---------------------------------------------------


@dataclass(frozen=True)
class ProbeResult:
    loss: float
    test_loss: float
    test_accuracy: float


def probe_frozen_encoder(encoder, train_set, test_set=None, probe_rounds: int = 1000,
                         learning_rate: float | None = None) -> ProbeResult:
    """Fit a linear classifier on frozen features and report its converged loss.

    ``loss`` is the cross-entropy on ``train_set`` after fitting: the lower it
    is, the more label information the features carry. Features are
    standardized with ``train_set`` statistics (an affine change the classifier
    could absorb, so only conditioning improves) and the classifier starts at
    zero. Full-batch gradient descent uses ``learning_rate`` or, by default,
    ``1 / lambda_max`` of the augmented feature second-moment matrix, which is
    below the curvature limit of softmax cross-entropy. ``test_loss`` and
    ``test_accuracy`` use ``test_set`` when given, else ``train_set``.
    """
    test_set = train_set if test_set is None else test_set
    train_f = encoder.forward(train_set.inputs)
    mean = train_f.mean(axis=0)
    std = train_f.std(axis=0)
    std[std < 1e-12] = 1.0
    train_z = (train_f - mean) / std
    test_z = (encoder.forward(test_set.inputs) - mean) / std
    if learning_rate is None:
        aug = np.hstack([train_z, np.ones((train_z.shape[0], 1))])
        learning_rate = 1.0 / np.linalg.eigvalsh(aug.T @ aug / aug.shape[0]).max()
    m = train_set.m
    clf = ModelParams((np.zeros((train_z.shape[1], m)),), (np.zeros(m),))
    for _ in range(probe_rounds):
        _, gw, gb = gradients(clf, train_z, train_set.labels)
        clf = ModelParams((clf.weights[0] - learning_rate * gw[0],), (clf.biases[0] - learning_rate * gb[0],))
    logits = forward(clf, test_z)[1]
    return ProbeResult(loss_ce(forward(clf, train_z)[1], train_set.labels), loss_ce(logits, test_set.labels),
                       accuracy_from_logits(logits, test_set.labels))


def class_group_clients(dataset: Dataset, groups) -> list:
    """One client per group of class ids, holding every row of those classes."""
    seen = set()
    clients = []
    for k, group in enumerate(groups):
        group = [int(g) for g in group]
        if not group or any(not 0 <= g < dataset.m for g in group):
            raise ConfigurationError(f"class group {k} must name classes in [0, {dataset.m})")
        if seen & set(group):
            raise ConfigurationError(f"class group {k} overlaps an earlier group")
        seen |= set(group)
        clients.append(ClientState(k, dataset.subset(np.flatnonzero(np.isin(dataset.labels, group)))))
    return clients


def disjoint_client_pair(clients):
    """First pair of clients (by index) whose label supports do not overlap."""
    supports = [set(np.unique(c.data.labels).tolist()) for c in clients]
    for i in range(len(clients)):
        for j in range(i + 1, len(clients)):
            if not supports[i] & supports[j]:
                return i, j
    raise ValueError("no two clients have disjoint label supports")


def encoder_exchange_probes(client_a, client_b, test_set, layer_dims=(32, 64, 32, 10), epochs: int = 50,
                            opt: OptimizerState | None = None, batch_size: int = 64, seed: int = 0,
                            probe_rounds: int = 1000, learning_rate: float | None = None) -> dict:
    """Train two clients to convergence, then probe own, exchanged and concatenated encoders.

    Each client's own and exchanged probes are fitted on its local data; the
    combined probes are fitted on the union of both clients' data. Held-out
    metrics use the test rows of the matching classes.
    """
    opt = opt or OptimizerState()
    init = init_model(layer_dims, np.random.default_rng([seed, 0xE1]))
    encoders = [
        local_train(init, c, epochs, opt, rng=np.random.default_rng([seed, 0xE2, i]), batch_size=batch_size).encoder
        for i, c in enumerate((client_a, client_b))
    ]
    tests = [_restricted(test_set, np.unique(c.data.labels)) for c in (client_a, client_b)]
    out = {"own": [], "exchanged": []}
    for i, c in enumerate((client_a, client_b)):
        for key, enc in (("own", encoders[i]), ("exchanged", encoders[1 - i])):
            r = probe_frozen_encoder(enc, c.data, tests[i], probe_rounds, learning_rate)
            out[key].append(dataclasses.asdict(r))
    combined = Dataset(
        np.vstack([client_a.data.inputs, client_b.data.inputs]),
        np.concatenate([client_a.data.labels, client_b.data.labels]),
        client_a.data.m,
    )
    both = _restricted(test_set, np.unique(combined.labels))
    singles = [probe_frozen_encoder(e, combined, both, probe_rounds, learning_rate) for e in encoders]
    cat = probe_frozen_encoder(concat_encoders(encoders), combined, both, probe_rounds, learning_rate)
    out["combined_single"] = [dataclasses.asdict(r) for r in singles]
    out["combined_concat"] = dataclasses.asdict(cat)
    return out
