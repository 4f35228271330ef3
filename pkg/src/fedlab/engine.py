"""Federated training: local updates, averaging, FedAvg/FedProx and the
cluster / average / concatenate pipeline.

Every random choice draws from a ``numpy`` generator keyed by the run seed and
the position of the work unit (stage, round, cluster, client), so results do
not depend on the order or thread in which clients are trained. Aggregation
always folds in client-index order.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from functools import reduce

import numpy as np

from fedlab import clustering
from fedlab.data import Dataset
from fedlab.errors import AggregationError, ConfigurationError, NumericError
from fedlab.metrics import MetricsLog
from fedlab.nn import (
    Batch,
    GlobalEncoder,
    ModelParams,
    OptimizerState,
    accuracy_from_logits,
    concat_encoders,
    forward,
    init_model,
    sgd_step,
)

# stream tags for seeded generators
_INIT, _INIT_CLUSTER, _INIT_ID, _INIT_CLS = 1, 2, 3, 4
_LOCAL_AVG, _LOCAL_ENC, _LOCAL_CLS, _LOCAL_ID = 11, 12, 13, 14
_SAMPLE, _SAMPLE_ENC, _SAMPLE_CLS = 21, 22, 23
_PROBES, _DP, _KMEANS = 31, 32, 33

VARIANTS = ("fedavg", "fedprox", "fedconcat", "fedconcat-id")


@dataclass(frozen=True)
class FedConfig:
    variant: str = "fedavg"
    layer_dims: tuple = (32, 64, 32, 10)
    rounds: int = 50
    encoder_rounds: int = 31
    classifier_rounds: int = 200
    local_epochs: int = 10
    post_local_steps: int = 3
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    mu: float = 0.01
    participation: float = 1.0
    K: int | str = 5
    k_max: int = 10
    clustering: str = "true-dist"
    dp_epsilon: float = 2.5
    balanced_clusters: bool = False
    cap_factor: float = 1.2
    classifier_init: str = "concat"
    probes: int = 10_000
    use_feature_cache: bool = True
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.clustering not in ("true-dist", "inferred-dist", "dp"):
            raise ConfigurationError(f"unknown clustering {self.clustering!r}")
        if self.classifier_init not in ("concat", "random"):
            raise ConfigurationError(f"unknown classifier_init {self.classifier_init!r}")
        if min(self.rounds, self.encoder_rounds, self.classifier_rounds, self.local_epochs, self.post_local_steps) < 0:
            raise ConfigurationError("round and epoch counts must be nonnegative")
        if not 0 < self.participation <= 1:
            raise ConfigurationError("participation must lie in (0, 1]")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.K != "elbow" and (not isinstance(self.K, int) or self.K < 1):
            raise ConfigurationError("K must be a positive integer or 'elbow'")
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))

    def optimizer(self) -> OptimizerState:
        return OptimizerState(self.learning_rate, self.momentum, self.weight_decay)


@dataclass(frozen=True, eq=False)
class ClientState:
    client_id: int
    data: Dataset

    @property
    def sample_count(self) -> int:
        return self.data.n


def make_clients(datasets) -> list:
    return [ClientState(i, ds) for i, ds in enumerate(datasets)]


def _rng(*key):
    return np.random.default_rng([int(k) for k in key])


def parallel_map(fn, items, threads=1):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# -- local training ----------------------------------------------------------


def batch_indices(n: int, batch_size: int, rng):
    """Endless minibatch index stream; reshuffles at every pass over the data."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start : start + batch_size]


def train_steps(model, inputs, labels, steps, opt, rng, batch_size, freeze_encoder=False, prox_ref=None, mu=0.0,
                featurize=None):
    """Run ``steps`` minibatch SGD steps with a fresh momentum buffer.

    ``featurize`` maps a raw input batch to model inputs (used when training a
    classifier on top of a frozen encoder without cached features).
    """
    opt = opt.reset()
    stream = batch_indices(len(labels), batch_size, rng)
    for _ in range(steps):
        idx = next(stream)
        x = inputs[idx] if featurize is None else featurize(inputs[idx])
        model, opt = sgd_step(model, opt, Batch(x, labels[idx]), freeze_encoder, prox_ref, mu)
    return model


def local_train(model, client: ClientState, epochs, opt, variant="fedavg", global_ref=None, mu=0.01, rng=None,
                batch_size=64):
    """``epochs`` passes over the client's data in shuffled minibatches.

    For ``fedprox`` every gradient gains ``mu*(w - w_global)``.
    """
    if variant == "fedprox":
        if global_ref is None:
            raise ConfigurationError("fedprox local training needs the global model")
        prox_ref, prox_mu = global_ref, mu
    else:
        prox_ref, prox_mu = None, 0.0
    rng = np.random.default_rng(rng)
    steps = epochs * math.ceil(client.sample_count / batch_size)
    return train_steps(model, client.data.inputs, client.data.labels, steps, opt, rng, batch_size,
                       prox_ref=prox_ref, mu=prox_mu)


def weighted_average(models, weights) -> ModelParams:
    """Parameter-wise average with weights ``w_i / sum(w)``, folded in input order."""
    models = list(models)
    weights = [float(w) for w in weights]
    if not models or len(models) != len(weights):
        raise AggregationError("need one positive weight per model")
    if min(weights) <= 0:
        raise AggregationError("weights must be positive")
    dims = models[0].layer_dims
    for i, m in enumerate(models):
        if m.layer_dims != dims:
            raise AggregationError(f"client {i}: layer_dims {m.layer_dims} differ from {dims}")
    total = sum(weights)
    coef = [w / total for w in weights]
    out = []
    for j in range(len(models[0].arrays())):
        acc = coef[0] * models[0].arrays()[j]
        for c, m in zip(coef[1:], models[1:]):
            acc = acc + c * m.arrays()[j]
        out.append(acc)
    return ModelParams(tuple(out[0::2]), tuple(out[1::2]))


def sample_participants(n_clients: int, fraction: float, round_index: int, seed, stream=_SAMPLE) -> list:
    """``ceil(fraction*N)`` distinct clients, sorted; everyone when ``fraction == 1``."""
    if not 0 < fraction <= 1:
        raise ConfigurationError("participation fraction must lie in (0, 1]")
    if fraction == 1:
        return list(range(n_clients))
    count = max(1, math.ceil(fraction * n_clients - 1e-9))
    rng = np.random.default_rng([*np.ravel(seed).tolist(), stream, round_index])
    return sorted(int(i) for i in rng.choice(n_clients, size=count, replace=False))


@contextmanager
def _round(stage, t):
    try:
        yield
    except NumericError as e:
        raise NumericError(f"fed-engine {stage} round {t}: {e}") from e


def _evaluate_logits(logits, test_set):
    return accuracy_from_logits(logits, test_set.labels)


# -- FedAvg / FedProx --------------------------------------------------------


def run_fedavg(clients, config: FedConfig, test_set: Dataset, initial: ModelParams | None = None):
    """``config.rounds`` rounds of sample, train locally, average."""
    if config.variant not in ("fedavg", "fedprox"):
        raise ConfigurationError(f"run_fedavg cannot run variant {config.variant!r}")
    t0 = time.perf_counter()
    model = initial if initial is not None else init_model(config.layer_dims, _rng(config.seed, _INIT))
    w = model.n_params
    log = MetricsLog()
    cost = 0
    opt = config.optimizer()
    for t in range(1, config.rounds + 1):
        chosen = sample_participants(len(clients), config.participation, t, config.seed)
        start = model

        def work(i):
            return local_train(start, clients[i], config.local_epochs, opt, config.variant, start, config.mu,
                               _rng(config.seed, _LOCAL_AVG, t, clients[i].client_id), config.batch_size)

        with _round("avg", t):
            locals_ = parallel_map(work, chosen, config.threads)
        model = weighted_average(locals_, [clients[i].sample_count for i in chosen])
        cost += 2 * w * len(chosen)
        log.add(t, "avg", _evaluate_logits(forward(model, test_set.inputs)[1], test_set), cost)
    log.summary = {
        "final_accuracy": log.final_accuracy,
        "total_cost": cost,
        "model_params": w,
        "wall_time": time.perf_counter() - t0,
    }
    return model, log


# -- FedConcat ---------------------------------------------------------------


def classifier_init(classifiers) -> ModelParams:
    """Stack cluster classifier weights along the feature axis and sum biases.

    The resulting classifier on concatenated features outputs the sum of the
    cluster models' logits.
    """
    classifiers = list(classifiers)
    if not classifiers:
        raise ConfigurationError("need at least one classifier")
    m = classifiers[0].layer_dims[-1]
    for i, c in enumerate(classifiers):
        if c.n_layers != 1 or c.layer_dims[-1] != m:
            raise ConfigurationError(f"classifier {i} is not a single layer with {m} outputs")
    W = np.concatenate([c.weights[0] for c in classifiers], axis=0)
    b = reduce(lambda a, c: a + c.biases[0], classifiers[1:], classifiers[0].biases[0])
    return ModelParams((W,), (b,))


class FeatureCache:
    """Encoder outputs per client, valid while the encoder fingerprint matches."""

    def __init__(self):
        self._store = {}
        self.hits = 0
        self.misses = 0

    def get(self, encoder, client: ClientState) -> np.ndarray:
        fp = encoder.fingerprint()
        hit = self._store.get(client.client_id)
        if hit is not None and hit[0] == fp:
            self.hits += 1
            return hit[1]
        self.misses += 1
        feats = encoder.forward(client.data.inputs)
        feats.flags.writeable = False
        self._store[client.client_id] = (fp, feats)
        return feats

    def __len__(self):
        return len(self._store)


def features_cached(encoder, client: ClientState, cache: FeatureCache) -> np.ndarray:
    return cache.get(encoder, client)


@dataclass
class FedConcatResult:
    encoder: GlobalEncoder
    classifier: ModelParams
    metrics: MetricsLog
    assignment: clustering.ClusterAssignment
    distributions: list
    cluster_models: list
    cache: FeatureCache | None = None
    extra: dict = field(default_factory=dict)

    def logits(self, inputs):
        return forward(self.classifier, self.encoder.forward(inputs))[1]


def client_distributions(clients, config: FedConfig) -> list:
    """Per-client label distributions for clustering (true, inferred or privatized)."""
    m = config.layer_dims[-1]
    if config.variant == "fedconcat-id" or config.clustering == "inferred-dist":
        shared = init_model(config.layer_dims, _rng(config.seed, _INIT_ID))
        opt = config.optimizer()

        def work(c):
            local = local_train(shared, c, config.local_epochs, opt, "fedavg", None, 0.0,
                                _rng(config.seed, _LOCAL_ID, c.client_id), config.batch_size)
            # every client sees the same server-generated probe set
            return clustering.infer_label_distribution(local, config.probes, config.layer_dims[0],
                                                       seed=config.seed * 1000 + _PROBES, client_id=c.client_id)

        return parallel_map(work, clients, config.threads)
    dists = [clustering.label_distribution(c.data.labels, m, c.client_id) for c in clients]
    if config.clustering == "dp":
        dists = [clustering.laplace_noise(d, config.dp_epsilon, config.seed * 100_003 + d.client_id) for d in dists]
    return dists


def cluster_clients(dists, config: FedConfig) -> clustering.ClusterAssignment:
    points = np.stack([d.probs for d in dists])
    kseed = config.seed * 1000 + _KMEANS
    K = config.K
    if K == "elbow":
        K = clustering.elbow_select_k(points, min(config.k_max, len(dists)), seed=kseed)
    if K > len(dists):
        raise ConfigurationError(f"K={K} exceeds the number of clients {len(dists)}")
    if config.balanced_clusters:
        return clustering.kmeans_balanced(points, K, config.cap_factor, seed=kseed)
    return clustering.kmeans(points, K, seed=kseed)


def train_classifier_stage(encoder, classifier, clients, config: FedConfig, test_features, test_set, log, cost,
                           cache: FeatureCache | None, per_round_cost, first_round_extra=0):
    """Classifier-only FedAvg on top of a frozen concatenated encoder."""
    opt = config.optimizer()
    fp_before = encoder.fingerprint()
    for t in range(1, config.classifier_rounds + 1):
        chosen = sample_participants(len(clients), config.participation, t, config.seed, _SAMPLE_CLS)
        start = classifier

        def work(i):
            c = clients[i]
            rng = _rng(config.seed, _LOCAL_CLS, t, c.client_id)
            if cache is not None:
                feats = features_cached(encoder, c, cache)
                return train_steps(start, feats, c.data.labels, config.post_local_steps, opt, rng, config.batch_size)
            return train_steps(start, c.data.inputs, c.data.labels, config.post_local_steps, opt, rng,
                               config.batch_size, featurize=encoder.forward)

        with _round("classifier", t):
            locals_ = parallel_map(work, chosen, config.threads)
        classifier = weighted_average(locals_, [clients[i].sample_count for i in chosen])
        cost += per_round_cost * len(chosen) + (first_round_extra if t == 1 else 0)
        log.add(t, "classifier", _evaluate_logits(forward(classifier, test_features)[1], test_set), cost)
    if encoder.fingerprint() != fp_before:
        raise AssertionError("encoder changed during classifier training")
    return classifier, cost


def run_fedconcat(clients, config: FedConfig, test_set: Dataset) -> FedConcatResult:
    """Cluster by label distribution, FedAvg inside clusters, concatenate the
    cluster encoders and train one classifier on the frozen features."""
    if config.variant not in ("fedconcat", "fedconcat-id"):
        raise ConfigurationError(f"run_fedconcat cannot run variant {config.variant!r}")
    t0 = time.perf_counter()
    N = len(clients)
    w = init_model(config.layer_dims, 0).n_params
    h, m = config.layer_dims[-2], config.layer_dims[-1]
    cls_params = h * m + m
    log = MetricsLog()
    cost = 0

    # stage 1: cluster
    dists = client_distributions(clients, config)
    inference_cost = 2 * w * N if config.variant == "fedconcat-id" or config.clustering == "inferred-dist" else 0
    assignment = cluster_clients(dists, config)
    K = assignment.K
    members = assignment.members()
    for k, mem in enumerate(members):
        if mem.size == 0:
            raise AssertionError(f"cluster {k} has no clients")

    # stage 2: FedAvg inside every cluster from a fresh initialization
    models = [init_model(config.layer_dims, _rng(config.seed, _INIT_CLUSTER, k)) for k in range(K)]
    opt = config.optimizer()
    cost += inference_cost
    for t in range(1, config.encoder_rounds + 1):
        jobs = []
        chosen_by_cluster = []
        for k, mem in enumerate(members):
            picks = sample_participants(len(mem), config.participation, t, (config.seed, k), _SAMPLE_ENC)
            if not picks:
                picks = [int(_rng(config.seed, _SAMPLE_ENC, t, k).integers(len(mem)))]
            chosen = [int(mem[p]) for p in picks]
            chosen_by_cluster.append(chosen)
            jobs += [(k, i) for i in chosen]
        start = list(models)

        def work(job):
            k, i = job
            return local_train(start[k], clients[i], config.local_epochs, opt, "fedavg", None, 0.0,
                               _rng(config.seed, _LOCAL_ENC, t, clients[i].client_id), config.batch_size)

        with _round("encoder", t):
            trained = parallel_map(work, jobs, config.threads)
        pos = 0
        for k, chosen in enumerate(chosen_by_cluster):
            models[k] = weighted_average(trained[pos : pos + len(chosen)], [clients[i].sample_count for i in chosen])
            pos += len(chosen)
        cost += 2 * w * len(jobs)
        ensemble = sum(forward(mk, test_set.inputs)[1] for mk in models)
        log.add(t, "encoder", _evaluate_logits(ensemble, test_set), cost)

    # stage 3: concatenate encoders, train the classifier with them frozen
    encoder = concat_encoders([mk.encoder for mk in models])
    if config.classifier_init == "concat":
        classifier = classifier_init([mk.classifier for mk in models])
    else:
        classifier = init_model((encoder.output_dim, m), _rng(config.seed, _INIT_CLS))
    broadcast = K * w * N
    cache = FeatureCache() if config.use_feature_cache else None
    test_features = encoder.forward(test_set.inputs)
    classifier, cost = train_classifier_stage(
        encoder, classifier, clients, config, test_features, test_set, log, cost, cache,
        per_round_cost=2 * K * cls_params, first_round_extra=broadcast,
    )
    if config.classifier_rounds == 0:
        cost += broadcast

    log.summary = {
        "final_accuracy": log.final_accuracy if log.records else None,
        "total_cost": cost,
        "model_params": w,
        "classifier_params": cls_params,
        "K": K,
        "wall_time": time.perf_counter() - t0,
    }
    log.extra = {
        "clusters": {**assignment.to_json(), "members": [mk.tolist() for mk in members]},
        "distributions": [d.to_json() for d in dists],
    }
    return FedConcatResult(encoder, classifier, log, assignment, dists, models, cache)


def run(clients, config: FedConfig, test_set: Dataset):
    """Dispatch on ``config.variant``; returns ``(model_or_result, MetricsLog)``."""
    if config.variant in ("fedavg", "fedprox"):
        return run_fedavg(clients, config, test_set)
    result = run_fedconcat(clients, config, test_set)
    return result, result.metrics


def with_overrides(config: FedConfig, **kw) -> FedConfig:
    return replace(config, **kw)
