"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary block at the end of
the run lists every criterion.
"""

import json
import math
import random
import re
import statistics
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from acceptance_report import record
from fedlab.analysis import (
    class_group_clients,
    classifier_fraction,
    encoder_exchange_probes,
    fedavg_cost,
    fedconcat_cost,
    parity_classifier_rounds,
    parity_encoder_rounds,
    track_averaging_degradation,
)
from fedlab.cli import main
from fedlab.clustering import (
    LabelDistVector,
    kmeans,
    kmeans_balanced,
    label_distribution,
    laplace_mechanism,
    laplace_noise,
)
from fedlab.config import parse_config
from fedlab.engine import classifier_init, client_distributions, make_clients, run_fedavg, run_fedconcat
from fedlab.nn import Batch, ModelParams, concat_encoders, forward, gradient_check, init_model
from oracles import exhaustive_wcss_optimum, recount_wcss

DEFAULT_DIMS = (32, 64, 32, 10)
SEEDS = (0, 1, 2)
# frozen after the three-seed calibration run (largest observed mean L1 was 0.176; 25% headroom)
LABEL_INFERENCE_L1_THRESHOLD = 0.22


def _benchmark(seed, **algorithm):
    """Default synthetic benchmark: blobs m=10, d=32, 500/class, 40 clients with two classes each."""
    cfg = parse_config({"dataset": {"seed": seed}, "partition": {"seed": seed},
                        "algorithm": {"variant": "fedavg", "seed": seed, **algorithm}})
    train, test = cfg.build_datasets()
    clients = make_clients(cfg.build_partition(train).client_datasets(train))
    return cfg, clients, train, test


def _parity_rounds():
    c = classifier_fraction(init_model(DEFAULT_DIMS, 0), exact=True)
    T_c = parity_classifier_rounds(c, 5, 31, 50)
    T_e_id = parity_encoder_rounds(c, 5, T_c, 50, extra_rounds=1)
    return c, T_c, T_e_id


def test_criterion_01_gradient_correctness():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng([seed, 77])
        depth = int(rng.integers(1, 4))
        dims = tuple(int(v) for v in rng.integers(2, 9, size=depth + 1))
        model = init_model(dims, rng)
        model = ModelParams(model.weights, tuple(rng.normal(0, 0.1, size=b.shape) for b in model.biases))
        n = int(rng.integers(1, 9))
        batch = Batch(rng.uniform(size=(n, dims[0])), rng.integers(0, dims[-1], size=n))
        worst = max(worst, gradient_check(model, batch, 1e-6))
    elapsed = time.perf_counter() - start
    record(1, "gradient correctness", worst <= 1e-4 and elapsed < 10,
           f"max relative error {worst:.2e} (<= 1e-4) over 20 pairs in {elapsed:.2f}s (< 10s)")


def test_criterion_02_averaging_degradation():
    start = time.perf_counter()
    drops = []
    ok = True
    for seed in SEEDS:
        _, _, train, test = _benchmark(seed)
        pair = class_group_clients(train, [[0, 1], [2, 3]])
        curve = track_averaging_degradation(pair, test, rounds=2, epochs=10, seed=seed)
        for r in (1, 2):
            for ci in (0, 1):
                pre, post = curve.pre_average(r, ci), curve.post_average(r, ci)
                drops.append(pre - post)
                ok &= post < pre
    elapsed = time.perf_counter() - start
    record(2, "averaging degradation pattern", ok and elapsed < 30,
           f"post-average below pre-average in {sum(d > 0 for d in drops)}/{len(drops)} (seed, round, client) cases, "
           f"smallest drop {min(drops):.3f}, {elapsed:.1f}s (< 30s)")


def test_criterion_03_head_to_head_benchmark():
    start = time.perf_counter()
    _, T_c, T_e_id = _parity_rounds()
    gaps, gaps_id = [], []
    for seed in SEEDS:
        cfg, clients, _, test = _benchmark(seed)
        algo = cfg.algorithm
        base = run_fedavg(clients, replace(algo, rounds=50), test)[1].final_accuracy
        concat = run_fedconcat(clients, replace(algo, variant="fedconcat", encoder_rounds=31, classifier_rounds=T_c),
                               test)
        ident = run_fedconcat(clients, replace(algo, variant="fedconcat-id", encoder_rounds=T_e_id,
                                               classifier_rounds=T_c), test)
        gaps.append(concat.metrics.final_accuracy - base)
        gaps_id.append(ident.metrics.final_accuracy - base)
    elapsed = time.perf_counter() - start
    g, g_id = statistics.median(gaps), statistics.median(gaps_id)
    record(3, "head-to-head benchmark", g >= 0.05 and g_id >= 0.03 and elapsed < 300,
           f"median gain vs FedAvg: FedConcat {g:+.3f} (>= +0.05), FedConcat-ID {g_id:+.3f} (>= +0.03); "
           f"per-seed {[round(x, 3) for x in gaps]} / {[round(x, 3) for x in gaps_id]}; {elapsed:.0f}s (< 300s)")


def test_criterion_04_communication_formula():
    start = time.perf_counter()
    rnd = random.Random(2024)
    mismatches = 0
    for _ in range(1000):
        w, N, K, T_e, T_c, T = (rnd.randint(1, 10_000) for _ in range(6))
        c = Fraction(rnd.randint(1, 9_999), 10_000)
        # total = sum over rounds of upload + download, plus the one-time broadcast
        encoder_part = T_e * (w * N + w * N)
        broadcast = K * w * N
        classifier_part = T_c * 2 * N * (c * K * w)
        mismatches += fedconcat_cost(w, c, N, K, T_e, T_c) != encoder_part + broadcast + classifier_part
        mismatches += fedavg_cost(w, N, T) != T * 2 * w * N
    monotone = True
    for _ in range(200):
        args = dict(w=rnd.randint(1, 99), c=Fraction(rnd.randint(1, 98), 100), N=rnd.randint(1, 99),
                    K=rnd.randint(1, 9), T_e=rnd.randint(1, 99), T_c=rnd.randint(1, 99))
        ref = fedconcat_cost(**args)
        for key in args:
            bumped = dict(args, **{key: args[key] + (Fraction(1, 100) if key == "c" else 1)})
            monotone &= fedconcat_cost(**bumped) > ref
    c, T_c, _ = _parity_rounds()
    parity_ok = (
        c == Fraction(330, 4522)
        and parity_encoder_rounds(c, 5, T_c, 50) == 31
        and fedconcat_cost(1, c, 1, 5, 31, T_c) <= fedavg_cost(1, 1, 50) < fedconcat_cost(1, c, 1, 5, 32, T_c)
        and parity_encoder_rounds(Fraction(16, 1000), 5, 200, 50) == 31
    )
    elapsed = time.perf_counter() - start
    record(4, "communication formula", mismatches == 0 and monotone and parity_ok and elapsed < 1,
           f"{mismatches} mismatches in 1000 tuples, monotone={monotone}, measured c={float(c):.5f}, "
           f"parity T_e=31 with T_c={T_c}, {elapsed:.2f}s (< 1s)")


def test_criterion_05_label_inference():
    start = time.perf_counter()
    cfg, clients, _, _ = _benchmark(0, variant="fedconcat-id", local_epochs=10, threads=4)
    inferred = client_distributions(clients, cfg.algorithm)
    matches, l1 = 0, []
    for client, dist in zip(clients, inferred):
        true = label_distribution(client.data.labels, 10).probs
        top2 = set(np.argsort(-dist.probs, kind="stable")[:2].tolist())
        matches += top2 == set(np.flatnonzero(true).tolist())
        l1.append(float(np.abs(true - dist.probs).sum()))
    elapsed = time.perf_counter() - start
    share, mean_l1 = matches / len(clients), float(np.mean(l1))
    record(5, "label inference", share >= 0.8 and mean_l1 <= LABEL_INFERENCE_L1_THRESHOLD and elapsed < 120,
           f"top-2 support match {share:.0%} (>= 80%) of {len(clients)} clients, mean L1 {mean_l1:.3f} "
           f"(<= {LABEL_INFERENCE_L1_THRESHOLD}), {elapsed:.1f}s (< 120s)")


def test_criterion_06_clustering():
    monotone = True
    for seed in range(100):
        rng = np.random.default_rng([seed, 6])
        pts = rng.dirichlet(np.full(10, 0.3), size=int(rng.integers(5, 60)))
        res = kmeans(pts, int(rng.integers(1, min(len(pts), 6) + 1)), seed=seed)
        monotone &= all(b <= a + 1e-12 for a, b in zip(res.history, res.history[1:]))
        monotone &= abs(res.objective - recount_wcss(pts, res.labels, res.centroids)) < 1e-9
    optimal = True
    for seed in range(5):
        # eight random points in the plane, two clusters
        pts = np.random.default_rng(seed).normal(size=(8, 2))
        res = kmeans(pts, 2, seed=seed)
        optimal &= res.objective <= res.history[0] + 1e-12
        optimal &= abs(res.objective - exhaustive_wcss_optimum(pts, 2)) < 1e-9
    capped = True
    for seed in range(100):
        rng = np.random.default_rng([seed, 666])
        N = int(rng.integers(5, 60))
        K = int(rng.integers(1, min(N, 10) + 1))
        res = kmeans_balanced(rng.dirichlet(np.full(10, 0.3), size=N), K, 1.2, seed=seed)
        capped &= max(res.sizes()) <= math.ceil(1.2 * N / K)
    record(6, "clustering", monotone and optimal and capped,
           f"WCSS non-increasing on 100 instances={monotone}, exhaustive optimum matched for seeds 0-4={optimal}, "
           f"balanced cap respected on 100 instances={capped}")


def test_criterion_07_dp_mechanism():
    dist = LabelDistVector(np.full(10, 0.1))
    noise = laplace_mechanism(np.zeros(100_000), 2.5, np.random.default_rng(7))
    mean, scale = float(noise.mean()), float(np.abs(noise).mean())
    on_simplex = True
    for seed in range(1000):
        p = laplace_noise(dist, 2.5, seed).probs
        on_simplex &= p.min() >= 0 and abs(p.sum() - 1) < 1e-12
    record(7, "DP mechanism", abs(mean) <= 0.02 and abs(scale - 0.4) <= 0.04 and on_simplex,
           f"mean {mean:+.4f} (within 0.02), empirical scale {scale:.4f} (0.4 +/- 10%), "
           f"1000 privatized vectors on the simplex={on_simplex}")


def test_criterion_08_classifier_init_identity():
    rng = np.random.default_rng(8)
    models = []
    for k in range(5):
        m = init_model(DEFAULT_DIMS, np.random.default_rng([k, 8]))
        models.append(ModelParams(m.weights, tuple(rng.normal(0, 0.5, size=b.shape) for b in m.biases)))
    encoder = concat_encoders([m.encoder for m in models])
    classifier = classifier_init([m.classifier for m in models])
    x = rng.uniform(size=(100, 32))
    expected = sum(forward(m, x)[1] for m in models)
    err = float(np.max(np.abs(forward(classifier, encoder.forward(x))[1] - expected)))
    record(8, "classifier-init ensemble identity", err <= 1e-9, f"max |global - sum of cluster logits| {err:.2e}")


def test_criterion_09_feature_cache_equivalence():
    cfg, clients, _, test = _benchmark(0)
    common = replace(cfg.algorithm, variant="fedconcat", encoder_rounds=2, classifier_rounds=5)
    cached = run_fedconcat(clients, common, test)
    recomputed = run_fedconcat(clients, replace(common, use_feature_cache=False), test)
    err = max(float(np.max(np.abs(a - b))) for a, b in zip(cached.classifier.arrays(), recomputed.classifier.arrays()))
    unchanged = all(
        e.fingerprint() == m.encoder.fingerprint() and e.fingerprint() == r.fingerprint()
        for e, m, r in zip(cached.encoder.members, cached.cluster_models, recomputed.encoder.members)
    )
    record(9, "feature-cache equivalence", err <= 1e-9 and unchanged,
           f"max classifier difference {err:.2e} (<= 1e-9), encoders bitwise unchanged={unchanged}, "
           f"cache hits {cached.cache.hits} / misses {cached.cache.misses}")


def test_criterion_10_determinism_across_threads(tmp_path):
    _, T_c, _ = _parity_rounds()
    config = tmp_path / "fedconcat.json"
    config.write_text(json.dumps({"algorithm": {"variant": "fedconcat", "encoder_rounds": 31,
                                                "classifier_rounds": T_c}}))
    outputs = []
    for threads in ("1", "4"):
        out = tmp_path / f"threads{threads}"
        assert main(["run", "--config", str(config), "--out", str(out), "--threads", threads]) == 0
        raw = (out / "metrics.json").read_bytes()
        outputs.append(re.sub(rb'\s*"wall_time": [^,\n]*,?', b"", raw))
    record(10, "determinism across --threads", outputs[0] == outputs[1],
           f"metrics.json byte-identical without wall_time for --threads 1 vs 4 ({len(outputs[0])} bytes)")


def test_criterion_11_probe_ordering():
    ok = True
    details = []
    for seed in SEEDS:
        _, _, train, test = _benchmark(seed)
        a, b = class_group_clients(train, [[0, 1], [2, 3]])
        out = encoder_exchange_probes(a, b, test, DEFAULT_DIMS, epochs=50, seed=seed)
        own = [r["loss"] for r in out["own"]]
        exchanged = [r["loss"] for r in out["exchanged"]]
        singles = [r["loss"] for r in out["combined_single"]]
        concat = out["combined_concat"]["loss"]
        ok &= all(o < e for o, e in zip(own, exchanged)) and concat <= min(singles) + 0.05
        details.append(f"seed {seed}: own {[round(v, 3) for v in own]} < exchanged {[round(v, 3) for v in exchanged]}, "
                       f"concat {concat:.3f} <= {min(singles):.3f}+0.05")
    record(11, "probe ordering", ok, "; ".join(details))


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(pytest.main([__file__, "-v"]))
