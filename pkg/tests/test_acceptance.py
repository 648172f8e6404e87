"""End-to-end acceptance checks.

Each test prints a one-line verdict and records it in ``RESULTS``; the
conftest hook repeats all of them at the end of the pytest summary. The
whole module can also be run directly with ``python tests/test_acceptance.py``.
"""

import math
import statistics
import time

import numpy as np
import pytest
import torch

from codecmae.audio_io import SynthSpec, synth_dataset
from codecmae.frontend import melspectrogram
from codecmae.kmeans import kmeans_assign
from codecmae.masking import MaskSpec, sample_mask
from codecmae.model import MaskedAutoencoder, ModelConfig, backward, extract_audio_embeddings
from codecmae.objective import LossConfig, weighted_ce
from codecmae.probe import average_precision, bootstrap_ci, global_score, linear_probe_grid, pool_mean, train_probe
from codecmae.rvq import CodebookWeights, TokenTargets, compute_gamma, rvq_decode, rvq_encode, train_codebooks
from codecmae.selftrain import build_selftrain_targets
from codecmae.trainer import MaskConfig, TrainConfig, pretrain, selftrain_stage

from cli_pipeline import ARTIFACTS, run_pipeline
from oracles import (
    brute_force_cascade,
    brute_force_labels,
    expected_masked_fraction,
    finite_difference,
    loss_of,
    python_sampler_fraction,
    relative_errors,
    tiny_problem,
)

RESULTS: dict[int, str] = {}

# desk-scale smoke run: default optimiser settings, 4-clip batches
SMOKE_CORPUS = SynthSpec(n_items=500)
SMOKE_TRAIN = TrainConfig(batch_size=4, steps_stage1=5000, steps_stage2=1500, seed=0)
SMOKE_MODEL = ModelConfig.preset("desk")
# held-out clips from the same generator as the smoke corpus
PROBE_TASK = SynthSpec(n_items=240)


def record(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS[number] = line
    print(line)
    assert ok, line


def test_c01_loss_closed_form():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    k, q, t = 1024, 8, 300
    uniform = np.full((q, t, k), 1.0 / k)
    worst = 0.0
    for _ in range(20):
        mask = sample_mask(t, rng.uniform(0.1, 0.9), int(rng.integers(1, 30)), rng)
        targets = TokenTargets(rng.integers(0, k, (q, t)), k)
        cfg = LossConfig(float(rng.uniform()), CodebookWeights(rng.dirichlet(np.ones(q))))
        worst = max(worst, abs(weighted_ce(targets, uniform, mask, cfg) / math.log(k) - 1))
    elapsed = time.perf_counter() - start
    record(1, "loss closed form", worst < 0.01 and elapsed < 1.0,
           f"max relative deviation from log {k} = {math.log(k):.4f} is {worst:.2e}, {elapsed:.2f}s")


def test_c02_gradient_oracle():
    start = time.perf_counter()
    model, x, mask, targets, cfg = tiny_problem(seed=3)
    grads = backward(loss_of(model, x, mask, targets, cfg), model)
    errs = relative_errors(grads, finite_difference(model, x, mask, targets, cfg))
    worst_name = max(errs, key=errs.get)
    elapsed = time.perf_counter() - start
    record(2, "gradient oracle", errs[worst_name] <= 1e-4 and elapsed < 120,
           f"{len(errs)} parameter groups, worst relative error {errs[worst_name]:.1e} ({worst_name}), {elapsed:.0f}s")


def test_c03_rvq_oracle():
    start = time.perf_counter()
    mismatches = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((60, 4))
        books = train_codebooks([x], 4, 8, rng, max_iter=20)
        y, _ = rvq_encode(x, books)
        mismatches += int(not np.array_equal(y.indices, brute_force_cascade(x, books)[0]))
    non_monotone = 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        x = rng.standard_normal((50, 4))
        books = train_codebooks([x], 8, 8, rng, max_iter=20)
        mses = []
        for depth in (1, 2, 4, 8):
            y, _ = rvq_encode(x, books[:depth])
            mses.append(np.mean((rvq_decode(y, books[:depth]).data - x) ** 2))
        non_monotone += int(np.any(np.diff(mses) > 0))
    elapsed = time.perf_counter() - start
    record(3, "RVQ oracle", mismatches == 0 and non_monotone == 0 and elapsed < 30,
           f"{mismatches}/100 assignment mismatches, {non_monotone}/100 non-monotone MSE curves, {elapsed:.1f}s")


def test_c04_masking_statistics():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    ours = np.mean([sample_mask(300, 0.5, 15, rng).n_masked for _ in range(10000)]) / 300
    oracle = python_sampler_fraction(300, 0.5, 15, 10000, seed=5)
    exact = expected_masked_fraction(300, 0.5, 15)
    broken = 0
    for _ in range(1000):
        t = int(rng.integers(2, 400))
        m = sample_mask(t, 0.5, min(15, t - 1), rng)
        ok = (np.intersect1d(m.masked, m.visible).size == 0
              and np.array_equal(np.union1d(m.masked, m.visible), np.arange(t))
              and np.all(np.diff(m.masked) > 0) and np.all(np.diff(m.visible) > 0))
        broken += int(not ok)
    elapsed = time.perf_counter() - start
    rel = abs(ours - oracle) / oracle
    record(4, "masking statistics", rel < 0.01 and broken == 0 and elapsed < 30,
           f"masked fraction {ours:.4f} vs Monte-Carlo {oracle:.4f} (rel {rel:.2%}, exact {exact:.4f}), "
           f"{broken}/1000 invariant failures, {elapsed:.1f}s")


def test_c05_encoder_efficiency():
    start = time.perf_counter()
    model = MaskedAutoencoder(ModelConfig.preset("desk")).eval()
    rng = np.random.default_rng(5)
    x = torch.from_numpy(rng.standard_normal((1, 3000, 128)).astype(np.float32))
    masks = {0.0: MaskSpec.empty(3000), 0.5: None}

    def timed(p):
        runs = []
        for _ in range(20):
            mask = masks[p] or sample_mask(3000, p, 15, rng)
            with torch.no_grad():
                t0 = time.perf_counter()
                model.encode_batch(x, [mask])
                runs.append(time.perf_counter() - t0)
        return statistics.median(runs)

    timed(0.5)
    full, half = timed(0.0), timed(0.5)
    ratio = half / full
    elapsed = time.perf_counter() - start
    record(5, "encoder efficiency", ratio <= 0.7 and elapsed < 120,
           f"median encoder time {half * 1e3:.0f} ms masked vs {full * 1e3:.0f} ms unmasked (ratio {ratio:.2f}), {elapsed:.0f}s")


@pytest.fixture(scope="module")
def smoke():
    start = time.perf_counter()
    clips = [item.audio for item in synth_dataset(SMOKE_CORPUS, np.random.default_rng(0))]
    feats = [melspectrogram(c, SMOKE_MODEL.input_dim) for c in clips]
    books = train_codebooks(feats, SMOKE_MODEL.n_books, SMOKE_MODEL.n_classes, np.random.default_rng(1))
    gamma = compute_gamma(books, feats[:150])
    ckpt = pretrain(clips, books, SMOKE_MODEL, LossConfig(0.9, gamma), SMOKE_TRAIN)
    return {"clips": clips, "ckpt": ckpt, "elapsed": time.perf_counter() - start}


@pytest.mark.slow
def test_c06_smoke_pretraining(smoke):
    history = smoke["ckpt"].history
    log_k = math.log(SMOKE_MODEL.n_classes)
    first, last = history[0], history[-1]
    acc = np.array(last[2:])
    chance = 1.0 / SMOKE_MODEL.n_classes
    above = int(np.sum(acc > 3 * chance))
    ok = (last[0] == SMOKE_TRAIN.steps_stage1 and last[1] < 0.6 * log_k
          and above >= math.ceil(len(acc) / 2) and smoke["elapsed"] < 1800)
    record(6, "smoke pretraining", ok,
           f"loss {first[1]:.3f} -> {last[1]:.3f} after {last[0]} steps (target < {0.6 * log_k:.3f}); "
           f"{above}/{len(acc)} codebooks above 3x chance, accuracies {np.round(acc, 3).tolist()}; "
           f"{smoke['elapsed'] / 60:.1f} min")


@pytest.mark.slow
def test_c07_selftraining(smoke):
    start = time.perf_counter()
    k = 64
    ckpt, km = selftrain_stage(smoke["ckpt"], smoke["clips"], k, SMOKE_TRAIN, LossConfig(0.9), MaskConfig())
    hist = np.asarray(km.distortion_history)
    monotone = bool(np.all(np.diff(hist) <= 1e-9 * hist[0]))
    _, provider = build_selftrain_targets(smoke["ckpt"].model, smoke["clips"][:8], 8, 4, np.random.default_rng(7))
    emb = provider.embeddings(np.stack([melspectrogram(c, SMOKE_MODEL.input_dim).data for c in smoke["clips"][:8]]))
    emb = emb.reshape(-1, emb.shape[-1])
    matches = bool(np.array_equal(kmeans_assign(km, emb), brute_force_labels(emb, km.centroids)))
    acc = ckpt.history[-1][2]
    elapsed = time.perf_counter() - start
    ok = monotone and matches and acc > 3.0 / k and ckpt.history[-1][0] == SMOKE_TRAIN.steps_stage2 and elapsed < 900
    record(7, "self-training", ok,
           f"Lloyd monotone {monotone} over {len(hist)} iterations, brute-force assignment match {matches}, "
           f"masked accuracy {acc:.3f} after {ckpt.history[-1][0]} steps (target > {3.0 / k:.3f}), {elapsed / 60:.1f} min")


def _probe_accuracy(model, data, seed):
    x = np.stack([pool_mean(extract_audio_embeddings(item.audio, model).data) for item in data])
    y = np.array([item.label for item in data])
    n = len(y)
    tr, va = int(0.6 * n), int(0.8 * n)
    probe = train_probe(x[:tr], y[:tr], x[tr:va], y[tr:va], grid=linear_probe_grid(), seed=seed)
    return float(np.mean(probe.predict(x[va:]) == y[va:]))


@pytest.mark.slow
def test_c08_probe_separability(smoke):
    start = time.perf_counter()
    trained = smoke["ckpt"].model.eval()
    pairs = []
    for seed in range(5):
        data = synth_dataset(PROBE_TASK, np.random.default_rng(100 + seed))
        random_init = MaskedAutoencoder(SMOKE_MODEL, seed=1000 + seed).eval()
        pairs.append((_probe_accuracy(trained, data, seed), _probe_accuracy(random_init, data, seed)))
    pre, rnd = np.array(pairs).T
    wins = int(np.sum(pre > rnd))
    elapsed = time.perf_counter() - start
    ok = bool(np.all(pre >= 0.8)) and wins >= 4 and elapsed < 600
    record(8, "probe separability", ok,
           f"pretrained {np.round(pre, 3).tolist()} vs random init {np.round(rnd, 3).tolist()}, "
           f"pretrained wins {wins}/5, {elapsed / 60:.1f} min")


def test_c09_metrics():
    start = time.perf_counter()
    ap = average_precision(np.array([0.9, 0.8, 0.1]), np.array([1, 0, 1]))
    ap_ok = abs(ap - 5 / 6) <= np.spacing(5 / 6)
    x = (np.random.default_rng(9).uniform(size=200) < 0.8).astype(float)
    a = bootstrap_ci(x, iters=100, rng=np.random.default_rng(10), percentiles=(2.5, 97.5))
    b = bootstrap_ci(x, iters=100, rng=np.random.default_rng(10), percentiles=(2.5, 97.5))
    analytic = 2 * 1.959964 * math.sqrt(0.8 * 0.2 / 200)
    width = a[1] - a[0]
    boot_ok = a == b and 0.5 * analytic <= width <= 2 * analytic
    stats = {"a": {"mean": 0.5, "std": 0.125}, "b": {"mean": 0.25, "std": 0.25}}
    cases = (global_score({"a": 0.5, "b": 0.25}, stats), global_score({"a": 0.625, "b": 0.75}, stats),
             global_score({"a": 0.75, "b": 0.125}, stats))
    g_ok = cases == (0.0, 1.0, 0.25)
    elapsed = time.perf_counter() - start
    record(9, "metrics", ap_ok and boot_ok and g_ok and elapsed < 60,
           f"AP {ap:.6f} (5/6), bootstrap width {width:.4f} vs analytic {analytic:.4f} deterministic {a == b}, "
           f"global scores {cases}, {elapsed:.2f}s")


@pytest.mark.slow
def test_c10_reproducibility(tmp_path):
    start = time.perf_counter()
    first, second = run_pipeline(tmp_path / "first"), run_pipeline(tmp_path / "second")
    differing = [name for name in ARTIFACTS if (first / name).read_bytes() != (second / name).read_bytes()]
    elapsed = time.perf_counter() - start
    record(10, "reproducibility", not differing,
           f"{len(ARTIFACTS) - len(differing)}/{len(ARTIFACTS)} artifacts byte-identical across two CLI runs"
           f"{' (differ: ' + ', '.join(differing) + ')' if differing else ''}, {elapsed:.0f}s")


if __name__ == "__main__":
    import sys

    raise SystemExit(pytest.main([__file__, "-q", "-s", *sys.argv[1:]]))
