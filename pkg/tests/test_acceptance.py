"""Acceptance criteria 1 to 11.

Each test appends a ``criterion N: PASS|FAIL ...`` line that the terminal
summary prints, then asserts the criterion at its stated tolerance.  The
quantitative criteria (6 to 9) train real models and take several minutes.
"""

import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

import conftest
from deepmvi import autodiff as ad
from deepmvi.autodiff import Tensor
from deepmvi.baselines import impute_svd
from deepmvi.data import DatasetTensor, DimensionCatalog, from_matrix, normalize
from deepmvi.evaluation import (DeepMviOptions, duplicated_dataset, run_benchmark,
                                seasonal_dataset)
from deepmvi.kernel import KRConfig, MemberEmbedding, kr_stats
from deepmvi.model import (DeepMviModel, TrainerConfig, _Context, _forward, _loss, carve,
                           impute, load_checkpoint, save_checkpoint, train)
from deepmvi.scenarios import MissScenario, block_shapes, generate, make_rng
from deepmvi.transformer import TTConfig, attend, decode, init_params, window_features

SEEDS = range(5)


def record(n, ok, detail):
    conftest.ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def cat(name, n):
    return DimensionCatalog(name, tuple(f"{name}{i}" for i in range(n)))


# ---------------------------------------------------------------- 1


def _biased_params(cfg, seed):
    rng = make_rng(seed)
    P = init_params(cfg, rng)
    for name in ("b_f", "b_q", "b_k", "b_v", "b_d"):
        P[name].data = rng.normal(0, 0.3, P[name].shape)
    return P


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(100)
    cfg = TTConfig(w=4, p=3, n_head=2, d_hidden=5)
    P = _biased_params(cfg, 1)
    errs = {}

    x, a = rng.normal(size=16), rng.random(16) > 0.2
    errs["window"] = ad.grad_check(
        lambda W, b: ad.sum(ad.square(window_features(x, a, cfg, {"W_f": W, "b_f": b}))),
        [P["W_f"], P["b_f"]])

    for mode in ("softmax", "paper-literal"):
        Q, K, V = (Tensor(rng.normal(size=s)) for s in [(6,), (5, 6), (5, 3)])
        wv = Tensor(rng.normal(size=3))
        errs[f"attend-{mode}"] = ad.grad_check(
            lambda q, k, v: ad.sum(ad.mul(attend(q, k, v, [1, 1, 0, 1, 1], mode), wv)), [Q, K, V])

    names = ["W_d1", "W_d2", "W_d", "b_d"]
    h = Tensor(rng.normal(size=cfg.p * cfg.n_head))
    errs["decode"] = ad.grad_check(
        lambda hh, *ws: ad.sum(ad.square(decode(hh, cfg, dict(zip(names, ws)), 6))),
        [h] + [P[n] for n in names])

    kcfg = KRConfig(init_std=0.5)
    emb = MemberEmbedding([cat("s", 5)], kcfg, make_rng(2))
    values, avail = rng.normal(size=(5, 3)), rng.random((5, 3)) > 0.2

    def kr(table):
        emb.params["emb.0"] = table
        U, W, _, _ = kr_stats(values, avail, (1,), 2, 0, emb, kcfg)
        return ad.add(U, ad.scale(W, 0.3))

    errs["kernel+embeddings"] = ad.grad_check(kr, [emb.params["emb.0"]])

    Hm = Tensor(rng.normal(size=(6, 4)))
    wo, bo = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=1))
    errs["output"] = ad.grad_check(
        lambda H, w, b: ad.sum(ad.square(ad.add(ad.reshape(ad.matmul(H, ad.reshape(w, (-1, 1))),
                                                           (6,)), ad.broadcast_to(b, (6,))))),
        [Hm, wo, bo])
    per_op = max(errs.values())

    # composed loss on a 2-series, T=80 toy
    t = np.arange(80)
    series = np.stack([np.sin(t / 4.0), np.cos(t / 6.0)]) + 0.05 * rng.normal(size=(2, 80))
    small = TTConfig(w=4, p=4, n_head=2, d_hidden=8)
    model = DeepMviModel([cat("s", 2)], small, KRConfig(init_std=0.5), loss_kind="mse", seed=3)
    model.params["out.w"].data = rng.normal(0, 0.5, model.out_width)
    for name in ("tt.b_f", "tt.b_q", "tt.b_k", "tt.b_v", "tt.b_d"):
        model.params[name].data = rng.normal(0, 0.2, model.params[name].shape)
    ctx = _Context(model, series, np.ones((2, 80), bool))
    s = np.array([0, 1, 0, 1, 0, 1])
    tt = np.array([9, 22, 37, 50, 66, 79])
    blocks = np.stack([s, s + 1, tt - 2, np.minimum(tt + 2, 80)], axis=1)

    def loss(*_):
        mu, _ = _forward(model, ctx, s, tt, blocks)
        return _loss(model, mu, series[s, tt], np.ones(s.size))

    e2e = ad.grad_check(loss, [model.params[n] for n in sorted(model.params)])
    elapsed = time.perf_counter() - start
    worst = max(errs, key=errs.get)
    record(1, per_op < 1e-6 and e2e < 1e-3 and elapsed < 60,
           f"per-op max {per_op:.2e} ({worst}), end-to-end {e2e:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2


def _random_config(seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(2, 5)),) if rng.random() < 0.5 else \
        (int(rng.integers(2, 4)), int(rng.integers(2, 4)))
    w = int(rng.integers(2, 6))
    T = int(rng.integers(6, 20)) * w + int(rng.integers(0, w))
    dims = [cat(f"d{i}", n) for i, n in enumerate(shape)]
    cfg = TTConfig(w=w, p=int(rng.integers(2, 5)), n_head=int(rng.integers(1, 3)),
                   d_hidden=4, attn_mode=["softmax", "paper-literal"][seed % 2])
    model = DeepMviModel(dims, cfg, KRConfig(init_std=0.5, top_l=int(rng.integers(1, 4))),
                         seed=seed)
    model.params["out.w"].data = rng.normal(size=model.out_width)
    model.params["out.b"].data = rng.normal(size=1)
    for name in ("tt.b_f", "tt.b_q", "tt.b_k", "tt.b_v", "tt.b_d"):
        model.params[name].data = rng.normal(0, 0.3, model.params[name].shape)
    X = rng.normal(size=shape + (T,))
    M = rng.random(X.shape) < rng.uniform(0.05, 0.3)
    return rng, model, X, M


def test_criterion_2_masking_soundness():
    bad = []
    for seed in range(100):
        rng, model, X, M = _random_config(seed)
        N, T = int(np.prod(X.shape[:-1])), X.shape[-1]
        junk = np.where(M, rng.normal(0, 1e4, X.shape), X)
        # test-time: values at missing cells
        avail = ~M
        flat = np.argwhere(M.reshape(N, T))
        if flat.size:
            s, t = flat.T
            blocks = np.stack([s, s + 1, t, t + 1], axis=1)
            mu_a, info_a = _forward(model, _Context(model, X, avail), s, t, blocks)
            mu_b, info_b = _forward(model, _Context(model, junk, avail), s, t, blocks)
            if (info_a["signals"].tobytes() != info_b["signals"].tobytes()
                    or mu_a.data.tobytes() != mu_b.data.tobytes()):
                bad.append((seed, "forward"))
        # impute derives its own normalization from the available cells
        ds_a = DatasetTensor(model.dims, X)
        ds_b = DatasetTensor(model.dims, junk)
        if impute(ds_a, M, model).tobytes() != impute(ds_b, M, model).tobytes():
            bad.append((seed, "impute"))
        # training-time: values inside each target's synthetic block
        cells = np.argwhere(avail.reshape(N, T))[rng.integers(0, int(avail.sum()), 4)]
        shapes = np.array([[int(rng.integers(1, N + 1)), int(rng.integers(1, 12))]] * 4)
        blocks = carve(cells[:, 0], cells[:, 1], shapes, N, T, rng)
        clean = _Context(model, X, avail)
        for (s, t), b in zip(cells, blocks):
            Y = X.reshape(N, T).copy()
            Y[b[0]:b[1], b[2]:b[3]] = 1e6
            args = ([s], [t], [b])
            mu_a, info_a = _forward(model, clean, *args)
            mu_b, info_b = _forward(model, _Context(model, Y.reshape(X.shape), avail), *args)
            if (info_a["signals"].tobytes() != info_b["signals"].tobytes()
                    or mu_a.data.tobytes() != mu_b.data.tobytes()):
                bad.append((seed, "block"))
    record(2, not bad, f"100 configurations, {len(bad)} leaks {bad[:3]}")


# ---------------------------------------------------------------- 3


def _runs(row):
    edges = np.diff(np.concatenate([[0], row.astype(int), [0]]))
    starts, ends = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
    return list(zip(starts.tolist(), (ends - starts).tolist()))


def test_criterion_3_scenario_exactness():
    problems = []
    for N in (5, 10, 20):
        for T in (100, 1000):
            for x in (10, 50, 100):
                M = generate((N, T), MissScenario("mcar", x_percent=x, seed=N * T + x))
                rows = np.flatnonzero(M.any(axis=1))
                if rows.size != math.ceil(x * N / 100):
                    problems.append(("mcar rows", N, T, x))
                for r in rows:
                    rr = _runs(M[r])
                    if len(rr) != T // 100 or any(n != 10 for _, n in rr):
                        problems.append(("mcar blocks", N, T, x))
                if block_shapes(M).counts() != {(1, 10): rows.size * (T // 100)}:
                    problems.append(("mcar inverse", N, T, x))
            L = T // N
            D = generate((N, T), MissScenario("missdisj"))
            if [_runs(D[i]) for i in range(N)] != [[(i * L, L)] for i in range(N)] \
                    or D.sum(axis=0).max() > 1:
                problems.append(("missdisj", N, T))
            O = generate((N, T), MissScenario("missover"))
            want = [[(i * L, 2 * L)] for i in range(N - 1)] + [[((N - 1) * L, L)]]
            if [_runs(O[i]) for i in range(N)] != want:
                problems.append(("missover", N, T))
            if block_shapes(D).counts() != {(1, L): N}:
                problems.append(("missdisj inverse", N, T))
            if block_shapes(O).counts() != {(1, 2 * L): N - 1, (1, L): 1}:
                problems.append(("missover inverse", N, T))
            for size in (10, 20):
                B = generate((N, T), MissScenario("blackout", block_size=size))
                if any(_runs(B[i]) != [(int(0.05 * T), size)] for i in range(N)):
                    problems.append(("blackout", N, T, size))
                if block_shapes(B).shapes != [(N, size)]:
                    problems.append(("blackout inverse", N, T, size))
    record(3, not problems, f"N in (5,10,20), T in (100,1000); mismatches {problems[:3]}")


# ---------------------------------------------------------------- 4


def _brute_force(values, avail, k, t, i, table, gamma, top_l):
    sibs = []
    for m in range(values.shape[i]):
        if m != k[i]:
            d = table[m] - table[k[i]]
            sibs.append((float(d @ d), m))
    sibs = sorted(sibs)[:top_l]
    num = den = 0.0
    seen = []
    for d2, m in sibs:
        cell = k[:i] + (m,) + k[i + 1:] + (t,)
        if avail[cell]:
            kern = math.exp(-gamma * d2)
            num, den = num + kern * values[cell], den + kern
            seen.append(values[cell])
    if not seen:
        return 0.0, 0.0, 0.0
    mean = sum(seen) / len(seen)
    return num / den, den, sum((v - mean) ** 2 for v in seen) / len(seen)


def test_criterion_4_kernel_regression_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for case in range(1000):
        shape = (int(rng.integers(1, 6)), int(rng.integers(2, 6)), 3)
        dims = [cat("a", shape[0]), cat("b", shape[1])]
        cfg = KRConfig(gamma=float(rng.uniform(0.2, 3)), top_l=int(rng.integers(1, 6)),
                       init_std=0.5)
        emb = MemberEmbedding(dims, cfg, make_rng(case))
        values = rng.normal(size=shape)
        avail = rng.random(shape) > 0.3
        k = (int(rng.integers(shape[0])), int(rng.integers(shape[1])))
        t = int(rng.integers(3))
        i = case % 2
        U, W, V, _ = kr_stats(values, avail, k, t, i, emb, cfg)
        ref = _brute_force(values, avail, k, t, i, emb.vectors(i), cfg.gamma, cfg.top_l)
        worst = max(worst, abs(float(U.data) - ref[0]), abs(float(W.data) - ref[1]),
                    abs(V - ref[2]))
    # duplicated series: the copy is the only (and nearest) sibling
    cfg = KRConfig(top_l=1)
    emb = MemberEmbedding([cat("s", 4)], cfg, make_rng(9))
    emb.params["emb.0"].data[3] = emb.params["emb.0"].data[1]
    X = rng.normal(size=(4, 50))
    X[3] = X[1]
    exact = all(float(kr_stats(X, np.ones_like(X, bool), (1,), t, 0, emb, cfg)[0].data)
                == X[3, t] for t in range(50))
    record(4, worst <= 1e-12 and exact,
           f"max deviation {worst:.2e} over 1000 instances, duplicate exact={exact}")


# ---------------------------------------------------------------- 5


def test_criterion_5_svd_rank_two():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(20, 2)) @ rng.normal(size=(2, 200))
    M = rng.random(X.shape) < 0.10
    start = time.perf_counter()
    out, history = impute_svd(from_matrix(np.where(M, np.nan, X)), k=2, tol=1e-8,
                              max_sweeps=1000)
    elapsed = time.perf_counter() - start
    err = float(np.abs(out - X)[M].max())
    record(5, err < 1e-4 and elapsed < 10,
           f"max abs error {err:.2e} ({M.sum()} cells, {len(history)} sweeps), {elapsed:.2f}s")


# ---------------------------------------------------------------- 6 to 9


def test_criterion_6_seasonal_blackout():
    wins, parts = 0, []
    for seed in SEEDS:
        start = time.perf_counter()
        r = run_benchmark(seasonal_dataset(seed), MissScenario("blackout", block_size=20),
                          ["deepmvi", "linear", "svd"], seed=seed)
        elapsed = time.perf_counter() - start
        d, lin, svd = (r.results[k]["mae"] for k in ("deepmvi", "linear", "svd"))
        ok = d < 0.5 * lin and d < 0.5 * svd and elapsed < 600
        wins += ok
        parts.append(f"{d:.3f}/{lin:.3f}/{svd:.3f}")
    record(6, wins >= 4, f"{wins}/5 seeds; deepmvi/linear/svd MAE {', '.join(parts)}")


def test_criterion_7_duplicated_mcar():
    wins, parts = 0, []
    for seed in SEEDS:
        r = run_benchmark(duplicated_dataset(seed), MissScenario("mcar", x_percent=100, seed=seed),
                          ["deepmvi", "mean"], seed=seed)
        d, m = r.results["deepmvi"]["mae"], r.results["mean"]["mae"]
        wins += d < 0.1 * m
        parts.append(f"{d / m:.3f}")
    record(7, wins >= 4, f"{wins}/5 seeds; deepmvi/mean MAE ratio {', '.join(parts)} (< 0.1)")


def test_criterion_8_fine_grained_ablation():
    wins, parts = 0, []
    for seed in SEEDS:
        gain = {}
        for size in (1, 10):
            mae = {}
            for use_fg in (True, False):
                opts = DeepMviOptions(max_iters=800, use_fg=use_fg)
                r = run_benchmark(seasonal_dataset(seed),
                                  MissScenario("point", block_size=size, seed=seed),
                                  ["deepmvi"], seed=seed, options=opts)
                mae[use_fg] = r.results["deepmvi"]["mae"]
            gain[size] = mae[False] - mae[True]
        wins += gain[1] > gain[10]
        parts.append(f"{gain[1]:+.3f}/{gain[10]:+.3f}")
    record(8, wins >= 4, f"{wins}/5 seeds; fg gain at size 1/10 {', '.join(parts)}")


def test_criterion_9_downstream_aggregate():
    wins, parts = 0, []
    for seed in SEEDS:
        r = run_benchmark(seasonal_dataset(seed), MissScenario("mcar", x_percent=100, seed=seed),
                          ["deepmvi"], seed=seed)
        d = r.downstream["imputers"]["deepmvi"]["mae"]
        disc = r.downstream["discard_mae"]
        wins += d < disc
        parts.append(f"{d:.4f}/{disc:.4f}")
    record(9, wins >= 4, f"{wins}/5 seeds; deepmvi/discard aggregate MAE {', '.join(parts)}")


# ---------------------------------------------------------------- 10, 11


def test_criterion_10_cli_determinism(tmp_path):
    data = tmp_path / "seasonal.csv"
    subprocess.run([sys.executable, "-m", "deepmvi", "synth", "--out", str(data)], check=True,
                   capture_output=True)
    reports = []
    for run in ("a", "b"):
        out = tmp_path / run
        subprocess.run([sys.executable, "-m", "deepmvi", "bench", "--data", str(data),
                        "--scenario", "mcar", "--x-percent", "40", "--seed", "7",
                        "--max-iters", "60", "--out", str(out)], check=True, capture_output=True)
        doc = json.loads((out / "report.json").read_text())
        doc["meta"].pop("wall_time")
        reports.append((json.dumps(doc, sort_keys=True).encode(),
                        (out / "scores.csv").read_bytes()))
    same = reports[0] == reports[1]
    record(10, same, "two bench runs, seed 7: reports and score tables byte-identical"
           if same else "reports differ")


def test_criterion_11_checkpoint_round_trip(tmp_path):
    ds = seasonal_dataset(11, n_series=3, T=400)
    M = generate(ds.shape, MissScenario("mcar", x_percent=70, seed=11))
    dirty = ds.with_missing(M)
    norm, stats = normalize(dirty)
    model, _ = train(norm, M, TrainerConfig(max_iters=50, batch_size=64), stats=stats,
                     tt=TTConfig(w=5, p=8, n_head=2, d_hidden=16))
    save_checkpoint(model, tmp_path / "model.json")
    back = load_checkpoint(tmp_path / "model.json")
    a = impute(dirty, None, model)
    b = impute(dirty, None, back)
    record(11, a.tobytes() == b.tobytes(), "save, load and impute match the in-memory model "
           f"bit-exactly over {int(M.sum())} cells")
