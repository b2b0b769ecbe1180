import math

import numpy as np
import pytest

from meshformer.datagen import generate_trajectory
from meshformer.mesh import MeshFrame, NormStats, Trajectory, compute_norm_stats
from meshformer.metrics import (
    EvalReport,
    attention_dump,
    attention_summary,
    evaluate,
    k_number,
    n_rmse,
    persistence_forecast,
    rmse_fields,
)
from meshformer.model import ModelConfig, init_parameters

from conftest import random_frame


def _field_frame(v, p):
    n = len(v)
    return MeshFrame(np.random.default_rng(0).random((n, 2)), np.zeros(n), np.asarray(v, float),
                     np.asarray(p, float).reshape(n, -1), np.zeros((0, 2)))


def _random_rollouts(trajs=3, steps=5, n=7, pc=2, seed=0):
    rng = np.random.default_rng(seed)
    base = _field_frame(np.zeros((n, 2)), np.zeros((n, pc)))
    mk = lambda: base.with_fields(rng.normal(size=(n, 2)), rng.normal(size=(n, pc)))  # noqa: E731
    return [[mk() for _ in range(steps)] for _ in range(trajs)], [[mk() for _ in range(steps)] for _ in range(trajs)]


def naive_n_rmse(pred, truth, vs, ps, h):
    total, count = 0.0, 0
    for P, T in zip(pred, truth):
        for t in range(h):
            sv = sp = 0.0
            nv = npp = 0
            for i in range(P[t].num_nodes):
                for c in range(2):
                    sv += (P[t].velocity[i, c] - T[t].velocity[i, c]) ** 2
                    nv += 1
                for c in range(P[t].pressure.shape[1]):
                    sp += (P[t].pressure[i, c] - T[t].pressure[i, c]) ** 2
                    npp += 1
            total += math.sqrt(sv / nv) / vs + math.sqrt(sp / npp) / ps
            count += 1
    return total / count


def naive_rmse(pred, truth, h, name):
    total, count = 0.0, 0
    for P, T in zip(pred, truth):
        for t in range(h):
            a, b = getattr(P[t], name), getattr(T[t], name)
            s = sum((a[i, c] - b[i, c]) ** 2 for i in range(a.shape[0]) for c in range(a.shape[1]))
            total += math.sqrt(s / a.size)
            count += 1
    return total / count


def test_n_rmse_hand_example():
    truth = _field_frame(np.zeros((4, 2)), np.zeros(4))
    pred = truth.with_fields(np.full((4, 2), 0.2), np.full((4, 1), 0.03))
    stats = NormStats(np.zeros(2), 0.4, np.zeros(1), 0.1)
    assert n_rmse([pred], [truth], stats, [1])[1] == pytest.approx(0.8, abs=1e-12)
    assert n_rmse([truth], [truth], stats, [1])[1] == 0.0


def test_n_rmse_matches_naive_oracle():
    pred, truth = _random_rollouts()
    stats = NormStats(np.zeros(2), 0.7, np.zeros(2), 1.9)
    got = n_rmse(pred, truth, stats, [1, 3, 5])
    for h in (1, 3, 5):
        assert got[h] == pytest.approx(naive_n_rmse(pred, truth, 0.7, 1.9, h), abs=1e-12)


def test_rmse_fields_match_naive_oracle_and_offset():
    pred, truth = _random_rollouts(seed=1)
    got = rmse_fields(pred, truth, [2, 5])
    for h in (2, 5):
        assert got[h][0] == pytest.approx(naive_rmse(pred, truth, h, "velocity"), abs=1e-12)
        assert got[h][1] == pytest.approx(naive_rmse(pred, truth, h, "pressure"), abs=1e-12)
    t = truth[0][0]
    shifted = t.with_fields(t.velocity - 0.25, t.pressure)
    assert rmse_fields([shifted], [t], [1])[1] == pytest.approx((0.25, 0.0), abs=1e-15)


def test_metrics_permutation_invariant():
    pred, truth = _random_rollouts(trajs=1, steps=2)
    perm = np.random.default_rng(0).permutation(7)
    pp = [[f.with_fields(f.velocity[perm], f.pressure[perm]) for f in pred[0]]]
    tp = [[f.with_fields(f.velocity[perm], f.pressure[perm]) for f in truth[0]]]
    stats = NormStats.identity(2)
    assert n_rmse(pp, tp, stats, [2])[2] == pytest.approx(n_rmse(pred, truth, stats, [2])[2], abs=1e-14)


def test_metric_errors():
    pred, truth = _random_rollouts()
    with pytest.raises(ValueError):
        n_rmse(pred, truth, None, [1])
    with pytest.raises(ValueError):
        n_rmse(pred, truth[:2], NormStats.identity(2), [1])
    with pytest.raises(ValueError):
        n_rmse(pred, truth, NormStats.identity(2), [6])
    with pytest.raises(ValueError):
        n_rmse(pred, truth, NormStats.identity(2), [3, 2])


def test_k_number_examples():
    assert k_number([0.5, 0.3, 0.15, 0.05]) == 3
    assert k_number(np.full(20, 1 / 20)) == 18
    assert k_number([0, 0, 1, 0]) == 1
    assert k_number([1.0]) == 1
    with pytest.raises(ValueError):
        k_number([0.5, 0.4])


def test_k_number_range_and_monotone():
    rng = np.random.default_rng(0)
    for _ in range(50):
        row = rng.dirichlet(np.full(12, 0.5))
        ks = [k_number(row, th) for th in np.linspace(0.05, 1.0, 20)]
        assert all(1 <= k <= 12 for k in ks)
        assert all(a <= b for a, b in zip(ks, ks[1:]))


def test_attention_summary_cases():
    k = 10
    avg = np.full((2, k, k), 1 / k)
    assert np.all(attention_summary([avg]) == math.ceil(0.9 * k))
    assert attention_summary([np.ones((3, 1, 1))]).tolist() == [[[1], [1], [1]]]
    adj = np.eye(k, dtype=bool) | np.eye(k, k=1, dtype=bool) | np.eye(k, k=-1, dtype=bool)
    rng = np.random.default_rng(0)
    rows = np.where(adj, rng.random((k, k)), 0.0)
    rows /= rows.sum(1, keepdims=True)
    knum = attention_summary([rows[None]])[0, 0]
    assert np.all(knum <= adj.sum(1))


def test_attention_dump_schema():
    rec = [np.full((2, 3, 3), 1 / 3)]
    d = attention_dump(rec, step=4, mode="average", barycenters=np.zeros((3, 2)), adjacency=np.eye(3, dtype=bool))
    assert d["step"] == 4 and d["mode"] == "average"
    assert len(d["blocks"]) == 1 and np.asarray(d["blocks"][0]["heads"]).shape == (2, 3, 3)
    assert d["blocks"][0]["k_numbers"] == [[3, 3, 3], [3, 3, 3]]
    assert d["barycenters"] == [[0.0, 0.0]] * 3


def test_persistence_static_and_constant():
    f = random_frame(20)
    out = persistence_forecast(f, [f, f, f], 3)
    assert all(np.array_equal(o.velocity, f.velocity) for o in out)
    traj = Trajectory([f] * 6, 0.1)
    rep = evaluate(None, [traj], compute_norm_stats([traj]), [1, 5])
    assert rep.n_rmse == [0.0, 0.0]
    with pytest.raises(ValueError):
        persistence_forecast(f, [f], 2)


def test_persistence_positive_on_taylor_green():
    traj = generate_trajectory("taylor_green", 12, 80, 0.1, seed=0)
    rep = evaluate(None, [traj], compute_norm_stats([traj]), [10])
    assert rep.n_rmse[0] > 0


def test_evaluate_fresh_model_equals_persistence():
    traj = generate_trajectory("taylor_green", 6, 60, 0.1, seed=1)
    stats = compute_norm_stats([traj])
    model = init_parameters(ModelConfig(hidden=8, gnn_layers=1, token_width=16, attention_blocks=1, heads=1,
                                        cluster_size=6), 0, stats)
    rep = evaluate(model, [traj], stats, [1, 5], start_stride=1)
    assert rep.n_rmse == rep.baseline_n_rmse
    assert rep.extra["windows"] == 1


def test_report_serialization(tmp_path):
    rep = EvalReport([1, 10], [0.1, 0.3], [0.01, 0.02], [0.5, 0.7], 3, "abc", [0.2, 0.4])
    assert EvalReport.from_json(rep.to_json(tmp_path / "r.json")) == rep
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0] == "horizon,n_rmse,rmse_velocity,rmse_pressure,persistence_n_rmse"
    assert csv_text.splitlines()[2].startswith("10,0.3,")
    with pytest.raises(ValueError):
        EvalReport([10, 1], [0, 0], [0, 0], [0, 0], 1)
    with pytest.raises(ValueError):
        EvalReport([1], [-1.0], [0], [0], 1)
