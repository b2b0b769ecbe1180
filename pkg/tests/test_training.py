import json

import numpy as np
import pytest
import torch

from meshformer.mesh import FormatError, MeshFrame, NodeType, NormStats, Trajectory, TruncationError
from meshformer.model import ModelConfig, init_parameters
from meshformer.training import (
    ConfigMismatchError,
    Episodes,
    TrainConfig,
    TrainingError,
    _make_optimizer,
    checkpoint_bytes,
    gradcheck_episode,
    load_checkpoint,
    loss,
    parse_checkpoint_bytes,
    run_gradcheck,
    save_checkpoint,
    train,
    unroll_loss,
)

TINY = ModelConfig(hidden=8, gnn_layers=1, token_width=16, attention_blocks=1, heads=1, cluster_size=4)


def _one_node(v, p):
    return MeshFrame(np.zeros((1, 2)), np.zeros(1, np.uint8), np.array([v], float), np.array([[p]], float),
                     np.zeros((0, 2), np.int64))


def _episodes(frames=6, seed=0):
    eps, norm = gradcheck_episode(num_nodes=16, frames=frames, cluster_size=4, seed=seed)
    return eps, norm


# ----------------------------------------------------------------- loss


def test_loss_hand_example():
    pred, true = _one_node([0.2, 0.0], 0.1), _one_node([0.0, 0.0], 0.0)
    assert loss([pred], [true], 0.1) == pytest.approx(0.021, abs=1e-15)
    assert loss([true], [true], 0.1) == 0.0


def test_alpha_only_scales_pressure():
    rng = np.random.default_rng(0)
    a = [MeshFrame(rng.random((5, 2)), np.zeros(5), rng.normal(size=(5, 2)), rng.normal(size=(5, 1)), np.zeros((0, 2)))
         for _ in range(3)]
    b = [f.with_fields(rng.normal(size=(5, 2)), rng.normal(size=(5, 1))) for f in a]
    l0, l1, l2 = loss(a, b, 0.0), loss(a, b, 0.3), loss(a, b, 0.6)
    assert l2 - l0 == pytest.approx(2 * (l1 - l0), rel=1e-12)
    assert l0 > 0


def test_loss_uses_normalized_units():
    pred, true = _one_node([0.2, 0.0], 0.1), _one_node([0.0, 0.0], 0.0)
    norm = NormStats(np.array([5.0, 5.0]), 2.0, np.array([1.0]), 0.5)
    assert loss([pred], [true], 0.1, norm) == pytest.approx(0.02 / 4 + 0.1 * 0.01 / 0.25, abs=1e-15)


def test_loss_errors():
    a = _one_node([0, 0], 0)
    with pytest.raises(ValueError):
        loss([a, a], [a], 0.1)
    big = MeshFrame(np.eye(2), np.zeros(2), np.zeros((2, 2)), np.zeros((2, 1)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        loss([a], [big], 0.1)


# ----------------------------------------------------------------- gradients


def test_head_bias_gradient_closed_form():
    """Zero head, one node, H=1: d loss / d bias_c = 2/(N*C) * residual (times alpha for pressure)."""
    f0, f1 = _one_node([0.3, -0.2], 0.5), _one_node([0.1, 0.4], -0.25)
    norm = NormStats(np.array([0.1, 0.0]), 0.7, np.array([0.2]), 1.3)
    eps = Episodes([Trajectory([f0, f1], 0.1)], cluster_size=1)
    model = init_parameters(TINY, 0, norm)
    alpha = 0.1
    total, _, _ = unroll_loss(model, eps, 0, 0, 1, alpha, 0)
    total.backward()
    vn0 = (f0.velocity[0] - norm.v_mean) / norm.v_std
    vn1 = (f1.velocity[0] - norm.v_mean) / norm.v_std
    pn0 = (f0.pressure[0] - norm.p_mean) / norm.p_std
    pn1 = (f1.pressure[0] - norm.p_mean) / norm.p_std
    expected = np.concatenate([2 / 2 * (vn0 - vn1), alpha * 2 / 1 * (pn0 - pn1)])
    np.testing.assert_allclose(model.head.last_linear.bias.grad.numpy(), expected, atol=1e-12)


def test_unused_attention_parameter_is_flat():
    cfg = ModelConfig(hidden=8, gnn_layers=1, token_width=16, attention_blocks=1, heads=1, cluster_size=4,
                      attention_mode="average")
    eps, norm = _episodes(4)
    model = init_parameters(cfg, 0, norm, zero_head=False)
    base, _, _ = unroll_loss(model, eps, 0, 0, 2, 0.1, 0)
    base.backward()
    q = model.blocks[0].q.weight
    assert q.grad is None or torch.count_nonzero(q.grad) == 0
    e = 1e-5
    with torch.no_grad():
        q[0, 0] += e
        moved = unroll_loss(model, eps, 0, 0, 2, 0.1, 0)[0].item()
    assert abs(moved - base.item()) <= 10 * e * e


def test_gradcheck_tiny_config():
    report = run_gradcheck(TINY, seed=0, samples=200)
    assert report.checked == 200
    assert report.max_rel_error < 1e-4, report


# ----------------------------------------------------------------- optimizer loop


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(horizon=0)
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 3})


def test_single_step_updates_once(tmp_path):
    eps, norm = _episodes()
    tc = TrainConfig(steps=1, horizon=2, precision="f64", learning_rate=1e-3)
    log = tmp_path / "log.jsonl"
    ck = train(eps, TINY, tc, norm, log_path=log)
    assert ck.step == 1
    fresh = init_parameters(TINY, 0, norm)
    changed = [n for n, p in fresh.named_parameters() if not torch.equal(p, ck.parameters[n])]
    assert changed
    steps = {int(s["step"]) for s in ck.optimizer.values()}
    assert steps == {1}
    rec = [json.loads(x) for x in log.read_text().splitlines()]
    assert [r["step"] for r in rec] == [1]
    assert set(rec[0]) == {"step", "loss", "loss_v", "loss_p", "wall_ms"}


def test_adam_zero_gradient_keeps_parameters():
    model = init_parameters(TINY, 0, zero_head=False)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    opt = _make_optimizer(model, 1e-3)
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    for n, p in model.named_parameters():
        assert torch.equal(p, before[n]), n


def test_nan_loss_aborts():
    eps, norm = _episodes()
    bad = NormStats(norm.v_mean, norm.v_std, np.array([np.nan]), norm.p_std)
    with pytest.raises(TrainingError, match="non-finite"):
        train(eps, TINY, TrainConfig(steps=2, horizon=2, precision="f64"), bad)


def test_horizon_longer_than_data():
    eps, norm = _episodes(frames=3)
    with pytest.raises(ValueError, match="frames"):
        train(eps, TINY, TrainConfig(steps=1, horizon=3), norm)


def test_deterministic_runs_are_byte_identical():
    eps, norm = _episodes()
    tc = TrainConfig(steps=4, horizon=2, learning_rate=1e-3)
    a = checkpoint_bytes(train(eps, TINY, tc, norm, deterministic=True))
    b = checkpoint_bytes(train(eps, TINY, tc, norm, deterministic=True))
    assert a == b


def test_resume_matches_uninterrupted(tmp_path):
    eps, norm = _episodes()
    tc = TrainConfig(steps=6, horizon=2, learning_rate=1e-3, precision="f64")
    straight = train(eps, TINY, tc, norm, deterministic=True)
    half = train(eps, TINY, tc, norm, deterministic=True, stop_at=3)
    assert half.step == 3
    save_checkpoint(half, tmp_path / "half.ck")
    resumed = train(eps, TINY, tc, norm, deterministic=True, resume=load_checkpoint(tmp_path / "half.ck"))
    assert resumed.step == 6
    assert checkpoint_bytes(resumed) == checkpoint_bytes(straight)


# ----------------------------------------------------------------- checkpoint format


def test_checkpoint_round_trip(tmp_path):
    eps, norm = _episodes()
    ck = train(eps, TINY, TrainConfig(steps=2, horizon=2), norm)
    p = save_checkpoint(ck, tmp_path / "a.ck")
    data = p.read_bytes()
    assert data[:4] == b"MTCK"
    loaded = load_checkpoint(p, TINY)
    assert checkpoint_bytes(loaded) == data
    assert loaded.model_config == TINY and loaded.step == 2
    assert loaded.norm.to_dict() == norm.to_dict()
    model = loaded.build_model()
    for n, t in model.named_parameters():
        assert torch.equal(t.detach(), ck.parameters[n])


def test_checkpoint_errors(tmp_path):
    eps, norm = _episodes()
    data = checkpoint_bytes(train(eps, TINY, TrainConfig(steps=1, horizon=2), norm))
    other = ModelConfig(hidden=16, gnn_layers=1, token_width=16, attention_blocks=1, heads=1, cluster_size=4)
    with pytest.raises(ConfigMismatchError):
        parse_checkpoint_bytes(data, other)
    with pytest.raises(FormatError):
        parse_checkpoint_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        parse_checkpoint_bytes(data[:4] + (9).to_bytes(4, "little") + data[8:])
    with pytest.raises(TruncationError):
        parse_checkpoint_bytes(data[:-10])
    with pytest.raises(FormatError):
        parse_checkpoint_bytes(data + b"\0")
    ck = parse_checkpoint_bytes(data)
    ck.model_config = other
    with pytest.raises(ConfigMismatchError):
        ck.build_model()
