from dataclasses import replace

import numpy as np
import pytest

import gmtl.trainer as T
from gmtl.analysis import desk_config
from gmtl.data import TEC, Batcher, Example, prepare_tasks, synth_paired_tasks
from gmtl.model import GateKind, TowerState, init_params
from gmtl.numerics import InputError, const
from gmtl.trainer import (AdamState, NumericError, TrainConfig, adam_step, evaluate, joint_adam_step,
                          loss_and_grads, maml_step, paired_indices, train, train_adam_joint, train_maml_like)


def tiny(data, gate="none", **kw):
    return desk_config(data, gate, embed_dim=8, filters=4, hidden=8, **kw)


# --- Adam ---------------------------------------------------------------------------

def test_adam_first_step_is_minus_lr():
    params = {"w": np.array([0.5])}
    state = AdamState.zeros(params)
    adam_step(params, {"w": np.array([1.0])}, state, lr=0.01)
    assert params["w"][0] == pytest.approx(0.5 - 0.01, abs=1e-9)
    assert state.t == 1


def test_adam_matches_reference_formula(rng):
    w = rng.normal(size=4)
    params, state = {"w": w.copy()}, AdamState.zeros({"w": w})
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step(params, {"w": g}, state, lr=0.1, beta1=0.8, beta2=0.95, eps=1e-6)
        m = 0.8 * m + 0.2 * g
        v = 0.95 * v + 0.05 * g * g
        w = w - 0.1 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.95 ** t)) + 1e-6)
    np.testing.assert_allclose(params["w"], w, rtol=1e-13)


def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState.zeros(params)
    for _ in range(10):
        adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
    assert params["w"].tolist() == [1.0, -2.0]


def test_adam_shape_mismatch():
    params = {"w": np.zeros(3)}
    with pytest.raises(InputError):
        adam_step(params, {"w": np.zeros(2)}, AdamState.zeros(params), lr=0.1)


def test_train_config_validation():
    for bad in (dict(lr=0), dict(k=0), dict(beta1=1.0), dict(optimizer="sgd"), dict(inner_lr=-1)):
        with pytest.raises(InputError):
            TrainConfig(**bad)
    assert TrainConfig(lr=0.2).inner_rate == 0.2
    assert TrainConfig(lr=0.2, inner_lr=0.0).inner_rate == 0.0


# --- meta step on a quadratic surrogate --------------------------------------------------

def _quadratic(monkeypatch, seen):
    def fake(theta, batch_p, batch_e, config):
        x = theta["theta"]
        seen.append(float(x[0]))
        return (float(x[0] ** 2), float(x[0] ** 2), 0.0), {"theta": 2 * x}

    monkeypatch.setattr(T, "loss_and_grads", fake)


def test_maml_quadratic_hand_trace(monkeypatch):
    seen = []
    _quadratic(monkeypatch, seen)
    params = {"theta": np.array([1.0])}
    state = AdamState.zeros(params)
    cfg = TrainConfig(optimizer="maml", lr=0.1, k=1)
    maml_step(params, state, None, [None], None, cfg)
    assert seen == [1.0]
    # one inner SGD step would give 0.8; the meta gradient is 2 * theta_0 = 2
    assert state.m["theta"][0] == pytest.approx(0.1 * 2)
    assert 0 < params["theta"][0] < 1
    assert params["theta"][0] == pytest.approx(0.9, abs=1e-7)


def test_maml_inner_steps_use_sgd(monkeypatch):
    seen = []
    _quadratic(monkeypatch, seen)
    params = {"theta": np.array([1.0])}
    maml_step(params, AdamState.zeros(params), None, [None] * 3, None, TrainConfig(optimizer="maml", lr=0.1))
    np.testing.assert_allclose(seen, [1.0, 0.8, 0.64])


def test_maml_zero_gradient_is_fixed_point(monkeypatch):
    monkeypatch.setattr(T, "loss_and_grads", lambda th, *a: ((0.0, 0.0, 0.0), {"theta": np.zeros(1)}))
    params = {"theta": np.array([0.3])}
    state = AdamState.zeros(params)
    for _ in range(20):
        maml_step(params, state, None, [None] * 2, None, TrainConfig(optimizer="maml"))
    assert params["theta"][0] == 0.3


# --- training loops --------------------------------------------------------------------

@pytest.fixture(scope="module")
def coupled():
    pair = synth_paired_tasks(500, vocab_size=200, rho=1.0, seed=1)
    return prepare_tasks(pair.personality, pair.emotion, TEC, seed=0)


def test_adam_joint_decreases_loss(coupled):
    rep = train_adam_joint(tiny(coupled, "sog"), coupled, TrainConfig(epochs=20, seed=0, lr=3e-3))
    losses = [r.loss_total for r in rep.epochs]
    assert len(rep.epochs) == 20 and losses[-1] < losses[0]
    assert np.all(np.isfinite(losses))
    assert all(r.seconds >= 0 for r in rep.epochs)


def test_maml_like_runs_and_is_deterministic(small_data):
    cfg, tc = tiny(small_data, "silg"), TrainConfig(optimizer="maml", epochs=2, k=2, seed=3, batch_p=16, batch_e=16)
    a, b = train_maml_like(cfg, small_data, tc), train_maml_like(cfg, small_data, tc)
    assert a.to_csv() == b.to_csv()
    # one epoch = one pass over the emotion batches
    assert len(a.epochs) == 2


def test_trainer_entry_points_check_optimizer(small_data):
    with pytest.raises(InputError):
        train_adam_joint(tiny(small_data), small_data, TrainConfig(optimizer="maml"))
    with pytest.raises(InputError):
        train_maml_like(tiny(small_data), small_data, TrainConfig(optimizer="adam"))


def test_empty_dataset_rejected(small_data):
    empty = replace(small_data, p=replace(small_data.p, train=[]))
    with pytest.raises(InputError):
        train(tiny(small_data), empty, TrainConfig(epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_guard(small_data):
    cfg = tiny(small_data)
    params = init_params(cfg, 0)
    params["p.out.b"][0] = np.nan
    with pytest.raises(NumericError):
        train(cfg, small_data, TrainConfig(epochs=1), params=params)


@pytest.mark.parametrize("gate", ["none", "sig", "cag", "silg", "sog"])
def test_tiny_step_descends(small_data, gate):
    cfg = tiny(small_data, gate)
    params = init_params(cfg, 2)
    bp = next(Batcher(small_data.p.train, 16, 0, min_len=cfg.min_len).epoch())
    be = next(Batcher(small_data.e.train, 16, 0, min_len=cfg.min_len).epoch())
    (before, _, _), grads = loss_and_grads(params, bp, be, cfg)
    old = {k: v.copy() for k, v in params.items()}
    joint_adam_step(params, AdamState.zeros(params), bp, be, cfg, TrainConfig(lr=1e-6))
    (after, _, _), _ = loss_and_grads(params, bp, be, cfg)
    predicted = sum(float(np.sum(grads[k] * (params[k] - old[k]))) for k in params)
    assert after - before < 0
    assert after - before == pytest.approx(predicted, rel=1e-2)


def test_run_report_outputs(small_data):
    rep = train(tiny(small_data, "sog"), small_data, TrainConfig(epochs=2, seed=1, batch_p=16, batch_e=16))
    rows = rep.to_csv().splitlines()
    assert len(rows) == 3 and rows[0].startswith("epoch,loss_total,loss_p,loss_e,p_accuracy")
    assert "seconds" not in rows[0]
    assert rep.timings_csv().splitlines()[0] == "epoch,seconds"
    assert "gate = sog" in rep.summary() and "p_f1 = " in rep.summary()


# --- evaluation -------------------------------------------------------------------------

def _stub_forward(p_logits, e_logits):
    def fake(params, tp, te, config):
        def state(z):
            n = const(z)
            return TowerState([], [], n, n, n, n, n)
        return state(p_logits(tp)), state(e_logits(te))
    return fake


def _encoded_examples(rng, n, m):
    # the first token carries the gold label so a stub can read it back
    ex_p, ex_e = [], []
    for _ in range(n):
        bits = tuple(int(b) for b in rng.integers(0, 2, 5))
        code = int("".join(map(str, bits)), 2)
        ex_p.append(Example([code + 2, 1, 1], "", bits))
        ex_e.append(Example([int(rng.integers(m)) + 2, 1, 1], "", None))
        ex_e[-1].label = ex_e[-1].tokens[0] - 2
    return ex_p, ex_e


def test_evaluate_perfect_stub(monkeypatch, small_data, rng):
    ex_p, ex_e = _encoded_examples(rng, 37, 6)

    def p_logits(tp):
        codes = tp[:, 0] - 2
        bits = (codes[:, None] >> np.arange(4, -1, -1)) & 1
        return np.where(bits == 1, 3.0, -3.0)

    monkeypatch.setattr(T, "mtl_forward", _stub_forward(p_logits, lambda te: np.eye(6)[te[:, 0] - 2] * 5))
    rep = evaluate(None, tiny(small_data), ex_p, ex_e[:29], seed=0, batch_size=8)
    assert rep.emotion_accuracy == 1.0
    m = rep.personality
    assert m.accuracy == m.precision == m.recall == m.f1 == 1.0


def test_evaluate_random_stub_near_chance(monkeypatch, small_data, rng):
    m = 50
    n = 4000
    ex_p, ex_e = _encoded_examples(rng, n, m)
    noise = np.random.default_rng(1)
    monkeypatch.setattr(T, "mtl_forward", _stub_forward(lambda tp: noise.normal(size=(len(tp), 5)),
                                                       lambda te: noise.normal(size=(len(te), m))))
    cfg = replace(tiny(small_data), n_emotions=m)
    acc = evaluate(None, cfg, ex_p, ex_e, seed=0).emotion_accuracy
    sigma = np.sqrt((1 / m) * (1 - 1 / m) / n)
    assert abs(acc - 1 / m) < 3 * sigma


def test_evaluate_twice_identical(small_data):
    cfg = tiny(small_data, "cag")
    params = init_params(cfg, 0)
    a = evaluate(params, cfg, small_data.p.test, small_data.e.test, seed=4)
    b = evaluate(params, cfg, small_data.p.test, small_data.e.test, seed=4)
    assert a.to_kv() == b.to_kv()


def test_paired_indices_cover_both_sets():
    ip, ie = paired_indices(7, 3, seed=0)
    assert len(ip) == len(ie) == 7
    assert sorted(ip) == list(range(7)) and set(ie) == {0, 1, 2}
    same_p, same_e = paired_indices(5, 5, seed=2)
    assert np.array_equal(same_p, same_e)
