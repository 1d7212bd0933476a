import numpy as np
import pytest

from sparse_amt import model as M
from sparse_amt import trainer as T
from sparse_amt.exceptions import ContractViolation, InputError
from sparse_amt.tokenizer import BOS_ID, EOS_ID, decode, detokenize, tokenize

TASK = T.SyntheticTask(n_frames=20, max_notes=2)
TOY = M.ModelConfig(n_input=24, d_model=16, heads=2, d_ff=32, enc_layers=1, dec_layers=2,
                    window=4, dropout=0.0, pooling=(2, 1), max_output_len=64)


def scalar(x):
    return {"w": np.array([x], dtype=np.float64)}


# optimizer


def test_zero_grads_no_decay():
    p = scalar(1.5)
    st = T.AdamWState.zeros_like(p)
    T.adamw_step(p, scalar(0.0), st, lr=0.1, weight_decay=0.0)
    assert p["w"][0] == 1.5 and st.m["w"][0] == 0 and st.v["w"][0] == 0 and st.step == 1


def test_zero_grads_decay_only():
    p = scalar(2.0)
    st = T.AdamWState.zeros_like(p)
    T.adamw_step(p, scalar(0.0), st, lr=0.1, weight_decay=0.01)
    assert p["w"][0] == 2.0 * (1 - 0.1 * 0.01)


@pytest.mark.parametrize("wd", [0.0, 0.01])
def test_two_step_hand_trace(wd):
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p = scalar(1.0)
    st = T.AdamWState.zeros_like(p)
    # step 1: m = 0.1, v = 0.001; bias-corrected both are exactly 1
    # step 2: m = 0.19, v = 0.001999; bias-corrected both are again 1
    expect = 1.0
    for _ in range(2):
        T.adamw_step(p, scalar(1.0), st, lr, wd, b1, b2, eps)
        expect = expect * (1 - lr * wd) - lr * 1.0 / (1.0 + eps)
    assert abs(p["w"][0] - expect) <= 1e-12
    assert abs(st.m["w"][0] - 0.19) <= 1e-12 and abs(st.v["w"][0] - 0.001999) <= 1e-12


def test_nonfinite_grad_names_parameter():
    p = {"a": np.zeros(2), "b": np.zeros(2)}
    st = T.AdamWState.zeros_like(p)
    with pytest.raises(ContractViolation, match="'b'"):
        T.adamw_step(p, {"a": np.zeros(2), "b": np.array([0.0, np.nan])}, st, 0.1)


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert T.clip_grad_norm(g, 1.0) == 5.0
    assert np.isclose(np.sqrt(g["a"] ** 2 + g["b"] ** 2), 1.0)
    g = {"a": np.array([0.3])}
    T.clip_grad_norm(g, 1.0)
    assert g["a"][0] == 0.3


def test_state_roundtrip_through_checkpoint(tmp_path):
    params = M.init_params(TOY, dtype=np.float32)
    st = T.AdamWState.zeros_like(params)
    rng = np.random.default_rng(0)
    for _ in range(3):
        grads = {k: rng.standard_normal(v.shape).astype(np.float32) for k, v in params.items()}
        T.adamw_step(params, grads, st, 1e-3)
    M.save_checkpoint(tmp_path / "c", TOY, params, extra=st.to_arrays())
    _, params2, extra = M.load_checkpoint(tmp_path / "c")
    st2 = T.AdamWState.from_arrays(extra)
    assert st2.step == 3
    for k in params:
        assert np.array_equal(st.m[k], st2.m[k]) and np.array_equal(st.v[k], st2.v[k])
        assert np.array_equal(params[k], params2[k])


# synthetic data


def test_batch_is_reproducible():
    a = T.generate_synthetic_batch(TASK, 4, 7)
    b = T.generate_synthetic_batch(TASK, 4, 7)
    for (fa, ia, na), (fb, ib, nb) in zip(a, b):
        assert np.array_equal(fa, fb) and ia == ib and na == nb
    c = T.generate_synthetic_batch(TASK, 4, 8)
    assert any(not np.array_equal(x[0], y[0]) for x, y in zip(a, c))


def test_zero_notes_give_empty_targets():
    task = T.SyntheticTask(min_notes=0, max_notes=0)
    for feats, ids, notes in T.generate_synthetic_batch(task, 3, 0):
        assert ids == [BOS_ID, EOS_ID] and notes == []
        assert feats.shape == (task.n_frames, task.n_input)


def test_targets_match_notes_and_features():
    for feats, ids, notes in T.generate_synthetic_batch(TASK, 16, 1):
        assert decode(ids) == tokenize(notes, TASK.hop)
        assert detokenize(ids, TASK.hop) == notes
        for n in notes:
            c = n.pitch - TASK.pitch_lo
            on = round(n.onset / TASK.hop)
            # onset flag and activity are visible above the noise
            assert feats[on, TASK.n_pitches + c] > 0.5 * TASK.gain
            assert feats[on, c] > 0.4 * TASK.gain


def test_task_validation():
    with pytest.raises(InputError):
        T.SyntheticTask(n_input=10)
    with pytest.raises(InputError):
        T.SyntheticTask(min_notes=3, max_notes=2)
    with pytest.raises(InputError):
        T.SyntheticTask(gain=0.0)


# training loop


def quick(**kw):
    base = dict(model=TOY, task=TASK, lr=3e-3, batch_size=2, steps=3, seed=0, log_every=0)
    base.update(kw)
    return T.TrainConfig(**base)


def test_zero_steps_saves_initialization(tmp_path):
    T.train(quick(steps=0), checkpoint=tmp_path / "c", loss_log=tmp_path / "l.csv")
    _, params, extra = M.load_checkpoint(tmp_path / "c")
    init = M.init_params(TOY, seed=0, dtype=np.float32)
    assert all(np.array_equal(params[k], init[k]) for k in init)
    assert extra["adamw.step"][0] == 0
    assert (tmp_path / "l.csv").read_text() == "step,loss\n"


def test_zero_lr_gives_constant_loss():
    fixed = T.generate_synthetic_batch(TASK, 2, 3)
    _, _, losses = T.train(quick(lr=0.0, weight_decay=0.0, steps=4), data=lambda s: fixed)
    assert len(set(losses)) == 1


def test_seed_determinism(tmp_path):
    T.train(quick(), loss_log=tmp_path / "a.csv")
    T.train(quick(), loss_log=tmp_path / "b.csv")
    a = (tmp_path / "a.csv").read_text()
    assert a == (tmp_path / "b.csv").read_text()
    assert a.splitlines()[0] == "step,loss" and len(a.splitlines()) == 4


def test_dropout_runs_are_reproducible():
    cfg = quick(model=TOY.replace(dropout=0.2))
    assert T.train(cfg)[2] == T.train(cfg)[2]


def test_resume_matches_uninterrupted():
    full = T.train(quick(steps=4))[2]
    params, state, first = T.train(quick(steps=2))
    data = lambda s: T.generate_synthetic_batch(TASK, 2, (0, s + 2))  # noqa: E731
    _, _, rest = T.train(quick(steps=2), params=params, state=state, data=data)
    assert first + rest == full


def test_load_train_config():
    cfg = T.load_train_config("lr=0.01\nsteps=5\nmodel.d_model=16\nmodel.heads=2\n"
                              "model.enc_layers=1\nmodel.dec_layers=2\nmodel.pooling=2,1\n"
                              "task.max_notes=2\ntask.gain=3.0\n")
    assert cfg.lr == 0.01 and cfg.steps == 5 and cfg.model.d_model == 16
    assert cfg.model.n_input == cfg.task.n_input and cfg.task.gain == 3.0
    with pytest.raises(InputError):
        T.load_train_config("nonsense=1\n")


def test_overfits_one_batch():
    fixed = [(f, i) for f, i, _ in T.generate_synthetic_batch(TASK, 4, 11)]
    cfg = M.variant_config("V5", TOY.replace(d_model=32, d_ff=64))
    params = M.init_params(cfg, seed=0)
    state = T.AdamWState.zeros_like(params)
    loss = None
    for _ in range(3000):
        loss, grads = M.forward_backward(fixed, cfg, params)
        if loss < 0.05:
            break
        T.clip_grad_norm(grads, 1.0)
        T.adamw_step(params, grads, state, 3e-3)
    assert loss < 0.05
