import numpy as np
import pytest

from rolls.autodiff import Parameter
from rolls.optim import AdamW, CheckpointError, adamw_step, load_checkpoint, save_checkpoint


def test_zero_gradient_no_decay_is_noop():
    p = Parameter([1.0, -2.0], "p")
    adamw_step([p], [np.zeros(2)], lr=4e-4)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_decay_only_closed_form():
    p = Parameter([1.0], "p")
    adamw_step([p], [np.zeros(1)], lr=4e-4, weight_decay=0.01)
    assert abs(p.data[0] - 0.999996) < 1e-12


def test_first_step_closed_form():
    p = Parameter([1.0], "p")
    adamw_step([p], [np.ones(1)], lr=4e-4)
    # m_hat = g and v_hat = g^2 after bias correction
    assert abs(p.data[0] - (1 - 4e-4 / (1 + 1e-8))) < 1e-12
    assert abs(p.data[0] - 0.999600000004) < 1e-12


def test_first_step_moves_against_gradient(rng):
    g = rng.normal(size=10)
    p = Parameter(np.zeros(10), "p")
    adamw_step([p], [g], lr=1e-3)
    assert np.all(np.sign(p.data) == -np.sign(g))


def test_nonfinite_gradient_names_parameter():
    p, q = Parameter([1.0], "ok"), Parameter([1.0], "bad")
    with pytest.raises(FloatingPointError, match="bad"):
        adamw_step([p, q], [np.zeros(1), np.array([np.nan])], lr=1e-3)
    assert p.data[0] == 1.0 and p.step == 0


def test_optimizer_class_uses_param_grads():
    p = Parameter([1.0], "p")
    opt = AdamW([p], lr=4e-4, weight_decay=0.0)
    p.grad[:] = 1.0
    opt.step()
    assert abs(p.data[0] - 0.999600000004) < 1e-12
    opt.zero_grad()
    assert p.grad[0] == 0.0
    with pytest.raises(ValueError):
        AdamW([p], lr=0.0)


def _run(seed, steps=5):
    rng = np.random.default_rng(seed)
    params = [Parameter(rng.normal(size=(3, 4)), "w"), Parameter(rng.normal(size=4), "b")]
    for _ in range(steps):
        adamw_step(params, [rng.normal(size=p.shape) for p in params], 1e-2, weight_decay=0.01)
    return params


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    params = _run(3)
    save_checkpoint(tmp_path / "a.bin", params, {"k": 1}, extra={"note": "x"})
    loaded, config, extra = load_checkpoint(tmp_path / "a.bin")
    assert config == {"k": 1} and extra == {"note": "x"}
    for a, b in zip(params, loaded):
        assert a.name == b.name and a.step == b.step
        for f in ("data", "m", "v"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    save_checkpoint(tmp_path / "b.bin", loaded, {"k": 1}, extra={"note": "x"})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_seeded_runs_give_identical_checkpoints(tmp_path):
    save_checkpoint(tmp_path / "1.bin", _run(9))
    save_checkpoint(tmp_path / "2.bin", _run(9))
    assert (tmp_path / "1.bin").read_bytes() == (tmp_path / "2.bin").read_bytes()


def test_checkpoint_without_moments(tmp_path):
    save_checkpoint(tmp_path / "c.bin", _run(1), with_moments=False)
    loaded, _, _ = load_checkpoint(tmp_path / "c.bin")
    assert loaded[0].step == 0 and not loaded[0].m.any()


@pytest.mark.parametrize("payload, fragment", [
    (b"ROL", "truncated"),
    (b"NOPE" + b"\0" * 20, "magic"),
    (b"ROLL" + (9).to_bytes(4, "little") + b"\0" * 16, "version 9"),
])
def test_checkpoint_errors(tmp_path, payload, fragment):
    (tmp_path / "x.bin").write_bytes(payload)
    with pytest.raises(CheckpointError, match=fragment):
        load_checkpoint(tmp_path / "x.bin")
