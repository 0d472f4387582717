import numpy as np
import pytest

from skno import blocks
from skno.adjoint import (GradientSet, adjoint_identity_check, backward, grad_check, loss_and_grads,
                          rel_l2_loss_grad, write_grad_check_csv)
from skno.exceptions import UsageError
from skno.model import ArchConfig, SknoModel, forward

SMALL = dict(modes=2, n_p=3, hidden=4)


def batch(seed, n=8, d=1, channels=1, b=2):
    rng = np.random.default_rng(seed)
    shape = (b,) + (n,) * d + (channels,)
    return rng.standard_normal(shape), rng.standard_normal(shape)


def worst(rows):
    return max(r.max_rel_error for r in rows)


class TestBackwardBasics:
    def test_zero_upstream_gives_zero_gradients(self):
        m = SknoModel(ArchConfig(n_layers=2, **SMALL), seed=0)
        a, _ = batch(0)
        out, tape = forward(m, a, record=True)
        grads, ga = backward(m, tape, np.zeros_like(out))
        assert all(not np.any(g) for g in grads.values())
        assert not np.any(ga)

    def test_recovery_gradient_is_outer_product(self):
        m = SknoModel(ArchConfig(n_layers=1, **SMALL), seed=1)
        a, _ = batch(1)
        out, tape = forward(m, a, record=True)
        r = np.random.default_rng(2).standard_normal(out.shape)
        grads, _ = backward(m, tape, r)
        v_last = tape.entries[-1][1]
        np.testing.assert_allclose(grads["recover.chi"],
                                   np.einsum("bxp,bxu->pu", v_last, r), atol=1e-13)

    def test_missing_tape(self):
        m = SknoModel(ArchConfig(**SMALL))
        with pytest.raises(UsageError):
            backward(m, None, np.zeros((1, 8, 1)))

    def test_shape_mismatch(self):
        m = SknoModel(ArchConfig(**SMALL))
        _, tape = forward(m, batch(0)[0], record=True)
        with pytest.raises(UsageError):
            backward(m, tape, np.zeros((1, 8, 1)))

    def test_truncated_modes_get_no_input_gradient(self):
        # K path only: identity activation and no residuals or bias
        arch = ArchConfig(n_layers=1, modes=2, n_p=3, with_bias_b=False, activation="identity",
                          with_linear_residual=False, with_nonlinear_residual=False)
        m = SknoModel(arch, seed=3)
        a, _ = batch(3, n=16)
        out, tape = forward(m, a, record=True)
        _, ga = backward(m, tape, np.random.default_rng(4).standard_normal(out.shape))
        spec = np.fft.rfft(ga[..., 0], axis=1)
        assert np.abs(spec[:, 2:]).max() < 1e-12 * np.abs(spec).max()

    def test_deterministic(self):
        m = SknoModel(ArchConfig(n_layers=2, with_local_propagator=True, **SMALL), seed=5)
        a, u = batch(5)
        l1, g1, _ = loss_and_grads(m, a, u)
        l2, g2, _ = loss_and_grads(m, a, u)
        assert l1 == l2
        assert all(np.array_equal(g1[k], g2[k]) for k in g1)


class TestGradientSet:
    def test_norm_and_scale(self):
        g = GradientSet({"a": np.array([3.0]), "b": np.array([[4.0]])})
        assert g.global_norm() == 5.0
        assert g.scale(2.0).global_norm() == 10.0


class TestLossGrad:
    def test_matches_finite_difference(self):
        rng = np.random.default_rng(0)
        pred, target = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
        loss, g = rel_l2_loss_grad(pred, target)
        eps = 1e-6
        fd = np.zeros_like(pred)
        for i in np.ndindex(pred.shape):
            p, m = pred.copy(), pred.copy()
            p[i] += eps
            m[i] -= eps
            fd[i] = (rel_l2_loss_grad(p, target)[0] - rel_l2_loss_grad(m, target)[0]) / (2 * eps)
        np.testing.assert_allclose(g, fd, atol=1e-8)

    def test_exact_prediction_has_zero_gradient(self):
        t = np.ones((2, 4))
        loss, g = rel_l2_loss_grad(t, t)
        assert loss == 0.0 and not np.any(g)


CONFIGS = {
    "d1_diag": ArchConfig(n_layers=2, **SMALL),
    "d1_full_local": ArchConfig(n_layers=1, a_tilde_form="full", with_local_propagator=True, **SMALL),
    "d2_local_pos": ArchConfig(d=2, n_layers=1, with_local_propagator=True,
                               with_positional_features=True, recover_kind="mlp", **SMALL),
    "mlp_lift_step": ArchConfig(n_layers=1, lift_kind="mlp", recover_kind="step", **SMALL),
    "constant_delta": ArchConfig(n_layers=1, lift_kind="constant", recover_kind="delta", **SMALL),
    "local_only": ArchConfig(n_layers=0, with_local_propagator=True, **SMALL),
    "gelu_tanh_normalised": ArchConfig(n_layers=1, activation="gelu_tanh", in_shift=0.3,
                                       in_scale=2.0, out_scale=0.5, **SMALL),
}


@pytest.mark.parametrize("name", sorted(CONFIGS))
def test_grad_check_configs(name):
    arch = CONFIGS[name]
    m = SknoModel(arch, seed=0)
    a, u = batch(0, n=8 if arch.d == 1 else 6, d=arch.d)
    assert worst(grad_check(m, a, u)) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_seeds(seed):
    m = SknoModel(ArchConfig(n_layers=2, with_local_propagator=True, recover_kind="mlp", **SMALL),
                  seed=seed)
    a, u = batch(seed)
    rows = grad_check(m, a, u)
    assert all(r.passed for r in rows), [(r.tensor, r.max_rel_error) for r in rows if not r.passed]


def test_corrupted_gradient_detected():
    m = SknoModel(ArchConfig(n_layers=1, **SMALL), seed=0)
    a, u = batch(0)
    rows = {r.tensor: r for r in grad_check(m, a, u, corrupt="layer0.a_re")}
    assert not rows["layer0.a_re"].passed
    assert rows["layer0.a_re"].max_rel_error > 1e-6
    assert all(r.passed for k, r in rows.items() if k != "layer0.a_re")


def test_grad_check_with_dropout_masks():
    m = SknoModel(ArchConfig(n_layers=1, lift_kind="mlp_dropout", recover_kind="mlp_dropout", **SMALL),
                  seed=1)
    a, u = batch(1)
    assert worst(grad_check(m, a, u, training=True)) < 1e-6
    assert worst(grad_check(m, a, u, training=False)) < 1e-6


def test_dropout_only_in_training():
    m = SknoModel(ArchConfig(n_layers=1, recover_kind="mlp_dropout", **SMALL), seed=2)
    a, _ = batch(2)
    np.testing.assert_array_equal(forward(m, a), forward(m, a))
    assert not np.array_equal(forward(m, a, training=True), forward(m, a, training=True))


def test_eps_range():
    m = SknoModel(ArchConfig(**SMALL))
    a, u = batch(0)
    with pytest.raises(UsageError):
        grad_check(m, a, u, eps=1e-2)


def test_grad_check_csv(tmp_path):
    m = SknoModel(ArchConfig(**SMALL))
    a, u = batch(0)
    path = write_grad_check_csv(grad_check(m, a, u), tmp_path / "g.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "tensor,analytic_norm,fd_norm,max_rel_error,passed"
    assert len(lines) == 1 + len(m.params)


def test_local_stencil_gradient_is_zero_sum():
    m = SknoModel(ArchConfig(n_layers=0, with_local_propagator=True, **SMALL), seed=0)
    a, u = batch(0)
    _, grads, _ = loss_and_grads(m, a, u)
    np.testing.assert_allclose(grads["local.stencil"].sum(-1), 0.0, atol=1e-14)
    np.testing.assert_allclose(blocks.centered_stencil(grads["local.stencil"]),
                               grads["local.stencil"], atol=1e-15)


@pytest.mark.parametrize("lift, recover", [("linear", "linear"), ("constant", "step"),
                                           ("mlp", "delta")])
def test_adjoint_identity(lift, recover):
    m = SknoModel(ArchConfig(n_p=5, lift_kind=lift, recover_kind=recover), seed=0)
    res = adjoint_identity_check(m, draws=100)
    assert res["passed"] and res["recover_max_rel"] < 1e-12
    if lift == "mlp":
        assert res["lift_max_rel"] is None


def test_adjoint_identity_needs_linear_recovery():
    with pytest.raises(UsageError):
        adjoint_identity_check(SknoModel(ArchConfig(recover_kind="mlp")))
