import numpy as np
import pytest

from thermoflow import tensor as T
from thermoflow.errors import ConfigError, ContractError, DimensionError
from thermoflow.interpolant import (
    COSINE,
    LINEAR,
    SCHEDULES,
    SamplerConfig,
    flow_matching_loss,
    forward_process,
    get_schedule,
    guided_velocity,
    sample,
    velocity_target,
)
from thermoflow.style import StyleBank


class StubModel:
    """Velocity model stand-in: applies a fixed function of (z, t)."""

    def __init__(self, fn, styles=("a", "b")):
        self.fn = fn
        self.bank = StyleBank(styles, dim=4, rng=np.random.default_rng(0))

    def forward_styled(self, z_t, t, z_rgb, style_indices):
        z_t = np.asarray(z_t, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        return T.Tensor(self.fn(z_t, t, np.asarray(style_indices)))


class TestScheduleContracts:
    @pytest.mark.parametrize("name", sorted(SCHEDULES))
    def test_endpoint_and_monotonicity(self, name):
        s = get_schedule(name)
        grid = np.linspace(0.0, 1.0, 1001)
        alphas = np.array([s.alpha(t) for t in grid])
        sigmas = np.array([s.sigma(t) for t in grid])
        assert alphas[0] == 1.0 and abs(alphas[-1]) < 1e-15
        assert abs(sigmas[0]) < 1e-15 and sigmas[-1] == 1.0
        assert np.all(np.diff(alphas) <= 0)
        assert np.all(np.diff(sigmas) >= 0)

    @pytest.mark.parametrize("name", sorted(SCHEDULES))
    def test_derivatives_match_finite_differences(self, name):
        s = get_schedule(name)
        h = 1e-6
        for t in np.linspace(0.01, 0.99, 25):
            fd_a = (s.alpha(t + h) - s.alpha(t - h)) / (2 * h)
            fd_s = (s.sigma(t + h) - s.sigma(t - h)) / (2 * h)
            assert abs(fd_a - s.alpha_dot(t)) < 1e-6
            assert abs(fd_s - s.sigma_dot(t)) < 1e-6

    def test_unknown_schedule(self):
        with pytest.raises(ConfigError):
            get_schedule("nope")


class TestForwardProcess:
    def test_endpoints_bitwise(self):
        rng = np.random.default_rng(0)
        z0 = rng.normal(size=(4, 4, 2))
        eps = rng.normal(size=(4, 4, 2))
        for sched in (LINEAR, COSINE):
            assert np.array_equal(forward_process(z0, eps, 0.0, sched), z0)
            assert np.array_equal(forward_process(z0, eps, 1.0, sched), eps)

    def test_linear_midpoint(self):
        out = forward_process(np.array([2.0]), np.array([0.0]), 0.5, LINEAR)
        assert np.array_equal(out, [1.0])

    def test_t_domain_checked(self):
        z = np.zeros(3)
        with pytest.raises(ContractError):
            forward_process(z, z, 1.5, LINEAR)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            forward_process(np.zeros(3), np.zeros(4), 0.5, LINEAR)


class TestVelocityTarget:
    def test_linear_is_eps_minus_z0(self):
        rng = np.random.default_rng(1)
        z0 = rng.normal(size=(8,))
        eps = rng.normal(size=(8,))
        for t in (0.0, 0.3, 1.0):
            assert np.allclose(velocity_target(z0, eps, t, LINEAR), eps - z0, atol=1e-15)

    def test_equal_endpoints_linearity(self):
        c = 1.7
        z = np.full(5, c)
        out = velocity_target(z, z, 0.4, COSINE)
        expect = (COSINE.alpha_dot(0.4) + COSINE.sigma_dot(0.4)) * c
        assert np.allclose(out, expect, atol=1e-14)

    def test_cosine_at_zero(self):
        # alpha_dot(0) = 0 and sigma_dot(0) = pi/2 for the quarter-period pair.
        eps = np.array([2.0, -1.0])
        out = velocity_target(np.array([5.0, 5.0]), eps, 0.0, COSINE)
        assert np.allclose(out, (np.pi / 2) * eps, atol=1e-14)

    def test_matches_path_derivative(self):
        # d/dt forward_process == velocity_target for fixed (z0, eps).
        rng = np.random.default_rng(2)
        h = 1e-6
        for sched in (LINEAR, COSINE):
            for _ in range(100):
                z0 = rng.normal(size=(3,))
                eps = rng.normal(size=(3,))
                t = rng.uniform(0.05, 0.95)
                fd = (forward_process(z0, eps, t + h, sched)
                      - forward_process(z0, eps, t - h, sched)) / (2 * h)
                assert np.max(np.abs(fd - velocity_target(z0, eps, t, sched))) < 1e-5


class TestFlowMatchingLoss:
    def test_perfect_predictor_gives_zero(self):
        sched = LINEAR

        class Perfect:
            def __init__(self, z0, eps_store):
                self.bank = StyleBank(["a"], dim=4, dropout_prob=0.0,
                                      rng=np.random.default_rng(0))
                self.z0 = z0

            def forward_styled(self, z_t, t, z_rgb, idx):
                # Recover eps from z_t = (1-t) z0 + t eps, then emit eps - z0.
                tt = np.asarray(t).reshape(-1, 1, 1, 1)
                eps = np.where(tt > 0, (z_t - (1 - tt) * self.z0) / np.maximum(tt, 1e-12), 0.0)
                target = np.where(tt > 0, eps - self.z0, 0.0)
                return T.Tensor(target)

        rng = np.random.default_rng(3)
        z0 = rng.normal(size=(2, 2, 2, 1))
        model = Perfect(z0, None)
        batch = {"z0": z0, "z_rgb": np.zeros_like(z0), "style_ids": ["a", "a"]}
        loss = flow_matching_loss(model, batch, np.random.default_rng(5), sched)
        assert loss.item() < 1e-18

    def test_zero_model_hand_value(self):
        # Zero prediction, linear path: loss = mean((eps - z0)^2) regardless of t.
        model = StubModel(lambda z, t, i: np.zeros_like(z), styles=("a",))
        model.bank.dropout_prob = 0.0
        z0 = np.array([[[[1.0]], [[0.0]]]]).reshape(1, 2, 1, 1)
        batch = {"z0": z0, "z_rgb": np.zeros_like(z0), "style_ids": ["a"]}

        class FixedRng:
            def uniform(self, lo=0.0, hi=1.0, size=None):
                return np.full(size, 0.5) if size else 0.5

            def standard_normal(self, shape):
                return np.array([0.0, 1.0]).reshape(shape)

        loss = flow_matching_loss(model, batch, FixedRng(), LINEAR)
        # target = eps - z0 = [-1, 1]; mean of squares = 1.0
        assert loss.item() == pytest.approx(1.0, abs=1e-15)

    def test_loss_non_negative(self):
        rng = np.random.default_rng(6)
        model = StubModel(lambda z, t, i: rng.normal(size=z.shape))
        z0 = rng.normal(size=(3, 2, 2, 1))
        batch = {"z0": z0, "z_rgb": np.zeros_like(z0), "style_ids": ["a", "b", "a"]}
        for k in range(5):
            loss = flow_matching_loss(model, batch, np.random.default_rng(k), LINEAR)
            assert loss.item() >= 0.0


class TestGuidedVelocity:
    @staticmethod
    def _model():
        # Conditional rows emit 3, the unconditional slot emits 1.
        def fn(z, t, idx):
            vals = np.where(idx == 0, 1.0, 3.0)
            return np.broadcast_to(vals.reshape(-1, *([1] * (z.ndim - 1))), z.shape).copy()

        return StubModel(fn)

    def test_scale_one_is_conditional_bitwise(self):
        model = self._model()
        z = np.ones((1, 2, 2, 1))
        v = guided_velocity(model, z, 0.5, z, "a", 1.0)
        v_cond = model.forward_styled(z, np.array([0.5]), z, [model.bank.index_of("a")]).data
        assert np.array_equal(v, v_cond)

    def test_scale_zero_is_unconditional_bitwise(self):
        model = self._model()
        z = np.ones((1, 2, 2, 1))
        v = guided_velocity(model, z, 0.5, z, "a", 0.0)
        v_un = model.forward_styled(z, np.array([0.5]), z, [0]).data
        assert np.array_equal(v, v_un)

    def test_extrapolation_arithmetic(self):
        model = self._model()
        z = np.ones((1, 1, 1, 1))
        v = guided_velocity(model, z, 0.5, z, "a", 2.0)
        # v_un + s (v_cond - v_un) = 1 + 2 (3 - 1) = 5
        assert np.array_equal(v, np.full_like(z, 5.0))

    def test_unknown_style(self):
        from thermoflow.errors import StyleLookupError

        with pytest.raises(StyleLookupError):
            guided_velocity(self._model(), np.ones((1, 1, 1, 1)), 0.5,
                            np.ones((1, 1, 1, 1)), "zzz", 1.0)


class TestSampler:
    def test_zero_velocity_returns_eps(self):
        model = StubModel(lambda z, t, i: np.zeros_like(z))
        eps = np.random.default_rng(7).normal(size=(1, 2, 2, 1))
        for steps in (1, 7, 50):
            out = sample(model, eps, eps, "a", SamplerConfig(steps=steps))
            assert np.array_equal(out, eps)

    def test_constant_velocity_telescopes(self):
        c = 0.75
        model = StubModel(lambda z, t, i: np.full_like(z, c))
        eps = np.random.default_rng(8).normal(size=(1, 2, 2, 1))
        out = sample(model, eps, eps, "a", SamplerConfig(steps=13))
        # sum of dt over the grid is exactly -1, so z = eps - c.
        assert np.allclose(out, eps - c, atol=1e-12)

    def test_one_euler_step_recovers_z0_on_linear_path(self):
        rng = np.random.default_rng(9)
        z0 = rng.normal(size=(1, 4, 4, 2))
        eps = rng.normal(size=(1, 4, 4, 2))
        model = StubModel(lambda z, t, i: eps - z0)
        out = sample(model, eps, np.zeros_like(eps), "a", SamplerConfig(steps=1))
        assert np.max(np.abs(out - z0)) < 1e-10

    def test_convergence_orders(self):
        # dz/dt = -2 t z has solution z(0) = e * z(1); Euler is O(1/T),
        # Heun O(1/T^2). Check the log-log slopes of the global error.
        model = StubModel(lambda z, t, i: -2.0 * t.reshape(-1, 1, 1, 1) * z)
        eps = np.full((1, 1, 1, 1), 1.0)
        exact = np.e
        slopes = {}
        for integ in ("euler", "heun"):
            ts = np.array([8, 16, 32, 64, 128])
            errs = []
            for steps in ts:
                out = sample(model, eps, eps, "a",
                             SamplerConfig(steps=int(steps), integrator=integ))
                errs.append(abs(out.reshape(-1)[0] - exact))
            slope = np.polyfit(np.log(ts), np.log(errs), 1)[0]
            slopes[integ] = slope
        assert abs(slopes["euler"] - (-1.0)) < 0.3
        assert abs(slopes["heun"] - (-2.0)) < 0.3

    def test_bad_time_grid_rejected(self):
        with pytest.raises(ConfigError):
            SamplerConfig(steps=2, time_grid=(1.0, 0.7, 0.8, 0.0))
        with pytest.raises(ConfigError):
            SamplerConfig(steps=2, time_grid=(0.9, 0.5, 0.0))
        with pytest.raises(ConfigError):
            SamplerConfig(steps=0)
