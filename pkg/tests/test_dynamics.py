import math

import numpy as np
import pytest

from kklobs.dynamics import (
    InputSignal,
    IntegrationError,
    add_noise,
    get_system,
    integrate,
    integrate_ode,
    sample_initial_condition,
    sample_input,
    system_names,
    write_trajectory_csv,
)
from kklobs import rng as rngmod

ZERO = InputSignal("zero")


class TestSystems:
    def test_registry(self):
        assert set(system_names()) >= {"duffing", "vdp", "rossler", "fhn", "linear"}

    def test_duffing_equilibrium(self):
        s = get_system("duffing")
        assert np.all(s.drift(np.zeros(2), np.zeros(1)) == 0.0)

    def test_duffing_at_unit(self):
        s = get_system("duffing")
        np.testing.assert_allclose(s.drift(np.array([1.0, 0.0]), np.zeros(1)), [0.0, -2.0])

    def test_rossler_at_origin(self):
        s = get_system("rossler")
        np.testing.assert_allclose(s.drift(np.zeros(3), np.zeros(1)), [0.0, 0.0, 0.1])

    def test_vdp_drift(self):
        s = get_system("vdp")
        np.testing.assert_allclose(s.drift(np.array([0.5, 2.0]), np.array([0.3])),
                                   [2.0, (1 - 0.25) * 2.0 - 0.5 + 0.3])

    def test_fhn_drift(self):
        s = get_system("fhn")
        x = np.array([0.2, -0.1])
        np.testing.assert_allclose(
            s.drift(x, np.array([0.5])),
            [10 * (0.2 - 0.2 ** 3 + 0.1) + 0.5, 1.5 * 0.2 + 0.1 + 0.8])

    def test_output_maps(self):
        x2 = np.array([1.5, -2.0])
        assert get_system("duffing").output(x2)[0] == 1.5
        assert get_system("vdp").output(x2)[0] == 1.5
        assert get_system("fhn").output(x2)[0] == 1.5
        assert get_system("rossler").output(np.array([1.0, 2.0, 3.0]))[0] == 2.0

    def test_drift_finite_on_inflated_box(self):
        # SystemSpec domain check: finite on the IC box inflated 3x
        r = np.random.default_rng(0)
        for name in system_names():
            s = get_system(name)
            lo = 3 * np.array([b[0] for b in s.x0_box])
            hi = 3 * np.array([b[1] for b in s.x0_box])
            xs = r.uniform(lo, hi, size=(256, s.n_x))
            us = r.uniform(-1, 1, size=(256, s.n_u))
            assert np.all(np.isfinite(s.drift(xs, us)))
            assert np.all(np.isfinite(s.output(xs)))


class TestInputSignals:
    def test_zero_is_bitwise_zero(self):
        sig = InputSignal("zero")
        t = np.linspace(0, 100, 777)
        assert np.all(sig.values(t) == 0.0)

    def test_constant_range_reproducible(self):
        a = sample_input("constant", rngmod.derive(5, "sig", 0))
        b = sample_input("constant", rngmod.derive(5, "sig", 0))
        assert a.offset == b.offset
        assert -1.0 <= a.offset <= 1.0
        assert a.amplitude == 0.0

    def test_square_levels(self):
        sig = InputSignal("square", amplitude=1.0, frequency=2.0, phase=0.3, offset=0.0)
        t = np.linspace(0, 20, 500)
        vals = sig.values(t)[:, 0]
        want = np.where(np.sin(2.0 * t + 0.3) >= 0, 1.0, -1.0)
        assert np.array_equal(vals, want)

    def test_sampled_parameter_ranges(self):
        for kind in ("sinusoid", "square"):
            for i in range(20):
                sig = sample_input(kind, rngmod.derive(1, "s", i))
                assert 0.2 <= sig.amplitude <= 1.0
                assert 0.2 <= sig.frequency <= 2.0
                assert 0.0 <= sig.phase < 2 * math.pi

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            sample_input("triangle", rngmod.derive(0, "x"))


class TestIntegrate:
    def test_linear_closed_form(self):
        tr = integrate(get_system("linear"), np.array([1.0]), ZERO, 1.0, 0.05)
        assert abs(tr.states[-1, 0] - math.exp(-1.0)) <= 1e-8

    def test_dense_output_interior_accuracy(self):
        tr = integrate(get_system("linear"), np.array([1.0]), ZERO, 2.0, 0.05)
        assert np.abs(tr.states[:, 0] - np.exp(-tr.times)).max() <= 1e-8

    def test_duffing_hamiltonian_drift(self):
        tr = integrate(get_system("duffing"), np.array([1.0, 0.0]), ZERO, 50.0, 0.05)
        x1, x2 = tr.states[:, 0], tr.states[:, 1]
        H = x2 ** 2 / 2 + x1 ** 2 / 2 + x1 ** 4 / 4
        assert np.abs(H - H[0]).max() < 1e-6

    def test_rk4_vs_rk45_vdp(self):
        # frozen from the cross-method oracle: observed max error 1.7e-4
        spec = get_system("vdp")
        x0 = np.array([1.0, 0.0])
        ref = integrate(spec, x0, ZERO, 50.0, 0.05)
        rk4 = integrate(spec, x0, ZERO, 50.0, 0.05, method="rk4")
        assert np.abs(rk4.states - ref.states).max() <= 2.5e-4

    def test_rk4_order_of_convergence_duffing(self):
        spec = get_system("duffing")
        x0 = np.array([1.0, 0.0])
        ref = integrate(spec, x0, ZERO, 50.0, 0.05, rtol=1e-11, atol=1e-11)
        e = []
        for sub in (1, 2):
            rk = integrate(spec, x0, ZERO, 50.0, 0.05, method="rk4", rk4_substeps=sub)
            e.append(np.abs(rk.states - ref.states).max())
        assert 8.0 <= e[0] / e[1] <= 32.0

    def test_grid_must_divide_horizon(self):
        with pytest.raises(ValueError):
            integrate(get_system("linear"), np.array([1.0]), ZERO, 1.03, 0.05)

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_escape_detected(self):
        # finite-time blow-up: dx/dt = x^2 escapes at t = 1
        from kklobs.dynamics import SystemSpec

        blow = SystemSpec("blowup", 1, 1, 1,
                          lambda x, u: x * x, lambda x: x[..., 0:1], ((0.9, 1.1),))
        with pytest.raises(IntegrationError):
            integrate(blow, np.array([1.0]), ZERO, 2.0, 0.05)
        with pytest.raises(IntegrationError):
            integrate(blow, np.array([1.0]), ZERO, 2.0, 0.05, method="rk4")

    def test_trajectory_determinism(self):
        spec = get_system("duffing")
        sig = sample_input("sinusoid", rngmod.derive(3, "sig", 1))
        a = integrate(spec, np.array([0.3, -0.2]), sig, 10.0, 0.05)
        b = integrate(spec, np.array([0.3, -0.2]), sig, 10.0, 0.05)
        assert a.states.tobytes() == b.states.tobytes()

    def test_forward_completeness_of_training_boxes(self):
        # every benchmark system stays finite over the horizon from its box
        for name in ("duffing", "vdp", "rossler", "fhn"):
            spec = get_system(name)
            for i in range(3):
                r = rngmod.derive(11, "fc", name, i)
                x0 = sample_initial_condition(spec, r)
                sig = sample_input(("constant", "sinusoid", "square")[i], r)
                tr = integrate(spec, x0, sig, 50.0, 0.05)
                assert np.all(np.isfinite(tr.states))

    def test_integrate_ode_matches_integrate(self):
        spec = get_system("duffing")
        times = np.arange(0, 101) * 0.05
        f = lambda t, y: spec.drift(y, np.zeros(1))
        ys = integrate_ode(f, times, np.array([1.0, 0.0]))
        tr = integrate(spec, np.array([1.0, 0.0]), ZERO, 5.0, 0.05)
        assert np.abs(ys - tr.states).max() < 1e-12


class TestNoise:
    def test_zero_variance_identity(self):
        tr = integrate(get_system("duffing"), np.array([0.5, 0.1]), ZERO, 5.0, 0.05)
        out = add_noise(tr, 0.0, rngmod.derive(0, "n"))
        assert out is tr

    def test_measurement_noise_variance(self):
        tr = integrate(get_system("duffing"), np.array([0.5, 0.1]), ZERO, 50.0, 0.05)
        rng = rngmod.derive(42, "noise")
        noisy = add_noise(tr, 0.01, rng)
        v = noisy.outputs - get_system("duffing").output(noisy.states)
        var = float(np.var(v))
        # chi-square bound on the sample variance of ~1000 draws
        assert 0.008 <= var <= 0.012

    def test_reproducible_under_seed(self):
        tr = integrate(get_system("duffing"), np.array([0.5, 0.1]), ZERO, 5.0, 0.05)
        a = add_noise(tr, 0.01, rngmod.derive(7, "n"))
        b = add_noise(tr, 0.01, rngmod.derive(7, "n"))
        assert a.states.tobytes() == b.states.tobytes()
        assert a.outputs.tobytes() == b.outputs.tobytes()

    def test_process_noise_changes_states(self):
        tr = integrate(get_system("duffing"), np.array([0.5, 0.1]), ZERO, 5.0, 0.05)
        noisy = add_noise(tr, 0.01, rngmod.derive(8, "n"))
        assert not np.allclose(noisy.states[1:], tr.states[1:])
        assert np.all(noisy.states[0] == tr.states[0])

    def test_negative_variance_rejected(self):
        tr = integrate(get_system("linear"), np.array([1.0]), ZERO, 1.0, 0.05)
        with pytest.raises(ValueError):
            add_noise(tr, -1.0, rngmod.derive(0, "n"))


class TestCsvExport:
    def test_round_trippable_columns(self, tmp_path):
        tr = integrate(get_system("duffing"), np.array([0.4, -0.1]),
                       sample_input("constant", rngmod.derive(0, "s")), 2.0, 0.05)
        path = tmp_path / "traj.csv"
        write_trajectory_csv(tr, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "t,x1,x2,u1,y1"
        assert len(lines) == 1 + tr.times.shape[0]
        row = [float(v) for v in lines[5].split(",")]
        assert row[0] == tr.times[4]
        assert row[1] == tr.states[4, 0]  # repr round-trips exactly
