import csv

import numpy as np
import pytest

from crp_kit.autodiff import NumericError, Tape, unpack_complex
from crp_kit.network import ScoreNetwork
from crp_kit.sampler import (PRINTED, UPPER, CorrectorConfig, Schedule, ScheduleError,
                             build_schedule, em_step, langevin_correct, solve_reverse,
                             write_trajectory_csv)
from crp_kit.sde import BbedParams, OuTestParams, ou_moments
from crp_kit.training import GaussianToyTask, analytic_score

P = BbedParams()


def zero_score(x, y, t):
    return np.zeros_like(x)


class NoDiffusion(BbedParams):
    def diffusion(self, t):
        return 0.0 * np.asarray(t, dtype=np.float64)


def _ou_setup(mu0=1.5, s0=0.5):
    p = OuTestParams(1.0, 1.0)

    def marginal(t):
        m, v = ou_moments(mu0, t, p)
        return m, v + s0 ** 2 * np.exp(-2 * p.theta * t)

    def score(x, y, t):
        m, v = marginal(float(t))
        return -(x - m) / v

    return p, marginal, score


class TestSchedule:
    def test_one_step(self):
        assert build_schedule(0.5, 0.03, 1).times == (0.5, 0.0)

    def test_three_steps(self):
        np.testing.assert_allclose(build_schedule(0.5, 0.03, 3).times, (0.5, 0.265, 0.03, 0.0),
                                   rtol=1e-15)

    def test_two_steps(self):
        assert build_schedule(0.5, 0.03, 2).times == (0.5, 0.03, 0.0)

    @pytest.mark.parametrize("n", [1, 2, 5, 30])
    def test_invariants(self, n):
        s = build_schedule(0.5, 0.03, n)
        assert s.n_steps == n and s.times[-1] == 0.0 and s.t_start == 0.5
        assert all(a > b for a, b in zip(s.times[:-1], s.times[1:]))

    def test_bad_bounds(self):
        with pytest.raises(ScheduleError):
            build_schedule(0.03, 0.5, 3)
        with pytest.raises(ScheduleError):
            build_schedule(0.5, 0.03, 0)

    def test_invalid_schedule(self):
        with pytest.raises(ScheduleError):
            Schedule((0.5, 0.1))
        with pytest.raises(ScheduleError):
            Schedule((0.1, 0.3, 0.0))

    def test_digest_stable(self):
        assert build_schedule(0.5, 0.03, 4).digest() == build_schedule(0.5, 0.03, 4).digest()
        assert build_schedule(0.5, 0.03, 4).digest() != build_schedule(0.5, 0.03, 5).digest()


class TestEmStep:
    def test_pure_drift(self):
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal((2, 3, 4)) + 0j
        out = em_step(x, y, 0.5, 0.3, zero_score, rng, sde=NoDiffusion())
        np.testing.assert_allclose(out, x - P.drift(x, y, 0.5) * 0.2, rtol=1e-15)

    def test_fixed_point(self):
        x = np.full((2, 3), 0.4 - 0.1j)
        out = em_step(x, x, 0.5, 0.3, zero_score, add_noise=False)
        np.testing.assert_array_equal(out, x)

    @pytest.mark.parametrize("conv,t_s", [(PRINTED, 0.3), (UPPER, 0.5)])
    def test_time_convention(self, conv, t_s):
        seen = []

        def score(x, y, t):
            seen.append(t)
            return np.ones_like(x)

        x = np.zeros((2, 2), complex)
        out = em_step(x, x, 0.5, 0.3, score, add_noise=False, convention=conv)
        assert seen == [t_s]
        np.testing.assert_allclose(out, P.diffusion(t_s) ** 2 * 0.2 * np.ones_like(x))

    def test_noise_term(self):
        x = np.zeros((2, 2), complex)
        z = np.full_like(x, 1.0 + 1.0j)
        out = em_step(x, x, 0.5, 0.3, zero_score, noise=z)
        np.testing.assert_allclose(out, P.diffusion(0.3) * np.sqrt(0.2) * z)

    def test_bad_step(self):
        x = np.zeros(2, complex)
        with pytest.raises(ScheduleError):
            em_step(x, x, 0.3, 0.3, zero_score)
        with pytest.raises(ValueError):
            em_step(x, x, 0.5, 0.3, zero_score, add_noise=False, convention="lower")

    def test_tape_matches_plain(self):
        rng = np.random.default_rng(1)
        net = ScoreNetwork.create(3, rng, widths=(8,))
        net.theta += 0.1 * rng.standard_normal(net.n_params)
        x, y = 0.3 * (rng.standard_normal((2, 2, 3)) + 1j * rng.standard_normal((2, 2, 3)))
        plain = em_step(x, y, 0.4, 0.1, net, add_noise=False)
        taped = em_step(x, y, 0.4, 0.1, net, add_noise=False, tape=Tape(net.n_params))
        np.testing.assert_allclose(unpack_complex(taped), plain, rtol=1e-13)

    def test_ou_terminal_moments(self):
        p, marginal, score = _ou_setup()
        rng = np.random.default_rng(2)
        n = 10_000
        m, v = marginal(1.0)
        x = m + np.sqrt(v) * rng.standard_normal(n)
        times = np.linspace(1.0, 0.0, 1001)
        for a, b in zip(times[:-1], times[1:]):
            x = em_step(x, None, a, b, score, rng, add_noise=b > 0, sde=p, convention=UPPER)
        mean0, var0 = 1.5, 0.25
        assert abs(x.mean() - mean0) < 3 * np.sqrt(var0 / n)
        assert abs(x.var() - var0) < 3 * var0 * np.sqrt(2 / n)

    @pytest.mark.parametrize("conv", [UPPER, PRINTED])
    def test_weak_order_one(self, conv):
        # em_step is affine in x and the noise is centred, so stepping the mean
        # with noise off gives the exact expectation of the stochastic scheme.
        p, marginal, score = _ou_setup()
        dts = [0.1, 0.05, 0.025, 0.0125]
        errs = []
        for dt in dts:
            times = np.linspace(1.0, 0.0, int(round(1 / dt)) + 1)
            x = np.array([marginal(1.0)[0]])
            for a, b in zip(times[:-1], times[1:]):
                x = em_step(x, None, a, b, score, add_noise=False, sde=p, convention=conv)
            errs.append(abs(x[0] - 1.5))
        slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
        assert 0.8 <= slope <= 1.2


class TestSolveReverse:
    def test_nfe_em(self):
        y = np.zeros((2, 3), complex)
        for n in (1, 4, 30):
            res = solve_reverse(y, zero_score, build_schedule(0.5, 0.03, n), P,
                                np.random.default_rng(0))
            assert res.nfe == n

    @pytest.mark.parametrize("n,corr,nfe", [(30, 1, 60), (5, 2, 15)])
    def test_nfe_pc(self, n, corr, nfe):
        y = np.full((2, 3), 0.1 + 0j)

        def score(x, yy, t):
            return -(x - yy)

        res = solve_reverse(y, score, build_schedule(0.5, 0.03, n), P, np.random.default_rng(0),
                            mode="pc", corrector=CorrectorConfig(steps=corr))
        assert res.nfe == nfe

    def test_deterministic(self):
        y = np.random.default_rng(3).standard_normal((3, 4)) + 0j
        sched = build_schedule(0.5, 0.03, 5)
        a = solve_reverse(y, lambda x, yy, t: yy - x, sched, P, np.random.default_rng(7))
        b = solve_reverse(y, lambda x, yy, t: yy - x, sched, P, np.random.default_rng(7))
        np.testing.assert_array_equal(a.estimate, b.estimate)

    def test_replay(self):
        y = np.random.default_rng(4).standard_normal((3, 4)) + 0j
        sched = build_schedule(0.5, 0.03, 6)
        a = solve_reverse(y, zero_score, sched, P, np.random.default_rng(1), record_draws=True)
        b = solve_reverse(y, zero_score, sched, P, None, replay=a.rng_draws)
        np.testing.assert_array_equal(a.estimate, b.estimate)
        # prior draw plus one per stochastic step; the step into 0 is noise-free
        assert len(a.rng_draws) == 1 + 5

    def test_last_step_deterministic(self):
        y = np.zeros((2, 3), complex)
        sched = Schedule((0.2, 0.0))
        x1 = np.full((2, 3), 0.5 + 0.5j)
        outs = [solve_reverse(y, zero_score, sched, P, np.random.default_rng(s), x_start=x1).estimate
                for s in range(3)]
        np.testing.assert_array_equal(outs[0], outs[1])
        np.testing.assert_array_equal(outs[0], outs[2])
        noisy = solve_reverse(y, zero_score, sched, P, np.random.default_rng(0), x_start=x1,
                              final_noise=True).estimate
        assert not np.array_equal(noisy, outs[0])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_aborts_with_trajectory(self):
        def bad(x, y, t):
            return np.full_like(x, np.inf)

        with pytest.raises(NumericError) as info:
            solve_reverse(np.zeros((2, 2), complex), bad, build_schedule(0.5, 0.03, 3), P,
                          np.random.default_rng(0), keep_trajectory=True)
        assert info.value.trajectory[0][0] == 0

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            solve_reverse(np.zeros(2, complex), zero_score, build_schedule(0.5, 0.03, 1), P,
                          np.random.default_rng(0), mode="ode")

    def test_trajectory_csv(self, tmp_path):
        res = solve_reverse(np.ones((2, 3), complex), zero_score, build_schedule(0.5, 0.03, 4), P,
                            np.random.default_rng(0), keep_trajectory=True)
        write_trajectory_csv(res, tmp_path / "traj.csv")
        rows = list(csv.reader(open(tmp_path / "traj.csv")))
        assert rows[0] == ["step", "t", "mean_abs_state", "nfe"]
        assert [int(r[3]) for r in rows[1:]] == [0, 1, 2, 3, 4]
        assert float(rows[-1][1]) == 0.0

    @pytest.mark.parametrize("conv,n", [(UPPER, 32), (PRINTED, 256)])
    def test_analytic_posterior_mean(self, conv, n):
        task = GaussianToyTask(np.array([[0.4 - 0.2j]]), 0.3, np.array([[0.1 + 0.05j]]))
        sched = build_schedule(P.t_rsp, P.t_eps, n)
        paths = 20_000
        rng = np.random.default_rng(0)
        start = task.sample_xt(rng, np.full(paths, sched.t_start), P)
        y = np.broadcast_to(task.y, start.shape)
        est = solve_reverse(y, lambda x, yy, t: analytic_score(task, x, t, P), sched, P, rng,
                            convention=conv, x_start=start).estimate[:, 0, 0]
        for part, target in ((est.real, 0.4), (est.imag, -0.2)):
            assert abs(part.mean() - target) < 3 * part.std() / np.sqrt(paths)


class TestLangevin:
    def test_step_size_rule(self):
        x = np.zeros((1, 2, 2), complex)
        z = np.full_like(x, 1.0)
        s = np.full_like(x, 2.0)
        out = langevin_correct(x, x, 0.3, lambda a, b, t: s, None, snr=0.5, noise=z)
        eps = 2 * (0.5 * 2.0 / 4.0) ** 2
        np.testing.assert_allclose(out, eps * s + np.sqrt(2 * eps) * z)

    def test_zero_score(self):
        x = np.ones((2, 2), complex)
        out = langevin_correct(x, x, 0.3, zero_score, None, noise=np.ones_like(x))
        np.testing.assert_array_equal(out, x)
