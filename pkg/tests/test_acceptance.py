"""End-to-end acceptance gate.

Each test exercises one numbered acceptance criterion at its stated
tolerance and prints a single [PASS]/[FAIL] line.  Run with

    python3 -m pytest tests/test_acceptance.py -v -s

to see the per-criterion lines.  Design-space utilities for the ladder
model are rescaled by the sup-norm of the base design direction before
synthesis; that is an exact reparameterization of the command axis (the
continuation is linear in the utility) chosen so the stated command
ranges keep every invariant pmf resolvable in double precision.
"""

import contextlib
import math
import time

import numpy as np
import pytest

from ddispatch.design import (
    LoadStateSpace,
    build_exponential_family,
    family_optimality_residual,
    ipd_map,
    reward_value,
    solve_design_ode,
    spd_map,
    tilt,
)
from ddispatch.errors import AdjointProductReducible
from ddispatch.linearize import (
    b_adjoint_form,
    bode_export,
    covariance_sequence,
    family_kernel_derivative,
    linearize,
    positive_real_check,
    transfer_eval,
)
from ddispatch.loads import (
    PoolModelSpec,
    TclModelSpec,
    build_pool_model,
    build_tcl_model,
    synthesis_inputs,
    tcl_trajectory,
    thermal_decay,
)
from ddispatch.markov import (
    StateFunction,
    StochasticMatrix,
    adjoint,
    fundamental_matrix,
    invariant_pmf,
    poisson_solve,
)
from ddispatch.sim import fleet_rollout, frequency_decompose, meanfield_rollout


@contextlib.contextmanager
def criterion(num: int, label: str):
    try:
        yield
    except BaseException:
        print(f"[FAIL] criterion {num}: {label}")
        raise
    print(f"[PASS] criterion {num}: {label}")


def scaled_util(space: LoadStateSpace, c: float, units: str) -> LoadStateSpace:
    return LoadStateSpace(
        n_control=space.n_control, n_exo=space.n_exo,
        util=StateFunction(space.util.values / c, units=units),
        anchor=space.anchor, exo_kernel=space.exo_kernel)


def random_chain(rng, d: int, conc: float = 2.0) -> StochasticMatrix:
    return StochasticMatrix(rng.dirichlet(np.full(d, conc), size=d))


@pytest.fixture(scope="module")
def pool():
    return build_pool_model(PoolModelSpec())


@pytest.fixture(scope="module")
def tcl():
    return build_tcl_model(TclModelSpec(), samples_per_state=4000, seed=0)


@pytest.fixture(scope="module")
def pool_ipd(pool):
    base, struct = synthesis_inputs(pool, "compose")
    c = np.abs(ipd_map(base, pool.space.util.values).values).max()
    space = scaled_util(pool.space, c, "scaled")
    return solve_design_ode(base, space, "ipd", 3.0, step=0.01, structure=struct)


@pytest.fixture(scope="module")
def tcl_unit_space(tcl):
    return scaled_util(tcl.space, tcl.spec_doc["power_kw"], "per-unit")


@pytest.fixture(scope="module")
def tcl_myopic(tcl, tcl_unit_space):
    base, struct = synthesis_inputs(tcl, "compose")
    return build_exponential_family(base, tcl_unit_space, "myopic", 3.0,
                                    step=0.01, structure=struct)


@pytest.fixture(scope="module")
def tcl_ipd(tcl, tcl_unit_space):
    base, struct = synthesis_inputs(tcl, "compose")
    c = np.abs(ipd_map(base, tcl_unit_space.util.values).values).max()
    space = scaled_util(tcl_unit_space, c, "scaled")
    return solve_design_ode(base, space, "ipd", 3.0, step=0.01, structure=struct)


class TestAcceptance:
    def test_criterion_01_structural_identities(self):
        with criterion(1, "structural identities on 200 random chains"):
            t0 = time.perf_counter()
            rng = np.random.default_rng(12345)
            for _ in range(200):
                d = int(rng.integers(2, 51))
                p = random_chain(rng, d, conc=1.5)
                pi = invariant_pmf(p)
                assert np.abs(pi.weights @ p.entries - pi.weights).max() <= 1e-12
                z = fundamental_matrix(p, pi)
                m = np.eye(d) - p.entries + np.outer(np.ones(d), pi.weights)
                assert np.abs(z @ m - np.eye(d)).max() <= 1e-10
                back = adjoint(adjoint(p, pi), pi)
                assert np.abs(back.entries - p.entries).max() <= 1e-12
                f = rng.normal(size=d)
                h = poisson_solve(p, f, anchor=0)
                resid = (p.entries @ h.values - h.values
                         + f - pi.weights @ f)
                assert np.abs(resid).max() <= 1e-10
            assert time.perf_counter() - t0 < 10.0

    def test_criterion_02_reweighting_basics(self):
        with criterion(2, "kernel reweighting: identity, shift, support"):
            rng = np.random.default_rng(7)
            for d in (3, 8, 20):
                p = random_chain(rng, d)
                same, _ = tilt(p, np.zeros((d, d)))
                assert np.abs(same.entries - p.entries).max() <= 1e-15
                pair = rng.normal(size=(d, d))
                a, _ = tilt(p, pair)
                b, _ = tilt(p, pair + 7.25)
                assert np.abs(a.entries - b.entries).max() <= 1e-12
            # ring chain with extra shortcuts keeps its sparsity pattern
            d = 12
            entries = np.zeros((d, d))
            for i in range(d):
                entries[i, (i + 1) % d] = 0.7
                entries[i, i] = 0.2
                entries[i, (i + 5) % d] = 0.1
            sparse = StochasticMatrix(entries)
            tilted, _ = tilt(sparse, rng.normal(size=(d, d)))
            assert np.array_equal(tilted.entries == 0.0, entries == 0.0)

    def test_criterion_03_design_certificate_and_order(self):
        with criterion(3, "optimality residual small, shrinks 16x per halving"):
            t0 = time.perf_counter()
            for d in (3, 5, 10):
                rng = np.random.default_rng(0)
                p = random_chain(rng, d)
                space = LoadStateSpace(
                    n_control=d, n_exo=1,
                    util=StateFunction(np.linspace(-1.0, 1.0, d)), anchor=0)
                coarse = solve_design_ode(p, space, "ipd", 1.0, step=0.01)
                fine = solve_design_ode(p, space, "ipd", 1.0, step=0.005)
                for z in (-1.0, 0.5, 1.0):
                    rc = family_optimality_residual(coarse, z)
                    rf = family_optimality_residual(fine, z)
                    assert rc <= 1e-4
                    assert 8.0 <= rc / rf <= 32.0
            assert time.perf_counter() - t0 < 30.0

    def test_criterion_04_mean_power_monotone(self, pool_ipd, tcl_ipd):
        with criterion(4, "mean power nondecreasing along both families"):
            assert np.diff(pool_ipd.ubars).min() >= -1e-8
            assert np.diff(tcl_ipd.ubars).min() >= -1e-8

    def test_criterion_05_passivity_screen(self, pool):
        with criterion(5, "system-perspective family margins; cycle rejected"):
            t0 = time.perf_counter()
            base, struct = synthesis_inputs(pool, "direct")
            c = np.abs(spd_map(base, pool.space.util).values).max() / 4.0
            space = scaled_util(pool.space, c, "scaled")
            fam = solve_design_ode(base, space, "spd", 2.0, step=0.01,
                                   structure=struct)
            for z in (-2.0, -1.0, 0.0, 1.0, 2.0):
                rep = positive_real_check(linearize(fam, z), theta_count=2048)
                assert rep.realness_margin >= -1e-8
            cycle = StochasticMatrix(np.roll(np.eye(4), 1, axis=1))
            with pytest.raises(AdjointProductReducible):
                spd_map(cycle, [1.0, 0.0, -1.0, 0.0])
            assert time.perf_counter() - t0 < 60.0

    def test_criterion_06_frozen_direction_orders(self):
        with criterion(6, "frozen-direction kernel gap O(z^2), payoff gap O(z^4)"):
            chain = StochasticMatrix(
                np.random.default_rng(5).dirichlet(np.ones(5) * 5.0, size=5))
            util = np.linspace(-1.0, 1.0, 5)
            space = LoadStateSpace(n_control=5, n_exo=1,
                                   util=StateFunction(util), anchor=0)
            adapted = solve_design_ode(chain, space, "ipd", 0.4, step=0.0025)
            frozen = build_exponential_family(chain, space, "ipd0", 0.4,
                                              step=0.0025)

            def kernel_gap(z):
                return np.abs(adapted.kernel_at(z).entries
                              - frozen.kernel_at(z).entries).max()

            def payoff_gap(z):
                a = reward_value(adapted.jump_kernel_at(z), chain, util, z)
                f = reward_value(frozen.jump_kernel_at(z), chain, util, z)
                return a - f

            for z in (0.4, 0.2, 0.1):
                assert 3.5 <= kernel_gap(z) / kernel_gap(z / 2) <= 4.5
                gap, half = payoff_gap(z), payoff_gap(z / 2)
                assert half > 0.0
                assert 12.0 <= gap / half <= 20.0

    def test_criterion_07_linear_response_identities(self, tcl_myopic):
        with criterion(7, "pmf-response forms agree; covariance realization; "
                          "derivative order"):
            for z in (0.0, 1.0, -2.0):
                model = linearize(tcl_myopic, z)
                alt = b_adjoint_form(tcl_myopic, z)
                assert np.abs(alt - model.b).max() <= 1e-10
            model = linearize(tcl_myopic, 0.5)
            kern = tcl_myopic.kernel_at(0.5)
            pi = tcl_myopic.pi_at(0.5)
            cov = covariance_sequence(kern, pi, model.b / pi.weights,
                                      model.c, 20)
            cur = model.b.copy()
            for k in range(21):
                assert abs(cov[k] - model.c @ cur) <= 1e-10
                cur = model.a @ cur
            deriv = family_kernel_derivative(tcl_myopic, 0.5)
            errs = []
            for h in (0.08, 0.04, 0.02):
                fd = (tcl_myopic.kernel_at(0.5 + h).entries
                      - tcl_myopic.kernel_at(0.5 - h).entries) / (2.0 * h)
                errs.append(np.abs(fd - deriv).max())
            for i in range(2):
                assert math.log2(errs[i] / errs[i + 1]) >= 1.9

    def test_criterion_08_fleet_convergence(self, pool):
        with criterion(8, "fleet tracks the distributional model at ~1/sqrt(N)"):
            t0 = time.perf_counter()
            base, struct = synthesis_inputs(pool, "compose")
            fam = build_exponential_family(base, pool.space, "myopic", 1.0,
                                           step=0.01, structure=struct)
            zetas = np.full(500, 0.5)
            y_mf, _ = meanfield_rollout(fam, zetas)
            sizes = (1000, 4000, 16000)
            sups = []
            for n in sizes:
                errs = [np.abs(fleet_rollout(fam, zetas, n, seed)[0]
                               - y_mf).max() for seed in range(8)]
                sups.append(float(np.mean(errs)))
            assert sups[0] > sups[1] > sups[2]
            slope = np.polyfit(np.log(sizes), np.log(sups), 1)[0]
            assert 0.35 <= -slope <= 0.65
            assert time.perf_counter() - t0 < 120.0

    def test_criterion_09_load_model_facts(self, pool, tcl, tcl_unit_space):
        with criterion(9, "ladder timing, thermal leak constant, dead-band"):
            assert pool.space.dim == 96
            assert pool.gamma == pytest.approx(1.0 / 6.0)
            assert abs(pool.diagnostics["epoch_minutes"] - 30.0) <= 5.0
            assert thermal_decay(TclModelSpec()) == math.exp(-1.0 / 720.0)
            spec = TclModelSpec()
            base, struct = synthesis_inputs(tcl, "compose")
            fam = build_exponential_family(base, tcl_unit_space, "myopic",
                                           1.0, step=0.05, structure=struct)
            traj = tcl_trajectory(spec, 10000, seed=0, family=fam, zeta=0.3)
            assert traj.epoch_count > 0
            assert traj.override_rate < 0.05
            fall, rise = (16.0, 12.0)
            leak = 1.0 - thermal_decay(spec, spec.sample_period_s)
            # excursion bound: one corrective step of drift plus noise tail
            slack = 6.0 * math.sqrt(spec.noise_var)
            assert traj.theta.max() <= spec.band_high + fall * leak + slack
            assert traj.theta.min() >= spec.band_low - rise * leak - slack

    def test_criterion_10_decomposition_identity(self):
        with criterion(10, "band split adds back exactly; constant settles"):
            rng = np.random.default_rng(11)
            t = np.arange(6000, dtype=float)
            wind = (np.cumsum(rng.normal(size=t.size)) * 0.05
                    + 3.0 * np.sin(2.0 * np.pi * t / 900.0)
                    + 0.4 * np.sin(2.0 * np.pi * t / 7.0))
            low, mid, high = frequency_decompose(wind, 0.002, 0.05,
                                                 period_s=1.0)
            assert np.array_equal((wind - low) - high, mid)
            assert np.allclose(low + mid + high, wind, rtol=0.0,
                               atol=1e-12 * np.abs(wind).max())
            const = np.full(4000, 4.0)
            lo, mi, hi = frequency_decompose(const, 0.002, 0.05, period_s=1.0)
            assert abs(lo[-1] - 4.0) < 1e-6
            assert abs(mi[-1]) < 1e-6
            assert abs(hi[-1]) < 1e-6

    def test_criterion_11_response_shape_comparison(self, tcl_myopic, tcl_ipd,
                                                    pool_ipd, tmp_path):
        with criterion(11, "shapes match at zero; greedy family spreads more"):
            thetas = np.linspace(0.01, np.pi, 512)
            zs = np.exp(1j * thetas)

            def shape(fam, zeta):
                model = linearize(fam, zeta)
                g = np.array([transfer_eval(model, z)[0] for z in zs])
                dc = transfer_eval(model, 1.0)[0]
                return np.abs(g) / abs(dc)

            a = shape(tcl_myopic, 0.0)
            b = shape(tcl_ipd, 0.0)
            assert np.abs(a - b).max() / np.abs(b).max() <= 0.05

            def dispersion(fam):
                ref = shape(fam, 0.0)
                return max(np.abs(shape(fam, z) - ref).mean()
                           for z in (-3.0, -2.0, -1.0, 1.0, 2.0, 3.0))

            assert dispersion(tcl_myopic) > dispersion(tcl_ipd)

            for fam, name, period in ((tcl_myopic, "tcl_bode.csv", 20.0),
                                      (pool_ipd, "pool_bode.csv", 300.0)):
                reps = [positive_real_check(linearize(fam, z),
                                            theta_count=256, label=f"z{z:g}")
                        for z in (-3.0, 0.0, 3.0)]
                out = tmp_path / name
                bode_export(reps, out, sample_period=period)
                assert out.stat().st_size > 0
