import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiergn.errors import InvalidInputError, SimulationOverflowError
from hiergn.sim import (
    ParticleSystem,
    SimConfig,
    assign_timestep_level,
    compute_accelerations,
    hamiltonian,
    init_system,
    leapfrog_step,
    min_image_disp,
    potential_energy,
    simulate_trajectory,
    timestep_levels,
    total_momentum,
)


def two_body(sep=(1.0, 0.0), box=10.0, vel=None, charges=None):
    pos = np.array([[5.0, 5.0], [5.0 + sep[0], 5.0 + sep[1]]])
    v = np.zeros((2, 2)) if vel is None else np.asarray(vel, float)
    return ParticleSystem(np.ones(2), pos % box, v, box, charges)


def brute_accel(sys, cfg):
    # scalar double loop, written independently of the vectorised code
    n = len(sys)
    out = np.zeros((n, 2))
    L = sys.box
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d = []
            for ax in range(2):
                x = sys.positions[i, ax] - sys.positions[j, ax]
                while x >= L / 2:
                    x -= L
                while x < -L / 2:
                    x += L
                d.append(x)
            r2 = d[0] ** 2 + d[1] ** 2 + cfg.epsilon**2
            if cfg.force_law == "gravity":
                f = -cfg.G * sys.masses[j] / r2**1.5
            else:
                f = cfg.k * sys.charges[i] * sys.charges[j] / sys.masses[i] / r2**1.5
            out[i, 0] += f * d[0]
            out[i, 1] += f * d[1]
    return out


class TestMinImage:
    def test_wraps_across_boundary(self):
        assert np.allclose(min_image_disp((9.5, 5), (0.5, 5), 10), (-1, 0))

    def test_identity(self):
        assert np.array_equal(min_image_disp((3, 3), (3, 3), 10), (0, 0))

    def test_no_wrap(self):
        assert np.allclose(min_image_disp((3, 4), (1, 1), 10), (2, 3))

    def test_tie_maps_to_negative_half(self):
        assert np.allclose(min_image_disp((5, 0), (0, 0), 10), (-5, 0))
        assert np.allclose(min_image_disp((0, 0), (5, 0), 10), (-5, 0))

    def test_non_finite(self):
        with pytest.raises(InvalidInputError):
            min_image_disp((np.nan, 0), (0, 0), 10)

    @given(
        st.tuples(st.floats(0, 9.999), st.floats(0, 9.999)),
        st.tuples(st.floats(0, 9.999), st.floats(0, 9.999)),
    )
    def test_range_and_antisymmetry(self, a, b):
        d = min_image_disp(a, b, 10.0)
        assert np.all(d >= -5) and np.all(d < 5)
        e = min_image_disp(b, a, 10.0)
        # antisymmetric except for the tie at exactly -L/2
        for x, y in zip(d, e):
            if x != -5.0 and y != -5.0:
                assert x == pytest.approx(-y, abs=1e-12)


class TestAccelerations:
    def test_single_particle(self):
        sys = ParticleSystem(np.ones(1), np.array([[1.0, 2.0]]), np.zeros((1, 2)), 5.0)
        assert np.array_equal(compute_accelerations(sys, SimConfig()), np.zeros((1, 2)))

    def test_empty(self):
        sys = ParticleSystem(np.ones(0), np.zeros((0, 2)), np.zeros((0, 2)), 5.0)
        assert compute_accelerations(sys, SimConfig()).shape == (0, 2)

    def test_two_unit_masses(self):
        a = compute_accelerations(two_body(), SimConfig())
        expected = 2 / 1.04**1.5
        assert expected == pytest.approx(1.8857, abs=1e-4)
        assert np.linalg.norm(a[0]) == pytest.approx(expected, rel=1e-12)
        assert np.allclose(a[0], -a[1])
        # attraction: particle 0 is pulled towards +x
        assert a[0, 0] > 0

    def test_pair_across_seam(self):
        sys = ParticleSystem(np.ones(2), np.array([[0.2, 3.0], [9.8, 3.0]]), np.zeros((2, 2)), 10.0)
        a = compute_accelerations(sys, SimConfig())
        assert np.linalg.norm(a[0]) == pytest.approx(2 * 0.4 / (0.16 + 0.04) ** 1.5, rel=1e-12)
        assert a[0, 0] < 0

    def test_coincident_pair(self):
        sys = ParticleSystem(np.ones(2), np.array([[1.0, 1.0], [1.0, 1.0]]), np.zeros((2, 2)), 5.0)
        assert np.array_equal(compute_accelerations(sys, SimConfig()), np.zeros((2, 2)))

    @pytest.mark.parametrize("law", ["gravity", "coulomb"])
    def test_matches_brute_force(self, law):
        cfg = SimConfig(force_law=law)
        sys = init_system(17, cfg, seed=3)
        sys.masses = np.linspace(0.5, 2.0, 17)
        assert np.allclose(compute_accelerations(sys, cfg), brute_accel(sys, cfg), rtol=1e-12, atol=1e-14)

    def test_law_mismatch(self):
        cfg = SimConfig(force_law="coulomb")
        with pytest.raises(InvalidInputError):
            compute_accelerations(init_system(3, SimConfig(), 0), cfg)

    def test_force_is_minus_grad_potential(self):
        for law in ("gravity", "coulomb"):
            cfg = SimConfig(force_law=law)
            sys = init_system(6, cfg, seed=11)
            sys.masses = np.array([1.0, 2.0, 0.5, 1.5, 1.0, 0.7])
            acc = compute_accelerations(sys, cfg)
            h = 1e-5
            for i in range(6):
                for ax in range(2):
                    up, dn = sys.copy(), sys.copy()
                    up.positions[i, ax] += h
                    dn.positions[i, ax] -= h
                    grad = (potential_energy(up, cfg) - potential_energy(dn, cfg)) / (2 * h)
                    assert -grad == pytest.approx(sys.masses[i] * acc[i, ax], rel=1e-6, abs=1e-9)


class TestLevels:
    cfg = SimConfig()

    def test_zero_acceleration(self):
        assert assign_timestep_level((0, 0), self.cfg) == 0

    def test_hand_computed(self):
        # dt_i = 0.001 * sqrt(0.2 / 0.2) = 0.001; 0.01 / 2**4 = 0.000625 is the first below it
        assert assign_timestep_level((0.2, 0.0), self.cfg) == 4

    def test_clamp(self):
        cfg = SimConfig(max_timestep_level=10)
        assert assign_timestep_level((1e12, 0), cfg) == 10

    def test_non_finite(self):
        with pytest.raises(InvalidInputError):
            assign_timestep_level((np.inf, 0), self.cfg)

    @given(st.floats(1e-8, 1e8))
    def test_definition(self, amag):
        n = assign_timestep_level((amag, 0), self.cfg)
        dti = self.cfg.eta * math.sqrt(self.cfg.epsilon / amag)
        if n < self.cfg.max_timestep_level:
            assert self.cfg.dt_base / 2**n < dti
        if n > 0:
            assert self.cfg.dt_base / 2 ** (n - 1) >= dti

    def test_vectorised_agrees(self):
        acc = np.random.default_rng(0).normal(size=(50, 2)) * 10
        lv = timestep_levels(acc, self.cfg)
        assert [assign_timestep_level(a, self.cfg) for a in acc] == lv.tolist()


class TestLeapfrog:
    cfg = SimConfig()

    def test_free_particle(self):
        sys = ParticleSystem(np.ones(1), np.array([[9.9, 1.0]]), np.array([[1.0, -0.5]]), 10.0)
        out = leapfrog_step(sys, 0.2, self.cfg)
        assert np.allclose(out.positions, [[0.1, 0.9]])
        assert np.array_equal(out.velocities, sys.velocities)

    def test_zero_dt(self):
        sys = init_system(5, self.cfg, 1)
        out = leapfrog_step(sys, 0.0, self.cfg)
        assert np.array_equal(out.positions, sys.positions)
        assert np.array_equal(out.velocities, sys.velocities)

    def test_negative_dt(self):
        with pytest.raises(InvalidInputError):
            leapfrog_step(init_system(2, self.cfg, 0), -0.1, self.cfg)

    def test_overflow(self):
        sys = ParticleSystem(np.ones(2), np.array([[1.0, 1.0], [2.0, 2.0]]), np.array([[1e308, 0], [0, 0]]), 10.0)
        with pytest.raises(SimulationOverflowError), np.errstate(all="ignore"):
            leapfrog_step(sys, 10.0, self.cfg)

    def test_reversible(self):
        sys = init_system(8, self.cfg, 4)
        fwd = leapfrog_step(sys, 0.01, self.cfg)
        back = leapfrog_step(fwd.with_state(fwd.positions, -fwd.velocities), 0.01, self.cfg)
        dq = back.positions - sys.positions
        dq -= sys.box * np.round(dq / sys.box)
        assert np.max(np.abs(dq)) < 1e-10
        assert np.max(np.abs(-back.velocities - sys.velocities)) < 1e-10

    def test_bound_pair_matches_fine_reference(self):
        cfg = SimConfig(cell_size=100.0)
        r = 1.0
        v = math.sqrt(cfg.G * r * r / (2 * (r * r + cfg.epsilon**2) ** 1.5))
        sys = ParticleSystem(
            np.ones(2), np.array([[50.0, 50.0], [51.0, 50.0]]), np.array([[0.0, -v], [0.0, v]]), 100.0
        )
        coarse = sys
        for _ in range(200):
            coarse = leapfrog_step(coarse, 0.01, cfg)
        # independent scalar velocity-Verlet at 100x smaller steps
        x = [[50.0, 50.0], [51.0, 50.0]]
        u = [[0.0, -v], [0.0, v]]

        def acc(x):
            dx, dy = x[0][0] - x[1][0], x[0][1] - x[1][1]
            f = -cfg.G / (dx * dx + dy * dy + cfg.epsilon**2) ** 1.5
            return [[f * dx, f * dy], [-f * dx, -f * dy]]

        h = 1e-4
        a = acc(x)
        for _ in range(20000):
            x = [[x[i][k] + u[i][k] * h + 0.5 * a[i][k] * h * h for k in range(2)] for i in range(2)]
            a1 = acc(x)
            u = [[u[i][k] + 0.5 * (a[i][k] + a1[i][k]) * h for k in range(2)] for i in range(2)]
            a = a1
        assert np.max(np.abs(coarse.positions - np.array(x))) < 1e-3

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 10_000), st.floats(1e-4, 0.5))
    def test_positions_stay_in_cell(self, n, seed, dt):
        sys = init_system(n, self.cfg, seed)
        out = leapfrog_step(sys, dt, self.cfg)
        assert np.all(out.positions >= 0) and np.all(out.positions < out.box)


class TestHamiltonian:
    def test_single_static(self):
        sys = ParticleSystem(np.ones(1), np.array([[1.0, 1.0]]), np.zeros((1, 2)), 4.0)
        assert hamiltonian(sys, SimConfig()) == 0.0

    def test_two_at_rest(self):
        H = hamiltonian(two_body(), SimConfig())
        assert H == pytest.approx(-2 / math.sqrt(1.04), rel=1e-14)
        assert H == pytest.approx(-1.9612, abs=1e-4)

    def test_coulomb_sign(self):
        cfg = SimConfig(force_law="coulomb")
        H = hamiltonian(two_body(charges=np.array([1.0, 1.0])), cfg)
        assert H == pytest.approx(2 / math.sqrt(1.04))


class TestInitAndMomentum:
    def test_init_ranges(self):
        sys = init_system(100, SimConfig(), seed=5)
        L = math.sqrt(1200)
        assert sys.box == pytest.approx(L)
        assert np.all(sys.masses == 1)
        assert np.all((sys.positions >= 0) & (sys.positions < L))
        assert np.all(np.abs(sys.velocities) < 1)
        assert sys.charges is None

    def test_coulomb_charges(self):
        sys = init_system(200, SimConfig(force_law="coulomb"), seed=5)
        mag = np.abs(sys.charges)
        assert np.all((mag > 0.5) & (mag < 1.5))
        assert (sys.charges > 0).any() and (sys.charges < 0).any()

    def test_zero_particles(self):
        with pytest.raises(InvalidInputError):
            init_system(0, SimConfig(), 0)

    def test_seeded(self):
        a, b = init_system(10, SimConfig(), 3), init_system(10, SimConfig(), 3)
        assert np.array_equal(a.positions, b.positions)
        assert not np.array_equal(a.positions, init_system(10, SimConfig(), 4).positions)

    def test_mirrored_momentum(self):
        sys = two_body(vel=[[0.3, -0.7], [-0.3, 0.7]])
        assert np.array_equal(total_momentum(sys), [0.0, 0.0])


class TestInvariants:
    def test_rejects_bad_config(self):
        with pytest.raises(InvalidInputError):
            SimConfig(G=0)
        with pytest.raises(InvalidInputError):
            SimConfig(force_law="magnetic")

    def test_rejects_bad_system(self):
        with pytest.raises(InvalidInputError):
            ParticleSystem(np.array([1.0, -1.0]), np.zeros((2, 2)), np.zeros((2, 2)), 1.0)


class TestTrajectory:
    def test_single_particle_uniform_motion(self):
        cfg = SimConfig(n_base_steps=50)
        init = ParticleSystem(np.ones(1), np.array([[1.0, 1.0]]), np.array([[0.7, -0.2]]), 3.0)
        tr = simulate_trajectory(init, cfg)
        assert len(tr) == 51
        H = [hamiltonian(s, cfg) for s in tr.snapshots]
        assert all(h == H[0] for h in H)
        expected = (1.0 + 0.7 * 0.01 * 50) % 3.0
        assert tr.positions[-1, 0, 0] == pytest.approx(expected)

    def test_deterministic(self):
        cfg = SimConfig(n_base_steps=20)
        a = simulate_trajectory(init_system(10, cfg, 9), cfg, 9)
        b = simulate_trajectory(init_system(10, cfg, 9), cfg, 9)
        assert a.positions.tobytes() == b.positions.tobytes()
        assert a.velocities.tobytes() == b.velocities.tobytes()

    def test_conservation_small(self):
        cfg = SimConfig(n_base_steps=50)
        tr = simulate_trajectory(init_system(12, cfg, 2), cfg)
        h0, h1 = hamiltonian(tr.snapshot(0), cfg), hamiltonian(tr.snapshot(50), cfg)
        assert abs(h0 - h1) / abs(h0) < 1e-3
        p0, p1 = total_momentum(tr.snapshot(0)), total_momentum(tr.snapshot(50))
        scale = np.sum(np.linalg.norm(tr.velocities[0], axis=1))
        assert np.max(np.abs(p1 - p0)) < 1e-9 * scale

    def test_base_level_matches_leapfrog(self):
        # with every particle on level 0 the scheme is plain KDK leapfrog
        cfg = SimConfig(n_base_steps=5, eta=1e6)
        init = init_system(6, cfg, 1)
        tr = simulate_trajectory(init, cfg)
        ref = init
        for t in range(5):
            ref = leapfrog_step(ref, cfg.dt_base, cfg)
        assert np.allclose(tr.positions[-1], ref.positions, atol=1e-12)
        assert np.allclose(tr.velocities[-1], ref.velocities, atol=1e-12)

    def test_overflow_truncates(self):
        cfg = SimConfig(n_base_steps=10)
        init = ParticleSystem(np.full(2, 1e308), np.array([[1.0, 1.0], [2.0, 2.0]]), np.zeros((2, 2)), 10.0)
        with np.errstate(all="ignore"):
            tr = simulate_trajectory(init, cfg)
        assert tr.status == "overflow at step 1"
        assert len(tr) == 1
