"""Reference N-body simulator on a periodic square cell.

Forces are summed exactly over all pairs using the closest periodic copy,
softened with a Plummer kernel. Time integration is kick-drift-kick leapfrog
with per-particle power-of-two timestep levels; every particle is
synchronised at base-step boundaries, which is where snapshots are taken.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Literal, Optional

import numpy as np

from .errors import InvalidInputError, SimulationOverflowError

ForceLaw = Literal["gravity", "coulomb"]

# fraction of the cell area per particle ("one particle per twelve square units")
AREA_PER_PARTICLE = 12.0


@dataclass(frozen=True)
class SimConfig:
    force_law: ForceLaw = "gravity"
    G: float = 2.0
    k: float = 2.0
    epsilon: float = 0.2
    eta: float = 0.001
    dt_base: float = 0.01
    cell_size: Optional[float] = None  # None -> sqrt(12 N)
    n_base_steps: int = 200
    max_timestep_level: int = 8

    def __post_init__(self):
        if self.force_law not in ("gravity", "coulomb"):
            raise InvalidInputError(f"unknown force law {self.force_law!r}")
        for name in ("G", "k", "epsilon", "eta", "dt_base"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidInputError(f"{name} must be positive, got {value}")
        if self.cell_size is not None and not self.cell_size > 0:
            raise InvalidInputError("cell_size must be positive")
        if self.n_base_steps < 0 or self.max_timestep_level < 0:
            raise InvalidInputError("step counts must be non-negative")

    def box_size(self, n: int) -> float:
        """Side of the periodic cell for `n` particles."""
        if self.cell_size is not None:
            return float(self.cell_size)
        return math.sqrt(AREA_PER_PARTICLE * n)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass
class ParticleSystem:
    """State of N particles in a periodic cell of side `box`."""

    masses: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    box: float
    charges: Optional[np.ndarray] = None

    def __post_init__(self):
        self.masses = np.ascontiguousarray(self.masses, dtype=np.float64).reshape(-1)
        n = self.masses.shape[0]
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(n, 2)
        self.velocities = np.ascontiguousarray(self.velocities, dtype=np.float64).reshape(n, 2)
        if self.charges is not None:
            self.charges = np.ascontiguousarray(self.charges, dtype=np.float64).reshape(n)
        self.box = float(self.box)
        if np.any(self.masses <= 0):
            raise InvalidInputError("masses must be positive")
        if not self.box > 0:
            raise InvalidInputError("box must be positive")

    def __len__(self) -> int:
        return self.masses.shape[0]

    @property
    def force_law(self) -> ForceLaw:
        return "gravity" if self.charges is None else "coulomb"

    def copy(self) -> "ParticleSystem":
        return ParticleSystem(
            self.masses.copy(),
            self.positions.copy(),
            self.velocities.copy(),
            self.box,
            None if self.charges is None else self.charges.copy(),
        )

    def with_state(self, positions, velocities) -> "ParticleSystem":
        """Same particles (masses, charges, box) with a new phase-space state."""
        return ParticleSystem(self.masses, wrap(positions, self.box), velocities, self.box, self.charges)

    def check_finite(self) -> None:
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.velocities))):
            raise InvalidInputError("non-finite particle state")


@dataclass
class Trajectory:
    """Snapshots of one system at every base step.

    `positions` and `velocities` have shape (T+1, N, 2). `status` is "ok" or a
    message naming the first step that failed.
    """

    config: SimConfig
    masses: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    box: float
    charges: Optional[np.ndarray] = None
    seed: Optional[int] = None
    status: str = "ok"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def n_particles(self) -> int:
        return self.masses.shape[0]

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def snapshot(self, t: int) -> ParticleSystem:
        return ParticleSystem(self.masses, self.positions[t], self.velocities[t], self.box, self.charges)

    @property
    def snapshots(self) -> list[ParticleSystem]:
        return [self.snapshot(t) for t in range(len(self))]

    @classmethod
    def from_snapshots(cls, config: SimConfig, systems, **kw) -> "Trajectory":
        first = systems[0]
        return cls(
            config=config,
            masses=first.masses.copy(),
            positions=np.stack([s.positions for s in systems]),
            velocities=np.stack([s.velocities for s in systems]),
            box=first.box,
            charges=None if first.charges is None else first.charges.copy(),
            **kw,
        )


def wrap(positions: np.ndarray, box: float) -> np.ndarray:
    """Map coordinates into [0, box)."""
    out = np.mod(positions, box)
    # np.mod can return exactly `box` for tiny negative inputs
    out[out >= box] = 0.0
    return out


def min_image(d: np.ndarray, box: float) -> np.ndarray:
    """Wrap displacement components into [-box/2, box/2)."""
    return d - box * np.floor(d / box + 0.5)


def min_image_disp(qi, qj, L: float) -> np.ndarray:
    """Displacement qi - qj to the closest periodic copy of qj."""
    qi = np.asarray(qi, dtype=np.float64)
    qj = np.asarray(qj, dtype=np.float64)
    if not (np.all(np.isfinite(qi)) and np.all(np.isfinite(qj)) and math.isfinite(L)):
        raise InvalidInputError("non-finite input to min_image_disp")
    return min_image(qi - qj, L)


def _source_strength(sys: ParticleSystem, cfg: SimConfig):
    """Per-particle (receiver factor, sender factor) so that
    a_i = recv_i * sum_j send_j * d_ij / (|d_ij|^2 + eps^2)^{3/2}."""
    if cfg.force_law == "gravity":
        if sys.charges is not None:
            raise InvalidInputError("gravity system must not carry charges")
        return np.full(len(sys), -cfg.G), sys.masses
    if sys.charges is None:
        raise InvalidInputError("coulomb system requires charges")
    return cfg.k * sys.charges / sys.masses, sys.charges


def _accel_rows(rows, positions, recv, send, box, eps2) -> np.ndarray:
    """Accelerations of particles `rows` from all others (exact pair sum)."""
    d = min_image(positions[rows, None, :] - positions[None, :, :], box)
    inv = (np.einsum("ijk,ijk->ij", d, d) + eps2) ** -1.5
    # coincident pairs (incl. self) have d = 0, so they add nothing
    w = inv * send[None, :]
    return recv[rows, None] * np.einsum("ij,ijk->ik", w, d)


def compute_accelerations(sys: ParticleSystem, cfg: SimConfig) -> np.ndarray:
    if len(sys) == 0:
        return np.zeros((0, 2))
    sys.check_finite()
    recv, send = _source_strength(sys, cfg)
    return _accel_rows(np.arange(len(sys)), sys.positions, recv, send, sys.box, cfg.epsilon**2)


def leapfrog_step(sys: ParticleSystem, dt: float, cfg: SimConfig, acc0: Optional[np.ndarray] = None) -> ParticleSystem:
    """One time-synchronised KDK leapfrog step of size `dt` for all particles."""
    if not dt >= 0:
        raise InvalidInputError("dt must be non-negative")
    a0 = compute_accelerations(sys, cfg) if acc0 is None else acc0
    q1 = wrap(sys.positions + sys.velocities * dt + 0.5 * a0 * dt * dt, sys.box)
    moved = ParticleSystem(sys.masses, q1, sys.velocities, sys.box, sys.charges)
    a1 = compute_accelerations(moved, cfg) if np.all(np.isfinite(q1)) else q1
    v1 = sys.velocities + 0.5 * (a0 + a1) * dt
    if not (np.all(np.isfinite(q1)) and np.all(np.isfinite(v1))):
        raise SimulationOverflowError("non-finite state in leapfrog step")
    moved.velocities = v1
    return moved


def timestep_levels(acc: np.ndarray, cfg: SimConfig) -> np.ndarray:
    """Vectorised `assign_timestep_level` over an (N, 2) acceleration array."""
    amag = np.sqrt(np.einsum("ij,ij->i", acc, acc))
    with np.errstate(divide="ignore"):
        dti = cfg.eta * np.sqrt(cfg.epsilon / amag)
    ratio = cfg.dt_base / dti
    with np.errstate(divide="ignore"):
        n = np.where(ratio < 1.0, 0, np.floor(np.log2(np.maximum(ratio, 1.0))) + 1).astype(np.int64)
    # guard against log2 rounding right at a level boundary
    n = np.where(cfg.dt_base / 2.0**n >= dti, n + 1, n)
    n = np.where((n > 0) & (cfg.dt_base / 2.0 ** (n - 1) < dti), n - 1, n)
    return np.clip(n, 0, cfg.max_timestep_level)


def assign_timestep_level(a, cfg: SimConfig) -> int:
    """Smallest level n with dt_base / 2**n below eta * sqrt(eps / |a|)."""
    a = np.asarray(a, dtype=np.float64).reshape(1, 2)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("non-finite acceleration")
    return int(timestep_levels(a, cfg)[0])


def _pair_kick(active, pos, vel, masses, strength, coef, box, eps2, pair_dt) -> None:
    """Kick every pair with at least one active particle, in place.

    `pair_dt[i, j]` (rows = active particles) is the kick length of pair
    (i, j). Each pair impulse is applied with opposite signs to both members,
    so total momentum only changes by rounding.
    """
    rows = np.flatnonzero(active)
    if rows.size == 0:
        return
    d = min_image(pos[rows, None, :] - pos[None, :, :], box)
    g = coef * strength[rows, None] * strength[None, :] * (np.einsum("ijk,ijk->ij", d, d) + eps2) ** -1.5
    gw = g * pair_dt
    vel[rows] += np.einsum("ij,ijk->ik", gw, d) / masses[rows, None]
    passive = ~active
    if passive.any():
        reaction = -np.einsum("ij,ijk->jk", gw[:, passive], d[:, passive])
        vel[passive] += reaction / masses[passive, None]


def simulate_trajectory(init: ParticleSystem, cfg: SimConfig, seed: Optional[int] = None) -> Trajectory:
    """Integrate `cfg.n_base_steps` base steps with hierarchical timesteps.

    Every particle gets its own power-of-two level from its acceleration at
    the start of each base step. The interaction of a pair is integrated
    with KDK on the finer of its two levels, kicking both members with equal
    and opposite impulses; all particles drift together on the finest
    active substep. The resulting nested splitting is symplectic,
    time-symmetric, and conserves linear momentum to rounding.
    """
    init.check_finite()
    recv, send = _source_strength(init, cfg)
    if cfg.force_law == "gravity":
        coef, strength = -cfg.G, init.masses
    else:
        coef, strength = cfg.k, init.charges
    masses = init.masses
    eps2 = cfg.epsilon**2
    box = init.box
    pos = wrap(init.positions, box)
    vel = init.velocities.copy()
    n = len(init)
    all_rows = np.arange(n)

    qs = [pos.copy()]
    vs = [vel.copy()]
    status = "ok"
    for step in range(cfg.n_base_steps):
        if n < 2:
            pos = wrap(pos + vel * cfg.dt_base, box)
        else:
            acc = _accel_rows(all_rows, pos, recv, send, box, eps2)
            levels = timestep_levels(acc, cfg)
            top = int(levels.max())
            n_sub = 1 << top
            h = cfg.dt_base / n_sub
            level_dt = cfg.dt_base / (1 << np.arange(top + 1))
            for s in range(n_sub + 1):
                # levels with a step boundary at substep s
                first = top - ((s & -s).bit_length() - 1) if s else 0
                active = levels >= first
                rows = levels[active]
                pair_dt = level_dt[np.maximum(rows[:, None], levels[None, :])]
                if s == 0 or s == n_sub:
                    pair_dt = 0.5 * pair_dt
                _pair_kick(active, pos, vel, masses, strength, coef, box, eps2, pair_dt)
                if s < n_sub:
                    pos = wrap(pos + vel * h, box)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            status = f"overflow at step {step + 1}"
            break
        qs.append(pos.copy())
        vs.append(vel.copy())

    return Trajectory(
        config=cfg,
        masses=init.masses.copy(),
        positions=np.stack(qs),
        velocities=np.stack(vs),
        box=box,
        charges=None if init.charges is None else init.charges.copy(),
        seed=seed,
        status=status,
    )


def hamiltonian(sys: ParticleSystem, cfg: SimConfig) -> float:
    """Kinetic plus softened pair potential, closest-copy distances."""
    kinetic = 0.5 * float(np.sum(sys.masses * np.einsum("ij,ij->i", sys.velocities, sys.velocities)))
    n = len(sys)
    if n < 2:
        return kinetic
    i, j = np.triu_indices(n, 1)
    d = min_image(sys.positions[i] - sys.positions[j], sys.box)
    inv_r = 1.0 / np.sqrt(np.einsum("ij,ij->i", d, d) + cfg.epsilon**2)
    if cfg.force_law == "gravity":
        potential = -cfg.G * np.sum(sys.masses[i] * sys.masses[j] * inv_r)
    else:
        if sys.charges is None:
            raise InvalidInputError("coulomb system requires charges")
        potential = cfg.k * np.sum(sys.charges[i] * sys.charges[j] * inv_r)
    return kinetic + float(potential)


def potential_energy(sys: ParticleSystem, cfg: SimConfig) -> float:
    still = replace(sys.copy(), velocities=np.zeros_like(sys.velocities))
    return hamiltonian(still, cfg)


def total_momentum(sys: ParticleSystem) -> np.ndarray:
    return np.sum(sys.masses[:, None] * sys.velocities, axis=0)


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the only source of randomness for data generation."""
    return np.random.Generator(np.random.PCG64(seed))


def init_system(N: int, cfg: SimConfig, seed: int) -> ParticleSystem:
    """Uniform positions, unit masses, velocity components in (-1, 1).

    Coulomb systems also get charges with magnitude in (0.5, 1.5) and a
    random sign.
    """
    if N < 1:
        raise InvalidInputError("N must be at least 1")
    rng = make_rng(seed)
    box = cfg.box_size(N)
    positions = wrap(rng.uniform(0.0, box, size=(N, 2)), box)
    velocities = rng.uniform(-1.0, 1.0, size=(N, 2))
    charges = None
    if cfg.force_law == "coulomb":
        magnitude = rng.uniform(0.5, 1.5, size=N)
        sign = np.where(rng.integers(0, 2, size=N) == 0, -1.0, 1.0)
        charges = magnitude * sign
    return ParticleSystem(np.ones(N), positions, velocities, box, charges)
