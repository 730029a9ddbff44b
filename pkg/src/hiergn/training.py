"""Training, rollout and evaluation of learned simulators."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import torch

from . import hierarchy as hier
from .errors import InvalidInputError
from .models import GraphSpec, NBodyGN, Topology, collate, min_image, sample_topology, state_tensors
from .sim import ParticleSystem, SimConfig, Trajectory, hamiltonian, init_system, leapfrog_step, make_rng, simulate_trajectory, wrap

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_initial: float = 3e-4
    lr_decay: float = 0.1
    lr_decay_every: int = 200_000
    batch_size: int = 10
    total_steps: int = 10_000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 100
    fit_output_scale: bool = True

    def __post_init__(self):
        for name in ("lr_initial", "lr_decay", "adam_eps"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.lr_decay_every < 1 or self.batch_size < 1 or self.total_steps < 0 or self.log_every < 1:
            raise InvalidInputError("step counts must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidInputError("ADAM betas must lie in (0, 1)")


def learning_rate(cfg: TrainConfig, t: int) -> float:
    """Step-decayed rate lr0 * decay ** floor(t / every)."""
    return cfg.lr_initial * cfg.lr_decay ** (t // cfg.lr_decay_every)


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    skipped: list[int] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState, cfg: TrainConfig, t: int) -> bool:
    """Bias-corrected ADAM update in place; returns False if skipped.

    A step whose gradients contain NaN or inf is skipped entirely and its
    index recorded in ``state.skipped``.
    """
    if t < 1:
        raise InvalidInputError("ADAM step index starts at 1")
    if not all(torch.isfinite(g).all() for g in grads):
        state.skipped.append(t)
        log.warning("non-finite gradient at step %d, update skipped", t)
        return False
    lr = learning_rate(cfg, t)
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + cfg.adam_eps))
    return True


# --------------------------------------------------------------------------
# learned simulators


class Stepper(Protocol):
    def build_graph(self, sys: ParticleSystem): ...

    def advance(self, sys: ParticleSystem, graph, dt: float) -> ParticleSystem: ...


class LearnedSimulator:
    """A model together with the graph it runs on."""

    def __init__(self, model: NBodyGN, spec: GraphSpec):
        if model.hierarchical != (spec.kind == "hier"):
            raise InvalidInputError("hierarchical models need a 'hier' graph spec and vice versa")
        self.model = model
        self.spec = spec

    def build_graph(self, sys: ParticleSystem):
        return sample_topology(sys, self.spec)

    def advance(self, sys: ParticleSystem, graph, dt: float) -> ParticleSystem:
        top = collate([graph])
        q, v = state_tensors([sys])
        with torch.set_grad_enabled(self.model.kind == "hogn"):
            q1, v1 = self.model.step(top, q, v, dt)
        return sys.with_state(q1.detach().numpy(), v1.detach().numpy())


class LeapfrogStepper:
    """Ground-truth stepper: one synchronised leapfrog step per call."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg

    def build_graph(self, sys: ParticleSystem):
        return hier.full_graph(len(sys))

    def advance(self, sys: ParticleSystem, graph, dt: float) -> ParticleSystem:
        return leapfrog_step(sys, dt, self.cfg)


# --------------------------------------------------------------------------
# losses


def phase_residuals(q_pred, v_pred, q_true, v_true, box) -> torch.Tensor:
    """(N, 4) residuals; positions compared to the closest periodic copy."""
    return torch.cat([min_image(q_pred - q_true, box), v_pred - v_true], dim=1)


def batch_loss(model: NBodyGN, top: Topology, q0, v0, q1, v1, dt: float) -> torch.Tensor:
    qp, vp = model.step(top, q0, v0, dt, create_graph=model.kind == "hogn")
    return (phase_residuals(qp, vp, q1, v1, top.box) ** 2).mean()


def one_step_loss(sim: LearnedSimulator, sample: tuple[ParticleSystem, ParticleSystem, float]) -> torch.Tensor:
    """MSE between predicted and true (q, qdot) after one step."""
    before, after, dt = sample
    if len(before) != len(after):
        raise InvalidInputError("snapshots have different particle counts")
    top = collate([sim.build_graph(before)])
    q0, v0 = state_tensors([before])
    q1, v1 = state_tensors([after])
    return batch_loss(sim.model, top, q0, v0, q1, v1, dt)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    sim: LearnedSimulator
    curve: list[tuple[int, float, float]]  # (step, loss, lr)
    skipped: list[int]
    wall_time: float


class TransitionSampler:
    """Seeded sampler of (trajectory, step) pairs with cached topologies."""

    def __init__(self, dataset: Sequence[Trajectory], spec: GraphSpec, seed: int):
        self.dataset = list(dataset)
        self.spec = spec
        self.rng = make_rng(seed)
        self.lengths = np.array([len(t) - 1 for t in self.dataset])
        if np.any(self.lengths < 1):
            raise InvalidInputError("every trajectory needs at least two snapshots")
        self._cache: dict[tuple[int, int], object] = {}

    def topology(self, i: int, t: int):
        key = (i, t)
        if key not in self._cache:
            self._cache[key] = sample_topology(self.dataset[i].snapshot(t), self.spec)
        return self._cache[key]

    def draw(self, batch_size: int) -> list[tuple[int, int]]:
        traj = self.rng.integers(0, len(self.dataset), size=batch_size)
        steps = [int(self.rng.integers(0, self.lengths[i])) for i in traj]
        return list(zip(traj.tolist(), steps))

    def batch(self, picks):
        top = collate([self.topology(i, t) for i, t in picks])
        q0 = torch.as_tensor(np.concatenate([self.dataset[i].positions[t] for i, t in picks]))
        v0 = torch.as_tensor(np.concatenate([self.dataset[i].velocities[t] for i, t in picks]))
        q1 = torch.as_tensor(np.concatenate([self.dataset[i].positions[t + 1] for i, t in picks]))
        v1 = torch.as_tensor(np.concatenate([self.dataset[i].velocities[t + 1] for i, t in picks]))
        return top, q0, v0, q1, v1


def check_dataset(model: NBodyGN, dataset: Sequence[Trajectory]) -> float:
    """Validate a dataset against a model and return its base timestep."""
    if not dataset:
        raise InvalidInputError("empty dataset")
    dts = {t.config.dt_base for t in dataset}
    if len(dts) != 1:
        raise InvalidInputError("dataset mixes base timesteps")
    for t in dataset:
        if (t.charges is not None) != model.charged:
            law = "coulomb" if t.charges is not None else "gravity"
            raise InvalidInputError(f"{law} dataset does not match a model with charged={model.charged}")
        if not t.ok:
            raise InvalidInputError(f"dataset contains a failed trajectory ({t.status})")
    return dts.pop()


def delta_statistics(dataset: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std of one-step (dq, dv) over a dataset (dq under min-image)."""
    rows = []
    for t in dataset:
        dq = (t.positions[1:] - t.positions[:-1]).reshape(-1, 2)
        dq = dq - t.box * np.floor(dq / t.box + 0.5)
        dv = (t.velocities[1:] - t.velocities[:-1]).reshape(-1, 2)
        rows.append(np.concatenate([dq, dv], axis=1))
    allrows = np.concatenate(rows)
    return allrows.mean(axis=0), allrows.std(axis=0)


def train(
    sim: LearnedSimulator,
    dataset: Sequence[Trajectory],
    cfg: TrainConfig,
    callback: Optional[Callable[[int, float], None]] = None,
    fixed_batch: Optional[list[tuple[int, int]]] = None,
) -> TrainResult:
    """Minimise the one-step MSE with ADAM on randomly drawn transitions.

    `fixed_batch` pins every step to the same (trajectory, step) picks,
    which is how the overfitting smoke test runs.
    """
    model = sim.model
    dt = check_dataset(model, dataset)
    if cfg.fit_output_scale and model.kind == "delta" and cfg.total_steps > 0:
        _, std = delta_statistics(dataset)
        model.output_scale.copy_(torch.as_tensor(np.where(std > 0, std, 1.0)))
    torch.manual_seed(cfg.seed)
    sampler = TransitionSampler(dataset, sim.spec, cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    state = AdamState.zeros_like(params)
    curve = []
    start = time.perf_counter()
    for t in range(1, cfg.total_steps + 1):
        picks = fixed_batch if fixed_batch is not None else sampler.draw(cfg.batch_size)
        top, q0, v0, q1, v1 = sampler.batch(picks)
        loss = batch_loss(model, top, q0, v0, q1, v1, dt)
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
        adam_step(params, grads, state, cfg, t)
        value = float(loss.detach())
        if t % cfg.log_every == 0 or t == 1 or t == cfg.total_steps:
            curve.append((t, value, learning_rate(cfg, t)))
            log.info("step %d loss %.3e lr %.1e", t, value, learning_rate(cfg, t))
        if callback is not None:
            callback(t, value)
    return TrainResult(sim, curve, list(state.skipped), time.perf_counter() - start)


# --------------------------------------------------------------------------
# rollout and metrics


@dataclass
class RolloutResult:
    trajectory: Trajectory
    status: str
    graph_builds: int
    diverged_at: Optional[int] = None


def rollout(stepper, init: ParticleSystem, steps: int, dt: float, config: Optional[SimConfig] = None) -> RolloutResult:
    """Feed the stepper its own outputs, rebuilding the graph every step."""
    cfg = config or SimConfig(force_law=init.force_law, dt_base=dt, n_base_steps=steps)
    current = init.copy()
    current.positions = wrap(current.positions, current.box)
    systems = [current]
    builds = 0
    status, bad = "ok", None
    for s in range(1, steps + 1):
        graph = stepper.build_graph(current)
        builds += 1
        try:
            current = stepper.advance(current, graph, dt)
            finite = np.all(np.isfinite(current.positions)) and np.all(np.isfinite(current.velocities))
        except (FloatingPointError, InvalidInputError, OverflowError):
            finite = False
        if not finite:
            status, bad = f"diverged at step {s}", s
            break
        systems.append(current)
    traj = Trajectory.from_snapshots(cfg, systems, status=status)
    return RolloutResult(traj, status, builds, bad)


def rollout_rmse(pred: Trajectory, truth: Trajectory, tau: int) -> float:
    """Root of the mean squared phase-space error over steps 1..tau.

    The mean runs over particles, the four coordinates and the steps.
    Position residuals use the closest periodic copy. A rollout shorter than
    tau (diverged) scores NaN.
    """
    if tau < 1:
        raise InvalidInputError("tau must be at least 1")
    if len(truth) <= tau:
        raise InvalidInputError("tau exceeds the ground-truth length")
    if len(pred) <= tau:
        return math.nan
    dq = pred.positions[1 : tau + 1] - truth.positions[1 : tau + 1]
    dq = dq - truth.box * np.floor(dq / truth.box + 0.5)
    dv = pred.velocities[1 : tau + 1] - truth.velocities[1 : tau + 1]
    return float(np.sqrt(np.mean(np.concatenate([dq, dv], axis=-1) ** 2)))


def relative_energy_error(pred: Trajectory, cfg: SimConfig, tau: int) -> float:
    """(H_0 - H_tau) / H_0 for one predicted trajectory (signed)."""
    if tau < 1:
        raise InvalidInputError("tau must be at least 1")
    if len(pred) <= tau:
        return math.nan
    h0 = hamiltonian(pred.snapshot(0), cfg)
    change = h0 - hamiltonian(pred.snapshot(tau), cfg)
    if change == 0.0:
        # covers H_0 = 0 for a system whose energy never moves
        return 0.0
    return change / h0 if h0 != 0.0 else math.copysign(math.inf, change)


def energy_error(preds, cfg: SimConfig, tau: int) -> float:
    """Mean over trajectories of (H_0 - H_tau) / H_0, no absolute value."""
    if isinstance(preds, Trajectory):
        preds = [preds]
    return float(np.mean([relative_energy_error(p, cfg, tau) for p in preds]))


@dataclass
class EvalReport:
    rollout_rmse: dict[int, float]
    energy_error: dict[int, float]
    energy_error_abs: dict[int, float]
    per_trajectory: list[dict]
    wall_time: float
    seed: Optional[int] = None
    config_hash: str = ""

    def summary_row(self) -> dict:
        row = {"seed": self.seed, "config_hash": self.config_hash, "wall_time": self.wall_time}
        for tau in sorted(self.rollout_rmse):
            row[f"rollout_rmse_{tau}"] = self.rollout_rmse[tau]
            row[f"energy_error_{tau}"] = self.energy_error[tau]
            row[f"energy_error_abs_{tau}"] = self.energy_error_abs[tau]
        return row


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def evaluate(stepper, test: Sequence[Trajectory], taus: Sequence[int] = (20, 200), seed=None, config=None) -> EvalReport:
    """Roll out every test trajectory and score it at each horizon."""
    start = time.perf_counter()
    horizon = max(taus)
    rows = []
    for idx, truth in enumerate(test):
        steps = min(horizon, len(truth) - 1)
        result = rollout(stepper, truth.snapshot(0), steps, truth.config.dt_base, truth.config)
        row = {"trajectory": idx, "n_particles": truth.n_particles, "status": result.status}
        for tau in taus:
            if tau > len(truth) - 1:
                continue
            row[f"rollout_rmse_{tau}"] = rollout_rmse(result.trajectory, truth, tau)
            row[f"energy_error_{tau}"] = relative_energy_error(result.trajectory, truth.config, tau)
        rows.append(row)
    rmse, err, err_abs = {}, {}, {}
    for tau in taus:
        key = f"rollout_rmse_{tau}"
        if not rows or key not in rows[0]:
            continue
        # pooled RMSE: all trajectories share N and tau, so this is the grand mean
        rmse[tau] = float(np.sqrt(np.mean([r[key] ** 2 for r in rows])))
        e = np.array([r[f"energy_error_{tau}"] for r in rows])
        err[tau] = float(np.mean(e))
        err_abs[tau] = float(np.mean(np.abs(e)))
    return EvalReport(rmse, err, err_abs, rows, time.perf_counter() - start, seed, config_hash(config or {}))


# --------------------------------------------------------------------------
# scaling and generalisation


def _median_time(fn, repeats: int, budget: float) -> float:
    times = []
    spent = 0.0
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        dt = time.perf_counter() - t0
        times.append(dt)
        spent += dt
        if spent > budget:
            break
    return float(np.median(times))


def loglog_slope(xs, ys) -> float:
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    ok = np.isfinite(ys) & (ys > 0)
    return float(np.polyfit(np.log(xs[ok]), np.log(ys[ok]), 1)[0])


def scaling_bench(
    variant: str,
    N_list: Sequence[int],
    repeats: int = 3,
    seed: int = 0,
    time_budget: float = 30.0,
    edge_chunk: int = 200_000,
) -> list[dict]:
    """Time graph construction and one forward pass per particle count.

    `variant` is a graph spec string ("full", "knn:15", "hier", ...). The
    model is an untrained DeltaGN; inference runs without autograd and, for
    large edge sets, in edge chunks so memory stays bounded. Failures such
    as running out of memory become a status in the row.
    """
    spec = GraphSpec.parse(variant)
    model = NBodyGN("delta", hierarchical=spec.kind == "hier", seed=seed)
    model.edge_chunk = edge_chunk
    cfg = SimConfig()
    rows = []
    for N in N_list:
        row = {"variant": variant, "N": N, "status": "ok"}
        try:
            sys = init_system(N, cfg, seed)
            build_time = _median_time(lambda: sample_topology(sys, spec), repeats, time_budget)
            sample = sample_topology(sys, spec)
            top = collate([sample])
            q, v = state_tensors([sys])
            edges = int(sample.senders.shape[0])
            if spec.kind == "hier":
                edges += sum(s.shape[0] for s in sample.near_senders) + sum(c.shape[0] for c in sample.cell_centres) + N
            with torch.no_grad():
                fwd_time = _median_time(lambda: model.delta(top, q, v, cfg.dt_base), repeats, time_budget)
            row.update(build_time=build_time, forward_time=fwd_time, edges=edges, particle_edges=int(sample.senders.shape[0]))
        except (MemoryError, RuntimeError) as exc:
            row.update(status=f"failed: {type(exc).__name__}", build_time=math.nan, forward_time=math.nan, edges=math.nan)
        rows.append(row)
    return rows


def generalisation_eval(stepper, datasets: dict[int, Sequence[Trajectory]], taus=(20,)) -> list[dict]:
    """Evaluate one trained stepper on test sets with other particle counts."""
    rows = []
    for N, test in sorted(datasets.items()):
        report = evaluate(stepper, test, taus)
        row = {"N": N}
        for tau in taus:
            row[f"rollout_rmse_{tau}"] = report.rollout_rmse.get(tau, math.nan)
            row[f"energy_error_{tau}"] = report.energy_error.get(tau, math.nan)
        rows.append(row)
    return rows


def generate_dataset(N: int, n_traj: int, cfg: SimConfig, seed: int) -> list[Trajectory]:
    """`n_traj` simulated trajectories with seeds seed, seed+1, ..."""
    out = []
    for i in range(n_traj):
        s = seed + i
        out.append(simulate(N, cfg, s))
    return out


def simulate(N: int, cfg: SimConfig, seed: int) -> Trajectory:
    return simulate_trajectory(init_system(N, cfg, seed), cfg, seed)
