"""Generate one gravity trajectory and watch its conserved quantities.

Run: python demos/01_simulate.py
"""
import numpy as np

from hiergn.sim import SimConfig, hamiltonian, init_system, simulate_trajectory, total_momentum

cfg = SimConfig()  # G=2, eps=0.2, dt0=0.01, 200 base steps
init = init_system(100, cfg, seed=0)
print(f"100 particles in a periodic box of side {init.box:.2f}")

traj = simulate_trajectory(init, cfg, seed=0)
print("status:", traj.status, "| snapshots:", len(traj))

h0 = hamiltonian(traj.snapshot(0), cfg)
p0 = total_momentum(traj.snapshot(0))
for t in (0, 50, 100, 150, 200):
    s = traj.snapshot(t)
    dh = (hamiltonian(s, cfg) - h0) / abs(h0)
    dp = np.abs(total_momentum(s) - p0).max()
    print(f"step {t:3d}  relative energy change {dh:+.2e}  momentum change {dp:.1e}")

# same seed, same bytes
again = simulate_trajectory(init_system(100, cfg, seed=0), cfg, seed=0)
print("deterministic:", np.array_equal(again.positions, traj.positions))
