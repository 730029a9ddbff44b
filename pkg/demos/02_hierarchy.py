"""Build the quadtree interaction graph and check that it covers every pair once.

Run: python demos/02_hierarchy.py
"""
from hiergn import hierarchy as hier
from hiergn.sim import SimConfig, init_system

for n in (64, 256, 1024, 4096):
    sys = init_system(n, SimConfig(), seed=1)
    depth = hier.choose_depth(n)
    g = hier.build_hier_graph(sys, depth)
    counts = g.edge_counts()
    print(
        f"N={n:5d} depth={depth} nodes={g.n_nodes:6d} ({g.n_nodes / n:.2f} N) "
        f"edges={counts['total']:7d} vs full graph {n * (n - 1):9d}"
    )

# the exhaustive oracle: direct particle edges plus one ancestor cell-cell edge per pair
for n in (16, 50, 64, 100):
    g = hier.build_hier_graph(init_system(n, SimConfig(), seed=2), hier.choose_depth(n))
    print(f"N={n:3d}:", hier.interaction_coverage_check(g))

# per-level view for a small system
g = hier.build_hier_graph(init_system(64, SimConfig(), seed=3), 3)
for lv in g.levels:
    print(f"level {lv.level}: grid {lv.grid}x{lv.grid}, {len(lv)} occupied cells, {lv.near_senders.size} near-neighbour edges")
