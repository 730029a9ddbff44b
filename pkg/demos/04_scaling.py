"""Time graph construction and one forward pass as N grows.

Run: python demos/04_scaling.py
The full graph is left out above N=1024 to keep the demo short.
"""
from hiergn.training import loglog_slope, scaling_bench

sizes = [256, 512, 1024, 2048, 4096]
hier_rows = scaling_bench("hier", sizes, repeats=3)
full_rows = scaling_bench("full", sizes[:3], repeats=1)

for r in hier_rows + full_rows:
    print(f"{r['variant']:5s} N={r['N']:5d} build {r['build_time']:.4f}s forward {r['forward_time']:.4f}s edges {r['edges']}")

print("hier forward slope %.2f" % loglog_slope(sizes, [r["forward_time"] for r in hier_rows]))
print("full forward slope %.2f" % loglog_slope(sizes[:3], [r["forward_time"] for r in full_rows]))
