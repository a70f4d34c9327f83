"""Timing comparison of the compiled and pure-NumPy kernel backends.

Backend choice is frozen at import time by the GROWSEG_BACKEND environment
variable, so the script re-executes itself once per backend and merges the
results.  Each child times the three neighbor-search kernels plus the full
initial-superpoint stage on one synthetic room, and fingerprints every
output so the parent can verify both backends computed identical answers.

Usage:
    python3 benchmarks/benchmark_backends.py [--points N] [--repeats R]
"""

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time


def _workload(points):
    from growseg.geometry import SpatialIndex, voxel_downsample
    from growseg.synthetic import SynthSpec, gen_scene

    spec = SynthSpec(points=points)
    cloud = gen_scene(spec, 0, "train")
    vox, _ = voxel_downsample(cloud, 0.05)
    return vox, SpatialIndex.build(vox.positions, 0.05)


def _digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def run_single(points, repeats):
    from growseg._core import backend
    from growseg.geometry import knn_all, radius_all, cell27_all
    from growseg.superpoints import initial_superpoints

    vox, index = _workload(points)
    rows = {}

    t, (ids, counts) = _time(lambda: knn_all(index, vox.positions, 16), repeats)
    rows["knn16"] = (t, _digest(ids, counts))

    t, (indptr, cols) = _time(lambda: radius_all(index, vox.positions, 0.15),
                              repeats)
    rows["radius0.15"] = (t, _digest(indptr, cols))

    t, (indptr, cols) = _time(lambda: cell27_all(index), repeats)
    rows["cell27"] = (t, _digest(indptr, cols))

    t, part = _time(lambda: initial_superpoints(vox, mode="indoor", rng_seed=0),
                    repeats)
    rows["superpoints"] = (t, _digest(part.assignment))

    print(json.dumps({"backend": backend.BACKEND, "voxels": len(vox),
                      "rows": rows}))


def run_compare(points, repeats):
    results = {}
    for choice in ("c", "py"):
        env = dict(os.environ, GROWSEG_BACKEND=choice)
        proc = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--single",
             "--points", str(points), "--repeats", str(repeats)],
            env=env, capture_output=True, text=True)
        if proc.returncode != 0:
            sys.stderr.write(proc.stderr)
            if choice == "c":
                print("compiled backend unavailable, nothing to compare")
                return 1
            return proc.returncode
        results[choice] = json.loads(proc.stdout.splitlines()[-1])

    assert results["c"]["backend"] == "c", "extension did not load"
    assert results["py"]["backend"] == "py"
    print(f"workload: 1 room, {results['c']['voxels']} voxels after "
          f"0.05 m downsampling, best of {repeats}\n")
    print(f"{'kernel':<14} {'c':>10} {'py':>10} {'speedup':>9}  agree")
    mismatch = False
    for name, (tc, fc) in results["c"]["rows"].items():
        tp, fp = results["py"]["rows"][name]
        same = fc == fp
        mismatch |= not same
        print(f"{name:<14} {tc:>9.4f}s {tp:>9.4f}s {tp / tc:>8.1f}x"
              f"  {'yes' if same else 'NO'}")
    if mismatch:
        print("\nbackend outputs differ; this is a bug")
        return 1
    return 0


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--points", type=int, default=20000,
                        help="points per generated room (default 20000)")
    parser.add_argument("--repeats", type=int, default=3,
                        help="repeats per timing, best is kept (default 3)")
    parser.add_argument("--single", action="store_true",
                        help="time the current backend only, emit JSON")
    args = parser.parse_args()
    if args.single:
        run_single(args.points, args.repeats)
        return 0
    return run_compare(args.points, args.repeats)


if __name__ == "__main__":
    sys.exit(main())
