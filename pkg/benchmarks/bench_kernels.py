"""Time the compiled substep kernel against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--steps N] [--mesh M]

Both backends run the same control steps from the same state; the script
reports steps per second, the speedup and the largest position difference.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from dyncloth import clothsim as cs
from dyncloth.envs import ClothEnv


def run(backend: str, env: ClothEnv, actions: np.ndarray, repeats: int) -> tuple[float, np.ndarray]:
    kernel = cs.make_kernel(env.mesh, env.sim_config, env.task.table, env.workspace, backend)
    best = np.inf
    final = None
    for _ in range(repeats):
        state = env.state.copy()
        t0 = time.perf_counter()
        for a in actions:
            state, _ = cs.sim_step(state, a[None, :3] * env.sim_config.max_speed, True, env.mesh,
                                   env.sim_config, env.task.table, env.workspace, kernel=kernel)
        best = min(best, time.perf_counter() - t0)
        final = state.positions
    return len(actions) / best, final


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--mesh", type=int, default=9)
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args(argv)
    from dyncloth.envs import get_task

    env = ClothEnv(get_task("diagonal", cloth_nodes=args.mesh), 4)
    env.reset(np.random.default_rng(0))
    actions = np.random.default_rng(1).uniform(-1, 1, size=(args.steps, 4))
    results = {}
    finals = {}
    for name in cs.BACKENDS:
        results[name], finals[name] = run(name, env, actions, args.repeats)
        print(f"{name:>9}: {results[name]:10.1f} control steps/s "
              f"({env.sim_config.substeps} substeps each, {env.mesh.n_nodes} nodes)")
    if "compiled" in results:
        diff = float(np.abs(finals["compiled"] - finals["python"]).max())
        print(f"  speedup: {results['compiled'] / results['python']:.1f}x, max |dx| = {diff:.3g}")
    else:
        print("compiled extension not built; only the numpy fallback was timed")
    print(json.dumps({k: round(v, 1) for k, v in results.items()}))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
