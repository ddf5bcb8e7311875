"""Timing comparison of the decoder kernel backends.

Runs the hot operations of a latent solve (fused loss+gradient, plain
loss, parameter gradient) on the default-width decoder for both the
numpy reference implementation and the compiled extension, plus one
end-to-end adaptive solve per backend.

Usage: python benchmarks/bench_kernels.py [repeats]
"""

import sys
import time

import numpy as np

from gfe import model
from gfe._kernels import LOSS_BCE, make_core
from gfe.flow import FlowConfig, solve_amd
from gfe.model import DecoderObjective


def bench(fn, repeats):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def main():
    repeats = int(sys.argv[1]) if len(sys.argv) > 1 else 200
    theta = model.init_params(0)
    rng = np.random.default_rng(0)
    z = rng.normal(scale=0.1, size=theta.latent_dim)
    y = rng.uniform(0.05, 0.95, size=theta.output_dim)
    amd_cfg = FlowConfig(alpha_mode="unit", tau=50.0, max_steps=40)

    backends = ["reference"]
    try:
        make_core(theta.weights, theta.biases, backend="compiled")
        backends.append("compiled")
    except RuntimeError:
        print("compiled kernels unavailable; timing the reference backend only")

    results = {}
    for be in backends:
        core = make_core(theta.weights, theta.biases, backend=be)
        obj = DecoderObjective(theta, y, core=core)
        results[be] = {
            "loss": bench(lambda: core.loss(z, y, LOSS_BCE), repeats),
            "loss_grad_z": bench(lambda: core.loss_grad_z(z, y, LOSS_BCE), repeats),
            "loss_grad_theta": bench(
                lambda: core.loss_grad_theta(z, y, LOSS_BCE), repeats
            ),
            "amd_solve": bench(
                lambda: solve_amd(None, None, amd_cfg, objective=obj),
                max(repeats // 10, 3),
            ),
        }

    ops = ["loss", "loss_grad_z", "loss_grad_theta", "amd_solve"]
    width = max(len(op) for op in ops)
    header = f"{'op':<{width}}" + "".join(f"  {be:>12}" for be in backends)
    if len(backends) == 2:
        header += f"  {'speedup':>8}"
    print(header)
    for op in ops:
        line = f"{op:<{width}}"
        for be in backends:
            line += f"  {results[be][op] * 1e6:>10.1f}us"
        if len(backends) == 2:
            line += f"  {results['reference'][op] / results['compiled'][op]:>7.2f}x"
        print(line)


if __name__ == "__main__":
    main()
