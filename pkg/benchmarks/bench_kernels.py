"""Time the compiled and pure-Python recursion kernels on the same inputs.

Usage::

    python benchmarks/bench_kernels.py [--T 8000] [--R 10] [--repeat 5]

Reports the best-of-``repeat`` wall time of the forward pass, the backward
pass with gradient accumulation and Viterbi for both backends, and checks
that they agree.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from _models import bimodal_truth  # noqa: E402
from pmlhsmm import DwellTimeSpec, HsmmModel, _kernels_py, expand, simulate  # noqa: E402
from pmlhsmm.emission import log_density_matrix  # noqa: E402
from pmlhsmm.inference import initial_vector  # noqa: E402

try:
    from pmlhsmm import _kernels as compiled
except ImportError:
    compiled = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def make_inputs(T, R, seed=0):
    base = bimodal_truth()
    dwell = []
    for d in base.dwell:
        # stretch the reference start to length R, keeping its total mass
        w = np.interp(np.linspace(0, 9, R), np.arange(10), d.pi)
        dwell.append(DwellTimeSpec(tuple(w / w.sum() * sum(d.pi))))
    model = HsmmModel(dwell, base.omega, base.emissions)
    data = simulate(model, T, seed=seed).observations
    hmm = expand(model)
    logd = log_density_matrix(hmm.emissions, data.values)
    dens = np.ascontiguousarray(np.exp(logd - logd.max(axis=1, keepdims=True)))
    indptr, indices, vals = hmm.csr
    init = np.ascontiguousarray(initial_vector(hmm))
    return hmm, indptr, indices, vals, init, dens


def run(mod, args, repeat):
    hmm, indptr, indices, vals, init, dens = args
    agg = hmm.agg_index
    t_f, (alpha, logc) = best_of(lambda: mod.forward(indptr, indices, vals, init, dens, agg), repeat)
    t_b, grads = best_of(lambda: mod.backward_grad(indptr, indices, vals, dens, agg, alpha, logc), repeat)
    ld, li, lv = np.log(dens), np.log(init), np.log(vals)
    t_v, (path, _) = best_of(lambda: mod.viterbi(indptr, indices, lv, li, ld, agg), repeat)
    return {"forward": t_f, "backward": t_b, "viterbi": t_v}, (logc, grads, path)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--T", type=int, default=8000)
    p.add_argument("--R", type=int, default=10)
    p.add_argument("--repeat", type=int, default=5)
    a = p.parse_args(argv)

    args = make_inputs(a.T, a.R)
    print(f"T={a.T}  expanded states={args[0].n_expanded}  nonzeros={len(args[3])}")
    py_t, py_out = run(_kernels_py, args, a.repeat)
    if compiled is None:
        print("compiled extension not built; python timings only")
        for k, v in py_t.items():
            print(f"{k:9s} python {v * 1e3:9.2f} ms")
        return 0
    cy_t, cy_out = run(compiled, args, a.repeat)
    print(f"{'kernel':9s} {'cython':>12s} {'python':>12s} {'speed-up':>9s}")
    for k in py_t:
        print(f"{k:9s} {cy_t[k] * 1e3:9.2f} ms {py_t[k] * 1e3:9.2f} ms {py_t[k] / cy_t[k]:8.1f}x")
    np.testing.assert_allclose(cy_out[0], py_out[0], rtol=1e-12, atol=1e-14)
    for x, y in zip(cy_out[1], py_out[1]):
        np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-300)
    np.testing.assert_array_equal(cy_out[2], py_out[2])
    print("backends agree")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
