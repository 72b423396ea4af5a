"""Compare the compiled kernels with the numpy fallback.

Times each kernel directly, then a short end-to-end chain under both
backends (the chain run is done in a subprocess so ``BSSCAL_PURE_PYTHON``
takes effect at import).

    python benchmarks/bench_kernels.py [--repeat 20] [--iterations 200]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from bsscal import _fallback
from bsscal.basis import build_kl_basis

try:
    from bsscal import _kernels
except ImportError:
    _kernels = None

CHAIN_SNIPPET = """
import json, time
import numpy as np
from bsscal import kernels
from bsscal.basis import CatalogPolicy, ModelCatalog, VariableSpec
from bsscal.mcmc import ChainConfig, run_chain
from bsscal.model import PriorSpec
from bsscal.studylab import draw_truth, generate_dataset, lhs
vs = [VariableSpec("x1"), VariableSpec("x2"), VariableSpec("t1", role="parameter"),
      VariableSpec("t2", role="parameter")]
cat = ModelCatalog.build(vs, CatalogPolicy(n_terms=10, n_terms_2way=20))
truth = draw_truth(cat, seed=0, theta=[0.4, 0.6], sigma=0.01 * np.eye(2), upsilon=1e-4 * np.eye(2), n_outputs=2)
rng = np.random.default_rng(1)
data = generate_dataset(truth, lhs(50, vs[:2], rng=rng), lhs(450, vs, rng=rng), seed=2)
chain = run_chain(data, PriorSpec.default(cat, 2), cat, ChainConfig(iterations={it}, burn_in={it} // 2, seed=3))
print(json.dumps({{"backend": kernels.BACKEND, "ms_per_iteration": 1e3 * chain.per_iteration_time()}}))
"""


def kernel_cases(rng):
    table = build_kl_basis(300).scaled_table(25)
    u = rng.uniform(size=5000)
    E = rng.standard_normal((5000, 40))
    idx = rng.integers(0, 40, (200, 2))
    R = rng.standard_normal((5000, 4))
    L = np.tril(rng.standard_normal((4, 4))) + 3 * np.eye(4)
    return {
        "main_basis (5000 x 25)": lambda mod: mod.main_basis(u, table, 25),
        "product_columns (5000 x 200)": lambda mod: mod.product_columns(E, idx),
        "row_quadform (5000 x 4)": lambda mod: mod.row_quadform(R, L),
    }


def chain_time(pure, iterations):
    env = dict(os.environ)
    env.pop("BSSCAL_PURE_PYTHON", None)
    if pure:
        env["BSSCAL_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", CHAIN_SNIPPET.format(it=iterations)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--iterations", type=int, default=200)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'fallback ms':>12s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in kernel_cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat)) * 1e3
        if _kernels is None:
            print(f"{name:32s} {t_py:12.3f} {'n/a':>12s} {'':>8s}")
            continue
        t_cy = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:32s} {t_py:12.3f} {t_cy:12.3f} {t_py / t_cy:7.2f}x")
    print()
    for pure in (True, False):
        res = chain_time(pure, args.iterations)
        print(f"chain ({args.iterations} iterations, N+M=500): backend={res['backend']:7s} "
              f"{res['ms_per_iteration']:.2f} ms/iteration")


if __name__ == "__main__":
    main()
