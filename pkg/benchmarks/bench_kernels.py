"""Compare the compiled and numpy kernels on the workloads that dominate a run.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Workloads: a full-batch loss+gradient of a grown network (training), and a
batched forward / vector-Jacobian pass over 64 extension candidates (search).
"""

import argparse
import time

import numpy as np

from hiernet import _backend
from hiernet.loss import Objective, TrainingSet
from hiernet.experiments import sample_inputs
from hiernet.net import Architecture, WeightSet, param_count


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def workloads():
    X = sample_inputs(2, 1024, "grid")
    ts = TrainingSet(X, X.sum(axis=1) ** 2 / 2)
    obj = Objective(ts)
    rng = np.random.default_rng(0)
    out = []
    for widths in [(2, 50, 1), (10, 2, 40, 1)]:
        arch = Architecture(widths)
        Xw = rng.random((1024, widths[0]))
        o = obj if widths[0] == 2 else Objective(TrainingSet(Xw, Xw.sum(axis=1) ** 2 / 10))
        vec = WeightSet.random(arch, rng).to_vector()
        out.append((f"loss_grad {widths}", lambda o=o, v=vec, a=arch: o.loss_grad(v, a)))
    star = Architecture((2, 3, 1))
    P = rng.uniform(-1, 1, size=(64, param_count(star)))
    S = rng.normal(size=(64, 1024))
    out.append(("forward 64x(2,3,1)", lambda: obj.responses_batch(P, star)))
    out.append(("vjp 64x(2,3,1)", lambda: obj.pullback_batch(P, star, S)))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    names = _backend.available()
    results = {}
    for name in names:
        _backend.use(name)
        for label, fn in workloads():
            results.setdefault(label, {})[name] = _time(fn, args.repeat)
    print(f"{'workload':<28}" + "".join(f"{n:>12}" for n in names) + ("    speedup" if len(names) > 1 else ""))
    for label, row in results.items():
        line = f"{label:<28}" + "".join(f"{row[n] * 1e3:>10.2f}ms" for n in names)
        if len(names) > 1:
            line += f"{row['python'] / row['cython']:>10.1f}x"
        print(line)


if __name__ == "__main__":
    main()
