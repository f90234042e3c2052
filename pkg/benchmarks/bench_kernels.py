"""Compare the compiled and numpy kernel backends.

Times a forward pass, a forward+backward pass and a single-day step (the
unit the streaming loop calls most) on a synthetic basin, and checks that
both backends agree.

    python benchmarks/bench_kernels.py [--segments 12] [--days 365] [--repeat 5]
"""
import argparse
import json
import time

import numpy as np

from riveral import backend
from riveral.graph import build_graph
from riveral.model import NetState, PredictiveModel
from riveral.synth import SynthConfig, generate_basin


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench(name, basin, days, hidden, repeat):
    k = backend.get(name)
    g = build_graph(basin.edges, "downstream", basin.segment_ids)
    m = PredictiveModel(basin.features.shape[2], g, hidden, seed=0, kernels=k)
    X = np.ascontiguousarray(basin.features[:, :days].transpose(1, 0, 2))
    X = (X - X.mean(axis=(0, 1))) / X.std(axis=(0, 1))
    packed = m._packed()
    mk = lambda: m.kernels.forward(*packed, X, np.zeros((m.n, m.H)), np.zeros((m.n, m.H)), None, True)
    y, hs, cs, cache = mk()
    dY = np.ones_like(y) / y.size

    def fwd_bwd():
        y, hs, cs, cache = mk()
        m.kernels.backward(*packed, X, None, hs, cs, cache, dY)

    state = NetState.zeros(m.n, m.H)
    step = lambda: [m.step(state, X[t], packed=packed) for t in range(50)]
    return {
        "forward_s": best_of(lambda: m.kernels.forward(*packed, X, np.zeros((m.n, m.H)),
                                                       np.zeros((m.n, m.H)), None, False), repeat),
        "forward_backward_s": best_of(fwd_bwd, repeat),
        "step_us": best_of(step, repeat) / 50 * 1e6,
        "y": y,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--segments", type=int, default=12)
    ap.add_argument("--days", type=int, default=365)
    ap.add_argument("--hidden", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true", help="print machine-readable results")
    args = ap.parse_args()
    basin = generate_basin(SynthConfig(n_segments=args.segments, years=max(1, -(-args.days // 365)), seed=0))
    res = {name: bench(name, basin, args.days, args.hidden, args.repeat) for name in sorted(backend.BACKENDS)}
    names = sorted(res)
    out = {n: {k: v for k, v in r.items() if k != "y"} for n, r in res.items()}
    if len(names) == 2:
        out["max_abs_diff"] = float(np.abs(res[names[0]]["y"] - res[names[1]]["y"]).max())
        out["speedup"] = {k: res["python"][k] / res["cython"][k] for k in ("forward_s", "forward_backward_s", "step_us")}
    if args.json:
        print(json.dumps(out, indent=1, sort_keys=True))
        return
    print(f"{args.segments} segments, {args.days} days, hidden {args.hidden}, best of {args.repeat}")
    print(f"{'backend':<8}{'forward':>12}{'fwd+bwd':>12}{'step':>12}")
    for n in names:
        r = out[n]
        print(f"{n:<8}{r['forward_s'] * 1e3:>10.2f}ms{r['forward_backward_s'] * 1e3:>10.2f}ms{r['step_us']:>10.1f}us")
    if "speedup" in out:
        s = out["speedup"]
        print(f"{'speedup':<8}{s['forward_s']:>11.1f}x{s['forward_backward_s']:>11.1f}x{s['step_us']:>11.1f}x")
        print(f"max |y_cython - y_python| = {out['max_abs_diff']:.2e}")
    else:
        print("compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
