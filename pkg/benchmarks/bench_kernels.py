"""Time the compiled kernels against the numpy fallback on U-Net-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Also reports the largest disagreement between the two backends.
"""
import argparse
import timeit

import numpy as np

from imseg import kernels

CASES = {
    "conv 16x8x64x64 -> 8": ((16, 8, 66, 66), (8, 8, 3, 3)),
    "conv 16x32x16x16 -> 64": ((16, 32, 18, 18), (64, 32, 3, 3)),
    "1x1 conv 16x8x64x64 -> 10": ((16, 8, 64, 64), (10, 8, 1, 1)),
}


def bench_conv(mod, xpad, w, repeat):
    out_h, out_w = xpad.shape[2] - w.shape[2] + 1, xpad.shape[3] - w.shape[3] + 1
    y = mod.conv2d_forward(xpad, w, 1, out_h, out_w)
    g = np.ones_like(y)

    def run():
        mod.conv2d_forward(xpad, w, 1, out_h, out_w)
        mod.conv2d_backward_input(g, w, 1, xpad.shape[2], xpad.shape[3])
        mod.conv2d_backward_weight(g, xpad, 1, w.shape[2], w.shape[3])

    return min(timeit.repeat(run, number=1, repeat=repeat)), y


def bench_misc(mod, x, repeat):
    planes = x.reshape(-1, *x.shape[2:])

    def run():
        out, arg = mod.maxpool2x2_forward(x)
        mod.maxpool2x2_backward(out, arg)
        mod.box_sum_adjoint(mod.box_sum_valid(planes, 4), 4)

    return min(timeit.repeat(run, number=1, repeat=repeat)), mod.box_sum_valid(planes, 4)


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = kernels.backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'case':<30}" + "".join(f"{name:>12}" for name in backends) + f"{'speedup':>10}{'max diff':>12}")
    rows = [(label, lambda m, xs=xs, ws=ws: bench_conv(m, xs, ws, args.repeat))
            for label, (xs, ws) in ((k, (rng.standard_normal(a), rng.standard_normal(b))) for k, (a, b) in CASES.items())]
    pool_input = rng.standard_normal((16, 8, 64, 64))
    rows.append(("maxpool + box sum 16x8x64x64", lambda m: bench_misc(m, pool_input, args.repeat)))
    for label, fn in rows:
        results = {name: fn(mod) for name, mod in backends.items()}
        times = "".join(f"{results[n][0] * 1e3:10.1f}ms" for n in backends)
        if "compiled" in results:
            speedup = results["python"][0] / results["compiled"][0]
            diff = float(np.abs(np.asarray(results["python"][1]) - np.asarray(results["compiled"][1])).max())
            print(f"{label:<30}{times}{speedup:9.1f}x{diff:12.1e}")
        else:
            print(f"{label:<30}{times}")


if __name__ == "__main__":
    main()
