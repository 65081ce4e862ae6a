"""Compare the numba and pure-numpy kernel paths at training-sized inputs.

Usage:
    python benchmarks/bench_kernels.py [--repeat 20] [--batch 128]

Also times one forward+backward step of each model family under whichever
path the TOKENATTACK_DISABLE_NUMBA flag selects.
"""

import argparse
import time

import numpy as np

from tokenattack import _kernels


def timeit(fn, repeat):
    fn()  # warm-up / JIT compile
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat * 1e3


def kernel_cases(batch, rng):
    tokens = rng.normal(size=(batch * 49, 64)).astype(np.float32)
    hidden = rng.normal(size=(batch * 49, 128)).astype(np.float32)
    scores = rng.normal(size=(batch * 4 * 49, 49)).astype(np.float32)
    gamma = np.ones(64, np.float32)
    beta = np.zeros(64, np.float32)
    pix = rng.normal(size=(3, 224, 224)).astype(np.float32)
    mask = rng.random(size=(batch, 1, 28, 28)) < 0.1
    xb = rng.normal(size=(batch, 1, 28, 28)).astype(np.float32)
    lo = xb - 0.1
    hi = xb + 0.1

    def cases(k):
        ln_out, xhat, rstd = k.layernorm_fwd(tokens, gamma, beta, 1e-5)
        sm = k.softmax_fwd(scores)
        return {
            "gelu_fwd": lambda: k.gelu_fwd(hidden),
            "gelu_bwd": lambda: k.gelu_bwd(hidden, hidden),
            "softmax_fwd": lambda: k.softmax_fwd(scores),
            "softmax_bwd": lambda: k.softmax_bwd(sm, scores),
            "layernorm_fwd": lambda: k.layernorm_fwd(tokens, gamma, beta, 1e-5),
            "layernorm_bwd": lambda: k.layernorm_bwd(tokens, xhat, rstd, gamma),
            "block_l2": lambda: k.block_l2(pix, 16),
            "project": lambda: k.project(xb, xb, mask, lo, hi),
        }

    return cases


def model_step_times(batch, repeat, rng):
    from tokenattack.models import build_model, default_spec
    from tokenattack.tensor import Tensor, backward, cross_entropy

    x = rng.normal(size=(batch, 1, 28, 28)).astype(np.float32)
    y = rng.integers(0, 10, batch)
    out = {}
    for fam in ("vit", "resnet", "mixer"):
        model = build_model(default_spec(fam), 0).requires_grad_(True)

        def step():
            model.zero_grad()
            backward(cross_entropy(model(Tensor(x)), y))

        out[fam] = timeit(step, repeat)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=128)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    cases = kernel_cases(args.batch, rng)

    np_cases = cases(_kernels.numpy_impl)
    nb_cases = cases(_kernels.numba_impl) if _kernels.numba_impl is not None else {}
    print(f"{'kernel':<16}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, fn in np_cases.items():
        t_np = timeit(fn, args.repeat)
        if name in nb_cases:
            t_nb = timeit(nb_cases[name], args.repeat)
            print(f"{name:<16}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>9.2f}x")
        else:
            print(f"{name:<16}{t_np:>12.3f}{'-':>12}")

    print(f"\nfull train step, batch {args.batch}, backend={_kernels.backend_name()}")
    for fam, ms in model_step_times(args.batch, max(3, args.repeat // 4), rng).items():
        print(f"  {fam:<8}{ms:>10.1f} ms")


if __name__ == "__main__":
    main()
