"""Compare the numba kernels against the numpy fallback.

Runs each kernel on training-sized inputs and then times whole training
epochs with each backend in a fresh interpreter (the backend is picked at
import time from KDSEQ_DISABLE_NUMBA).

    python benchmarks/bench_kernels.py [--repeats 200]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from kdseq import _kernels as K

EPOCH_SNIPPET = """
import time
from kdseq import BACKEND
from kdseq.dataset import make_spirals
from kdseq.distill import DistillPolicy, Schedule, TeacherEnsemble
from kdseq.nncore import SgdConfig
from kdseq import orchestrator as O
tr = make_spirals(1, 3, 200, 0.1); te = make_spirals(2, 3, 200, 0.1)
cfg = SgdConfig(0.1, epochs={epochs}, batch_size={batch}, seed=0)
O.train_teacher(SgdConfig(0.1, epochs=1, batch_size={batch}), tr, te, "warm")
t = time.perf_counter()
teachers = [O.train_teacher(cfg, tr, te, f"B{{i}}") for i in range(5)]
t_teach = time.perf_counter() - t
ens = TeacherEnsemble(tuple((r.run_id, r.params) for r in teachers))
t = time.perf_counter()
O.train_student(cfg, ens, DistillPolicy(Schedule(), 5), tr, te, 1)
t_kd = time.perf_counter() - t
print(BACKEND, t_teach / 5, t_kd)
"""


def kernel_cases(rng, batch=128, width=64, classes=3):
    x = rng.normal(size=(batch, width))
    w = rng.normal(size=(width, width))
    b = rng.normal(size=width)
    dz = rng.normal(size=(batch, width))
    logits = rng.normal(size=(batch, classes))
    labels = rng.integers(0, classes, batch)
    mask = rng.random(batch) < 0.8
    stack = rng.normal(size=(5, batch, classes))
    return {
        "dense_forward": (x, w, b, True),
        "dense_backward": (x, w, dz),
        "relu_backward": (dz, x),
        "softmax_xent": (logits, labels),
        "masked_mse": (logits, logits[::-1].copy(), mask),
        "mean_stack": (stack,),
    }


def bench_kernels(repeats):
    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'kernel':<16}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, args in cases.items():
        np_fn, nb_fn = getattr(K, f"np_{name}"), getattr(K, f"nb_{name}")
        nb_fn(*args)  # compile
        t_np = min(timeit.repeat(lambda: np_fn(*args), number=repeats, repeat=3)) / repeats
        t_nb = min(timeit.repeat(lambda: nb_fn(*args), number=repeats, repeat=3)) / repeats
        print(f"{name:<16}{t_np * 1e6:>12.2f}{t_nb * 1e6:>12.2f}{t_np / t_nb:>10.2f}")


def bench_training(epochs, batch):
    print(f"\nfull runs ({epochs} epochs, batch {batch}): seconds per teacher run, per 5-teacher KD run")
    for disable in ("1", "0"):
        env = {**os.environ, "KDSEQ_DISABLE_NUMBA": disable}
        out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET.format(epochs=epochs, batch=batch)],
                             env=env, capture_output=True, text=True, check=True).stdout.split()
        print(f"  {out[0]:<6} teacher {float(out[1]):.3f}s  kd-student {float(out[2]):.3f}s")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    bench_kernels(args.repeats)
    bench_training(args.epochs, args.batch)


if __name__ == "__main__":
    main()
