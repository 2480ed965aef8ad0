"""Finite-difference verification of the analytic gradients.

Each trial builds a small random student (<= 500 parameters), a random
ensemble of 1-5 teachers and a random policy combination (schedule, gating),
then compares ``backward`` against central differences of the batch loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distill import (
    DistillPolicy,
    Schedule,
    ScheduleKind,
    average_logits,
    gate_mask,
    kd_batch_loss,
    sample_teachers,
    schedule_active,
)
from .nncore import ModelParams, backward, forward, forward_with_cache, init_params

STEP = 1e-5
TOLERANCE = 1e-4
KINK_MARGIN = 1e-3
MAX_PARAMS = 500
EPOCHS = 200


@dataclass
class GradCase:
    trial: int
    dims: list[int]
    batch: int
    n_teachers: int
    sample_k: int
    policy: DistillPolicy
    epoch: int
    kd_active: bool
    error: float = float("nan")

    def describe(self) -> str:
        return (f"trial={self.trial} dims={self.dims} batch={self.batch} teachers={self.n_teachers} "
                f"k={self.sample_k} schedule={self.policy.schedule.kind.value} "
                f"gate={self.policy.gate_on_correct} epoch={self.epoch} kd_active={self.kd_active} "
                f"rel_err={self.error:.3e}")


@dataclass
class GradReport:
    cases: list[GradCase]

    @property
    def max_error(self) -> float:
        return max(c.error for c in self.cases)

    @property
    def worst(self) -> GradCase:
        return max(self.cases, key=lambda c: c.error)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < TOLERANCE)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(loss_fn, theta: np.ndarray, h: float = STEP) -> np.ndarray:
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        up = loss_fn(theta)
        theta[i] = orig - h
        down = loss_fn(theta)
        theta[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def _random_dims(rng) -> list[int]:
    while True:
        depth = int(rng.integers(1, 4))
        dims = [int(rng.integers(2, 7))] + [int(rng.integers(2, 9)) for _ in range(depth - 1)]
        dims.append(int(rng.integers(2, 6)))
        if sum(a * b + b for a, b in zip(dims[:-1], dims[1:])) <= MAX_PARAMS:
            return dims


def _clear_of_kinks(params: ModelParams, x: np.ndarray) -> bool:
    _, cache = forward_with_cache(params, x)
    hidden = [z for _, z in cache[:-1]]
    return all(np.min(np.abs(z)) > KINK_MARGIN for z in hidden) if hidden else True


def check_case(rng: np.random.Generator, trial: int) -> GradCase:
    kinds = list(ScheduleKind)
    dims = _random_dims(rng)
    batch = int(rng.integers(1, 7))
    n = 1 + trial % 5
    k = int(rng.integers(1, n + 1))
    policy = DistillPolicy(Schedule(kinds[trial % len(kinds)]), k, gate_on_correct=bool(trial % 2))
    # every fourth trial lands on an inactive epoch when the schedule has one
    active_set = [e for e in range(EPOCHS) if schedule_active(policy.schedule, e, EPOCHS)]
    idle_set = sorted(set(range(EPOCHS)) - set(active_set))
    pool = idle_set if trial % 4 == 3 and idle_set else active_set
    epoch = int(rng.choice(pool))
    kd_active = schedule_active(policy.schedule, epoch, EPOCHS)

    params = init_params(int(rng.integers(2**32)), dims)
    # perturb biases so they are exercised too
    params = ModelParams(tuple((w, rng.normal(0, 0.1, size=b.shape)) for w, b in params.layers))
    for _ in range(1000):
        x = rng.normal(size=(batch, dims[0]))
        if _clear_of_kinks(params, x):
            break
    y = rng.integers(0, dims[-1], size=batch)

    target = mask = None
    if kd_active:
        teachers = [init_params(int(rng.integers(2**32)), dims) for _ in range(n)]
        chosen = sample_teachers(rng, n, k)
        target = average_logits([forward(teachers[i], x) for i in chosen])
        mask = gate_mask(target, y) if policy.gate_on_correct else None

    def loss_of(theta):
        return kd_batch_loss(forward(ModelParams.from_flat(dims, theta), x), y, target, mask)[0]

    _, dlogits = kd_batch_loss(forward(params, x), y, target, mask)
    analytic = backward(params, x, dlogits).flat()
    numeric = numeric_gradient(loss_of, params.flat().copy())
    case = GradCase(trial, dims, batch, n, k, policy, epoch, kd_active)
    case.error = relative_error(analytic, numeric)
    return case


def run_checks(seed: int = 0, trials: int = 50) -> GradReport:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    return GradReport([check_case(rng, t) for t in range(trials)])
