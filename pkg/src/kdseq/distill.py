"""Teacher-ensemble supervision: logit averaging, the KD loss, sampling,
scheduling and correctness gating."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels as K
from .nncore import ModelParams, ShapeError, as_labels, as_tensor, forward, softmax_cross_entropy


class ScheduleKind(str, enum.Enum):
    EVERY_EPOCH = "every_epoch"
    FIRST_K = "first20"
    MIDDLE_K = "middle20"
    LAST_K = "last20"
    FIRST_LAST_SPLIT = "first_last10"
    ONE_PER_TEN = "one_per_ten"
    TWO_PER_TWENTY = "two_per_twenty"


SCHEDULE_NAMES = [k.value for k in ScheduleKind]
# only these kinds read the budget; the periodic ones are fixed by their rule
BUDGETED = {ScheduleKind.FIRST_K, ScheduleKind.MIDDLE_K, ScheduleKind.LAST_K, ScheduleKind.FIRST_LAST_SPLIT}


@dataclass(frozen=True)
class Schedule:
    kind: ScheduleKind = ScheduleKind.EVERY_EPOCH
    budget: int = 20

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.budget < 0:
            raise ValueError("budget must be >= 0")


@dataclass(frozen=True)
class DistillPolicy:
    schedule: Schedule = field(default_factory=Schedule)
    sample_k: int = 0
    gate_on_correct: bool = False
    teacher_subset: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.sample_k < 0:
            raise ValueError("sample_k must be >= 0")
        if self.teacher_subset is not None:
            object.__setattr__(self, "teacher_subset", tuple(self.teacher_subset))

    def to_dict(self) -> dict:
        return {
            "schedule": self.schedule.kind.value,
            "budget": self.schedule.budget,
            "sample_k": self.sample_k,
            "gate_on_correct": self.gate_on_correct,
            "teacher_subset": list(self.teacher_subset) if self.teacher_subset is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DistillPolicy":
        return cls(
            schedule=Schedule(d.get("schedule", "every_epoch"), int(d.get("budget", 20))),
            sample_k=int(d.get("sample_k", 0)),
            gate_on_correct=bool(d.get("gate_on_correct", False)),
            teacher_subset=d.get("teacher_subset"),
        )


@dataclass(frozen=True, eq=False)
class TeacherEnsemble:
    members: tuple[tuple[str, ModelParams], ...]

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        ids = [tid for tid, _ in self.members]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate teacher ids in {ids}")
        dims = {(p.dims[0], p.dims[-1]) for _, p in self.members}
        if len(dims) > 1:
            raise ShapeError(f"teachers disagree on input/output widths: {sorted(dims)}")

    def __len__(self):
        return len(self.members)

    @property
    def ids(self) -> list[str]:
        return [tid for tid, _ in self.members]

    def subset(self, ids: Sequence[str]) -> "TeacherEnsemble":
        lookup = dict(self.members)
        missing = [i for i in ids if i not in lookup]
        if missing:
            raise KeyError(f"unknown teacher ids {missing}")
        return TeacherEnsemble(tuple((i, lookup[i]) for i in ids))

    def logits(self, x, indices: Sequence[int]) -> list[np.ndarray]:
        return [forward(self.members[i][1], x) for i in indices]


def average_logits(per_teacher: Sequence[np.ndarray]) -> np.ndarray:
    if len(per_teacher) == 0:
        raise ValueError("need at least one teacher's logits")
    arrays = [as_tensor(t) for t in per_teacher]
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ShapeError("teacher logits differ in shape")
    return K.mean_stack(np.stack(arrays))


def sample_teachers(rng: np.random.Generator, n: int, k: int) -> list[int]:
    """``k`` distinct indices drawn uniformly from ``range(n)``."""
    if not 0 <= k <= n:
        raise ValueError(f"cannot sample {k} of {n} teachers")
    if k == 0:
        return []
    return [int(i) for i in rng.choice(n, size=k, replace=False)]


def step_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, batch, 0x5D])


def schedule_active(schedule: Schedule, epoch: int, total_epochs: int) -> bool:
    b, e = schedule.budget, total_epochs
    if schedule.kind in BUDGETED and b > e:
        raise ValueError(f"KD budget {b} exceeds {e} epochs")
    if not 0 <= epoch < e:
        raise ValueError(f"epoch {epoch} outside [0, {e})")
    kind = schedule.kind
    if kind is ScheduleKind.EVERY_EPOCH:
        return True
    if kind is ScheduleKind.FIRST_K:
        return epoch < b
    if kind is ScheduleKind.MIDDLE_K:
        start = (e - b) // 2
        return start <= epoch < start + b
    if kind is ScheduleKind.LAST_K:
        return epoch >= e - b
    if kind is ScheduleKind.FIRST_LAST_SPLIT:
        return epoch < b // 2 or epoch >= e - b // 2
    if kind is ScheduleKind.ONE_PER_TEN:
        return epoch % 10 == 0
    if kind is ScheduleKind.TWO_PER_TWENTY:
        return epoch % 20 in (0, 1)
    raise ValueError(f"unknown schedule {kind!r}")  # pragma: no cover


def active_epochs(schedule: Schedule, total_epochs: int) -> list[int]:
    return [ep for ep in range(total_epochs) if schedule_active(schedule, ep, total_epochs)]


def gate_mask(avg_teacher_logits, y) -> np.ndarray:
    """True where the averaged teacher's argmax matches the label.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class.
    """
    logits, y = as_tensor(avg_teacher_logits), as_labels(y)
    if logits.shape[0] != y.shape[0]:
        raise ShapeError(f"{logits.shape[0]} teacher rows for {y.shape[0]} labels")
    return np.argmax(logits, axis=1) == y


def kd_batch_loss(student_logits, y, avg_teacher_logits=None, mask=None
                  ) -> tuple[float, np.ndarray]:
    """Cross-entropy to the labels plus MSE to the averaged teacher logits.

    Rows where ``mask`` is False drop out of the MSE term, but the MSE is still
    normalized by the full batch-times-classes count.
    """
    ce, grad = softmax_cross_entropy(student_logits, y)
    if avg_teacher_logits is None:
        if mask is not None:
            raise ValueError("a gate mask needs teacher logits")
        return ce, grad
    student, target = as_tensor(student_logits), as_tensor(avg_teacher_logits)
    if student.shape != target.shape:
        raise ShapeError(f"student logits {student.shape} vs teacher logits {target.shape}")
    if mask is None:
        mask = np.ones(student.shape[0], dtype=np.bool_)
    else:
        mask = np.ascontiguousarray(mask, dtype=np.bool_)
        if mask.shape != (student.shape[0],):
            raise ShapeError(f"mask length {mask.shape} != batch size {student.shape[0]}")
    mse, mse_grad = K.masked_mse(student, target, mask)
    return ce + mse, grad + mse_grad


def effective_k(policy: DistillPolicy, n: int) -> int:
    if policy.sample_k > n:
        raise ValueError(f"sample_k={policy.sample_k} exceeds the {n} available teachers")
    return policy.sample_k


def teacher_step_count(policy: DistillPolicy, n: int, total_epochs: int,
                       steps_per_epoch: int) -> int:
    """Number of teacher forward passes (per example batch) over a run."""
    k = effective_k(policy, n)
    if k == 0:
        return 0
    return len(active_epochs(policy.schedule, total_epochs)) * steps_per_epoch * k
