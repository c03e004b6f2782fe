"""Mean teacher: an EMA shadow of the student discriminator.

The teacher starts as an exact copy of the student, receives no gradients,
and after every discriminator optimization step each of its arrays moves as
t <- alpha * t + (1 - alpha) * s. Predictions run on noise-perturbed inputs
with the leaking module always off, so consistency compares segmentation
behaviour on (perturbed) real data only.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
from torch import nn

from .data import PatchBatch, add_input_noise
from .discriminator import UNetDiscriminator, class_probabilities
from .errors import ConfigError

ALPHA_RANGE = (0.9, 0.999)


@dataclass
class TeacherState:
    """EMA copy of the discriminator plus smoothing and input-noise scale."""

    net: UNetDiscriminator
    alpha: float = 0.99
    noise_lambda: float = 0.1
    step: int = field(default=0)

    def __post_init__(self):
        if not ALPHA_RANGE[0] <= self.alpha <= ALPHA_RANGE[1]:
            raise ConfigError(
                f"EMA alpha must lie in [{ALPHA_RANGE[0]}, {ALPHA_RANGE[1]}], got {self.alpha}"
            )
        if not 0.0 < self.noise_lambda < 1.0:
            raise ConfigError(f"teacher noise lambda must lie in (0, 1), got {self.noise_lambda}")


def init_teacher(
    student: UNetDiscriminator, alpha: float = 0.99, noise_lambda: float = 0.1
) -> TeacherState:
    """Clone the student; freeze the copy so it never accumulates gradients."""
    net = copy.deepcopy(student)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return TeacherState(net=net, alpha=alpha, noise_lambda=noise_lambda)


def ema_update(teacher: TeacherState, student: nn.Module | dict) -> TeacherState:
    """Move every teacher array toward the student's; student untouched."""
    student_state = student.state_dict() if isinstance(student, nn.Module) else student
    teacher_state = teacher.net.state_dict()
    if set(teacher_state) != set(student_state):
        missing = set(teacher_state) ^ set(student_state)
        raise ValueError(f"teacher/student parameter sets differ: {sorted(missing)[:4]}")
    a = teacher.alpha
    with torch.no_grad():
        for name, t in teacher_state.items():
            s = student_state[name]
            if t.shape != s.shape:
                raise ValueError(
                    f"shape mismatch for '{name}': teacher {tuple(t.shape)} vs student {tuple(s.shape)}"
                )
            if t.is_floating_point():
                t.mul_(a).add_(s, alpha=1.0 - a)
            else:
                t.copy_(s)
    teacher.step += 1
    return teacher


def teacher_predict(teacher: TeacherState, x_ul: PatchBatch, seed: int) -> torch.Tensor:
    """K+1 posterior of the teacher on the noise-perturbed batch.

    No gradients are recorded and the leaking module is never used on the
    teacher path.
    """
    if teacher.net is None:
        raise ValueError("teacher not initialized")
    noised = add_input_noise(x_ul, teacher.noise_lambda, seed)
    with torch.no_grad():
        logits, _ = teacher.net(noised.pixels, use_leak=False)
        return class_probabilities(logits)
