"""Multi-class hinge and distillation losses (numpy references and torch versions)."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigError


def hinge_loss(scores, label: int) -> tuple[float, np.ndarray]:
    """``sum_{j != y} max(0, 1 - s_y + s_j)`` and its subgradient."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or len(s) < 2:
        raise ConfigError("hinge loss needs a score vector with at least 2 classes")
    if not 0 <= label < len(s):
        raise ConfigError(f"label {label} out of range for {len(s)} classes")
    margins = 1.0 - s[label] + s
    margins[label] = 0.0
    active = margins > 0
    grad = active.astype(np.float64)
    grad[label] = -float(active.sum())
    return float(margins[active].sum()), grad


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def kd_term(student, teacher, tau: float) -> float:
    """``tau^2 * KL(softmax(teacher / tau) || softmax(student / tau))``."""
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    lt = _log_softmax(np.asarray(teacher, np.float64) / tau)
    ls = _log_softmax(np.asarray(student, np.float64) / tau)
    return float(tau**2 * np.sum(np.exp(lt) * (lt - ls)))


def kd_loss(student, teacher, lam: float, tau: float, task_loss: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("distillation weight must lie in [0, 1]")
    if lam == 0.0:
        return float(task_loss)
    return (1.0 - lam) * task_loss + lam * kd_term(student, teacher, tau)


# --- torch -----------------------------------------------------------------

def hinge_loss_t(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch mean of the per-sample multi-class hinge loss."""
    s_y = scores.gather(1, labels[:, None])
    margins = (1.0 - s_y + scores).clamp(min=0.0)
    margins = margins.scatter(1, labels[:, None], 0.0)
    return margins.sum(dim=1).mean()


def kd_term_t(student: torch.Tensor, teacher: torch.Tensor, tau: float) -> torch.Tensor:
    lt = F.log_softmax(teacher / tau, dim=1)
    ls = F.log_softmax(student / tau, dim=1)
    return tau**2 * (lt.exp() * (lt - ls)).sum(dim=1).mean()


def task_loss_t(scores: torch.Tensor, labels: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "hinge":
        return hinge_loss_t(scores, labels)
    if kind == "cross_entropy":
        return F.cross_entropy(scores, labels)
    raise ConfigError(f"unknown loss {kind!r}")


def total_loss_t(scores, labels, kind: str, teacher=None, lam: float = 0.0, tau: float = 1.0) -> torch.Tensor:
    task = task_loss_t(scores, labels, kind)
    if teacher is None or lam == 0.0:
        return task
    return (1.0 - lam) * task + lam * kd_term_t(scores, teacher, tau)
