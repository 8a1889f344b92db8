"""Three-phase training: full precision, ternary-aware, then fixed ternary.

Phase 1 trains every parameter in full precision while the tree's path
sharpness ramps up. Phase 2 routes the SPN shadows through TWN quantization
(straight-through gradient, shadows clipped to [-1, 1]). Phase 3 freezes the
ternary patterns, absorbs all scales into ``a_hat`` and trains only ``a_hat``,
biases, batch norm affine terms, dense layers and the tree's float parameters.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields

import numpy as np
import torch

from ..data import FeatureDataset
from ..errors import ConfigError, NumericError
from ..model.arch import read_config, section
from ..model.graph import HybridModel, predict
from .losses import total_loss_t
from .torchmodel import THybrid, to_torch

HISTORY_FIELDS = ("epoch", "phase", "loss", "train_acc", "val_acc", "sigma_I", "lr")


@dataclass
class TrainConfig:
    batch_size: int = 20
    epochs_phase1: int = 135
    epochs_phase2: int = 135
    epochs_phase3: int = 135
    lr: float = 0.001
    lr_step: int = 45
    lr_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    loss: str = "hinge"
    kd_lambda: float = 0.5
    kd_tau: float = 3.0
    teacher: str | None = None
    sigma_I_start: float = 1.0
    sigma_I_end: float = 100.0
    sigma_I_schedule: dict[int, float] | None = None
    seed: int = 0
    eval_batch: int = 256
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("epochs_phase1", "epochs_phase2", "epochs_phase3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.kd_lambda <= 1.0:
            raise ConfigError("kd_lambda must lie in [0, 1]")
        if self.kd_tau <= 0:
            raise ConfigError("kd_tau must be positive")
        if self.loss not in ("hinge", "cross_entropy"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.lr <= 0 or self.lr_step < 1 or not 0 < self.lr_decay <= 1:
            raise ConfigError("invalid learning-rate schedule")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)} - {"extra", "sigma_I_schedule", "betas"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown [train] keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> TrainConfig:
        return cls.from_dict(section(read_config(path), "train"))

    def sigma_I_at(self, epoch: int) -> float:
        """Path sharpness for a phase-1 epoch (0-based); frozen at the end value after."""
        if self.sigma_I_schedule:
            keys = sorted(k for k in self.sigma_I_schedule if k <= epoch)
            return float(self.sigma_I_schedule[keys[-1]]) if keys else self.sigma_I_start
        n = self.epochs_phase1
        if n <= 1:
            return self.sigma_I_end
        frac = min(epoch, n - 1) / (n - 1)
        return self.sigma_I_start + frac * (self.sigma_I_end - self.sigma_I_start)


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        wr.writeheader()
        for r in self.rows:
            wr.writerow({k: r[k] for k in HISTORY_FIELDS})
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


# --- steps ------------------------------------------------------------------

def quantize_aware_step(net: THybrid, optimizer: torch.optim.Optimizer) -> None:
    """Apply one optimizer step, then clip every SPN shadow back into [-1, 1]."""
    optimizer.step()
    for m in net.strassen():
        m.clamp_shadows()


def set_phase(net: THybrid, phase: int) -> None:
    """Move strassen layers into the state of ``phase`` (1, 2 or 3)."""
    for m in net.strassen():
        if phase == 1 and m.state != "fixed":
            m.state = "fp"
        elif phase == 2 and m.state != "fixed":
            m.state = "ternary"
        elif phase == 3:
            m.collapse()


def _bn_mode(net: THybrid, frozen: bool) -> None:
    for bn in net.batchnorms():
        bn.train(not frozen)


def _accuracy(net: THybrid, x: torch.Tensor, y: torch.Tensor, batch: int) -> float:
    modes = [(m, m.training) for m in net.modules()]
    net.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(x), batch):
            correct += int((net(x[i : i + batch]).argmax(1) == y[i : i + batch]).sum())
    for m, mode in modes:
        m.training = mode
    return correct / max(1, len(x))


def _teacher_scores(teacher: HybridModel | None, x: np.ndarray) -> np.ndarray | None:
    if teacher is None:
        return None
    return predict(teacher, x).astype(np.float32)


def train(
    model: HybridModel,
    train_ds: FeatureDataset,
    config: TrainConfig,
    val_ds: FeatureDataset | None = None,
    teacher: HybridModel | None = None,
    phases: tuple[int, ...] = (1, 2, 3),
    log=None,
) -> tuple[HybridModel, History]:
    """Run the requested phases; returns the exported model and per-epoch history.

    With every requested phase at 0 epochs the input model is returned as is.
    Phase 3 (when it runs) leaves the model in collapsed inference form.
    """
    if len(train_ds) == 0:
        raise ConfigError("training set is empty")
    if train_ds.num_classes != model.num_classes:
        raise ConfigError("dataset and model disagree on the number of classes")
    epochs = {1: config.epochs_phase1, 2: config.epochs_phase2, 3: config.epochs_phase3}
    history = History()
    if all(epochs[p] == 0 for p in phases):
        return model, history
    set_deterministic(config.seed)
    rng = np.random.default_rng(config.seed)
    net = to_torch(model)
    net.train()
    x = torch.as_tensor(train_ds.x, dtype=torch.float32)
    y = torch.as_tensor(train_ds.y, dtype=torch.long)
    xv = yv = None
    if val_ds is not None and len(val_ds):
        xv = torch.as_tensor(val_ds.x, dtype=torch.float32)
        yv = torch.as_tensor(val_ds.y, dtype=torch.long)
    t_scores = _teacher_scores(teacher, train_ds.x) if config.kd_lambda > 0 else None
    t_scores = None if t_scores is None else torch.as_tensor(t_scores)
    epoch_total = 0
    sigma_I = net.head.sigma_I if hasattr(net.head, "sigma_I") else float("nan")
    for phase in phases:
        n_epochs = epochs[phase]
        if n_epochs == 0:
            continue
        set_phase(net, phase)
        _bn_mode(net, frozen=(phase == 3))
        params = [p for p in net.parameters() if p.requires_grad]
        opt = torch.optim.Adam(params, lr=config.lr, betas=config.betas, eps=config.adam_eps)
        sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.lr_step, gamma=config.lr_decay)
        for ep in range(n_epochs):
            if phase == 1:
                sigma_I = config.sigma_I_at(ep)
                net.set_sigma_I(sigma_I)
            lr = opt.param_groups[0]["lr"]
            order = torch.as_tensor(rng.permutation(len(y)))
            total, seen = 0.0, 0
            for i in range(0, len(order), config.batch_size):
                idx = order[i : i + config.batch_size]
                if len(idx) < 2 and net.batchnorms() and phase != 3:
                    continue  # batch norm needs more than one sample
                scores = net(x[idx])
                teach = None if t_scores is None else t_scores[idx]
                loss = total_loss_t(scores, y[idx], config.loss, teach, config.kd_lambda, config.kd_tau)
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite loss in phase {phase}, epoch {ep}")
                opt.zero_grad()
                loss.backward()
                if phase == 2:
                    quantize_aware_step(net, opt)
                else:
                    opt.step()
                total += float(loss.detach()) * len(idx)
                seen += len(idx)
            sched.step()
            train_acc = _accuracy(net, x, y, config.eval_batch)
            val_acc = _accuracy(net, xv, yv, config.eval_batch) if xv is not None else math.nan
            history.add(
                epoch=epoch_total,
                phase=phase,
                loss=total / max(1, seen),
                train_acc=train_acc,
                val_acc=val_acc,
                sigma_I=sigma_I,
                lr=lr,
            )
            if log is not None:
                log(history.rows[-1])
            epoch_total += 1
    net.eval()
    return net.export(), history


# --- gradient checking ------------------------------------------------------

def grad_check(fn, params: list[torch.Tensor], eps: float = 1e-4, floor: float = 1e-6) -> float:
    """Max over ``params`` of the relative error between autograd and central differences.

    ``fn`` maps the parameter list to a scalar loss; everything runs in
    float64. The error of one tensor is ``|g_auto - g_fd| / max(|g_auto|, |g_fd|)``
    (Euclidean norms). The denominator never drops below ``floor`` so a
    gradient that is zero by construction (a bias ahead of batch norm) is not
    judged on finite-difference noise.
    """
    params = [p.detach().double().clone().requires_grad_(True) for p in params]
    loss = fn(params)
    auto = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, auto):
            g = torch.zeros_like(p) if g is None else g
            fd = torch.zeros_like(p)
            flat, fd_flat = p.view(-1), fd.view(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + eps
                up = float(fn(params))
                flat[i] = old - eps
                down = float(fn(params))
                flat[i] = old
                fd_flat[i] = (up - down) / (2 * eps)
            denom = max(float(g.norm()), float(fd.norm()), floor)
            worst = max(worst, float((g - fd).norm()) / denom)
    return worst
