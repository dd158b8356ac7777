"""Two-stage training: cosine softmax to convergence, freeze W, then weight-centric fine-tuning."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .heads import LEVELS, SCALE_FLOOR
from .losses import FrozenWeights, LossConfig, combined_cost, cosine_softmax_loss, weight_centric_loss
from .model import MultiLevelNet, is_finite

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    stage1_lr: float = 0.1
    lr_decay: float = 0.1
    lr_step: int = 15
    stage1_epochs: int = 40
    stage2_lr: float = 0.01
    stage2_epochs: int = 20
    momentum: float = 0.9
    plateau_stop: bool = True
    grad_clip: float = 1.0  # global gradient-norm cap; 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.stage1_lr < 0 or self.stage2_lr < 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("learning rates must be >= 0 and lr_decay in (0, 1]")
        if self.lr_step < 1 or self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be nonnegative and lr_step >= 1")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def stage1_rate(self, epoch: int) -> float:
        return self.stage1_lr * self.lr_decay ** (epoch // self.lr_step)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    stage: int
    lr: float
    loss_cs: dict
    loss_cen: dict
    accuracy: dict
    val_loss: float
    seconds: float

    COLUMNS = (
        ["epoch", "stage", "lr"]
        + [f"cs_{lv}" for lv in LEVELS]
        + [f"cen_{lv}" for lv in LEVELS]
        + [f"acc_{lv}" for lv in LEVELS]
        + ["val_cs", "seconds"]
    )

    def to_tsv(self) -> str:
        vals = [str(self.epoch), str(self.stage), f"{self.lr:.6g}"]
        vals += [f"{self.loss_cs[lv]:.6f}" for lv in LEVELS]
        vals += [f"{self.loss_cen[lv]:.6f}" for lv in LEVELS]
        vals += [f"{self.accuracy[lv]:.4f}" for lv in LEVELS]
        vals += [f"{self.val_loss:.6f}", f"{self.seconds:.3f}"]
        return "\t".join(vals)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def to_tsv(self) -> str:
        """One epoch per line, tab-separated, header first."""
        lines = ["\t".join(EpochRecord.COLUMNS)] + [r.to_tsv() for r in self.records]
        return "\n".join(lines) + "\n"


class _SGD:
    def __init__(self, momentum: float):
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        for name in sorted(grads):
            g = grads[name]
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] = params[name] - lr * v


def _clip(grads: dict, max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        for name in grads:
            grads[name] = grads[name] * (max_norm / total)


def _classifier_weights(model: MultiLevelNet, frozen: FrozenWeights | None) -> dict:
    weights = {}
    for lv in LEVELS:
        weights[lv] = model.classifier(lv) if frozen is None else frozen[lv]
        weights[(lv, "scale")] = model.scale(lv)
    return weights


def branch_losses(model: MultiLevelNet, data: LabeledDataset, loss_config: LossConfig, frozen=None) -> dict:
    """Per-level cosine softmax loss, centric loss (if frozen given) and accuracy on ``data``."""
    feats = model.embed(data.images)
    weights = _classifier_weights(model, frozen)
    out = {}
    for lv in LEVELS:
        cs = float(cosine_softmax_loss(feats[lv], weights[lv], weights[(lv, "scale")], data.labels, loss_config.weight_decay).value)
        cen = float(weight_centric_loss(feats[lv], frozen[lv], data.labels).value) if frozen is not None else 0.0
        logits = feats[lv] @ (weights[lv] / np.linalg.norm(weights[lv], axis=0))
        acc = float(np.mean(logits.argmax(1) == data.labels))
        out[lv] = (cs, cen, acc)
    return out


def _plateaued(history: list[float], patience: int, epsilon: float) -> bool:
    if len(history) <= patience:
        return False
    return history[-patience - 1] - min(history[-patience:]) < epsilon


def _run_stage(model, data, val, config: TrainConfig, loss_config: LossConfig, stage: int, frozen, log_: TrainLog, epochs: int):
    rng = np.random.default_rng([config.seed, stage])
    opt = _SGD(config.momentum)
    n = len(data)
    history: list[float] = []
    first_epoch = log_.records[-1].epoch + 1 if log_.records else 0
    for e in range(epochs):
        lr = config.stage1_rate(e) if stage == 1 else config.stage2_lr
        t0 = time.perf_counter()
        sums = {lv: np.zeros(3) for lv in LEVELS}
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x, y = data.images[idx], data.labels[idx]
            feats, pullback = model.forward(x, classifier_weights=None if frozen is None else frozen)
            weights = _classifier_weights(model, frozen)
            cost = combined_cost(feats, weights, frozen, y, loss_config, stage)
            if not np.isfinite(cost.value):
                raise NumericError(f"non-finite loss at stage {stage}, epoch {e}")
            dparts = cost.pullback(1.0)
            grads = pullback({lv: dparts[lv][0] for lv in LEVELS})
            if stage == 1:
                for lv in LEVELS:
                    grads[f"cls.{lv}.weight"] = dparts[lv][1]
                    grads[f"cls.{lv}.scale"] = dparts[lv][2]
            if config.grad_clip > 0:
                _clip(grads, config.grad_clip)
            opt.step(model.params, grads, lr)
            for lv in LEVELS:
                model.params[f"cls.{lv}.scale"] = np.maximum(model.params[f"cls.{lv}.scale"], SCALE_FLOOR)
            for lv in LEVELS:
                cs = cosine_softmax_loss(feats[lv], weights[lv], weights[(lv, "scale")], y).value
                cen = weight_centric_loss(feats[lv], frozen[lv], y).value if frozen is not None else 0.0
                acc = np.sum((feats[lv] @ weights[lv] / np.linalg.norm(weights[lv], axis=0)).argmax(1) == y)
                sums[lv] += (cs * len(idx), cen * len(idx), acc)
        if not is_finite(model.params):
            raise NumericError(f"non-finite parameters after stage {stage}, epoch {e}")
        if val is not None and len(val):
            vl = branch_losses(model, val, loss_config, frozen)
            val_loss = sum(v[0] + (v[1] * loss_config.centric_weight if stage == 2 else 0.0) for v in vl.values())
        else:
            val_loss = float("nan")
        rec = EpochRecord(
            epoch=first_epoch + e,
            stage=stage,
            lr=lr,
            loss_cs={lv: sums[lv][0] / n for lv in LEVELS},
            loss_cen={lv: sums[lv][1] / n for lv in LEVELS},
            accuracy={lv: sums[lv][2] / n for lv in LEVELS},
            val_loss=float(val_loss),
            seconds=time.perf_counter() - t0,
        )
        log_.append(rec)
        log.debug("%s", rec.to_tsv())
        history.append(val_loss if np.isfinite(val_loss) else sum(rec.loss_cs.values()) + sum(rec.loss_cen.values()))
        if config.plateau_stop and _plateaued(history, loss_config.patience, loss_config.epsilon):
            log.info("stage %d plateaued after %d epochs", stage, e + 1)
            break
    return model, log_


def train_stage1(model: MultiLevelNet, data: LabeledDataset, config: TrainConfig, loss_config: LossConfig = LossConfig(), val: LabeledDataset | None = None, log_: TrainLog | None = None):
    """Update trunk, heads, classifier weights and scales on the summed cosine softmax loss."""
    log_ = TrainLog() if log_ is None else log_
    model, log_ = _run_stage(model, data, val, config, loss_config, 1, None, log_, config.stage1_epochs)
    model.meta["stage"] = "1"
    model.meta["epoch"] = str(len(log_))
    return model, log_


def freeze_weights(model: MultiLevelNet) -> FrozenWeights:
    return FrozenWeights({lv: model.classifier(lv) for lv in LEVELS})


def train_stage2(model: MultiLevelNet, frozen: FrozenWeights, data: LabeledDataset, config: TrainConfig, loss_config: LossConfig = LossConfig(), val: LabeledDataset | None = None, log_: TrainLog | None = None):
    """Fine-tune trunk and heads on cosine softmax + weight-centric loss, classifiers held at ``frozen``."""
    if frozen is None:
        raise ValueError("stage 2 requires frozen classifier weights")
    log_ = TrainLog() if log_ is None else log_
    model, log_ = _run_stage(model, data, val, config, loss_config, 2, frozen, log_, config.stage2_epochs)
    for lv in LEVELS:
        model.params[f"cls.{lv}.weight"] = np.array(frozen[lv])
    model.meta["stage"] = "2"
    model.meta["epoch"] = str(len(log_))
    return model, log_
