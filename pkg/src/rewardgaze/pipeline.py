"""Three-phase self-training: supervised teacher, pseudo-labeling, reward-gated student training.

Phase iii alternates, per minibatch, one reward-model update (binary
cross-entropy against the label-source mask) and one student update on the
averaged supervised + confidence-weighted unsupervised objective. Every
``refresh_interval`` epochs the teacher is replaced by a copy of the student
and all pseudo-labels are regenerated.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import data as datamod
from . import diffnum as dn
from . import geometry
from .cues import CueProvider, PromptTemplate, text_batch, visual_batch
from .data import Dataset
from .diffnum import Adam, NumericError, ShapeError, Tape, Tensor
from .geometry import SphericalGaze
from .nets import GazeEstimatorParams, estimator_forward, init_estimator, predict
from .reward import RewardModelParams, init_reward, reward_loss, score_batch

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, phase: str, epoch: int, detail: str = ""):
        msg = f"training diverged in phase {phase!r} at epoch {epoch}"
        super().__init__(msg + (f": {detail}" if detail else ""))
        self.phase = phase
        self.epoch = epoch


@dataclass
class TrainConfig:
    tau: float = 0.5
    refresh_interval: int | None = 10
    teacher_epochs: int = 30
    ssl_epochs: int = 30
    lr_teacher: float = 0.005
    lr_student: float = 0.001
    lr_reward: float = 0.0001
    weight_decay: float = 0.05
    batch_size: int = 64
    seed: int = 0
    unsup_reduction: str = "mean"
    reward_reduction: str = "mean"
    objective_weights: tuple[float, float] = (0.5, 0.5)
    filter: bool = True
    reweight: bool = True
    score_variant: str = "final"
    pseudo_corruption: float = 0.0
    pseudo_corruption_deg: float = 30.0
    reward_width: int = 32
    reward_residual: bool = True

    def __post_init__(self):
        self.objective_weights = tuple(float(w) for w in self.objective_weights)
        self.validate()

    def validate(self) -> None:
        def bad(key, why):
            raise ValueError(f"invalid config value for '{key}': {why}")

        if not 0.0 <= self.tau <= 1.0:
            bad("tau", f"{self.tau} not in [0, 1]")
        if self.refresh_interval is not None and self.refresh_interval < 1:
            bad("refresh_interval", "must be >= 1 or null")
        for key in ("teacher_epochs", "ssl_epochs"):
            if getattr(self, key) < 0:
                bad(key, "must be non-negative")
        for key in ("lr_teacher", "lr_student", "lr_reward", "weight_decay"):
            if getattr(self, key) < 0:
                bad(key, "must be non-negative")
        if self.batch_size < 2:
            bad("batch_size", "must be at least 2")
        if self.unsup_reduction not in ("sum", "mean"):
            bad("unsup_reduction", "must be 'sum' or 'mean'")
        if self.reward_reduction not in ("sum", "mean"):
            bad("reward_reduction", "must be 'sum' or 'mean'")
        if len(self.objective_weights) != 2 or any(w < 0 for w in self.objective_weights):
            bad("objective_weights", "must be two non-negative numbers")
        if self.score_variant not in ("final", "initial"):
            bad("score_variant", "must be 'final' or 'initial'")
        if not 0.0 <= self.pseudo_corruption <= 1.0:
            bad("pseudo_corruption", "must be in [0, 1]")

    @property
    def uses_unlabeled(self) -> bool:
        return self.objective_weights[1] > 0

    @property
    def uses_reward(self) -> bool:
        return self.uses_unlabeled and (self.filter or self.reweight)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["objective_weights"] = list(self.objective_weights)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown config keys: {unknown}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    loss_sup: float
    loss_unsup: float | None = None
    loss_reward: float | None = None
    retained_fraction: float | None = None
    val_error: float | None = None
    refreshed: bool = False
    teacher_digest: str | None = None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def to_list(self) -> list[dict]:
        return [dataclasses.asdict(r) for r in self.records]

    def to_json(self) -> str:
        return json.dumps(self.to_list(), indent=1, sort_keys=True)

    @classmethod
    def from_list(cls, items) -> "TrainHistory":
        return cls([EpochRecord(**d) for d in items])


@dataclass
class PseudoLabelSet:
    ids: list[str]
    labels: np.ndarray          # (N, 2) float32 (yaw, pitch)
    epoch: int = 0
    corrupted: frozenset = frozenset()

    def __len__(self) -> int:
        return len(self.ids)

    def as_dict(self) -> dict[str, SphericalGaze]:
        return {sid: SphericalGaze(float(y), float(p)) for sid, (y, p) in zip(self.ids, self.labels)}


# Losses


def supervised_loss(pred: Tensor, labels) -> Tensor:
    """Mean L2 norm of the (yaw, pitch) residuals."""
    y = np.asarray(labels, dtype=np.float32).reshape(-1, 2)
    if pred.shape[0] == 0:
        raise ValueError("supervised_loss on an empty batch")
    if pred.shape != y.shape:
        raise ShapeError(f"predictions {pred.shape} vs labels {y.shape}")
    return dn.mean(dn.l2_norm_rowwise(dn.sub(pred, dn._wrap(y))))


def unsupervised_weights(scores, tau: float, filter: bool = True, reweight: bool = True) -> np.ndarray:
    r = np.asarray(scores, dtype=np.float32).reshape(-1)
    w = np.ones_like(r)
    if filter:
        w = np.where(r >= tau, w, np.float32(0.0))
    if reweight:
        w = w * r
    return w.astype(np.float32)


def unsupervised_loss(pred: Tensor, pseudo, scores, tau: float, reduction: str = "mean",
                      filter: bool = True, reweight: bool = True) -> Tensor:
    """Confidence-gated, confidence-weighted L2 residual over pseudo-labeled samples.

    ``scores`` are constants. Samples with score below ``tau`` get weight exactly
    zero. ``mean`` divides by the full batch size, kept or not.
    """
    y = np.asarray(pseudo, dtype=np.float32).reshape(-1, 2)
    w = unsupervised_weights(scores, tau, filter, reweight)
    if pred.shape != y.shape or w.shape[0] != y.shape[0]:
        raise ShapeError(f"predictions {pred.shape}, pseudo-labels {y.shape}, scores {w.shape} disagree")
    if np.any((w < 0) | (w > 1)) and reweight:
        raise ValueError("scores must lie in [0, 1]")
    per = dn.mul(dn.l2_norm_rowwise(dn.sub(pred, dn._wrap(y))), dn._wrap(w))
    total = dn.sum(per)
    if reduction == "sum":
        return total
    if reduction == "mean":
        return dn.scale(total, 1.0 / y.shape[0])
    raise ValueError(f"unknown reduction {reduction!r}")


def total_objective(loss_sup, loss_unsup, weights=(0.5, 0.5)) -> Tensor:
    return dn.add(dn.scale(dn.as_tensor(loss_sup), weights[0]), dn.scale(dn.as_tensor(loss_unsup), weights[1]))


def _check(loss: Tensor, phase: str, epoch: int) -> None:
    if not math.isfinite(loss.item()):
        raise TrainingDiverged(phase, epoch, "non-finite loss")


# Phase i: teacher


def train_teacher(labeled: Dataset, cfg: TrainConfig, params: GazeEstimatorParams | None = None,
                  val: Dataset | None = None) -> tuple[GazeEstimatorParams, TrainHistory]:
    if len(labeled) == 0:
        raise ValueError("train_teacher needs a non-empty labeled dataset")
    params = params.clone() if params is not None else init_estimator(cfg.seed, labeled.feature_width)
    x = labeled.features()
    y = labeled.labels().astype(np.float32)
    opt = Adam(params.parameters(), cfg.lr_teacher, weight_decay=cfg.weight_decay)
    history = TrainHistory()
    for epoch in range(1, cfg.teacher_epochs + 1):
        losses = []
        try:
            for idx in datamod.shuffled_batches(len(labeled), cfg.batch_size, cfg.seed, epoch):
                with Tape() as tape:
                    loss = supervised_loss(estimator_forward(params, dn._wrap(x[idx])), y[idx])
                _check(loss, "teacher", epoch)
                opt.zero_grad()
                tape.backward(loss)
                opt.step()
                losses.append(loss.item())
        except NumericError as e:
            raise TrainingDiverged("teacher", epoch, str(e)) from e
        history.append(EpochRecord("teacher", epoch, float(np.mean(losses)),
                                   val_error=_val(params, val)))
    return params, history


def _val(params: GazeEstimatorParams, val: Dataset | None) -> float | None:
    if val is None or len(val) == 0:
        return None
    return float(np.mean(geometry.angular_errors(predict(params, val.features()), val.labels())))


# Phase ii: pseudo-labels


def generate_pseudo_labels(params: GazeEstimatorParams, unlabeled: Dataset, epoch: int = 0) -> PseudoLabelSet:
    if len(unlabeled) == 0:
        raise ValueError("generate_pseudo_labels needs a non-empty dataset")
    return PseudoLabelSet(unlabeled.ids, predict(params, unlabeled.features()).copy(), epoch)


def corrupt_pseudo_labels(pseudo: PseudoLabelSet, fraction: float, magnitude_deg: float,
                          seed: int) -> PseudoLabelSet:
    if fraction <= 0:
        return pseudo
    new, mask = datamod.corrupt_labels(pseudo.as_dict(), fraction, magnitude_deg, seed)
    arr = np.array([new[i] for i in pseudo.ids], dtype=np.float32)
    return PseudoLabelSet(pseudo.ids, arr, pseudo.epoch, frozenset(mask))


# Phase iii: self-training


@dataclass
class CueBank:
    """Cue tokens for a dataset, fetched once and indexed by position."""
    visual: np.ndarray
    text: np.ndarray

    @classmethod
    def build(cls, provider: CueProvider, dataset: Dataset, prompt: PromptTemplate | None = None) -> "CueBank":
        prompt = prompt or PromptTemplate()
        return cls(visual_batch(provider, dataset.samples), text_batch(provider, dataset.samples, prompt))


@dataclass
class StepRecord:
    loss_sup: float
    loss_unsup: float
    loss_reward: float | None
    retained: int
    n_unlabeled: int


@dataclass
class SSLState:
    student: GazeEstimatorParams
    reward: RewardModelParams
    student_opt: Adam
    reward_opt: Adam


def new_ssl_state(teacher: GazeEstimatorParams, cfg: TrainConfig, d_visual: int, d_text: int) -> SSLState:
    student = teacher.clone()
    reward = init_reward(cfg.seed, d_visual, d_text, width=cfg.reward_width, residual=cfg.reward_residual)
    return SSLState(student, reward,
                    Adam(student.parameters(), cfg.lr_student, weight_decay=cfg.weight_decay),
                    Adam(reward.parameters(), cfg.lr_reward, weight_decay=cfg.weight_decay))


def ssl_step(state: SSLState, lab_x: np.ndarray, lab_y: np.ndarray, lab_cues: CueBank,
             unl_x: np.ndarray, unl_y: np.ndarray, unl_cues: CueBank, cfg: TrainConfig) -> StepRecord:
    """One reward update followed by one student update on a paired minibatch."""
    student, reward = state.student, state.reward
    nl, nu = lab_x.shape[0], unl_x.shape[0]
    loss_g = None
    if cfg.uses_reward:
        pred_l = predict(student, lab_x)
        pred_u = predict(student, unl_x)
        with Tape() as tape:
            sc = score_batch(reward,
                             np.concatenate([lab_cues.visual, unl_cues.visual]),
                             np.concatenate([lab_cues.text, unl_cues.text]),
                             np.concatenate([lab_y, unl_y]),
                             np.concatenate([pred_l, pred_u]))
            masks = np.concatenate([np.ones(nl), np.zeros(nu)])
            lg = reward_loss(sc.pick(cfg.score_variant), masks, cfg.reward_reduction)
        if not math.isfinite(lg.item()):
            raise NumericError("non-finite reward loss")
        state.reward_opt.zero_grad()
        tape.backward(lg)
        state.reward_opt.step()
        loss_g = lg.item()
        with dn.no_grad():
            scores = score_batch(reward, unl_cues.visual, unl_cues.text, unl_y, pred_u).pick(cfg.score_variant).data
    else:
        scores = np.ones(nu, dtype=np.float32)

    with Tape() as tape:
        ls = supervised_loss(estimator_forward(student, dn._wrap(lab_x)), lab_y)
        if cfg.uses_unlabeled:
            lu = unsupervised_loss(estimator_forward(student, dn._wrap(unl_x)), unl_y, scores, cfg.tau,
                                   cfg.unsup_reduction, cfg.filter, cfg.reweight)
        else:
            lu = dn._wrap(np.zeros((), dtype=np.float32))
        total = total_objective(ls, lu, cfg.objective_weights)
    if not math.isfinite(total.item()):
        raise NumericError("non-finite student loss")
    state.student_opt.zero_grad()
    tape.backward(total)
    state.student_opt.step()
    weights = unsupervised_weights(scores, cfg.tau, cfg.filter, False) if cfg.uses_unlabeled else np.zeros(nu)
    return StepRecord(ls.item(), lu.item(), loss_g, int(np.count_nonzero(weights)), nu)


def refresh_teacher(teacher: GazeEstimatorParams, student: GazeEstimatorParams, epoch: int,
                    interval: int | None) -> tuple[GazeEstimatorParams, bool]:
    """Return ``(teacher, refreshed)``; on refresh epochs the teacher is a copy of the student."""
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    if interval is not None and epoch % interval == 0:
        return student.clone(), True
    return teacher, False


@dataclass
class SelfTrainResult:
    student: GazeEstimatorParams
    reward: RewardModelParams
    teacher: GazeEstimatorParams
    teacher_history: TrainHistory
    history: TrainHistory
    pseudo: PseudoLabelSet


Checkpointer = Callable[[str, dict], None]


def run_ssl(teacher: GazeEstimatorParams, labeled: Dataset, unlabeled: Dataset, provider: CueProvider,
            cfg: TrainConfig, val: Dataset | None = None,
            checkpoint: Checkpointer | None = None) -> SelfTrainResult:
    """Phases ii and iii starting from a trained teacher."""
    if len(labeled) == 0 or len(unlabeled) == 0:
        raise ValueError("self-training needs non-empty labeled and unlabeled datasets")
    lab_x, lab_y = labeled.features(), labeled.labels().astype(np.float32)
    unl_x = unlabeled.features()
    lab_bank = CueBank.build(provider, labeled) if cfg.uses_reward else None
    unl_bank = CueBank.build(provider, unlabeled) if cfg.uses_reward else None
    state = new_ssl_state(teacher, cfg, provider.config.d_visual, provider.config.d_text)

    def labels_from(model, epoch):
        pl = generate_pseudo_labels(model, unlabeled, epoch)
        return corrupt_pseudo_labels(pl, cfg.pseudo_corruption, cfg.pseudo_corruption_deg, cfg.seed * 1009 + epoch)

    pseudo = labels_from(teacher, 0)
    history = TrainHistory()
    for epoch in range(1, cfg.ssl_epochs + 1):
        sums = np.zeros(3)
        n_g = retained = seen = steps = 0
        try:
            for li, ui in datamod.balanced_batches(len(labeled), len(unlabeled), cfg.batch_size, cfg.seed, epoch):
                rec = ssl_step(state, lab_x[li], lab_y[li], _take(lab_bank, li),
                               unl_x[ui], pseudo.labels[ui], _take(unl_bank, ui), cfg)
                sums += [rec.loss_sup, rec.loss_unsup, rec.loss_reward or 0.0]
                n_g += rec.loss_reward is not None
                retained += rec.retained
                seen += rec.n_unlabeled
                steps += 1
        except NumericError as e:
            raise TrainingDiverged("ssl", epoch, str(e)) from e
        teacher, refreshed = refresh_teacher(teacher, state.student, epoch, cfg.refresh_interval)
        if refreshed:
            pseudo = labels_from(teacher, epoch)
        history.append(EpochRecord(
            "ssl", epoch, sums[0] / steps,
            loss_unsup=sums[1] / steps if cfg.uses_unlabeled else None,
            loss_reward=sums[2] / n_g if n_g else None,
            retained_fraction=retained / seen if cfg.uses_unlabeled else None,
            val_error=_val(state.student, val),
            refreshed=refreshed,
            teacher_digest=teacher.digest(),
        ))
        log.info("ssl epoch %d: Ls=%.4f Lu=%s retained=%s", epoch, sums[0] / steps,
                 history.records[-1].loss_unsup, history.records[-1].retained_fraction)
        if refreshed and checkpoint is not None:
            checkpoint(f"refresh-{epoch:03d}", {"teacher": teacher, "student": state.student,
                                                 "reward": state.reward, "epoch": epoch})
    return SelfTrainResult(state.student, state.reward, teacher, TrainHistory(), history, pseudo)


def _take(bank: CueBank | None, idx: np.ndarray) -> CueBank | None:
    return None if bank is None else CueBank(bank.visual[idx], bank.text[idx])


def run_selftraining(labeled: Dataset, unlabeled: Dataset, provider: CueProvider, cfg: TrainConfig,
                     val: Dataset | None = None, checkpoint: Checkpointer | None = None,
                     teacher: GazeEstimatorParams | None = None) -> SelfTrainResult:
    """Full three-phase run. A pre-trained ``teacher`` skips phase i."""
    teacher_history = TrainHistory()
    if teacher is None:
        teacher, teacher_history = train_teacher(labeled, cfg, val=val)
    if checkpoint is not None:
        checkpoint("teacher", {"teacher": teacher, "epoch": 0})
    result = run_ssl(teacher, labeled, unlabeled, provider, cfg, val, checkpoint)
    result.teacher_history = teacher_history
    if checkpoint is not None:
        checkpoint("final", {"teacher": result.teacher, "student": result.student,
                             "reward": result.reward, "epoch": cfg.ssl_epochs})
    return result
