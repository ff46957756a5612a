"""Joint contrastive + cross-entropy training on CutMix samples with
semantically rectified labels."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import label_rectify as lr_
from .cutmix import draw_lambda, mix, sample_box
from .dataset import ClassSampler, Dataset, SamplerKind
from .metrics import Evaluation, GroupSpec, evaluate_predictions
from .nn import SGD, l2_normalize, log_softmax, softmax
from .semantic_space import (
    PROTOTYPES,
    NonFiniteLossError,
    SemanticModel,
    class_centers,
    contrastive_backward,
)

log = logging.getLogger(__name__)

METHODS = ("concutmix", "cutmix")
LR_SCHEDULES = ("constant", "linear", "cosine")


@dataclass
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int | None = None  # default: epochs // 2
    batch_size: int = 64
    steps_per_epoch: int | None = None  # default: ceil(len(train) / batch_size)
    lr: float = 0.05
    lr_schedule: str = "constant"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    alpha: float = 1.0
    beta: float = 1.0
    temperature: float = 0.1
    method: str = "concutmix"
    K: int | None = None  # default: default_K(|Y|)
    omega: float | None = None  # default: default_omega(|Y|)
    phi: str = "log"
    metric: str = "euclid"
    force_include_mixed: bool = True
    raw_features: bool = False
    fg_sampler: str = "balanced"
    bg_sampler: str = "random"
    backbone: str = "mlp"
    hidden_dim: int = 64
    feature_dim: int = 16
    seed: int = 0
    ece_bins: int = 15
    many_threshold: int = 100
    few_threshold: int = 20

    def __post_init__(self):
        if self.warmup_epochs is None:
            self.warmup_epochs = self.epochs // 2
        if not 0 <= self.warmup_epochs <= max(self.epochs, 0):
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("alpha, beta must be non-negative with a positive sum")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        SamplerKind(self.fg_sampler)
        SamplerKind(self.bg_sampler)

    def rectify_config(self, num_classes: int) -> lr_.RectifyConfig:
        cfg = lr_.RectifyConfig(
            K=lr_.default_K(num_classes) if self.K is None else self.K,
            omega=lr_.default_omega(num_classes) if self.omega is None else self.omega,
            phi=self.phi,
            metric=self.metric,
            force_include_mixed=self.force_include_mixed,
        )
        cfg.check(num_classes)
        return cfg

    def resolved(self, num_classes: int) -> TrainConfig:
        """Copy with K and omega filled in."""
        rc = self.rectify_config(num_classes)
        return dataclasses.replace(self, K=rc.K, omega=rc.omega)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


RECORD_FIELDS = (
    "epoch", "train_loss_con", "train_loss_ce", "val_top1",
    "acc_many", "acc_medium", "acc_few", "ece", "gamma_mean",
)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss_con: float
    train_loss_ce: float
    val_top1: float
    acc_many: float | None
    acc_medium: float | None
    acc_few: float | None
    ece: float
    gamma_mean: float

    def row(self) -> list[str]:
        return ["" if v is None else repr(v) for v in dataclasses.astuple(self)]


@dataclass
class TrainResult:
    model: SemanticModel
    records: list[EpochRecord] = field(default_factory=list)
    evaluation: Evaluation | None = None


def soft_cross_entropy(logits, target):
    """``-sum target * log_softmax(logits)`` and its gradient ``softmax - target``.

    Works on a single vector or a batch (rows); for a batch the loss and
    gradient are averaged over rows.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    losses = -np.sum(target * log_softmax(logits), axis=-1)
    grad = softmax(logits) - target
    if logits.ndim == 1:
        return float(losses), grad
    return float(losses.mean()), grad / len(logits)


def predict(model: SemanticModel, images, batch_size: int = 512):
    """``(predictions, confidences, logits)`` for a stack of images."""
    logits = np.concatenate([
        model.logits(images[i:i + batch_size]) for i in range(0, len(images), batch_size)
    ]) if len(images) else np.zeros((0, model.num_classes))
    probs = softmax(logits)
    return probs.argmax(axis=1), probs.max(axis=1), logits


def classify(model: SemanticModel, image):
    """Single image -> ``(class, confidence, logits)``; ties go to the lowest id."""
    pred, conf, logits = predict(model, np.asarray(image)[None])
    return int(pred[0]), float(conf[0]), logits[0]


def evaluate_model(model: SemanticModel, val_set: Dataset, train_counts,
                   groups: GroupSpec = GroupSpec(), n_bins: int = 15) -> Evaluation:
    preds, confs, _ = predict(model, val_set.images)
    return evaluate_predictions(preds, confs, val_set.labels, train_counts, groups, n_bins)


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


class Trainer:
    """Owns the model, optimizer and all random streams of one run.

    Random streams are split from the master seed once: model init, background
    sampler, foreground sampler, and CutMix geometry. None of them depends on
    whether label rectification is active, so a run with ``omega=0`` follows
    the exact trajectory of a plain CutMix run.
    """

    def __init__(self, config: TrainConfig, train_set: Dataset, val_set: Dataset):
        if train_set.num_classes != val_set.num_classes:
            raise ValueError("train and validation sets disagree on the number of classes")
        if train_set.image_shape != val_set.image_shape:
            raise ValueError("train and validation image shapes differ")
        self.config = config
        self.train_set = train_set
        self.val_set = val_set
        self.num_classes = train_set.num_classes
        self.counts = train_set.census.counts
        self.rectify = config.rectify_config(self.num_classes)
        self.groups = GroupSpec(config.many_threshold, config.few_threshold)

        init_ss, bg_ss, fg_ss, mix_ss = np.random.SeedSequence(config.seed).spawn(4)
        self.model = SemanticModel(
            train_set.image_shape, self.num_classes, backbone=config.backbone,
            hidden_dim=config.hidden_dim, feature_dim=config.feature_dim,
            temperature=config.temperature, seed=_seed_int(init_ss),
        )
        self.bg_sampler = ClassSampler(config.bg_sampler, train_set.labels, self.num_classes,
                                       np.random.default_rng(bg_ss))
        self.fg_sampler = ClassSampler(config.fg_sampler, train_set.labels, self.num_classes,
                                       np.random.default_rng(fg_ss))
        self.mix_rng = np.random.default_rng(mix_ss)
        self.optimizer = SGD(config.lr, config.momentum, config.weight_decay,
                             no_decay=(PROTOTYPES,))
        self.steps_per_epoch = config.steps_per_epoch or math.ceil(len(train_set) / config.batch_size)
        self.total_steps = self.steps_per_epoch * config.epochs
        self.step_count = 0

    def omega_at(self, epoch: int) -> float:
        return 0.0 if epoch < self.config.warmup_epochs else self.rectify.omega

    def synthesize(self, fg_idx, bg_idx):
        images = self.train_set.images
        labels = self.train_set.labels
        w, h = self.train_set.image_shape[:2]
        samples = []
        for f, b in zip(fg_idx, bg_idx):
            box = sample_box(w, h, draw_lambda(self.mix_rng), self.mix_rng)
            samples.append(mix((images[f], labels[f]), (images[b], labels[b]), box,
                               self.num_classes))
        return samples

    def targets(self, samples, hidden_syn, omega: float):
        """Training targets for the synthetic samples and their confidences."""
        area = np.stack([s.area_label for s in samples])
        if self.config.method == "cutmix":
            return area, np.zeros(len(samples))
        z = self.model.project(hidden_syn)
        if not self.config.raw_features:
            z = l2_normalize(z)[0]
        centers = class_centers(self.model)
        cfg = dataclasses.replace(self.rectify, omega=omega)
        ys, gammas = [], []
        for s, feat in zip(samples, z):
            out = lr_.rectify_sample(feat, centers, s.area_label, s.fg_class, s.bg_class,
                                     s.lambda_eff, self.counts, cfg)
            ys.append(out.y)
            gammas.append(out.gamma)
        return np.stack(ys), np.asarray(gammas)

    def current_lr(self) -> float:
        progress = self.step_count / max(self.total_steps, 1)
        if self.config.lr_schedule == "linear":
            return self.config.lr * (1.0 - progress)
        if self.config.lr_schedule == "cosine":
            return self.config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))
        return self.config.lr

    def step(self, epoch: int):
        cfg = self.config
        model = self.model
        b = cfg.batch_size
        bg_idx = self.bg_sampler.draw(b)
        fg_idx = self.fg_sampler.draw(b)
        samples = self.synthesize(fg_idx, bg_idx)

        x = np.concatenate([
            self.train_set.images[bg_idx].astype(np.float64),
            np.stack([s.image for s in samples]).astype(np.float64),
        ])
        hidden, caches = model.backbone.forward(model.params, x)
        hidden_orig, hidden_syn = hidden[:b], hidden[b:]
        target, gamma = self.targets(samples, hidden_syn, self.omega_at(epoch))

        grads = model.zero_grads()
        loss_con, g_orig = contrastive_backward(
            model, hidden_orig, self.train_set.labels[bg_idx], grads, scale=cfg.alpha)
        logits, head_cache = model.classifier.forward(model.params, hidden_syn)
        loss_ce, g_logits = soft_cross_entropy(logits, target)
        if not (math.isfinite(loss_con) and math.isfinite(loss_ce)):
            raise NonFiniteLossError(
                f"non-finite loss at epoch {epoch}, step {self.step_count}: "
                f"L_con={loss_con}, L_ce={loss_ce}")
        g_syn = model.classifier.backward(model.params, head_cache, cfg.beta * g_logits, grads)
        model.backbone.backward(model.params, caches, np.concatenate([g_orig, g_syn]), grads)

        self.optimizer.step(model.params, grads, self.current_lr())
        model.normalize_prototypes()
        self.step_count += 1
        return loss_con, loss_ce, gamma

    def run_epoch(self, epoch: int) -> EpochRecord:
        con, ce, gammas = [], [], []
        for _ in range(self.steps_per_epoch):
            l_con, l_ce, gamma = self.step(epoch)
            con.append(l_con)
            ce.append(l_ce)
            gammas.append(gamma)
        ev = evaluate_model(self.model, self.val_set, self.counts, self.groups,
                            self.config.ece_bins)
        record = EpochRecord(
            epoch=epoch,
            train_loss_con=float(np.mean(con)),
            train_loss_ce=float(np.mean(ce)),
            val_top1=ev.top1,
            acc_many=ev.groups["many"],
            acc_medium=ev.groups["medium"],
            acc_few=ev.groups["few"],
            ece=ev.calibration.ece,
            gamma_mean=float(np.concatenate(gammas).mean()),
        )
        log.info("epoch %d: top1=%.4f ece=%.2f gamma=%.4f", epoch, record.val_top1,
                 record.ece, record.gamma_mean)
        return record


def train(config: TrainConfig, train_set: Dataset, val_set: Dataset) -> TrainResult:
    trainer = Trainer(config, train_set, val_set)
    result = TrainResult(trainer.model)
    for epoch in range(config.epochs):
        result.records.append(trainer.run_epoch(epoch))
    result.evaluation = evaluate_model(trainer.model, val_set, trainer.counts, trainer.groups,
                                       config.ece_bins)
    return result
