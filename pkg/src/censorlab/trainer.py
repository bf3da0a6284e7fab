"""Alternating optimisation of the censored task objective."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import censor as cz
from . import nn
from .model import PROJECTIONS, ConfigError, TaskModel
from .rng import RngStream
from .stats import balanced_accuracy_score
from .synthdata import TrialBatch

log = logging.getLogger(__name__)

EVAL_POINTS = ("final", "best-val")


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``record`` holds the diagnostic."""

    def __init__(self, record: dict):
        self.record = record
        super().__init__(f"non-finite loss: {record}")


@dataclass
class TrainConfig:
    censor_mode: str = "marginal"
    censor_method: str = "dre"
    lam: float = 0.0
    projection: str = "trivial"
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    censor_steps: int = 1
    # None reuses the task learning rate
    censor_lr: Optional[float] = None
    eval_point: str = "final"
    seed: int = 0
    max_val_epochs: int = 30
    latent_dim: int = 128
    encoder_hidden: tuple = (256, 256)
    classifier_hidden: tuple = (128, 128)
    projector_hidden: tuple = (128, 128)
    censor_hidden: tuple = (128, 128)
    conv_channels: tuple = (16, 32)
    kernel_width: int = 7
    conv_stride: int = 2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))

    def validate(self) -> "TrainConfig":
        try:
            mode = cz.CensorMode(self.censor_mode)
            cz.CensorMethod(self.censor_method)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ConfigError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.projection not in PROJECTIONS:
            raise ConfigError(f"projection must be one of {PROJECTIONS}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or (self.lam > 0 and self.batch_size < 2):
            raise ConfigError("censored training needs batch size >= 2")
        if self.censor_steps < 1:
            raise ConfigError("censor_steps must be >= 1")
        if self.eval_point not in EVAL_POINTS:
            raise ConfigError(f"eval_point must be one of {EVAL_POINTS}")
        if self.max_val_epochs < 1:
            raise ConfigError("max_val_epochs must be >= 1")
        if mode is cz.CensorMode.COMPLEMENTARY and self.latent_dim % 2:
            raise ConfigError(f"complementary censoring needs an even latent size, got {self.latent_dim}")
        return self

    @property
    def n_epochs(self) -> int:
        """Epoch budget; best-val runs are capped at ``max_val_epochs``."""
        if self.eval_point == "best-val":
            return min(self.epochs, self.max_val_epochs)
        return self.epochs

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochLog:
    epoch: int
    task_ce: float
    censor_penalty: float
    censor_loss: float
    train_ba: float
    val_ba: float = float("nan")


@dataclass
class Checkpoint:
    """Named float64 tensors; the unit of persistence (see :mod:`censorlab.io`)."""

    tensors: dict = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return int(self.tensors["meta.epoch"][0])

    @property
    def config(self) -> TrainConfig:
        raw = bytes(self.tensors["meta.config"].astype(np.uint8))
        return TrainConfig.from_dict(json.loads(raw.decode("utf-8")))

    @property
    def shapes(self) -> dict:
        return {k: tuple(self.tensors[k].shape) for k in ("meta.input_shape", "meta.sizes")}

    def copy(self) -> "Checkpoint":
        return Checkpoint({k: v.copy() for k, v in self.tensors.items()})


def _u64_words(x: int) -> np.ndarray:
    # 16-bit words are exact in float64
    return np.array([(x >> (16 * i)) & 0xFFFF for i in range(4)], dtype=np.float64)


def _from_words(w) -> int:
    return sum(int(v) << (16 * i) for i, v in enumerate(w))


def _batch_order(n: int, batch_size: int, rng: RngStream) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a trailing batch of one cannot be permuted against itself
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches.pop()
    return batches


class Trainer:
    """Owns one run's model, censors, optimiser states and random streams.

    Per-epoch randomness is drawn from streams keyed by the epoch index, so
    the epoch counter is the only mutable random state and a checkpoint
    taken between epochs resumes exactly.
    """

    def __init__(self, config: TrainConfig, input_shape: Sequence[int], n_classes: int,
                 n_nuisance: int, rng: Optional[RngStream] = None):
        self.config = config.validate()
        self.rng = rng if rng is not None else RngStream(config.seed)
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.n_nuisance = n_nuisance
        c = config
        self.model = TaskModel(self.input_shape, n_classes, self.rng.derive("model-init"),
                               latent_dim=c.latent_dim, projection=c.projection,
                               encoder_hidden=c.encoder_hidden,
                               classifier_hidden=c.classifier_hidden,
                               projector_hidden=c.projector_hidden,
                               conv_channels=c.conv_channels, kernel_width=c.kernel_width,
                               conv_stride=c.conv_stride)
        self.censors = cz.build_censors(c.censor_method, c.censor_mode, c.latent_dim, n_nuisance,
                                        n_classes, self.rng.derive("censor-init"),
                                        hidden=c.censor_hidden)
        hyper = dict(lr=c.lr, beta1=c.beta1, beta2=c.beta2, weight_decay=c.weight_decay)
        self.task_opt = nn.AdamWState.for_params(self.model.parameters(), **hyper)
        censor_hyper = dict(hyper, lr=c.censor_lr or c.lr)
        self.censor_opts = [nn.AdamWState.for_params(cn.parameters(), **censor_hyper)
                            for cn in self.censors]
        self.epoch = 0

    @property
    def censoring(self) -> bool:
        return self.config.lam > 0

    # ------------------------------------------------------------------ #
    # single steps

    def _censor_inputs(self, z):
        if self.censors[0].mode is cz.CensorMode.COMPLEMENTARY:
            return list(cz.split_halves(z))
        return [z]

    def censor_step(self, x, y, s, rng: RngStream) -> float:
        """One update of every censor on features of the frozen task model."""
        z = self.model.project(self.model.encode(x))
        y_in = y if self.censors[0].mode is cz.CensorMode.CONDITIONAL else None
        perm = cz.permute_nuisance(s, rng) if cz.needs_permutation(self.config.censor_method) else None
        total = 0.0
        for cn, opt, feats in zip(self.censors, self.censor_opts, self._censor_inputs(z)):
            loss, _ = cz.censor_train_loss(cn, feats, s, perm, y_in)
            nn.adamw_step(opt, cn.parameters(), cn.gradients())
            total += loss
        return total

    def task_step(self, x, y, s, rng: Optional[RngStream] = None, perm=None) -> dict:
        """One update of the task model on ``CE + lam * penalty``.

        ``perm`` fixes the permuted nuisance labels; otherwise they are drawn
        from ``rng``. Returns the objective terms evaluated before the update.
        """
        terms = self.objective(x, y, s, rng=rng, perm=perm, backward=True)
        nn.adamw_step(self.task_opt, self.model.parameters(), self.model.gradients())
        return terms

    def objective(self, x, y, s, rng: Optional[RngStream] = None, perm=None,
                  backward: bool = False) -> dict:
        """``CE + lam * penalty`` at the current parameters; fills model grads if asked."""
        lam = self.config.lam
        h = self.model.encode(x)
        logits = self.model.logits(h)
        ce, dlogits = nn.softmax_cross_entropy(logits, y)
        penalty = 0.0
        dz = None
        if self.censoring:
            z = self.model.project(h)
            if perm is None and cz.needs_permutation(self.config.censor_method):
                perm = cz.permute_nuisance(s, rng)
            y_in = y if self.censors[0].mode is cz.CensorMode.CONDITIONAL else None
            parts = []
            grads = []
            for cn, feats in zip(self.censors, self._censor_inputs(z)):
                value, d = cz.censor_penalty(cn, feats, s, perm, y_in)
                parts.append(value)
                grads.append(d)
            if len(parts) == 2:
                penalty = cz.complementary_combine(parts[0], parts[1])
                dz = np.concatenate([grads[0], -grads[1]], axis=1)
            else:
                penalty, dz = parts[0], grads[0]
        total = ce + lam * penalty
        if backward:
            dh = self.model.classifier.backward(dlogits)
            for layer in self.model.projector.layers:
                for k in layer.grads:
                    layer.grads[k] = np.zeros_like(layer.params[k])
            if dz is not None:
                dh = dh + self.model.projector.backward(lam * dz)
            self.model.encoder.backward(dh)
        return {"ce": ce, "penalty": penalty, "total": total, "perm": perm}

    # ------------------------------------------------------------------ #
    # epochs

    def evaluate(self, batch: TrialBatch) -> float:
        return balanced_accuracy_score(batch.y, self.model.predict(batch.x), self.n_classes)

    def train_epoch(self, train: TrialBatch, val: Optional[TrialBatch] = None) -> EpochLog:
        e = self.epoch
        batches = _batch_order(len(train), self.config.batch_size, self.rng.derive("shuffle", e))
        perm_rng = self.rng.derive("permute", e)
        ce_sum = pen_sum = closs_sum = 0.0
        for b, idx in enumerate(batches):
            x, y, s = train.x[idx], train.y[idx], train.s[idx]
            closs = 0.0
            if self.censoring:
                for _ in range(self.config.censor_steps):
                    closs = self.censor_step(x, y, s, perm_rng)
            terms = self.task_step(x, y, s, perm_rng)
            values = (terms["ce"], terms["penalty"], terms["total"], closs)
            if not all(math.isfinite(v) for v in values):
                record = {"epoch": e, "batch": b, "ce": terms["ce"], "penalty": terms["penalty"],
                          "total": terms["total"], "censor_loss": closs}
                log.error("aborting run: %s", record)
                raise TrainingDiverged(record)
            ce_sum += terms["ce"]
            pen_sum += terms["penalty"]
            closs_sum += closs
        n = len(batches)
        entry = EpochLog(e, ce_sum / n, pen_sum / n, closs_sum / n, self.evaluate(train),
                         self.evaluate(val) if val is not None and len(val) else float("nan"))
        self.epoch += 1
        return entry

    def run(self, train: TrialBatch, val: Optional[TrialBatch] = None,
            epochs: Optional[int] = None, on_epoch=None) -> list[EpochLog]:
        if len(train) == 0:
            raise ValueError("empty training set")
        target = self.config.n_epochs if epochs is None else self.epoch + epochs
        logs = []
        while self.epoch < target:
            entry = self.train_epoch(train, val)
            logs.append(entry)
            if on_epoch is not None:
                on_epoch(self, entry)
        return logs

    # ------------------------------------------------------------------ #
    # checkpoints

    def _state_items(self):
        for name, p in self.model.named_parameters():
            yield f"model.{name}", p
        for i, cn in enumerate(self.censors):
            for name, p in cn.net.named_parameters():
                yield f"censor{i}.{name}", p
            for j, layer in enumerate(cn.net.layers):
                if layer.sn is not None:
                    yield f"censor{i}.{j}.sn_u", layer.sn.u
        for tag, opt in [("task", self.task_opt)] + [(f"censor{i}", o) for i, o in enumerate(self.censor_opts)]:
            for j, (m, v) in enumerate(zip(opt.m, opt.v)):
                yield f"opt.{tag}.m.{j}", m
                yield f"opt.{tag}.v.{j}", v

    def checkpoint(self) -> Checkpoint:
        t = {name: np.array(arr, dtype=np.float64, copy=True) for name, arr in self._state_items()}
        for tag, opt in [("task", self.task_opt)] + [(f"censor{i}", o) for i, o in enumerate(self.censor_opts)]:
            t[f"opt.{tag}.step"] = np.array([opt.step], dtype=np.float64)
        t["meta.epoch"] = np.array([self.epoch], dtype=np.float64)
        t["meta.rng_seed"] = _u64_words(self.rng.seed)
        t["meta.rng_stream"] = _u64_words(self.rng.stream_id)
        t["meta.input_shape"] = np.array(self.input_shape, dtype=np.float64)
        t["meta.sizes"] = np.array([self.n_classes, self.n_nuisance], dtype=np.float64)
        raw = json.dumps(self.config.to_dict(), sort_keys=True).encode("utf-8")
        t["meta.config"] = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
        return Checkpoint(t)

    def restore(self, ckpt: Checkpoint):
        t = ckpt.tensors
        for name, arr in self._state_items():
            if name not in t:
                raise KeyError(f"checkpoint is missing tensor {name!r}")
            if t[name].shape != arr.shape:
                raise nn.ShapeError(f"{name}: checkpoint shape {t[name].shape}, model {arr.shape}")
            arr[...] = t[name]
        for tag, opt in [("task", self.task_opt)] + [(f"censor{i}", o) for i, o in enumerate(self.censor_opts)]:
            opt.step = int(t[f"opt.{tag}.step"][0])
        self.epoch = ckpt.epoch
        self.rng = RngStream(_from_words(t["meta.rng_seed"]), _from_words(t["meta.rng_stream"]))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Trainer":
        t = ckpt.tensors
        shape = tuple(int(v) for v in t["meta.input_shape"])
        n_classes, n_nuisance = (int(v) for v in t["meta.sizes"])
        rng = RngStream(_from_words(t["meta.rng_seed"]), _from_words(t["meta.rng_stream"]))
        tr = cls(ckpt.config, shape, n_classes, n_nuisance, rng)
        tr.restore(ckpt)
        return tr


def select_checkpoint(logs: Sequence[EpochLog], checkpoints: Sequence[Checkpoint], eval_point: str):
    """Last checkpoint, or the earliest one with the highest validation accuracy."""
    if eval_point not in EVAL_POINTS:
        raise ConfigError(f"eval_point must be one of {EVAL_POINTS}")
    if len(logs) != len(checkpoints) or not logs:
        raise ValueError("need one checkpoint per epoch log")
    if eval_point == "final":
        return checkpoints[-1]
    vals = [entry.val_ba for entry in logs]
    if any(not math.isfinite(v) for v in vals):
        raise ConfigError("best-val selection needs validation accuracy for every epoch")
    return checkpoints[int(np.argmax(vals))]


def train_run(config: TrainConfig, train: TrialBatch, val: Optional[TrialBatch] = None,
              rng: Optional[RngStream] = None, n_nuisance: Optional[int] = None):
    """Train one configuration; returns ``(selected checkpoint, epoch logs)``."""
    config.validate()
    if config.eval_point == "best-val" and (val is None or len(val) == 0):
        raise ConfigError("best-val checkpoint selection needs a validation set")
    trainer = Trainer(config, train.x.shape[1:], train.n_classes,
                      n_nuisance or train.n_nuisance, rng)
    best = {"val": -math.inf, "ckpt": None}

    def keep(tr, entry):
        # only the best-so-far snapshot is held; strict > keeps the earliest maximum
        if config.eval_point == "best-val" and entry.val_ba > best["val"]:
            best["val"], best["ckpt"] = entry.val_ba, tr.checkpoint()

    logs = trainer.run(train, val, on_epoch=keep)
    if config.eval_point == "best-val":
        return best["ckpt"], logs
    return trainer.checkpoint(), logs
