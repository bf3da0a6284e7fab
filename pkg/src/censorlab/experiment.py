"""Cross-validated sweeps over censoring configurations."""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import synthdata as sd
from .model import ConfigError
from .rng import RngStream
from .stats import RunResult, overfit_ratio, probe_subject_accuracy
from .trainer import EVAL_POINTS, Trainer, TrainConfig, TrainingDiverged, train_run

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "CENSORLAB_OUTPUT_DIR"
CONTROL = "none"
# keys of TrainConfig that the grid sets per cell
_GRID_KEYS = {"censor_mode", "censor_method", "lam", "projection", "eval_point", "seed"}


@dataclass
class ExperimentConfig:
    """A sweep: data source, subject splits, seeds and the censoring grid.

    ``data`` is either ``{"synthetic": <GenModelSpec dict>, "trials_per_subject": n,
    "data_seed": k}`` or ``{"epoch_file": path}``.
    """

    data: dict
    n_train: int
    n_test: int
    n_val: int = 0
    folds: list = field(default_factory=lambda: [0])
    seeds: list = field(default_factory=lambda: [0])
    master_seed: int = 0
    modes: list = field(default_factory=lambda: ["marginal"])
    methods: list = field(default_factory=lambda: ["dre"])
    lams: list = field(default_factory=lambda: [1.0])
    projections: list = field(default_factory=lambda: ["trivial"])
    eval_points: list = field(default_factory=lambda: ["final"])
    train: dict = field(default_factory=dict)
    nontarget_ratio: Optional[int] = None
    probe: bool = True
    output_dir: str = "results"

    def validate(self) -> "ExperimentConfig":
        if not self.folds or not self.seeds:
            raise ConfigError("fold and seed lists must be nonempty")
        if not (self.modes and self.methods and self.lams and self.projections and self.eval_points):
            raise ConfigError("every grid axis needs at least one value")
        if len(set(self.seeds)) != len(self.seeds) or len(set(self.folds)) != len(self.folds):
            raise ConfigError("seed and fold lists must not repeat")
        if any(lam <= 0 for lam in self.lams):
            raise ConfigError("grid lambdas must be > 0; the lambda=0 control is always added")
        if min(self.n_train, self.n_test) < 1 or self.n_val < 0:
            raise ConfigError("need >= 1 train and test subject and n_val >= 0")
        bad = set(self.train) & _GRID_KEYS
        if bad:
            raise ConfigError(f"grid keys {sorted(bad)} cannot be fixed in the train section")
        for ep in self.eval_points:
            if ep not in EVAL_POINTS:
                raise ConfigError(f"eval_point must be one of {EVAL_POINTS}, got {ep!r}")
            if ep == "best-val" and self.n_val < 1:
                raise ConfigError("best-val evaluation needs validation subjects")
        if ("synthetic" in self.data) == ("epoch_file" in self.data):
            raise ConfigError("data must name exactly one of 'synthetic' or 'epoch_file'")
        for cell in self.grid():
            self.train_config(cell, seed=self.seeds[0]).validate()
        return self

    def grid(self) -> list[dict]:
        """Censored cells in sweep order (eval point outermost, lambda innermost)."""
        out = []
        for ep, mode, method, proj, lam in itertools.product(
                self.eval_points, self.modes, self.methods, self.projections, self.lams):
            out.append(dict(eval_point=ep, censor_mode=mode, censor_method=method,
                            projection=proj, lam=float(lam)))
        return out

    def train_config(self, cell: dict, seed: int) -> TrainConfig:
        try:
            return TrainConfig.from_dict({**self.train, **cell, "seed": int(seed)})
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None


def expected_rows(config: ExperimentConfig) -> int:
    per_split = len(config.grid()) + len(config.eval_points)
    return len(config.seeds) * len(config.folds) * per_split


def load_dataset(config: ExperimentConfig) -> sd.TrialBatch:
    d = config.data
    if "epoch_file" in d:
        from .io import read_epoch_file
        return read_epoch_file(d["epoch_file"])
    spec = sd.GenModelSpec.from_dict(d["synthetic"])
    per_subject = int(d.get("trials_per_subject", 200))
    rng = RngStream(int(d.get("data_seed", config.master_seed))).derive("dataset")
    return sd.generate(spec, per_subject * spec.n_nuisance, rng, balanced=True).batch


@dataclass
class Split:
    train: sd.TrialBatch
    val: Optional[sd.TrialBatch]
    test: sd.TrialBatch


def make_split(data: sd.TrialBatch, config: ExperimentConfig, fold: int, eval_point: str,
               rng: RngStream) -> Split:
    """Subject split for ``fold``; final-checkpoint runs also train on the validation subjects."""
    subjects = np.unique(data.subject)
    tr, va, te = sd.subject_split(subjects, config.n_train, config.n_val, config.n_test, fold,
                                  RngStream(config.master_seed))
    if eval_point == "final":
        tr, va = np.sort(np.concatenate([tr, va])), np.zeros(0, dtype=np.int64)
    train = data.select_subjects(tr)
    if config.nontarget_ratio:
        train = sd.subsample_nontargets(train, config.nontarget_ratio, rng.derive("subsample"))
    # censors only see training nuisance values, so they are relabelled densely
    train = train.reindex_nuisance()
    val = data.select_subjects(va) if len(va) else None
    return Split(train, val, data.select_subjects(te))


def _evaluate(trainer: Trainer, split: Split, cfg: TrainConfig, probe: bool,
              rng: RngStream) -> dict:
    train_ba = trainer.evaluate(split.train)
    val_ba = trainer.evaluate(split.val) if split.val is not None else float("nan")
    test_ba = trainer.evaluate(split.test)
    probe_ba = float("nan")
    if probe:
        z = trainer.model.features(split.train.x)
        probe_ba = probe_subject_accuracy(z, split.train.s, rng.derive("probe"))
    return dict(train_ba=train_ba, val_ba=val_ba, test_ba=test_ba,
                overfit_ratio=overfit_ratio(train_ba, test_ba), probe_ba=probe_ba)


def _run_one(cfg: TrainConfig, split: Split, probe: bool, rng: RngStream) -> tuple[dict, int]:
    ckpt, logs = train_run(cfg, split.train, split.val, rng.derive("train"),
                           n_nuisance=split.train.n_nuisance)
    trainer = Trainer.from_checkpoint(ckpt)
    return _evaluate(trainer, split, cfg, probe, rng), ckpt.epoch


def run_experiment(config: ExperimentConfig, sink=None, data: Optional[sd.TrialBatch] = None,
                   progress=None) -> list[RunResult]:
    """Run the sweep; one row per (seed, fold, cell) plus a lambda=0 control per
    (seed, fold, eval point), shared by every cell with that eval point."""
    config.validate()
    data = data if data is not None else load_dataset(config)
    results = []
    run_id = 0
    nan = float("nan")
    for seed, fold in itertools.product(config.seeds, config.folds):
        run_rng = RngStream(config.master_seed).derive("run", int(seed), int(fold))
        cells_by_ep = {ep: [c for c in config.grid() if c["eval_point"] == ep]
                       for ep in config.eval_points}
        for ep in config.eval_points:
            split = make_split(data, config, fold, ep, run_rng)
            control = dict(eval_point=ep, censor_mode=config.modes[0],
                           censor_method=config.methods[0], projection="trivial", lam=0.0)
            jobs = [(control, True)] + [(c, False) for c in cells_by_ep[ep]]
            for cell, is_control in jobs:
                cfg = config.train_config(cell, seed)
                # every run of one (seed, fold) starts from the same initialisation
                rng = run_rng.derive("cell", ep)
                status, metrics, epochs = "ok", {}, 0
                try:
                    metrics, epochs = _run_one(cfg, split, config.probe, rng)
                except (TrainingDiverged, FloatingPointError, ArithmeticError, ValueError) as e:
                    if isinstance(e, ConfigError):
                        raise
                    log.error("run %d (seed %s fold %s %s) failed: %s", run_id, seed, fold, cell, e)
                    status = "failed"
                row = RunResult(
                    run_id=run_id, seed=int(seed), fold=int(fold),
                    censor_mode=CONTROL if is_control else cell["censor_mode"],
                    censor_method=CONTROL if is_control else cell["censor_method"],
                    lam=cell["lam"], projection=cell["projection"], eval_point=ep,
                    epochs_trained=epochs,
                    train_ba=metrics.get("train_ba", nan), val_ba=metrics.get("val_ba", nan),
                    test_ba=metrics.get("test_ba", nan),
                    overfit_ratio=metrics.get("overfit_ratio", nan),
                    probe_ba=metrics.get("probe_ba", nan), status=status)
                results.append(row)
                if sink is not None:
                    sink.append(row)
                if progress is not None:
                    progress(row)
                run_id += 1
    return results


def resolve_output_dir(config: ExperimentConfig, override: Optional[str] = None) -> Path:
    import os
    return Path(override or os.environ.get(OUTPUT_DIR_ENV) or config.output_dir)


def split_metadata(config: ExperimentConfig, data: sd.TrialBatch) -> dict:
    """Subject assignment per fold, written next to the results for auditing."""
    subjects = np.unique(data.subject)
    folds = {}
    for fold in config.folds:
        tr, va, te = sd.subject_split(subjects, config.n_train, config.n_val, config.n_test, fold,
                                      RngStream(config.master_seed))
        folds[str(fold)] = {"train": tr.tolist(), "val": va.tolist(), "test": te.tolist()}
    return {"scheme": "each fold draws a uniform random permutation of subjects keyed by "
                      "(master_seed, fold); folds may overlap",
            "final_eval_trains_on": "train + val subjects",
            "folds": folds}
