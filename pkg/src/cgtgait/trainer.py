"""Training loop, evaluation metrics and the ablation harness."""
from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .network import (CGTGait, ModelConfig, count_complexity, predict_from_probs, with_block_count)
from .skeleton import (EMOTIONS, NUM_CLASSES, GeneratorConfig, SkeletonSequence, center,
                       compute_affective, generate_dataset, load_dataset, resample, rotation_matrix,
                       MAX_ROTATION, MAX_TILT, MAX_TRANSLATION, draw_rotation)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 32
    optimizer: str = "SGD"
    momentum: float = 0.9
    initial_lr: float = 0.01
    lr_decay: float = 0.1
    lr_step: int = 30
    seed: int = 0
    split_ratio: float = 0.9
    model: ModelConfig = field(default_factory=ModelConfig)
    data: Union[str, dict] = field(default_factory=lambda: {"class_counts": 120, "seed": 0})
    augment: bool = True
    augment_tilt_deg: float = 0.0      # pitch/roll range; yaw always spans +-17 degrees
    overfit: bool = False          # train and evaluate on the same (whole) dataset
    max_steps: Optional[int] = None
    stop_at_train_accuracy: Optional[float] = None
    eval_every: int = 1                # epochs between evaluations; the last epoch is always evaluated
    grad_clip: Optional[float] = 5.0   # global L2 norm; None disables
    affective_scaling: str = "center"  # none | center | standardize
    input_normalization: bool = True   # per-channel stream standardisation fitted on the train split
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.eval_every < 1:
            raise TrainingError("eval_every must be at least 1")
        if self.batch_size < 2:
            raise TrainingError("batch_size must be at least 2")
        if not 0.0 < self.split_ratio < 1.0:
            raise TrainingError("split_ratio must lie in (0, 1)")
        if self.affective_scaling not in ("none", "center", "standardize"):
            raise TrainingError(f"unknown affective scaling {self.affective_scaling!r}")
        if self.optimizer.upper() != "SGD":
            raise TrainingError("only SGD is supported")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise TrainingError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def desk_model_config() -> ModelConfig:
    """Full architecture at a quarter of the default widths, sized for a single CPU core."""
    return replace(ModelConfig().scaled(0.25), heads=2)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.initial_lr * cfg.lr_decay ** (epoch // cfg.lr_step)


class SGD:
    """SGD with heavy-ball momentum: v <- mu v + g; p <- p - lr v."""

    def __init__(self, params, lr: float, momentum: float = 0.9, clip_norm: Optional[float] = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                                 for p in self.params if p.grad is not None)))

    def step(self) -> float:
        """Apply one update; returns the pre-clipping global gradient norm."""
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += scale * p.grad
            p.data -= (self.lr * v).astype(p.dtype)
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ------------------------------------------------------------------ data

@dataclass
class Prepared:
    frames: np.ndarray     # [S, T, N, 3]
    labels: np.ndarray     # [S]
    affective: np.ndarray  # [S, 31]
    ids: List[str]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Prepared":
        idx = np.asarray(idx, dtype=int)
        return Prepared(self.frames[idx], self.labels[idx], self.affective[idx], [self.ids[i] for i in idx])

    def model_input(self, frames: Optional[np.ndarray] = None) -> np.ndarray:
        f = self.frames if frames is None else frames
        return np.moveaxis(f, -1, 1)  # [S, 3, T, N]


def prepare(seqs: Sequence[SkeletonSequence], frames: int = 48) -> Prepared:
    """Resample, centre, and attach the affective targets."""
    proc = [center(resample(s, frames)) for s in seqs]
    X = np.stack([s.frames for s in proc]) if proc else np.zeros((0, frames, 16, 3))
    y = np.array([s.label for s in proc], dtype=int)
    ya = np.stack([compute_affective(s) for s in proc]) if proc else np.zeros((0, 31))
    return Prepared(X, y, ya, [s.id for s in proc])


def load_data(source: Union[str, dict, Sequence[SkeletonSequence]]) -> List[SkeletonSequence]:
    if isinstance(source, (list, tuple)):
        return list(source)
    if isinstance(source, (str, Path)):
        return load_dataset(source)
    gen = GeneratorConfig.from_dict(source.get("generator", {}))
    return generate_dataset(source.get("class_counts", 120), seed=source.get("seed", 0), config=gen)


def stratified_split(labels: np.ndarray, ratio: float, seed: int):
    """Per-class shuffled split; returns (train_idx, test_idx), disjoint and exhaustive."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(NUM_CLASSES):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            continue
        idx = rng.permutation(idx)
        n_test = int(round(len(idx) * (1.0 - ratio)))
        if len(idx) > 1:
            n_test = min(max(n_test, 1), len(idx) - 1)
        else:
            n_test = 0
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


def augment_batch(frames: np.ndarray, rng: np.random.Generator,
                  max_angle: float = MAX_ROTATION, max_shift: float = MAX_TRANSLATION,
                  max_tilt: float = MAX_TILT) -> np.ndarray:
    """Batched ``skeleton.augment``: same draws, in the same order, per sample."""
    out = np.empty_like(frames)
    for i in range(len(frames)):
        angles = draw_rotation(rng, max_angle, max_tilt)
        shift = rng.uniform(-max_shift, max_shift, size=3)
        out[i] = frames[i] @ rotation_matrix(angles).T + shift
    return out


# ------------------------------------------------------------ evaluation

@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: List[Optional[float]]
    confusion: List[List[int]]      # rows = truth, columns = prediction
    macro_f1: float
    per_class_f1: List[float]
    num_samples: int
    complexity: Optional[dict] = None
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(y_true, y_pred, num_classes: int = NUM_CLASSES) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def metrics_from_predictions(y_true, y_pred, num_classes: int = NUM_CLASSES) -> EvalReport:
    """Accuracy, per-class accuracy, confusion and macro F1 (absent or never-hit classes score F1 = 0)."""
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    cm = confusion_matrix(y_true, y_pred, num_classes)
    notes = []
    per_acc, f1s = [], []
    for c in range(num_classes):
        support = cm[c].sum()
        tp = cm[c, c]
        if support == 0:
            notes.append(f"class {EMOTIONS[c]} absent from evaluation set; F1 counted as 0")
            per_acc.append(None)
        else:
            per_acc.append(float(tp / support))
        denom = 2 * tp + (cm[:, c].sum() - tp) + (support - tp)
        f1s.append(float(2 * tp / denom) if denom and support else 0.0)
    for n in notes:
        warnings.warn(n)
    acc = float(np.trace(cm) / max(cm.sum(), 1))
    return EvalReport(acc, per_acc, cm.tolist(), float(np.mean(f1s)), f1s, int(cm.sum()), warnings=notes)


def evaluate(model: CGTGait, data: Union[Prepared, Sequence[SkeletonSequence]],
             with_complexity: bool = False) -> EvalReport:
    if not isinstance(data, Prepared):
        data = prepare(data, model.config.frames)
    pred = model.predict(data.model_input())
    report = metrics_from_predictions(data.labels, pred, model.config.num_classes)
    if with_complexity:
        c = count_complexity(model.config)
        report.complexity = {"parameters": c.parameters, "flops": c.flops, "convention": c.convention}
    return report


# --------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: CGTGait
    history: List[dict]
    best_epoch: int
    best_accuracy: float
    train_idx: np.ndarray
    test_idx: np.ndarray
    final_report: EvalReport
    steps: int
    affective_mean: np.ndarray = None
    affective_std: np.ndarray = None

    def log_dict(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_accuracy": self.best_accuracy,
                "steps": self.steps, "history": self.history,
                "train_ids": self.train_idx.tolist(), "test_ids": self.test_idx.tolist()}


def _snapshot(model: CGTGait):
    return ({k: v.copy() for k, v in model.state_dict().items()},
            [[replace(s, prototypes=s.prototypes.copy()) for s in row] for row in model.fr_states])


def _restore(model: CGTGait, snap) -> None:
    model.load_state_dict(snap[0])
    model.fr_states = snap[1]


def train(config: TrainConfig, dataset: Optional[Sequence[SkeletonSequence]] = None,
          progress: bool = False) -> TrainResult:
    """Train from scratch; returns the best-by-test-accuracy model (ties keep the earlier epoch)."""
    cfg = config
    seqs = load_data(dataset if dataset is not None else cfg.data)
    if not seqs:
        raise TrainingError("dataset is empty")
    data = prepare(seqs, cfg.model.frames)
    if cfg.overfit:
        train_idx = test_idx = np.arange(len(data))
    else:
        train_idx, test_idx = stratified_split(data.labels, cfg.split_ratio, cfg.seed)
    if len(np.unique(data.labels[train_idx])) < 2:
        raise TrainingError("training split needs at least two classes")
    if len(train_idx) < cfg.batch_size:
        raise TrainingError(f"training split ({len(train_idx)}) smaller than one batch ({cfg.batch_size})")
    tr, te = data.subset(train_idx), data.subset(test_idx)
    aff_mean, aff_std = np.zeros(tr.affective.shape[1]), np.ones(tr.affective.shape[1])
    if cfg.affective_scaling in ("center", "standardize"):
        aff_mean = tr.affective.mean(0)
    if cfg.affective_scaling == "standardize":
        aff_std = tr.affective.std(0) + 1e-6
    targets = (tr.affective - aff_mean) / aff_std

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(seeds[0])
    aug_rng = np.random.default_rng(seeds[1])
    model = CGTGait(cfg.model, seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    if cfg.input_normalization:
        model.fit_input_stats(tr.model_input())
    opt = SGD(model.parameters(), cfg.initial_lr, cfg.momentum, cfg.grad_clip)

    history: List[dict] = []
    best = (-1.0, -1, None)
    steps = 0
    n_batches = len(tr) // cfg.batch_size
    for epoch in range(cfg.epochs):
        opt.lr = learning_rate(cfg, epoch)
        t0 = time.time()
        order = shuffle_rng.permutation(len(tr))
        sums = {"total": 0.0, "ce": 0.0, "mse": 0.0, "fr": 0.0}
        correct = 0
        seen = 0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            frames = tr.frames[idx]
            if cfg.augment and not cfg.overfit:
                frames = augment_batch(frames, aug_rng, max_tilt=math.radians(cfg.augment_tilt_deg))
            out = model(tr.model_input(frames))
            res = model.loss(out, tr.labels[idx], targets[idx])
            if not np.isfinite(res.total.data):
                raise TrainingError(f"loss became non-finite at epoch {epoch}, step {steps}")
            opt.zero_grad()
            res.total.backward()
            opt.step()
            model.fr_states = res.fr_states
            steps += 1
            for k, v in res.components().items():
                sums[k] += v
            pred = predict_from_probs(out.probs_p.data, out.probs_m.data)
            correct += int((pred == tr.labels[idx]).sum())
            seen += len(idx)
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        stop = cfg.max_steps is not None and steps >= cfg.max_steps
        entry = {"epoch": epoch, "lr": opt.lr, "steps": steps,
                 **{k: v / max(1, min(n_batches, b + 1)) for k, v in sums.items()},
                 "train_batch_accuracy": correct / max(seen, 1)}
        history.append(entry)
        if (epoch + 1) % cfg.eval_every and not stop and epoch + 1 < cfg.epochs:
            entry["seconds"] = time.time() - t0
            continue
        report = evaluate(model, te)
        entry.update(test_accuracy=report.accuracy, test_macro_f1=report.macro_f1)
        if report.accuracy > best[0]:
            best = (report.accuracy, epoch, _snapshot(model))
        if cfg.stop_at_train_accuracy is not None:
            tr_acc = report.accuracy if cfg.overfit else evaluate(model, tr).accuracy
            entry["train_accuracy"] = tr_acc
            stop = stop or tr_acc >= cfg.stop_at_train_accuracy
        entry["seconds"] = time.time() - t0
        if progress:
            log.info("epoch %d lr %.4g loss %.4f (ce %.4f mse %.4f fr %.4f) acc %.4f",
                     epoch, opt.lr, entry["total"], entry["ce"], entry["mse"], entry["fr"],
                     report.accuracy)
        if stop:
            break
    _restore(model, best[2])
    final = evaluate(model, te, with_complexity=True)
    return TrainResult(model, history, best[1], best[0], train_idx, test_idx, final, steps,
                       aff_mean, aff_std)


# --------------------------------------------------------------- ablation

ABLATION_AXES = ("cgt_order", "fusion_parts", "bcsf_position", "block_count", "heads")


def ablation_variants(base: ModelConfig, axis: str) -> Dict[str, ModelConfig]:
    if axis == "cgt_order":
        return {o: replace(base, cgt_order=o) for o in ("gcn-transformer", "transformer-gcn", "parallel")}
    if axis == "fusion_parts":
        pos = base.bcsf_position or 2
        return {
            "none": replace(base, bcsf_position=0),
            "SF": replace(base, bcsf_position=pos, bcsf_spatial=True, bcsf_temporal=False),
            "TF": replace(base, bcsf_position=pos, bcsf_spatial=False, bcsf_temporal=True),
            "SF+TF": replace(base, bcsf_position=pos, bcsf_spatial=True, bcsf_temporal=True),
        }
    if axis == "bcsf_position":
        return {f"after_block{i}": replace(base, bcsf_position=i) for i in range(1, base.num_blocks + 1)}
    if axis == "block_count":
        return {f"{n}_blocks": with_block_count(base, n) for n in (3, 4, 5, 6)}
    if axis == "heads":
        return {f"h{h}": replace(base, heads=h) for h in (2, 4, 8, 16)}
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


def _full_scale(variant: ModelConfig, base: ModelConfig) -> ModelConfig:
    """The same variant at the default full widths (for FLOP comparison)."""
    factor = ModelConfig().channels[-1][1] / base.channels[-1][1]
    return variant.scaled(factor) if factor != 1 else variant


def ablate(config: TrainConfig, axis: str, dataset: Optional[Sequence[SkeletonSequence]] = None,
           progress: bool = False) -> dict:
    """Train every variant of one ablation axis and collect accuracy and complexity."""
    variants = ablation_variants(config.model, axis)
    seqs = load_data(dataset if dataset is not None else config.data)
    rows = []
    for name, mcfg in variants.items():
        t0 = time.time()
        res = train(replace(config, model=mcfg), seqs, progress=progress)
        comp = count_complexity(mcfg)
        full = count_complexity(_full_scale(mcfg, config.model))
        rows.append({"variant": name, "accuracy": res.best_accuracy,
                     "macro_f1": res.final_report.macro_f1, "best_epoch": res.best_epoch,
                     "parameters": comp.parameters, "flops": comp.flops,
                     "full_scale_parameters": full.parameters, "full_scale_flops": full.flops,
                     "final_loss": res.history[-1]["total"], "seconds": time.time() - t0,
                     "model": mcfg.to_dict()})
        if progress:
            log.info("ablation %s/%s acc %.4f", axis, name, res.best_accuracy)
    return {"axis": axis, "epochs": config.epochs, "seed": config.seed,
            "flop_convention": count_complexity(config.model).convention, "variants": rows}
