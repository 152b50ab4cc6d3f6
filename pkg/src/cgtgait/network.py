"""Dual-stream CGTGait assembly, training objective, prediction and complexity accounting."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .bcsf import BCSF
from .nn import Linear, Module, name_parameters
from .skeleton import NUM_AFFECTIVE, NUM_CLASSES, NUM_JOINTS, extract_motion
from .transformer import CGTBlock, ConfigError, FRHeadState, fr_contrastive

FULL_CHANNELS = ((3, 64), (64, 64), (64, 128), (128, 256))
FULL_STRIDES = (1, 1, 2, 2)
FULL_LAMBDAS = (0.1, 0.2, 0.5, 1.0)
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    channels: List[List[int]] = field(default_factory=lambda: [list(c) for c in FULL_CHANNELS])
    strides: List[int] = field(default_factory=lambda: list(FULL_STRIDES))
    heads: int = 8
    bcsf_position: int = 2          # fuse after this block; 0 disables fusion
    bcsf_temporal: bool = True
    bcsf_spatial: bool = True
    cgt_order: str = "gcn-transformer"
    temporal_module: str = "transformer"   # or "tcn" for the 9x1 baseline
    positional_embedding: bool = True
    ffn_mult: int = 2
    frames: int = 48
    joints: int = NUM_JOINTS
    motion_channels: int = 8
    num_classes: int = NUM_CLASSES
    affective_dim: int = NUM_AFFECTIVE
    lambdas: List[float] = field(default_factory=lambda: list(FULL_LAMBDAS))
    fr_dim: int = 64
    fr_tau: float = 0.8
    fr_momentum: float = 0.9
    fr_temperature: float = 0.1

    def __post_init__(self):
        self.channels = [list(map(int, c)) for c in self.channels]
        self.strides = [int(s) for s in self.strides]
        self.lambdas = [float(v) for v in self.lambdas]
        self.validate()

    def validate(self) -> None:
        n = len(self.channels)
        if len(self.strides) != n:
            raise ConfigError("one stride per block is required")
        if len(self.lambdas) != n:
            raise ConfigError(f"expected {n} FR coefficients, got {len(self.lambdas)}")
        if any(v < 0 for v in self.lambdas):
            raise ConfigError("FR coefficients must be nonnegative")
        for (ci, co), nxt in zip(self.channels, self.channels[1:]):
            if co != nxt[0]:
                raise ConfigError(f"block widths do not chain: {co} -> {nxt[0]}")
        if not 0 <= self.bcsf_position <= n:
            raise ConfigError(f"BCSF position must be in 0..{n}")
        if self.bcsf_position and not (self.bcsf_temporal or self.bcsf_spatial):
            raise ConfigError("BCSF enabled with both fusion parts off; use bcsf_position=0")
        for s in self.strides:
            if s not in (1, 2):
                raise ConfigError("strides must be 1 or 2")
        if self.temporal_module == "transformer":
            for _, co in self.channels:
                if co % self.heads:
                    raise ConfigError(f"{self.heads} heads do not divide {co} channels")

    @property
    def num_blocks(self) -> int:
        return len(self.channels)

    def block_frames(self) -> List[int]:
        out, t = [], self.frames
        for s in self.strides:
            out.append(t)
            t = -(-t // s)
        return out

    @property
    def out_frames(self) -> int:
        t = self.frames
        for s in self.strides:
            t = -(-t // s)
        return t

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**obj)

    def scaled(self, factor: float) -> "ModelConfig":
        """Same architecture with every hidden width multiplied by ``factor``."""
        ch = [[c[0], int(round(c[1] * factor))] for c in self.channels]
        for i in range(1, len(ch)):
            ch[i][0] = int(round(self.channels[i][0] * factor))
        return replace(self, channels=ch)

    def baseline(self) -> "ModelConfig":
        """No fusion and a 9x1 temporal convolution in place of the transformer."""
        return replace(self, temporal_module="tcn", bcsf_position=0)


def with_block_count(cfg: ModelConfig, blocks: int) -> ModelConfig:
    """Block-count ablation keeping the 256x12x16 output for 48 input frames.

    Three blocks drop the second (64, 64) block; extra blocks repeat the last
    width at stride 1.
    """
    ch = [list(c) for c in cfg.channels]
    st = list(cfg.strides)
    lam = list(cfg.lambdas)
    if blocks < 3:
        raise ConfigError("at least three blocks are needed for the 4x temporal reduction")
    if blocks == 3:
        ch = [ch[0], [ch[1][1], ch[2][1]], ch[3]]
        ch[0][1] = ch[1][0]
        st = [st[0], st[2], st[3]]
        lam = lam[1:]
    while len(ch) < blocks:
        last = ch[-1][1]
        ch.append([last, last])
        st.append(1)
        lam.append(lam[-1])
    pos = min(cfg.bcsf_position, blocks)
    return replace(cfg, channels=ch, strides=st, lambdas=lam, bcsf_position=pos)


@dataclass
class LossWeights:
    lambdas: List[float] = field(default_factory=lambda: list(FULL_LAMBDAS))

    def __post_init__(self):
        if any(v < 0 for v in self.lambdas):
            raise ConfigError("FR coefficients must be nonnegative")


@dataclass
class Outputs:
    logits_p: Tensor
    logits_m: Tensor
    probs_p: Tensor
    probs_m: Tensor
    affective: Tensor
    block_p: List[Tensor]     # per-block stream outputs [B, C, T, N] (before fusion)
    block_m: List[Tensor]
    features_p: Tensor        # final stream feature maps
    features_m: Tensor


@dataclass
class LossResult:
    total: Tensor
    ce: float
    mse: float
    fr: float
    fr_states: List[List[FRHeadState]]

    def components(self) -> Dict[str, float]:
        return {"total": float(self.total.data), "ce": self.ce, "mse": self.mse, "fr": self.fr}


class CGTGait(Module):
    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0, dtype=np.float32):
        self.config = cfg = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        frames = cfg.block_frames()
        kw = dict(order=cfg.cgt_order, temporal=cfg.temporal_module, ffn_mult=cfg.ffn_mult,
                  positional=cfg.positional_embedding)
        self.posture = []
        self.motion = []
        for i, ((ci, co), s) in enumerate(zip(cfg.channels, cfg.strides)):
            ci_m = cfg.motion_channels if i == 0 else ci
            self.posture.append(CGTBlock(ci, co, frames[i], s, cfg.heads, rng, dtype, **kw))
            self.motion.append(CGTBlock(ci_m, co, frames[i], s, cfg.heads, rng, dtype, **kw))
        self.bcsf = None
        if cfg.bcsf_position:
            c = cfg.channels[cfg.bcsf_position - 1][1]
            self.bcsf = BCSF(c, cfg.joints, cfg.heads, rng, dtype, temporal=cfg.bcsf_temporal,
                             spatial=cfg.bcsf_spatial, ffn_mult=cfg.ffn_mult)
        c_last = cfg.channels[-1][1]
        self.cls_p = Linear(c_last, cfg.num_classes, rng, dtype)
        self.cls_m = Linear(c_last, cfg.num_classes, rng, dtype)
        self.affective_head = Linear(c_last, cfg.affective_dim, rng, dtype)
        self.fr_p = [Linear(co, cfg.fr_dim, rng, dtype) for _, co in cfg.channels]
        self.fr_m = [Linear(co, cfg.fr_dim, rng, dtype) for _, co in cfg.channels]
        name_parameters(self)
        self.fr_states = self.fresh_fr_states()
        self.input_stats = self.identity_input_stats()

    def identity_input_stats(self) -> Dict[str, np.ndarray]:
        """Per-channel (mean, std) for each stream; identity until fitted."""
        m = self.config.motion_channels
        return {"posture_mean": np.zeros(3), "posture_std": np.ones(3),
                "motion_mean": np.zeros(m), "motion_std": np.ones(m)}

    def fit_input_stats(self, x: np.ndarray, floor: float = 1e-6) -> None:
        """Set the fixed input standardisation from a [B, 3, T, N] sample of training data."""
        self.input_stats = self.identity_input_stats()
        fp, fm = self.stream_inputs(x)
        stats = {}
        for name, t in (("posture", fp), ("motion", fm)):
            d = t.data.astype(np.float64)
            stats[f"{name}_mean"] = d.mean(axis=(0, 2, 3))
            stats[f"{name}_std"] = np.maximum(d.std(axis=(0, 2, 3)), floor)
        self.input_stats = stats

    def fresh_fr_states(self) -> List[List[FRHeadState]]:
        cfg = self.config
        return [[FRHeadState.empty(cfg.num_classes, cfg.fr_dim, tau=cfg.fr_tau, momentum=cfg.fr_momentum,
                                   temperature=cfg.fr_temperature) for _ in range(cfg.num_blocks)]
                for _ in range(2)]

    # ---------------------------------------------------------------- forward

    def stream_inputs(self, x: np.ndarray) -> Tuple[Tensor, Tensor]:
        """Standardised posture [B, 3, T, N] and motion [B, 8, T, N] tensors."""
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != (3, self.config.frames, self.config.joints):
            raise ad.ShapeError(
                f"expected input [B, 3, {self.config.frames}, {self.config.joints}], got {x.shape}")
        frames = np.moveaxis(x, 1, -1)                     # [B, T, N, 3]
        motion = np.moveaxis(extract_motion(frames), -1, 1)  # [B, 8, T, N]
        st = self.input_stats
        x = (x - st["posture_mean"][:, None, None]) / st["posture_std"][:, None, None]
        motion = (motion - st["motion_mean"][:, None, None]) / st["motion_std"][:, None, None]
        return Tensor(x.astype(self.dtype)), Tensor(motion.astype(self.dtype))

    def forward(self, x: np.ndarray) -> Outputs:
        f_p, f_m = self.stream_inputs(x)
        block_p, block_m = [], []
        for i, (bp, bm) in enumerate(zip(self.posture, self.motion), start=1):
            f_p, f_m = bp(f_p), bm(f_m)
            block_p.append(f_p)
            block_m.append(f_m)
            if self.bcsf is not None and i == self.config.bcsf_position:
                f_p, f_m = self.bcsf(f_p, f_m)
        pooled_p = ad.reduce_mean(f_p, axes=(2, 3))
        pooled_m = ad.reduce_mean(f_m, axes=(2, 3))
        logits_p, logits_m = self.cls_p(pooled_p), self.cls_m(pooled_m)
        return Outputs(logits_p, logits_m, ad.softmax(logits_p, -1), ad.softmax(logits_m, -1),
                       self.affective_head(pooled_p), block_p, block_m, f_p, f_m)

    __call__ = forward

    def predict_proba(self, x: np.ndarray, batch_size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
        pp, pm = [], []
        with no_grad():
            for s in range(0, len(x), batch_size):
                out = self.forward(x[s:s + batch_size])
                pp.append(out.probs_p.data)
                pm.append(out.probs_m.data)
        return np.concatenate(pp), np.concatenate(pm)

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return predict_from_probs(*self.predict_proba(x, batch_size))

    # ---------------------------------------------------------------- losses

    def loss(self, out: Outputs, y: np.ndarray, y_a: np.ndarray,
             weights: Optional[LossWeights] = None) -> LossResult:
        return total_loss(out, y, y_a, weights or LossWeights(self.config.lambdas), self)


def predict_from_probs(probs_p: np.ndarray, probs_m: np.ndarray) -> np.ndarray:
    """Argmax of the two-stream mean; ties go to the lowest class index."""
    return np.argmax((np.asarray(probs_p) + np.asarray(probs_m)) / 2.0, axis=-1)


def cross_entropy_from_probs(probs: Tensor, y: np.ndarray) -> Tensor:
    picked = ad.getitem(probs, (np.arange(len(y)), np.asarray(y)))
    return ad.reduce_mean(ad.log(picked)) * -1.0


def total_loss(out: Outputs, y, y_a, weights: LossWeights, model: CGTGait) -> LossResult:
    """L = CE(posture) + CE(motion) + MSE(affective) + sum_i lambda_i (CL_p,i + CL_m,i).

    The affective term is the batch mean of the squared error summed over
    the 31 features. FR prototypes are read from ``model.fr_states``; the
    updated prototypes are returned, not written back.
    """
    y = np.asarray(y)
    ce = ad.add(ad.cross_entropy(out.logits_p, y), ad.cross_entropy(out.logits_m, y))
    target = Tensor(np.asarray(y_a, dtype=out.affective.dtype))
    diff = ad.sub(out.affective, target)
    mse = ad.reduce_mean(ad.reduce_sum(ad.mul(diff, diff), axis=-1))
    total = ad.add(ce, mse)
    conf_p = out.probs_p.data[np.arange(len(y)), y]
    conf_m = out.probs_m.data[np.arange(len(y)), y]
    fr_value = 0.0
    new_states: List[List[FRHeadState]] = [[], []]
    for s, (feats, heads, conf) in enumerate(((out.block_p, model.fr_p, conf_p),
                                              (out.block_m, model.fr_m, conf_m))):
        for i, (f, head) in enumerate(zip(feats, heads)):
            state = model.fr_states[s][i]
            lam = weights.lambdas[i]
            if lam == 0.0:
                new_states[s].append(state)
                continue
            cl, new_state = fr_contrastive(f, y, conf, head, state)
            new_states[s].append(new_state)
            total = ad.add(total, cl * lam)
            fr_value += lam * float(cl.data)
    return LossResult(total, float(ce.data), float(mse.data), fr_value, new_states)


# ------------------------------------------------------------ checkpoints

def save_checkpoint(path: Union[str, Path], model: CGTGait, extra: Optional[dict] = None) -> None:
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    for s, states in enumerate(model.fr_states):
        for i, st in enumerate(states):
            arrays[f"proto/{s}/{i}"] = st.prototypes
    for k, v in model.input_stats.items():
        arrays[f"input/{k}"] = v
    meta = {"version": CHECKPOINT_VERSION, "config": model.config.to_dict(),
            "dtype": model.dtype.name, "extra": extra or {}}
    arrays["__meta__"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: Union[str, Path]) -> Tuple[CGTGait, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        model = CGTGait(ModelConfig.from_dict(meta["config"]), dtype=np.dtype(meta["dtype"]))
        model.load_state_dict({k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")})
        for s, states in enumerate(model.fr_states):
            for i, st in enumerate(states):
                st.prototypes = z[f"proto/{s}/{i}"].copy()
        model.input_stats = {k: z[f"input/{k}"].copy() for k in model.input_stats}
    return model, meta


# ------------------------------------------------------------ complexity

FLOP_CONVENTION = ("1 multiply-accumulate = 1 FLOP; elementwise ops (adds, activations, "
                   "normalisation) 1 FLOP per element; attention softmax not counted separately; "
                   "inference path only (FR and affective heads excluded)")


@dataclass
class ComplexityReport:
    parameters: int
    flops: int
    macs: int
    elementwise: int
    breakdown: List[dict]
    convention: str = FLOP_CONVENTION

    def to_dict(self) -> dict:
        return asdict(self)


def _param_count(module) -> int:
    return module.num_parameters() if module is not None else 0


def count_complexity(config: Optional[ModelConfig] = None) -> ComplexityReport:
    """Analytic parameter and FLOP count for one 3 x frames x joints sample."""
    cfg = config or ModelConfig()
    model = CGTGait(cfg)
    n = cfg.joints
    rows = []
    t = cfg.frames
    rows.append({"layer": "motion_extractor", "params": 0, "macs": 0, "elementwise": 8 * t * n})
    frames = cfg.block_frames()
    for stream, blocks in (("posture", model.posture), ("motion", model.motion)):
        for i, b in enumerate(blocks, start=1):
            macs = b.macs(n)
            rows.append({"layer": f"{stream}.block{i}", "params": b.num_parameters(),
                         "macs": int(sum(macs.values())), "elementwise": int(b.elementwise(n)),
                         "detail": macs})
            if model.bcsf is not None and i == cfg.bcsf_position and stream == "motion":
                bm = model.bcsf.macs(b.out_frames)
                rows.append({"layer": f"bcsf@{i}", "params": model.bcsf.num_parameters(),
                             "macs": int(sum(bm.values())),
                             "elementwise": int(model.bcsf.elementwise(b.out_frames)), "detail": bm})
    c_last = cfg.channels[-1][1]
    t_out = cfg.out_frames
    for name, head in (("posture.classifier", model.cls_p), ("motion.classifier", model.cls_m)):
        rows.append({"layer": name, "params": head.num_parameters(), "macs": head.macs(1),
                     "elementwise": c_last * t_out * n + 2 * cfg.num_classes})
    train_only = _param_count(model.affective_head) + sum(h.num_parameters() for h in model.fr_p + model.fr_m)
    rows.append({"layer": "training_heads", "params": train_only, "macs": 0, "elementwise": 0})
    for r in rows:
        r["flops"] = r["macs"] + r["elementwise"]
    params = model.num_parameters()
    assert params == sum(r["params"] for r in rows)
    macs = sum(r["macs"] for r in rows)
    elem = sum(r["elementwise"] for r in rows)
    return ComplexityReport(params, macs + elem, macs, elem, rows)
