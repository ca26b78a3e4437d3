"""Small convolutional pose regressor trained with hand-written backprop.

Input is a pair of coordinate maps on a shared grid, each contributing
(X, Y, Z, mask) channels, so 8 channels in total.  The network is a stack of
valid (unpadded) strided convolutions with ReLU, then two dense layers that
emit 7 numbers: a translation in units of ``t_scale`` mm and a raw rotation
vector whose meaning depends on the loss variant (see :mod:`sparsereg.loss`).
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cloud import (CoordinateMap, DEFAULT_RESOLUTION, DEFAULT_SCALE, PointCloud, downsample_map,
                    rasterize_coordinate_map)
from .errors import ConfigMismatch, CorruptDataset, EmptyDataset, MissingCheckpoint, ShapeMismatch, ZeroQuaternion
from .fileio import atomic_write
from .loss import VARIANTS, LossWeights, batch_loss, gt_rotation_target, prediction_to_transform
from .pose_math import RigidTransform, UnitQuaternion, rotation_error_array

IN_CHANNELS = 8


@dataclass(frozen=True)
class RegressorConfig:
    input_resolution: int = 32
    conv_spec: tuple[tuple[int, int, int], ...] = ((8, 3, 2), (16, 3, 2), (32, 3, 2))
    fc_width: int = 128
    output_dim: int = 7
    lr: float = 0.01
    weight_decay: float = 5e-5
    batch_size: int = 32
    epochs: int = 60
    seed: int = 0
    loss_variant: str = "quat_l2"
    lr_schedule: str = "cosine"  # or "constant"
    swap_augment: bool = True  # also train on (target, source, gt^-1)
    coord_scale: float = 50.0  # mm per unit of network input
    t_scale: float = 10.0  # mm per unit of translation output
    raster_resolution: int = DEFAULT_RESOLUTION
    raster_scale: float = DEFAULT_SCALE

    def __post_init__(self):
        object.__setattr__(self, "conv_spec", tuple(tuple(int(v) for v in c) for c in self.conv_spec))
        if self.output_dim != 7:
            raise ValueError("output_dim must be 7")
        if self.loss_variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")
        dims = [self.input_resolution, self.fc_width, self.batch_size, self.epochs + 1]
        if min(dims) <= 0 or any(min(c) <= 0 for c in self.conv_spec):
            raise ValueError("all dimensions must be positive")
        if self.feature_shape()[1] < 1:
            raise ValueError("conv stack reduces the input below 1 pixel")

    def feature_shape(self) -> tuple[int, int]:
        """(channels, spatial size) after the conv stack."""
        size, ch = self.input_resolution, IN_CHANNELS
        for out, k, s in self.conv_spec:
            size = (size - k) // s + 1
            ch = out
        return ch, size

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        ch = IN_CHANNELS
        for i, (out, k, _) in enumerate(self.conv_spec):
            shapes += [(f"conv{i}.w", (out, ch, k, k)), (f"conv{i}.b", (out,))]
            ch = out
        c, s = self.feature_shape()
        shapes += [("fc0.w", (c * s * s, self.fc_width)), ("fc0.b", (self.fc_width,)),
                   ("fc1.w", (self.fc_width, 7)), ("fc1.b", (7,))]
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_spec"] = [list(c) for c in self.conv_spec]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegressorConfig":
        d = dict(d)
        d["conv_spec"] = tuple(tuple(c) for c in d["conv_spec"])
        return cls(**d)


class RegressorParams:
    """Flat float64 parameter vector with named views per layer."""

    def __init__(self, config: RegressorConfig, flat: Optional[np.ndarray] = None):
        self.config = config
        shapes = config.layer_shapes()
        size = sum(int(np.prod(s)) for _, s in shapes)
        if flat is None:
            flat = np.zeros(size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (size,):
            raise ShapeMismatch(f"expected {size} parameters, got {flat.shape}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("parameters must be finite")
        self.flat = flat
        self.slices = {}
        off = 0
        for name, shape in shapes:
            n = int(np.prod(shape))
            self.slices[name] = (slice(off, off + n), shape)
            off += n

    def __getitem__(self, name: str) -> np.ndarray:
        sl, shape = self.slices[name]
        return self.flat[sl].reshape(shape)

    def __len__(self) -> int:
        return self.flat.size

    def copy(self) -> "RegressorParams":
        return RegressorParams(self.config, self.flat.copy())

    @classmethod
    def init(cls, config: RegressorConfig, seed: Optional[int] = None) -> "RegressorParams":
        """Fan-in scaled uniform weights, zero biases; the rotation output bias
        starts at the identity rotation."""
        rng = np.random.default_rng(config.seed if seed is None else seed)
        p = cls(config)
        for name, (sl, shape) in p.slices.items():
            if name.endswith(".w"):
                fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
                bound = np.sqrt(6.0 / fan_in)
                if name == "fc1.w":
                    bound *= 0.1
                p.flat[sl] = rng.uniform(-bound, bound, size=int(np.prod(shape)))
        bias = p["fc1.b"]
        if config.loss_variant.startswith("quat"):
            bias[3] = 1.0  # (1, 0, 0, 0)
        else:
            bias[6] = 1.0  # theta 0 about z
        return p


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, s: int) -> tuple[np.ndarray, int, int]:
    B, C, H, W = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]  # (B, C, Ho, Wo, k, k)
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    return cols, Ho, Wo


def _col2im(dcols: np.ndarray, x_shape, k: int, s: int, Ho: int, Wo: int) -> np.ndarray:
    B, C, H, W = x_shape
    d = dcols.reshape(B, Ho, Wo, C, k, k)
    dx = np.zeros(x_shape)
    for di in range(k):
        for dj in range(k):
            dx[:, :, di:di + s * (Ho - 1) + 1:s, dj:dj + s * (Wo - 1) + 1:s] += d[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return dx


def forward_batch(params: RegressorParams, x: np.ndarray, keep_cache: bool = False):
    """Raw 7-vector outputs for inputs ``x`` of shape (B, 8, R, R).

    Translation entries are already multiplied by ``t_scale``.
    """
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != (IN_CHANNELS, cfg.input_resolution, cfg.input_resolution):
        raise ShapeMismatch(f"expected (B, {IN_CHANNELS}, {cfg.input_resolution}, {cfg.input_resolution}), got {x.shape}")
    cache = []
    h = x
    for i, (out, k, s) in enumerate(cfg.conv_spec):
        W = params[f"conv{i}.w"]
        cols, Ho, Wo = _im2col(h, k, s)
        z = cols @ W.reshape(out, -1).T + params[f"conv{i}.b"]
        z = z.reshape(h.shape[0], Ho, Wo, out).transpose(0, 3, 1, 2)
        a = np.maximum(z, 0.0)
        if keep_cache:
            cache.append((h.shape, cols, z, Ho, Wo))
        h = a
    flat = h.reshape(h.shape[0], -1)
    z0 = flat @ params["fc0.w"] + params["fc0.b"]
    a0 = np.maximum(z0, 0.0)
    out = a0 @ params["fc1.w"] + params["fc1.b"]
    out = out * np.array([cfg.t_scale] * 3 + [1.0] * 4)
    if keep_cache:
        return out, (cache, h.shape, flat, z0, a0)
    return out


def backward_batch(params: RegressorParams, cache, dout: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(dout * out)`` w.r.t. the flat parameter vector."""
    cfg = params.config
    conv_cache, feat_shape, flat, z0, a0 = cache
    grad = RegressorParams(cfg)
    dout = dout * np.array([cfg.t_scale] * 3 + [1.0] * 4)
    grad["fc1.w"][...] = a0.T @ dout
    grad["fc1.b"][...] = dout.sum(axis=0)
    da0 = dout @ params["fc1.w"].T
    dz0 = da0 * (z0 > 0)
    grad["fc0.w"][...] = flat.T @ dz0
    grad["fc0.b"][...] = dz0.sum(axis=0)
    dh = (dz0 @ params["fc0.w"].T).reshape(feat_shape)
    for i in reversed(range(len(cfg.conv_spec))):
        out, k, s = cfg.conv_spec[i]
        in_shape, cols, z, Ho, Wo = conv_cache[i]
        dz = (dh * (z > 0)).transpose(0, 2, 3, 1).reshape(-1, out)
        W = params[f"conv{i}.w"]
        grad[f"conv{i}.w"][...] = (dz.T @ cols).reshape(W.shape)
        grad[f"conv{i}.b"][...] = dz.sum(axis=0)
        if i > 0:
            dh = _col2im(dz @ W.reshape(out, -1), in_shape, k, s, Ho, Wo)
    return grad.flat


# --------------------------------------------------------------------------
# pair encoding
# --------------------------------------------------------------------------

def encode_maps(source: CoordinateMap, target: CoordinateMap, coord_scale: float = 50.0) -> np.ndarray:
    """Stack two maps sharing one grid into an (8, R, R) network input."""
    if source.resolution != target.resolution or not np.allclose(source.origin, target.origin):
        raise ShapeMismatch("source and target maps must share a grid")
    chans = []
    shift = np.array([target.origin[0], target.origin[1], 0.0])
    for m in (source, target):
        xyz = np.where(m.mask[..., None], (m.xyz - shift) / coord_scale, 0.0)
        chans += [xyz[..., 0], xyz[..., 1], xyz[..., 2], m.mask.astype(float)]
    return np.stack(chans)


def encode_pair(source: PointCloud, target: PointCloud, config: RegressorConfig) -> np.ndarray:
    """Rasterize both clouds on a grid centered at the target's xy centroid,
    downsample to the network resolution and encode."""
    origin = target.centroid[:2]
    factor = config.raster_resolution // config.input_resolution
    maps = []
    for c in (source, target):
        m = rasterize_coordinate_map(c, config.raster_resolution, config.raster_scale, origin=origin)
        maps.append(downsample_map(m, factor) if factor > 1 else m)
    return encode_maps(maps[0], maps[1], config.coord_scale)


# --------------------------------------------------------------------------
# single-pair API
# --------------------------------------------------------------------------

def forward(params: RegressorParams, pair: tuple[CoordinateMap, CoordinateMap]):
    """Pose prediction for one pair of maps already at the network resolution."""
    from .loss import PosePrediction

    x = encode_maps(pair[0], pair[1], params.config.coord_scale)[None]
    out = forward_batch(params, x)[0]
    if params.config.loss_variant.startswith("quat"):
        return PosePrediction(out[:3], out[3:7])
    return out


def loss_and_grad(params: RegressorParams, x: np.ndarray, gt_t: np.ndarray, gt_r: np.ndarray,
                  weights: LossWeights = LossWeights(), variant: Optional[str] = None):
    """Mean loss over a batch and its gradient w.r.t. all parameters."""
    variant = variant or params.config.loss_variant
    out, cache = forward_batch(params, x, keep_cache=True)
    res = batch_loss(variant, out, gt_t, gt_r, weights)
    B = out.shape[0]
    g = backward_batch(params, cache, res["grad"] / B)
    return float(res["total"].mean()), g, res


def backward(params: RegressorParams, pair: tuple[CoordinateMap, CoordinateMap], gt: RigidTransform,
             loss_variant: Optional[str] = None, weights: LossWeights = LossWeights()) -> np.ndarray:
    variant = loss_variant or params.config.loss_variant
    x = encode_maps(pair[0], pair[1], params.config.coord_scale)[None]
    _, g, _ = loss_and_grad(params, x, gt.t[None], gt_rotation_target(gt, variant)[None], weights, variant)
    return g


def tiny_config(loss_variant: str = "quat_l2", seed: int = 0) -> RegressorConfig:
    """Smallest useful network, for finite-difference checks."""
    return RegressorConfig(input_resolution=8, conv_spec=((3, 3, 2), (4, 3, 1)), fc_width=6,
                           batch_size=2, epochs=1, seed=seed, loss_variant=loss_variant)


def network_grad_check(config: RegressorConfig, seed: int, batch: int = 2, eps: float = 1e-6,
                       floor: float = 1e-3, weights: LossWeights = LossWeights()) -> float:
    """Max relative error of the backprop gradient against central
    differences over every parameter, at a random input and parameter point."""
    from .loss import grad_check
    from .pose_math import random_quaternions

    rng = np.random.default_rng(seed)
    params = RegressorParams.init(config, seed=seed)
    params.flat += rng.normal(0.0, 0.05, size=len(params))  # move biases off zero
    R = config.input_resolution
    x = rng.normal(0.0, 1.0, size=(batch, IN_CHANNELS, R, R))
    x[:, 3] = x[:, 7] = 1.0
    gts = [RigidTransform(rng.normal(0.0, 5.0, 3), UnitQuaternion.from_array(q))
           for q in random_quaternions(rng, batch)]
    gt_t = np.array([g.t for g in gts])
    gt_r = np.array([gt_rotation_target(g, config.loss_variant) for g in gts])

    _, analytic, _ = loss_and_grad(params, x, gt_t, gt_r, weights)
    variant = config.loss_variant

    def value(flat):
        out = forward_batch(RegressorParams(config, flat), x)
        return float(batch_loss(variant, out, gt_t, gt_r, weights)["total"].mean())

    return grad_check(lambda flat: (value(flat), analytic), params.flat, eps=eps, floor=floor)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              weight_decay: float = 0.0, t: Optional[int] = None) -> tuple[np.ndarray, AdamState]:
    """One Adam update with decoupled weight decay.  Returns new arrays."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeMismatch("params, grads and optimizer state must share a shape")
    t = state.t + 1 if t is None else int(t)
    m = BETA1 * state.m + (1.0 - BETA1) * grads
    v = BETA2 * state.v + (1.0 - BETA2) * grads * grads
    m_hat = m / (1.0 - BETA1 ** t)
    v_hat = v / (1.0 - BETA2 ** t)
    new = params - lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS)) - lr * weight_decay * params
    return new, AdamState(m, v, t)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class PairDataset:
    """Encoded network inputs with ground truth and identity labels."""

    x: np.ndarray  # (N, 8, R, R) float32
    gt: list[RigidTransform]
    identities: list[str]

    def __len__(self) -> int:
        return len(self.gt)

    @classmethod
    def from_pairs(cls, pairs, config: RegressorConfig) -> "PairDataset":
        pairs = list(pairs)
        if not pairs:
            raise EmptyDataset("no pairs")
        R = config.input_resolution
        x = np.empty((len(pairs), IN_CHANNELS, R, R), dtype=np.float32)
        for i, p in enumerate(pairs):
            x[i] = encode_pair(p.source, p.target, config)
        return cls(x, [p.gt for p in pairs], [p.identity for p in pairs])

    def subset(self, idx) -> "PairDataset":
        idx = list(idx)
        return PairDataset(self.x[idx], [self.gt[i] for i in idx], [self.identities[i] for i in idx])


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_rot_err: float
    val_trans_err: float
    lr: float
    wall_time: float


@dataclass
class TrainReport:
    loss_variant: str
    seed: int
    epochs: list[EpochStats] = field(default_factory=list)

    def to_csv(self) -> str:
        """Per-epoch metrics.  Wall time is omitted so that reruns produce
        identical files; it stays available on :class:`EpochStats`."""
        lines = ["epoch,loss_variant,seed,train_loss,val_rot_err_deg,val_trans_err_mm,lr"]
        for e in self.epochs:
            lines.append(f"{e.epoch},{self.loss_variant},{self.seed},{e.train_loss!r},{e.val_rot_err!r},"
                         f"{e.val_trans_err!r},{e.lr!r}")
        return "\n".join(lines) + "\n"

    @property
    def final(self) -> EpochStats:
        return self.epochs[-1]


def split_by_identity(identities: Sequence[str], seed: int, val_fraction: float = 0.1) -> tuple[list[int], list[int]]:
    """Train/validation indices with no identity on both sides."""
    labels = sorted(set(identities))
    if len(labels) < 2:
        raise EmptyDataset("need at least two identities to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    n_val = max(1, int(round(val_fraction * len(labels))))
    val_ids = {labels[i] for i in order[:n_val]}
    train = [i for i, s in enumerate(identities) if s not in val_ids]
    val = [i for i, s in enumerate(identities) if s in val_ids]
    return train, val


def predict_batch(params: RegressorParams, x: np.ndarray, chunk: int = 256) -> list[RigidTransform]:
    outs = []
    for i in range(0, len(x), chunk):
        outs.append(forward_batch(params, x[i:i + chunk]))
    out = np.concatenate(outs) if outs else np.zeros((0, 7))
    variant = params.config.loss_variant
    return [prediction_to_transform(variant, o) for o in out]


def evaluate_dataset(params: RegressorParams, data: PairDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair (rotation error deg, translation error mm)."""
    preds = predict_batch(params, data.x)
    qg = np.array([g.q.array for g in data.gt])
    qp = np.array([p.q.array for p in preds])
    rot = rotation_error_array(qg, qp)
    trans = np.linalg.norm(np.array([g.t for g in data.gt]) - np.array([p.t for p in preds]), axis=1)
    return rot, trans


def _swap_input(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x[:, 4:], x[:, :4]], axis=1)


def train(config: RegressorConfig, dataset: PairDataset, weights: LossWeights = LossWeights(),
          init: Optional[RegressorParams] = None, log=None,
          epoch_offset: int = 0) -> tuple[RegressorParams, TrainReport]:
    """Mini-batch Adam training with a 90/10 identity-disjoint split.

    ``init`` continues from existing parameters (optimizer moments restart);
    ``epoch_offset`` only shifts the epoch numbers in the report.
    """
    if len(dataset) == 0:
        raise EmptyDataset("no training pairs")
    train_idx, val_idx = split_by_identity(dataset.identities, config.seed)
    if not train_idx:
        raise EmptyDataset("validation split consumed every pair")
    val = dataset.subset(val_idx)

    x_tr = dataset.x[train_idx]
    gt_tr = [dataset.gt[i] for i in train_idx]
    if config.swap_augment:
        # both maps share one grid, so swapping channel groups is an exact
        # sample of the inverse registration problem
        x_tr = np.concatenate([x_tr, _swap_input(x_tr)])
        gt_tr = gt_tr + [g.inverse() for g in gt_tr]
    gt_t = np.array([g.t for g in gt_tr])
    gt_r = np.array([gt_rotation_target(g, config.loss_variant) for g in gt_tr])

    params = RegressorParams.init(config) if init is None else init.copy()
    state = AdamState.zeros(len(params))
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
    n = len(gt_tr)
    steps_per_epoch = int(np.ceil(n / config.batch_size))
    total_steps = steps_per_epoch * config.epochs
    report = TrainReport(config.loss_variant, config.seed)
    start = time.perf_counter()
    step = 0
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        losses = []
        lr = config.lr
        for b in range(steps_per_epoch):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            if config.lr_schedule == "cosine":
                lr = 0.5 * config.lr * (1.0 + np.cos(np.pi * step / total_steps))
            loss, g, _ = loss_and_grad(params, x_tr[idx], gt_t[idx], gt_r[idx], weights)
            new, state = adam_step(params.flat, g, state, lr, config.weight_decay)
            params = RegressorParams(config, new)
            losses.append(loss)
            step += 1
        rot, trans = evaluate_dataset(params, val) if len(val) else (np.array([np.nan]), np.array([np.nan]))
        stats = EpochStats(epoch + epoch_offset, float(np.mean(losses)), float(np.mean(rot)), float(np.mean(trans)), float(lr),
                           time.perf_counter() - start)
        report.epochs.append(stats)
        if log is not None:
            log(stats)
    return params, report


def register(params: RegressorParams, source: PointCloud, target: PointCloud) -> RigidTransform:
    x = encode_pair(source, target, params.config)[None]
    return predict_batch(params, x)[0]


def register_twice(params: RegressorParams, source: PointCloud, target: PointCloud) -> RigidTransform:
    """Predict, move the source, predict the residual, return ``T2 ∘ T1``."""
    T1 = register(params, source, target)
    moved = source.with_points(T1.apply(source.points))
    T2 = register(params, moved, target)
    return T2 @ T1


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SPARSEREG-CKPT\n"


def save_checkpoint(path, params: RegressorParams, epoch: int, extra: Optional[dict] = None) -> None:
    """JSON header line, then the flat parameters as little-endian float64."""
    header = {"config": params.config.to_dict(), "seed": params.config.seed, "epoch": int(epoch),
              "n_params": len(params)}
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode() + b"\n"
    atomic_write(path, CHECKPOINT_MAGIC + blob + params.flat.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[RegressorParams, dict]:
    p = Path(path)
    if not p.is_file():
        raise MissingCheckpoint(f"checkpoint not found: {p}")
    raw = p.read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CorruptDataset(f"{p} is not a checkpoint")
    rest = raw[len(CHECKPOINT_MAGIC):]
    try:
        nl = rest.index(b"\n")
        header = json.loads(rest[:nl])
        body = rest[nl + 1:]
        if len(body) % 8:
            raise ValueError("partial float")
        flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
        if flat.size != header["n_params"]:
            raise ValueError("parameter count mismatch")
        config = RegressorConfig.from_dict(header["config"])
        return RegressorParams(config, flat), header
    except (ValueError, KeyError, TypeError, ShapeMismatch) as exc:
        raise CorruptDataset(f"{p}: damaged checkpoint ({exc})") from None


def check_resume(saved: RegressorConfig, requested: RegressorConfig) -> None:
    """Resuming is allowed only when everything but the epoch count matches."""
    a = replace(saved, epochs=0).to_dict()
    b = replace(requested, epochs=0).to_dict()
    diff = sorted(k for k in a if a[k] != b[k])
    if diff:
        raise ConfigMismatch(f"checkpoint config differs in: {', '.join(diff)}")
