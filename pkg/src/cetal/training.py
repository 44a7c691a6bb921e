"""Target assignment, losses, AdamW, schedule, checkpoints and the training loop."""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import DataError
from .model import ActionLocalizer, InferenceConfig, predict
from .tensor import (
    ConfigurationError,
    Tensor,
    concat,
    minimum,
    power,
    sigmoid,
    softplus,
    transpose,
)

CHECKPOINT_MAGIC = b"CETAL001"


class NumericError(RuntimeError):
    """Training produced a non-finite value."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    epochs: int = 300
    warmup_epochs: int = 5
    batch_size: int = 4
    seed: int = 0
    clip_grad_norm: float = 1.0
    dtype: str = "float32"
    eval_every: int = 10
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    reg_weight: float = 1.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError(f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs} and {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def from_dict(cls, d):
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def lr_schedule(epoch, cfg):
    """Learning rate used during ``epoch`` (0-based).

    Linear warm-up reaching ``lr`` at the end of the warm-up epochs, then a
    cosine decay to zero at ``cfg.epochs``.
    """
    if epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------


@dataclass
class Targets:
    cls: np.ndarray  # [C, P] one-hot
    reg: np.ndarray  # [2, P] offsets in level timesteps
    pos: np.ndarray  # [P] bool

    @property
    def num_pos(self):
        return int(self.pos.sum())


def point_grid(level_lengths, level_strides, regression_ranges):
    """Per point: centre (input samples), stride, range low, range high."""
    cols = []
    for n, s, (lo, hi) in zip(level_lengths, level_strides, regression_ranges):
        t = np.arange(n, dtype=np.float64) * s
        cols.append(np.stack([t, np.full(n, s, float), np.full(n, lo), np.full(n, hi)], axis=1))
    return np.concatenate(cols, axis=0)


def assign_targets(segments, sampling_rate_hz, level_lengths, level_strides, regression_ranges, num_classes):
    """Dense targets for one sequence.

    A point is positive when its centre lies strictly inside a GT segment and
    its larger boundary distance falls in the level's regression range. When
    several GTs qualify the shortest one wins.
    """
    pts = point_grid(level_lengths, level_strides, regression_ranges)
    P = pts.shape[0]
    cls_t = np.zeros((num_classes, P))
    reg_t = np.zeros((2, P))
    if not segments:
        return Targets(cls_t, reg_t, np.zeros(P, dtype=bool))
    gs = np.array([s.start * sampling_rate_hz for s in segments])
    ge = np.array([s.end * sampling_rate_hz for s in segments])
    gl = np.array([s.label for s in segments], dtype=np.int64)
    left = pts[:, 0:1] - gs[None, :]
    right = ge[None, :] - pts[:, 0:1]
    inside = np.minimum(left, right) > 0
    far = np.maximum(left, right)
    in_range = (far >= pts[:, 2:3]) & (far <= pts[:, 3:4])
    lengths = np.where(inside & in_range, (ge - gs)[None, :], np.inf)
    # ties: earliest start wins
    order = np.lexsort((ge, gs))
    best = order[np.argmin(lengths[:, order], axis=1)]
    pos = np.isfinite(lengths[np.arange(P), best])
    idx = np.nonzero(pos)[0]
    cls_t[gl[best[idx]], idx] = 1.0
    reg_t[0, idx] = left[idx, best[idx]] / pts[idx, 1]
    reg_t[1, idx] = right[idx, best[idx]] / pts[idx, 1]
    return Targets(cls_t, reg_t, pos)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def focal_loss_terms(logits, targets, alpha=0.25, gamma=2.0):
    """Elementwise sigmoid focal loss."""
    p = sigmoid(logits)
    ce = softplus(logits) - logits * targets
    p_t = p * targets + (1.0 - p) * (1.0 - targets)
    alpha_t = targets * alpha + (1.0 - targets) * (1.0 - alpha)
    return ce * power(1.0 - p_t, gamma) * alpha_t


def iou_loss_terms(pred, target):
    """``1 - IoU`` for offset pairs sharing a centre; ``pred``/``target`` are [N, 2]."""
    lp, rp = pred[:, 0], pred[:, 1]
    lt, rt = target[:, 0], target[:, 1]
    inter = minimum(lp, lt) + minimum(rp, rt)
    union = lp + rp + (lt + rt) - inter
    return 1.0 - inter / union


def loss(dense, targets, alpha=0.25, gamma=2.0, reg_weight=1.0):
    """Focal classification over every point plus IoU regression on positives.

    Both terms are normalised by ``max(#positives, 1)``. ``targets`` is a list
    of :class:`Targets`, one per batch item. Returns ``(total, cls, reg)``.
    """
    logits = concat(dense.class_logits, axis=-1)  # [B,C,P]
    offsets = concat(dense.offsets, axis=-1)  # [B,2,P]
    dtype = logits.dtype
    cls_t = Tensor(np.stack([t.cls for t in targets]).astype(dtype))
    pos = np.stack([t.pos for t in targets])
    num_pos = int(pos.sum())
    norm = 1.0 / max(num_pos, 1)
    cls_loss = focal_loss_terms(logits, cls_t, alpha, gamma).sum() * norm
    if num_pos == 0:
        return cls_loss, cls_loss, None
    pos_idx = np.nonzero(pos)
    reg_t = np.stack([t.reg for t in targets]).transpose(0, 2, 1)[pos_idx].astype(dtype)  # [N,2]
    pred = transpose(offsets, (0, 2, 1))[pos_idx]
    reg_loss = iou_loss_terms(pred, Tensor(reg_t)).sum() * norm
    return cls_loss + reg_loss * reg_weight, cls_loss, reg_loss


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


def adamw_step(param, grad, m, v, t, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
    """One AdamW update; returns new ``(param, m, v)``.

    Decay is decoupled: ``param -= lr * wd * param`` before the adaptive step.
    """
    if t < 1:
        raise ValueError(f"step counter must start at 1, got {t}")
    param = param - lr * weight_decay * param
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


class AdamW:
    """AdamW over named parameters; vectors and scalars (biases, norms, beta) skip decay."""

    def __init__(self, named_params, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
        self.params = OrderedDict(named_params)
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = OrderedDict((k, np.zeros_like(p.data)) for k, p in self.params.items())
        self.v = OrderedDict((k, np.zeros_like(p.data)) for k, p in self.params.items())

    def step(self, lr):
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            wd = self.weight_decay if p.ndim >= 2 else 0.0
            new, self.m[name], self.v[name] = adamw_step(
                p.data, p.grad.astype(p.dtype, copy=False), self.m[name], self.v[name], self.t, lr, wd, *self.betas, self.eps
            )
            p.data = new.astype(p.dtype, copy=False)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def clip_grad_norm(params, max_norm):
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    arrays: OrderedDict  # name -> float32 array
    header: dict

    @property
    def epoch(self):
        return self.header["epoch"]

    @property
    def fingerprint(self):
        return self.header["fingerprint"]

    def params(self):
        prefix = "param/"
        return OrderedDict((k[len(prefix) :], v) for k, v in self.arrays.items() if k.startswith(prefix))


def save_checkpoint(path, model, optimizer=None, epoch=0, run_config=None, extra=None):
    """Write ``CETAL001`` + uint32 header length + JSON header + float32 arrays."""
    arrays = OrderedDict(("param/" + k, v) for k, v in model.state_dict().items())
    if optimizer is not None:
        for k in optimizer.params:
            arrays["adam_m/" + k] = optimizer.m[k]
            arrays["adam_v/" + k] = optimizer.v[k]
    header = {
        "format": "CETAL001",
        "epoch": int(epoch),
        "step": int(optimizer.t) if optimizer is not None else 0,
        "fingerprint": model.cfg.fingerprint(),
        "model": model.cfg.to_dict(),
        "config": run_config or {},
        "extra": extra or {},
        "arrays": [{"name": k, "shape": list(v.shape), "length": int(v.size)} for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (magic {blob[:8]!r})")
    try:
        (hlen,) = struct.unpack("<I", blob[8:12])
        header = json.loads(blob[12 : 12 + hlen].decode())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint header ({exc})") from exc
    pos = 12 + hlen
    arrays = OrderedDict()
    for entry in header["arrays"]:
        n = entry["length"]
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(entry["shape"]).astype(np.float32)
        pos += 4 * n
    if pos != len(blob):
        raise DataError(f"{path}: {len(blob) - pos} trailing bytes after arrays")
    return Checkpoint(arrays, header)


def model_from_checkpoint(ckpt, dtype=np.float32):
    from .backbone import ModelConfig

    cfg = ModelConfig.from_dict(ckpt.header["model"])
    model = ActionLocalizer(cfg, seed=0, dtype=dtype)
    model.load_state_dict(ckpt.params())
    return model


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ActionLocalizer
    optimizer: AdamW
    history: list
    best_map: float
    best_epoch: int
    best_state: OrderedDict
    epochs_run: int


def prepare_items(sequences, model, num_classes, clip_length_s=None, overlap=0.5):
    """Fixed-length training items with precomputed targets."""
    from .data import window

    items = []
    for seq in sequences:
        parts = window(seq, clip_length_s, overlap) if clip_length_s else [seq]
        items.extend(parts)
    if not items:
        raise ValueError("training needs a non-empty dataset")
    T = max(it.length for it in items)
    lengths = model.level_lengths(T)
    cfg = model.cfg
    feats, targets = [], []
    for it in items:
        x = it.features
        if x.shape[1] < T:
            x = np.pad(x, ((0, 0), (0, T - x.shape[1])))
        feats.append(x.astype(model.dtype))
        targets.append(
            assign_targets(it.segments, it.sampling_rate_hz, lengths, cfg.level_strides, cfg.regression_ranges, num_classes)
        )
    return np.stack(feats), targets


def _first_non_finite(dense, parts):
    for l, t in enumerate(dense.class_logits):
        if not np.all(np.isfinite(t.data)):
            return f"class_logits[level {l}]"
    for l, t in enumerate(dense.offsets):
        if not np.all(np.isfinite(t.data)):
            return f"offsets[level {l}]"
    for name, t in parts:
        if t is not None and not np.all(np.isfinite(t.data)):
            return name
    return None


def train(
    train_set,
    model_cfg,
    train_cfg,
    val_set=None,
    infer_cfg=None,
    thresholds=None,
    clip_length_s=None,
    overlap=0.5,
    resume=None,
    log=None,
    on_epoch_end=None,
):
    """Run the optimisation loop; keeps the best-by-validation-mAP weights.

    ``log`` receives one dict per event; ``on_epoch_end(epoch, model,
    optimizer, history)`` lets callers write checkpoints.
    """
    from .evaluation import evaluate

    log = log or (lambda rec: None)
    infer_cfg = infer_cfg or InferenceConfig()
    dtype = np.dtype(train_cfg.dtype)
    model = ActionLocalizer(model_cfg, seed=train_cfg.seed, dtype=dtype)
    optimizer = AdamW(model.named_parameters(), weight_decay=train_cfg.weight_decay)
    start_epoch = 0
    if resume is not None:
        if resume.fingerprint != model_cfg.fingerprint():
            raise ConfigurationError("checkpoint model config does not match the requested model config")
        model.load_state_dict(resume.params())
        for k in optimizer.params:
            optimizer.m[k] = resume.arrays["adam_m/" + k].astype(dtype)
            optimizer.v[k] = resume.arrays["adam_v/" + k].astype(dtype)
        optimizer.t = int(resume.header["step"])
        start_epoch = resume.epoch + 1

    X, targets = prepare_items(train_set, model, model_cfg.num_classes, clip_length_s, overlap)
    n = X.shape[0]
    shuffle_rng = np.random.default_rng([train_cfg.seed, 1])
    for _ in range(start_epoch):
        shuffle_rng.permutation(n)  # keep the batch order of an uninterrupted run
    history = []
    best_map, best_epoch, best_state = -1.0, -1, model.state_dict()
    params = model.parameters()

    for epoch in range(start_epoch, train_cfg.epochs):
        lr = lr_schedule(epoch, train_cfg)
        order = shuffle_rng.permutation(n)
        totals = np.zeros(3)
        batches = 0
        for b0 in range(0, n, train_cfg.batch_size):
            idx = order[b0 : b0 + train_cfg.batch_size]
            dense = model(X[idx])
            total, cls_l, reg_l = loss(
                dense, [targets[i] for i in idx], train_cfg.focal_alpha, train_cfg.focal_gamma, train_cfg.reg_weight
            )
            bad = _first_non_finite(dense, [("cls_loss", cls_l), ("reg_loss", reg_l), ("total_loss", total)])
            if bad is not None:
                raise NumericError(f"non-finite value in {bad} at epoch {epoch}, batch {b0 // train_cfg.batch_size}")
            optimizer.zero_grad()
            total.backward()
            clip_grad_norm(params, train_cfg.clip_grad_norm)
            optimizer.step(lr)
            totals += [total.item(), cls_l.item(), 0.0 if reg_l is None else reg_l.item()]
            batches += 1
        rec = {
            "event": "epoch",
            "epoch": epoch,
            "lr": lr,
            "loss": totals[0] / batches,
            "cls_loss": totals[1] / batches,
            "reg_loss": totals[2] / batches,
        }
        last = epoch == train_cfg.epochs - 1
        if val_set is not None and len(val_set) and ((epoch + 1) % train_cfg.eval_every == 0 or last):
            preds = predict(model, list(val_set), infer_cfg, clip_length_s, overlap)
            report = evaluate(preds, [s.segments for s in val_set], thresholds, model_cfg.num_classes)
            rec["val_avg_map"] = report.avg_map
            if report.avg_map > best_map:
                best_map, best_epoch, best_state = report.avg_map, epoch, model.state_dict()
        history.append(rec)
        log(rec)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, optimizer, history)

    if val_set is None or not len(val_set):
        best_state, best_epoch = model.state_dict(), train_cfg.epochs - 1
    return TrainResult(model, optimizer, history, best_map, best_epoch, best_state, train_cfg.epochs - start_epoch)
