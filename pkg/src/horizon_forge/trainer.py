"""Adam training with early stopping, patch extraction, and tiled inference."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import architectures as arch
from .architectures import ARCH_IDS, ModelSpec, Weights, build_model, save_weights
from .objectives import LossConfig, binarize, composite_loss, dice_loss
from .tensor import Graph, Tensor
from .volume_io import Volume, take_line

log = logging.getLogger(__name__)

PATCH = 128


class NumericalError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class TrainConfig:
    arch_id: str
    learning_rate: float
    batch_size: int
    max_epochs: int = 500
    patience: int = 30
    l2_factor: float = 0.0
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    base_channels: int | None = None  # None -> architecture default width

    def __post_init__(self):
        if self.arch_id not in ARCH_IDS:
            raise ValueError(f"unknown arch_id {self.arch_id!r}; valid: {', '.join(ARCH_IDS)}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError(f"invalid training configuration {self}")

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.arch_id, base_channels=self.base_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        loss = d.pop("loss")
        d.update({f"loss_{k}": v for k, v in loss.items()})
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, str]) -> "TrainConfig":
        loss_kw, kw = {}, {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in d.items():
            if k.startswith("loss_"):
                loss_kw[k[5:]] = float(v)
            elif k in types:
                kw[k] = v
        conv = {"learning_rate": float, "batch_size": int, "max_epochs": int, "patience": int,
                "l2_factor": float, "seed": int}
        for k, f in conv.items():
            if k in kw:
                kw[k] = f(kw[k])
        if "base_channels" in kw:
            kw["base_channels"] = None if kw["base_channels"] in (None, "None", "") else int(kw["base_channels"])
        return cls(loss=LossConfig(**loss_kw), **kw)


_TUNED = {
    "unet": (1e-4, 1),
    "unetpp": (5e-3, 1),
    "unet_compressed": (5e-4, 5),
    "attn_unet": (5e-4, 1),
    # the CFA variants inherit the Attention U-Net pair
    "cfa_s_unet": (5e-4, 1),
    "cfa_unet": (5e-4, 1),
}


def default_config(arch_id: str, **overrides) -> TrainConfig:
    if arch_id not in _TUNED:
        raise ValueError(f"unknown arch_id {arch_id!r}; valid: {', '.join(ARCH_IDS)}")
    lr, bs = _TUNED[arch_id]
    l2 = 1e-4 if arch_id == "unet_compressed" else 0.0
    return replace(TrainConfig(arch_id, lr, bs, l2_factor=l2), **overrides)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(weights: Weights, grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update of every learnable tensor, in place."""
    learn = weights.learnable()
    missing = [k for k in learn if k not in grads]
    if missing:
        raise RuntimeError(f"no gradient for learnable parameter(s): {', '.join(missing[:5])}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in learn.items():
        g = np.asarray(grads[k], dtype=p.dtype)
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------- history / early stopping

METRIC_FIELDS = ("train_loss", "valid_loss", "train_iou", "valid_iou", "train_acc", "valid_acc",
                 "train_dice", "valid_dice")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    train_iou: float
    valid_iou: float
    train_acc: float
    valid_acc: float
    train_dice: float = float("nan")
    valid_dice: float = float("nan")


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def best(self) -> EpochRecord:
        return next(r for r in self.records if r.epoch == self.best_epoch)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("epoch",) + METRIC_FIELDS)
            for r in self.records:
                w.writerow([r.epoch] + [format(getattr(r, f), ".9g") for f in METRIC_FIELDS])

    @classmethod
    def from_csv(cls, path: str | Path) -> "History":
        h = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.records.append(EpochRecord(int(row["epoch"]), *(float(row.get(f, "nan")) for f in METRIC_FIELDS)))
        if h.records:
            h.best_epoch = min(h.records, key=lambda r: r.valid_loss).epoch
        return h


class EarlyStopping:
    """Stops once the monitored loss has not improved for ``patience`` consecutive epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = -1
        self.wait = 0

    def update(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if value < self.best:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


# ---------------------------------------------------------------- patches

def standardize(section: np.ndarray) -> np.ndarray:
    s = np.asarray(section, dtype=np.float64)
    std = s.std()
    return ((s - s.mean()) / (std if std > 0 else 1.0)).astype(np.float32)


def pad_to(a: np.ndarray, size: int = PATCH) -> np.ndarray:
    ph, pw = max(0, size - a.shape[0]), max(0, size - a.shape[1])
    if ph or pw:
        a = np.pad(a, ((0, ph), (0, pw)), mode="reflect")
    return a


def tile_starts(n: int, size: int = PATCH) -> list[int]:
    """Window starts covering ``n`` pixels with 50% overlap; the last window is flush with the end."""
    if n <= size:
        return [0]
    starts = list(range(0, n - size + 1, size // 2))
    if starts[-1] != n - size:
        starts.append(n - size)
    return starts


def slice_patches(image: np.ndarray, label: np.ndarray, rng: np.random.Generator | None = None,
                  balance: bool = True) -> list[tuple[np.ndarray, np.ndarray]]:
    """128x128 tiles of one standardized section.

    With ``balance`` only tiles touching the horizon are kept, plus as many
    randomly drawn horizon-free tiles.
    """
    img, lab = pad_to(standardize(image)), pad_to(np.asarray(label, dtype=np.float32))
    pos, neg = [], []
    for i in tile_starts(img.shape[0]):
        for j in tile_starts(img.shape[1]):
            pair = (img[i:i + PATCH, j:j + PATCH], lab[i:i + PATCH, j:j + PATCH])
            (pos if pair[1].any() else neg).append(pair)
    if not balance:
        return pos + neg
    if neg and rng is not None:
        pick = rng.permutation(len(neg))[:len(pos)]
        neg = [neg[k] for k in sorted(pick)]
    else:
        neg = neg[:len(pos)]
    return pos + neg


def build_patches(pairs: Iterable[tuple[np.ndarray, np.ndarray]], rng: np.random.Generator | None = None,
                  balance: bool = True) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for image, label in pairs:
        out.extend(slice_patches(image, label, rng, balance))
    return out


def _stack(patches: Sequence[tuple[np.ndarray, np.ndarray]], idx) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([patches[k][0] for k in idx])[:, None].astype(np.float32)
    y = np.stack([patches[k][1] for k in idx])[:, None].astype(np.float32)
    return x, y


# ---------------------------------------------------------------- training

def _l2_grads(weights: Weights, factor: float) -> dict[str, np.ndarray]:
    return {k: 2.0 * factor * t.data for k, t in weights.conv_kernels().items()}


def train_step(weights: Weights, state: AdamState, x: np.ndarray, y: np.ndarray, config: TrainConfig,
               rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """Forward, backward, and one Adam update; returns (loss, train-mode prediction)."""
    learn = weights.learnable()
    for t in learn.values():
        t.grad = None
    with Graph() as graph:
        pred = arch.forward(weights, x, train=True, rng=rng)
        loss = composite_loss(pred, y, config.loss)
    value = loss.item()
    if not np.isfinite(value):
        return value, pred.data
    graph.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in learn.items()}
    if config.l2_factor > 0:
        for k, g in _l2_grads(weights, config.l2_factor).items():
            grads[k] = grads[k] + g
        value += config.l2_factor * sum(float((t.data.astype(np.float64) ** 2).sum())
                                        for t in weights.conv_kernels().values())
    adam_step(weights, grads, state, config.learning_rate)
    for t in learn.values():
        t.grad = None
    return value, pred.data


class _Pooled:
    def __init__(self):
        self.tp = self.fp = self.fn = self.tn = 0
        self.loss = self.dice = 0.0
        self.n = 0

    def add(self, pred: np.ndarray, y: np.ndarray, loss: float, dice: float) -> None:
        p, t = binarize(pred), y.astype(bool)
        self.tp += int(np.count_nonzero(p & t))
        self.fp += int(np.count_nonzero(p & ~t))
        self.fn += int(np.count_nonzero(~p & t))
        self.tn += int(np.count_nonzero(~p & ~t))
        k = len(pred)
        self.loss += loss * k
        self.dice += dice * k
        self.n += k

    def summary(self) -> tuple[float, float, float, float]:
        union = self.tp + self.fp + self.fn
        iou = 1.0 if union == 0 else self.tp / union
        acc = (self.tp + self.tn) / max(self.tp + self.fp + self.fn + self.tn, 1)
        return self.loss / self.n, iou, acc, self.dice / self.n


def evaluate_patches(weights: Weights, patches: Sequence[tuple[np.ndarray, np.ndarray]], config: TrainConfig,
                     batch: int = 8) -> tuple[float, float, float, float]:
    """Eval-mode (loss, IoU, accuracy, dice loss) pooled over ``patches``."""
    acc = _Pooled()
    for s in range(0, len(patches), batch):
        x, y = _stack(patches, range(s, min(s + batch, len(patches))))
        pred = arch.forward(weights, x).data
        acc.add(pred, y, composite_loss(pred, y, config.loss).item(), dice_loss(pred, y, config.loss.dice_eps).item())
    return acc.summary()


def train(config: TrainConfig, train_patches: Sequence[tuple[np.ndarray, np.ndarray]],
          valid_patches: Sequence[tuple[np.ndarray, np.ndarray]], run_dir: str | Path | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None,
          extra: Mapping[str, object] | None = None) -> tuple[Weights, History]:
    """Train from scratch; returns the weights of the best validation epoch and the history.

    When ``run_dir`` is given it receives config.snapshot, history.csv,
    weights.best and weights.final; ``extra`` adds keys to the snapshot.
    """
    if not train_patches or not valid_patches:
        raise ValueError("training needs at least one train and one validation patch")
    rng = np.random.default_rng(config.seed)
    weights = build_model(config.model_spec(), config.seed)
    state = AdamState()
    history = History()
    stopper = EarlyStopping(config.patience)
    best = weights.copy()
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_patches))
        pooled = _Pooled()
        for b, s in enumerate(range(0, len(order), config.batch_size)):
            x, y = _stack(train_patches, order[s:s + config.batch_size])
            loss, pred = train_step(weights, state, x, y, config, rng)
            if not np.isfinite(loss):
                raise NumericalError(epoch, b, loss)
            pooled.add(pred, y, loss, dice_loss(pred, y, config.loss.dice_eps).item())
        tr = pooled.summary()
        va = evaluate_patches(weights, valid_patches, config)
        if not np.isfinite(va[0]):
            raise NumericalError(epoch, -1, va[0])
        rec = EpochRecord(epoch, tr[0], va[0], tr[1], va[1], tr[2], va[2], tr[3], va[3])
        history.records.append(rec)
        improved, stop = stopper.update(epoch, va[0])
        if improved:
            best = weights.copy()
            history.best_epoch = epoch
        log.info("epoch %d train_loss %.4f valid_loss %.4f valid_iou %.4f%s", epoch, rec.train_loss,
                 rec.valid_loss, rec.valid_iou, " *" if improved else "")
        if on_epoch is not None:
            on_epoch(rec)
        if stop:
            history.stopped_early = True
            break
    if run_dir is not None:
        write_run(run_dir, config, best, weights, history, extra)
    return best, history


def write_run(run_dir: str | Path, config: TrainConfig, best: Weights, final: Weights, history: History,
              extra: Mapping[str, object] | None = None) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snap = {**config.to_dict(), **(extra or {})}
    (run_dir / "config.snapshot").write_text("".join(f"{k}={v}\n" for k, v in snap.items()))
    history.to_csv(run_dir / "history.csv")
    save_weights(best, run_dir / "weights.best")
    save_weights(final, run_dir / "weights.final")


def fit_steps(weights: Weights, patch: np.ndarray, label: np.ndarray, config: TrainConfig,
              steps: int, stop_below: float | None = None) -> list[float]:
    """Repeated Adam steps on one fixed batch; returns the composite-loss trace.

    The trace holds the data term of each step's train-mode forward pass; an
    L2 penalty, when configured, still shapes the updates but is not counted.
    With ``stop_below`` the loop ends at the first step whose loss is under it.
    """
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    x = np.asarray(patch, dtype=np.float32).reshape(-1, 1, PATCH, PATCH)
    y = np.asarray(label, dtype=np.float32).reshape(-1, 1, PATCH, PATCH)
    trace = []
    for step in range(steps):
        objective, pred = train_step(weights, state, x, y, config, rng)
        if not np.isfinite(objective):
            raise NumericalError(0, step, objective)
        loss = composite_loss(pred, y, config.loss).item()
        trace.append(loss)
        if stop_below is not None and loss < stop_below:
            break
    return trace


# ---------------------------------------------------------------- inference

def predict_slice(weights: Weights, slice_image: np.ndarray, batch: int = 8) -> np.ndarray:
    """Probability map of one section by 50%-overlap tiling and per-pixel mean stitching."""
    h, w = slice_image.shape
    img = pad_to(np.asarray(slice_image, dtype=np.float32))
    H, W = img.shape
    windows = [(i, j) for i in tile_starts(H) for j in tile_starts(W)]
    acc = np.zeros((H, W), dtype=np.float64)
    cnt = np.zeros((H, W), dtype=np.float64)
    for s in range(0, len(windows), batch):
        chunk = windows[s:s + batch]
        x = np.stack([img[i:i + PATCH, j:j + PATCH] for i, j in chunk])[:, None]
        prob = arch.forward(weights, x.astype(weights.dtype)).data[:, 0]
        for (i, j), p in zip(chunk, prob):
            acc[i:i + PATCH, j:j + PATCH] += p
            cnt[i:i + PATCH, j:j + PATCH] += 1.0
    return (acc / cnt)[:h, :w].astype(np.float32)


def predict_volume(weights: Weights, volume: Volume | np.ndarray, direction: str) -> np.ndarray:
    """Probability volume from per-section predictions along ``direction``."""
    if direction not in ("inline", "crossline"):
        raise ValueError(f"unknown direction {direction!r}")
    amps = volume.amplitudes if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float32)
    out = np.zeros(amps.shape, dtype=np.float32)
    n = amps.shape[0] if direction == "inline" else amps.shape[1]
    for i in range(n):
        prob = predict_slice(weights, standardize(take_line(amps, direction, i)))
        if direction == "inline":
            out[i] = prob
        else:
            out[:, i] = prob
    return out
