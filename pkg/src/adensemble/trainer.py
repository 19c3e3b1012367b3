"""Mini-batch training with Adam and reduce-on-plateau learning rate."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import architectures as A
from . import tensor as T
from .archive import WeightArchive
from .errors import CheckpointError, ConfigError, TrainingError

log = logging.getLogger(__name__)

LR_FLOOR = 1e-10


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    epochs: int = 50
    batch_size: int = 32
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    shuffle_seed: int = 42

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ConfigError("learning_rate and epsilon must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor must be in (0, 1)")


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
    """One bias-corrected Adam update over every key in ``grads``.

    Returns new ``(params, state)``; inputs are not modified.
    """
    if lr <= 0:
        raise TrainingError(f"learning rate must be positive, got {lr}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {k!r}")
        if np.shape(g) != np.shape(params[k]):
            raise TrainingError(f"gradient shape {np.shape(g)} != parameter shape "
                                f"{np.shape(params[k])} for {k!r}")
    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = dict(params), dict(state.m), dict(state.v)
    for k, g in grads.items():
        p = params[k]
        m = beta1 * state.m.get(k, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(k, np.zeros_like(p)) + (1 - beta2) * np.square(g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[k] = (p - step).astype(p.dtype)
        new_m[k] = m.astype(p.dtype)
        new_v[k] = v.astype(p.dtype)
    return new_p, AdamState(new_m, new_v, t)


# --------------------------------------------------------------------------
# plateau schedule


@dataclass
class Plateau:
    """Reduce-on-plateau bookkeeping: a strict decrease counts as improvement."""

    patience: int = 3
    factor: float = 0.1
    best: float = math.inf
    wait: int = 0
    reductions: int = 0

    def update(self, loss: float) -> bool:
        """Record one epoch's loss; True when the rate should drop now."""
        if loss < self.best:
            self.best = loss
            self.wait = 0
            return False
        self.wait += 1
        if self.wait >= self.patience:
            self.wait = 0
            self.reductions += 1
            return True
        return False

    def lr(self, initial: float) -> float:
        return max(LR_FLOOR, initial * self.factor ** self.reductions)


def plateau_lr(val_losses, current_lr: float, patience: int = 3, factor: float = 0.1) -> float:
    """Learning rate to use after the last epoch in ``val_losses``."""
    sched = Plateau(patience, factor)
    reduce = False
    for loss in val_losses:
        reduce = sched.update(loss)
    return max(LR_FLOOR, current_lr * factor) if reduce else current_lr


# --------------------------------------------------------------------------
# history


HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr")


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row):
        self.rows.append({k: row[k] for k in HISTORY_FIELDS})

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()


@dataclass
class TrainState:
    """Everything needed to resume ``fit`` exactly where it stopped."""

    adam: AdamState
    plateau: Plateau
    epoch: int = 0
    history: History = field(default_factory=History)

    @classmethod
    def fresh(cls, g: A.ModelGraph, cfg: TrainConfig) -> "TrainState":
        trainable = {k: g.params[k] for k in g.trainable_names()}
        return cls(AdamState.zeros_like(trainable), Plateau(cfg.plateau_patience, cfg.plateau_factor))


# --------------------------------------------------------------------------
# training loop


def _batches(n: int, batch_size: int, order: np.ndarray, has_batchnorm: bool):
    starts = list(range(0, n, batch_size))
    bounds = [(s, min(n, s + batch_size)) for s in starts]
    # a lone trailing sample cannot be batch-normalized; fold it into the previous batch
    if has_batchnorm and len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
        bounds[-2] = (bounds[-2][0], n)
        bounds.pop()
    for s, e in bounds:
        yield order[s:e]


def evaluate_loss(g: A.ModelGraph, X, Y, batch_size: int = 32):
    """Infer-mode ``(mean loss, accuracy)``."""
    if len(X) == 0:
        return float("nan"), float("nan")
    probs = A.predict(g, X, batch_size)
    loss, _ = T.cross_entropy(probs, Y)
    acc = float(np.mean(probs.argmax(1) == np.asarray(Y).argmax(1)))
    return loss, acc


def fit(g: A.ModelGraph, train, val, cfg: TrainConfig = TrainConfig(),
        state: TrainState | None = None, on_epoch_end=None):
    """Train ``g`` in place for ``cfg.epochs`` epochs (resuming from ``state``).

    ``train`` and ``val`` are ``(X, Y)`` pairs with one-hot ``Y``. Batches are
    reshuffled every epoch from ``(shuffle_seed, epoch)`` so a resumed run
    sees the same order as an uninterrupted one. ``on_epoch_end(g, state)``
    is called after each epoch, e.g. to write a checkpoint.

    Returns ``(g, history)``; the live :class:`TrainState` is ``state`` if one
    was passed in.
    """
    Xtr, Ytr = train
    Xva, Yva = val
    if len(Xtr) == 0:
        raise TrainingError("training set is empty")
    if tuple(np.shape(Xtr)[1:]) != tuple(g.input_shape):
        raise TrainingError(f"training images {np.shape(Xtr)[1:]} do not match "
                            f"graph input {g.input_shape}")
    state = state if state is not None else TrainState.fresh(g, cfg)
    has_bn = any(l.kind == "batchnorm" for l in g.layers)
    trainable = g.trainable_names()
    n = len(Xtr)

    while state.epoch < cfg.epochs:
        epoch = state.epoch + 1
        lr = state.plateau.lr(cfg.learning_rate)
        order = np.random.Generator(np.random.PCG64([cfg.shuffle_seed, epoch])).permutation(n)
        loss_sum, correct = 0.0, 0
        for b, idx in enumerate(_batches(n, cfg.batch_size, order, has_bn)):
            xb, yb = Xtr[idx], Ytr[idx]
            probs, caches = A.forward(g, xb, "train")
            loss, dscores = T.cross_entropy(probs, yb)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = A.backward(g, caches, dscores)
            params = {k: g.params[k] for k in trainable}
            try:
                params, state.adam = adam_step(params, grads, state.adam, lr,
                                               cfg.beta1, cfg.beta2, cfg.epsilon)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
            g.params.update(params)
            loss_sum += loss * len(idx)
            correct += int(np.sum(probs.argmax(1) == yb.argmax(1)))

        val_loss, val_acc = evaluate_loss(g, Xva, Yva, cfg.batch_size)
        state.history.append(epoch=epoch, train_loss=loss_sum / n, train_acc=correct / n,
                             val_loss=val_loss, val_acc=val_acc, lr=lr)
        monitored = val_loss if math.isfinite(val_loss) else loss_sum / n
        if state.plateau.update(monitored):
            log.info("epoch %d: no improvement for %d epochs, lr -> %g", epoch,
                     cfg.plateau_patience, state.plateau.lr(cfg.learning_rate))
        state.epoch = epoch
        log.info("epoch %d/%d loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
                 epoch, cfg.epochs, loss_sum / n, correct / n, val_loss, val_acc)
        if on_epoch_end is not None:
            on_epoch_end(g, state)
    return g, state.history


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(g: A.ModelGraph, state: TrainState | None, path, config: TrainConfig | None = None):
    arc = WeightArchive()
    for k, v in g.params.items():
        arc.add(f"param/{k}", v)
    meta = {"model": g.name, "recipe": g.recipe, "input_shape": list(g.input_shape)}
    if state is not None:
        for k in state.adam.m:
            arc.add(f"adam_m/{k}", state.adam.m[k])
            arc.add(f"adam_v/{k}", state.adam.v[k])
        meta["train_state"] = {"epoch": state.epoch, "adam_t": state.adam.t,
                               "plateau": asdict(state.plateau), "history": state.history.rows}
    if config is not None:
        meta["train_config"] = asdict(config)
    arc.meta = meta
    arc.save(path)


def load_checkpoint(path, g: A.ModelGraph | None = None):
    """Returns ``(graph, state_or_None)``.

    Without ``g`` the graph is rebuilt from the stored recipe; with ``g`` the
    stored tensors must match its parameter shapes exactly. Nothing is
    mutated unless the whole file validates.
    """
    arc = WeightArchive.load(path)
    meta = arc.meta
    if g is None:
        if not meta.get("recipe"):
            raise CheckpointError(f"{path}: checkpoint carries no graph recipe")
        try:
            g = A.build_from_recipe(meta["recipe"])
        except ConfigError as exc:
            raise CheckpointError(f"{path}: {exc}") from None
    params = {}
    for k, v in g.params.items():
        key = f"param/{k}"
        if key not in arc:
            raise CheckpointError(f"{path}: missing tensor {k!r} for {g.name}")
        if arc[key].shape != v.shape:
            raise CheckpointError(f"{path}: tensor {k!r} has shape {arc[key].shape}, "
                                  f"graph expects {v.shape}")
        params[k] = np.array(arc[key])
    extra = [k for k in arc if k.startswith("param/") and k[6:] not in g.params]
    if extra:
        raise CheckpointError(f"{path}: tensors not in {g.name}: {extra[:3]}")

    state = None
    ts = meta.get("train_state")
    if ts is not None:
        m = {k[7:]: np.array(arc[k]) for k in arc if k.startswith("adam_m/")}
        v = {k[7:]: np.array(arc[k]) for k in arc if k.startswith("adam_v/")}
        state = TrainState(AdamState(m, v, int(ts["adam_t"])), Plateau(**ts["plateau"]),
                           int(ts["epoch"]), History(list(ts["history"])))
    out = g.copy()
    out.params = params
    return out, state


def checkpoint_io(g, state, path, direction: str):
    if direction == "save":
        save_checkpoint(g, state, path)
        return None
    if direction == "load":
        return load_checkpoint(path, g)
    raise ValueError(f"direction must be 'save' or 'load', got {direction!r}")
