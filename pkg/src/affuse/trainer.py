"""Adam, the plateau / release / early-stop controller, and the fit loop."""
import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from affuse import tensor as T
from affuse.data import WindowSpec, cut_window, window_starts
from affuse.metrics import ccc, ccc_loss

log = logging.getLogger(__name__)

ACTIONS = ("none", "reduce_lr", "release_group", "stop")
HISTORY_COLUMNS = ("epoch", "lr", "plateau_counter", "stagnation_counter", "train_ccc", "val_ccc", "action")


@dataclass
class TrainerConfig:
    batch_size: int = 2
    lr: float = 1e-5
    min_lr: float = 1e-6
    plateau_patience: int = 5
    lr_factor: float = 0.1
    early_stop: int = 20
    max_epochs: int = 100
    weight_decay: float = 1e-4
    seed: int = 0
    freeze_groups_initially: bool = True

    def __post_init__(self):
        if self.min_lr > self.lr:
            raise ValueError("min_lr must not exceed lr")
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError("lr_factor must be in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Adam with coupled L2 weight decay


@dataclass
class AdamState:
    m: list
    v: list
    steps: list
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params],
                   [0] * len(params), **kw)


def adam_step(params, grads, state, lr, weight_decay=0.0, trainable=None):
    """One Adam update in place. Entries with ``trainable[i]`` false, or a
    ``None`` gradient, are left untouched (moments included)."""
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None or (trainable is not None and not trainable[i]):
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        state.steps[i] += 1
        t = state.steps[i]
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / (1.0 - state.beta1 ** t)
        v_hat = state.v[i] / (1.0 - state.beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# controller


@dataclass(frozen=True)
class TrainerState:
    epoch: int = 0  # index of the next epoch to be evaluated
    plateau_counter: int = 0
    stagnation_counter: int = 0
    current_lr: float = 1e-5
    released_group_count: int = 0
    num_groups: int = 0
    best_val_ccc: float = -math.inf
    best_epoch: int = -1


def _above(lr, floor):
    # 1e-5 * 0.1 lands a rounding step above 1e-6; treat that as the floor
    return lr > floor * (1.0 + 1e-9)


def controller_update(state, val_ccc, config):
    """Advance the controller by one evaluated epoch.

    Returns ``(new_state, action)``. An improvement resets both counters. The
    plateau counter multiplies the LR by ``lr_factor`` while it is above
    ``min_lr`` (never going below it), then releases one group per trigger,
    then stops. The stagnation counter only resets on improvement and stops
    training at ``early_stop``.
    """
    epoch = state.epoch
    if val_ccc > state.best_val_ccc:
        state = replace(state, best_val_ccc=val_ccc, best_epoch=epoch, plateau_counter=0, stagnation_counter=0)
    else:
        state = replace(state, plateau_counter=state.plateau_counter + 1,
                        stagnation_counter=state.stagnation_counter + 1)
    action = "none"
    if state.stagnation_counter >= config.early_stop:
        action = "stop"
    elif state.plateau_counter >= config.plateau_patience:
        state = replace(state, plateau_counter=0)
        if _above(state.current_lr, config.min_lr):
            lr = state.current_lr * config.lr_factor
            state = replace(state, current_lr=lr if _above(lr, config.min_lr) else config.min_lr)
            action = "reduce_lr"
        elif state.released_group_count < state.num_groups:
            state = replace(state, released_group_count=state.released_group_count + 1)
            action = "release_group"
        else:
            action = "stop"
    if epoch + 1 >= config.max_epochs:
        action = "stop"
    return replace(state, epoch=epoch + 1), action


# ---------------------------------------------------------------------------
# epochs


def _batch(windows, modalities):
    feats = {m: np.stack([w.features[m] for w in windows]) for m in modalities}
    labels = np.stack([w.labels for w in windows])
    valid = np.zeros(labels.shape, dtype=bool)
    for i, w in enumerate(windows):
        valid[i, :w.valid] = True
    return feats, labels, valid


def _modalities(model):
    return model.config.modalities


def train_epoch(model, windows, adam, lr, rng, config, trainable=None):
    """One shuffled pass; returns the global CCC of the training predictions."""
    params = model.parameters()
    order = rng.permutation(len(windows))
    preds, targets = [], []
    mods = _modalities(model)
    for s in range(0, len(order), config.batch_size):
        batch = [windows[i] for i in order[s:s + config.batch_size]]
        feats, labels, valid = _batch(batch, mods)
        if valid.sum() < 2:
            continue
        for p in params:
            p.grad = None
        out = model(feats, train=True, rng=rng)
        flat_idx = np.flatnonzero(valid.ravel())
        pred = T.getitem(T.reshape(out, (out.size,)), flat_idx)
        target = labels.ravel()[flat_idx]
        loss = ccc_loss(pred, target)
        if loss.requires_grad:
            T.backward(loss)
            adam_step(params, [p.grad for p in params], adam, lr, config.weight_decay, trainable)
        preds.append(pred.data)
        targets.append(target)
    for p in params:
        p.grad = None
    if not preds:
        return float("nan")
    return ccc(np.concatenate(preds), np.concatenate(targets))


def evaluate(model, windows, batch_size=2):
    """Global CCC over the valid frames of ``windows`` in eval mode."""
    preds, targets = [], []
    mods = _modalities(model)
    with T.no_grad():
        for s in range(0, len(windows), batch_size):
            feats, labels, valid = _batch(windows[s:s + batch_size], mods)
            out = model(feats, train=False).data
            preds.append(out[valid])
            targets.append(labels[valid])
    return ccc(np.concatenate(preds), np.concatenate(targets))


@dataclass
class FitResult:
    history: list = field(default_factory=list)
    state: TrainerState = None
    best_state: list = None


def fit(model, train_windows, val_windows, config, on_epoch=None):
    """Train until the controller stops; leaves the best parameters loaded."""
    if not train_windows or not val_windows:
        raise ValueError("fit needs non-empty training and validation windows")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    groups = model.parameter_groups()
    freezable = groups[:-1]
    group_of = {}
    for gi, (_, ps) in enumerate(freezable):
        for p in ps:
            group_of[id(p)] = gi
    released = 0 if config.freeze_groups_initially else len(freezable)

    def trainable_mask(n_released):
        return [group_of.get(id(p), -1) < n_released for p in params]

    adam = AdamState.for_params(params)
    state = TrainerState(current_lr=config.lr, num_groups=len(freezable) - released,
                         released_group_count=0)
    best = model.state()
    result = FitResult()
    try:
        while True:
            mask = trainable_mask(released)
            for p, flag in zip(params, mask):
                p.requires_grad = flag
            lr = state.current_lr
            train_ccc = train_epoch(model, train_windows, adam, lr, rng, config, mask)
            val_ccc = evaluate(model, val_windows, config.batch_size)
            prev_best = state.best_val_ccc
            state, action = controller_update(state, val_ccc, config)
            if state.best_val_ccc > prev_best:
                best = model.state()
            if action == "release_group":
                released += 1
            model.load_state(best)
            row = {"epoch": state.epoch - 1, "lr": lr, "plateau_counter": state.plateau_counter,
                   "stagnation_counter": state.stagnation_counter, "train_ccc": train_ccc,
                   "val_ccc": val_ccc, "action": action}
            result.history.append(row)
            log.info("epoch %d lr=%g train=%.4f val=%.4f %s", row["epoch"], lr, train_ccc, val_ccc, action)
            if on_epoch is not None:
                on_epoch(row)
            if action == "stop":
                break
    finally:
        for p in params:
            p.requires_grad = True
    result.state = state
    result.best_state = best
    return result


def write_history(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in HISTORY_COLUMNS])


# ---------------------------------------------------------------------------
# inference


def predict_trial(model, features, spec=WindowSpec()):
    """Per-frame predictions for a whole trial.

    ``features``: modality -> (T, D). Frames covered by several windows get
    the mean of their window predictions. Values are not clipped.
    """
    mods = _modalities(model)
    lengths = {features[m].shape[0] for m in mods}
    if len(lengths) != 1:
        raise ValueError(f"modalities disagree on trial length: {sorted(lengths)}")
    t = lengths.pop()
    total = np.zeros(t)
    count = np.zeros(t)
    dummy = np.zeros(t)
    with T.no_grad():
        for s in window_starts(t, spec):
            w = cut_window("", {m: features[m] for m in mods}, dummy, s, spec.length)
            out = model({m: w.features[m] for m in mods}, train=False).data
            total[s:s + w.valid] += out[:w.valid]
            count[s:s + w.valid] += 1
    return total / count
