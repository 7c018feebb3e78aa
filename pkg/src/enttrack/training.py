"""SGD training with dropout, minibatching, early stopping, and grad checks.

Defaults follow the experimental recipe: plain stochastic gradient descent at
learning rate 0.09, minibatch size 10, dropout probability 0.5, at most 150
epochs.  No momentum, weight decay, or schedule.  Minibatch gradients are
averaged over the batch and accumulated sequentially, so a fixed seed makes a
whole run bit-reproducible; the deterministic flag additionally suppresses
wall-clock times in emitted logs (they are the one non-reproducible output).

All RNG streams are derived from the config seed by counter-based splitting,
one stream per (purpose, epoch), so runs do not depend on call order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import models
from .datagen import Datapoint, Exposure
from .models import Dims, ForwardTrace
from .numerics import central_fd_gradient


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, minibatch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} in epoch {epoch}, minibatch {minibatch}")
        self.epoch = epoch
        self.minibatch = minibatch


@dataclass
class TrainConfig:
    learning_rate: float = 0.09
    minibatch: int = 10
    dropout_p: float = 0.5
    max_epochs: int = 150
    seed: int = 0
    variant: str = "dire-1m"
    deterministic: bool = True
    patience: int = 0          # 0 disables early stopping: run all max_epochs
    m: int = 64
    hidden: int = 300
    probe: str = "retrieved"

    def check(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {self.dropout_p}")
        if self.minibatch < 1:
            raise ValueError(f"minibatch size must be >= 1, got {self.minibatch}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = -1.0
    final_val_acc: float = -1.0

    def to_csv(self, path, deterministic: bool = True):
        with open(path, "w") as f:
            f.write("epoch,train_loss,val_acc,seconds\n")
            for r in self.records:
                secs = 0.0 if deterministic else r.seconds
                f.write(f"{r.epoch},{r.train_loss:.6f},{r.val_acc:.4f},{secs:.3f}\n")


def sgd_step(params, grads: dict[str, np.ndarray], lr: float):
    """In-place p <- p - lr * g for every parameter; bumps the version."""
    for name, var in params.named():
        g = grads[name]
        if np.shape(g) != var.value.shape:
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, parameter is {var.value.shape}")
        var.value = var.value - lr * g
    params.version += 1


def apply_dropout(x, p: float, rng: np.random.Generator, training: bool = True):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Returns (dropped vector, mask); multiplying by the returned mask replays
    the exact same drop in a backward pass.  Evaluation mode is the identity.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = np.asarray(x, dtype=np.float64)
    if not training or p == 0.0:
        return x, np.ones_like(x)
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def _dropout_fn(p: float, rng: np.random.Generator):
    if p == 0.0:
        return None
    return lambda dim: (rng.random(dim) >= p) / (1.0 - p)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def _accuracy(params, datapoints) -> float:
    view = models.eval_view(params)
    correct = sum(models.predict(view, dp)[0] == dp.gold for dp in datapoints)
    return correct / len(datapoints)


def _snapshot(params) -> dict[str, np.ndarray]:
    return {name: var.value.copy() for name, var in params.named()}


def _restore(params, snap: dict[str, np.ndarray]):
    for name, var in params.named():
        var.value = snap[name].copy()
    params.version += 1


def train(variant: str, train_dps, val_dps, cfg: TrainConfig, log_hook=None):
    """Train one model; returns (best-validation parameters, TrainLog).

    Every epoch visits each training datapoint exactly once in a freshly
    shuffled order (a short final minibatch is allowed).  The best checkpoint
    is the highest validation accuracy, earliest epoch on ties; both best and
    final validation accuracies end up in the log.  Aborts on a non-finite
    loss, reporting the offending minibatch.
    """
    cfg.check()
    if not train_dps or not val_dps:
        raise ValueError("training and validation splits must be non-empty")

    first = train_dps[0]
    dims = Dims(v=first.candidates[0].shape[0], t=first.exposures[0].attribute.shape[0],
                t_c=first.query_noun.shape[0], m=cfg.m, hidden=cfg.hidden,
                n_exposures=len(first.exposures))
    params = models.init_params(variant, dims, seed=cfg.seed, probe=cfg.probe)
    log = TrainLog()
    best = _snapshot(params)

    n = len(train_dps)
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        order = _stream(cfg.seed, 1, epoch).permutation(n)
        drop_rng = _stream(cfg.seed, 2, epoch)
        dropout = _dropout_fn(cfg.dropout_p, drop_rng)
        loss_sum = 0.0
        for mb_index, start in enumerate(range(0, n, cfg.minibatch)):
            batch = order[start:start + cfg.minibatch]
            acc_grads: dict[str, np.ndarray] | None = None
            for idx in batch:
                try:
                    trace = models.forward(train_dps[idx], params, dropout)
                except FloatingPointError:
                    # overflow can trip a forward contract before the loss
                    # itself goes non-finite; either way the run is dead
                    raise TrainingDiverged(epoch, mb_index, float("nan")) from None
                if not np.isfinite(trace.loss):
                    raise TrainingDiverged(epoch, mb_index, trace.loss)
                loss_sum += trace.loss
                grads = models.backward(trace, params)
                if acc_grads is None:
                    acc_grads = grads
                else:
                    for k, g in grads.items():
                        acc_grads[k] = acc_grads[k] + g
            scale = 1.0 / len(batch)
            sgd_step(params, {k: g * scale for k, g in acc_grads.items()}, cfg.learning_rate)

        try:
            val_acc = _accuracy(params, val_dps)
        except FloatingPointError:
            raise TrainingDiverged(epoch, mb_index, float("nan")) from None
        rec = EpochRecord(epoch=epoch, train_loss=loss_sum / n, val_acc=val_acc,
                          seconds=time.perf_counter() - t0)
        log.records.append(rec)
        log.final_val_acc = val_acc
        if log_hook:
            log_hook(rec)
        if val_acc > log.best_val_acc:
            log.best_val_acc = val_acc
            log.best_epoch = epoch
            best = _snapshot(params)
        if cfg.patience and epoch - log.best_epoch >= cfg.patience:
            break

    _restore(params, best)
    return params, log


# ---------------------------------------------------------------------------
# gradient verification against central finite differences


@dataclass
class GradCheckReport:
    variant: str
    trials: int
    h: float
    tolerance: float
    per_block: dict[str, float]
    max_rel_error: float
    passed: bool


def random_small_datapoint(rng: np.random.Generator, dims: Dims, n_candidates: int = 3) -> Datapoint:
    """Random unit vectors shaped like a datapoint; no task structure needed."""
    unit = lambda d: (lambda x: x / np.linalg.norm(x))(rng.standard_normal(d))
    exposures = [Exposure(image=unit(dims.v), attribute=unit(dims.t))
                 for _ in range(dims.n_exposures)]
    return Datapoint(
        exposures=exposures,
        query_noun=unit(dims.t_c),
        query_attrs=(unit(dims.t), unit(dims.t)),
        candidates=[unit(dims.v) for _ in range(n_candidates)],
        gold=int(rng.integers(n_candidates)),
    )


def grad_check(variant: str, trials: int = 20, dims: Dims | None = None,
               tolerance: float = 1e-4, h: float = 1e-5, seed: int = 0,
               n_candidates: int = 3) -> GradCheckReport:
    """Compare analytic gradients to central finite differences.

    Dropout stays off and the datapoint fixed within each trial, otherwise
    finite differences are meaningless.  The relative error per component is
    |a - n| / max(|a|, |n|, 1e-6).
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if dims is None:
        dims = Dims(v=4, t=4, t_c=4, m=8, hidden=16, n_exposures=4)

    per_block: dict[str, float] = {}
    for trial in range(trials):
        rng = _stream(seed, 3, trial)
        params = models.init_params(variant, dims, seed=int(rng.integers(2 ** 31)))
        dp = random_small_datapoint(rng, dims, n_candidates)

        trace = models.forward(dp, params)
        analytic = models.backward(trace, params)

        view = models.eval_view(params)
        for name, var in params.named():
            arr = var.value  # shared with view; mutate in place for FD
            saved = arr.copy()

            def f(flat, _arr=arr, _shape=arr.shape):
                _arr[...] = flat.reshape(_shape)
                return models.forward(dp, view).loss

            numeric = central_fd_gradient(f, saved.ravel(), h).reshape(arr.shape)
            arr[...] = saved
            a = np.atleast_1d(analytic[name])
            nu = np.atleast_1d(numeric)
            rel = np.abs(a - nu) / np.maximum(np.maximum(np.abs(a), np.abs(nu)), 1e-6)
            per_block[name] = max(per_block.get(name, 0.0), float(rel.max()))

    worst = max(per_block.values())
    return GradCheckReport(variant=variant, trials=trials, h=h, tolerance=tolerance,
                           per_block=per_block, max_rel_error=worst,
                           passed=worst <= tolerance)
