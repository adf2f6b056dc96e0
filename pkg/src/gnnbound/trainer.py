"""Training loops: SGD/Adam with weight decay, early stopping, weight averaging,
and noise-stability optimization (gradients averaged over +-E weight noise)."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .hessian import per_layer_alphas, top_eigenvalue
from .io import csv_text
from .model import flatten, loss_and_flat_grad, negate, objective_value, perturb, unflatten

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")
SIGMA_GRID = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5)


class TrainingDivergence(ArithmeticError):
    def __init__(self, epoch, value):
        super().__init__(f"training diverged at epoch {epoch}: loss = {value}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings.  ``nso_m``/``nso_sigma`` switch on noise-stability
    optimization when ``nso_sigma > 0``; ``nso_sigma`` is a standard deviation."""

    optimizer: str = "adam"
    lr: float = 0.01
    epochs: int = 50
    batch_size: int = 128
    weight_decay: float = 0.0
    early_stop_patience: int = None
    weight_averaging: bool = False
    nso_m: int = 10
    nso_sigma: float = 0.0
    seed: int = 0
    loss: str = "binary_logistic"
    gin: bool = False
    trace_monitor_every: int = None
    trace_method: str = "exact"
    trace_probes: int = 100
    lambda_max_every: int = None
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValueError("lr must be a finite non-negative number")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.nso_sigma < 0:
            raise ValueError("nso_sigma must be >= 0")
        if self.nso_sigma > 0 and self.nso_m < 1:
            raise ValueError("nso_m must be >= 1 when noise-stability optimization is on")

    @property
    def nso_active(self):
        return self.nso_sigma > 0


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    traces: list = field(default_factory=list)  # per epoch: tuple of layer traces or None
    lambda_max: list = field(default_factory=list)
    layers: int = 0

    @property
    def epochs(self):
        return len(self.train_loss)

    @property
    def gap(self):
        return [te - tr for tr, te in zip(self.train_loss, self.test_loss)]

    def header(self):
        return (("epoch", "train_loss", "test_loss", "gap")
                + tuple(f"trace_layer_{i}" for i in range(1, self.layers + 1))
                + ("lambda_max",))

    def rows(self):
        for e in range(self.epochs):
            row = {"epoch": e + 1, "train_loss": self.train_loss[e],
                   "test_loss": self.test_loss[e], "gap": self.gap[e],
                   "lambda_max": self.lambda_max[e]}
            if self.traces[e] is not None:
                for i, t in enumerate(self.traces[e], start=1):
                    row[f"trace_layer_{i}"] = t
            yield row

    def to_csv(self):
        return csv_text(self.header(), list(self.rows()), schema="train_history")


def mean_loss(model, examples, kind="binary_logistic", gin=False):
    return float(np.mean([objective_value(model, ex, kind, gin) for ex in examples]))


def batch_gradient(model, batch, kind="binary_logistic", gin=False):
    grads = [loss_and_flat_grad(model, ex, kind, gin)[1] for ex in batch]
    return np.mean(grads, axis=0)


def nso_gradient(model, batch, m, sigma, seed, kind="binary_logistic", gin=False,
                 paired=True):
    """``(1/2m) sum_i (grad L(theta + E_i) + grad L(theta - E_i))``.

    ``E_i`` is drawn with seed ``(seed, i)``; the same draw is negated.  With
    ``paired=False`` only ``theta + E_i`` is used (ablation).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if np.all(np.asarray(sigma) == 0):
        return batch_gradient(model, batch, kind, gin)
    base = tuple(seed) if isinstance(seed, tuple) else (seed,)
    total = np.zeros(flatten(model).size)
    for i in range(m):
        plus, rec = perturb(model, sigma, base + (i,))
        total += batch_gradient(plus, batch, kind, gin)
        if paired:
            total += batch_gradient(negate(model, rec), batch, kind, gin)
    return total / (2 * m if paired else m)


def noise_stability_step(model, batch, m, sigma, lr, seed, kind="binary_logistic", gin=False):
    """One plain-SGD update along the noise-averaged gradient.

    With ``sigma = 0`` all draws vanish and this is exactly one SGD step.
    """
    if sigma is None or np.any(np.asarray(sigma) < 0):
        raise ValueError("sigma must be >= 0")
    g = nso_gradient(model, batch, m, sigma, seed, kind, gin)
    return unflatten(model, flatten(model) - lr * g)


def sgd_step(model, batch, lr, kind="binary_logistic", gin=False):
    return unflatten(model, flatten(model) - lr * batch_gradient(model, batch, kind, gin))


def generalization_gap(model, train_set, test_set, kind="binary_logistic", gin=False):
    """Mean test loss minus mean train loss."""
    if not train_set or not test_set:
        raise ValueError("train and test sets must be non-empty")
    return mean_loss(model, test_set, kind, gin) - mean_loss(model, train_set, kind, gin)


def layer_traces(model, examples, config, seed):
    return tuple(a.mean for a in per_layer_alphas(
        model, examples, config.trace_method, config.trace_probes, seed, config.loss, config.gin))


class _Adam:
    def __init__(self, size, lr, betas, eps):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps

    def step(self, theta, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * mh / (np.sqrt(vh) + self.eps)


def train(model, train_set, test_set, config=TrainConfig()):
    """Train ``model``; returns ``(final model, TrainHistory)``.

    Randomness (shuffling, noise draws, probes) derives from ``config.seed``
    through separate sub-streams.  With early stopping the weights with the
    best test loss are returned; with weight averaging the running mean of the
    weights over the second half of training is returned.
    """
    train_set, test_set = list(train_set), list(test_set)
    if not train_set:
        raise ValueError("training set is empty")
    kind, gin = config.loss, config.gin
    shuffle_rng = np.random.default_rng((config.seed, 0))
    history = TrainHistory(layers=model.layers)
    theta = flatten(model)
    adam = _Adam(theta.size, config.lr, config.adam_betas, config.adam_eps)
    best = (math.inf, theta.copy())
    stale = 0
    avg, avg_count = None, 0
    avg_start = config.epochs // 2
    step = 0
    eval_set = test_set or train_set

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        for start in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[start:start + config.batch_size]]
            current = unflatten(model, theta)
            if config.nso_active:
                g = nso_gradient(current, batch, config.nso_m, config.nso_sigma,
                                 (config.seed, 1, step), kind, gin)
            else:
                g = batch_gradient(current, batch, kind, gin)
            if config.weight_decay:
                g = g + config.weight_decay * theta
            if config.optimizer == "sgd":
                theta = theta - config.lr * g
            else:
                theta = adam.step(theta, g)
            step += 1
        if not np.all(np.isfinite(theta)):
            raise TrainingDivergence(epoch, "non-finite weights")
        current = unflatten(model, theta)
        tr = mean_loss(current, train_set, kind, gin)
        te = mean_loss(current, eval_set, kind, gin)
        if not (math.isfinite(tr) and math.isfinite(te)):
            raise TrainingDivergence(epoch, tr if not math.isfinite(tr) else te)
        history.train_loss.append(tr)
        history.test_loss.append(te)
        every = config.trace_monitor_every
        history.traces.append(layer_traces(current, train_set, config, (config.seed, 2, epoch))
                              if every and epoch % every == 0 else None)
        every = config.lambda_max_every
        history.lambda_max.append(top_eigenvalue(current, train_set, kind, seed=config.seed)
                                  if every and epoch % every == 0 else None)
        if config.weight_averaging and epoch > avg_start:
            avg_count += 1
            avg = theta.copy() if avg is None else avg + (theta - avg) / avg_count
        if config.early_stop_patience is not None:
            if te < best[0]:
                best, stale = (te, theta.copy()), 0
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    log.info("early stop at epoch %d (best test loss %.4g)", epoch, best[0])
                    theta = best[1]
                    break
    if config.weight_averaging and avg is not None:
        theta = avg
    return unflatten(model, theta), history
