"""Optimizers, the two-stage penalty schedule and the training loop."""

import csv
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .data import augment_mask
from .losses import (
    UclConfig,
    classifier_grad_stat,
    cross_entropy,
    divil_total,
    fishr_penalty,
    irmv1_penalty_grad,
    ucl_loss,
    vrex_penalty,
)
from .models import ModelParams, classify, featurize, init_params, project
from .rng import stream

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "TrainingError",
    "AdamState",
    "lambda_schedule",
    "adam_step",
    "sgd_step",
    "train",
    "write_history_csv",
    "synthetic_train_config",
    "cmnist_train_config",
]

METHODS = ("erm", "irmv1", "vrex", "fishr")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "erm"
    divil: bool = False
    lam: float = 1.0
    beta: float = 0.1
    anneal_iters: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 500
    batch_size: int = 0
    mask_fraction: float = 0.5
    augment_prob: float = 0.2
    optimizer: str = "adam"
    seed: int = 0
    temperature: float = 1.0
    sign_mode: str = "standard"
    normalize: bool = True
    mask_mode: str = "prefix"
    ucl_reduction: str = "mean"
    ucl_batch: int = 0
    fishr_statistic: str = "mean"
    eval_every: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for name in ("lam", "beta", "lr", "weight_decay", "mask_fraction",
                     "augment_prob", "anneal_iters", "batch_size", "ucl_batch",
                     "eval_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mask_fraction > 1 or self.augment_prob > 1:
            raise ValueError("probabilities must be <= 1")
        self.ucl_config()

    def ucl_config(self):
        return UclConfig(temperature=self.temperature, sign_mode=self.sign_mode,
                         mask_fraction=self.mask_fraction, normalize=self.normalize,
                         mask_mode=self.mask_mode, reduction=self.ucl_reduction)

    def to_dict(self):
        return asdict(self)


def synthetic_train_config(method, divil=False, seed=0, **overrides):
    """Full-batch Adam (lr 1e-3, 500 steps) for the Gaussian environments."""
    base = TrainConfig(method=method, divil=divil, lam=10.0, beta=0.1,
                       anneal_iters=0, lr=1e-3, epochs=500, batch_size=0,
                       mask_fraction=0.5, augment_prob=0.2, seed=seed)
    return replace(base, **overrides)


CMNIST_HPARAMS = dict(
    lr=0.0004898536566546834,
    weight_decay=0.00110794568,
    anneal_iters=190,
    lam=91257.18613115903,
    epochs=501,
    batch_size=25000,
)


def cmnist_train_config(method, divil=False, seed=0, **overrides):
    """ColoredMNIST hyperparameters shared by every method."""
    hp = dict(CMNIST_HPARAMS)
    if method == "erm":
        hp["lam"] = 0.0
    base = TrainConfig(method=method, divil=divil, beta=0.1, mask_fraction=0.5,
                       augment_prob=0.2, seed=seed, ucl_batch=2048,
                       eval_every=100, **hp)
    return replace(base, **overrides)


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    lambda_eff: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    steps_per_epoch: int = 1
    params: ModelParams = None

    def final_eval(self, env_id):
        for rec in reversed(self.evals):
            if rec["env_id"] == env_id:
                return rec["acc"]
        raise KeyError(env_id)


def lambda_schedule(step, anneal_iters, lam_final):
    """1.0 during warm-up, ``lam_final`` from step ``anneal_iters`` on."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return 1.0 if step < anneal_iters else float(lam_final)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adam_step(params, grads, state, lr, weight_decay=0.0,
              betas=(0.9, 0.999), eps=1e-8):
    """One Adam update; ``weight_decay * theta`` is added to each gradient.

    Returns new ``(params, state)``; the inputs are left untouched.
    """
    b1, b2 = betas
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, theta in params.items():
        g = grads[k]
        if g.shape != theta.shape or state.m[k].shape != theta.shape:
            raise ValueError(f"adam_step: shape mismatch for {k}: "
                             f"{theta.shape} vs {g.shape}")
        if weight_decay:
            g = g + weight_decay * theta
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p[k] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


def sgd_step(params, grads, state, lr, weight_decay=0.0):
    new_p = {}
    for k, theta in params.items():
        g = grads[k]
        if g.shape != theta.shape:
            raise ValueError(f"sgd_step: shape mismatch for {k}")
        if weight_decay:
            g = g + weight_decay * theta
        new_p[k] = theta - lr * g
    return new_p, state


def _accuracy_from_logits(logits, y01):
    o = np.asarray(logits)
    if o.ndim == 2 and o.shape[1] > 1:
        pred = o.argmax(axis=1)
    else:
        pred = (o.reshape(-1) > 0).astype(np.float64)
    return float(np.mean(pred == y01))


def _labels01(ds):
    if ds.meta.get("kind") == "synthetic" or np.any(ds.y < 0):
        return ds.labels01
    return np.asarray(ds.y, dtype=np.float64)


def _l2_names(spec):
    # every classifier-path parameter, biases included, as in the IRM reference code
    return [name for name, _ in spec.layer_shapes() if not name.startswith("proj.")]


class _Batcher:
    """Yields one batch per environment per step."""

    def __init__(self, envs, batch_size, seed):
        self.envs = envs
        self.x = [np.asarray(e.x, dtype=np.float64) for e in envs]
        self.y = [_labels01(e) for e in envs]
        self.seed = seed
        sizes = [len(e) for e in envs]
        self.full = batch_size == 0 or batch_size >= min(sizes)
        self.batch_size = min(sizes) if self.full else batch_size
        self.steps_per_epoch = 1 if self.full else math.ceil(min(sizes) / batch_size)
        self._perm_epoch = None

    def batch(self, step):
        if self.full:
            return list(zip(self.x, self.y))
        epoch, k = divmod(step, self.steps_per_epoch)
        if self._perm_epoch != epoch:
            self._perms = [stream(self.seed, "shuffle", epoch, e).permutation(len(y))
                           for e, y in enumerate(self.y)]
            self._perm_epoch = epoch
        out = []
        for x, y, perm in zip(self.x, self.y, self._perms):
            idx = perm[k * self.batch_size:(k + 1) * self.batch_size]
            out.append((x[idx], y[idx]))
        return out


def _objective(leaves, spec, batches, cfg, step, lam_eff):
    """Build the per-step loss on the tape; returns ``(breakdown, objective, logits)``."""
    feats, logits, env_losses = [], [], []
    for x, y in batches:
        h = featurize(leaves, x, spec)
        o = classify(leaves, h, spec)
        feats.append(h)
        logits.append(o)
        env_losses.append(cross_entropy(o, y))
    pred = ag.mean(ag.stack([ag.reshape(v, ()) for v in env_losses]))

    if cfg.method == "erm":
        il = 0.0
    elif cfg.method == "irmv1":
        il = ag.mean(ag.stack([ag.reshape(irmv1_penalty_grad(o, y), ())
                               for o, (_, y) in zip(logits, batches)]))
    elif cfg.method == "vrex":
        il = vrex_penalty(env_losses)
    else:
        il = fishr_penalty([classifier_grad_stat(h, o, y, cfg.fishr_statistic)
                            for h, o, (_, y) in zip(feats, logits, batches)])

    ucl = 0.0
    if cfg.divil:
        x_all = np.concatenate([x for x, _ in batches])
        if cfg.ucl_batch and cfg.ucl_batch < len(x_all):
            rows = np.sort(stream(cfg.seed, "augment", step, 2).choice(
                len(x_all), cfg.ucl_batch, replace=False))
            x_all = x_all[rows]
        xa = augment_mask(x_all, cfg.augment_prob, cfg.seed, step, 0)
        xb = augment_mask(x_all, cfg.augment_prob, cfg.seed, step, 1)
        za = project(leaves, featurize(leaves, xa, spec), spec)
        zb = project(leaves, featurize(leaves, xb, spec), spec)
        ucl = ucl_loss(za, zb, cfg.ucl_config(), rng=stream(cfg.seed, "mask", step))

    bd = divil_total(pred, il, ucl, lam_eff, cfg.beta if cfg.divil else 0.0, env_losses)
    objective = bd.total
    if cfg.weight_decay:
        l2 = sum(ag.sqnorm(leaves[k]) for k in _l2_names(spec))
        objective = ag.add(objective, ag.mul(l2, cfg.weight_decay))
    if lam_eff > 1.0:
        objective = ag.div(objective, lam_eff)
    return bd, objective, logits


def train(model_spec, env_datasets, cfg, eval_sets=(), init=None, callback=None):
    """Train ``w o Phi`` on the training environments.

    Every step draws one batch from each environment.  Training accuracy is
    recorded every step (from the pre-update logits); ``eval_sets`` are
    scored every ``cfg.eval_every`` steps (if non-zero) and after the last.
    """
    if len(env_datasets) < 1:
        raise TrainingError("need at least one training environment")
    if cfg.method != "erm" and len(env_datasets) < 2:
        raise TrainingError(f"{cfg.method} needs at least two environments")
    params = init if init is not None else init_params(model_spec, cfg.seed)
    values = {k: v.copy() for k, v in params.values.items()}
    if not cfg.divil:
        values = {k: v for k, v in values.items() if not k.startswith("proj.")}
    opt_state = AdamState.zeros_like(values)
    step_fn = adam_step if cfg.optimizer == "adam" else sgd_step
    batcher = _Batcher(env_datasets, cfg.batch_size, cfg.seed)
    hist = TrainHistory(steps_per_epoch=batcher.steps_per_epoch)
    n_steps = cfg.epochs * batcher.steps_per_epoch

    for step in range(n_steps):
        lam_eff = lambda_schedule(step, cfg.anneal_iters, cfg.lam)
        batches = batcher.batch(step)
        tape = ag.Tape()
        leaves = {k: tape.leaf(v, k) for k, v in values.items()}
        try:
            bd, objective, logits = _objective(leaves, model_spec, batches, cfg, step, lam_eff)
        except ag.AutogradError as e:
            raise TrainingError(f"step {step}: {e}") from e
        floats = bd.as_floats()
        if not math.isfinite(floats.total):
            raise TrainingError(f"step {step}: non-finite total loss")
        grads = ag.backward(tape, objective)
        logits = [ag.as_array(o) for o in logits]
        tape.release()
        del tape, leaves, objective
        values, opt_state = step_fn(values, grads, opt_state, cfg.lr)
        hist.steps.append(floats)
        hist.lambda_eff.append(lam_eff)
        correct = sum(_accuracy_from_logits(ag.as_array(o), y) * len(y)
                      for o, (_, y) in zip(logits, batches))
        hist.train_acc.append(correct / sum(len(y) for _, y in batches))
        last = step == n_steps - 1
        if eval_sets and (last or (cfg.eval_every and (step + 1) % cfg.eval_every == 0)):
            current = _full_params(params, values)
            for ds in eval_sets:
                hist.evals.append({"step": step + 1, "env_id": ds.env_id,
                                   "acc": evaluate_accuracy(current, ds)})
        if callback is not None:
            callback(step, floats)

    final = _full_params(params, values)
    hist.params = final
    return final, hist


def _full_params(template, values):
    merged = dict(template.values)
    merged.update(values)
    return ModelParams(template.spec, merged)


def evaluate_accuracy(params, dataset, chunk=20000):
    """Fraction of rows whose thresholded (or argmax) prediction matches the label."""
    if len(dataset) == 0:
        raise ValueError("evaluate_accuracy: empty dataset")
    y = _labels01(dataset)
    correct = 0.0
    for start in range(0, len(y), chunk):
        sl = slice(start, start + chunk)
        o = classify(params, featurize(params, dataset.x[sl]))
        correct += _accuracy_from_logits(o, y[sl]) * len(y[sl])
    return correct / len(y)


def write_history_csv(path, history):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "pred", "il", "ucl", "total", "lambda_eff"])
        for i, (bd, lam) in enumerate(zip(history.steps, history.lambda_eff)):
            w.writerow([i, repr(bd.pred), repr(bd.il), repr(bd.ucl),
                        repr(bd.total), repr(lam)])
