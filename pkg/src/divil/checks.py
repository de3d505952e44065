"""Finite-difference gradient checks for every op and loss.

Each case builds a scalar function of named arrays; array-valued ops are
reduced with a fixed random weighting so the whole Jacobian is exercised.
Ops are looked up on their modules at call time, so a patched op is what
gets checked.
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import losses
from .models import ModelSpec, classify, featurize, init_params
from .rng import stream

TOLERANCE = 1e-5
IRM_TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.max_rel_err < self.tolerance)


def _away_from_zero(rng, shape, lo=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < lo, np.sign(x + 1e-300) * lo + x, x)


def _unary(op, positive=False):
    def build(rng):
        x = np.abs(rng.normal(size=(3, 4))) + 0.5 if positive else _away_from_zero(rng, (3, 4))
        w = rng.normal(size=(3, 4))
        return (lambda x: ag.sum(ag.mul(getattr(ag, op)(x), w))), {"x": x}
    return build


def _binary(op):
    def build(rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4,))
        if op == "div":
            b = np.abs(b) + 0.5
        w = rng.normal(size=(3, 4))
        return (lambda a, b: ag.sum(ag.mul(getattr(ag, op)(a, b), w))), {"a": a, "b": b}
    return build


def _case_matmul(rng):
    w = rng.normal(size=(3, 2))
    return (lambda a, b: ag.sum(ag.mul(ag.matmul(a, b), w))), \
        {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}


def _reduction(op, axis, keepdims=False):
    def build(rng):
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=ag.as_array(getattr(ag, op)(x, axis=axis, keepdims=keepdims)).shape)
        return (lambda x: ag.sum(ag.mul(getattr(ag, op)(x, axis=axis, keepdims=keepdims), w))), {"x": x}
    return build


def _case_mask(rng):
    keep = (rng.random((3, 4)) > 0.5).astype(float)
    w = rng.normal(size=(3, 4))
    return (lambda x: ag.sum(ag.mul(ag.mask(ag.square(x), keep), w))), {"x": rng.normal(size=(3, 4))}


def _case_log_softmax(rng):
    w = rng.normal(size=(3, 5))
    return (lambda x: ag.sum(ag.mul(ag.log_softmax(x, axis=1), w))), {"x": 3 * rng.normal(size=(3, 5))}


def _case_concat(rng):
    w = rng.normal(size=(3, 5))
    return (lambda a, b: _weighted_fixed(ag.concat([ag.square(a), b], axis=1), w)), \
        {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(3, 3))}


def _case_stack(rng):
    w = rng.normal(size=(2, 4))
    return (lambda a, b: _weighted_fixed(ag.stack([ag.exp(a), b], axis=0), w)), \
        {"a": rng.normal(size=4), "b": rng.normal(size=4)}


def _case_gather(rng):
    idx = np.array([2, 0, 2, 1])
    w = rng.normal(size=(4, 3))
    return (lambda x: _weighted_fixed(ag.gather_rows(ag.square(x), idx), w)), {"x": rng.normal(size=(3, 3))}


def _case_transpose(rng):
    w = rng.normal(size=(4, 3))
    return (lambda x: _weighted_fixed(ag.transpose(ag.square(x)), w)), {"x": rng.normal(size=(3, 4))}


def _case_reshape(rng):
    w = rng.normal(size=(2, 6))
    return (lambda x: _weighted_fixed(ag.reshape(ag.exp(x), (2, 6)), w)), {"x": rng.normal(size=(3, 4))}


def _weighted_fixed(out, w):
    return ag.sum(ag.mul(out, w))


def _case_ce_binary(rng):
    y = (rng.random(6) > 0.5).astype(float)
    return (lambda o: losses.cross_entropy(o, y)), {"o": 2 * rng.normal(size=(6, 1))}


def _case_ce_multi(rng):
    y = rng.integers(0, 4, size=6)
    return (lambda o: losses.cross_entropy(o, y)), {"o": 2 * rng.normal(size=(6, 4))}


def _case_irm_logits(rng):
    y = (rng.random(8) > 0.5).astype(float)
    return (lambda o: losses.irmv1_penalty(o, y)), {"o": 2 * rng.normal(size=(8, 1))}


def _case_vrex(rng):
    return (lambda r: losses.vrex_penalty([ag.gather_rows(ag.reshape(r, (3, 1)), [i])
                                           for i in range(3)])), {"r": rng.normal(size=3)}


def _case_fishr(stat):
    def build(rng):
        ys = [(rng.random(5) > 0.5).astype(float) for _ in range(2)]

        def fn(h0, h1, W):
            stats = [losses.classifier_grad_stat(h, ag.matmul(h, W), y, stat)
                     for h, y in zip((h0, h1), ys)]
            return losses.fishr_penalty(stats)
        return fn, {"h0": rng.normal(size=(5, 3)), "h1": rng.normal(size=(5, 3)),
                    "W": rng.normal(size=(3, 1))}
    return build


def _case_feature_mask(rng):
    w = rng.normal(size=(3, 6))
    return (lambda z: _weighted_fixed(losses.feature_mask(ag.square(z), 0.5), w)), {"z": rng.normal(size=(3, 6))}


def _case_dropout_mask(rng):
    seed = int(rng.integers(1 << 30))
    w = rng.normal(size=(3, 6))
    return (lambda z: _weighted_fixed(
        losses.dropout_mask(ag.square(z), 0.5, np.random.default_rng(seed)), w)), {"z": rng.normal(size=(3, 6))}


def _case_ucl(sign_mode="standard", normalize=True, fused=True, mask_mode="prefix",
              reduction="sum"):
    def build(rng):
        cfg = losses.UclConfig(sign_mode=sign_mode, normalize=normalize, mask_mode=mask_mode,
                               reduction=reduction, mask_fraction=0.5)
        seed = int(rng.integers(1 << 30))
        scale = 1.0 if normalize else 0.5

        def fn(z, zp):
            return losses.ucl_loss(z, zp, cfg, rng=np.random.default_rng(seed), fused=fused)
        return fn, {"z": scale * rng.normal(size=(6, 8)), "zp": scale * rng.normal(size=(6, 8))}
    return build


def _case_divil_total(rng):
    def fn(a, b, c):
        return losses.divil_total(ag.sum(ag.square(a)), ag.sum(ag.exp(b)), ag.sum(c), 3.0, 0.1).total
    return fn, {k: rng.normal(size=3) for k in "abc"}


CASES = {
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "div": _binary("div"),
    "neg": _unary("neg"),
    "matmul": _case_matmul,
    "relu": _unary("relu"),
    "sigmoid": _unary("sigmoid"),
    "softplus": _unary("softplus"),
    "exp": _unary("exp"),
    "log": _unary("log", positive=True),
    "sqrt": _unary("sqrt", positive=True),
    "square": _unary("square"),
    "mask": _case_mask,
    "sum": _reduction("sum", 1),
    "mean": _reduction("mean", 0, keepdims=True),
    "variance": _reduction("variance", 1),
    "sqnorm": _reduction("sqnorm", 1, keepdims=True),
    "log_softmax": _case_log_softmax,
    "concat": _case_concat,
    "stack": _case_stack,
    "gather_rows": _case_gather,
    "transpose": _case_transpose,
    "reshape": _case_reshape,
    "cross_entropy[binary]": _case_ce_binary,
    "cross_entropy[multiclass]": _case_ce_multi,
    "irmv1_penalty[logits]": _case_irm_logits,
    "vrex_penalty": _case_vrex,
    "fishr_penalty[mean]": _case_fishr("mean"),
    "fishr_penalty[variance]": _case_fishr("variance"),
    "feature_mask": _case_feature_mask,
    "dropout_mask": _case_dropout_mask,
    "ucl_loss[fused]": _case_ucl(),
    "ucl_loss[composed]": _case_ucl(fused=False),
    "ucl_loss[paper_literal]": _case_ucl(sign_mode="paper_literal", reduction="mean"),
    "ucl_loss[unnormalized]": _case_ucl(normalize=False),
    "ucl_loss[dropout]": _case_ucl(mask_mode="dropout"),
    "divil_total": _case_divil_total,
}


def run_case(name, points=5, seed=0, eps=1e-5):
    """Worst gradcheck error of ``CASES[name]`` over ``points`` random points."""
    build = CASES[name]
    worst = 0.0
    for k in range(points):
        fn, point = build(stream(seed, "gradcheck/" + name, k))
        worst = max(worst, ag.gradcheck(fn, point, eps=eps))
    return CheckResult(name, worst, TOLERANCE)


# ---------------------------------------------------------------------------
# IRMv1 penalty: closed-form cotangent vs FD of the defining derivative


def irm_penalty_by_definition(logits, labels):
    """``(d/dw mean BCE(w * logits) at w = 1)**2`` via its own backward pass."""
    y = np.asarray(labels, dtype=np.float64)

    def risk(w):
        return losses.cross_entropy(ag.mul(logits, w), y)

    out, tape = ag.record_forward(risk, {"w": np.array(1.0)})
    g = float(ag.backward(tape, out)["w"])
    tape.release()
    return g * g


def irm_model_case(index, seed=0, n=16):
    """A random small MLP and binary batch for the IRM comparison."""
    rng = stream(seed, "irm-models", index)
    d = int(rng.integers(2, 6))
    spec = ModelSpec(input_dim=d, hidden_dims=(int(rng.integers(2, 6)),),
                     feature_dim=int(rng.integers(2, 6)), projector_dims=(2, 2))
    params = init_params(spec, seed * 1000 + index)
    x = rng.normal(size=(n, d))
    y = (rng.random(n) > 0.5).astype(float)
    # random biases keep pre-activations off the relu kink at exactly 0
    values = {k: (v + 0.1 * rng.normal(size=v.shape) if k.endswith(".b") else v)
              for k, v in params.values.items() if not k.startswith("proj.")}
    return spec, values, x, y


def irm_second_order_error(index, seed=0, eps=1e-6):
    """Relative error between the tape gradient of the penalty and FD of its definition."""
    spec, values, x, y = irm_model_case(index, seed)

    def logits_of(**p):
        return classify(p, featurize(p, x, spec), spec)

    out, tape = ag.record_forward(lambda **p: losses.irmv1_penalty(logits_of(**p), y), values)
    analytic = ag.backward(tape, out)
    tape.release()
    numeric = ag.grad_of_penalty_fd(
        lambda **p: irm_penalty_by_definition(logits_of(**p), y), values, eps=eps)
    a = np.concatenate([analytic[k].ravel() for k in values])
    f = np.concatenate([numeric[k].ravel() for k in values])
    return float(np.linalg.norm(a - f) / max(np.linalg.norm(f), 1e-12))


def run_irm_second_order(models=20, seed=0):
    worst = max(irm_second_order_error(i, seed) for i in range(models))
    return CheckResult(f"irmv1 analytic-vs-FD ({models} models)", worst, IRM_TOLERANCE)


def run_suite(points=5, seed=0, irm_models=20):
    results = [run_case(name, points, seed) for name in CASES]
    results.append(run_irm_second_order(irm_models, seed))
    return results
