"""Feature-strength probe and the synthetic scans built on it.

``strength`` zeroes every input column outside a chosen subset, runs the
trained featurizer and averages the L2 norm of the representation.  The two
scans train IRMv1 / VREx (optionally with the contrastive terms) on Gaussian
environments and record the strength of each invariant-variance group.
"""

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import SynthConfig, gen_synthetic, subset_mask
from .models import featurize, synthetic_spec
from .training import evaluate_accuracy, synthetic_train_config, train

__all__ = [
    "StrengthRecord",
    "GridSpec",
    "ScanError",
    "strength",
    "evaluate_accuracy",
    "default_sigma_s_grid",
    "SIGMA_C_GROUPS",
    "run_overinvariance_scan",
    "run_ucl_effect_scan",
    "aggregate",
    "sign_test",
    "write_records_csv",
    "write_summary_csv",
]

# invariant-variance label -> input columns, in the order of diag(5,5,3,3,1,1,0.1,0.1)
SIGMA_C_GROUPS = {"5": (0, 1), "3": (2, 3), "1": (4, 5), "0.1": (6, 7)}


class ScanError(RuntimeError):
    pass


@dataclass(frozen=True)
class StrengthRecord:
    method: str
    seed: int
    sigma_s: float
    subset_label: str
    strength: float


def default_sigma_s_grid(points=15, lo=-3.0, hi=0.5):
    """``points`` values evenly spaced in log10 between 10**lo and 10**hi."""
    return tuple(float(v) for v in np.logspace(lo, hi, points))


@dataclass(frozen=True)
class GridSpec:
    sigma_s: tuple = field(default_factory=default_sigma_s_grid)
    groups: dict = field(default_factory=lambda: dict(SIGMA_C_GROUPS))
    seeds: tuple = tuple(range(10))
    methods: tuple = ("irmv1", "vrex")
    n: int = 2000
    train_s: tuple = (0.2, 0.4)
    test_s: float = 0.7
    train_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(v <= 0 for v in self.sigma_s):
            raise ScanError("sigma_s grid values must be positive")
        seen = set()
        for dims in self.groups.values():
            if seen & set(dims):
                raise ScanError("sigma_c groups must be disjoint")
            seen |= set(dims)
        if not self.seeds:
            raise ScanError("need at least one seed")


def strength(featurizer_params, x_batch, keep_dims):
    """Mean over rows of ``||Phi(x masked to keep_dims)||_2``."""
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_batch.shape[0] == 0:
        raise ValueError("strength: empty batch")
    h = featurize(featurizer_params, subset_mask(x_batch, keep_dims))
    return float(np.mean(np.linalg.norm(h, axis=1)))


def _split_method(method):
    base, _, suffix = method.partition("+")
    if suffix not in ("", "divil"):
        raise ScanError(f"unknown method {method!r}")
    return base, suffix == "divil"


def _synthetic_envs(grid, sigma_s, seed):
    train_envs = [
        gen_synthetic(SynthConfig(sigma_s=sigma_s, s=s, n=grid.n // len(grid.train_s), seed=seed),
                      env_id=f"train{e}")
        for e, s in enumerate(grid.train_s)
    ]
    test = gen_synthetic(SynthConfig(sigma_s=sigma_s, s=grid.test_s, n=grid.n, seed=seed),
                         env_id="test")
    return train_envs, test


def _run_point(job):
    grid, method, sigma_s, seed = job
    base, divil = _split_method(method)
    try:
        train_envs, test = _synthetic_envs(grid, sigma_s, seed)
        spec = synthetic_spec(input_dim=train_envs[0].x.shape[1])
        cfg = synthetic_train_config(base, divil=divil, seed=seed, **grid.train_overrides)
        params, _ = train(spec, train_envs, cfg)
    except Exception as e:
        raise ScanError(f"method={method} sigma_s={sigma_s:g} seed={seed}: {e}") from e
    return [StrengthRecord(method, seed, sigma_s, label, strength(params, test.x, dims))
            for label, dims in grid.groups.items()]


def _sort_key(rec):
    return (rec.method, rec.sigma_s, rec.subset_label, rec.seed)


def _run_grid(grid, workers):
    jobs = [(grid, m, s, seed) for m in grid.methods for s in grid.sigma_s
            for seed in grid.seeds]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_point, jobs))
    else:
        chunks = [_run_point(j) for j in jobs]
    records = [r for chunk in chunks for r in chunk]
    return sorted(records, key=_sort_key)


def run_overinvariance_scan(grid=None, workers=1):
    """Strength of each invariant group for every (method, sigma_s, seed)."""
    grid = grid or GridSpec()
    return _run_grid(grid, workers)


def run_ucl_effect_scan(grid=None, workers=1):
    """Same scan with each method paired with its ``+divil`` variant.

    Paired runs share seeds, data and initialisation, so the difference
    isolates the contrastive terms.
    """
    grid = grid or GridSpec(sigma_s=(default_sigma_s_grid()[-1],))
    methods = []
    for m in grid.methods:
        base, _ = _split_method(m)
        methods += [base, base + "+divil"]
    return _run_grid(replace(grid, methods=tuple(dict.fromkeys(methods))), workers)


def aggregate(records):
    """Seed-averaged rows ``(method, sigma_s, group, mean, std)``; std is population."""
    buckets = {}
    for r in records:
        buckets.setdefault((r.method, r.sigma_s, r.subset_label), []).append(r.strength)
    rows = []
    for (method, sigma_s, group), vals in sorted(buckets.items()):
        arr = np.asarray(vals)
        rows.append((method, sigma_s, group, float(arr.mean()), float(arr.std())))
    return rows


def sign_test(flags, threshold):
    """``(count, total, passed)`` where passed means ``count >= threshold``."""
    flags = [bool(f) for f in flags]
    count = sum(flags)
    return count, len(flags), count >= threshold


def per_seed(records, method, group):
    """``{seed: [(sigma_s, strength), ...]}`` sorted by sigma_s."""
    out = {}
    for r in records:
        if r.method == method and r.subset_label == group:
            out.setdefault(r.seed, []).append((r.sigma_s, r.strength))
    return {k: sorted(v) for k, v in sorted(out.items())}


def log_slope(points):
    """Least-squares slope of strength against log10(sigma_s)."""
    xs = np.log10([p[0] for p in points])
    ys = np.asarray([p[1] for p in points])
    if len(xs) < 2:
        return 0.0
    xc = xs - xs.mean()
    return float((xc * (ys - ys.mean())).sum() / (xc * xc).sum())


def overinvariance_verdicts(records, sigma_s_grid, methods=("irmv1", "vrex"),
                            low="0.1", high="5", threshold=8):
    """Checks on a finished over-invariance scan.

    * ``ordering``: at every sigma_s in the top quartile of the grid the
      seed-averaged strength of the ``low`` group is below the ``high`` group.
    * ``non_increasing``: the per-seed slope of the ``low`` group's strength
      against log sigma_s is <= 0 for at least ``threshold`` seeds.
    """
    grid = sorted(sigma_s_grid)
    top = grid[int(math.floor(0.75 * (len(grid) - 1))):]
    means = {(m, s, g): mu for m, s, g, mu, _ in aggregate(records)}
    verdicts = {}
    for m in methods:
        ordering = {s: (means[(m, s, low)], means[(m, s, high)]) for s in top}
        slopes = {seed: log_slope(pts) for seed, pts in per_seed(records, m, low).items()}
        count, total, ok = sign_test([v <= 0 for v in slopes.values()], threshold)
        verdicts[m] = {
            "ordering_ok": all(lo < hi for lo, hi in ordering.values()),
            "ordering": {f"{s:g}": {"low": lo, "high": hi} for s, (lo, hi) in ordering.items()},
            "non_increasing_ok": ok,
            "non_increasing_count": count,
            "seeds": total,
            "slopes": {str(k): v for k, v in slopes.items()},
        }
    return verdicts


def ucl_effect_verdicts(records, methods=("irmv1", "vrex"), group="0.1", threshold=8):
    """Paired sign test: does ``+divil`` raise the strength of ``group``?"""
    verdicts = {}
    for m in methods:
        before = {(r.seed, r.sigma_s): r.strength for r in records
                  if r.method == m and r.subset_label == group}
        after = {(r.seed, r.sigma_s): r.strength for r in records
                 if r.method == m + "+divil" and r.subset_label == group}
        keys = sorted(before.keys() & after.keys())
        count, total, ok = sign_test([after[k] > before[k] for k in keys], threshold)
        mb = float(np.mean([before[k] for k in keys])) if keys else float("nan")
        ma = float(np.mean([after[k] for k in keys])) if keys else float("nan")
        verdicts[m] = {"increase_count": count, "pairs": total, "passed": ok and ma > mb,
                       "mean_before": mb, "mean_after": ma}
    return verdicts


def write_records_csv(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "seed", "sigma_s", "group", "strength"])
        for r in records:
            w.writerow([r.method, r.seed, repr(r.sigma_s), r.subset_label, repr(r.strength)])


def write_summary_csv(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "sigma_s", "group", "mean_strength", "std_strength"])
        for method, sigma_s, group, mu, sd in aggregate(records):
            w.writerow([method, repr(sigma_s), group, repr(mu), repr(sd)])
