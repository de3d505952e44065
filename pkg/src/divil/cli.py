"""Command-line entry point.

    divil gradcheck [--out DIR]
    divil synth overinvariance|ucl-effect [--config FILE] [--out DIR] [--seeds 0,1] ...
    divil cmnist [--config FILE] [--out DIR] [--method irmv1] [--divil] ...

A TOML (or JSON) config holds one flat table per command (``[synth]``,
``[cmnist]``, ``[gradcheck]``); flags override file values.  Every command
validates its whole configuration before computing anything and writes a
``manifest.json`` with the resolved config and SHA-256 of each artifact.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, checks, kernels
from .data import CmnistSpec, build_cmnist, load_mnist, write_dataset_csv
from .models import cmnist_spec, save_checkpoint
from .probes import (
    GridSpec,
    _synthetic_envs,
    default_sigma_s_grid,
    overinvariance_verdicts,
    run_overinvariance_scan,
    run_ucl_effect_scan,
    ucl_effect_verdicts,
    write_records_csv,
    write_summary_csv,
)
from .training import METHODS, cmnist_train_config, synthetic_train_config, train, write_history_csv

MNIST_ENV = "DIVIL_MNIST_DIR"
METHOD_ALIASES = {"irm": "irmv1", "rex": "vrex"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config


@dataclass
class SynthSettings:
    seeds: list = field(default_factory=lambda: list(range(10)))
    methods: list = field(default_factory=lambda: ["irmv1", "vrex"])
    sigma_s: list = field(default_factory=list)  # empty: default grid
    sigma_s_points: int = 15
    n: int = 2000
    train_s: list = field(default_factory=lambda: [0.2, 0.4])
    test_s: float = 0.7
    beta: float = 0.1
    mask: float = 0.5
    augment_prob: float = 0.2
    mask_mode: str = "prefix"
    lam: float = 10.0
    lr: float = 1e-3
    epochs: int = 500
    weight_decay: float = 0.0
    anneal_iters: int = 0
    workers: int = 0
    snapshot: bool = False


@dataclass
class CmnistSettings:
    seeds: list = field(default_factory=lambda: list(range(5)))
    method: str = "irmv1"
    divil: bool = False
    beta: float = 0.1
    mask: float = 0.5
    augment_prob: float = 0.2
    mask_mode: str = "prefix"
    lam: float = -1.0  # negative: method default
    lr: float = -1.0
    weight_decay: float = -1.0
    anneal_iters: int = -1
    epochs: int = -1
    hidden: int = 390
    ucl_batch: int = 2048
    n_train: int = 50000
    eval_every: int = 100
    data_dir: str = ""
    checkpoint: bool = False
    snapshot: bool = False


@dataclass
class GradcheckSettings:
    points: int = 5
    seed: int = 0
    irm_models: int = 20


SETTINGS = {"synth": SynthSettings, "cmnist": CmnistSettings, "gradcheck": GradcheckSettings}
# config-file spellings that differ from the field names
KEY_ALIASES = {"lambda": "lam"}


def load_config_file(path):
    """Parse a TOML or JSON config into ``{table: {key: value}}``."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e.strerror})") from None
    try:
        if path.endswith(".json"):
            data = json.loads(raw.decode("utf-8"))
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    except tomllib.TOMLDecodeError as e:
        lineno, colno = getattr(e, "lineno", None), getattr(e, "colno", None)
        if lineno is None:
            raise ConfigError(f"{path}: {e}") from None
        raise ConfigError(f"{path}: line {lineno} column {colno}: {getattr(e, 'msg', e)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table")
    for table, body in data.items():
        if table not in SETTINGS:
            raise ConfigError(f"{path}: unknown table [{table}]; expected one of {sorted(SETTINGS)}")
        if not isinstance(body, dict):
            raise ConfigError(f"{path}: [{table}] must be a table")
    return data


def _coerce(table, key, value, default):
    where = f"[{table}] {key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return list(value)
    return value


def resolve_settings(command, file_table, overrides):
    """Defaults <- config table <- flag overrides, with type checks."""
    cls = SETTINGS[command]
    base = cls()
    known = {f.name for f in fields(cls)}
    values = {}
    for key, value in (file_table or {}).items():
        name = KEY_ALIASES.get(key, key)
        if name not in known:
            raise ConfigError(f"[{command}] unknown key {key!r}; expected one of {sorted(known)}")
        values[name] = _coerce(command, key, value, getattr(base, name))
    for name, value in overrides.items():
        if value is not None:
            values[name] = value
    return replace(base, **values)


def parse_seeds(text):
    """``"0,1,4"`` or ``"0-4"`` (inclusive) or a mix."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds or min(seeds) < 0:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}")
    return seeds


def _method_name(text):
    base, plus, suffix = text.partition("+")
    base = METHOD_ALIASES.get(base, base)
    if base not in METHODS or suffix not in ("", "divil"):
        raise ConfigError(f"unknown method {text!r}; expected one of {METHODS} (optionally +divil)")
    return base + plus + suffix


def _check_seeds(seeds, where):
    if not seeds or any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in seeds):
        raise ConfigError(f"{where}: seeds must be a non-empty list of non-negative integers")


# ---------------------------------------------------------------------------
# artifacts


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, allow_nan=True)
        f.write("\n")


def write_manifest(out_dir, command, config, seeds, artifacts):
    """Resolved config, seeds and checksums of every artifact (relative paths)."""
    entries = {}
    for rel in sorted(artifacts):
        entries[rel] = _sha256(os.path.join(out_dir, rel))
    manifest = {
        "command": command,
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
        "config": config,
        "seeds": list(seeds),
        "artifacts": entries,
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def write_timing(out_dir, seconds, per_seed=None):
    """Wall-clock record kept outside the manifest so reruns stay byte-identical."""
    obj = {"wall_seconds": round(seconds, 3)}
    if per_seed:
        obj["per_seed"] = {str(k): round(v, 3) for k, v in per_seed.items()}
    _write_json(os.path.join(out_dir, "timing.json"), obj)


def _prepare_out(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"--out {path}: {e.strerror}") from None
    if not os.access(path, os.W_OK):
        raise ConfigError(f"--out {path}: not writable")
    return path


def _default_workers():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args, file_cfg):
    st = resolve_settings("gradcheck", file_cfg.get("gradcheck"), {})
    results = [checks.run_case(name, st.points, st.seed) for name in checks.CASES]
    results.append(checks.run_irm_second_order(st.irm_models, st.seed))
    width = max(len(r.name) for r in results)
    print(f"{'op':<{width}}  {'max_rel_err':>11}  {'tol':>7}  status")
    for r in results:
        print(f"{r.name:<{width}}  {r.max_rel_err:11.3e}  {r.tolerance:7.0e}  "
              f"{'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if args.out:
        out = _prepare_out(args.out)
        with open(os.path.join(out, "gradcheck.csv"), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["op", "max_rel_err", "tolerance", "passed"])
            for r in results:
                w.writerow([r.name, repr(r.max_rel_err), repr(r.tolerance), int(r.passed)])
        write_manifest(out, "gradcheck", asdict(st), [st.seed], ["gradcheck.csv"])
    if failed:
        print(f"gradcheck FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"gradcheck passed ({len(results)} checks)")
    return 0


# ---------------------------------------------------------------------------
# synth


def _synth_overrides(args):
    return {
        "seeds": args.seeds,
        "methods": args.methods.split(",") if args.methods else None,
        "beta": args.beta,
        "mask": args.mask,
        "lam": args.lam,
        "epochs": args.epochs,
        "n": args.n,
        "sigma_s_points": args.sigma_s_points,
        "workers": args.workers,
        "snapshot": True if args.snapshot else None,
        "mask_mode": args.mask_mode,
    }


def build_grid(st, scan):
    """Validate synth settings and turn them into a ``GridSpec``."""
    _check_seeds(st.seeds, "[synth]")
    methods = tuple(_method_name(m) for m in st.methods)
    if scan == "ucl-effect" and any("+" in m for m in methods):
        raise ConfigError("[synth] ucl-effect pairs each method with +divil itself; list base methods")
    if st.sigma_s:
        sigma = tuple(float(v) for v in st.sigma_s)
    elif scan == "ucl-effect":
        sigma = (default_sigma_s_grid()[-1],)
    else:
        if st.sigma_s_points < 1:
            raise ConfigError("[synth] sigma_s_points must be >= 1")
        sigma = default_sigma_s_grid(st.sigma_s_points)
    overrides = dict(beta=st.beta, mask_fraction=st.mask, augment_prob=st.augment_prob,
                     mask_mode=st.mask_mode, lam=st.lam, lr=st.lr, epochs=st.epochs,
                     weight_decay=st.weight_decay, anneal_iters=st.anneal_iters)
    try:
        for m in methods:
            base, _, suffix = m.partition("+")
            synthetic_train_config(base, divil=bool(suffix), **overrides)
        grid = GridSpec(sigma_s=sigma, seeds=tuple(st.seeds), methods=methods, n=st.n,
                        train_s=tuple(float(s) for s in st.train_s), test_s=st.test_s,
                        train_overrides=overrides)
        _synthetic_envs(replace(grid, n=2), sigma[0], 0)
    except ValueError as e:
        raise ConfigError(f"[synth] {e}") from None
    return grid


def cmd_synth(args, file_cfg):
    st = resolve_settings("synth", file_cfg.get("synth"), _synth_overrides(args))
    grid = build_grid(st, args.scan)
    out = _prepare_out(args.out)
    t0 = time.perf_counter()
    workers = st.workers or _default_workers()
    if args.scan == "overinvariance":
        records = run_overinvariance_scan(grid, workers=workers)
        verdicts = overinvariance_verdicts(records, grid.sigma_s, methods=grid.methods)
    else:
        records = run_ucl_effect_scan(grid, workers=workers)
        verdicts = ucl_effect_verdicts(records, methods=grid.methods)
    write_records_csv(os.path.join(out, "records.csv"), records)
    write_summary_csv(os.path.join(out, "summary.csv"), records)
    _write_json(os.path.join(out, "summary.json"),
                {"scan": args.scan, "sigma_s": list(grid.sigma_s), "verdicts": verdicts})
    artifacts = ["records.csv", "summary.csv", "summary.json"]
    if st.snapshot:
        train_envs, test = _synthetic_envs(grid, grid.sigma_s[0], grid.seeds[0])
        write_dataset_csv(os.path.join(out, "dataset.csv"), train_envs + [test])
        artifacts.append("dataset.csv")
    config = {"scan": args.scan, **asdict(st), "workers": None}
    write_manifest(out, f"synth {args.scan}", config, grid.seeds, artifacts)
    write_timing(out, time.perf_counter() - t0)
    for method, v in verdicts.items():
        print(f"{method}: {json.dumps(v, sort_keys=True)}")
    return 0


# ---------------------------------------------------------------------------
# cmnist


def _cmnist_overrides(args):
    return {
        "seeds": args.seeds,
        "method": args.method,
        "divil": True if args.divil else None,
        "beta": args.beta,
        "mask": args.mask,
        "lam": args.lam,
        "epochs": args.epochs,
        "mask_mode": args.mask_mode,
        "n_train": args.n_train,
        "data_dir": args.data_dir,
        "checkpoint": True if args.checkpoint else None,
        "snapshot": True if args.snapshot else None,
    }


def cmnist_configs(st):
    """Validated ``TrainConfig`` per seed."""
    _check_seeds(st.seeds, "[cmnist]")
    method = _method_name(st.method)
    base, _, suffix = method.partition("+")
    divil = st.divil or bool(suffix)
    overrides = dict(beta=st.beta, mask_fraction=st.mask, augment_prob=st.augment_prob,
                     mask_mode=st.mask_mode, ucl_batch=st.ucl_batch, eval_every=st.eval_every)
    for key, name in (("lam", "lam"), ("lr", "lr"), ("weight_decay", "weight_decay"),
                      ("anneal_iters", "anneal_iters"), ("epochs", "epochs")):
        value = getattr(st, key)
        if value >= 0:
            overrides[name] = value
    try:
        cfgs = [cmnist_train_config(base, divil=divil, seed=s, **overrides) for s in st.seeds]
        CmnistSpec(n_train=st.n_train)
    except ValueError as e:
        raise ConfigError(f"[cmnist] {e}") from None
    if st.hidden < 1 or st.n_train < 2:
        raise ConfigError("[cmnist] hidden and n_train must be positive")
    return base + ("+divil" if divil else ""), cfgs


def _mnist_dir(st):
    path = st.data_dir or os.environ.get(MNIST_ENV, "")
    if not path:
        raise ConfigError(f"MNIST directory not given: pass --data-dir or set {MNIST_ENV}")
    if not os.path.isdir(path):
        raise ConfigError(f"MNIST directory {path!r} does not exist")
    return path


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def cmd_cmnist(args, file_cfg):
    st = resolve_settings("cmnist", file_cfg.get("cmnist"), _cmnist_overrides(args))
    label, cfgs = cmnist_configs(st)
    data_dir = _mnist_dir(st)
    out = _prepare_out(args.out)
    images, digits = load_mnist(data_dir)
    spec = cmnist_spec(hidden=st.hidden)
    rows, artifacts, per_seed = [], [], {}
    t0 = time.perf_counter()
    for cfg in cfgs:
        t_seed = time.perf_counter()
        envs = build_cmnist(images, digits, CmnistSpec(n_train=st.n_train, seed=cfg.seed))
        train_envs, test, gray = envs[:-2], envs[-2], envs[-1]
        if st.snapshot and cfg is cfgs[0]:
            write_dataset_csv(os.path.join(out, "dataset.csv"), envs)
            artifacts.append("dataset.csv")
        params, hist = train(spec, train_envs, cfg, eval_sets=train_envs + [test, gray],
                             callback=_progress(cfg, args.quiet))
        hname = f"history_seed{cfg.seed}.csv"
        write_history_csv(os.path.join(out, hname), hist)
        artifacts.append(hname)
        n_tr = sum(len(e) for e in train_envs)
        train_acc = sum(hist.final_eval(e.env_id) * len(e) for e in train_envs) / n_tr
        rows.append({"method": label, "seed": cfg.seed, "train_acc": train_acc,
                     "test_acc": hist.final_eval(test.env_id),
                     "gray_acc": hist.final_eval(gray.env_id)})
        if st.checkpoint:
            ck = os.path.join("checkpoints", f"seed{cfg.seed}")
            save_checkpoint(os.path.join(out, ck), params, cfg.seed, cfg.epochs)
            artifacts.append(os.path.join(ck, "manifest.json"))
        per_seed[cfg.seed] = time.perf_counter() - t_seed
        if not args.quiet:
            r = rows[-1]
            print(f"{label} seed {cfg.seed}: train {r['train_acc']:.4f} "
                  f"test {r['test_acc']:.4f} gray {r['gray_acc']:.4f}", flush=True)

    with open(os.path.join(out, "seeds.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "seed", "train_acc", "test_acc", "gray_acc"])
        for r in rows:
            w.writerow([r["method"], r["seed"], repr(r["train_acc"]), repr(r["test_acc"]),
                        repr(r["gray_acc"])])
    summary = {"method": label, "seeds": [r["seed"] for r in rows]}
    with open(os.path.join(out, "summary.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "split", "mean_acc", "std_acc"])
        for split in ("train", "test", "gray"):
            mu, sd = _mean_std([r[f"{split}_acc"] for r in rows])
            w.writerow([label, split, repr(mu), repr(sd)])
            summary[split] = {"mean": mu, "std": sd}
    summary["per_seed"] = rows
    summary["train_config"] = cfgs[0].to_dict()
    _write_json(os.path.join(out, "results.json"), summary)
    artifacts += ["seeds.csv", "summary.csv", "results.json"]
    config = {**asdict(st), "data_dir": None, "method": label}
    write_manifest(out, "cmnist", config, st.seeds, artifacts)
    write_timing(out, time.perf_counter() - t0, per_seed)
    for split in ("train", "test", "gray"):
        s = summary[split]
        print(f"{label} {split}: {100 * s['mean']:.2f} +/- {100 * s['std']:.2f}")
    return 0


def _progress(cfg, quiet):
    if quiet:
        return None
    every = max(1, cfg.epochs // 10)

    def cb(step, bd):
        if step % every == 0:
            print(f"  seed {cfg.seed} step {step}: pred {bd.pred:.4f} il {bd.il:.4g} "
                  f"ucl {bd.ucl:.4f}", flush=True)
    return cb


# ---------------------------------------------------------------------------
# argument parsing


def _unit_float(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def _nonneg_float(text):
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"{text} is negative")
    return v


def _add_common(p):
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--out", help="artifact directory")


def _add_train_flags(p):
    p.add_argument("--seeds", type=parse_seeds, help="comma list or ranges, e.g. 0,1 or 0-4")
    p.add_argument("--beta", type=_nonneg_float, help="contrastive loss weight")
    p.add_argument("--mask", type=_unit_float, help="feature mask fraction p")
    p.add_argument("--lambda", dest="lam", type=_nonneg_float, help="invariance penalty weight")
    p.add_argument("--epochs", type=int)
    p.add_argument("--mask-mode", choices=("prefix", "dropout"))
    p.add_argument("--snapshot", action="store_true", help="also write dataset.csv")


def build_parser():
    ap = argparse.ArgumentParser(prog="divil", description="Over-invariance experiments.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    _add_common(g)

    s = sub.add_parser("synth", help="synthetic strength scans")
    s.add_argument("scan", choices=("overinvariance", "ucl-effect"))
    _add_common(s)
    _add_train_flags(s)
    s.add_argument("--methods", help="comma list, e.g. irmv1,vrex")
    s.add_argument("--method", dest="methods", help="alias of --methods")
    s.add_argument("--n", type=int, help="samples per configuration")
    s.add_argument("--sigma-s-points", type=int)
    s.add_argument("--workers", type=int, help="process pool size (default: all cores)")

    c = sub.add_parser("cmnist", help="ColoredMNIST experiment")
    _add_common(c)
    _add_train_flags(c)
    c.add_argument("--method", help="erm, irmv1 (irm), vrex or fishr")
    c.add_argument("--divil", action="store_true", help="add the contrastive terms")
    c.add_argument("--data-dir", help=f"MNIST IDX directory (default: ${MNIST_ENV})")
    c.add_argument("--n-train", type=int, help="rows used for training environments")
    c.add_argument("--checkpoint", action="store_true", help="save final parameters")
    c.add_argument("--quiet", action="store_true")
    return ap


COMMANDS = {"gradcheck": cmd_gradcheck, "synth": cmd_synth, "cmnist": cmd_cmnist}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command != "gradcheck" and not args.out:
        args.out = os.path.join("runs", args.command if args.command != "synth" else args.scan)
    try:
        file_cfg = load_config_file(args.config) if args.config else {}
        return COMMANDS[args.command](args, file_cfg)
    except ConfigError as e:
        print(f"divil: config error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as e:
        print(f"divil: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
