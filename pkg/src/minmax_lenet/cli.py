"""Command-line entry point: ``minmax-lenet {train,attack,analyze,verify-theorem,fetch}``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import LOG_BASES, analyze_params, emit_reports
from .attacks import TABLE_NAMES, TABLE_ORDER, CWConfig, default_attack_config, evaluate_robustness, export_adversarial
from .data import DATA_ROOT_ENV, DEFAULT_NORMS, DatasetError, fetch, load_dataset, normalize
from .model import accuracy, load_checkpoint, save_checkpoint
from .objectives import RegWeights
from .theorem import ToyModelSpec, draw_problem, verify_gradient_bound
from .training import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

ATTACK_CHOICES = {
    "fgsm": "FGSM", "pgd": "PGD", "cw": "CW_L2", "mim": "MIM", "bim-l2": "BIM_L2", "bim-linf": "BIM_Linf",
}

logger = logging.getLogger("minmax_lenet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _nonneg_float(s: str) -> float:
    v = float(s)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {s}")
    return v


def _p1(s: str) -> float:
    v = float(s)
    if not 0 < v <= 0.5:
        raise argparse.ArgumentTypeError(f"p1 must lie in (0, 0.5], got {s}")
    return v


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run control")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded BLAS so reductions run in a fixed order")
    g.add_argument("--threads", type=_positive_int, default=None, help="BLAS thread limit")
    g.add_argument("--config", type=Path, default=None, help="JSON file of flag defaults (keys as flag names)")
    g.add_argument("--out", type=Path, default=None, help="parent directory for the run directory")
    g.add_argument("--data-root", type=Path, default=None, help=f"dataset root (else ${DATA_ROOT_ENV})")
    g.add_argument("-v", "--verbose", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="minmax-lenet", description="Min-Max regularized LeNet experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a LeNet checkpoint")
    p.add_argument("--dataset", choices=("mnist", "cifar10"), default=None)
    p.add_argument("--mode", choices=("standard", "minmax", "adversarial"), default=None)
    p.add_argument("--lambda", dest="lam", type=_nonneg_float, default=None)
    p.add_argument("--mu", type=_nonneg_float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-halving-period", type=_positive_int, default=None)
    p.add_argument("--batch-size", type=_positive_int, default=None)
    p.add_argument("--limit-train", type=_positive_int, default=None, help="use only the first N training samples")
    p.add_argument("--eval-subset", type=int, default=None, help="test samples used for per-epoch accuracy")
    _common(p)

    p = sub.add_parser("attack", help="evaluate a checkpoint under adversarial attacks")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--attack", choices=(*ATTACK_CHOICES, "all"), default=None)
    p.add_argument("--epsilon", type=_nonneg_float, default=None)
    p.add_argument("--steps", type=_positive_int, default=None)
    p.add_argument("--step-size", type=_nonneg_float, default=None)
    p.add_argument("--random-start", action=argparse.BooleanOptionalAction, default=None,
                   help="PGD random start (default on for PGD)")
    p.add_argument("--decay", type=_nonneg_float, default=None, help="MIM momentum decay")
    p.add_argument("--eps-units", choices=("pixel", "normalized"), default=None)
    p.add_argument("--limit", type=_positive_int, default=None, help="attack only the first N test samples")
    p.add_argument("--cw-max-iter", type=_positive_int, default=None)
    p.add_argument("--cw-search-steps", type=_positive_int, default=None)
    p.add_argument("--save-adversarial", action="store_true", default=None)
    _common(p)

    p = sub.add_parser("analyze", help="fuzziness / near-zero report over checkpoints")
    p.add_argument("--checkpoints", nargs="+", type=Path, default=None)
    p.add_argument("--tags", nargs="+", default=None, help="labels for the checkpoints (default: file stems)")
    p.add_argument("--log-base", choices=LOG_BASES, default=None)
    p.add_argument("--bins", type=_positive_int, default=None)
    p.add_argument("--tau", nargs="+", type=float, default=None)
    p.add_argument("--all-conv", action="store_true", default=None, help="both conv layers instead of conv1")
    _common(p)

    p = sub.add_parser("verify-theorem", help="Monte Carlo check of the input-gradient inequality")
    p.add_argument("--p1", nargs="+", type=_p1, default=None)
    p.add_argument("--m", nargs="+", type=_positive_int, default=None)
    p.add_argument("--n", nargs="+", type=_positive_int, default=None)
    p.add_argument("--trials", type=_positive_int, default=None)
    _common(p)

    p = sub.add_parser("fetch", help="download a dataset into the data root")
    p.add_argument("--dataset", choices=("mnist", "cifar10"), default=None)
    _common(p)
    return parser


# built-in defaults, lowest precedence
DEFAULTS = {
    "common": {"seed": 0, "deterministic": False, "threads": None, "out": Path("runs"), "data_root": None,
               "verbose": False},
    "train": {"dataset": "mnist", "mode": "standard", "lam": None, "mu": None, "epochs": None, "lr": None,
              "lr_halving_period": None, "batch_size": 64, "limit_train": None, "eval_subset": 2000},
    "attack": {"checkpoint": None, "attack": "all", "epsilon": 0.3, "steps": None, "step_size": None,
               "random_start": None, "decay": 1.0, "eps_units": "normalized", "limit": None,
               "cw_max_iter": None, "cw_search_steps": None, "save_adversarial": False},
    "analyze": {"checkpoints": None, "tags": None, "log_base": "natural", "bins": 50, "tau": [1e-3, 1e-2],
                "all_conv": False},
    "verify-theorem": {"p1": [0.01, 0.05], "m": [2, 10], "n": [5, 50], "trials": 10_000},
    "fetch": {"dataset": "mnist"},
}


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over built-in defaults."""
    cfg = dict(DEFAULTS["common"])
    cfg.update(DEFAULTS[args.command])
    if args.config is not None:
        try:
            from_file = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object")
        for k, v in from_file.items():
            key = k.replace("-", "_")
            if key == "lambda":
                key = "lam"
            if key not in cfg:
                raise UsageError(f"unknown config key {k!r} for {args.command}")
            cfg[key] = v
    for k, v in vars(args).items():
        if k in ("command", "config"):
            continue
        if v is not None:
            cfg[k] = v
    for k in ("out", "data_root", "checkpoint"):
        if cfg.get(k) is not None:
            cfg[k] = Path(cfg[k])
    if cfg.get("checkpoints"):
        cfg["checkpoints"] = [Path(c) for c in cfg["checkpoints"]]
    return cfg


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def make_run_dir(parent: Path, command: str) -> Path:
    """New ``<command>-<UTC timestamp>`` directory; never reuses an existing one."""
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    base = parent / f"{command}-{stamp}"
    path, k = base, 1
    while True:
        try:
            path.mkdir(parents=True, exist_ok=False)
            return path
        except FileExistsError:
            path = Path(f"{base}-{k}")
            k += 1


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_arrays(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _thread_limits(cfg: dict):
    limit = 1 if cfg["deterministic"] else cfg["threads"]
    if limit is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=limit)


def _load_split(name: str, split: str, cfg: dict):
    d = load_dataset(name, split, cfg["data_root"])
    return normalize(d, DEFAULT_NORMS[name])


def _dataset_for(params) -> str:
    for name, c in (("mnist", 1), ("cifar10", 3)):
        if params.c_in == c:
            return name
    raise DatasetError(f"checkpoint has {params.c_in} input channels; no matching dataset")


def cmd_train(cfg: dict, run_dir: Path, manifest: dict) -> int:
    dataset, mode = cfg["dataset"], cfg["mode"]
    overrides = {"seed": cfg["seed"], "batch_size": cfg["batch_size"], "eval_subset": cfg["eval_subset"]}
    for key in ("epochs", "lr", "lr_halving_period"):
        if cfg[key] is not None:
            overrides[key] = cfg[key]
    if mode == "minmax" or cfg["lam"] is not None or cfg["mu"] is not None:
        base = TrainConfig.defaults(dataset, "minmax").reg
        lam = base.lam if cfg["lam"] is None else cfg["lam"]
        mu = base.mu if cfg["mu"] is None else cfg["mu"]
        if mode != "minmax" and (lam or mu):
            raise UsageError("--lambda/--mu only apply to --mode minmax")
        overrides["reg"] = RegWeights(lam, mu)
    config = TrainConfig.defaults(dataset, mode, **overrides)
    train_set = _load_split(dataset, "train", cfg)
    test_set = _load_split(dataset, "test", cfg)
    if cfg["limit_train"] is not None:
        train_set = train_set.subset(np.arange(min(cfg["limit_train"], len(train_set))))
    manifest["inputs"] = {"train": _hash_arrays(train_set.images, train_set.labels),
                          "test": _hash_arrays(test_set.images, test_set.labels)}
    manifest["resolved_train_config"] = config.to_dict()
    params, log = train(config, train_set, test_set)
    ckpt = save_checkpoint(params, run_dir / "checkpoint.json")
    log.write(run_dir)
    acc = accuracy(params, test_set.images, test_set.labels)
    (run_dir / "metrics.json").write_text(json.dumps({"test_accuracy": acc, "n_test": len(test_set)}, indent=2))
    manifest["artifacts"] += ["checkpoint.json", "loss.csv", "train_summary.json", "metrics.json"]
    manifest["checkpoint_sha256"] = _hash_file(ckpt)
    print(f"test accuracy {acc:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def _attack_configs(cfg: dict, dataset: str) -> list:
    families = [ATTACK_CHOICES[k] for k in ATTACK_CHOICES] if cfg["attack"] == "all" else [ATTACK_CHOICES[cfg["attack"]]]
    families.sort(key=TABLE_ORDER.index)
    eps = cfg["epsilon"]
    frac = 10 if dataset == "mnist" else 4
    out = []
    for fam in families:
        kw = {"seed": cfg["seed"], "pixel_domain": cfg["eps_units"] == "pixel", "momentum_decay": cfg["decay"]}
        if cfg["steps"] is not None:
            kw["steps"] = cfg["steps"]
            # enough total travel to reach the boundary: eps / min(steps, frac)
            kw["step_size"] = eps / min(cfg["steps"], frac)
        if cfg["step_size"] is not None:
            kw["step_size"] = cfg["step_size"]
        if cfg["random_start"] is not None:
            kw["random_start"] = cfg["random_start"] and fam == "PGD"
        if fam == "CW_L2":
            cw = {}
            if cfg["cw_max_iter"] is not None:
                cw["max_iter"] = cfg["cw_max_iter"]
            if cfg["cw_search_steps"] is not None:
                cw["binary_search_steps"] = cfg["cw_search_steps"]
            kw["cw"] = CWConfig(**cw)
        out.append(default_attack_config(fam, dataset, eps, **kw))
    return out


def cmd_attack(cfg: dict, run_dir: Path, manifest: dict) -> int:
    if cfg["checkpoint"] is None:
        raise UsageError("--checkpoint is required")
    if not cfg["checkpoint"].is_file():
        raise DatasetError(f"checkpoint not found: {cfg['checkpoint']}")
    params = load_checkpoint(cfg["checkpoint"])
    dataset = _dataset_for(params)
    test_set = _load_split(dataset, "test", cfg)
    if cfg["limit"] is not None:
        test_set = test_set.subset(np.arange(min(cfg["limit"], len(test_set))))
    manifest["inputs"] = {"checkpoint": _hash_file(cfg["checkpoint"]),
                          "test": _hash_arrays(test_set.images, test_set.labels)}
    configs = _attack_configs(cfg, dataset)
    keep = {} if cfg["save_adversarial"] else None
    report = evaluate_robustness(params.astype(np.float32), test_set, configs,
                                 model_tag=cfg["checkpoint"].stem, keep=keep)
    report.write(run_dir)
    manifest["artifacts"] += ["robustness.json", "robustness.csv"]
    if keep:
        for c in configs:
            name = c.family
            export_adversarial(keep[TABLE_NAMES[name]], c, run_dir / f"adv_{name}")
            manifest["artifacts"].append(f"adv_{name}")
    width = max(len(r.attack) for r in report.rows)
    print(f"{'attack':<{width}}  accuracy  success")
    for r in report.rows:
        print(f"{r.attack:<{width}}  {r.accuracy:8.4f}  {r.success_rate:7.4f}")
    return EXIT_OK


def cmd_analyze(cfg: dict, run_dir: Path, manifest: dict) -> int:
    paths = cfg["checkpoints"]
    if not paths:
        raise UsageError("--checkpoints needs at least one file")
    tags = cfg["tags"] or [p.stem for p in paths]
    if len(tags) != len(paths) or len(set(tags)) != len(tags):
        raise UsageError("--tags must give one distinct tag per checkpoint")
    loaded = []
    for p in paths:
        if not p.is_file():
            raise DatasetError(f"checkpoint not found: {p}")
        loaded.append(load_checkpoint(p))
    shapes = {tuple((k, v.shape) for k, v in sorted(q.arrays.items())) for q in loaded}
    if len(shapes) > 1:
        raise DatasetError("checkpoints have incompatible architectures")
    manifest["inputs"] = {str(p): _hash_file(p) for p in paths}
    reports = [analyze_params(q, t, cfg["log_base"], tuple(cfg["tau"]), cfg["bins"], all_conv=cfg["all_conv"])
               for q, t in zip(loaded, tags)]
    files = emit_reports(reports, run_dir)
    manifest["artifacts"] += sorted(f.name for f in files.values())
    for r in reports:
        nz = "  ".join(f"near0<{k}={v:.4f}" for k, v in r.near_zero.items())
        print(f"{r.model_tag}: fuzziness={r.fuzziness:.6f} ({r.log_base})  {nz}")
    return EXIT_OK


def cmd_verify_theorem(cfg: dict, run_dir: Path, manifest: dict) -> int:
    p1s = [float(v) for v in cfg["p1"]]
    if any(not 0 < v <= 0.5 for v in p1s):
        raise UsageError("p1 must lie in (0, 0.5]")
    if int(cfg["trials"]) < 1:
        raise UsageError("--trials must be >= 1")
    ok = True
    summary = []
    for mi, m in enumerate(cfg["m"]):
        for ni, n in enumerate(cfg["n"]):
            x, y = draw_problem(m, n, [cfg["seed"], mi, ni])
            for pi, p1 in enumerate(p1s):
                res = verify_gradient_bound(ToyModelSpec(m, n, "uniform01"), ToyModelSpec(m, n, "bernoulli", p1),
                                            x, y, int(cfg["trials"]), seed=int(cfg["seed"]) * 1_000_003 + mi * 9973 + ni * 101 + pi)
                stem = f"theorem_m{m}_n{n}_p{p1:g}"
                res.write(run_dir, stem)
                manifest["artifacts"] += [f"{stem}.csv", f"{stem}.json"]
                if p1 == 0.5:
                    # equality regime: the sides must be indistinguishable in both directions
                    passed = res.max_abs_z < 3
                    kind = "equality"
                else:
                    passed = res.violations == 0
                    kind = "inequality"
                ok &= passed
                summary.append({"m": m, "n": n, "p1": p1, "check": kind, "violations": res.violations,
                                "max_abs_z": res.max_abs_z, "passed": passed})
                print(f"m={m:<3d} n={n:<3d} p1={p1:<5g} {kind:<10s} violations={res.violations:<3d} "
                      f"max|z|={res.max_abs_z:6.2f} {'ok' if passed else 'FAIL'}")
    (run_dir / "theorem_summary.json").write_text(json.dumps({"all_passed": ok, "cases": summary}, indent=2))
    manifest["artifacts"].append("theorem_summary.json")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_fetch(cfg: dict, run_dir: Path, manifest: dict) -> int:
    where = fetch(cfg["dataset"], cfg["data_root"])
    print(f"{cfg['dataset']} ready in {where}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "analyze": cmd_analyze,
            "verify-theorem": cmd_verify_theorem, "fetch": cmd_fetch}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve(args)
    except UsageError as e:
        print(f"minmax-lenet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if cfg["verbose"] else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    run_dir = make_run_dir(cfg["out"], args.command)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    manifest = {
        "schema": "run-manifest/1",
        "version": __version__,
        "command_line": ["minmax-lenet", *(sys.argv[1:] if argv is None else argv)],
        "command": args.command,
        "config": _jsonable(cfg),
        "seeds": {"seed": cfg["seed"]},
        "started_utc": started,
        "artifacts": [],
    }
    try:
        with _thread_limits(cfg):
            code = COMMANDS[args.command](cfg, run_dir, manifest)
    except UsageError as e:
        print(f"minmax-lenet: error: {e}", file=sys.stderr)
        code = EXIT_USAGE
    except (DatasetError, FileNotFoundError, OSError) as e:
        print(f"minmax-lenet: data error: {e}", file=sys.stderr)
        code = EXIT_DATA
    except (FloatingPointError, ArithmeticError) as e:
        print(f"minmax-lenet: numerical failure: {e}", file=sys.stderr)
        code = EXIT_NUMERIC
    except ValueError as e:
        print(f"minmax-lenet: error: {e}", file=sys.stderr)
        code = EXIT_USAGE
    manifest["finished_utc"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    manifest["exit_code"] = code
    manifest["run_dir"] = str(run_dir)
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"run directory: {run_dir}", file=sys.stderr)
    return code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
