"""Command-line entry point.

Every command resolves its configuration as built-in defaults, overridden by
``--config FILE`` (flat ``key = value`` lines), overridden by command-line
flags. The resolved configuration is written to ``manifest.json`` in the
output directory; ``advgdro replay manifest.json`` re-runs it.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from . import convergence as C
from . import data as D
from . import evaluation as E
from . import model as M
from .attack import DEFAULT_EPSILON, AttackConfig
from .errors import AdvGDROError, ComparisonError, ConfigError, DataError, ParseError
from .tensorcore import derive_seeds, make_rng
from .trainers import ADVERSARIAL, GROUP_DRO, METHODS, TrainConfig, train

log = logging.getLogger("advgdro")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


# ---------------------------------------------------------------------------
# value parsers


def parse_fraction(text) -> float:
    """Accept ``0.0078`` as well as exact fractions such as ``2/255``."""
    try:
        return float(Fraction(str(text).strip()))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number or fraction: {text!r}") from None


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def parse_int_list(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    t = str(text).strip()
    if t.lower() in ("", "none", "linear"):
        return []
    try:
        return [int(v) for v in t.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}") from None


def parse_sizes(text):
    sizes = parse_int_list(text)
    if len(sizes) != 4:
        raise argparse.ArgumentTypeError(f"need four group sizes, got {text!r}")
    return sizes


def parse_str_list(text):
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    return [v for v in str(text).split(",") if v]


# ---------------------------------------------------------------------------
# option tables: name -> (parser, default, help)

GEN_OPTIONS = {
    "out": (str, None, "output directory"),
    "preset": (str, "waterbirds-analog", "group-size preset"),
    "scale": (float, 1.0, "multiply every group size by this factor (rounded)"),
    "seed": (int, 0, "generator seed"),
    "core_dims": (int, 2, "label-informative feature count"),
    "spurious_dims": (int, 2, "attribute-informative feature count"),
    "noise_dims": (int, 4, "pure-noise feature count"),
    "core_strength": (float, 1.0, "label signal strength"),
    "spurious_strength": (float, 2.0, "attribute signal strength"),
    "train_sizes": (parse_sizes, None, "override train group sizes a,b,c,d"),
    "val_sizes": (parse_sizes, None, "override val group sizes"),
    "test_sizes": (parse_sizes, None, "override test group sizes"),
}

TRAIN_OPTIONS = {
    "data": (str, None, "directory holding train.csv/val.csv/test.csv"),
    "out": (str, None, "output directory"),
    "method": (str, "erm", f"one of {', '.join(METHODS)}"),
    "perturb_mode": (str, None, "batch or group (adversarial methods; default batch)"),
    "eps": (parse_fraction, None, "L-inf radius, e.g. 2/255 (adversarial methods)"),
    "pgd_steps": (int, None, "PGD steps K (adversarial methods; default 5)"),
    "eta_delta": (float, None, "PGD step size (adversarial methods; default 0.01)"),
    "sigma": (parse_fraction, None, "initial noise std (adversarial methods; default eps^2)"),
    "normalize_group_weight": (parse_bool, None, "scale group-mode steps by q_g*m (extension)"),
    "clamp_domain": (parse_bool, False, "clamp x+delta to [0,1]"),
    "eta_q": (float, None, "group weight rate (DRO methods; default 0.01)"),
    "eta_theta": (float, 0.1, "SGD rate"),
    "momentum": (float, 0.0, "SGD momentum"),
    "steps": (int, 1000, "training steps T"),
    "batch_size": (int, 128, "batch size"),
    "seed": (int, 0, "root seed"),
    "eval_every": (int, 100, "steps between validation passes"),
    "sampling": (str, "uniform_group", "uniform_group or mixture_batch"),
    "hidden": (parse_int_list, [16], "hidden layer widths, e.g. 16,16; 'none' for linear"),
    "activation": (str, "relu", "relu, tanh or identity"),
    "eval_eps": (parse_fraction, None, "evaluation attack radius (default: training eps, else 2/255)"),
    "eval_pgd_steps": (int, None, "evaluation PGD steps (default: training value, else 5)"),
    "eval_eta_delta": (float, None, "evaluation PGD step size (default: training value, else 0.01)"),
    "eval_sigma": (parse_fraction, None, "evaluation initial noise std (default eval_eps^2)"),
}

ATTACK_KEYS = ("perturb_mode", "eps", "pgd_steps", "eta_delta", "sigma", "normalize_group_weight")

COMPARE_OPTIONS = {
    **{k: v for k, v in TRAIN_OPTIONS.items() if k not in ("method", "perturb_mode", "eta_q")},
    "data": (str, None, "dataset directory (train mode)"),
    "runs": (parse_str_list, None, "comma-separated completed run directories (load mode)"),
    "eta_q": (float, 0.01, "group weight rate for the DRO runs"),
    "eps": (parse_fraction, DEFAULT_EPSILON, "training L-inf radius for the adversarial runs"),
    "pgd_steps": (int, 5, "PGD steps"),
    "eta_delta": (float, 0.01, "PGD step size"),
    "sigma": (parse_fraction, None, "initial noise std (default eps^2)"),
    "normalize_group_weight": (parse_bool, False, "scale group-mode steps by q_g*m (extension)"),
    "jobs": (int, 1, "train the runs in this many processes"),
}

CONV_OPTIONS = {
    "out": (str, None, "output directory"),
    "m": (int, 2, "number of groups"),
    "T_grid": (parse_int_list, [100, 1000, 10000], "comma-separated step counts"),
    "replicates": (int, 20, "independent runs per T"),
    "seed": (int, 0, "root seed"),
    "eps": (parse_fraction, 0.1, "L-inf radius"),
    "radius": (float, 1.0, "theta ball radius B_theta"),
    "n_per_group": (int, 200, "examples per group"),
    "d": (int, 4, "feature dimension"),
    "batch_size": (int, 8, "batch size"),
    "eta_theta": (float, None, "theta rate (default scales as 1/sqrt(T))"),
    "eta_q": (float, None, "group rate (default scales as 1/sqrt(T))"),
}

EVAL_OPTIONS = {
    "checkpoint": (str, None, "checkpoint file"),
    "data": (str, None, "dataset directory"),
    "split": (str, "test", "split to score"),
    "out": (str, None, "JSON report path"),
    "metrics_log": (str, None, "CSV file to append the report row to"),
    "seed": (int, 0, "seed for the evaluation attack"),
    "eval_eps": (parse_fraction, DEFAULT_EPSILON, "attack radius (0 disables)"),
    "eval_pgd_steps": (int, 5, "PGD steps"),
    "eval_eta_delta": (float, 0.01, "PGD step size"),
    "eval_sigma": (parse_fraction, None, "initial noise std (default eval_eps^2)"),
}

EXPORT_OPTIONS = {
    "checkpoint": (str, None, "checkpoint file"),
    "kind": (str, "representations", "representations or first-layer"),
    "data": (str, None, "dataset directory (representations)"),
    "split": (str, "test", "split to export"),
    "out": (str, None, "output CSV"),
    "seed": (int, 0, "seed for the perturbed copy"),
    "eval_eps": (parse_fraction, None, "also export perturbed inputs at this radius"),
    "eval_pgd_steps": (int, 5, "PGD steps"),
    "eval_eta_delta": (float, 0.01, "PGD step size"),
    "eval_sigma": (parse_fraction, None, "initial noise std (default eval_eps^2)"),
}

COMMANDS = {}


def command(name, options, help_text):
    def deco(fn):
        COMMANDS[name] = (fn, options, help_text)
        return fn
    return deco


# ---------------------------------------------------------------------------
# config resolution


def read_config_file(path) -> dict:
    """Parse flat ``key = value`` text; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(options: dict, file_values: dict, flag_values: dict) -> tuple[dict, set]:
    """Merge defaults < config file < flags. Returns (config, keys set explicitly)."""
    unknown = sorted(set(file_values) - set(options))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    conf = {k: spec[1] for k, spec in options.items()}
    explicit = set()
    for key, raw in file_values.items():
        try:
            conf[key] = options[key][0](raw)
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise ConfigError(f"config key {key}: {exc}") from None
        explicit.add(key)
    for key, value in flag_values.items():
        if value is not None:
            conf[key] = value
            explicit.add(key)
    return conf, explicit


def _require(conf, *keys):
    for k in keys:
        if conf.get(k) in (None, ""):
            raise ConfigError(f"--{k.replace('_', '-')} is required")


def _attack_from(conf, prefix="", mode="batch", defaults=None):
    eps = conf[f"{prefix}eps"]
    sigma = conf[f"{prefix}sigma"]
    return AttackConfig(
        epsilon=eps,
        eta_delta=conf[f"{prefix}eta_delta"],
        steps=conf[f"{prefix}pgd_steps"],
        sigma=eps ** 2 if sigma is None else sigma,
        mode=mode,
        clamp_domain=bool(conf.get("clamp_domain", False)),
        normalize_group_weight=bool(conf.get("normalize_group_weight") or False),
    )


def materialize_train(conf: dict, explicit: set) -> dict:
    """Fill method-dependent defaults and reject options the method does not take."""
    method = conf["method"]
    if method not in METHODS:
        raise ConfigError(f"--method must be one of {', '.join(METHODS)}")
    if method not in ADVERSARIAL:
        given = [k for k in ATTACK_KEYS if k in explicit]
        if given:
            raise ConfigError(f"--method {method} does not take --{given[0].replace('_', '-')}")
    else:
        conf["perturb_mode"] = conf["perturb_mode"] or "batch"
        conf["eps"] = DEFAULT_EPSILON if conf["eps"] is None else conf["eps"]
        conf["pgd_steps"] = 5 if conf["pgd_steps"] is None else conf["pgd_steps"]
        conf["eta_delta"] = 0.01 if conf["eta_delta"] is None else conf["eta_delta"]
        conf["sigma"] = conf["eps"] ** 2 if conf["sigma"] is None else conf["sigma"]
        conf["normalize_group_weight"] = bool(conf["normalize_group_weight"])
        if method == "adv_erm" and conf["perturb_mode"] != "batch":
            raise ConfigError("adv_erm has no group weights; --perturb-mode must be batch")
    if method not in GROUP_DRO:
        if "eta_q" in explicit:
            raise ConfigError(f"--method {method} does not take --eta-q")
    else:
        conf["eta_q"] = 0.01 if conf["eta_q"] is None else conf["eta_q"]
    _fill_eval_attack(conf)
    return conf


def _fill_eval_attack(conf):
    if conf.get("eval_eps") is None:
        conf["eval_eps"] = conf["eps"] if conf.get("eps") is not None else DEFAULT_EPSILON
    if conf.get("eval_pgd_steps") is None:
        conf["eval_pgd_steps"] = conf["pgd_steps"] if conf.get("pgd_steps") is not None else 5
    if conf.get("eval_eta_delta") is None:
        conf["eval_eta_delta"] = conf["eta_delta"] if conf.get("eta_delta") is not None else 0.01
    if conf.get("eval_sigma") is None:
        conf["eval_sigma"] = conf["eval_eps"] ** 2


def train_config_from(conf: dict) -> TrainConfig:
    method = conf["method"]
    attack = _attack_from(conf, mode=conf["perturb_mode"]) if method in ADVERSARIAL else None
    eval_attack = _attack_from(conf, prefix="eval_", mode="batch")
    eval_attack = AttackConfig(**{**eval_attack.as_dict(), "normalize_group_weight": False})
    return TrainConfig(
        method=method,
        eta_theta=conf["eta_theta"],
        total_steps=conf["steps"],
        batch_size=conf["batch_size"],
        attack=attack,
        eta_q=conf["eta_q"] if method in GROUP_DRO else None,
        seed=conf["seed"],
        eval_every=conf["eval_every"],
        sampling=conf["sampling"],
        hidden=tuple(conf["hidden"]),
        activation=conf["activation"],
        momentum=conf["momentum"],
        eval_attack=eval_attack,
    ).validate()


# ---------------------------------------------------------------------------
# manifests and small writers


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _jsonable(value):
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def write_manifest(out_dir: Path, command_name: str, conf: dict, artifacts, started: str, extra=None):
    conf = _jsonable(conf)
    digest = hashlib.sha256(json.dumps([command_name, conf], sort_keys=True).encode()).hexdigest()[:12]
    manifest = {
        "run_id": f"{command_name}-{digest}",
        "command": command_name,
        "config": conf,
        "seed": conf.get("seed"),
        "artifacts": sorted(str(Path(a).relative_to(out_dir)) for a in artifacts),
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return Path(path)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def append_metrics_row(path, report: E.MetricsReport, prefix_header=(), prefix=()):
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(list(prefix_header) + report.csv_header())
        w.writerow(list(prefix) + [_fmt(v) for v in report.csv_row()])
    return path


# ---------------------------------------------------------------------------
# gen-data


@command("gen-data", GEN_OPTIONS, "generate a synthetic spurious-correlation dataset")
def cmd_gen_data(conf: dict) -> int:
    _require(conf, "out")
    if conf["preset"] != "waterbirds-analog":
        raise ConfigError(f"unknown preset {conf['preset']!r}")
    if not conf["scale"] > 0:
        raise ConfigError("--scale must be positive")
    started = _now()
    base = D.SpuriousSpec(core_dims=conf["core_dims"], spurious_dims=conf["spurious_dims"],
                          noise_dims=conf["noise_dims"], core_strength=conf["core_strength"],
                          spurious_strength=conf["spurious_strength"], seed=conf["seed"])
    spec = base.scaled(conf["scale"]) if conf["scale"] != 1.0 else base
    sizes = dict(spec.n_per_group)
    for split in D.SPLITS:
        if conf[f"{split}_sizes"] is not None:
            sizes[split] = tuple(conf[f"{split}_sizes"])
    spec = D.SpuriousSpec(sizes, spec.core_dims, spec.spurious_dims, spec.noise_dims, spec.core_strength,
                          spec.spurious_strength, spec.seed)
    out = Path(conf["out"])
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    null_attr = spec.spurious_strength == 0 or spec.spurious_dims == 0
    for split, ds in D.generate(spec).items():
        artifacts += D.save(ds, out / f"{split}.csv", {
            "generator": spec.as_dict(), "seed": spec.seed, "preset": conf["preset"], "scale": conf["scale"],
            "null_attribute": null_attr,
        })
    artifacts.append(out / "manifest.json")
    write_manifest(out, "gen-data", conf, artifacts, started,
                   {"null_attribute": null_attr, "group_sizes": {k: list(v) for k, v in sizes.items()}})
    print(f"wrote {', '.join(f'{s}={list(sizes[s])}' for s in D.SPLITS)} to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_data(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"dataset directory {directory} does not exist")
    return D.load_splits(directory)


def _run_training(conf: dict, out: Path, splits=None) -> dict:
    """Train one configuration and write its artifacts; returns a summary."""
    splits = splits or _load_data(conf["data"])
    cfg = train_config_from(conf)
    out.mkdir(parents=True, exist_ok=True)
    record = train(cfg, splits["train"], splits.get("val"))
    artifacts = []

    m = splits["train"].n_groups
    rows = [[t + 1, cfg.method, int(record.step_group[t]), repr(float(record.step_loss[t]))]
            + [repr(float(v)) for v in record.step_q[t]] for t in range(record.steps_done)]
    artifacts.append(_csv(out / "steps.csv", ["step", "method", "g", "loss"] + [f"q_{g}" for g in range(m)], rows))

    eval_rows, header = [], None
    for step, rep in record.evals:
        header = header or ["step"] + rep.csv_header()
        eval_rows.append([step] + [_fmt(v) for v in rep.csv_row()])
    artifacts.append(_csv(out / "evals.csv", header or ["step"], eval_rows))

    epoch = record.best_step // max(1, -(-len(splits["train"]) // cfg.batch_size))
    artifacts.append(M.save_checkpoint(out / "best.ckpt.npz", record.best_params, cfg.seed, record.best_step, epoch))
    artifacts.append(M.save_checkpoint(out / "final.ckpt.npz", record.final_params, cfg.seed, record.steps_done))
    artifacts.append(M.save_checkpoint(out / "average.ckpt.npz", record.avg_params, cfg.seed, record.steps_done))

    test = splits["test"]
    test_rng = make_rng(derive_seeds(cfg.seed, "test-eval")["test-eval"])
    clean, adv = E.predictions(record.best_params, test, cfg.selection_attack(), test_rng)
    report = E.report_from_predictions(test, clean, adv, cfg.selection_attack().as_dict())
    report.check_identities()
    report.extra = {"best_step": record.best_step, "split": "test", "final_q": record.weights.q.tolist()}
    artifacts.append(Path(out / "test_metrics.json"))
    report.to_json(artifacts[-1])
    metrics_log = out / "metrics.csv"
    if metrics_log.exists():
        metrics_log.unlink()
    artifacts.append(append_metrics_row(metrics_log, report, ["split", "step"], ["test", record.best_step]))
    artifacts.append(_csv(out / "test_predictions.csv", ["index", "group", "label", "pred_clean", "pred_adv"],
                          [[i, int(test.groups[i]), int(test.labels[i]), int(clean[i]), int(adv[i])]
                           for i in range(len(test))]))
    return {"record": record, "report": report, "artifacts": artifacts,
            "test_fingerprint": test.fingerprint(), "train_fingerprint": splits["train"].fingerprint()}


@command("train", TRAIN_OPTIONS, "train one model")
def cmd_train(conf: dict, explicit: set | None = None) -> int:
    _require(conf, "data", "out")
    conf = materialize_train(dict(conf), explicit if explicit is not None else set())
    started = _now()
    out = Path(conf["out"])
    result = _run_training(conf, out)
    arts = result["artifacts"] + [out / "manifest.json"]
    write_manifest(out, "train", conf, arts, started,
                   {"test_fingerprint": result["test_fingerprint"], "train_fingerprint": result["train_fingerprint"],
                    "best_step": result["record"].best_step})
    rep = result["report"]
    print(f"{conf['method']}: best step {result['record'].best_step}; test average {rep.average_acc:.4f} "
          f"adversarial {rep.adversarial_acc:.4f} robust {rep.robust_acc:.4f} robust-adv {rep.robust_adv_acc:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate / export


def _eval_attack(conf):
    if conf.get("eval_eps") is None:
        return None
    sigma = conf["eval_sigma"]
    return AttackConfig(epsilon=conf["eval_eps"], eta_delta=conf["eval_eta_delta"], steps=conf["eval_pgd_steps"],
                        sigma=conf["eval_eps"] ** 2 if sigma is None else sigma, mode="batch")


def _load_ckpt(path):
    if not path or not Path(path).exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    return M.load_checkpoint(path)[0]


@command("evaluate", EVAL_OPTIONS, "score a checkpoint on one split")
def cmd_evaluate(conf: dict) -> int:
    _require(conf, "checkpoint", "data")
    params = _load_ckpt(conf["checkpoint"])
    ds = _load_data(conf["data"])[conf["split"]] if conf["split"] in D.SPLITS else None
    if ds is None:
        raise ConfigError(f"unknown split {conf['split']!r}")
    rng = make_rng(derive_seeds(conf["seed"], "evaluate")["evaluate"])
    report = E.evaluate(params, ds, _eval_attack(conf), rng)
    report.check_identities()
    text = report.to_json(conf["out"])
    if conf["metrics_log"]:
        append_metrics_row(conf["metrics_log"], report, ["split"], [conf["split"]])
    if not conf["out"]:
        print(text, end="")
    return EXIT_OK


@command("export", EXPORT_OPTIONS, "export penultimate representations or first-layer weights")
def cmd_export(conf: dict) -> int:
    _require(conf, "checkpoint", "out")
    params = _load_ckpt(conf["checkpoint"])
    if conf["kind"] == "first-layer":
        E.export_first_layer(params, conf["out"])
    elif conf["kind"] == "representations":
        _require(conf, "data")
        ds = _load_data(conf["data"])[conf["split"]]
        rng = make_rng(derive_seeds(conf["seed"], "export")["export"])
        E.export_representations(params, ds, conf["out"], _eval_attack(conf), rng)
    else:
        raise ConfigError(f"unknown export kind {conf['kind']!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare

COMPARE_RUNS = (
    ("erm", "erm", None),
    ("adv_erm", "adv_erm", "batch"),
    ("gdro", "gdro", None),
    ("adv_gdro_batch", "adv_gdro", "batch"),
    ("adv_gdro_group", "adv_gdro", "group"),
)
# (weaker, stronger) pairs whose corrections are listed
CORRECTION_PAIRS = (("erm", "adv_gdro_group"), ("adv_erm", "adv_gdro_group"), ("gdro", "adv_gdro_group"))


def _compare_job(args):
    conf, out_dir = args
    res = _run_training(conf, Path(out_dir))
    arts = res["artifacts"] + [Path(out_dir) / "manifest.json"]
    write_manifest(Path(out_dir), "train", conf, arts, _now(),
                   {"test_fingerprint": res["test_fingerprint"], "train_fingerprint": res["train_fingerprint"],
                    "best_step": res["record"].best_step})
    return str(out_dir)


def load_run(directory) -> dict:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        report = json.loads((directory / "test_metrics.json").read_text(encoding="utf-8"))
        with open(directory / "test_predictions.csv", newline="", encoding="utf-8") as fh:
            preds = list(csv.DictReader(fh))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{directory} is not a completed run: {exc}") from None
    conf = manifest["config"]
    mode = conf.get("perturb_mode")
    name = conf["method"] if conf["method"] != "adv_gdro" else f"adv_gdro_{mode}"
    return {
        "name": name,
        "method": conf["method"],
        "mode": mode,
        "dir": str(directory),
        "metrics": {k: report[k] for k in E.METRIC_NAMES},
        "fingerprint": manifest.get("test_fingerprint"),
        "index": np.array([int(r["index"]) for r in preds]),
        "group": np.array([int(r["group"]) for r in preds]),
        "label": np.array([int(r["label"]) for r in preds]),
        "pred": np.array([int(r["pred_clean"]) for r in preds]),
    }


def _table_rows(runs_by_name):
    columns = ("erm", "adv_erm", "gdro", "adv_gdro")
    rows = []
    for metric in E.METRIC_NAMES:
        for pert in ("batch", "group"):
            row = [metric, pert]
            for col in columns:
                if pert == "batch":
                    key = "adv_gdro_batch" if col == "adv_gdro" else col
                else:
                    # gdro without an attack has no perturbation to weight: both rows come from one run
                    key = {"gdro": "gdro", "adv_gdro": "adv_gdro_group"}.get(col)
                run = runs_by_name.get(key) if key else None
                row.append("-" if run is None else f"{100 * run['metrics'][metric]:.2f}")
            rows.append(row)
    return ["metric", "perturbation", *columns], rows


def _deltas(runs):
    rows = []
    for i in range(len(runs)):
        for j in range(i + 1, len(runs)):
            a, b = runs[i], runs[j]
            for metric in E.METRIC_NAMES:
                diff = b["metrics"][metric] - a["metrics"][metric]
                rows.append([a["name"], b["name"], metric, f"{100 * diff:.2f}"])
    return ["baseline", "candidate", "metric", "delta_points"], rows


def corrections(weak: dict, strong: dict):
    """Rows mispredicted by ``weak`` and predicted correctly by ``strong``."""
    mask = (weak["pred"] != weak["label"]) & (strong["pred"] == strong["label"])
    return [[weak["name"], strong["name"], int(weak["index"][i]), int(weak["group"][i]), int(weak["label"][i]),
             int(weak["pred"][i]), int(strong["pred"][i])] for i in np.flatnonzero(mask)]


CORRECTION_HEADER = ["weaker", "stronger", "index", "group", "label", "weaker_pred", "stronger_pred"]


@command("compare", COMPARE_OPTIONS, "train (or load) the four methods and tabulate them")
def cmd_compare(conf: dict, explicit: set | None = None) -> int:
    _require(conf, "out")
    started = _now()
    out = Path(conf["out"])
    out.mkdir(parents=True, exist_ok=True)
    conf = dict(conf)
    if conf["sigma"] is None:
        conf["sigma"] = conf["eps"] ** 2
    _fill_eval_attack(conf)

    if conf["runs"]:
        runs = [load_run(d) for d in conf["runs"]]
        pairs = [(i, len(runs) - 1) for i in range(len(runs) - 1)]
    else:
        _require(conf, "data")
        _load_data(conf["data"])
        jobs = []
        for name, method, mode in COMPARE_RUNS:
            rc = {k: v for k, v in conf.items() if k in TRAIN_OPTIONS}
            rc.update(method=method, perturb_mode=mode, out=str(out / "runs" / name))
            if method not in ADVERSARIAL:
                for k in ATTACK_KEYS:
                    rc[k] = None
            if method not in GROUP_DRO:
                rc["eta_q"] = None
            jobs.append((rc, rc["out"]))
        if conf["jobs"] > 1:
            with ProcessPoolExecutor(max_workers=conf["jobs"]) as pool:
                dirs = list(pool.map(_compare_job, jobs))
        else:
            dirs = [_compare_job(j) for j in jobs]
        runs = [load_run(d) for d in dirs]
        index = {r["name"]: i for i, r in enumerate(runs)}
        pairs = [(index[a], index[b]) for a, b in CORRECTION_PAIRS]

    fps = {r["fingerprint"] for r in runs}
    if len(fps) > 1 or any(not np.array_equal(r["index"], runs[0]["index"]) or
                           not np.array_equal(r["label"], runs[0]["label"]) for r in runs):
        raise ComparisonError("runs were evaluated on different datasets")

    header, rows = _table_rows({r["name"]: r for r in runs})
    artifacts = [_csv(out / "table.csv", header, rows)]
    header, rows = _deltas(runs)
    artifacts.append(_csv(out / "deltas.csv", header, rows))
    corr = []
    for i, j in pairs:
        corr += corrections(runs[i], runs[j])
    artifacts.append(_csv(out / "corrections.csv", CORRECTION_HEADER, corr))
    artifacts.append(out / "manifest.json")
    if not conf["runs"]:
        artifacts += [p for p in (out / "runs").rglob("*") if p.is_file()]
    write_manifest(out, "compare", conf, artifacts, started)
    print((out / "table.csv").read_text(encoding="utf-8"), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# convergence


@command("convergence", CONV_OPTIONS, "measure the minimax gap of the average iterate against the analytic bound")
def cmd_convergence(conf: dict) -> int:
    _require(conf, "out")
    if conf["m"] < 1 or conf["replicates"] < 1 or not conf["T_grid"] or min(conf["T_grid"]) < 1:
        raise ConfigError("need --m >= 1, --replicates >= 1 and positive T values")
    started = _now()
    out = Path(conf["out"])
    out.mkdir(parents=True, exist_ok=True)
    inst = C.make_instance(m=conf["m"], n_per_group=conf["n_per_group"], d=conf["d"], seed=conf["seed"],
                           epsilon=conf["eps"], radius=conf["radius"])
    report = C.run_convergence(inst, conf["T_grid"], conf["replicates"], conf["seed"],
                               eta_theta=conf["eta_theta"], eta_q=conf["eta_q"], batch_size=conf["batch_size"])
    artifacts = [report.to_csv(out / "convergence.csv"), report.to_json(out / "convergence.json"),
                 out / "manifest.json"]
    checks = C.check_bound(report)
    write_manifest(out, "convergence", conf, artifacts, started,
                   {"bound_check": {str(k): v for k, v in checks.items()},
                    "minimax_converged": report.minimax.converged})
    for r in report.rows:
        print(f"T={r.T:>6}  eps_T={r.mean:.6f} (sd {r.std:.6f})  bound={r.bound:.4f}  "
              f"{'pass' if checks[r.T] else 'FAIL'}")
    if not report.minimax.converged:
        print(f"minimax oracle did not converge (duality gap {report.minimax.duality_gap:.3g})", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if all(checks.values()) else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# replay


def cmd_replay(manifest_path, out=None) -> int:
    try:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
        name, conf = manifest["command"], dict(manifest["config"])
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot replay {manifest_path}: {exc}") from None
    if name not in COMMANDS:
        raise ConfigError(f"manifest names unknown command {name!r}")
    if out:
        conf["out"] = out
    fn, options, _ = COMMANDS[name]
    full, _ = resolve(options, {}, {k: v for k, v in conf.items() if k in options})
    return fn(full)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advgdro", description="Adversarial group DRO and baselines")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, options, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value config file")
        for key, (conv, default, help_opt) in options.items():
            flag = "--" + key.replace("_", "-")
            extra = f" (default: {default})" if default not in (None, []) else ""
            p.add_argument(flag, dest=key, type=conv, default=None, help=help_opt + extra)
    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="write outputs here instead of the recorded directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "replay":
            return cmd_replay(args.manifest, args.out)
        fn, options, _ = COMMANDS[args.command]
        flags = {k: getattr(args, k) for k in options}
        file_values = read_config_file(args.config) if args.config else {}
        conf, explicit = resolve(options, file_values, flags)
        if args.command in ("train", "compare"):
            return fn(conf, explicit)
        return fn(conf)
    except (ConfigError, ComparisonError, ParseError, DataError) as exc:
        print(f"advgdro: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AdvGDROError, ArithmeticError, OSError) as exc:
        print(f"advgdro: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
