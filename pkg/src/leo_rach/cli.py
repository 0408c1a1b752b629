"""``leo-rach`` command line: dataset generation, training, evaluation, protocol runs.

Every subcommand takes ``--seed`` (required), ``--out`` (output directory)
and an optional JSON ``--config``, refined by repeated ``--set key=value``.
Each run writes ``manifest.json`` next to its artifacts.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import rach_engine as eng
from ._rng import substream
from .collision_net.dataset import gen_dataset, load_dataset, save_dataset, stratified_split
from .collision_net.evaluation import ConfusionMatrix, evaluate, evaluate_by_snr
from .collision_net.model import ClassifierArch, MlpArch, load_weights, save_weights
from .collision_net.training import TrainConfig, train
from .ntn_channel import get_profile
from .prach_signal import PrachConfig

log = logging.getLogger("leo_rach")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

_PRACH_KEYS = {"n_zc": 839, "n_cs": 8, "roots": [1], "n_ant": 8, "tau_e_max": 2}

_SIM_KEYS = {f.name: f.default for f in fields(eng.SimConfig) if f.name != "seed"}
_SIM_KEYS["roots"] = list(_SIM_KEYS["roots"])
_SIM_KEYS["delay_range_ms"] = list(_SIM_KEYS["delay_range_ms"])

DEFAULTS: dict[str, dict[str, Any]] = {
    "gen-data": {
        **_PRACH_KEYS,
        "channel_profile": "los",
        "k_max": 6,
        "snr_grid": [-13.0, -12.0, -11.0, -10.0],
        "n_per_class_per_snr": 10000,
        "noise_domain": "correlation",
    },
    "train": {
        "dataset": None,
        "arch": "cnn",
        "learning_rate": 1e-3,
        "batch_size": 32,
        "epochs": 20,
        "adam_betas": [0.9, 0.999],
        "adam_epsilon": 1e-8,
        "train_fraction": 0.7,
    },
    "eval": {"weights": None, "dataset": None},
    "simulate": {**_SIM_KEYS, "weights": None, "confusion": None, "trace": False},
    "sweep": {
        **_SIM_KEYS,
        "weights": None,
        "confusion": None,
        "user_counts": [50, 100, 150, 200, 250, 300],
        "n_reps": 20,
        "schemes": list(eng.SCHEMES),
        "workers": 1,
    },
}
_REQUIRED = {"train": ("dataset",), "eval": ("weights", "dataset")}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    subcommand: str
    seed: int
    output_dir: Path
    config_path: Path | None = None
    overrides: dict[str, Any] = field(default_factory=dict)
    params: dict[str, Any] = field(default_factory=dict)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="leo-rach", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name in DEFAULTS:
        s = sub.add_parser(name)
        s.add_argument("--seed", type=int, required=True)
        s.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
        s.add_argument("--config", type=Path, help="JSON object of parameter values")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one parameter; VALUE is parsed as JSON when possible")
    return p


def parse_args(argv: list[str] | None = None) -> RunConfig:
    """Resolve parameters as defaults < config file < ``--set`` overrides."""
    ns = build_parser().parse_args(argv)
    if ns.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    params = dict(DEFAULTS[ns.subcommand])
    layers: list[tuple[str, dict]] = []
    if ns.config is not None:
        try:
            loaded = json.loads(ns.config.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {ns.config}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {ns.config} is not valid JSON: {e}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {ns.config} must hold a JSON object")
        layers.append((str(ns.config), loaded))
    overrides = {}
    for item in ns.overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"malformed override {item!r}; expected KEY=VALUE")
        overrides[key.strip()] = _parse_value(value)
    layers.append(("--set", overrides))
    for origin, layer in layers:
        unknown = sorted(set(layer) - set(params))
        if unknown:
            raise UsageError(f"unknown {ns.subcommand} key(s) from {origin}: {', '.join(unknown)}")
        params.update(layer)
    missing = [k for k in _REQUIRED.get(ns.subcommand, ()) if params[k] is None]
    if missing:
        raise UsageError(f"{ns.subcommand} needs {', '.join(missing)} (use --set {missing[0]}=PATH)")
    return RunConfig(ns.subcommand, ns.seed, ns.out, ns.config, overrides, params)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Outputs:
    """Tracks files written by a run so a failure can remove them."""

    def __init__(self, root: Path):
        self.root = root
        self.files: dict[str, Path] = {}

    def path(self, name: str) -> Path:
        p = self.root / name
        self.files[name] = p
        return p

    def cleanup(self) -> None:
        for p in self.files.values():
            p.unlink(missing_ok=True)


def _sim_config(params: dict, seed: int) -> eng.SimConfig:
    return eng.config_from_dict({k: v for k, v in params.items() if k in _SIM_KEYS} | {"seed": seed})


def _classifier_artifacts(params: dict):
    weights = load_weights(params["weights"]) if params["weights"] else None
    q = ConfusionMatrix.from_csv(params["confusion"]) if params["confusion"] else None
    return weights, q


def _prach(params: dict) -> PrachConfig:
    return PrachConfig(**{k: (tuple(params[k]) if k == "roots" else params[k]) for k in _PRACH_KEYS})


def cmd_gen_data(rc: RunConfig, out: _Outputs) -> None:
    p = rc.params
    ds = gen_dataset(
        _prach(p),
        get_profile(p["channel_profile"]),
        int(p["k_max"]),
        [float(s) for s in p["snr_grid"]],
        int(p["n_per_class_per_snr"]),
        substream(rc.seed, "dataset"),
        noise_domain=p["noise_domain"],
    )
    save_dataset(ds, out.path("dataset.bin"))
    log.info("wrote %d windows", len(ds))


def cmd_train(rc: RunConfig, out: _Outputs) -> None:
    p = rc.params
    ds = load_dataset(p["dataset"])
    if p["arch"] == "cnn":
        arch = ClassifierArch(n_ant=ds.n_ant, n_cs=ds.n_cs, k_max=ds.k_max)
    elif p["arch"] == "mlp":
        arch = MlpArch(n_ant=ds.n_ant, n_cs=ds.n_cs, k_max=ds.k_max)
    else:
        raise UsageError(f"arch must be 'cnn' or 'mlp', got {p['arch']!r}")
    train_set, test_set = stratified_split(ds, float(p["train_fraction"]), substream(rc.seed, "split"))
    tc = TrainConfig(
        learning_rate=float(p["learning_rate"]),
        batch_size=int(p["batch_size"]),
        epochs=int(p["epochs"]),
        adam_betas=tuple(p["adam_betas"]),
        adam_epsilon=float(p["adam_epsilon"]),
        seed=rc.seed,
    )
    result = train(arch, train_set, tc)
    save_weights(result.net, out.path("weights.bin"))
    with open(out.path("loss_history.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(result.loss_history, 1):
            w.writerow([i, repr(float(loss))])
    # the held-out split estimates the confusion matrix; fall back to the
    # training data when the split leaves nothing to test on
    report = evaluate(result.net, test_set if len(test_set) else train_set)
    report.confusion.to_csv(out.path("confusion.csv"))
    log.info("held-out accuracy %.4f", report.accuracy)


def cmd_eval(rc: RunConfig, out: _Outputs) -> None:
    net = load_weights(rc.params["weights"])
    ds = load_dataset(rc.params["dataset"])
    if (ds.n_ant, ds.n_cs, ds.k_max) != (net.arch.n_ant, net.arch.n_cs, net.arch.k_max):
        raise UsageError(
            f"dimension mismatch: weights have n_ant={net.arch.n_ant}, n_cs={net.arch.n_cs}, K={net.arch.k_max}; "
            f"dataset has n_ant={ds.n_ant}, n_cs={ds.n_cs}, K={ds.k_max}"
        )
    reports = evaluate_by_snr(net, ds)
    with open(out.path("eval.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snr_db", "accuracy", "misdetection_rate", "false_alarm_rate", "n_samples"])
        for snr, r in sorted(reports.items()):
            w.writerow([repr(snr), repr(r.accuracy), repr(r.misdetection_rate), repr(r.false_alarm_rate), r.n_samples])
    evaluate(net, ds).confusion.to_csv(out.path("confusion.csv"))


def cmd_simulate(rc: RunConfig, out: _Outputs) -> None:
    cfg = _sim_config(rc.params, rc.seed)
    weights, q = _classifier_artifacts(rc.params)
    result = eng.run_scenario(cfg, weights, q)
    eng.write_csv([eng.metrics_row(cfg, 0, result.metrics)], eng.METRIC_COLUMNS, out.path("metrics.csv"))
    if rc.params["trace"]:
        eng.write_trace(result.users, out.path("trace.jsonl"))


def cmd_sweep(rc: RunConfig, out: _Outputs) -> None:
    p = rc.params
    template = _sim_config(p, rc.seed)
    weights, q = _classifier_artifacts(p)
    rows = eng.sweep(
        template, [int(d) for d in p["user_counts"]], int(p["n_reps"]), rc.seed,
        schemes=list(p["schemes"]), weights=weights, q=q, workers=int(p["workers"]),
    )
    eng.write_csv(rows, eng.METRIC_COLUMNS, out.path("metrics.csv"))
    eng.write_csv(eng.summarize(rows), eng.SUMMARY_COLUMNS, out.path("summary.csv"))


COMMANDS: dict[str, Callable[[RunConfig, _Outputs], None]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
}


def write_manifest(rc: RunConfig, out: _Outputs) -> Path:
    config_text = json.dumps(rc.params, sort_keys=True)
    manifest = {
        "subcommand": rc.subcommand,
        "seed": rc.seed,
        "config": rc.params,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "artifacts": {name: _sha256(p) for name, p in sorted(out.files.items())},
    }
    path = out.path("manifest.json")
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def dispatch(rc: RunConfig) -> int:
    rc.output_dir.mkdir(parents=True, exist_ok=True)
    out = _Outputs(rc.output_dir)
    try:
        COMMANDS[rc.subcommand](rc, out)
        write_manifest(rc, out)
    except UsageError:
        out.cleanup()
        raise
    except Exception as e:  # noqa: BLE001 - any module failure is a runtime error
        out.cleanup()
        print(f"leo-rach {rc.subcommand}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        return dispatch(parse_args(argv))
    except UsageError as e:
        print(f"leo-rach: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # argparse
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
