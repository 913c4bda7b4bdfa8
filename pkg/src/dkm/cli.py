"""Command-line harness: pretrain, metatrain, evaluate, ablate, sweep, selftest.

Every command writes into a fresh run directory holding the resolved config
snapshot (``config.yaml``), git-style blob hashes of its inputs
(``inputs.sha1``), the metrics files, and a human log (``run.log``). Only
``run.log`` carries wall-clock times, so metrics files are byte-identical
across reruns with the same config and seed.

Exit codes: 0 success, 1 failed selftest or unexpected error, 2 config or
usage error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import shutil
import sys
import time
from pathlib import Path

import yaml

from .autodiff import NumericError
from .config import ConfigError, RunConfig, dump_yaml, from_dict, load_config
from .evaluation import ablation_table, build_data, kappa_grid, run_ablation, run_meta_test, sweep_csv, sweep_kappa
from .nets import load_params, save_params
from .rng import derive_seed
from .training import TrainedModel, pretrain, run_meta_training

log = logging.getLogger("dkm")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

PRETRAIN_FIELDS = ("phase", "step", "seed", "alpha", "loss", "ce", "ssl")
META_FIELDS = ("phase", "step", "seed", "lambda", "l_cls", "l_d", "l_g", "acc", "rho_v", "rho_u")


class UsageError(Exception):
    """Bad invocation that is not a config schema problem (exit code 2)."""


def blob_sha1(data: bytes) -> str:
    """Hash of ``data`` as git would store it in a blob object."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_csv(path: Path, fields: tuple[str, ...], rows: list[dict]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    path.write_text(buf.getvalue())


def _as_float(v):
    return float(v) if hasattr(v, "dtype") else v


# run directory ---------------------------------------------------------------------

class RunDir:
    def __init__(self, path: Path, cfg: RunConfig, force: bool) -> None:
        if path.exists() and any(path.iterdir()):
            if not force:
                raise UsageError(f"run directory {path} exists; pass --force to replace it")
            shutil.rmtree(path)
        path.mkdir(parents=True, exist_ok=True)
        self.path = path
        self.inputs: dict[str, str] = {}
        snapshot = dump_yaml(cfg)
        (path / "config.yaml").write_text(snapshot)
        self.inputs["config.yaml"] = blob_sha1(snapshot.encode())
        self._handler = logging.FileHandler(path / "run.log", mode="w")
        self._handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        log.addHandler(self._handler)

    def add_input(self, label: str, path: Path) -> None:
        self.inputs[label] = blob_sha1(path.read_bytes())

    def close(self) -> None:
        lines = [f"{digest}  {label}" for label, digest in sorted(self.inputs.items())]
        body = "\n".join(lines) + "\n"
        # a single digest over the listing identifies the whole input set
        (self.path / "inputs.sha1").write_text(body + f"{blob_sha1(body.encode())}  *\n")
        log.removeHandler(self._handler)
        self._handler.close()


def checkpoint_stem(arg: str | None, what: str = "pretrain") -> Path:
    if not arg:
        raise UsageError(f"{what} checkpoint required (--checkpoint)")
    p = Path(arg)
    if p.is_dir():
        p = p / "checkpoint"
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    if not p.with_suffix(".json").exists() or not p.with_suffix(".bin").exists():
        raise UsageError(f"{what} checkpoint required: nothing at {p}.json/.bin")
    return p


def save_model(stem: Path, model: TrainedModel, cfg: RunConfig) -> None:
    meta = {"phase": model.phase, "provenance": dict(model.provenance), "config_digest": cfg.digest()}
    save_params(stem, model.groups(), meta)


def load_model(stem: Path) -> TrainedModel:
    groups, meta = load_params(stem)
    missing = {"encoder", "classifier", "domain", "mapper"} - set(groups)
    if missing:
        raise UsageError(f"checkpoint {stem} lacks parameter groups {sorted(missing)}")
    return TrainedModel(**{k: groups[k] for k in ("encoder", "classifier", "domain", "mapper")},
                        phase=meta.get("phase", "unknown"), provenance=meta.get("provenance", {}))


def attach_checkpoint(run: RunDir, stem: Path) -> TrainedModel:
    model = load_model(stem)
    run.add_input("checkpoint.json", stem.with_suffix(".json"))
    run.add_input("checkpoint.bin", stem.with_suffix(".bin"))
    return model


# commands --------------------------------------------------------------------------

def cmd_pretrain(cfg: RunConfig, run: RunDir, args) -> int:
    data = build_data(cfg)
    seed = derive_seed(cfg.seed, "pretrain")
    model, trace = pretrain(cfg, data.source, data.heldout, seed)
    rows = [{"phase": "pretrain", "step": r["epoch"], "seed": seed,
             **{k: _as_float(r[k]) for k in ("alpha", "loss", "ce", "ssl")}} for r in trace]
    write_csv(run.path / "pretrain_trace.csv", PRETRAIN_FIELDS, rows)
    save_model(run.path / "checkpoint", model, cfg)
    log.info("pretrain done: %d epochs, final loss %.4f", len(trace), trace[-1]["loss"])
    return EXIT_OK


def cmd_metatrain(cfg: RunConfig, run: RunDir, args) -> int:
    model = attach_checkpoint(run, checkpoint_stem(args.checkpoint))
    data = build_data(cfg)
    n_classes = len(data.source.classes)
    if model.classifier["w0"].shape[1] != n_classes:
        raise UsageError(f"checkpoint classifier has {model.classifier['w0'].shape[1]} outputs, "
                         f"source has {n_classes} classes")
    seed = derive_seed(cfg.seed, "metatrain")
    ckpt_dir = run.path / "checkpoints"

    def on_checkpoint(episode: int, m: TrainedModel) -> None:
        ckpt_dir.mkdir(exist_ok=True)
        save_model(ckpt_dir / f"episode_{episode:06d}", m, cfg)

    model, trace = run_meta_training(model, cfg, data.source, data.source_stats, seed,
                                     on_checkpoint=on_checkpoint)
    rows = [{"phase": "metatrain", "step": r["episode"], "seed": seed,
             **{k: _as_float(r[k]) for k in META_FIELDS[3:]}} for r in trace]
    write_csv(run.path / "meta_trace.csv", META_FIELDS, rows)
    save_model(run.path / "checkpoint", model, cfg)
    log.info("metatrain done: %d episodes", len(trace))
    return EXIT_OK


def _targets(cfg: RunConfig, arg: str | None) -> list[str]:
    names = [t.name for t in cfg.benchmark.targets]
    if arg is None:
        return [cfg.benchmark.eval_target]
    if arg == "all":
        return names
    if arg not in names:
        raise UsageError(f"unknown target {arg!r}; choose from {names} or 'all'")
    return [arg]


def cmd_evaluate(cfg: RunConfig, run: RunDir, args) -> int:
    model = attach_checkpoint(run, checkpoint_stem(args.checkpoint, "model"))
    data = build_data(cfg)
    seed = derive_seed(cfg.seed, "metatest", 0)
    for name in _targets(cfg, args.target):
        rep = run_meta_test(model, data.targets[name], cfg, seed, data.source.x,
                            rho_off=args.rho_off, parallel=args.parallel, target_name=name)
        suffix = "_rho_off" if args.rho_off else ""
        rep.write(run.path / f"eval_{name}{suffix}")
        log.info("%s: mean %.4f +- %.4f over %d tasks", name, rep.mean, rep.ci95, rep.n_tasks)
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, run: RunDir, args) -> int:
    if args.checkpoint:
        log.warning("ablate pretrains each regime itself; --checkpoint is ignored")
    targets = _targets(cfg, args.target or "all")
    results = run_ablation(cfg, targets)
    for regime, reports in results.items():
        for name, rep in reports.items():
            rep.write(run.path / f"ablation_{regime}_{name}")
    (run.path / "ablation.csv").write_text(ablation_table(results))
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, run: RunDir, args) -> int:
    grid = kappa_grid() if args.kappa is None else [float(k) for k in args.kappa.split(",")]
    rows = sweep_kappa(cfg, grid)
    (run.path / "sweep.csv").write_text(sweep_csv(rows))
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "metatrain": cmd_metatrain,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


# config resolution -----------------------------------------------------------------

def parse_override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    return key.strip(), yaml.safe_load(value)


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else from_dict({})
    changes = dict(parse_override(s) for s in args.set or [])
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    return cfg.with_(**changes) if changes else cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dkm", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*COMMANDS, "selftest"):
        p = sub.add_parser(name)
        if name == "selftest":
            p.add_argument("--quick", action="store_true", help="skip the slower statistical checks")
            continue
        p.add_argument("--config", help="YAML run config; defaults apply to missing keys")
        p.add_argument("--out", help="run directory (overrides the config's out)")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, e.g. train.kappa=0.2; repeatable")
        p.add_argument("--force", action="store_true", help="replace an existing run directory")
        p.add_argument("--checkpoint", help="checkpoint stem or run directory")
        if name in ("evaluate", "ablate"):
            p.add_argument("--target", help="target name or 'all'")
        if name == "evaluate":
            p.add_argument("--rho-off", action="store_true", help="force the difficulty score to zero")
            p.add_argument("--parallel", type=int, default=1, help="worker processes for meta-test tasks")
        if name == "sweep":
            p.add_argument("--kappa", help="comma-separated kappa values instead of the default grid")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "selftest":
        from .selftest import run_selftest
        return EXIT_OK if run_selftest(quick=args.quick) else EXIT_FAIL
    try:
        cfg = resolve_config(args)
        if args.command == "evaluate" and args.parallel < 1:
            raise UsageError("--parallel must be at least 1")
        # check preconditions before a run directory exists, so a bad call leaves nothing behind
        if args.command == "metatrain":
            checkpoint_stem(args.checkpoint)
        elif args.command == "evaluate":
            checkpoint_stem(args.checkpoint, "model")
            _targets(cfg, args.target)
        run = RunDir(Path(cfg.out), cfg, args.force)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    start = time.time()
    try:
        code = COMMANDS[args.command](cfg, run, args)
        log.info("%s finished in %.1fs", args.command, time.time() - start)
        return code
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    finally:
        run.close()


if __name__ == "__main__":
    sys.exit(main())
