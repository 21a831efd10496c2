"""Command-line entry point.

    mupkit <train|attack|eval|sweep|ablate> <config.ini> [--out-dir DIR] [-v]

Each subcommand is driven entirely by the config file; flags only override
the output directory and verbosity. Given identical configs and inputs,
every subcommand writes byte-identical artifacts.

Exit codes: 0 success, 2 config error, 3 compute error (divergence,
accuracy guard, violated invariants), 4 I/O error (missing or unreadable
files).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import container, harness, model_zoo
from .config import ConfigError, RunConfig, load_config
from .nn_core import ShapeError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_COMPUTE = 3
EXIT_IO = 4

log = logging.getLogger("mupkit")


def _read_bytes(path: Path, what: str) -> bytes:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path.read_bytes()


def _write_bytes(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    log.info("wrote %s (%d bytes)", path, len(data))


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_dataset(cfg: RunConfig) -> model_zoo.Dataset:
    return model_zoo.load_dataset(_read_bytes(cfg.dataset_path(), "dataset"))


def _load_zoo(cfg: RunConfig, names) -> dict:
    zoo = {}
    for name in names:
        zoo[name] = model_zoo.load(_read_bytes(cfg.model_path(name),
                                               f"model {name!r}"))
    return zoo


def cmd_train(cfg: RunConfig) -> int:
    """Generate (or reuse) the dataset, train the arch x seed grid, and
    write one model container per network plus a manifest."""
    cfg.require("zoo")
    ds_path = cfg.dataset_path()
    if ds_path.is_file():
        data = model_zoo.load_dataset(ds_path.read_bytes())
        log.info("reusing dataset %s", ds_path)
    else:
        d = cfg.dataset
        data = model_zoo.generate_dataset(d.seed, d.classes, d.per_class,
                                          d.image_shape)
        _write_bytes(ds_path, model_zoo.save_dataset(data))

    manifest = {"schema_version": harness.SCHEMA_VERSION,
                "dataset": container.fingerprint(model_zoo.save_dataset(data)),
                "models": {}}
    zoo = cfg.zoo
    for arch_name in zoo.arches:
        arch = model_zoo.build_arch(arch_name, data.image_shape,
                                    data.num_classes)
        for s in zoo.train_seeds:
            name = f"{arch_name}-s{s}"
            result = model_zoo.train_with_stats(arch, data,
                                                replace(zoo.train, seed=s))
            blob = model_zoo.save(result.network)
            _write_bytes(cfg.model_path(name), blob)
            manifest["models"][name] = {
                "fingerprint": container.fingerprint(blob),
                "test_accuracy": result.test_accuracy,
                "final_train_loss": result.epoch_losses[-1],
            }
            log.info("trained %s: accuracy %.4f", name, result.test_accuracy)
    _write_text(cfg.out_dir / "models" / "manifest.json",
                _json_text(manifest))
    return EXIT_OK


def cmd_attack(cfg: RunConfig) -> int:
    """Craft adversarial examples with one method from one surrogate and
    write the batch container plus a white-box stats report."""
    cfg.require("attack")
    a = cfg.attack
    data = _load_dataset(cfg)
    net = _load_zoo(cfg, [a.surrogate])[a.surrogate]
    batch = harness.eval_batch(data, a.eval_count, a.eval_seed)
    adv = harness.run_attack_chunked(net, batch, a.config,
                                     a.attack_batch_size)

    out_path = cfg.out_dir / a.output
    blob = harness.save_adv(adv)
    _write_bytes(out_path, blob)
    reloaded = harness.load_adv(out_path.read_bytes())
    if not harness.verify_ball(reloaded.clean, reloaded.adversarial,
                               a.config.epsilon):
        raise ShapeError("written adversarial batch violates the "
                         "perturbation ball on reload")

    stats = {
        "schema_version": harness.SCHEMA_VERSION,
        "kind": "attack",
        "method": a.method,
        "surrogate": a.surrogate,
        "eval_count": len(adv),
        "whitebox_rate": float(adv.whitebox_success.mean()),
        "loss_start": float(adv.loss_trace[0].mean()),
        "loss_end": float(adv.loss_trace[-1].mean()),
        "config": asdict(a.config),
        "fingerprints": {
            "dataset": container.fingerprint(model_zoo.save_dataset(data)),
            "model": container.fingerprint(model_zoo.save(net)),
            "adversarial": container.fingerprint(blob),
        },
    }
    _write_text(cfg.out_dir / a.stats, _json_text(stats))
    log.info("%s on %s: white-box rate %.4f over %d examples",
             a.method, a.surrogate, stats["whitebox_rate"], len(adv))
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    """Full transfer matrix: every listed method crafted on every model,
    evaluated on every other model."""
    cfg.require("eval")
    e = cfg.eval
    data = _load_dataset(cfg)
    zoo = _load_zoo(cfg, e.models)
    report = harness.transfer_matrix(zoo, data, e.methods, e.eval)
    _write_text(cfg.out_dir / f"{e.report}.json",
                _json_text(harness.transfer_report_json(report)))
    _write_text(cfg.out_dir / f"{e.report}.csv",
                harness.transfer_report_csv(report))
    for method, avg in report.transfer_averages.items():
        log.info("%s: mean transfer rate %.4f", method, avg["overall"])
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    """Masking-ratio sweep for one surrogate against the other models."""
    cfg.require("sweep")
    s = cfg.sweep
    data = _load_dataset(cfg)
    zoo = _load_zoo(cfg, s.models)
    curve = harness.ratio_sweep(s.surrogate, zoo, data, s.ratios, s.base,
                                s.eval)
    prints = harness._fingerprints(zoo, data)
    _write_text(cfg.out_dir / f"{s.report}.json",
                _json_text(harness.sweep_json(curve, prints)))
    _write_text(cfg.out_dir / f"{s.report}.csv", harness.sweep_csv(curve))
    for sample in curve.samples:
        log.info("r=%.2f: mean transfer rate %.4f", sample.ratio,
                 sample.mean_rate)
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    """Importance-metric ablation at one ratio: none vs taylor vs
    magnitude under the same optimizer and seeds."""
    cfg.require("ablate")
    ab = cfg.ablate
    data = _load_dataset(cfg)
    zoo = _load_zoo(cfg, ab.models)
    report = harness.metric_ablation(ab.surrogate, zoo, data, ab.base,
                                     ab.ratio, ab.eval)
    _write_text(cfg.out_dir / f"{ab.report}.json",
                _json_text(harness.ablation_json(report)))
    _write_text(cfg.out_dir / f"{ab.report}.csv",
                harness.ablation_csv(report))
    for row in report.rows:
        log.info("%s: mean transfer rate %.4f", row.label, row.mean_rate)
    return EXIT_OK


_COMMANDS = {
    "train": (cmd_train, "train the model zoo and write containers"),
    "attack": (cmd_attack, "craft one adversarial batch from one surrogate"),
    "eval": (cmd_eval, "transfer matrix over models and methods"),
    "sweep": (cmd_sweep, "masking-ratio sweep for one surrogate"),
    "ablate": (cmd_ablate, "importance-metric ablation at one ratio"),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mupkit",
        description="train small classifiers and craft transferable "
                    "adversarial examples with parameter masking")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="path to the run config (INI)")
        p.add_argument("--out-dir", default=None,
                       help="override [run] out_dir from the config")
        p.add_argument("-v", "--verbose", action="store_true",
                       help="debug-level logging")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stdout, force=True)
    try:
        cfg = load_config(args.config)
        if args.out_dir is not None:
            cfg = replace(cfg, out_dir=Path(args.out_dir))
        return _COMMANDS[args.command][0](cfg)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (container.ContainerError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (model_zoo.DivergenceError, harness.AccuracyGuardError,
            ShapeError, FloatingPointError, ValueError) as exc:
        print(f"compute error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
