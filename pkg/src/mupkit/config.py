"""Declarative run configuration.

One INI file describes a whole experiment; each subcommand reads only the
sections it needs. Parsing is strict: unknown sections or keys are rejected
rather than silently absorbed, and every problem in the file is reported in
a single pass. All relative paths resolve against the config file's
directory, so committed configs run from anywhere.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from . import attacks, model_zoo
from .harness import EvalConfig


class ConfigError(ValueError):
    """Invalid run configuration; .problems lists every issue found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# key -> (parser kind, default); _REQUIRED marks keys that must be present
_REQUIRED = object()

_COMMON_EVAL = {
    "models": ("strlist", _REQUIRED),
    "eval_count": ("int", 375),
    "attack_batch_size": ("int", 125),
    "accuracy_floor": ("float", 0.85),
    "eval_seed": ("int", None),
    "report": ("str", None),
}

_SCHEMAS = {
    "run": {
        "seed": ("int", 0),
        "out_dir": ("str", "runs"),
    },
    "dataset": {
        "seed": ("int", 3),
        "classes": ("int", 5),
        "per_class": ("int", 300),
        "height": ("int", 14),
        "width": ("int", 14),
        "path": ("str", None),
    },
    "zoo": {
        "arches": ("strlist", _REQUIRED),
        "train_seeds": ("intlist", _REQUIRED),
        "epochs": ("int", 40),
        "learning_rate": ("float", 0.05),
        "batch_size": ("int", 32),
        "weight_decay": ("float", 0.0),
    },
    "attack": {
        "method": ("str", _REQUIRED),
        "surrogate": ("str", _REQUIRED),
        "eval_count": ("int", 375),
        "eval_seed": ("int", None),
        "attack_batch_size": ("int", 125),
        "output": ("str", "adv.mupc"),
        "stats": ("str", "attack.json"),
        # optimizer overrides; unset keys keep the method preset values
        "epsilon": ("float", None),
        "beta": ("float", None),
        "iterations": ("int", None),
        "mu": ("float", None),
        "sim_m": ("int", None),
        "taigr_s": ("int", None),
        "ratio": ("float", None),
        "metric": ("str", None),
        "gn_p": ("float", None),
        "mask_biases": ("bool", None),
    },
    "eval": {
        **_COMMON_EVAL,
        "methods": ("strlist", _REQUIRED),
    },
    "sweep": {
        **_COMMON_EVAL,
        "surrogate": ("str", _REQUIRED),
        "method": ("str", "mim"),
        "ratios": ("floatlist", [round(i * 0.05, 2) for i in range(11)]),
    },
    "ablate": {
        **_COMMON_EVAL,
        "surrogate": ("str", _REQUIRED),
        "method": ("str", "mim"),
        "ratio": ("float", None),
    },
}

_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": lambda s: {"true": True, "yes": True, "1": True,
                       "false": False, "no": False, "0": False}[s.strip().lower()],
    "strlist": lambda s: [p.strip() for p in s.split(",") if p.strip()],
    "intlist": lambda s: [int(p) for p in s.split(",") if p.strip()],
    "floatlist": lambda s: [float(p) for p in s.split(",") if p.strip()],
}


@dataclass(frozen=True)
class DatasetSection:
    seed: int
    classes: int
    per_class: int
    image_shape: tuple
    path: Path | None


@dataclass(frozen=True)
class ZooSection:
    arches: tuple
    train_seeds: tuple
    train: model_zoo.TrainConfig  # seed overridden per model at train time

    def model_names(self):
        return [f"{a}-s{s}" for a in self.arches for s in self.train_seeds]


@dataclass(frozen=True)
class AttackSection:
    config: attacks.AttackConfig
    method: str
    surrogate: str
    eval_count: int
    eval_seed: int | None
    attack_batch_size: int
    output: str
    stats: str


@dataclass(frozen=True)
class EvalSection:
    models: tuple
    methods: dict  # spec -> AttackConfig
    eval: EvalConfig
    report: str


@dataclass(frozen=True)
class SweepSection:
    models: tuple
    surrogate: str
    base: attacks.AttackConfig
    method: str
    ratios: tuple
    eval: EvalConfig
    report: str


@dataclass(frozen=True)
class AblateSection:
    models: tuple
    surrogate: str
    base: attacks.AttackConfig
    method: str
    ratio: float
    eval: EvalConfig
    report: str


@dataclass(frozen=True)
class RunConfig:
    path: Path
    seed: int
    out_dir: Path
    dataset: DatasetSection
    zoo: ZooSection | None = None
    attack: AttackSection | None = None
    eval: EvalSection | None = None
    sweep: SweepSection | None = None
    ablate: AblateSection | None = None
    problems: list = field(default_factory=list, compare=False)

    def require(self, *sections) -> "RunConfig":
        missing = [s for s in sections if getattr(self, s) is None]
        if missing:
            raise ConfigError([f"config {self.path} is missing the "
                               f"[{s}] section" for s in missing])
        return self

    def model_path(self, name: str) -> Path:
        return self.out_dir / "models" / f"{name}.mupc"

    def dataset_path(self) -> Path:
        return self.dataset.path or self.out_dir / "dataset.mupc"


def _parse_section(parser, name, problems):
    """Typed key/value dict for one section, or None when absent."""
    schema = _SCHEMAS[name]
    if not parser.has_section(name):
        return None
    values = {}
    for key in parser.options(name):
        if key not in schema:
            problems.append(f"[{name}] unknown key {key!r}")
            continue
        kind, _ = schema[key]
        raw = parser.get(name, key)
        try:
            values[key] = _PARSERS[kind](raw)
        except (ValueError, KeyError):
            problems.append(f"[{name}] {key} = {raw!r} is not a valid {kind}")
    for key, (_, default) in schema.items():
        if key in values:
            continue
        if default is _REQUIRED:
            problems.append(f"[{name}] missing required key {key!r}")
        else:
            values[key] = default
    return values


def _attack_overrides(vals, problems):
    """Optimizer override kwargs, after consistency checks against the
    method grammar (a ratio only makes sense for a mup- method, etc.)."""
    spec = vals.get("method", "")
    wrapper = spec.split("-", 1)[0] if "-" in spec else ""
    checks = (("ratio", "mup"), ("metric", "mup"),
              ("mask_biases", "mup"), ("gn_p", "gn"))
    for key, needs in checks:
        if vals.get(key) is not None and wrapper != needs:
            problems.append(
                f"[attack] {key} only applies to {needs}- methods, "
                f"but method = {spec!r}")
    keys = ("epsilon", "beta", "iterations", "mu", "sim_m", "taigr_s")
    return {k: vals[k] for k in keys if vals.get(k) is not None}


def _build_method(spec, seed, problems, section, **kwargs):
    try:
        return attacks.method_config(spec, seed=seed, **kwargs)
    except ValueError as exc:
        problems.append(f"[{section}] {exc}")
        return None


def _build_eval(vals, problems, section):
    try:
        return EvalConfig(
            eval_count=vals["eval_count"],
            attack_batch_size=vals["attack_batch_size"],
            accuracy_floor=vals["accuracy_floor"],
            eval_seed=vals["eval_seed"],
        )
    except ValueError as exc:
        problems.append(f"[{section}] {exc}")
        return None


def load_config(path) -> RunConfig:
    """Parse and fully validate a run config; raises ConfigError listing
    every problem found, never just the first."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError([f"cannot parse {path}: {exc}"])

    problems = []
    for section in parser.sections():
        if section not in _SCHEMAS:
            problems.append(f"unknown section [{section}], expected one of "
                            f"{sorted(_SCHEMAS)}")

    vals = {name: _parse_section(parser, name, problems) for name in _SCHEMAS}
    base = path.parent
    run = vals["run"] or {k: d for k, (_, d) in _SCHEMAS["run"].items()}
    seed = run["seed"]
    out_dir = base / run["out_dir"]

    ds = vals["dataset"] or {k: d for k, (_, d) in _SCHEMAS["dataset"].items()}
    if ds["classes"] < model_zoo.MIN_CLASSES:
        problems.append(f"[dataset] classes must be at least {model_zoo.MIN_CLASSES}")
    if ds["per_class"] < model_zoo.MIN_PER_CLASS:
        problems.append(f"[dataset] per_class must be at least {model_zoo.MIN_PER_CLASS}")
    if ds["height"] < model_zoo.MIN_SIDE or ds["width"] < model_zoo.MIN_SIDE:
        problems.append(f"[dataset] height and width must be at least {model_zoo.MIN_SIDE}")
    dataset = DatasetSection(
        seed=ds["seed"], classes=ds["classes"], per_class=ds["per_class"],
        image_shape=(1, ds["height"], ds["width"]),
        path=base / ds["path"] if ds["path"] else None,
    )

    zoo = None
    if vals["zoo"] is not None:
        z = vals["zoo"]
        arches = tuple(z.get("arches") or ())
        seeds = tuple(z.get("train_seeds") or ())
        unknown = [a for a in arches if a not in model_zoo.ARCH_NAMES]
        for arch in unknown:
            problems.append(f"[zoo] unknown arch {arch!r}, expected one of "
                            f"{model_zoo.ARCH_NAMES}")
        if z.get("arches") == [] or z.get("train_seeds") == []:
            problems.append("[zoo] arches and train_seeds must be non-empty")
        train = None
        try:
            train = model_zoo.TrainConfig(
                epochs=z["epochs"], learning_rate=z["learning_rate"],
                batch_size=z["batch_size"], weight_decay=z["weight_decay"],
                seed=seed)
        except ValueError as exc:
            problems.append(f"[zoo] {exc}")
        if train is not None and arches and seeds and not unknown:
            zoo = ZooSection(arches, seeds, train)

    attack = None
    if vals["attack"] is not None:
        a = vals["attack"]
        overrides = _attack_overrides(a, problems)
        kwargs = {key: a[key]
                  for key in ("ratio", "metric", "gn_p", "mask_biases")
                  if a.get(key) is not None}
        acfg = None
        if a.get("method"):
            acfg = _build_method(a["method"], seed, problems, "attack",
                                 **kwargs, **overrides)
        if a["eval_count"] < 1 or a["attack_batch_size"] < 1:
            problems.append("[attack] eval_count and attack_batch_size must "
                            "be positive")
        if acfg is not None and a.get("surrogate"):
            attack = AttackSection(
                config=acfg, method=a["method"], surrogate=a["surrogate"],
                eval_count=a["eval_count"], eval_seed=a["eval_seed"],
                attack_batch_size=a["attack_batch_size"],
                output=a["output"], stats=a["stats"])

    eval_section = None
    if vals["eval"] is not None:
        e = vals["eval"]
        models = tuple(e.get("models") or ())
        if e.get("models") is not None and len(models) < 2:
            problems.append("[eval] models must name at least 2 networks "
                            "(a transfer matrix needs victims)")
        methods = {}
        for spec in e.get("methods") or ():
            cfg = _build_method(spec, seed, problems, "eval")
            if cfg is not None:
                methods[spec] = cfg
        if e.get("methods") == []:
            problems.append("[eval] methods must name at least one attack")
        ecfg = _build_eval(e, problems, "eval")
        if ecfg is not None and methods and len(models) >= 2:
            eval_section = EvalSection(models, methods, ecfg,
                                       e["report"] or "transfer")

    sweep = None
    if vals["sweep"] is not None:
        s = vals["sweep"]
        models = tuple(s.get("models") or ())
        ratios = tuple(s.get("ratios") or ())
        if not ratios or ratios[0] != 0.0:
            problems.append("[sweep] ratios must start at 0")
        elif any(b <= a for a, b in zip(ratios, ratios[1:])):
            problems.append("[sweep] ratios must be strictly increasing")
        elif ratios[-1] >= 1.0:
            problems.append("[sweep] ratios must stay below 1")
        if s.get("models") is not None and len(models) < 2:
            problems.append("[sweep] models must name at least 2 networks")
        if s.get("surrogate") and models and s["surrogate"] not in models:
            problems.append(f"[sweep] surrogate {s['surrogate']!r} must be "
                            "one of the listed models")
        basecfg = _build_method(s["method"], seed, problems, "sweep") \
            if s.get("method") else None
        ecfg = _build_eval(s, problems, "sweep")
        if basecfg is not None and ecfg is not None and s.get("surrogate") \
                and len(models) >= 2 and ratios and ratios[0] == 0.0:
            sweep = SweepSection(models, s["surrogate"], basecfg, s["method"],
                                 ratios, ecfg, s["report"] or "sweep")

    ablate = None
    if vals["ablate"] is not None:
        ab = vals["ablate"]
        models = tuple(ab.get("models") or ())
        if ab.get("models") is not None and len(models) < 2:
            problems.append("[ablate] models must name at least 2 networks")
        if ab.get("surrogate") and models and ab["surrogate"] not in models:
            problems.append(f"[ablate] surrogate {ab['surrogate']!r} must be "
                            "one of the listed models")
        basecfg = _build_method(ab["method"], seed, problems, "ablate") \
            if ab.get("method") else None
        ratio = ab["ratio"]
        if ratio is None and basecfg is not None:
            ratio = attacks.TUNED_RATIOS.get(ab["method"], 0.15)
        if ratio is not None and not 0.0 <= ratio < 1.0:
            problems.append(f"[ablate] ratio must be in [0, 1), got {ratio}")
        ecfg = _build_eval(ab, problems, "ablate")
        if basecfg is not None and ecfg is not None and ab.get("surrogate") \
                and len(models) >= 2 and ratio is not None \
                and 0.0 <= ratio < 1.0:
            ablate = AblateSection(models, ab["surrogate"], basecfg,
                                   ab["method"], float(ratio), ecfg,
                                   ab["report"] or "ablation")

    if problems:
        raise ConfigError(problems)
    return RunConfig(path=path, seed=seed, out_dir=out_dir, dataset=dataset,
                     zoo=zoo, attack=attack, eval=eval_section, sweep=sweep,
                     ablate=ablate)
