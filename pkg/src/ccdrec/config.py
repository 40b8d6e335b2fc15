"""Run configuration: schema, parsing, validation, and manifest emission.

Config files are flat ``section.key = value`` lines (``#`` comments allowed).
Every key is declared in :data:`SCHEMA` with a type, default, and validity
range; unknown keys are rejected and validation errors name the offending
key. A run manifest is the same format round-tripped, so it re-parses to an
equivalent configuration.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from . import __version__
from .data_stream import SyntheticStreamSpec
from .engine import CycleConfig
from .entity_init import STRATEGIES
from .losses import ObjectiveWeights

DELIMITERS = {"tab": "\t", "comma": ",", "space": " ", "semicolon": ";", "pipe": "|"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    source: str = "synthetic"
    path: str = ""
    delimiter: str = "tab"
    columns: tuple = ("user", "item", "timestamp")
    synth: SyntheticStreamSpec = field(default_factory=SyntheticStreamSpec)
    # partitioning
    num_blocks: int = 5
    test_fraction: float = 0.2
    partition_mode: str = "count"
    # models
    teacher_dim: int = 64
    student_dim: int = 8
    ensemble_size: int = 3
    variant: str = "mf"
    graph_layers: int = 2
    # schedule and objectives
    cycle: CycleConfig = field(default_factory=CycleConfig)
    # proxies and sampling
    w_sp: float = 0.1
    w_pp: float = 0.9
    epsilon: float = 0.05
    n_samples: int = 3
    top_n: int = 10
    prominent_fraction: float = 0.05
    # optimization
    lr: float = 0.05
    weight_decay: float = 1e-4
    user_batch: int = 64
    kd_tail_sample: int | None = None
    init_strategy: str = "ccd_2hop"
    # evaluation
    k_values: tuple = (10, 20)
    # run
    seed: int = 0
    out_dir: str = "out"

    @property
    def delimiter_char(self) -> str:
        return DELIMITERS[self.delimiter]


# key -> (getter path, parse, format, validate)

def _parse_bool(raw: str) -> bool:
    if raw.lower() in ("true", "1", "yes"):
        return True
    if raw.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_list(raw: str) -> tuple:
    return tuple(int(tok) for tok in raw.split(",") if tok.strip())


def _parse_str_list(raw: str) -> tuple:
    return tuple(tok.strip() for tok in raw.split(",") if tok.strip())


def _parse_optional_int(raw: str):
    return None if raw.lower() == "none" else int(raw)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _fraction(v):
    return 0 < v < 1


SCHEMA: dict[str, dict] = {
    "data.source": dict(path="source", parse=str, check=lambda v: v in ("synthetic", "file"),
                        doc="synthetic | file"),
    "data.path": dict(path="path", parse=str, check=lambda v: True,
                      doc="interaction file (when data.source = file)"),
    "data.delimiter": dict(path="delimiter", parse=str, check=lambda v: v in DELIMITERS,
                           doc="|".join(DELIMITERS)),
    "data.columns": dict(path="columns", parse=_parse_str_list,
                         check=lambda v: sorted(v) == ["item", "timestamp", "user"],
                         doc="column order, naming user,item,timestamp"),
    "synth.users": dict(path="synth.num_users", parse=int, check=_positive, doc="user count"),
    "synth.items": dict(path="synth.num_items", parse=int, check=_positive, doc="item count"),
    "synth.blocks": dict(path="synth.num_blocks", parse=int, check=lambda v: v >= 2,
                         doc="stream blocks"),
    "synth.interactions_per_block": dict(path="synth.interactions_per_block", parse=int,
                                         check=_positive, doc="events per block"),
    "synth.latent_dim": dict(path="synth.latent_dim", parse=int, check=_positive,
                             doc="generator latent dimension"),
    "synth.drift_rate": dict(path="synth.drift_rate", parse=float,
                             check=lambda v: 0 <= v <= 1, doc="preference drift in [0,1]"),
    "synth.arrival_rate": dict(path="synth.arrival_rate", parse=float,
                               check=lambda v: 0 <= v < 1, doc="new-entity rate in [0,1)"),
    "synth.dormant_users": dict(path="synth.num_dormant_users", parse=int, check=_nonneg,
                                doc="engineered dormant cohort size"),
    "partition.num_blocks": dict(path="num_blocks", parse=int, check=lambda v: v >= 2,
                                 doc="blocks to cut the stream into"),
    "partition.test_fraction": dict(path="test_fraction", parse=float, check=_fraction,
                                    doc="per-user holdout fraction in (0,1)"),
    "partition.mode": dict(path="partition_mode", parse=str,
                           check=lambda v: v in ("count", "time"), doc="count | time"),
    "model.teacher_dim": dict(path="teacher_dim", parse=int, check=_positive,
                              doc="teacher embedding dimension"),
    "model.student_dim": dict(path="student_dim", parse=int, check=_positive,
                              doc="student embedding dimension"),
    "model.ensemble_size": dict(path="ensemble_size", parse=int, check=_positive,
                                doc="teacher ensemble members"),
    "model.variant": dict(path="variant", parse=str, check=lambda v: v in ("mf", "graphprop"),
                          doc="mf | graphprop"),
    "model.graph_layers": dict(path="graph_layers", parse=int, check=_nonneg,
                               doc="propagation layers (graphprop)"),
    "cycle.sub_cycles": dict(path="cycle.sub_cycles", parse=int, check=_positive,
                             doc="student update cycles per block"),
    "cycle.kd_epochs": dict(path="cycle.kd_epochs", parse=int, check=_nonneg,
                            doc="distillation epochs"),
    "cycle.student_epochs": dict(path="cycle.student_epochs", parse=int, check=_nonneg,
                                 doc="epochs per student sub-cycle"),
    "cycle.teacher_epochs": dict(path="cycle.teacher_epochs", parse=int, check=_nonneg,
                                 doc="teacher update epochs"),
    "cycle.resample_replay_each_epoch": dict(path="cycle.resample_replay_each_epoch",
                                             parse=_parse_bool, check=lambda v: True,
                                             doc="redraw replay sets every epoch"),
    "weights.replay": dict(path="cycle.weights.replay", parse=float, check=_nonneg,
                           doc="replay loss weight"),
    "weights.anchor": dict(path="cycle.weights.anchor", parse=float, check=_nonneg,
                           doc="teacher anchoring weight"),
    "weights.transfer_init": dict(path="cycle.weights.transfer_init", parse=float, check=_nonneg,
                                  doc="initial transfer weight"),
    "weights.transfer_tau": dict(path="cycle.weights.transfer_tau", parse=float, check=_positive,
                                 doc="transfer annealing time constant"),
    "flags.disable_replay": dict(path="cycle.disable_replay", parse=_parse_bool,
                                 check=lambda v: True, doc="ablation flag"),
    "flags.disable_sp": dict(path="cycle.disable_sp", parse=_parse_bool,
                             check=lambda v: True, doc="ablation flag"),
    "flags.disable_pp": dict(path="cycle.disable_pp", parse=_parse_bool,
                             check=lambda v: True, doc="ablation flag"),
    "flags.disable_s_to_t": dict(path="cycle.disable_s_to_t", parse=_parse_bool,
                                 check=lambda v: True, doc="ablation flag"),
    "flags.disable_proxies_in_s_to_t": dict(path="cycle.disable_proxies_in_s_to_t",
                                            parse=_parse_bool, check=lambda v: True,
                                            doc="ablation flag"),
    "flags.disable_annealing": dict(path="cycle.disable_annealing", parse=_parse_bool,
                                    check=lambda v: True, doc="ablation flag"),
    "flags.disable_entity_init": dict(path="cycle.disable_entity_init", parse=_parse_bool,
                                      check=lambda v: True, doc="ablation flag"),
    "proxy.w_sp": dict(path="w_sp", parse=float, check=lambda v: 0 <= v <= 1,
                       doc="stability proxy update weight"),
    "proxy.w_pp": dict(path="w_pp", parse=float, check=lambda v: 0 <= v <= 1,
                       doc="plasticity proxy update weight"),
    "proxy.epsilon": dict(path="epsilon", parse=float, check=_positive,
                          doc="disparity sharpness"),
    "proxy.n_samples": dict(path="n_samples", parse=int, check=_nonneg,
                            doc="replay/transfer samples per user per source"),
    "proxy.top_n": dict(path="top_n", parse=int, check=_positive,
                        doc="list length for distillation and disparity"),
    "init.strategy": dict(path="init_strategy", parse=str, check=lambda v: v in STRATEGIES,
                          doc="|".join(STRATEGIES)),
    "init.prominent_fraction": dict(path="prominent_fraction", parse=float,
                                    check=lambda v: 0 < v <= 1, doc="prominent set fraction"),
    "train.lr": dict(path="lr", parse=float, check=_positive, doc="learning rate"),
    "train.weight_decay": dict(path="weight_decay", parse=float, check=_nonneg,
                               doc="L2 decay on touched rows"),
    "train.user_batch": dict(path="user_batch", parse=int, check=_positive,
                             doc="users per optimizer step"),
    "train.kd_tail_sample": dict(path="kd_tail_sample", parse=_parse_optional_int,
                                 check=lambda v: v is None or v > 0,
                                 doc="sampled tail size for the distillation denominator"),
    "eval.k_values": dict(path="k_values", parse=_parse_int_list,
                          check=lambda v: len(v) > 0 and all(k > 0 for k in v),
                          doc="metric cutoffs"),
    "run.seed": dict(path="seed", parse=int, check=_nonneg, doc="root seed"),
    "run.out_dir": dict(path="out_dir", parse=str, check=lambda v: bool(v),
                        doc="output directory"),
}


def _get_path(cfg: RunConfig, path: str):
    obj = cfg
    parts = path.split(".")
    for part in parts[:-1]:
        obj = getattr(obj, part)
    return getattr(obj, parts[-1])


def _set_path(cfg: RunConfig, path: str, value):
    obj = cfg
    parts = path.split(".")
    for part in parts[:-1]:
        obj = getattr(obj, part)
    setattr(obj, parts[-1], value)


def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        spec = SCHEMA.get(key)
        if spec is None:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            parsed = spec["parse"](value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{key}: cannot parse {value!r}: {exc}") from exc
        if not spec["check"](parsed):
            raise ConfigError(f"{key}: value {value!r} outside the documented range")
        _set_path(cfg, spec["path"], parsed)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def validate(cfg: RunConfig):
    """Cross-field checks on an assembled configuration."""
    if cfg.source == "file" and not cfg.path:
        raise ConfigError("data.path: required when data.source = file")
    if cfg.source == "synthetic":
        try:
            cfg.synth.validate()
        except ValueError as exc:
            raise ConfigError(f"synth: {exc}") from exc
        if cfg.num_blocks != cfg.synth.num_blocks:
            raise ConfigError("partition.num_blocks: must equal synth.blocks "
                              f"({cfg.num_blocks} != {cfg.synth.num_blocks})")
    if not (cfg.w_sp < cfg.w_pp):
        raise ConfigError(f"proxy.w_sp: must be strictly below proxy.w_pp "
                          f"({cfg.w_sp} >= {cfg.w_pp})")
    if cfg.student_dim > cfg.teacher_dim:
        raise ConfigError("model.student_dim: must not exceed model.teacher_dim")
    try:
        # re-run the dataclass validations for values set programmatically
        dataclasses.replace(cfg.cycle)
        dataclasses.replace(cfg.cycle.weights)
    except (ValueError, RuntimeError) as exc:
        raise ConfigError(f"cycle: {exc}") from exc


def manifest_text(cfg: RunConfig) -> str:
    """Full normalized config echo; re-parses to an equivalent RunConfig."""
    lines = [f"# ccdrec {__version__} run manifest"]
    for key in sorted(SCHEMA):
        lines.append(f"{key} = {_fmt(_get_path(cfg, SCHEMA[key]['path']))}")
    return "\n".join(lines) + "\n"


def schema_text() -> str:
    lines = ["# configuration schema: key = default   (description)"]
    defaults = RunConfig()
    for key in sorted(SCHEMA):
        spec = SCHEMA[key]
        lines.append(f"{key} = {_fmt(_get_path(defaults, spec['path']))}   # {spec['doc']}")
    return "\n".join(lines) + "\n"
