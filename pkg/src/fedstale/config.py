"""Declarative experiment configs: flat `key = value` lines with dotted
section prefixes, every field defaulted, unknown keys rejected."""

from __future__ import annotations

from dataclasses import dataclass, field, replace as dc_replace

from .baselines import FirstOrderParams, WeightingParams
from .data import PartitionSpec, StalenessPlan
from .inversion import GIConfig
from .nn import ConfigError, OptConfig

SCENARIOS = ("fixed_data", "variant_data")


@dataclass(frozen=True)
class DataConfig:
    source: str = "blobs"
    num_classes: int = 10
    dim: int = 16
    samples_per_class: int = 100
    test_samples_per_class: int = 25
    spread: float = 0.12
    csv_path: str = ""

    def __post_init__(self):
        if self.source not in ("blobs", "csv"):
            raise ConfigError("data.source must be blobs or csv")
        if self.source == "csv" and not self.csv_path:
            raise ConfigError("data.csv_path required when data.source = csv")


@dataclass(frozen=True)
class VariationConfig:
    rate: float = 1.0
    pool_spread: float = 0.2

    def __post_init__(self):
        if self.rate < 0:
            raise ConfigError("variation.rate must be >= 0")
        if self.pool_spread < 0:
            raise ConfigError("variation.pool_spread must be >= 0")


@dataclass(frozen=True)
class SwitchConfig:
    enabled: bool = True
    smoothing_window: int = 3
    window_frac: float = 0.1
    force_epoch: int | None = None

    def __post_init__(self):
        if self.smoothing_window < 1:
            raise ConfigError("switch.smoothing_window must be >= 1")
        if self.window_frac < 0:
            raise ConfigError("switch.window_frac must be >= 0")


@dataclass
class ExperimentConfig:
    scenario: str = "fixed_data"
    num_clients: int = 100
    total_epochs: int = 200
    methods: tuple[str, ...] = ("ours",)
    seeds: tuple[int, ...] = (0,)
    alpha: float = 0.1
    noise_variance: float = 0.0
    out_dir: str = "results"
    record_timing: bool = False
    detector_enabled: bool = True
    model_hidden: tuple[int, ...] = (32,)
    model_activation: str = "relu"
    data: DataConfig = field(default_factory=DataConfig)
    staleness: StalenessPlan = field(
        default_factory=lambda: StalenessPlan(target_class=5, num_stale_clients=10,
                                              staleness_epochs=40))
    opt: OptConfig = field(
        default_factory=lambda: OptConfig(kind="sgd_momentum", learning_rate=0.01,
                                          momentum=0.5, local_steps=5))
    gi: GIConfig = field(default_factory=GIConfig)
    weighting: WeightingParams = field(default_factory=WeightingParams)
    first_order: FirstOrderParams = field(default_factory=FirstOrderParams)
    variation: VariationConfig = field(default_factory=VariationConfig)
    switch: SwitchConfig = field(default_factory=SwitchConfig)
    gi_dump_d_rec: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if self.noise_variance < 0:
            raise ConfigError("noise_variance must be >= 0")
        if not self.methods:
            raise ConfigError("at least one method is required")
        from .sim import METHODS
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.model_hidden:
            raise ConfigError("model.hidden must name at least one layer width")

    def partition_spec(self, seed: int) -> PartitionSpec:
        return PartitionSpec(self.num_clients, self.alpha, seed)


# --- key table: config key -> (caster name, attribute path) ---

def _bool(v: str) -> bool:
    lo = v.strip().lower()
    if lo in ("true", "1", "yes"):
        return True
    if lo in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _int_list(v: str) -> tuple[int, ...]:
    return tuple(int(x.strip()) for x in v.split(",") if x.strip())


def _str_list(v: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in v.split(",") if x.strip())


def _opt_int(v: str):
    return None if v.strip().lower() in ("none", "") else int(v)


def _batch(v: str):
    return "full" if v.strip().lower() == "full" else int(v)


KEY_TABLE = {
    "scenario": (str.strip, ("scenario",)),
    "num_clients": (int, ("num_clients",)),
    "total_epochs": (int, ("total_epochs",)),
    "method": (_str_list, ("methods",)),
    "seeds": (_int_list, ("seeds",)),
    "alpha": (float, ("alpha",)),
    "noise_variance": (float, ("noise_variance",)),
    "out_dir": (str.strip, ("out_dir",)),
    "record_timing": (_bool, ("record_timing",)),
    "detector_enabled": (_bool, ("detector_enabled",)),
    "model.hidden": (_int_list, ("model_hidden",)),
    "model.activation": (str.strip, ("model_activation",)),
    "data.source": (str.strip, ("data", "source")),
    "data.num_classes": (int, ("data", "num_classes")),
    "data.dim": (int, ("data", "dim")),
    "data.samples_per_class": (int, ("data", "samples_per_class")),
    "data.test_samples_per_class": (int, ("data", "test_samples_per_class")),
    "data.spread": (float, ("data", "spread")),
    "data.csv_path": (str.strip, ("data", "csv_path")),
    "staleness.target_class": (int, ("staleness", "target_class")),
    "staleness.num_stale_clients": (int, ("staleness", "num_stale_clients")),
    "staleness.staleness_epochs": (int, ("staleness", "staleness_epochs")),
    "opt.kind": (str.strip, ("opt", "kind")),
    "opt.learning_rate": (float, ("opt", "learning_rate")),
    "opt.momentum": (float, ("opt", "momentum")),
    "opt.prox_mu": (float, ("opt", "prox_mu")),
    "opt.local_steps": (int, ("opt", "local_steps")),
    "opt.batch_size": (_batch, ("opt", "batch_size")),
    "gi.d_rec_fraction": (float, ("gi", "d_rec_fraction")),
    "gi.max_iters": (int, ("gi", "max_iters")),
    "gi.inner_lr": (float, ("gi", "inner_lr")),
    "gi.stop_tol": (float, ("gi", "stop_tol")),
    "gi.sparsification_rate": (float, ("gi", "sparsification_rate")),
    "gi.unroll_steps": (_opt_int, ("gi", "unroll_steps")),
    "gi.plateau_patience": (_opt_int, ("gi", "plateau_patience")),
    "gi.plateau_rel_improvement": (float, ("gi", "plateau_rel_improvement")),
    "gi.dump_d_rec": (_bool, ("gi_dump_d_rec",)),
    "weighting.a": (float, ("weighting", "a")),
    "weighting.b": (float, ("weighting", "b")),
    "first_order.lambda": (float, ("first_order", "lam")),
    "variation.rate": (float, ("variation", "rate")),
    "variation.pool_spread": (float, ("variation", "pool_spread")),
    "switch.enabled": (_bool, ("switch", "enabled")),
    "switch.smoothing_window": (int, ("switch", "smoothing_window")),
    "switch.window_frac": (float, ("switch", "window_frac")),
    "switch.force_epoch": (_opt_int, ("switch", "force_epoch")),
}

def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse `key = value` lines (blank lines and # comments ignored).

    Unknown keys, bad values and constraint violations raise ConfigError
    naming the key and line.
    """
    top: dict = {}
    sections: dict[str, dict] = {}
    unroll_given = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in KEY_TABLE:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        caster, path = KEY_TABLE[key]
        try:
            parsed = caster(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
        if key == "gi.unroll_steps" and parsed is not None:
            unroll_given = True
        if len(path) == 1:
            top[path[0]] = parsed
        else:
            sections.setdefault(path[0], {})[path[1]] = parsed

    defaults = ExperimentConfig()
    kwargs = dict(top)
    for section, values in sections.items():
        if section == "gi" and "unroll_steps" in values and values["unroll_steps"] is None:
            del values["unroll_steps"]
        try:
            kwargs[section] = dc_replace(getattr(defaults, section), **values)
        except ConfigError as exc:
            raise ConfigError(f"{source}: in section {section!r}: {exc}") from exc
    try:
        config = ExperimentConfig(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    if not unroll_given and config.gi.unroll_steps != config.opt.local_steps:
        config.gi = dc_replace(config.gi, unroll_steps=config.opt.local_steps)
    return config


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return parse_config_text(f.read(), source=str(path))


def serialize_config(config: ExperimentConfig) -> str:
    """Canonical text form; parse_config_text(serialize_config(c)) == c."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        if v is None:
            return "none"
        return str(v)

    lines = []
    for key, (_, path) in KEY_TABLE.items():
        if len(path) == 1:
            value = getattr(config, path[0])
        else:
            value = getattr(getattr(config, path[0]), path[1])
        lines.append(f"{key} = {fmt(value)}")
    return "\n".join(lines) + "\n"


# --- presets: the experiment grids the harness knows how to run ---

ALL_BASELINES = "unweighted,weighted,first_order,w_pred,asyn_tiers,ours"

_DESK = {
    "num_clients": "20",
    "total_epochs": "200",
    "seeds": "0,1,2",
    "alpha": "0.1",
    "staleness.staleness_epochs": "40",
    "method": ALL_BASELINES,
    "gi.max_iters": "400",
    "gi.stop_tol": "2e-4",
    "gi.sparsification_rate": "0.95",
}

PRESETS: dict[str, dict] = {
    # fixed-data main comparison
    "table7": {"base": dict(_DESK)},
    # data-heterogeneity sweep
    "table8": {"base": dict(_DESK), "sweep": ("alpha", ["1", "0.1", "0.01"])},
    # staleness sweep
    "table9": {"base": dict(_DESK),
               "sweep": ("staleness.staleness_epochs", ["10", "40", "100"])},
    # switch-point A/B (auto vs none vs forced +/- 20); special-cased in the harness
    "table2": {"base": {**_DESK, "method": "ours",
                        "staleness.staleness_epochs": "10"}},
    # gamma-decay window sweep
    "table3": {"base": {**_DESK, "method": "ours", "staleness.staleness_epochs": "10"},
               "sweep": ("switch.window_frac", ["0", "0.05", "0.1", "0.2"])},
    # variant-data staleness sweep
    "table12": {"base": {**_DESK, "scenario": "variant_data", "variation.rate": "1"},
                "sweep": ("staleness.staleness_epochs", ["10", "40", "100"])},
    # variation-rate sweep
    "table13": {"base": {**_DESK, "scenario": "variant_data"},
                "sweep": ("variation.rate", ["0.5", "1", "2"])},
    # sparsification sweep
    "table22": {"base": {**_DESK, "method": "ours"},
                "sweep": ("gi.sparsification_rate", ["0.0", "0.9", "0.95", "0.99"])},
}


def preset_config(name: str, overrides: dict | None = None) -> ExperimentConfig:
    """Config for a preset's base cell; overrides are config-key strings."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    pairs = dict(PRESETS[name]["base"])
    if overrides:
        pairs.update(overrides)
    text = "\n".join(f"{k} = {v}" for k, v in pairs.items())
    return parse_config_text(text, source=f"<preset:{name}>")
