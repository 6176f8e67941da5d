"""Flat ``key = value`` configuration files and the pipeline parameter set."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


class Order(str, enum.Enum):
    """Which diffusion stages run, and in what order."""

    TD_SD = "td-sd"
    SD_TD = "sd-td"
    SD = "sd"
    TD = "td"
    NONE = "none"

    @classmethod
    def parse(cls, text: str) -> "Order":
        key = text.strip().lower().replace("→", "->").replace(" ", "")
        aliases = {
            "td->sd": cls.TD_SD, "td-sd": cls.TD_SD, "td_sd": cls.TD_SD,
            "sd->td": cls.SD_TD, "sd-td": cls.SD_TD, "sd_td": cls.SD_TD,
            "sd": cls.SD, "sd-only": cls.SD, "sd_only": cls.SD,
            "td": cls.TD, "td-only": cls.TD, "td_only": cls.TD,
            "none": cls.NONE, "init": cls.NONE,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ConfigError(f"unknown diffusion order {text!r}") from None

    @property
    def uses_temporal(self) -> bool:
        return self in (Order.TD_SD, Order.SD_TD, Order.TD)

    @property
    def uses_spatial(self) -> bool:
        return self in (Order.TD_SD, Order.SD_TD, Order.SD)


def parse_kv(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    """Split ``key = value`` lines; ``#`` starts a comment, blank lines are skipped.

    Repeated keys are kept in file order.
    """
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out.append((key, value))
    return out


@dataclass
class PipelineConfig:
    p: float = 0.2
    k: int = 500
    mc: float = 10.0
    slic_iters: int = 10
    flow_threshold: float = 0.5
    alpha_t: float = 1.0
    alpha_spa: float = 0.1
    alpha_tem: float = 5.0
    rounds: int = 4
    epochs: int = 10
    n_pos: int = 20
    n_neg: int = 1
    order: Order = Order.TD_SD
    seed: int = 0
    learning_rate: float = 1e-4
    batch_size: int = 2
    # desk-scale knobs
    pretrain_epochs: int = 30
    pretrain_learning_rate: float = 0.05
    hidden: int = 16
    feature_stride: int = 4
    hist_bins: int = 4096
    model: str = "toy"
    prob_tol: float = 1e-3
    strict: bool = False
    jobs: int = 1

    def __post_init__(self):
        if isinstance(self.order, str):
            self.order = Order.parse(self.order)
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.p <= 1.0:
            raise ConfigError(f"p must be in (0, 1], got {self.p}")
        if not 0.0 <= self.flow_threshold <= 1.0:
            raise ConfigError(f"T must be in [0, 1], got {self.flow_threshold}")
        for name in ("alpha_t", "alpha_spa", "alpha_tem", "learning_rate", "pretrain_learning_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.k < 1:
            raise ConfigError(f"K must be >= 1, got {self.k}")
        if self.mc <= 0:
            raise ConfigError(f"M_c must be > 0, got {self.mc}")
        for name in ("slic_iters", "batch_size", "hidden", "feature_stride", "hist_bins", "jobs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("rounds", "epochs", "n_pos", "n_neg", "pretrain_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.model not in ("toy", "external"):
            raise ConfigError(f"model must be 'toy' or 'external', got {self.model!r}")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Order):
                v = v.value
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_ALIASES = {
    "K": "k",
    "M_c": "mc",
    "T": "flow_threshold",
    "lr": "learning_rate",
    "α_t": "alpha_t",
    "α_spa": "alpha_spa",
    "α_tem": "alpha_tem",
}


def _coerce(name: str, tp, value: str):
    try:
        if tp in (bool, "bool"):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if tp in (int, "int"):
            return int(value)
        if tp in (float, "float"):
            return float(value)
        if tp in (Order, "Order"):
            return Order.parse(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value for {name}: {value!r}") from None


def config_from_pairs(pairs, base: PipelineConfig | None = None) -> PipelineConfig:
    fields = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    values = dataclasses.asdict(base) if base is not None else {}
    for key, value in pairs:
        name = _ALIASES.get(key, key)
        if name not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        values[name] = _coerce(name, fields[name], value)
    return PipelineConfig(**values)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    return config_from_pairs(parse_kv(path.read_text(encoding="utf-8"), str(path)))


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(cfg.to_text(), encoding="utf-8")
