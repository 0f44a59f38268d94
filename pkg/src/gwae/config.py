"""Run configuration: flat key=value sections, validation, and hashing.

The file format is INI (configparser): every value is a scalar string,
so configs diff cleanly and hash canonically.  Documented keys and
defaults live in the dataclasses below; unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

MODEL_KINDS = ("gwae-np", "gwae-fnp", "gwae-gmp", "vae", "beta-vae", "wae-mmd")
DATASETS = ("gmm2d", "shapes2d", "digits8", "mnist")

# tuned-range gate from the reported hyperparameter search
LAMBDA_RANGES = {
    "lambda_w": (1.0, 10.0),
    "lambda_d": (1.0, 10.0),
    "lambda_h": (1e-4, 1.0),
}


@dataclass
class ModelSection:
    kind: str = "gwae-np"
    latent: int = 2
    width: int = 256
    critic_width: int = 256
    critic_feat: int = 64
    gmp_components: int = 5


@dataclass
class LossSection:
    lambda_w: float = 1.0
    lambda_d: float = 1.0
    lambda_h: float = 1.0
    lambda_gp: float = 10.0
    rho: int = 1
    xi: int = 2
    n_critic: int = 1
    beta: float = 1.0
    mmd_lambda: float = 10.0
    mmd_bandwidth: float = 0.0  # 0 -> sqrt(2 L)
    adversarial_recon: bool = False


@dataclass
class AblationSection:
    no_lw: bool = False
    no_ld: bool = False
    mmd_ld: bool = False
    z_only_critic: bool = False
    no_rh: bool = False
    rho_eq_xi: bool = False


@dataclass
class DataSection:
    dataset: str = "gmm2d"
    count: int = 2048
    components: int = 3
    side: int = 16
    path: str = ""
    downsample: int = 2
    classes: str = ""
    subsample: int = 0  # 0 -> keep everything
    ratios: str = "0.8,0.1,0.1"


@dataclass
class OptimSection:
    optimizer: str = "auto"  # auto: rmsprop for gwae-*, adam for baselines
    lr_main: float = 1e-4
    lr_critic: float = 5e-5


@dataclass
class TrainSection:
    epochs: int = 60
    batch_size: int = 64
    seed: int = 7
    patience: int = 10
    checkpoint_every: int = 1


_SECTIONS = {
    "model": ModelSection,
    "loss": LossSection,
    "ablation": AblationSection,
    "data": DataSection,
    "optim": OptimSection,
    "train": TrainSection,
}


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    data: DataSection = field(default_factory=DataSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)

    def ratios(self) -> tuple[float, float, float]:
        parts = [p for p in self.data.ratios.split(",") if p.strip()]
        if len(parts) != 3:
            raise ConfigError("data.ratios: expected three comma-separated values")
        try:
            vals = tuple(float(p) for p in parts)
        except ValueError:
            raise ConfigError(f"data.ratios: non-numeric value in {self.data.ratios!r}")
        return vals

    def class_filter(self) -> list[int] | None:
        if not self.data.classes.strip():
            return None
        try:
            return [int(c) for c in self.data.classes.split(",")]
        except ValueError:
            raise ConfigError(f"data.classes: expected integers, got {self.data.classes!r}")

    def effective_rho(self) -> int:
        return self.loss.xi if self.ablation.rho_eq_xi else self.loss.rho

    def optimizer_kind(self) -> str:
        if self.optim.optimizer != "auto":
            return self.optim.optimizer
        return "rmsprop" if self.model.kind.startswith("gwae") else "adam"

    def validate(self, allow_out_of_range: bool = False) -> None:
        m, l, t, d = self.model, self.loss, self.train, self.data
        if m.kind not in MODEL_KINDS:
            raise ConfigError(f"model.kind: {m.kind!r} not one of {MODEL_KINDS}")
        if m.latent < 1:
            raise ConfigError("model.latent: must be >= 1")
        if m.gmp_components < 1:
            raise ConfigError("model.gmp_components: must be >= 1")
        if d.dataset not in DATASETS:
            raise ConfigError(f"data.dataset: {d.dataset!r} not one of {DATASETS}")
        if t.batch_size < 2:
            raise ConfigError("train.batch_size: must be >= 2")
        if t.epochs < 1:
            raise ConfigError("train.epochs: must be >= 1")
        if t.patience < 1:
            raise ConfigError("train.patience: must be >= 1")
        if l.rho not in (1, 2) or l.xi not in (1, 2):
            raise ConfigError("loss.rho/loss.xi: must be 1 or 2")
        if l.n_critic < 0:
            raise ConfigError("loss.n_critic: must be >= 0")
        for name in ("lambda_w", "lambda_d", "lambda_h", "lambda_gp", "beta",
                     "mmd_lambda"):
            if getattr(l, name) < 0:
                raise ConfigError(f"loss.{name}: must be non-negative")
        ratios = self.ratios()
        if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError("data.ratios: must be non-negative and sum to 1")
        if self.optim.optimizer not in ("auto", "rmsprop", "adam"):
            raise ConfigError("optim.optimizer: must be auto, rmsprop, or adam")
        if not allow_out_of_range and m.kind.startswith("gwae"):
            for name, (lo, hi) in LAMBDA_RANGES.items():
                val = getattr(l, name)
                if not lo <= val <= hi:
                    raise ConfigError(
                        f"loss.{name}: {val} outside the tuned range [{lo}, {hi}]"
                        " (pass --allow-out-of-range to override)"
                    )

    def to_flat_dict(self) -> dict[str, str]:
        out = {}
        for sec_name, section in _SECTIONS.items():
            values = asdict(getattr(self, sec_name))
            for key, val in values.items():
                out[f"{sec_name}.{key}"] = _fmt(val)
        return out

    def config_hash(self) -> str:
        lines = [f"{k}={v}" for k, v in sorted(self.to_flat_dict().items())]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]

    def write(self, path) -> None:
        parser = configparser.ConfigParser()
        for sec_name in _SECTIONS:
            parser[sec_name] = {
                k: _fmt(v) for k, v in asdict(getattr(self, sec_name)).items()
            }
        with open(path, "w") as fh:
            parser.write(fh)


def _fmt(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    return repr(val) if isinstance(val, float) else str(val)


def _parse_value(raw: str, target_type, where: str):
    raw = raw.strip()
    try:
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return target_type(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {target_type.__name__}")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}")
    cfg = RunConfig()
    for sec_name in parser.sections():
        if sec_name not in _SECTIONS:
            raise ConfigError(f"unknown config section [{sec_name}]")
        section = getattr(cfg, sec_name)
        known = {f.name: f.type for f in fields(section)}
        types = {f.name: type(getattr(section, f.name)) for f in fields(section)}
        for key, raw in parser[sec_name].items():
            if key not in known:
                raise ConfigError(f"{sec_name}.{key}: unknown key")
            setattr(section, key, _parse_value(raw, types[key], f"{sec_name}.{key}"))
    return cfg
