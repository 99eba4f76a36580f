"""Flat ``key = value`` run configuration with presets and overrides."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from . import tensor as T
from .attacks import CwConfig, FgsmGrid
from .errors import ConfigError
from .training import TrainConfig

# learning rate / momentum per head when the config leaves them unset
HEAD_OPTIM = {"softmax-2": (1e-2, 0.9), "mpm-1": (1e-3, 0.5)}


@dataclass
class RunConfig:
    dataset: str = "mnist"
    head: str = "mpm-1"
    positive_digit: int = 0
    data_dir: Optional[str] = None
    train_samples: Optional[int] = None  # None = full split
    test_samples: Optional[int] = None
    epochs: int = 100
    lr: Optional[float] = None
    momentum: Optional[float] = None
    lr_decay_epochs: tuple[int, ...] = (50, 80)
    lr_decay_factor: float = 0.1
    batch_size: int = 128
    dual_lr: Optional[float] = None
    seed: int = 0
    cov_reg: float = T.COV_REG
    cov_unbiased: bool = False
    sqrt_sigma: float = T.SQRT_SMOOTHING
    constraint_mode: str = "lagrangian-dual"
    aug_penalty: float = 10.0
    composition: Optional[str] = None  # None: balanced for mpm, natural for softmax
    freeze_source: str = "train"
    input_mean: float = 0.0
    input_std: float = 1.0
    # attacks
    attack_examples: Optional[int] = None
    fgsm_max: Optional[float] = None
    fgsm_step: Optional[float] = None
    fgsm_mode: str = "frozen-stats"
    cw_binary_search_steps: int = 6
    cw_c_initial: float = 1e-3
    cw_max_iterations: int = 500
    cw_step_size: float = 1e-2
    cw_confidence: float = 0.0
    cw_batch_size: int = 200

    def train_config(self) -> TrainConfig:
        lr, mom = HEAD_OPTIM.get(self.head, (1e-3, 0.5))
        composition = self.composition or ("balanced" if self.head == "mpm-1" else "natural")
        return TrainConfig(
            epochs=self.epochs, lr=lr if self.lr is None else self.lr,
            momentum=mom if self.momentum is None else self.momentum,
            lr_decay_epochs=self.lr_decay_epochs, lr_decay_factor=self.lr_decay_factor,
            batch_size=self.batch_size, dual_lr=self.dual_lr, seed=self.seed,
            cov_reg=self.cov_reg, cov_unbiased=self.cov_unbiased, sqrt_sigma=self.sqrt_sigma,
            constraint_mode=self.constraint_mode, aug_penalty=self.aug_penalty,
            composition=composition, freeze_source=self.freeze_source,
        )

    def fgsm_grid(self) -> FgsmGrid:
        default = FgsmGrid.mnist() if self.dataset == "mnist" else FgsmGrid.cifar10()
        if self.fgsm_max is None and self.fgsm_step is None:
            return default
        stop = self.fgsm_max if self.fgsm_max is not None else default.epsilons[-1]
        step = self.fgsm_step if self.fgsm_step is not None else default.epsilons[1]
        return FgsmGrid.linspace(stop, step)

    def cw_config(self) -> CwConfig:
        return CwConfig(self.cw_binary_search_steps, self.cw_c_initial, self.cw_max_iterations,
                        self.cw_step_size, self.cw_confidence, batch_size=self.cw_batch_size)

    def snapshot(self) -> dict[str, str]:
        return {k: _fmt(v) for k, v in asdict(self).items()}


PRESETS: dict[str, dict[str, str]] = {
    "desk-mnist": {"dataset": "mnist", "train_samples": "5000", "epochs": "10", "batch_size": "128",
                   "attack_examples": "200"},
    "full-mnist": {"dataset": "mnist", "epochs": "100", "batch_size": "128"},
    "desk-cifar10": {"dataset": "cifar10", "train_samples": "5000", "epochs": "10", "batch_size": "128",
                     "attack_examples": "200"},
    "full-cifar10": {"dataset": "cifar10", "epochs": "100", "batch_size": "128"},
}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(name: str, raw: str, default):
    f = {f.name: f for f in fields(RunConfig)}[name]
    typ = str(f.type)
    text = raw.strip()
    if text.lower() in ("none", "") and "Optional" in typ:
        return None
    try:
        if "tuple" in typ:
            return tuple(int(s) for s in text.split(",") if s.strip())
        if "bool" in typ:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "int" in typ:
            return int(text)
        if "float" in typ:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from exc
    return text


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def build_config(config_file=None, preset: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the preset, then the file, then explicit overrides."""
    values: dict[str, str] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[preset])
    if config_file is not None:
        values.update(parse_kv_text(Path(config_file).read_text(), str(config_file)))
    for k, v in (overrides or {}).items():
        values[k.replace("-", "_")] = str(v)
    known = {f.name: f for f in fields(RunConfig)}
    kwargs = {}
    for k, v in values.items():
        if k not in known:
            raise ConfigError(f"unknown config key {k!r}")
        kwargs[k] = _coerce(k, v, known[k].default)
    cfg = RunConfig(**kwargs)
    if cfg.dataset not in ("mnist", "cifar10"):
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    if cfg.head not in HEAD_OPTIM:
        raise ConfigError(f"unknown head {cfg.head!r}")
    return cfg
