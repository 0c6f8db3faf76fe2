"""Flat ``key = value`` run configuration with dotted namespaces."""

from __future__ import annotations

import os
from pathlib import Path

SEED_ENV = "USAD_SEED"
STAGES = ("diffusion", "pretrain", "finetune")
TOGGLES = ("spatial_attn", "temporal_attn", "adaptive_loss", "augmentation")

# key -> default; the default's type decides how text values are parsed
DEFAULTS: dict[str, object] = {
    "seed": None,
    "stages": "diffusion,pretrain,finetune",
    # data
    "data.source": "toy",
    "data.prepared": "",
    "data.window": 90,
    "data.step": 45,
    "data.label_rule": "majority",
    "data.channels": "x,y,z",
    "data.header": True,
    "data.sample_rate": 20.0,
    "data.split": "0.6,0.2,0.2",
    "data.normalize": False,
    "data.toy.classes": 2,
    "data.toy.length": 32,
    "data.toy.per_class": 100,
    "data.toy.imbalance": 1.0,
    "data.toy.noise": 0.2,
    "data.toy.channels": 1,
    # stage 1
    "diffusion.T": 50,
    "diffusion.s": 0.008,
    "diffusion.channels": 32,
    "diffusion.blocks": 3,
    "diffusion.kernel": 5,
    "diffusion.epochs": 60,
    "diffusion.lr": 0.002,
    "diffusion.batch": 64,
    "diffusion.weighting": "capped",
    "diffusion.clip": True,
    # stage 2
    "synth.M": -1,
    "synth.balanced": True,
    "pretrain.epochs": 20,
    "pretrain.lr": 0.002,
    "pretrain.batch": 64,
    # stage 3
    "finetune.epochs": 20,
    "finetune.lr": 0.002,
    "finetune.batch": 64,
    "finetune.mix": 0.0,
    "optim.name": "adam",
    # classifier
    "model.kind": "usad",
    "model.K": 2,
    "model.R": 2,
    "model.kernels": "3,5,7",
    "model.channels": 32,
    "model.dropout": 0.3,
    "model.spatial_attn": True,
    "model.temporal_attn": True,
    "model.spatial_position": "pre_sum",
    # loss
    "loss.adaptive": True,
    "loss.epsilon": 0.1,
    "loss.gamma": 1.0,
    "loss.alpha": 0.5,
    "loss.tau": 0.5,
    "loss.temperature": 1.0,
    "loss.w_min": 0.1,
    "loss.w_max": 0.8,
    "loss.omega": "0.33,0.33,0.34",
    "loss.cb_beta": 0.0,
    # evaluation
    "eval.ece_bins": 15,
}


class ConfigError(ValueError):
    """Unknown key, unparsable value or missing mandatory setting."""


def _parse(key: str, text) -> object:
    default = DEFAULTS[key]
    if not isinstance(text, str):
        return text
    text = text.strip()
    if key == "seed":
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"seed must be an integer, got {text!r}") from None
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r} (expected {type(default).__name__})") from None
    return text


def parse_text(text: str, source: str = "<text>") -> dict[str, object]:
    out: dict[str, object] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = _parse(key, value)
    return out


class RunConfig:
    """Resolved settings. Lookup by key: ``cfg["diffusion.T"]``."""

    def __init__(self, values: dict[str, object] | None = None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            self.values[key] = _parse(key, value)
        self.validate()

    def __getitem__(self, key: str):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        return RunConfig({**self.values, **overrides})

    @classmethod
    def load(cls, path=None, overrides: dict[str, object] | None = None, env=None) -> "RunConfig":
        """File values, then explicit overrides; ``USAD_SEED`` only fills a seed nobody set."""
        values: dict[str, object] = {}
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            values.update(parse_text(path.read_text(), str(path)))
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = _parse(key, value)
        env = os.environ if env is None else env
        if values.get("seed") is None and env.get(SEED_ENV):
            values["seed"] = _parse("seed", env[SEED_ENV])
        return cls(values)

    def validate(self) -> None:
        if self.values["seed"] is None:
            raise ConfigError(f"seed is mandatory (set seed = <int>, an override, or {SEED_ENV})")
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ConfigError(f"unknown stages {unknown}; expected a subset of {list(STAGES)}")
        ratios = self.floats("data.split")
        if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
            raise ConfigError(f"data.split must be three nonnegative ratios summing to 1, got {ratios}")
        if len(self.floats("loss.omega")) != 3:
            raise ConfigError("loss.omega needs three weights")
        if self.values["model.kind"] not in ("usad", "cnn5"):
            raise ConfigError(f"model.kind must be usad or cnn5, got {self.values['model.kind']!r}")
        if not 0.0 <= self.values["finetune.mix"] < 1.0:
            raise ConfigError("finetune.mix must be in [0, 1)")

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def stages(self) -> list[str]:
        return [s.strip() for s in str(self.values["stages"]).split(",") if s.strip()]

    def floats(self, key: str) -> list[float]:
        return [float(v) for v in str(self.values[key]).split(",") if v.strip()]

    def ints(self, key: str) -> list[int]:
        return [int(v) for v in str(self.values[key]).split(",") if v.strip()]

    def strings(self, key: str) -> list[str]:
        return [v.strip() for v in str(self.values[key]).split(",") if v.strip()]

    def to_text(self) -> str:
        """Sorted ``key = value`` lines; parsing this text yields an equal config."""
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def section(self, prefix: str) -> dict[str, object]:
        return {k: v for k, v in self.values.items() if k.startswith(prefix + ".")}


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out
