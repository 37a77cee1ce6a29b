"""Hyperparameter containers and the key=value config file format."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError


@dataclass(frozen=True)
class LossWeights:
    lambda_tv: float = 1e-5
    lambda_var: float = 1e-5
    lambda_c: float = 1.0
    lambda_f: float = 3.0
    beta_pushaway: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigurationError(f"loss weight {f.name} must be >= 0")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 40
    proxy_steps: int = 4
    deform_steps: int = 40
    deform_step: float = 2000.0
    deform_backtracks: int = 20
    weights: LossWeights = field(default_factory=LossWeights)
    num_flow_fields: int = 4
    filter_blur_sigma: float = 2.0
    flow_init_jitter: float = 10.0
    seed: int = 0
    momentum_mu: float = 0.0
    input_diversity_prob: float = 0.0
    diversity_scale_low: float = 0.9
    diversity_scale_high: float = 1.1
    tap_p: float = 2.0
    tap_init_noise: float = 0.25
    pata_lambda: float = 0.1
    sam_k: int = 400

    def __post_init__(self):
        if not 0 < self.alpha <= self.epsilon <= 1:
            raise ConfigurationError(
                f"need 0 < alpha <= epsilon <= 1, got alpha={self.alpha}, epsilon={self.epsilon}"
            )
        if self.steps < 0 or self.deform_steps < 0 or self.proxy_steps < 0 or self.deform_backtracks < 0:
            raise ConfigurationError("iteration counts must be >= 0")
        if self.num_flow_fields < 1:
            raise ConfigurationError("num_flow_fields must be >= 1")
        if not 0 <= self.input_diversity_prob <= 1:
            raise ConfigurationError("input_diversity_prob must lie in [0, 1]")
        if self.momentum_mu < 0:
            raise ConfigurationError("momentum_mu must be >= 0")

    def replace(self, **changes) -> "AttackConfig":
        weight_keys = {f.name for f in fields(LossWeights)}
        wchanges = {k: changes.pop(k) for k in list(changes) if k in weight_keys}
        if wchanges:
            changes["weights"] = dataclasses.replace(self.weights, **wchanges)
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ModelSpec:
    seed: int = 0
    depth: int = 3
    channels: int = 16

    @classmethod
    def parse(cls, text: str) -> "ModelSpec":
        """Parse ``seed:depth:channels`` (depth and channels optional)."""
        parts = [p for p in text.strip().split(":") if p]
        if not parts or len(parts) > 3:
            raise ConfigurationError(f"bad model spec {text!r}; expected seed[:depth[:channels]]")
        try:
            values = [int(p) for p in parts]
        except ValueError as exc:
            raise ConfigurationError(f"bad model spec {text!r}") from exc
        return cls(*values)

    def __str__(self):
        return f"{self.seed}:{self.depth}:{self.channels}"


def parse_model_list(text: str) -> tuple[ModelSpec, ...]:
    return tuple(ModelSpec.parse(p) for p in text.split(",") if p.strip())


@dataclass(frozen=True)
class CorpusConfig:
    num_scenes: int = 20
    height: int = 64
    width: int = 64
    num_objects: int = 3
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    attack_name: str = "uad"
    attack: AttackConfig = field(default_factory=AttackConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    source_models: tuple[ModelSpec, ...] = (ModelSpec(0),)
    target_models: tuple[ModelSpec, ...] = (ModelSpec(0), ModelSpec(1))
    prompt_seed: int = 0
    workers: int = 1


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in {"1", "true", "yes", "on"}
    if isinstance(like, int):
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigurationError(f"not an integer: {value!r}") from exc
    if isinstance(like, float):
        return float(parse_number(value))
    return value.strip()


def parse_number(text: str) -> float:
    """A float or a fraction such as ``8/255``."""
    text = text.strip()
    try:
        if "/" in text:
            num, den = text.split("/", 1)
            return float(num) / float(den)
        return float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigurationError(f"not a number: {text!r}") from exc


def _update(obj, section: dict[str, str], where: str):
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, raw in section.items():
        if key not in known or dataclasses.is_dataclass(getattr(obj, key)):
            raise ConfigurationError(f"unknown key {key!r} in [{where}]")
        changes[key] = _coerce(raw, getattr(obj, key))
    return dataclasses.replace(obj, **changes)


def load_config(path: str | Path | None = None, base: RunConfig | None = None) -> RunConfig:
    """Read an INI-style file with [run], [attack], [weights] and [corpus] sections."""
    cfg = base or RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with open(path) as fh:
        parser.read_file(fh)
    attack, corpus = cfg.attack, cfg.corpus
    run_changes = {}
    for name in parser.sections():
        section = dict(parser[name])
        if name == "attack":
            attack = _update(attack, section, name)
        elif name == "weights":
            attack = dataclasses.replace(attack, weights=_update(attack.weights, section, name))
        elif name == "corpus":
            corpus = _update(corpus, section, name)
        elif name == "run":
            for key, raw in section.items():
                if key in ("source_models", "target_models"):
                    run_changes[key] = parse_model_list(raw)
                elif key in ("attack_name",):
                    run_changes[key] = raw.strip()
                elif key in ("prompt_seed", "workers"):
                    run_changes[key] = _coerce(raw, 0)
                else:
                    raise ConfigurationError(f"unknown key {key!r} in [run]")
        else:
            raise ConfigurationError(f"unknown config section [{name}]")
    return dataclasses.replace(cfg, attack=attack, corpus=corpus, **run_changes)


def dump_config(cfg: RunConfig) -> str:
    """Render the fully resolved config in the same format ``load_config`` reads."""
    lines = ["[run]"]
    lines.append(f"attack_name = {cfg.attack_name}")
    lines.append("source_models = " + ",".join(str(m) for m in cfg.source_models))
    lines.append("target_models = " + ",".join(str(m) for m in cfg.target_models))
    lines.append(f"prompt_seed = {cfg.prompt_seed}")
    lines.append(f"workers = {cfg.workers}")
    lines.append("")
    lines.append("[attack]")
    for f in fields(cfg.attack):
        if f.name != "weights":
            lines.append(f"{f.name} = {_fmt(getattr(cfg.attack, f.name))}")
    lines.append("")
    lines.append("[weights]")
    for f in fields(cfg.attack.weights):
        lines.append(f"{f.name} = {_fmt(getattr(cfg.attack.weights, f.name))}")
    lines.append("")
    lines.append("[corpus]")
    for f in fields(cfg.corpus):
        lines.append(f"{f.name} = {_fmt(getattr(cfg.corpus, f.name))}")
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)
