"""Unified run configuration: file parsing, flag overrides, echoing.

Config files are plain text, key = value under section headers:

    [sde]
    gamma = 2.0
    [train]
    lr = 1e-4

Unknown keys are rejected.  Command-line flags override file values, and
every artifact-producing command writes the fully resolved configuration
next to its outputs so a run can be reproduced from the echo alone.
"""

import configparser
import dataclasses
import io

from .corpus import CorpusConfig
from .errors import ConfigError
from .metrics import StftConfig
from .sampling import SamplerConfig
from .sde import SdeParams
from .training import TrainConfig
from .models import ModelConfig

MODEL_VARIANTS = ("tse", "diff-tse", "diff-tse-mt")


@dataclasses.dataclass
class RunConfig:
    sde: SdeParams = dataclasses.field(default_factory=SdeParams)
    stft: StftConfig = dataclasses.field(default_factory=StftConfig)
    corpus: CorpusConfig = dataclasses.field(default_factory=CorpusConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    sampler: SamplerConfig = dataclasses.field(default_factory=SamplerConfig)
    model_variant: str = "diff-tse"
    model_width: int = 24
    model_blocks: int = 2
    model_embed_dim: int = 16
    seed: int = 0
    jobs: int = 1

    def model_config(self, n_freq: int) -> ModelConfig:
        return ModelConfig(
            n_freq=n_freq, width=self.model_width, blocks=self.model_blocks,
            embed_dim=self.model_embed_dim,
        )


_SECTIONS = {
    "sde": (SdeParams, "sde"),
    "stft": (StftConfig, "stft"),
    "corpus": (CorpusConfig, "corpus"),
    "train": (TrainConfig, "train"),
    "sampler": (SamplerConfig, "sampler"),
}

_RUN_KEYS = {
    "model": str, "width": int, "blocks": int, "embed_dim": int,
    "seed": int, "jobs": int,
}


def _coerce(value: str, target_type):
    if target_type is bool or isinstance(target_type, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    return target_type(value)


def _apply_section(cls, current, items):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    updates = {}
    for key, value in items:
        if key not in fields:
            raise ConfigError(
                f"unknown key {key!r} for section [{cls.__name__}]; "
                f"valid: {sorted(fields)}"
            )
        ftype = fields[key].type
        base = getattr(current, key)
        caster = type(base) if base is not None else (
            float if ftype == "float" else str
        )
        if isinstance(base, bool):
            updates[key] = _coerce(value, bool)
        elif isinstance(base, int):
            updates[key] = int(value)
        elif isinstance(base, float):
            updates[key] = float(value)
        else:
            updates[key] = caster(value)
    return dataclasses.replace(current, **updates)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    for section in parser.sections():
        items = list(parser.items(section))
        if section in _SECTIONS:
            cls, attr = _SECTIONS[section]
            setattr(cfg, attr, _apply_section(cls, getattr(cfg, attr), items))
        elif section == "run":
            for key, value in items:
                if key not in _RUN_KEYS:
                    raise ConfigError(f"unknown key {key!r} in [run]")
                if key == "model":
                    if value not in MODEL_VARIANTS:
                        raise ConfigError(
                            f"model must be one of {MODEL_VARIANTS}, "
                            f"got {value!r}"
                        )
                    cfg.model_variant = value
                elif key in ("width", "blocks", "embed_dim"):
                    setattr(cfg, f"model_{key}", int(value))
                else:
                    setattr(cfg, key, int(value))
        else:
            raise ConfigError(f"unknown config section [{section}]")
    return cfg


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path) as f:
        return parse_config_text(f.read(), base)


def render_config(cfg: RunConfig) -> str:
    """Serialize the resolved configuration back to config-file syntax."""
    out = io.StringIO()
    out.write("[run]\n")
    out.write(f"model = {cfg.model_variant}\n")
    out.write(f"width = {cfg.model_width}\n")
    out.write(f"blocks = {cfg.model_blocks}\n")
    out.write(f"embed_dim = {cfg.model_embed_dim}\n")
    out.write(f"seed = {cfg.seed}\n")
    out.write(f"jobs = {cfg.jobs}\n")
    for section, (cls, attr) in _SECTIONS.items():
        out.write(f"\n[{section}]\n")
        for f in dataclasses.fields(cls):
            out.write(f"{f.name} = {getattr(getattr(cfg, attr), f.name)}\n")
    return out.getvalue()


def write_config(cfg: RunConfig, path):
    with open(path, "w") as f:
        f.write(render_config(cfg))
