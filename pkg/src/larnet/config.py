"""Training configuration, ablation presets and the flat ``key = value`` config format.

Config files hold one ``dotted.key = value`` per line; ``#`` starts a comment.
Values are parsed as JSON when possible (numbers, true/false, quoted strings)
and taken as bare strings otherwise. Unknown keys are errors. The first
key should be ``schema = 1``.
"""
import json
import re
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Dict, Iterable, List, Optional, Tuple

from .losses import LossWeights

CONFIG_SCHEMA = 1
VIDEO_ADV_MODES = ("none", "plain", "mix")


class ConfigValueError(ValueError):
    pass


@dataclass
class AblationFlags:
    use_motion_generator: bool = True
    use_motion_supervision: bool = True
    # 0 = no recurrent integrator (concat fusion), 1..3 integrator levels
    hierarchy_levels: int = 3
    video_adv: str = "mix"
    motion_adv: bool = True


@dataclass
class MixSchedule:
    start: float = 0.5
    end: float = 0.2
    anneal_steps: int = 0  # 0: anneal over the whole run

    def prob(self, step: int, total_steps: int) -> float:
        span = self.anneal_steps or total_steps
        frac = min(1.0, step / span) if span > 0 else 1.0
        return self.start + (self.end - self.start) * frac


@dataclass
class TrainConfig:
    schema: int = CONFIG_SCHEMA
    dataset: str = ""
    split: str = "train"
    resolution: int = 56
    clip_len: int = 16
    batch_size: int = 4
    steps: int = 20000
    optimizer: str = "adam"
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    n_critic: int = 5
    base_channels: int = 256
    z_dim: int = 64
    critic_channels: int = 32
    embedding: str = "onehot"          # "onehot" or path to a word-vector table
    perceptual_net: str = "random"     # "random" (frozen random trunk), "none", or extractor checkpoint
    freeze_extractor: bool = False     # keep E_v fixed at its initialization
    extracted_recon: bool = True       # also reconstruct clips from E_v motion (trains E_v)
    seed: int = 0
    out_dir: str = "runs/larnet"
    checkpoint_every: int = 1000
    loss: LossWeights = field(default_factory=LossWeights)
    mix: MixSchedule = field(default_factory=MixSchedule)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def validate(self) -> "TrainConfig":
        if self.schema != CONFIG_SCHEMA:
            raise ConfigValueError(f"unsupported config schema {self.schema}")
        if self.ablation.video_adv not in VIDEO_ADV_MODES:
            raise ConfigValueError(f"ablation.video_adv must be one of {VIDEO_ADV_MODES}")
        if self.optimizer != "adam":
            raise ConfigValueError("only the 'adam' optimizer is supported")
        if not 0 <= self.ablation.hierarchy_levels <= 3:
            raise ConfigValueError("ablation.hierarchy_levels must be in [0, 3]")
        if not self.ablation.use_motion_generator:
            if self.ablation.use_motion_supervision or self.ablation.motion_adv or self.ablation.hierarchy_levels:
                raise ConfigValueError("without a motion generator, motion supervision, motion_adv "
                                       "and hierarchy_levels must be off/0")
        for name in ("batch_size", "steps", "n_critic", "clip_len", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigValueError(f"{name} must be >= 1")
        for p in (self.mix.start, self.mix.end):
            if not 0.0 <= p <= 1.0:
                raise ConfigValueError("mix probabilities must be in [0, 1]")
        LossWeights(**vars(self.loss))
        return self

    def effective_weights(self) -> LossWeights:
        """Loss weights with the terms disabled by the ablation flags zeroed."""
        a = self.ablation
        return replace(
            self.loss,
            motion_mse=self.loss.motion_mse if a.use_motion_supervision else 0.0,
            motion_adv=self.loss.motion_adv if a.motion_adv else 0.0,
            video_adv=self.loss.video_adv if a.video_adv != "none" else 0.0,
            perceptual=self.loss.perceptual if self.perceptual_net != "none" else 0.0,
        )


# --------------------------------------------------------------------------
# Flat key/value (de)serialization
# --------------------------------------------------------------------------

def _flatten(obj, prefix="") -> Dict[str, object]:
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if is_dataclass(value):
            out.update(_flatten(value, key + "."))
        else:
            out[key] = value
    return out


def config_keys() -> Dict[str, object]:
    """All dotted keys with their defaults."""
    return _flatten(TrainConfig())


def _coerce(key: str, raw, default):
    if isinstance(raw, str):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError:
            pass
    if isinstance(default, bool):
        if isinstance(raw, str) and raw.lower() in ("true", "false", "yes", "no", "on", "off"):
            return raw.lower() in ("true", "yes", "on")
        if not isinstance(raw, bool):
            raise ConfigValueError(f"{key}: expected a boolean, got {raw!r}")
        return raw
    if isinstance(default, int):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)) or int(raw) != raw:
            raise ConfigValueError(f"{key}: expected an integer, got {raw!r}")
        return int(raw)
    if isinstance(default, float):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigValueError(f"{key}: expected a number, got {raw!r}")
        return float(raw)
    return str(raw)


def _set(cfg, key: str, value):
    parts = key.split(".")
    target = cfg
    for p in parts[:-1]:
        target = getattr(target, p)
    setattr(target, parts[-1], value)


def apply_overrides(cfg: TrainConfig, items: Iterable[Tuple[str, object]]) -> TrainConfig:
    """Return a copy of ``cfg`` with dotted-key assignments applied (validated)."""
    known = config_keys()
    flat = _flatten(cfg)
    for key, raw in items:
        key = key.strip()
        if key not in known:
            close = [k for k in known if k.split(".")[-1] == key.split(".")[-1]]
            hint = f" (did you mean {close[0]!r}?)" if close else ""
            raise ConfigValueError(f"unknown config key {key!r}{hint}")
        flat[key] = _coerce(key, raw, known[key])
    out = TrainConfig()
    for key, value in flat.items():
        _set(out, key, value)
    return out.validate()


def parse_override(text: str) -> Tuple[str, str]:
    if "=" not in text:
        raise ConfigValueError(f"override {text!r} is not key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def load_config(path: str, overrides: Iterable[str] = ()) -> TrainConfig:
    items = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigValueError(f"{path}:{lineno}: expected 'key = value'")
            items.append(parse_override(line))
    items += [parse_override(o) for o in overrides]
    return apply_overrides(TrainConfig(), items)


def dump_config(cfg: TrainConfig, path: Optional[str] = None) -> str:
    lines = [f"{k} = {json.dumps(v)}" for k, v in _flatten(cfg).items()]
    text = "\n".join(lines) + "\n"
    if path:
        with open(path, "w") as f:
            f.write(text)
    return text


def config_help() -> str:
    return "\n".join(f"  {k} (default {json.dumps(v)})" for k, v in config_keys().items())


# --------------------------------------------------------------------------
# Ablation presets (row labels of the component/loss ablation table)
# --------------------------------------------------------------------------

ABLATIONS: Dict[str, AblationFlags] = {
    "BaseNet-1": AblationFlags(False, False, 0, "none", False),
    "BaseNet-2": AblationFlags(True, False, 0, "none", False),
    "LARNet-Base": AblationFlags(True, True, 0, "none", False),
    "LARNet-MI-1": AblationFlags(True, True, 1, "none", False),
    "LARNet-MI-3": AblationFlags(True, True, 3, "none", False),
    "LARNet-MI-3+[Lv_adv]": AblationFlags(True, True, 3, "plain", False),
    "LARNet-MI-3+[Lv_adv, Lm_adv]": AblationFlags(True, True, 3, "plain", True),
    "LARNet-MI-3+[Lv_madv, Lm_adv]": AblationFlags(True, True, 3, "mix", True),
}


def _canon(name: str) -> str:
    return re.sub(r"[\s^{}_]", "", name).lower()


_ABLATION_LOOKUP = {_canon(k): k for k in ABLATIONS}


def canonical_ablation_name(name: str) -> str:
    key = _ABLATION_LOOKUP.get(_canon(name))
    if key is None:
        raise ConfigValueError(f"unknown ablation {name!r}; choose from {list(ABLATIONS)}")
    return key


def make_ablation_config(name: str, base: Optional[TrainConfig] = None,
                         overrides: Iterable[Tuple[str, object]] = ()) -> TrainConfig:
    """Preset flags for a named ablation row.

    ``overrides`` that set an ``ablation.*`` key to a value different from the
    preset are rejected.
    """
    key = canonical_ablation_name(name)
    flags = ABLATIONS[key]
    base = base or TrainConfig()
    cfg = apply_overrides(base, [(f"ablation.{k}", v) for k, v in vars(flags).items()])
    overrides = list(overrides)
    for k, v in overrides:
        if k.startswith("ablation."):
            field_name = k.split(".", 1)[1]
            if not hasattr(flags, field_name):
                raise ConfigValueError(f"unknown config key {k!r}")
            wanted = _coerce(k, v, getattr(flags, field_name))
            if wanted != getattr(flags, field_name):
                raise ConfigValueError(f"override {k}={v} conflicts with ablation {key} "
                                       f"({field_name}={getattr(flags, field_name)})")
    return apply_overrides(cfg, overrides)


def ablation_names() -> List[str]:
    return list(ABLATIONS)
