"""Run configuration: nested dataclasses loaded from YAML, unknown keys rejected.

Relative paths resolve against the run directory. The top-level ``seed`` is the
single source of randomness; it overrides the ``seed`` of each module section.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

import yaml

from ..geometry import AlignmentConfig
from ..image_blender.networks import BlendGeneratorConfig
from ..landmark_blender import BlenderNetConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    dataset: str = "data"
    # pair protocol CSV, relative to ``dataset``
    protocol: str = "pairs.csv"
    # directory holding ``images/<subject>.png`` and ``landmarks/<subject>.txt`` used as
    # mated references; relative to ``dataset``. None -> the enrolment images.
    probes: str | None = "probes"
    # optional CSV "img_a,img_b" of impostor comparisons, relative to ``dataset``
    impostor_pairs: str | None = None
    # optional detector score CSV "sample_id,label,score" for APCER/BPCER/DET
    detector_scores: str | None = None


@dataclass
class SynthConfig:
    count: int = 16
    resolution: int = 64


@dataclass
class EvaluationConfig:
    # "toy" or "command"
    matcher: str = "toy"
    matcher_command: list[str] | None = None
    matcher_seed: int = 0
    apcer_targets: list[float] = field(default_factory=lambda: [0.05, 0.1])


@dataclass
class RunConfig:
    seed: int = 0
    alpha: float = 0.5
    far_target: float = 0.001
    landmark_count: int = 106
    checkpoint_every: int = 50
    failure_budget: float = 0.1
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    alignment: AlignmentConfig = field(default_factory=lambda: AlignmentConfig(output_size=64))
    landmark_blender: BlenderNetConfig = field(default_factory=BlenderNetConfig)
    image_blender: BlendGeneratorConfig = field(default_factory=BlendGeneratorConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def validate(self):
        K = self.landmark_count
        if self.landmark_blender.K != K or self.image_blender.K != K:
            raise ConfigError(f"landmark_blender.K and image_blender.K must equal landmark_count={K}")
        if self.image_blender.resolution != self.alignment.output_size:
            raise ConfigError("image_blender.resolution must equal alignment.output_size")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")
        if not 0.0 < self.far_target < 1.0:
            raise ConfigError("far_target must be in (0, 1)")
        if self.evaluation.matcher not in ("toy", "command"):
            raise ConfigError("evaluation.matcher must be 'toy' or 'command'")
        if self.evaluation.matcher == "command" and not self.evaluation.matcher_command:
            raise ConfigError("evaluation.matcher_command is required for matcher 'command'")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        try:
            self.alignment.validate(K)
            self.landmark_blender.validate()
            self.image_blender.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def seeded(self) -> "RunConfig":
        """Copy with the run seed pushed into every module section."""
        return dataclasses.replace(
            self,
            landmark_blender=dataclasses.replace(self.landmark_blender, seed=self.seed),
            image_blender=dataclasses.replace(self.image_blender, seed=self.seed,
                                              alpha=self.alpha),
        )


def _convert(tp, value, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return from_dict(tp, value, where)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, where)
    if origin is tuple:
        return tuple(_convert(args[0], v, where) for v in value)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return [_convert(args[0], v, where) for v in value]
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp in (int, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
    return value


def from_dict(cls, data: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where or 'root'}: {', '.join(sorted(unknown))}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    return cls(**kwargs)


def to_dict(cfg) -> dict:
    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        return v
    return clean(dataclasses.asdict(cfg))


def load_config(path=None, seed: int | None = None) -> RunConfig:
    data = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    if seed is not None:
        data["seed"] = seed
    return from_dict(RunConfig, data).validate()


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)


def save_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(to_dict(cfg), sort_keys=True).encode()).hexdigest()
