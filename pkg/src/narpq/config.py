"""Run configuration: a flat key=value file with sections, strictly validated.

Unknown sections or keys are rejected. The resolved configuration serializes
to a canonical text form that gets embedded in every output artifact
(checkpoint metadata, image comments, metrics files).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

from . import codec as codec_mod
from . import training as training_mod
from .decoder import MaskSchedule


@dataclass
class DataConfig:
    n_train: int = 5000
    n_holdout: int = 500


@dataclass
class ScheduleConfig:
    alpha: float = 0.8
    beta: float = 0.2
    steps: int = 10
    temperature: float = 1.0

    def to_schedule(self) -> MaskSchedule:
        return MaskSchedule(self.alpha, self.beta, self.steps)


@dataclass
class PredictorSize:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    ffn: int = 256
    max_seq: int = 256
    dropout: float = 0.0
    max_text: int = 16


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    codec: codec_mod.CodecConfig = field(default_factory=codec_mod.CodecConfig)
    codec_train: codec_mod.CodecTrainConfig = field(default_factory=codec_mod.CodecTrainConfig)
    predictor: PredictorSize = field(default_factory=PredictorSize)
    predictor_train: training_mod.NarTrainConfig = field(default_factory=training_mod.NarTrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def predictor_config(self):
        p = self.predictor
        return training_mod.predictor_config_for(
            self.codec, layers=p.layers, hidden=p.hidden, heads=p.heads, ffn=p.ffn,
            max_seq=p.max_seq, dropout=p.dropout, max_text=p.max_text)

    def to_meta(self) -> dict[str, str]:
        meta = {}
        for section_name, obj in self._sections():
            for f in fields(obj):
                meta[f"{section_name}.{f.name}"] = repr(getattr(obj, f.name))
        return meta

    def to_text(self) -> str:
        lines = []
        for section_name, obj in self._sections():
            lines.append(f"[{section_name}]")
            for f in fields(obj):
                lines.append(f"{f.name} = {getattr(obj, f.name)!r}")
            lines.append("")
        return "\n".join(lines)

    def _sections(self):
        return (("data", self.data), ("codec", self.codec),
                ("codec_train", self.codec_train), ("predictor", self.predictor),
                ("predictor_train", self.predictor_train), ("schedule", self.schedule))


def load_config(path: str | None) -> RunConfig:
    """Defaults overlaid with the file's sections; unknown keys are errors."""
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_string(fh.read())
    known = dict(cfg._sections())
    for section in parser.sections():
        if section not in known:
            raise ValueError(f"unknown config section [{section}]")
        obj = known[section]
        valid = {f.name: f for f in fields(obj)}
        for key, raw in parser.items(section):
            if key not in valid:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            current = getattr(obj, key)
            kind = type(current)
            try:
                value = kind(raw) if kind is not bool else raw.strip().lower() in ("1", "true")
            except ValueError as exc:
                raise ValueError(f"bad value for {section}.{key}: {raw!r}") from exc
            setattr(obj, key, value)
    # re-run dataclass validation on the overlaid values
    cfg.codec.__post_init__()
    return cfg
