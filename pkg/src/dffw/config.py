"""Flat ``key=value`` run configuration.

One setting per line, dotted section keys (``train.alpha=1e-4``), ``#``
starts a comment. Lists are comma-separated; spin vectors are
``x,y,z`` triples separated by ``;``. Any key left out takes its default.
The top-level ``seed`` seeds every stage whose own seed key is not set.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

from .data import BallSimConfig, VisiblePartition
from .experiment import MODEL_KINDS, ExperimentConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _spins(text: str) -> tuple:
    return tuple(_floats(part) for part in text.split(";") if part.strip())


def _fmt_spins(spins) -> str:
    return ";".join(",".join(repr(float(c)) for c in s) for s in spins)


def _fmt_seq(seq) -> str:
    return ",".join(repr(x) if isinstance(x, float) else str(x) for x in seq)


# key -> (parser, formatter, default)
_SCHEMA = {
    "seed": (int, str, 0),
    "kind": (str, str, "dffw"),
    "out": (str, str, "out"),
    "threads": (int, str, 1),
    "data.dir": (str, str, "data"),
    "data.history": (int, str, 50),
    "data.known_idx": (_ints, _fmt_seq, (3, 4)),
    "data.unknown_idx": (_ints, _fmt_seq, (0, 1, 2)),
    "sim.seed": (int, str, None),
    "sim.gravity": (float, repr, 9.81),
    "sim.drag_coeff": (float, repr, 0.002),
    "sim.magnus_coeff": (float, repr, 0.002),
    "sim.dt": (float, repr, 0.02),
    "sim.frames": (int, str, 400),
    "sim.spin_classes": (_spins, _fmt_spins, BallSimConfig().spin_classes),
    "sim.launch_speed_range": (_floats, _fmt_seq, (43.0, 49.0)),
    "sim.launch_angle_range": (_floats, _fmt_seq, (65.0, 77.0)),
    "sim.azimuth_range": (_floats, _fmt_seq, (-6.0, 6.0)),
    "sim.launch_height": (float, repr, 1.0),
    "sim.trajectories_per_class": (int, str, 11),
    "model.n_h": (int, str, 10),
    "model.n_f": (int, str, 100),
    "model.init_std": (float, repr, 0.3),
    "model.init_seed": (int, str, None),
    "train.alpha": (float, repr, 1e-4),
    "train.rho": (float, repr, 0.5),
    "train.gamma": (float, repr, 0.0002),
    "train.cd_steps": (int, str, 3),
    "train.epochs": (int, str, 100),
    "train.seed": (int, str, None),
    "train.positive_hidden": (str, str, "data"),
    "cv.n_train": (int, str, 1),
    "cv.fold": (int, str, 0),
    "cv.folds": (_ints, _fmt_seq, ()),
    "eval.seed": (int, str, None),
    "eval.gibbs_steps": (int, str, 3),
    "eval.horizons": (_ints, _fmt_seq, (1, 50)),
    "eval.stride": (int, str, 10),
    "eval.tasks": (lambda s: tuple(x.strip() for x in s.split(",") if x.strip()), _fmt_seq,
                   ("classification", "present_step", "multistep")),
    "sweep.hidden": (_ints, _fmt_seq, (10, 20, 40)),
    "sweep.factors": (_ints, _fmt_seq, (10, 40, 100)),
    "sweep.fold": (int, str, 0),
}

EVAL_TASKS = ("classification", "present_step", "multistep")


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        values[key] = raw
    return values


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    @classmethod
    def from_sources(cls, path=None, overrides=()):
        """Defaults, then the file at ``path``, then ``key=value`` overrides."""
        raw = {}
        if path is not None:
            if not os.path.isfile(path):
                raise ConfigError(f"config file not found: {path}")
            with open(path, encoding="utf-8") as fh:
                raw.update(parse_text(fh.read(), str(path)))
        for item in overrides:
            raw.update(parse_text(item, "<override>"))
        values = {k: default for k, (_, _, default) in _SCHEMA.items()}
        for key, text in raw.items():
            if key not in _SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            if text == "" and _SCHEMA[key][2] is None:
                values[key] = None
                continue
            try:
                values[key] = _SCHEMA[key][0](text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from exc
        cfg = cls(values)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def seed_for(self, key: str) -> int:
        own = self.values.get(key)
        return self.values["seed"] if own is None else own

    def validate(self):
        if self["kind"] not in MODEL_KINDS:
            raise ConfigError(f"kind must be one of {MODEL_KINDS}, got {self['kind']!r}")
        bad = set(self["eval.tasks"]) - set(EVAL_TASKS)
        if bad:
            raise ConfigError(f"unknown eval tasks {sorted(bad)}")
        if self["data.history"] < 1:
            raise ConfigError("data.history must be >= 1")
        try:
            self.partition()
            self.sim()
            self.train()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def partition(self) -> VisiblePartition:
        return VisiblePartition(self["data.known_idx"], self["data.unknown_idx"])

    def sim(self) -> BallSimConfig:
        kw = {f.name: self.values[f"sim.{f.name}"] for f in fields(BallSimConfig)
              if f"sim.{f.name}" in self.values and f.name != "seed"}
        return BallSimConfig(seed=self.seed_for("sim.seed"), **kw)

    def train(self) -> TrainConfig:
        kw = {f.name: self.values[f"train.{f.name}"] for f in fields(TrainConfig) if f.name != "seed"}
        return TrainConfig(seed=self.seed_for("train.seed"), **kw)

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig(
            history=self["data.history"], n_h=self["model.n_h"], n_f=self["model.n_f"],
            init_std=self["model.init_std"], init_seed=self.seed_for("model.init_seed"),
            eval_seed=self.seed_for("eval.seed"), train=self.train(),
            gibbs_steps=self["eval.gibbs_steps"], horizons=self["eval.horizons"],
            stride=self["eval.stride"], n_train=self["cv.n_train"], partition=self.partition(),
        )

    def with_overrides(self, **kv) -> "RunConfig":
        values = dict(self.values)
        values.update(kv)
        cfg = replace(self, values=values)
        cfg.validate()
        return cfg

    def dumps(self) -> str:
        """Canonical text form (every key, schema order)."""
        lines = []
        for key, (_, fmt, _) in _SCHEMA.items():
            value = self.values[key]
            lines.append(f"{key}={'' if value is None else fmt(value)}")
        return "\n".join(lines) + "\n"


def default_config_text() -> str:
    return RunConfig.from_sources().dumps()
