"""``[section]`` / ``key = value`` run configuration.

Published hyperparameters keep their usual names (alpha1, beta1, alpha2,
beta2, gamma, lambda, views, noises). Unknown sections or keys and
unparsable values are errors that name the offending line.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

from .geom import ViewRing
from .infer import InferenceConfig
from .losses import LossWeights
from .model import ModelConfig
from .train import TrainConfig

DESK_TEXT = """\
[data]
shapes = 200
families = chairlike, boxcar, tee
symmetric = false
view_count = 8
elevation_min = -20
elevation_max = 40
radius = 2.5
sample_resolution = 16

[model]
latent_dim = 16
shape_latent = 32

[autoencoder]
iterations = 1500
batch = 16
lr = 1e-3

[stage1]
iterations = 2000
batch = 16
noises = 5
alpha1 = 20.0
beta1 = 10.0
lr = 1e-3

[stage2]
iterations = 3000
shapes = 2
views = 8
noises = 5
alpha2 = 10.0
beta2 = 1.0
lr = 1e-3
div_on_concat = false

[gan]
gamma = 0.1
lambda = 10.0
critic_lr = 1e-3
critic_steps = 1

[inference]
views = 8
groups = 5
opt_steps = 300
opt_lr = 1.0
convergence_tol = 1e-4
window = 10
max_halvings = 10

[eval]
episodes = 200
diversity_k = 10
"""

_KINDS = {
    "data": dict(shapes=int, families=str, symmetric=bool, view_count=int, elevation_min=float,
                 elevation_max=float, radius=float, sample_resolution=int),
    "model": {k: int for k in ModelConfig.__dataclass_fields__ if k != "decoder_hidden"},
    "autoencoder": dict(iterations=int, batch=int, lr=float),
    "stage1": dict(iterations=int, batch=int, noises=int, alpha1=float, beta1=float, lr=float),
    "stage2": dict(iterations=int, shapes=int, views=int, noises=int, alpha2=float, beta2=float,
                   lr=float, div_on_concat=bool),
    "gan": dict(gamma=float, critic_lr=float, critic_steps=int, **{"lambda": float}),
    "inference": dict(views=int, groups=int, opt_steps=int, opt_lr=float, convergence_tol=float,
                      window=int, max_halvings=int),
    "eval": dict(episodes=int, diversity_k=int),
}


class ConfigError(ValueError):
    pass


def _line_of(text: str, section: str, key: str | None = None) -> int:
    current = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return no
        elif current == section and key is not None and line.split("=")[0].strip().lower() == key:
            return no
    return 0


def _convert(kind, raw: str):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


@dataclass(frozen=True)
class RunConfig:
    values: dict
    text: str
    seed: int = 0

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]

    def __getitem__(self, key):
        return self.values[key]

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)

    # -- builders --------------------------------------------------------------

    def ring(self) -> ViewRing:
        d = self["data"]
        return ViewRing(view_count=d["view_count"], radius=d["radius"], seed=self.seed, random_phase=True,
                        longitudinal_range=(d["elevation_min"], d["elevation_max"]))

    def families(self) -> tuple:
        return tuple(f.strip() for f in self["data"]["families"].split(",") if f.strip())

    def model(self) -> ModelConfig:
        return ModelConfig(**self["model"])

    def _gan(self, alpha, beta) -> LossWeights:
        g = self["gan"]
        return LossWeights(alpha=alpha, beta=beta, gamma=g["gamma"], lam=g["lambda"])

    def autoencoder(self) -> TrainConfig:
        a = self["autoencoder"]
        return TrainConfig("autoencoder", a["iterations"], a["batch"], lr=a["lr"], seed=self.seed)

    def stage1(self) -> TrainConfig:
        s, g = self["stage1"], self["gan"]
        return TrainConfig("single_view", s["iterations"], s["batch"], 1, s["noises"],
                           self._gan(s["alpha1"], s["beta1"]), s["lr"], g["critic_lr"], g["critic_steps"],
                           seed=self.seed)

    def stage2(self) -> TrainConfig:
        s, g = self["stage2"], self["gan"]
        return TrainConfig("multi_view", s["iterations"], s["shapes"], s["views"], s["noises"],
                           self._gan(s["alpha2"], s["beta2"]), s["lr"], g["critic_lr"], g["critic_steps"],
                           seed=self.seed, div_on_concat=s["div_on_concat"])

    def inference(self) -> InferenceConfig:
        i = self["inference"]
        return InferenceConfig(n_views=i["views"], groups=i["groups"], opt_steps=i["opt_steps"],
                               opt_lr=i["opt_lr"], convergence_tol=i["convergence_tol"],
                               window=i["window"], max_halvings=i["max_halvings"], seed=self.seed)


def parse_config(text: str = "", seed: int = 0) -> RunConfig:
    """Desk defaults overlaid with ``text``; raises :class:`ConfigError` with a line number."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source="<config>")
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    base = configparser.ConfigParser(interpolation=None)
    base.read_string(DESK_TEXT)
    values = {}
    for section in cp.sections():
        if section not in _KINDS:
            raise ConfigError(f"line {_line_of(text, section)}: unknown section [{section}]")
        for key in cp[section]:
            if key not in _KINDS[section]:
                raise ConfigError(f"line {_line_of(text, section, key)}: unknown key {key!r} in [{section}]")
    for section, kinds in _KINDS.items():
        values[section] = {}
        for key, kind in kinds.items():
            src = cp if cp.has_option(section, key) else base
            if not src.has_option(section, key):
                continue
            raw = src.get(section, key)
            try:
                values[section][key] = _convert(kind, raw)
            except ValueError as exc:
                raise ConfigError(f"line {_line_of(text, section, key)}: [{section}] {key}: {exc}") from exc
    merged = DESK_TEXT if not text.strip() else DESK_TEXT + "\n# overrides\n" + text
    cfg = RunConfig(values, merged, seed)
    try:
        cfg.stage1(), cfg.stage2(), cfg.inference(), cfg.model(), cfg.ring()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path=None, seed: int = 0) -> RunConfig:
    text = "" if path is None else Path(path).read_text()
    return parse_config(text, seed)
