"""Run configuration: flat dotted-key text format with strict validation.

A config file is lines of ``key = value`` (``#`` comments allowed).  Every
key has a default; unknown keys are rejected by name.  Booleans are
``true``/``false``, lists are comma-separated, numbers are parsed as int
when possible and float otherwise.  ``BAYMETA_SEED`` in the environment
overrides the seed.  Parsing then serializing then parsing is the identity.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .bayescore import AnomalyReference, NIWPrior
from .diffnet import EmbeddingNet
from .episodes import ANOMALY_KINDS, TaskFamily
from .metalearn import HyperParams

MODES = (
    "centralized",
    "centralized_contrastive",
    "federated",
    "federated_contrastive",
    "protomaml",
    "coreset_nn",
    "checks",
)

# defaults mirror the reference configuration at desk scale: embedding
# dimension 8, prior dof = dim + 2, identity prior scale, reference scale
# 100 with dof 2, seed 42
DEFAULTS: dict[str, object] = {
    "mode": "centralized",
    "seed": 42,
    "output_dir": "runs",
    "hp.alpha": 5e-4,
    "hp.beta": 1e-4,
    "hp.gamma": 1.0,
    "hp.lam": 0.1,
    "hp.tau": 0.07,
    "hp.inner_steps": 1,
    "hp.epochs": 50,
    "hp.episodes_per_epoch": 50,
    "hp.val_episodes": 20,
    "hp.second_order": True,
    "hp.meta_batch": 1,
    "hp.optimizer": "sgd",
    "hp.normalize_contrastive": False,
    "hp.support_size": 5,
    "hp.query_normals": 12,
    "hp.query_anomalies": 4,
    "prior.kappa0": 0.01,
    "prior.nu0": -1.0,  # sentinel: use dim + 2
    "prior.lambda0_scale": 1.0,
    "ref.scale": 100.0,
    "ref.dof": 2.0,
    "net.input_dim": 16,
    "net.hidden": (32,),
    "net.output_dim": 8,
    "net.layer_norm": True,
    "tasks.heterogeneity": 0.0,
    "tasks.heldout_kind": "heavy-tail",
    "tasks.base_scale": 0.5,
    "tasks.mean_radius": 1.0,
    "tasks.task_jitter": 0.1,
    "tasks.shift": 2.0,
    "tasks.inflation": 9.0,
    "tasks.tail_dof": 2.0,
    "tasks.kinds": ANOMALY_KINDS,
    "fed.clients": 5,
    "fed.rounds": 50,
    "fed.participation": 0,  # 0 means full participation
    "fed.workers": 1,
    "fed.checkpoint_every": 0,
    "eval.test_episodes": 300,
    "eval.pooled": False,
    "eval.coreset_fraction": 0.25,
}


class ConfigError(ValueError):
    """Invalid configuration: unknown key, bad value, or bad mode."""


def _parse_scalar(text: str):
    t = text.strip()
    if t.lower() in ("true", "false"):
        return t.lower() == "true"
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def _parse_value(text: str):
    if "," in text:
        return tuple(_parse_scalar(p) for p in text.split(",") if p.strip())
    return _parse_scalar(text)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, value, template) -> object:
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(template, int) and not isinstance(template, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        if isinstance(value, float) and value != int(value):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(template, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(template, tuple):
        if not isinstance(value, tuple):
            value = (value,)
        return value
    return value


@dataclass(frozen=True)
class RunConfig:
    """Validated flat configuration plus typed views of each section."""

    entries: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        merged = dict(DEFAULTS)
        for key, value in self.entries.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            merged[key] = _coerce(key, value, DEFAULTS[key])
        env_seed = os.environ.get("BAYMETA_SEED")
        if env_seed is not None:
            merged["seed"] = int(env_seed)
        if merged["mode"] not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}, got {merged['mode']!r}")
        if merged["tasks.heldout_kind"] not in merged["tasks.kinds"]:
            raise ConfigError("tasks.heldout_kind: not among tasks.kinds")
        object.__setattr__(self, "entries", merged)

    def __getitem__(self, key: str):
        return self.entries[key]

    @property
    def mode(self) -> str:
        return self.entries["mode"]

    @property
    def seed(self) -> int:
        return self.entries["seed"]

    def hyperparams(self, contrastive: bool | None = None) -> HyperParams:
        e = self.entries
        lam = e["hp.lam"]
        if contrastive is False:
            lam = 0.0
        hp = HyperParams(
            alpha=e["hp.alpha"], beta=e["hp.beta"], gamma=e["hp.gamma"],
            lam=lam, tau=e["hp.tau"], inner_steps=e["hp.inner_steps"],
            epochs=e["hp.epochs"], episodes_per_epoch=e["hp.episodes_per_epoch"],
            val_episodes=e["hp.val_episodes"], second_order=e["hp.second_order"],
            meta_batch=e["hp.meta_batch"], optimizer=e["hp.optimizer"],
            normalize_contrastive=e["hp.normalize_contrastive"],
            support_size=e["hp.support_size"], query_normals=e["hp.query_normals"],
            query_anomalies=e["hp.query_anomalies"],
        )
        return hp

    def net(self) -> EmbeddingNet:
        e = self.entries
        hidden = e["net.hidden"]
        if isinstance(hidden, int):
            hidden = (hidden,)
        return EmbeddingNet(
            input_dim=e["net.input_dim"], hidden_dims=tuple(hidden),
            output_dim=e["net.output_dim"], layer_norm=e["net.layer_norm"],
        )

    def prior(self) -> NIWPrior:
        e = self.entries
        dim = e["net.output_dim"]
        nu0 = e["prior.nu0"]
        return NIWPrior.default(
            dim, kappa0=e["prior.kappa0"],
            nu0=None if nu0 < 0 else nu0,
            lambda0_scale=e["prior.lambda0_scale"],
        )

    def reference(self) -> AnomalyReference:
        e = self.entries
        return AnomalyReference(dim=e["net.output_dim"],
                                scale_value=e["ref.scale"], dof=e["ref.dof"])

    def family(self) -> TaskFamily:
        e = self.entries
        kinds = e["tasks.kinds"]
        if isinstance(kinds, str):
            kinds = (kinds,)
        return TaskFamily(
            family_seed=e["seed"], input_dim=e["net.input_dim"],
            heterogeneity=e["tasks.heterogeneity"],
            heldout_kind=e["tasks.heldout_kind"], base_scale=e["tasks.base_scale"],
            mean_radius=e["tasks.mean_radius"], task_jitter=e["tasks.task_jitter"],
            shift=e["tasks.shift"], inflation=e["tasks.inflation"],
            tail_dof=e["tasks.tail_dof"], kinds=tuple(kinds),
        )

    def participation(self) -> int | None:
        p = self.entries["fed.participation"]
        return None if p == 0 else p


def parse_text(text: str) -> RunConfig:
    entries: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        entries[key] = _parse_value(value)
    return RunConfig(entries=entries)


def load(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read())


def serialize(config: RunConfig) -> str:
    lines = [f"{key} = {_format_value(config.entries[key])}" for key in sorted(config.entries)]
    return "\n".join(lines) + "\n"
