"""Versioned file formats: line-delimited JSON datasets and YAML run configs.

Dataset layout (one JSON object per line):

* line 1, header: ``{"format": "credgnss-dataset", "version": 1, "origin":
  {"lat_deg", "lon_deg", "height"}, "metadata": {...}}``
* every further line, one epoch: ``{"epoch_index", "time", "truth_position"
  ([e, n, u] or null), "truth_clock" ([4] or null), "metadata", "observations":
  [{"sat_id", "constellation", "sat_pos" [x, y, z], "pseudorange_obs", "cn0",
  "correction_sum", "truth_contamination" (or null)}]}``

Floats are written with their shortest round-trip repr, so write->read is
lossless and equal inputs give byte-identical files.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from .geo import EcefPoint, EnuPoint, Geodetic
from .observation import Constellation, EpochObservations, SatelliteObservation
from .sim import ScenarioConfig, SimulationError, presets
from .trainer import Objective, TrainConfig
from .weighting import SchemeKind, WeightScheme, WeightingError

DATASET_FORMAT = "credgnss-dataset"
DATASET_VERSION = 1
CONFIG_VERSION = 1


class FormatError(ValueError):
    """Malformed or incompatible file."""


class ConfigError(ValueError):
    """Invalid run configuration; messages are prefixed with the offending key path."""


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Dataset:
    origin: Geodetic
    epochs: list[EpochObservations]
    metadata: dict = field(default_factory=dict)

    @property
    def has_truth(self) -> bool:
        return bool(self.epochs) and all(ep.truth_position is not None for ep in self.epochs)


def _plain(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_plain, allow_nan=False)


def _epoch_record(ep: EpochObservations) -> dict:
    return {
        "epoch_index": int(ep.epoch_index),
        "time": float(ep.time),
        "truth_position": None if ep.truth_position is None else [float(v) for v in ep.truth_position.as_array()],
        "truth_clock": None if ep.truth_clock is None else [float(v) for v in ep.truth_clock],
        "metadata": ep.metadata,
        "observations": [
            {
                "sat_id": o.sat_id,
                "constellation": Constellation(o.constellation).name,
                "sat_pos": [float(v) for v in o.sat_pos.as_array()],
                "pseudorange_obs": float(o.pseudorange_obs),
                "cn0": float(o.cn0),
                "correction_sum": float(o.correction_sum),
                "truth_contamination": None if o.truth_contamination is None else float(o.truth_contamination),
            }
            for o in ep.observations
        ],
    }


def dumps_dataset(ds: Dataset) -> str:
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "origin": {
            "lat_deg": math.degrees(ds.origin.lat),
            "lon_deg": math.degrees(ds.origin.lon),
            "height": ds.origin.height,
        },
        "metadata": ds.metadata,
    }
    return "\n".join([_dumps(header)] + [_dumps(_epoch_record(ep)) for ep in ds.epochs]) + "\n"


def write_dataset(ds: Dataset, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(dumps_dataset(ds))


def _parse_epoch(rec: dict, where: str) -> EpochObservations:
    try:
        obs = [
            SatelliteObservation(
                sat_id=o["sat_id"],
                constellation=Constellation[o["constellation"]],
                sat_pos=EcefPoint(*o["sat_pos"]),
                pseudorange_obs=float(o["pseudorange_obs"]),
                cn0=float(o["cn0"]),
                correction_sum=float(o.get("correction_sum", 0.0)),
                truth_contamination=o.get("truth_contamination"),
            )
            for o in rec["observations"]
        ]
        tp, tc = rec.get("truth_position"), rec.get("truth_clock")
        return EpochObservations(
            epoch_index=int(rec["epoch_index"]),
            time=float(rec["time"]),
            observations=obs,
            truth_position=None if tp is None else EnuPoint(*tp),
            truth_clock=None if tc is None else np.asarray(tc, dtype=float),
            metadata=rec.get("metadata", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: bad epoch record ({exc})") from exc


def loads_dataset(text: str, name: str = "<string>") -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise FormatError(f"{name}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{name}:1: header is not JSON ({exc})") from exc
    if not isinstance(header, dict) or header.get("format") != DATASET_FORMAT:
        raise FormatError(f"{name}: not a {DATASET_FORMAT} file")
    if header.get("version") != DATASET_VERSION:
        raise FormatError(f"{name}: unsupported dataset version {header.get('version')!r} "
                          f"(this build reads version {DATASET_VERSION})")
    try:
        o = header["origin"]
        origin = Geodetic.from_degrees(float(o["lat_deg"]), float(o["lon_deg"]), float(o["height"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{name}: bad origin in header ({exc})") from exc
    epochs = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{name}:{n}: not JSON ({exc})") from exc
        epochs.append(_parse_epoch(rec, f"{name}:{n}"))
    return Dataset(origin, epochs, header.get("metadata", {}))


def read_dataset(path) -> Dataset:
    with open(path) as fh:
        return loads_dataset(fh.read(), str(path))


# ---------------------------------------------------------------------------
# run config


@dataclass
class SolverSettings:
    max_iter: int = 10
    tol: float = 1e-4

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol >= 0:
            raise ValueError("tol must be >= 0")


@dataclass
class LossSettings:
    alpha: float = 0.5
    beta: float = 0.5
    mc_samples: int = 2048

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("alpha and beta must be >= 0 and not both zero")
        if self.mc_samples < 2:
            raise ValueError("mc_samples must be >= 2")


@dataclass
class EvalSettings:
    es_samples: int = 8192
    seed: int = 20240517
    diagnose_epochs: list = field(default_factory=list)

    def __post_init__(self):
        if self.es_samples < 2:
            raise ValueError("es_samples must be >= 2")


_TRAIN_KEYS = ("objective", "learning_rate", "adam_beta1", "adam_beta2", "adam_eps", "batch_size",
               "epochs_over_data", "grad_clip_norm", "seed", "window_length", "window_stride", "val_fraction")


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    scheme: WeightScheme = field(default_factory=lambda: WeightScheme(SchemeKind.GOGPS))
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossSettings = field(default_factory=LossSettings)
    solver: SolverSettings = field(default_factory=SolverSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def train_config(self) -> TrainConfig:
        """Train section merged with the loss and solver sections."""
        return dataclasses.replace(self.train, alpha=self.loss.alpha, beta=self.loss.beta,
                                   mc_samples=self.loss.mc_samples, solver_max_iter=self.solver.max_iter,
                                   solver_tol=self.solver.tol)

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        return {
            "version": CONFIG_VERSION,
            "scenario": _plainify(self.scenario.to_dict()),
            "scheme": self.scheme.to_dict(),
            "train": {k: train[k] for k in _TRAIN_KEYS},
            "loss": dataclasses.asdict(self.loss),
            "solver": dataclasses.asdict(self.solver),
            "eval": dataclasses.asdict(self.eval),
        }


def _plainify(obj):
    if isinstance(obj, dict):
        return {k: _plainify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plainify(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _check_types(section: str, cls, data: dict, allowed=None) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    allowed = set(allowed or fields)
    for key, value in data.items():
        if key not in allowed:
            raise ConfigError(f"{section}.{key}: unknown field")
        default = fields[key].default
        if default is dataclasses.MISSING and fields[key].default_factory is not dataclasses.MISSING:
            default = fields[key].default_factory()
        if isinstance(default, bool) or isinstance(value, bool):
            ok = isinstance(value, bool) == isinstance(default, bool)
        elif isinstance(default, int) and not isinstance(default, bool):
            ok = isinstance(value, int)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float))
        elif isinstance(default, (list, dict, str)):
            ok = isinstance(value, type(default)) or isinstance(default, Objective)
        else:
            ok = True
        if not ok:
            raise ConfigError(f"{section}.{key}: expected {type(default).__name__}, got {type(value).__name__}")
    return {k: (float(v) if isinstance(fields[k].default, float) and isinstance(v, int) else v) for k, v in data.items()}


def _build(section: str, fn, kwargs):
    try:
        return fn(**kwargs)
    except (ValueError, TypeError, SimulationError, WeightingError) as exc:
        msg = str(exc)
        head, _, rest = msg.partition(" ")
        if head in kwargs and rest:
            raise ConfigError(f"{section}.{head}: {rest}") from exc
        raise ConfigError(f"{section}: {msg}") from exc


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("<root>: expected a mapping")
    unknown = set(d) - {"version", "scenario", "scheme", "train", "loss", "solver", "eval"}
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown section")
    if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"version: unsupported config version {d.get('version')!r}")

    sc = dict(d.get("scenario") or {})
    preset = sc.pop("preset", None)
    if preset is not None:
        if preset not in presets():
            raise ConfigError(f"scenario.preset: unknown preset {preset!r} (choose from {sorted(presets())})")
        base = presets()[preset].to_dict()
        base.update(_check_types("scenario", ScenarioConfig, sc))
        sc = base
    else:
        sc = _check_types("scenario", ScenarioConfig, sc)
    scenario = _build("scenario", ScenarioConfig, sc)

    sch = d.get("scheme") or {"kind": "gogps"}
    if not isinstance(sch, dict) or "kind" not in sch:
        raise ConfigError("scheme.kind: required")
    if set(sch) - {"kind", "params"}:
        raise ConfigError(f"scheme.{sorted(set(sch) - {'kind', 'params'})[0]}: unknown field")
    params = sch.get("params") or {}
    if not isinstance(params, dict):
        raise ConfigError("scheme.params: expected a mapping")
    try:
        kind = SchemeKind(sch["kind"])
    except ValueError:
        raise ConfigError(f"scheme.kind: unknown scheme {sch['kind']!r}") from None
    for k, v in params.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"scheme.params.{k}: expected a number")
    scheme = _build("scheme.params", WeightScheme, {"kind": kind, "params": {k: float(v) for k, v in params.items()}})

    tr = _check_types("train", TrainConfig, dict(d.get("train") or {}), allowed=_TRAIN_KEYS)
    if "objective" in tr and tr["objective"] not in {o.value for o in Objective}:
        raise ConfigError(f"train.objective: unknown objective {tr['objective']!r}")
    train = _build("train", TrainConfig, tr)
    loss = _build("loss", LossSettings, _check_types("loss", LossSettings, dict(d.get("loss") or {})))
    solver = _build("solver", SolverSettings, _check_types("solver", SolverSettings, dict(d.get("solver") or {})))
    ev = _build("eval", EvalSettings, _check_types("eval", EvalSettings, dict(d.get("eval") or {})))
    return RunConfig(scenario, scheme, train, loss, solver, ev)


def loads_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"<root>: not valid YAML ({exc})") from exc
    return config_from_dict(data or {})


def dumps_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def read_config(path) -> RunConfig:
    with open(path) as fh:
        return loads_config(fh.read())
