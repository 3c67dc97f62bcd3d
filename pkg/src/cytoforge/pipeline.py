"""Declarative multi-seed experiment runs.

A configuration is a JSON document::

    {"output_root": "runs/exp1",
     "seeds": [0, 1],
     "stages": [{"name": "knn", "params": {"train": "{out}/feats.emb", "report": "{out}/knn.json"}}]}

Stage parameters are the keyword arguments of the matching function in
:mod:`cytoforge.commands`; missing optional ones are filled with their
defaults. In string values ``{out}`` expands to the seed's output directory
(``<output_root>/seed_<seed>``) and ``{seed}`` to the seed. A stage ``seed``
left unset (null) takes the run seed.
"""

import inspect
import json
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .commands import STAGES, summarize
from .errors import ConfigError

logger = logging.getLogger(__name__)

_TOP_KEYS = {"output_root", "seeds", "stages"}
_STAGE_KEYS = {"name", "params"}


@dataclass
class StageSpec:
    name: str
    params: dict


@dataclass
class PipelineConfig:
    output_root: str
    seeds: list = field(default_factory=lambda: [0])
    stages: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "output_root": self.output_root,
            "seeds": list(self.seeds),
            "stages": [{"name": s.name, "params": s.params} for s in self.stages],
        }


def _schema(name):
    sig = inspect.signature(STAGES[name])
    hints = typing.get_type_hints(STAGES[name])
    return {
        p.name: (hints.get(p.name, str), p.default is inspect.Parameter.empty, p.default)
        for p in sig.parameters.values()
    }


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _coerce(value, kind, where):
    origin = typing.get_origin(kind)
    if origin is list:
        (elem,) = typing.get_args(kind)
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return [_coerce(v, elem, f"{where}[{i}]") for i, v in enumerate(value)]
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if not _is_int(value):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if not (_is_int(value) or isinstance(value, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def _default(value):
    return list(value) if isinstance(value, tuple) else value


def _parse_stage(doc, i):
    where = f"stages[{i}]"
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(doc) - _STAGE_KEYS
    if unknown:
        raise ConfigError(f"{where}: unknown key {sorted(unknown)[0]!r}")
    name = doc.get("name")
    if name not in STAGES:
        raise ConfigError(f"{where}.name: unknown stage {name!r}; expected one of {sorted(STAGES)}")
    raw = doc.get("params", {})
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}.params: expected an object")
    schema = _schema(name)
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigError(f"{where}.params: unknown key {sorted(unknown)[0]!r} for stage {name!r}")
    params = {}
    for key, (kind, required, default) in schema.items():
        pw = f"{where}.params.{key}"
        if key in raw:
            if key == "seed" and raw[key] is None:
                params[key] = None
            else:
                params[key] = _coerce(raw[key], kind, pw)
        elif required:
            raise ConfigError(f"{pw}: missing required key")
        elif key == "seed":
            params[key] = None
        else:
            params[key] = _default(default)
    return StageSpec(name, params)


def parse_config(text: str) -> PipelineConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r}")
    if "output_root" not in doc:
        raise ConfigError("output_root: missing required key")
    root = _coerce(doc["output_root"], str, "output_root")
    seeds = _coerce(doc.get("seeds", [0]), list[int], "seeds")
    stages = doc.get("stages", [])
    if not isinstance(stages, list):
        raise ConfigError("stages: expected a list")
    return PipelineConfig(root, seeds, [_parse_stage(s, i) for i, s in enumerate(stages)])


def serialize_config(config: PipelineConfig) -> str:
    return json.dumps(config.to_json(), indent=2) + "\n"


def _expand(value, out_dir, seed):
    if isinstance(value, str):
        return value.replace("{out}", str(out_dir)).replace("{seed}", str(seed))
    if isinstance(value, list):
        return [_expand(v, out_dir, seed) for v in value]
    return value


def _metric_keys(stages):
    names = [s.name for s in stages]
    return [n if names.count(n) == 1 else f"{n}[{i}]" for i, n in enumerate(names)]


def run_pipeline(config: PipelineConfig) -> dict:
    """Run every stage per seed; write and return ``<output_root>/summary.json``.

    A failing stage aborts its seed only; the failure is recorded.
    """
    root = Path(config.output_root)
    keys = _metric_keys(config.stages)
    runs = []
    for seed in config.seeds if config.stages else []:
        out_dir = root / f"seed_{seed}"
        out_dir.mkdir(parents=True, exist_ok=True)
        run = {"seed": seed, "status": "ok", "stages": {}}
        for key, stage in zip(keys, config.stages):
            params = {k: _expand(v, out_dir, seed) for k, v in stage.params.items()}
            if "seed" in params and params["seed"] is None:
                params["seed"] = seed
            try:
                run["stages"][key] = STAGES[stage.name](**params)
            except Exception as exc:  # recorded per seed, the other seeds still run
                logger.error("seed %s stage %s failed: %s", seed, key, exc)
                run.update(status="failed", failed_stage=key, error=f"{type(exc).__name__}: {exc}")
                break
        runs.append(run)

    aggregate = {}
    for key in keys:
        names = sorted({m for r in runs for m, v in r["stages"].get(key, {}).items()
                        if isinstance(v, (int, float)) and not isinstance(v, bool)})
        for m in names:
            aggregate[f"{key}.{m}"] = summarize([r["stages"].get(key, {}).get(m) for r in runs])

    summary = {
        "runs": runs,
        "aggregate": aggregate,
        "n_failed": sum(r["status"] != "ok" for r in runs),
    }
    root.mkdir(parents=True, exist_ok=True)
    (root / "summary.json").write_text(json.dumps(summary, indent=1, default=_json_default) + "\n")
    return summary


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")
