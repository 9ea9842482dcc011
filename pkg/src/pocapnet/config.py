"""Declarative run configuration: defaults < JSON file < command-line flags."""

from __future__ import annotations

import copy
import difflib
import json
from dataclasses import fields
from pathlib import Path

from .corpus import CorpusParams
from .losses import LossSpec
from .model import ModelConfig
from .optim import TrainConfig


class ConfigError(ValueError):
    pass


def _dataclass_defaults(cls, skip=()) -> dict:
    obj = cls()
    return {f.name: copy.deepcopy(getattr(obj, f.name)) for f in fields(cls) if f.name not in skip}


def default_config() -> dict:
    model = ModelConfig().to_dict()
    train = _dataclass_defaults(TrainConfig, skip=("loss",))
    loss = _dataclass_defaults(LossSpec)
    loss["kind"] = loss["kind"].value
    corpus = {"path": None, **CorpusParams().to_dict()}
    return {
        "corpus": corpus,
        "model": model,
        "train": {**train, "loss": loss},
        "eval": {"out_dir": "runs/default", "split": "test", "checkpoint": None, "ribbon_ops": 4},
    }


DESCRIPTIONS = {
    "corpus.path": "existing corpus directory; null generates one in memory from the corpus.* parameters",
    "corpus.seed": "corpus seed (emission means, durations, split)",
    "corpus.n_ops": "number of operations (60-20-20 split by operation)",
    "corpus.noise": "per-dimension feature noise std",
    "corpus.confusability": "per-phase blend weight toward the neighbouring phase",
    "corpus.boundary_jitter_s": "std of the offset between emitted and annotated phase borders",
    "corpus.edge_similarity": "correlation of the first and last phase emission means",
    "model.temporal_mode": "plain | positional | delayed",
    "model.num_blocks": "residual blocks per stage (dilations 1, 2, 4, ...)",
    "train.learning_rate": "Adam step size; the published recipe uses 9e-6 over far longer training",
    "train.batch_size": "frames per contiguous mini-batch",
    "train.loss.kind": "ce | weighted_ce | focal | ldam",
    "train.loss.ldam_reweight": "weight LDAM frames by inverse class frequency",
    "train.loss.class_counts": "empty = count training-split frames",
    "eval.out_dir": "where checkpoints, traces, reports and figures are written",
    "eval.checkpoint": "checkpoint to evaluate; null = <out_dir>/checkpoint.pckp",
}


def flatten(cfg: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in cfg.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _unknown(key: str, valid) -> ConfigError:
    near = difflib.get_close_matches(key, list(valid), n=1)
    hint = f"; did you mean '{near[0]}'?" if near else ""
    return ConfigError(f"unknown config key '{key}'{hint}")


def merge(base: dict, override: dict, prefix: str = "") -> dict:
    valid = flatten(default_config())
    out = copy.deepcopy(base)
    for k, v in override.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v, key + ".")
        elif k not in out:
            raise _unknown(key, valid)
        else:
            out[k] = v
    return out


def set_key(cfg: dict, dotted: str, value):
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise _unknown(dotted, flatten(default_config()))
        node = node[p]
    if parts[-1] not in node:
        raise _unknown(dotted, flatten(default_config()))
    node[parts[-1]] = value


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = merge(cfg, raw)
    for k, v in (overrides or {}).items():
        set_key(cfg, k, v)
    validate(cfg)
    return cfg


def validate(cfg: dict):
    try:
        build_model_config(cfg)
        build_train_config(cfg)
        build_corpus_params(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    path = cfg["corpus"]["path"]
    if path is not None and not Path(path).is_dir():
        raise ConfigError(f"corpus.path '{path}' does not exist")
    if cfg["eval"]["split"] not in ("train", "val", "test"):
        raise ConfigError("eval.split must be train, val or test")


def build_model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.from_dict(dict(cfg["model"]))


def build_train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t["loss"] = LossSpec(**t["loss"])
    return TrainConfig(**t)


def build_corpus_params(cfg: dict) -> CorpusParams:
    c = dict(cfg["corpus"])
    c.pop("path")
    return CorpusParams(**c)


def parse_value(text: str, default):
    """Parse a flag value using the default's type; JSON for lists, null and bools."""
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got '{text}'")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"expected an integer, got '{text}'") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"expected a number, got '{text}'") from None
    if isinstance(default, list) or default is None:
        if text.lower() == "null":
            return None
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            return text
    return text
