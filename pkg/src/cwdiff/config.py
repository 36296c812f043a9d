"""Run configuration: YAML file merged over defaults, validated by a JSON schema.

Unknown keys anywhere are rejected. ``schedule.T`` may be left null, in which
case it resolves to 256 for PDM and 4 for SDM.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path

import jsonschema
import yaml

from .denoiser import DenoiserConfig
from .diffusion import NOISE_POLICIES, TrainConfig
from .lighting import IlrConfig
from .scenes import SceneConfig
from .schedule import CONTINUOUS, SDM_SWITCH, GroupLayout, ScheduleSpec

PDM_T = 256
SDM_T = 4

def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


DEFAULTS: dict = _plain({
    "seed": 0,
    "data": {"train": 2048, "test": 256, "scene": asdict(SceneConfig())},
    "lighting": asdict(IlrConfig()),
    "schedule": {"mode": "pdm", "T": None, "taus": [0.9, 1.2, 1.5], "s": 0.008, "b": 1.0},
    # latent channel count follows from lighting.n_features
    "model": {k: v for k, v in asdict(DenoiserConfig()).items() if k != "latent_channels"},
    "train": asdict(TrainConfig()),
    "sampler": {"steps": 10, "K": 10, "guidance": 1.5, "noise_policy": "fresh", "batch": 64},
    "ablation": {
        "seeds": [0, 1, 2],
        "T_values": [1, 8, 64],
        "tsweep_steps": 2,
        "taus": [[1.0, 1.0, 1.0], [0.9, 1.2, 1.5], [1.5, 1.2, 0.9]],
        "order_T": 64,
        "order_steps": 10,
        "sdm_T_values": [1, 4],
        "sdm_train_steps": 2000,
        "guidance": 1.0,
    },
    "paths": {"dataset": None, "ilr": None, "denoiser": None},
})


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}
_TAUS = {"type": "array", "items": _POS, "minItems": 3, "maxItems": 3}
_PATH = {"type": ["string", "null"]}

SCHEMA: dict = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "data": _obj({
        "train": _POS_INT,
        "test": _POS_INT,
        "scene": _obj({
            "height": _POS_INT, "width": _POS_INT, "n_dirs": _POS_INT,
            "anchors": {"type": "array", "items": _POS_INT, "minItems": 2, "maxItems": 2},
            "lobes": {"type": "array", "items": _POS_INT, "minItems": 2, "maxItems": 2},
            "regions": {"type": "array", "items": _POS_INT, "minItems": 2, "maxItems": 2},
            "intensity": _PAIR, "sharpness": _PAIR, "slope": _NUM, "fov_deg": _POS,
        }),
    }),
    "lighting": _obj({
        "n_dirs": _POS_INT, "n_features": _POS_INT, "enc_layers": _POS_INT, "enc_width": _POS_INT,
        "dec_width": _POS_INT,
        "dec_layers": {"type": "array", "items": _POS_INT, "minItems": 3, "maxItems": 3},
        "n_freq": _POS_INT, "steps": _POS_INT, "batch": _POS_INT, "lr": _POS,
        "weight_decay": {"type": "number", "minimum": 0},
    }),
    "schedule": _obj({
        "mode": {"enum": ["pdm", "sdm"]},
        "T": {"type": ["integer", "null"], "minimum": 1},
        "taus": _TAUS,
        "s": {"type": "number", "minimum": 0},
        "b": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    }),
    "model": _obj({
        "width": _POS_INT, "levels": _POS_INT, "temb_dim": _POS_INT,
        "ctx_dim": _POS_INT, "groups": _POS_INT,
        "cfg_drop": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "mask_zero_snr": {"type": "boolean"},
    }),
    "train": _obj({
        "steps": _POS_INT, "batch": _POS_INT, "lr": _POS,
        "weight_decay": {"type": "number", "minimum": 0},
        "warmup": {"type": "integer", "minimum": 0}, "lr_floor": {"type": "number", "minimum": 0},
        "sdm_own_conditions": {"type": "number", "minimum": 0, "maximum": 1},
    }),
    "sampler": _obj({
        "steps": _POS_INT, "K": _POS_INT, "guidance": _NUM,
        "noise_policy": {"enum": list(NOISE_POLICIES)}, "batch": _POS_INT,
    }),
    "ablation": _obj({
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "T_values": {"type": "array", "items": _POS_INT, "minItems": 2},
        "tsweep_steps": _POS_INT,
        "taus": {"type": "array", "items": _TAUS, "minItems": 3, "maxItems": 3},
        "order_T": _POS_INT,
        "order_steps": _POS_INT,
        "sdm_T_values": {"type": "array", "items": _POS_INT, "minItems": 2},
        "sdm_train_steps": {"anyOf": [_POS_INT, {"type": "null"}]},
        "guidance": _NUM,
    }),
    "paths": _obj({"dataset": _PATH, "ilr": _PATH, "denoiser": _PATH}),
})


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def from_dict(cls, overrides: dict | None = None) -> "RunConfig":
        overrides = overrides or {}
        if not isinstance(overrides, dict):
            raise ConfigError("config root must be a mapping")
        merged = _merge(DEFAULTS, overrides)
        try:
            jsonschema.validate(merged, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{where}: {exc.message}") from None
        cfg = cls(merged)
        try:
            cfg.schedule_spec()
            cfg.model_config()
            cfg.ilr_config()
            cfg.scene_config()
            cfg.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "RunConfig":
        data = {}
        if path is not None:
            try:
                data = yaml.safe_load(Path(path).read_text("utf-8")) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from None
            if not isinstance(data, dict):
                raise ConfigError("config root must be a mapping")
        return cls.from_dict(_merge(data, overrides or {}))

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    def scene_config(self) -> SceneConfig:
        return SceneConfig.from_dict(self.raw["data"]["scene"])

    def ilr_config(self) -> IlrConfig:
        cfg = IlrConfig.from_dict(self.raw["lighting"])
        if cfg.n_dirs != self.raw["data"]["scene"]["n_dirs"]:
            raise ValueError("lighting.n_dirs must equal data.scene.n_dirs")
        return cfg

    def layout(self) -> GroupLayout:
        return GroupLayout.for_features(self.raw["lighting"]["n_features"])

    def model_config(self) -> DenoiserConfig:
        d = dict(self.raw["model"])
        d["latent_channels"] = self.layout().n_channels
        return DenoiserConfig.from_dict(d)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.raw["train"])

    def schedule_spec(self, mode: str | None = None, T: int | None = None) -> ScheduleSpec:
        s = self.raw["schedule"]
        mode = mode or s["mode"]
        T = T or s["T"] or (SDM_T if mode == "sdm" else PDM_T)
        return ScheduleSpec(int(T), tuple(s["taus"]), s["s"], s["b"],
                            SDM_SWITCH if mode == "sdm" else CONTINUOUS)
