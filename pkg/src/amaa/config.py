"""Run configuration: one JSON document covering model, training, data.

The file has six sections (model, train, loss, scene, grid, dataset), each
optional, each a flat object of known keys; omitted keys take the defaults
below env-free and platform-free. Unknown sections or keys are hard errors
that name the key and its line in the file, as are values of the wrong
type or out of range. The defaults describe the full method (all three
attention/fusion toggles on) on the standard desk dataset.
"""

from __future__ import annotations

import copy
import dataclasses
import json

from .attention import SimamConfig
from .camera import CameraGrid
from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .scene import SceneSpec
from .training import TrainConfig


def default_config_dict() -> dict:
    return {
        "model": {
            "n_classes": 5,
            "widths": [8, 16, 32],
            "n_scales": 2,
            "use_se": True,
            "use_simam": True,
            "use_afg": True,
            "alpha": 0.75,
            "se_ratio": 4,
            "simam": {"lam": 1e-4, "window": 3,
                      "channel_mode": "channel_mean"},
            "sampling": "bilinear",
            "upsample_mode": "trilinear",
            "seed": 0,
        },
        "train": {
            "lr": 1e-4,
            "weight_decay": 1e-2,
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-8,
            "epochs": 15,
            "batch_size": 2,
            "poly_power": 0.9,
            "clip_norm": 5.0,
            "augment": True,
            "seed": 0,
        },
        "loss": {"lambda_cons": 0.1, "cons_window": 3},
        "scene": {
            "dims": [16, 12, 16],
            "n_classes": 5,
            "n_objects": [2, 4],
            "object_size": [2, 5],
            "seed": 0,
        },
        "grid": {
            "fx": 52.0,
            "fy": 52.0,
            "cx": 32.0,
            "cy": 24.0,
            "image_rows": 48,
            "image_cols": 64,
            "dims": [16, 12, 16],
            "voxel_size": 0.08,
            "origin": [-0.64, -0.48, 0.32],
        },
        "dataset": {"n_train": 64, "n_val": 16},
    }


def default_config_text() -> str:
    return json.dumps(default_config_dict(), indent=2) + "\n"


def _as_bool(v):
    if not isinstance(v, bool):
        raise ConfigError(f"expected true or false, got {v!r}")
    return v


def _as_int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"expected an integer, got {v!r}")
    return v


def _as_float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"expected a number, got {v!r}")
    return float(v)


def _as_str(v):
    if not isinstance(v, str):
        raise ConfigError(f"expected a string, got {v!r}")
    return v


def _seq(v, n, item, what):
    if not isinstance(v, (list, tuple)) or (n and len(v) != n):
        raise ConfigError(f"expected {what}, got {v!r}")
    if not n and not v:
        raise ConfigError(f"expected {what}, got an empty list")
    return tuple(item(x) for x in v)


def _as_int_pair(v):
    return _seq(v, 2, _as_int, "a pair of integers")


def _as_int_triple(v):
    return _seq(v, 3, _as_int, "three integers")


def _as_float_triple(v):
    return _seq(v, 3, _as_float, "three numbers")


def _as_int_list(v):
    return _seq(v, 0, _as_int, "a non-empty list of integers")


def _as_simam(v):
    if not isinstance(v, dict):
        raise ConfigError(f"expected an object, got {v!r}")
    out = dict(default_config_dict()["model"]["simam"])
    spec = {"lam": _as_float, "window": _as_int, "channel_mode": _as_str}
    for key, val in v.items():
        if key not in spec:
            raise ConfigError(f"unknown simam key {key!r}")
        out[key] = spec[key](val)
    return out


_SCHEMA = {
    "model": {
        "n_classes": _as_int, "widths": _as_int_list, "n_scales": _as_int,
        "use_se": _as_bool, "use_simam": _as_bool, "use_afg": _as_bool,
        "alpha": _as_float, "se_ratio": _as_int, "simam": _as_simam,
        "sampling": _as_str, "upsample_mode": _as_str, "seed": _as_int,
    },
    "train": {
        "lr": _as_float, "weight_decay": _as_float, "beta1": _as_float,
        "beta2": _as_float, "eps": _as_float, "epochs": _as_int,
        "batch_size": _as_int, "poly_power": _as_float,
        "clip_norm": _as_float, "augment": _as_bool, "seed": _as_int,
    },
    "loss": {"lambda_cons": _as_float, "cons_window": _as_int},
    "scene": {
        "dims": _as_int_triple, "n_classes": _as_int,
        "n_objects": _as_int_pair, "object_size": _as_int_pair,
        "seed": _as_int,
    },
    "grid": {
        "fx": _as_float, "fy": _as_float, "cx": _as_float, "cy": _as_float,
        "image_rows": _as_int, "image_cols": _as_int,
        "dims": _as_int_triple, "voxel_size": _as_float,
        "origin": _as_float_triple,
    },
    "dataset": {"n_train": _as_int, "n_val": _as_int},
}


def _convert_defaults():
    out = {}
    for section, keys in _SCHEMA.items():
        raw = default_config_dict()[section]
        out[section] = {k: keys[k](raw[k]) for k in raw}
    return out


_DEFAULTS = _convert_defaults()


def _key_line(text: str, section: str, key: str):
    start = max(text.find(f'"{section}"'), 0)
    pos = text.find(f'"{key}"', start)
    if pos == -1:
        pos = text.find(f'"{key}"')
    if pos == -1:
        return "?"
    return text.count("\n", 0, pos) + 1


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    scene: SceneSpec
    grid: CameraGrid
    n_train: int
    n_val: int
    snapshot: dict = dataclasses.field(compare=False, default_factory=dict)

    def to_dict(self) -> dict:
        """Fully-resolved settings (defaults merged in), JSON-safe."""
        return copy.deepcopy(self.snapshot)


def _merge_section(section: str, user: dict, text: str, source: str) -> dict:
    if not isinstance(user, dict):
        line = _key_line(text, section, section)
        raise ConfigError(f"{source}: section {section!r} must be an object "
                          f"(line {line})")
    merged = dict(_DEFAULTS[section])
    for key, value in user.items():
        if key not in _SCHEMA[section]:
            line = _key_line(text, section, key)
            raise ConfigError(f"{source}: unknown key {section}.{key} "
                              f"(line {line})")
        try:
            merged[key] = _SCHEMA[section][key](value)
        except ConfigError as err:
            line = _key_line(text, section, key)
            raise ConfigError(f"{source}: bad value for {section}.{key} "
                              f"(line {line}): {err}") from None
    return merged


def _construct(section, make, merged, user_keys, text, source):
    try:
        return make(merged)
    except ConfigError as err:
        # Re-run with one user key at a time to pin down which one broke.
        for key in user_keys:
            probe = dict(_DEFAULTS[section])
            probe[key] = merged[key]
            try:
                make(probe)
            except ConfigError:
                line = _key_line(text, section, key)
                raise ConfigError(
                    f"{source}: bad value for {section}.{key} "
                    f"(line {line}): {err}") from None
        raise ConfigError(f"{source}: section {section!r}: {err}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{source}: invalid JSON at line {err.lineno}: "
                          f"{err.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be an object")
    for section in data:
        if section not in _SCHEMA:
            line = _key_line(text, section, section)
            raise ConfigError(f"{source}: unknown section {section!r} "
                              f"(line {line})")

    merged = {section: _merge_section(section, data.get(section, {}),
                                      text, source)
              for section in _SCHEMA}
    users = {section: tuple(data.get(section, {})) for section in _SCHEMA}

    loss_cfg = _construct("loss", lambda m: LossConfig(**m), merged["loss"],
                          users["loss"], text, source)

    def make_model(m):
        kwargs = dict(m)
        kwargs["widths"] = tuple(kwargs["widths"])
        kwargs["simam"] = SimamConfig(**kwargs["simam"])
        return ModelConfig(**kwargs)

    model_cfg = _construct("model", make_model, merged["model"],
                           users["model"], text, source)
    model_cfg = dataclasses.replace(model_cfg, loss=loss_cfg)
    train_cfg = _construct("train", lambda m: TrainConfig(**m),
                           merged["train"], users["train"], text, source)
    scene_cfg = _construct("scene", lambda m: SceneSpec(**m),
                           merged["scene"], users["scene"], text, source)
    grid_cfg = _construct("grid", lambda m: CameraGrid(**m),
                          merged["grid"], users["grid"], text, source)

    def make_dataset(m):
        if m["n_train"] < 0 or m["n_val"] < 0:
            raise ConfigError("split sizes must be >= 0, got "
                              f"{m['n_train']}/{m['n_val']}")
        return (m["n_train"], m["n_val"])

    n_train, n_val = _construct("dataset", make_dataset, merged["dataset"],
                                users["dataset"], text, source)

    if model_cfg.n_classes != scene_cfg.n_classes:
        raise ConfigError(
            f"{source}: model.n_classes ({model_cfg.n_classes}) != "
            f"scene.n_classes ({scene_cfg.n_classes})")
    if tuple(grid_cfg.dims) != tuple(scene_cfg.dims):
        raise ConfigError(f"{source}: grid.dims {tuple(grid_cfg.dims)} != "
                          f"scene.dims {tuple(scene_cfg.dims)}")

    snapshot = {section: {k: _json_safe(v) for k, v in merged[section].items()}
                for section in _SCHEMA}
    return RunConfig(model=model_cfg, train=train_cfg, scene=scene_cfg,
                     grid=grid_cfg, n_train=n_train, n_val=n_val,
                     snapshot=snapshot)


def _json_safe(value):
    if isinstance(value, tuple):
        return [_json_safe(v) for v in value]
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    return value


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    except OSError as err:
        raise ConfigError(f"{path}: cannot read config: {err}") from None
    return parse_config(text, source=str(path))


def default_run_config() -> RunConfig:
    return parse_config(default_config_text(), source="<defaults>")
