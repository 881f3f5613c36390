"""Versioned JSON checkpoints: flat parameter map plus a config echo."""

import json
import os
import tempfile

import numpy as np

from ..errors import ConfigError, ParseError
from .params import ParamStore

FORMAT_VERSION = 1


def params_to_dict(params):
    out = {}
    for name in params.names():
        data = params.value(name)
        out[name] = {
            "shape": list(data.shape),
            "trainable": params.is_trainable(name),
            "values": data.ravel().tolist(),
        }
    return out


def params_from_dict(payload):
    params = ParamStore()
    for name, entry in payload.items():
        values = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        params.add(name, values, trainable=entry.get("trainable", True))
    return params


def write_json_atomic(path, payload):
    """Serialize deterministically and rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            json.dump(payload, handle, sort_keys=True, indent=1)
            handle.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params, config_echo):
    payload = {
        "format_version": FORMAT_VERSION,
        "config": config_echo,
        "params": params_to_dict(params),
    }
    write_json_atomic(path, payload)


def load_checkpoint(path):
    """Returns (ParamStore, config echo dict)."""
    try:
        with open(path) as handle:
            payload = json.load(handle)
    except (OSError, json.JSONDecodeError) as err:
        raise ParseError(f"cannot read checkpoint {path}: {err}") from err
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format_version {version!r}")
    return params_from_dict(payload["params"]), payload.get("config", {})
