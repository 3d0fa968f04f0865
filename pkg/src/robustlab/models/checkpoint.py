"""Checkpoint archives: one npz file holding the config as structured text
plus a flat name -> array table of the model state (parameters and buffers)."""

import json

import numpy as np
import torch

from ..errors import ConfigurationError
from .config import ModelConfig
from .handle import build_model

_PREFIX = "state."


def save_checkpoint(handle, path):
    state = {
        _PREFIX + k: v.detach().cpu().numpy()
        for k, v in handle.module.state_dict().items()
    }
    np.savez(path, config=np.array(json.dumps(handle.config.to_dict())), **state)
    return path


def load_checkpoint(path, expected_config=None):
    """Rebuild a model from an archive. If expected_config is given, a
    mismatch with the stored config is an error."""
    try:
        data = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ConfigurationError(f"unreadable checkpoint {path}: {exc}") from exc
    if "config" not in data:
        raise ConfigurationError(f"checkpoint {path} has no config entry")
    config = ModelConfig.from_dict(json.loads(str(data["config"])))
    if expected_config is not None and config != expected_config:
        raise ConfigurationError(
            f"checkpoint config mismatch: stored {config}, expected {expected_config}"
        )
    handle = build_model(config, seed=0)
    state = {}
    for key in data.files:
        if key.startswith(_PREFIX):
            state[key[len(_PREFIX):]] = torch.from_numpy(data[key])
    try:
        handle.module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ConfigurationError(f"checkpoint state mismatch: {exc}") from exc
    return handle.eval()
