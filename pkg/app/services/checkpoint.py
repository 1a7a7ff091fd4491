"""
Checkpoint service for the entity classification package.

File format (JSON, stable across versions):
    {
      "format": "knn-hop-former-checkpoint",
      "format_version": 1,
      "config": {...model config...},
      "meta": {...free-form run info...},
      "params": {"<name>": {"shape": [d0, d1, ...], "values": [row-major floats]}}
    }
Floats are written with repr precision so a save/load round trip is bit-exact.
"""

import json
import logging
import os

import numpy as np

from app.utils.errors import CheckpointIncompatibleError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'knn-hop-former-checkpoint'
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params, config=None, meta=None):
    """
    Write named parameters to a checkpoint file.

    Args:
        path (str): Output path (parent directories are created)
        params (dict): Name -> Tensor or np.ndarray
        config (dict, optional): Model config to store alongside
        meta (dict, optional): Extra run information
    """
    payload = {
        'format': CHECKPOINT_FORMAT,
        'format_version': CHECKPOINT_VERSION,
        'config': config or {},
        'meta': meta or {},
        'params': {},
    }
    for name in sorted(params):
        value = params[name]
        array = np.asarray(getattr(value, 'data', value), dtype=np.float64)
        payload['params'][name] = {
            'shape': list(array.shape),
            'values': array.reshape(-1).tolist(),
        }

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, sort_keys=True)
    logger.info(f"Saved checkpoint with {len(params)} tensors to {path}")


def load_checkpoint(path):
    """
    Read a checkpoint file.

    Args:
        path (str): Checkpoint path

    Returns:
        tuple: (params dict name -> np.ndarray, config dict, meta dict)

    Raises:
        FileNotFoundError: If the file does not exist
        CheckpointIncompatibleError: On unknown format/version or inconsistent shapes
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")

    with open(path, 'r', encoding='utf-8') as f:
        payload = json.load(f)

    if payload.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointIncompatibleError(f"{path} is not a checkpoint file")
    version = payload.get('format_version')
    if not isinstance(version, int) or isinstance(version, bool) or not 1 <= version <= CHECKPOINT_VERSION:
        raise CheckpointIncompatibleError(f"Unsupported checkpoint format_version {version}")

    params = {}
    for name, entry in payload['params'].items():
        shape = tuple(entry['shape'])
        values = np.asarray(entry['values'], dtype=np.float64)
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointIncompatibleError(f"Parameter {name}: {values.size} values for shape {shape}")
        params[name] = values.reshape(shape)

    return params, payload.get('config', {}), payload.get('meta', {})
