"""
Checkpoint files: a versioned JSON header {format, version, config, variant,
vocab} followed by the named parameter tensors in registry order.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List

import numpy as np

from app.models.checkpoint import CHECKPOINT_FORMAT, CHECKPOINT_VERSION, SNS_FORMAT, Checkpoint, SNSState
from app.models.errors import DataFormatError
from app.models.run_config import RunConfig

logger = logging.getLogger(__name__)


def _encode_parameters(parameters: Dict[str, np.ndarray]) -> List[Dict[str, Any]]:
    return [{'name': name, 'shape': list(value.shape), 'data': value.reshape(-1).tolist()}
            for name, value in parameters.items()]


def _decode_parameters(items: List[Dict[str, Any]]) -> Dict[str, np.ndarray]:
    parameters = {}
    for item in items:
        try:
            value = np.asarray(item['data'], dtype=np.float64).reshape(item['shape'])
        except KeyError as e:
            raise DataFormatError('Parameter entry is incomplete', field=str(e.args[0])) from e
        except ValueError as e:
            raise DataFormatError(f"Parameter {item.get('name')}: data does not match its shape",
                                  field='parameters') from e
        parameters[item['name']] = value
    return parameters


def _check_header(data: Dict[str, Any], expected_format: str, path) -> None:
    if data.get('format') != expected_format:
        raise DataFormatError(f"{path} is not a {expected_format} file", field='format')
    if data.get('version') != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {data.get('version')}", field='version')


def _dump(data: Dict[str, Any], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(data, handle, sort_keys=True)
        handle.write('\n')


def _load(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"File not found: {path}")
    with open(path, 'r', encoding='utf-8') as handle:
        try:
            return json.load(handle)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{path}: invalid JSON ({e.msg})", line=e.lineno) from e


def sns_to_dict(state: SNSState) -> Dict[str, Any]:
    return {'format': SNS_FORMAT, 'version': CHECKPOINT_VERSION, 'header': state.header,
            'parameters': _encode_parameters(state.parameters)}


def sns_from_dict(data: Dict[str, Any], path='<sns>') -> SNSState:
    _check_header(data, SNS_FORMAT, path)
    if 'header' not in data:
        raise DataFormatError(f"{path}: SNS header missing", field='header')
    return SNSState(dict(data['header']), _decode_parameters(data.get('parameters', [])))


def save_sns(state: SNSState, path) -> None:
    _dump(sns_to_dict(state), path)
    logger.info(f"Saved SNS model ({len(state.parameters)} tensors) to {path}")


def load_sns(path) -> SNSState:
    return sns_from_dict(_load(path), path)


def checkpoint_to_dict(checkpoint: Checkpoint) -> Dict[str, Any]:
    return {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'config': checkpoint.config.to_sections(),
        'variant': checkpoint.variant,
        'effective_labels': checkpoint.effective_labels,
        'vocab': list(checkpoint.answers),
        'sns': sns_to_dict(checkpoint.sns) if checkpoint.sns is not None else None,
        'parameters': _encode_parameters(checkpoint.parameters),
    }


def checkpoint_from_dict(data: Dict[str, Any], path='<checkpoint>') -> Checkpoint:
    _check_header(data, CHECKPOINT_FORMAT, path)
    for key in ('config', 'variant', 'vocab', 'parameters'):
        if key not in data:
            raise DataFormatError(f"{path}: checkpoint lacks '{key}'", field=key)
    config = RunConfig().with_sections(data['config']).validate()
    return Checkpoint(
        config=config,
        variant=data['variant'],
        answers=list(data['vocab']),
        parameters=_decode_parameters(data['parameters']),
        sns=sns_from_dict(data['sns'], path) if data.get('sns') else None,
        effective_labels=bool(data.get('effective_labels', False)),
    )


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    _dump(checkpoint_to_dict(checkpoint), path)
    logger.info(f"Saved {checkpoint.variant} checkpoint with {len(checkpoint.parameters)} tensors to {path}")


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_dict(_load(path), path)
