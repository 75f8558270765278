"""
Checkpoint Files.

Layout of a `.ckpt` file:

    magic        8 bytes   b"MOPSANCK"
    header_len   uint32    little-endian byte length of the JSON header
    header       JSON      {"format_version", "module", "step", "manifest": [[name, shape], ...]}
    payload      float64   little-endian arrays in manifest order, C order

Arrays are written and read as raw bytes so a round trip is bit-exact.
"""
import json
import os
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

import config
from errors import CheckpointError
from logger import setup_logger

logger = setup_logger(__name__)

_LE_F8 = np.dtype("<f8")


def save_checkpoint(path, module_name: str, arrays: Dict[str, np.ndarray], step: Optional[int] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(arrays)
    header = {
        "format_version": config.CHECKPOINT_FORMAT_VERSION,
        "module": module_name,
        "step": step,
        "manifest": [[name, list(np.shape(arrays[name]))] for name in names],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(config.CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", len(header_bytes)))
            f.write(header_bytes)
            for name in names:
                f.write(np.ascontiguousarray(arrays[name], dtype=_LE_F8).tobytes())
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.debug(f"Wrote checkpoint {path} ({len(names)} arrays)")
    return path


def load_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    magic_len = len(config.CHECKPOINT_MAGIC)
    if blob[:magic_len] != config.CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file", field="magic")
    (header_len,) = struct.unpack("<I", blob[magic_len:magic_len + 4])
    offset = magic_len + 4
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header in {path}", field="header") from exc
    if header.get("format_version") != config.CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format version {header.get('format_version')}, "
            f"expected {config.CHECKPOINT_FORMAT_VERSION}", field="format_version")
    offset += header_len
    arrays = {}
    for name, shape in header["manifest"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * _LE_F8.itemsize
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path} is truncated", field=name)
        arrays[name] = np.frombuffer(blob, dtype=_LE_F8, count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path} has {len(blob) - offset} trailing bytes", field="payload")
    return header, arrays


def save_module(path, module_name: str, module, step: Optional[int] = None) -> Path:
    return save_checkpoint(path, module_name, module.state_dict(), step=step)


def load_module(path, module_name: str, module) -> dict:
    """Loads a checkpoint into `module`, checking the module name and every shape."""
    header, arrays = load_checkpoint(path)
    if header["module"] != module_name:
        raise CheckpointError(
            f"{path} holds module '{header['module']}', expected '{module_name}'", field="module")
    expected = module.named_parameters()
    for name, param in expected.items():
        if name not in arrays:
            raise CheckpointError(f"{path} is missing parameter '{name}'", field=name)
        if arrays[name].shape != param.value.shape:
            raise CheckpointError(
                f"shape {arrays[name].shape} in {path} does not match {param.value.shape}", field=name)
    extra = sorted(set(arrays) - set(expected))
    if extra:
        raise CheckpointError(f"{path} has unexpected parameter '{extra[0]}'", field=extra[0])
    module.load_state_dict(arrays)
    return header
