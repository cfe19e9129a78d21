#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
A self-describing binary file format for training checkpoints.

Layout (all integers little-endian):

    magic        6 bytes   b"C2FVL\\0"
    version      u32
    meta_length  u32, followed by that many bytes of UTF-8 JSON (sorted keys): round, best validation dice, config
                 fingerprint, config, optimizer hyperparameters
    n_blocks     u32, followed by n_blocks named blocks:
        name_length u16, name (UTF-8)
        ndim        u32
        shape       ndim × u64
        data        prod(shape) × f64

Block names are "model/<state key>" for parameters and buffers, and "optim/<index>/<field>" for the Adam state of the
parameter with the given index. Saving a loaded checkpoint reproduces the file byte for byte.
"""

from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
import struct

import numpy as np
import torch

from c2fvl.errors import ShapeMismatch


logger = logging.getLogger(__name__)

MAGIC = b"C2FVL\0"
VERSION = 1


@dataclass
class Checkpoint:
    """
    Snapshot of a training run.

    Attributes
    ----------
    model_state : dict
        Parameters and buffers by state key, as float64 arrays.
    optimizer_state : dict
        Per-parameter optimizer state `{index: {field: array}}`.
    param_groups : list
        Optimizer hyperparameters (JSON-compatible).
    round : int
        Number of completed optimization rounds.
    best_val_dice : float
        Best validation Dice observed (fraction), or -1 if there was no evaluation.
    fingerprint : str
        Fingerprint of the run configuration.
    config : dict
        The run configuration (see ``c2fvl.config.RunConfig.to_dict``).
    """
    model_state: dict
    optimizer_state: dict = field(default_factory=dict)
    param_groups: list = field(default_factory=list)
    round: int = 0
    best_val_dice: float = -1.0
    fingerprint: str = ""
    config: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, model, optimizer=None, round_=0, best_val_dice=-1.0, fingerprint="", config=None):
        """
        Copy the current state of a model (and optimizer) into a new checkpoint.
        """
        model_state = {key: _to_array(value) for key, value in model.state_dict().items()}
        optimizer_state, param_groups = {}, []
        if optimizer is not None:
            state_dict = optimizer.state_dict()
            for index, values in state_dict["state"].items():
                optimizer_state[int(index)] = {name: _to_array(value) for name, value in values.items()}
            param_groups = json.loads(json.dumps(state_dict["param_groups"]))
        return cls(model_state=model_state, optimizer_state=optimizer_state, param_groups=param_groups,
                   round=int(round_), best_val_dice=float(best_val_dice), fingerprint=fingerprint,
                   config=dict(config or {}))

    def metadata(self):
        return {"round": self.round, "best_val_dice": self.best_val_dice, "fingerprint": self.fingerprint,
                "config": self.config, "param_groups": self.param_groups}

    def blocks(self):
        """
        Yield the `(name, array)` blocks of the file in order.
        """
        for key, value in self.model_state.items():
            yield "model/{}".format(key), value
        for index in sorted(self.optimizer_state):
            for name in sorted(self.optimizer_state[index]):
                yield "optim/{}/{}".format(index, name), self.optimizer_state[index][name]


def _to_array(value):

    if isinstance(value, torch.Tensor):
        return value.detach().cpu().to(torch.float64).numpy().copy()
    return np.asarray(value, dtype=np.float64).copy()


def dumps(checkpoint):
    """
    Serialize a checkpoint to bytes.
    """
    meta = json.dumps(checkpoint.metadata(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    blocks = list(checkpoint.blocks())
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta)), meta, struct.pack("<I", len(blocks))]
    for name, array in blocks:
        array = np.ascontiguousarray(array, dtype="<f8")
        encoded = name.encode("utf-8")
        parts += [struct.pack("<H", len(encoded)), encoded, struct.pack("<I", array.ndim),
                  np.asarray(array.shape, dtype="<u8").tobytes(), array.tobytes()]
    return b"".join(parts)


class _Reader:

    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, n):
        if self.offset + n > len(self.data):
            raise IOError("Truncated checkpoint (needed {} bytes at offset {}).".format(n, self.offset))
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def loads(data):
    """
    Deserialize a checkpoint from bytes.

    Raises
    ------
    IOError
        If the data is not a valid checkpoint of a supported version.
    """
    reader = _Reader(data)
    if reader.take(len(MAGIC)) != MAGIC:
        raise IOError("Not a c2fvl checkpoint (bad magic bytes).")
    version = reader.unpack("<I")
    if version != VERSION:
        raise IOError("Unsupported checkpoint version: {}".format(version))
    try:
        meta = json.loads(reader.take(reader.unpack("<I")).decode("utf-8"))
    except ValueError as e:
        raise IOError(e)

    model_state, optimizer_state = {}, {}
    for _ in range(reader.unpack("<I")):
        name = reader.take(reader.unpack("<H")).decode("utf-8")
        ndim = reader.unpack("<I")
        shape = tuple(int(n) for n in np.frombuffer(reader.take(8 * ndim), dtype="<u8"))
        count = int(np.prod(shape)) if shape else 1
        array = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        kind, _, key = name.partition("/")
        if kind == "model":
            model_state[key] = array
        elif kind == "optim":
            index, _, field_name = key.partition("/")
            optimizer_state.setdefault(int(index), {})[field_name] = array
        else:
            raise IOError("Unknown checkpoint block: {}".format(name))
    if reader.offset != len(data):
        raise IOError("Trailing bytes after the last checkpoint block.")

    return Checkpoint(model_state=model_state, optimizer_state=optimizer_state,
                      param_groups=meta.get("param_groups", []), round=meta.get("round", 0),
                      best_val_dice=meta.get("best_val_dice", -1.0), fingerprint=meta.get("fingerprint", ""),
                      config=meta.get("config", {}))


def save_checkpoint(path, checkpoint):
    """
    Write a checkpoint to the given path.
    """
    try:
        Path(path).write_bytes(dumps(checkpoint))
    except OSError as e:
        raise IOError(e)


def load_checkpoint(path, verbose=False):
    """
    Read a checkpoint from the given path.

    Raises
    ------
    IOError
        If the file cannot be read or is not a valid checkpoint.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IOError(e)
    checkpoint = loads(data)
    if verbose:
        logger.info("Loaded checkpoint %s (round %d, best val dice %.4f, config %s)", path, checkpoint.round,
                    checkpoint.best_val_dice, checkpoint.fingerprint)
    return checkpoint


def restore(checkpoint, model, optimizer=None):
    """
    Load the checkpoint's state into a model (and optimizer) of matching architecture.

    Raises
    ------
    ShapeMismatch
        If state keys or shapes do not match the model.
    """
    current = model.state_dict()
    if set(current) != set(checkpoint.model_state):
        missing = sorted(set(current) - set(checkpoint.model_state))
        unexpected = sorted(set(checkpoint.model_state) - set(current))
        raise ShapeMismatch("Checkpoint does not fit the model (missing: {}, unexpected: {}).".format(
            missing, unexpected))
    state = {}
    for key, reference in current.items():
        value = checkpoint.model_state[key]
        if tuple(value.shape) != tuple(reference.shape):
            raise ShapeMismatch("Checkpoint entry {} has shape {}, the model expects {}.".format(
                key, value.shape, tuple(reference.shape)))
        state[key] = torch.as_tensor(value, dtype=reference.dtype, device=reference.device)
    model.load_state_dict(state)

    if optimizer is not None and checkpoint.param_groups:
        optimizer_state = {}
        for index, values in checkpoint.optimizer_state.items():
            optimizer_state[index] = {
                name: torch.as_tensor(value, dtype=torch.float32) if name == "step" else torch.as_tensor(value)
                for name, value in values.items()}
        optimizer.load_state_dict({"state": optimizer_state, "param_groups": checkpoint.param_groups})
