"""
Versioned binary checkpoint container.

    magic b"SKCK", version u32
    config blob     u32 length + UTF-8 JSON
    tensor count    u32
    per tensor      name (u32 length + UTF-8), dtype u32, ndim u32, shape u64 x ndim,
                    payload length u64, row-major payload, CRC32 u32 of the payload
    trailer         CRC32 u32 over everything before it

Each tensor carries its own CRC so a corrupt file names the tensor that
failed to restore.
"""

import hashlib
import json
import logging
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np
import torch

from skinssl.errors import MissingFileError, ResumeError

logger = logging.getLogger(__name__)

MAGIC = b"SKCK"
VERSION = 1
U32 = struct.Struct("<I")
U64 = struct.Struct("<Q")

DTYPES = {
    torch.float32: 1,
    torch.float64: 2,
    torch.int64: 3,
    torch.int32: 4,
    torch.uint8: 5,
    torch.bool: 6,
}
DTYPE_CODES = {code: dtype for dtype, code in DTYPES.items()}
NUMPY_DTYPES = {1: "<f4", 2: "<f8", 3: "<i8", 4: "<i4", 5: "u1", 6: "?"}


def _tensor_record(name, tensor):
    tensor = tensor.detach().cpu().contiguous()
    if tensor.dtype not in DTYPES:
        raise TypeError(f"Checkpoint cannot store dtype {tensor.dtype} ({name})")
    payload = tensor.numpy().tobytes()
    encoded = name.encode("utf-8")
    parts = [U32.pack(len(encoded)), encoded, U32.pack(DTYPES[tensor.dtype]),
             U32.pack(tensor.ndim)]
    parts += [U64.pack(s) for s in tensor.shape]
    parts += [U64.pack(len(payload)), payload, U32.pack(zlib.crc32(payload))]
    return b"".join(parts)


def checkpoint_bytes(tensors, config):
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    body = b"".join([MAGIC, U32.pack(VERSION), U32.pack(len(blob)), blob,
                     U32.pack(len(tensors))]
                    + [_tensor_record(name, tensors[name]) for name in sorted(tensors)])
    return body + U32.pack(zlib.crc32(body))


def save_checkpoint(path, tensors, config):
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(tensors, config)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".ckpt")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    logger.info(f"Saved checkpoint {path.name} ({len(tensors)} tensors, {len(data) / 1e6:.1f} MB)")
    return path


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ResumeError("Checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return U32.unpack(self.take(4))[0]

    def u64(self):
        return U64.unpack(self.take(8))[0]


def load_checkpoint(path):
    """Return (config dict, {name: tensor}); raises ResumeError naming a corrupt tensor."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"Checkpoint not found: {path}\n"
                               "Run `python -m skinssl pretrain` first or pass --checkpoint.")
    data = path.read_bytes()
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise ResumeError(f"Not a checkpoint file: {path}")
    version = reader.u32()
    if version != VERSION:
        raise ResumeError(f"Checkpoint version {version} is not supported: {path}")
    try:
        config = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ResumeError(f"Checkpoint config blob is corrupt: {e}") from None

    tensors = {}
    for _ in range(reader.u32()):
        try:
            name = reader.take(reader.u32()).decode("utf-8")
        except UnicodeDecodeError:
            raise ResumeError("Checkpoint tensor name is corrupt") from None
        code, ndim = reader.u32(), reader.u32()
        shape = tuple(reader.u64() for _ in range(ndim))
        payload = reader.take(reader.u64())
        if reader.u32() != zlib.crc32(payload):
            raise ResumeError(f"Checksum mismatch in tensor '{name}'", tensor=name)
        if code not in DTYPE_CODES:
            raise ResumeError(f"Unknown dtype code {code} for tensor '{name}'", tensor=name)
        try:
            array = np.frombuffer(payload, dtype=NUMPY_DTYPES[code]).reshape(shape).copy()
        except ValueError:
            raise ResumeError(f"Tensor '{name}' payload does not match its shape",
                              tensor=name) from None
        tensors[name] = torch.from_numpy(array)

    body_end = reader.pos
    if len(data) - body_end != U32.size or U32.unpack_from(data, body_end)[0] != zlib.crc32(data[:body_end]):
        raise ResumeError(f"Checkpoint trailer checksum mismatch: {path}")
    return config, tensors


# =============================================================================
# STATE HELPERS
# =============================================================================

def prefixed(prefix, state):
    return {f"{prefix}.{name}": value for name, value in state.items()}


def unprefixed(prefix, tensors):
    start = len(prefix) + 1
    return {name[start:]: value for name, value in tensors.items() if name.startswith(prefix + ".")}


def restore_module(module, prefix, tensors):
    state = unprefixed(prefix, tensors)
    expected = module.state_dict()
    for name, value in expected.items():
        if name not in state:
            raise ResumeError(f"Checkpoint lacks tensor '{prefix}.{name}'", tensor=f"{prefix}.{name}")
        if tuple(state[name].shape) != tuple(value.shape):
            raise ResumeError(f"Tensor '{prefix}.{name}' has shape {tuple(state[name].shape)}, "
                              f"expected {tuple(value.shape)}", tensor=f"{prefix}.{name}")
    module.load_state_dict({name: state[name].to(expected[name].dtype) for name in expected})


def optimizer_state(optimizer, prefix="optim"):
    """Split an optimizer state_dict into a JSON-able part and named tensors."""
    state = optimizer.state_dict()
    tensors, slots = {}, {}
    for index, entries in state["state"].items():
        keys = []
        for key, value in entries.items():
            if not torch.is_tensor(value):
                value = torch.tensor(value)
            tensors[f"{prefix}.{index}.{key}"] = value
            keys.append(key)
        slots[str(index)] = keys
    return {"param_groups": state["param_groups"], "slots": slots}, tensors


def load_optimizer_state(optimizer, meta, tensors, prefix="optim"):
    state = {}
    for index, keys in meta["slots"].items():
        state[int(index)] = {}
        for key in keys:
            name = f"{prefix}.{index}.{key}"
            if name not in tensors:
                raise ResumeError(f"Checkpoint lacks optimizer tensor '{name}'", tensor=name)
            state[int(index)][key] = tensors[name]
    optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def tensor_hash(tensors):
    """SHA-256 over sorted (name, dtype, shape, bytes); accepts a module or a dict."""
    if isinstance(tensors, torch.nn.Module):
        tensors = tensors.state_dict()
    digest = hashlib.sha256()
    for name in sorted(tensors):
        tensor = tensors[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()
