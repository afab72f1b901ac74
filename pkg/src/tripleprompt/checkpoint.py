"""Versioned binary checkpoint.

Layout (all integers little-endian)::

    magic      8 bytes   b"TRPROMPT"
    version    u32
    cfg_hash   32 bytes  sha256 of the canonical config JSON
    epoch      u32       completed training epochs
    hdr_len    u32
    header     hdr_len bytes of UTF-8 JSON: config, layout, array shapes
    arrays     float64 little-endian, in header order
    trailer    32 bytes  sha256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, config_hash
from .loss_opt import FrozenWorld
from .prompt_context import PromptSet, TextEncoderParams
from .spatial_head import ProjectionParams

MAGIC = b"TRPROMPT"
VERSION = 1
_ARRAYS = ("ctx", "position_weights", "mix_matrix", "proj_matrix", "proj_bias", "class_tokens")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    prompts: PromptSet
    world: FrozenWorld
    epoch: int
    meta: dict

    @property
    def config_hash(self) -> str:
        return self.config.hash()


def to_bytes(ck: Checkpoint) -> bytes:
    arrays = {
        "ctx": ck.prompts.ctx,
        "position_weights": ck.world.text.position_weights,
        "mix_matrix": ck.world.text.mix_matrix,
        "proj_matrix": ck.world.proj.proj_matrix,
        "proj_bias": ck.world.proj.proj_bias,
        "class_tokens": ck.world.class_tokens,
    }
    header = {
        "config": ck.config.to_dict(),
        "layout": ck.prompts.layout,
        "text_seed": ck.world.text.seed,
        "proj_seed": ck.world.proj.seed,
        "shapes": {k: list(arrays[k].shape) for k in _ARRAYS},
        "meta": ck.meta,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        bytes.fromhex(ck.config_hash),
        struct.pack("<II", ck.epoch, len(hdr)),
        hdr,
        *(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes() for k in _ARRAYS),
    ])
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 8 + 4 + 32 + 8 + 32 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, trailer = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise CheckpointError("checkpoint integrity check failed")
    (version,) = struct.unpack_from("<I", body, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stored_hash = body[12:44].hex()
    epoch, hdr_len = struct.unpack_from("<II", body, 44)
    off = 52
    try:
        header = json.loads(body[off:off + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    off += hdr_len
    if config_hash(header["config"]) != stored_hash:
        raise CheckpointError("config hash does not match the stored config")
    arrays = {}
    for name in _ARRAYS:
        shape = tuple(header["shapes"][name])
        n = int(np.prod(shape)) * 8
        if off + n > len(body):
            raise CheckpointError("checkpoint payload truncated")
        arrays[name] = np.frombuffer(body[off:off + n], dtype="<f8").reshape(shape).astype(np.float64)
        off += n
    if off != len(body):
        raise CheckpointError("trailing bytes in checkpoint payload")

    config = RunConfig.from_dict(header["config"])
    text = TextEncoderParams(arrays["position_weights"], arrays["mix_matrix"], header["text_seed"])
    proj = ProjectionParams(arrays["proj_matrix"], arrays["proj_bias"], header["proj_seed"])
    world = FrozenWorld(text, proj, arrays["class_tokens"])
    prompts = PromptSet(arrays["ctx"], header["layout"])
    return Checkpoint(config, prompts, world, epoch, header.get("meta", {}))


def save(path: str | Path, ck: Checkpoint):
    Path(path).write_bytes(to_bytes(ck))


def load(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return from_bytes(blob)
