"""Binary checkpoint format for named tensors plus a text header.

Layout (all integers little-endian):

    magic           4 bytes  "MDCK"
    version         u32
    header length   u32
    header          UTF-8 "key=value" lines
    tensor records  repeated until end of file:
        name length u32, name UTF-8
        dtype       u8   (0 = float32, 1 = float64)
        rank        u8
        dims        u64 each
        data        raw little-endian values

Values are written verbatim, so a save/load round-trip is bit-exact. The
header carries the denoiser configuration, schedule parameters, training
hyperparameters, and the step counter; tensors carry model parameters under
``param.`` and first/second Adam moments under ``adam.m.`` / ``adam.v.``.
"""

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from maskdiff.denoiser import DenoiserConfig

MAGIC = b"MDCK"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_tensors(path, header: dict, tensors: "OrderedDict[str, np.ndarray]") -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    header_text = "".join(f"{k}={v}\n" for k, v in header.items()).encode("utf-8")
    buf.write(struct.pack("<I", len(header_text)))
    buf.write(header_text)
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ValueError(f"tensor {name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_tensors(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<I", raw, 8)
    offset = 12
    header_text = raw[offset : offset + header_len].decode("utf-8")
    offset += header_len
    header = {}
    for line in header_text.splitlines():
        key, _, value = line.partition("=")
        header[key] = value

    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    while offset < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        code, rank = struct.unpack_from("<BB", raw, offset)
        offset += 2
        dims = struct.unpack_from(f"<{rank}Q", raw, offset)
        offset += 8 * rank
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise ValueError(f"{path}: tensor {name} has unknown dtype code {code}")
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(view[offset : offset + nbytes], dtype=dtype).reshape(dims)
        offset += nbytes
        tensors[name] = arr.copy()
    return header, tensors


@dataclass
class Checkpoint:
    cfg: DenoiserConfig
    timesteps: int
    schedule_offset: float
    image_size: int
    learning_rate: float
    step: int
    params: "OrderedDict[str, torch.Tensor]"
    adam_m: "OrderedDict[str, torch.Tensor]"
    adam_v: "OrderedDict[str, torch.Tensor]"


def _cfg_header(cfg: DenoiserConfig) -> dict:
    return {
        "in_channels": cfg.in_channels,
        "base_channels": cfg.base_channels,
        "channel_mults": ",".join(str(m) for m in cfg.channel_mults),
        "attention_levels": ",".join(str(l) for l in sorted(cfg.attention_levels)),
        "groups": cfg.groups,
        "time_embed_dim": cfg.time_embed_dim,
    }


def _cfg_from_header(header: dict) -> DenoiserConfig:
    attn = header["attention_levels"]
    return DenoiserConfig(
        in_channels=int(header["in_channels"]),
        base_channels=int(header["base_channels"]),
        channel_mults=tuple(int(m) for m in header["channel_mults"].split(",")),
        attention_levels=frozenset(int(l) for l in attn.split(",")) if attn else frozenset(),
        groups=int(header["groups"]),
        time_embed_dim=int(header["time_embed_dim"]),
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = _cfg_header(ckpt.cfg)
    header.update(
        {
            "timesteps": ckpt.timesteps,
            "schedule_offset": repr(ckpt.schedule_offset),
            "image_size": ckpt.image_size,
            "learning_rate": repr(ckpt.learning_rate),
            "step": ckpt.step,
        }
    )
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, value in ckpt.params.items():
        tensors[f"param.{name}"] = value.detach().numpy()
    for name, value in ckpt.adam_m.items():
        tensors[f"adam.m.{name}"] = value.detach().numpy()
    for name, value in ckpt.adam_v.items():
        tensors[f"adam.v.{name}"] = value.detach().numpy()
    save_tensors(path, header, tensors)


def load_checkpoint(path) -> Checkpoint:
    header, tensors = load_tensors(path)
    params: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    adam_m: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    adam_v: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for name, arr in tensors.items():
        tensor = torch.from_numpy(arr)
        if name.startswith("param."):
            params[name[len("param.") :]] = tensor
        elif name.startswith("adam.m."):
            adam_m[name[len("adam.m.") :]] = tensor
        elif name.startswith("adam.v."):
            adam_v[name[len("adam.v.") :]] = tensor
        else:
            raise ValueError(f"{path}: unexpected tensor {name}")
    return Checkpoint(
        cfg=_cfg_from_header(header),
        timesteps=int(header["timesteps"]),
        schedule_offset=float(header["schedule_offset"]),
        image_size=int(header["image_size"]),
        learning_rate=float(header["learning_rate"]),
        step=int(header["step"]),
        params=params,
        adam_m=adam_m,
        adam_v=adam_v,
    )
