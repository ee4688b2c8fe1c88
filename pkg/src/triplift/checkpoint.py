"""Portable binary checkpoints.

Layout (all integers little-endian)::

    magic        4 bytes  b"TPCK"
    version      u32      (currently 1)
    config_len   u32
    config       config_len bytes of UTF-8 JSON {"generator": {...}, "lift": {...}}
    n_arrays     u32
    n_arrays x   array record (generator parameters in declaration order)
    sections     zero or more of: tag (4 bytes) + u32 payload length + payload

    array record: u16 name_len, name (UTF-8), u8 ndim, ndim x u32 dims,
                  prod(dims) x float32 values (C order)

Sections:

* ``LATS`` latent table: u32 count, u32 dim, count x (u16 len + UTF-8 id),
  then count*dim float32 values.
* ``OPTS`` optimiser state: u64 step, u32 n, then n (m, v) array-record
  pairs named like their parameter, then n float64 learning rates.
* ``HIST`` loss history: u32 rows, rows x 5 float64 (step, l_rgb, l_iou,
  l_perc, total).
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .generator import GeneratorConfig, TriPlaneGenerator
from .lifting import OptimState

MAGIC = b"TPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    generator: TriPlaneGenerator
    latents: torch.Tensor | None = None
    object_ids: list = field(default_factory=list)
    state: OptimState | None = None
    history: list = field(default_factory=list)
    lift_config: dict = field(default_factory=dict)

    def latent(self, key):
        if isinstance(key, int):
            return self.latents[key]
        return self.latents[self.object_ids.index(key)]


def _write_array(buf, name: str, arr: np.ndarray):
    nb = name.encode()
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def _read_array(buf):
    (n,) = struct.unpack("<H", buf.read(2))
    name = buf.read(n).decode()
    (ndim,) = struct.unpack("<B", buf.read(1))
    shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(buf.read(4 * count), dtype="<f4").reshape(shape)
    return name, data


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().float().numpy()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    gen = ckpt.generator
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = json.dumps({"generator": gen.config.to_dict(), "lift": ckpt.lift_config}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    named = list(gen.named_parameters())
    buf.write(struct.pack("<I", len(named)))
    for name, p in named:
        _write_array(buf, name, _np(p))

    if ckpt.latents is not None:
        sec = io.BytesIO()
        lat = _np(ckpt.latents)
        sec.write(struct.pack("<II", *lat.shape))
        for oid in ckpt.object_ids:
            b = str(oid).encode()
            sec.write(struct.pack("<H", len(b)))
            sec.write(b)
        sec.write(np.ascontiguousarray(lat, dtype="<f4").tobytes())
        _write_section(buf, b"LATS", sec.getvalue())

    if ckpt.state is not None:
        sec = io.BytesIO()
        st = ckpt.state
        names = [n for n, _ in named] + ["latents"]
        sec.write(struct.pack("<QI", st.step, len(st.m)))
        for n, m, v in zip(names, st.m, st.v):
            _write_array(sec, n + ".m", _np(m))
            _write_array(sec, n + ".v", _np(v))
        sec.write(np.asarray(st.lrs, dtype="<f8").tobytes())
        _write_section(buf, b"OPTS", sec.getvalue())

    if ckpt.history:
        h = np.asarray(ckpt.history, dtype="<f8").reshape(-1, 5)
        _write_section(buf, b"HIST", struct.pack("<I", h.shape[0]) + h.tobytes())

    Path(path).write_bytes(buf.getvalue())


def _write_section(buf, tag: bytes, payload: bytes):
    buf.write(tag)
    buf.write(struct.pack("<I", len(payload)))
    buf.write(payload)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    if buf.read(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (n,) = struct.unpack("<I", buf.read(4))
    cfg = json.loads(buf.read(n).decode())
    gen = TriPlaneGenerator(GeneratorConfig.from_dict(cfg["generator"]))
    params = dict(gen.named_parameters())
    (count,) = struct.unpack("<I", buf.read(4))
    if count != len(params):
        raise CheckpointError(f"{path}: {count} arrays, generator expects {len(params)}")
    with torch.no_grad():
        for _ in range(count):
            name, data = _read_array(buf)
            if name not in params or tuple(params[name].shape) != data.shape:
                raise CheckpointError(f"{path}: unexpected array {name} {data.shape}")
            params[name].copy_(torch.from_numpy(data.copy()))

    ckpt = Checkpoint(gen, lift_config=cfg.get("lift") or {})
    while True:
        tag = buf.read(4)
        if not tag:
            break
        (length,) = struct.unpack("<I", buf.read(4))
        sec = io.BytesIO(buf.read(length))
        if tag == b"LATS":
            k, dim = struct.unpack("<II", sec.read(8))
            ids = []
            for _ in range(k):
                (m,) = struct.unpack("<H", sec.read(2))
                ids.append(sec.read(m).decode())
            lat = np.frombuffer(sec.read(4 * k * dim), dtype="<f4").reshape(k, dim)
            ckpt.latents = torch.from_numpy(lat.copy())
            ckpt.object_ids = ids
        elif tag == b"OPTS":
            step, n_st = struct.unpack("<QI", sec.read(12))
            ms, vs = [], []
            for _ in range(n_st):
                ms.append(torch.from_numpy(_read_array(sec)[1].copy()))
                vs.append(torch.from_numpy(_read_array(sec)[1].copy()))
            lrs = np.frombuffer(sec.read(8 * n_st), dtype="<f8").tolist()
            ckpt.state = OptimState(int(step), lrs, ms, vs)
        elif tag == b"HIST":
            (rows,) = struct.unpack("<I", sec.read(4))
            h = np.frombuffer(sec.read(8 * 5 * rows), dtype="<f8").reshape(rows, 5)
            ckpt.history = [[int(r[0])] + [float(x) for x in r[1:]] for r in h]
        # unknown sections are skipped for forward compatibility
    return ckpt
