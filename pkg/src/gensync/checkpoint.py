"""Binary checkpoint format.

Layout (little-endian)::

    b"GSYN"  u32 version  u32 tensor_count
    per tensor:
        u32 name_len  name (UTF-8)  u8 dtype  u32 rank  u64 dims[rank]  raw data

dtype 0 is float64, dtype 1 is uint64 (RNG words and counters).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import AdamState, MLPParams, Tensor
from .attention import AttentionParams
from .disentangle import DisentangleParams, IdentityTable
from .errors import FormatError, VersionError
from .model import GenSyncModel, ModelConfig
from .scene import GaussianCloud

MAGIC = b"GSYN"
VERSION = 1
F64, U64 = 0, 1
_DTYPES = {F64: np.dtype("<f8"), U64: np.dtype("<u8")}


def encode_tensors(tensors):
    """Serialize an ordered ``name -> ndarray`` mapping."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = U64 if arr.dtype.kind == "u" else F64
        arr = np.asarray(arr, dtype=_DTYPES[tag])
        # ascontiguousarray would promote scalars to rank 1
        arr = arr if arr.flags.c_contiguous else arr.copy(order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(buf):
    """Inverse of :func:`encode_tensors`; raises on any malformed byte."""
    def need(off, n, what):
        if off + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", off)

    need(0, 12, "header")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    off = 12
    out = {}
    for _ in range(count):
        need(off, 4, "name length")
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, n, "name")
        try:
            name = bytes(buf[off:off + n]).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", off) from None
        off += n
        need(off, 5, "dtype/rank")
        tag, rank = struct.unpack_from("<BI", buf, off)
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag}", off)
        off += 5
        need(off, 8 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        need(off, nbytes, f"data of {name!r}")
        arr = np.frombuffer(buf, dtype=_DTYPES[tag], count=nbytes // 8, offset=off).reshape(dims).copy()
        off += nbytes
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", off)
        out[name] = arr
    if off != len(buf):
        raise FormatError("trailing bytes after last tensor", off)
    return out


@dataclass
class Checkpoint:
    model: GenSyncModel
    optimizer_state: dict = field(default_factory=dict)  # parameter name -> AdamState
    rng_state: dict | None = None
    iteration: int = 0
    meta: dict = field(default_factory=dict)


def _rng_words(state):
    s = state["state"]
    words = [s["state"] >> 64, s["state"] & (2**64 - 1), s["inc"] >> 64, s["inc"] & (2**64 - 1),
             state["has_uint32"], state["uinteger"]]
    return np.array(words, dtype=np.uint64)


def _rng_state(words):
    w = [int(x) for x in words]
    return {"bit_generator": "PCG64", "state": {"state": (w[0] << 64) | w[1], "inc": (w[2] << 64) | w[3]},
            "has_uint32": w[4], "uinteger": w[5]}


def checkpoint_tensors(ckpt):
    m = ckpt.model
    out = {}
    for f in fields(ModelConfig):
        out[f"meta/config/{f.name}"] = np.array(float(getattr(m.config, f.name)))
    out["meta/iteration"] = np.array(ckpt.iteration, dtype=np.uint64)
    for key, val in ckpt.meta.items():
        out[f"meta/{key}"] = np.asarray(val, dtype=np.float64)
    for label, gain in m.gains.items():
        out[f"gain/{label}"] = np.array(float(gain))
    for name, p in m.shared_named_parameters().items():
        out[name] = p.data
    for label in m.labels:
        for name, p in m.identity_named_parameters(label).items():
            out[name] = p.data
        out[f"cloud/{label}/region_tags"] = m.clouds[label].region_tags.astype(np.float64)
    for name, st in ckpt.optimizer_state.items():
        out[f"adam/{name}/m"] = st.m[0]
        out[f"adam/{name}/v"] = st.v[0]
        out[f"adam/{name}/step"] = np.array(st.step, dtype=np.uint64)
    if ckpt.rng_state is not None:
        out["rng/state"] = _rng_words(ckpt.rng_state)
    return out


def _mlp(tensors, prefix):
    weights, biases = [], []
    k = 0
    while f"{prefix}/{k}/W" in tensors:
        weights.append(Tensor(tensors[f"{prefix}/{k}/W"], True))
        biases.append(Tensor(tensors[f"{prefix}/{k}/b"], True))
        k += 1
    if not weights:
        raise FormatError(f"missing MLP {prefix!r}")
    return MLPParams(weights, biases)


def checkpoint_from_tensors(t):
    try:
        cfg_vals = {}
        for f in fields(ModelConfig):
            v = float(t[f"meta/config/{f.name}"])
            cfg_vals[f.name] = int(v) if f.type in ("int", int) else v
        config = ModelConfig(**cfg_vals)
        leaf = lambda name: Tensor(t[name], True)
        model = GenSyncModel(
            config=config,
            disentangle=DisentangleParams(*(leaf(f"disentangle/{k}") for k in ("U1", "U2", "C", "W2", "W3"))),
            attention=AttentionParams(*(leaf(f"attention/{k}") for k in ("P_q", "P_m", "P_e", "P_v"))),
            f_d=_mlp(t, "fd"),
            identities=IdentityTable(config.identity_dim),
        )
        for name in t:
            if name.startswith("identity/"):
                label = name[len("identity/"):]
                cloud = GaussianCloud(leaf(f"cloud/{label}/positions"), leaf(f"cloud/{label}/features"),
                                      _mlp(t, f"cloud/{label}/fc"), t[f"cloud/{label}/region_tags"].astype(np.int64))
                model.clouds[label] = cloud
                model.identities.register(label, vector=t[name])
            elif name.startswith("gain/"):
                model.gains[name[len("gain/"):]] = float(t[name])
        opt = {}
        for name in t:
            if name.startswith("adam/") and name.endswith("/m"):
                pname = name[len("adam/"):-len("/m")]
                opt[pname] = AdamState([t[name]], [t[f"adam/{pname}/v"]], int(t[f"adam/{pname}/step"]))
        meta = {}
        for name in t:
            if name.startswith("meta/") and not name.startswith("meta/config/") and name != "meta/iteration":
                meta[name[len("meta/"):]] = float(t[name]) if t[name].ndim == 0 else t[name]
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing tensor {exc.args[0]!r}") from None
    rng_state = _rng_state(t["rng/state"]) if "rng/state" in t else None
    return Checkpoint(model, opt, rng_state, int(t["meta/iteration"]), meta)


def save_checkpoint(ckpt, path):
    data = encode_tensors(checkpoint_tensors(ckpt))
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write checkpoint: {exc.strerror}", os.fspath(path)) from exc


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return checkpoint_from_tensors(decode_tensors(buf))
