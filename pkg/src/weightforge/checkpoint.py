"""Binary checkpoint files: named sections of little-endian arrays or UTF-8 text.

Layout::

    b"WFG1" | u32 version | u32 section count
    section table, per entry:
        u16 name length | name (utf-8) | u8 kind | u8 ndim | u64 dims[ndim]
        u64 payload offset | u64 payload bytes | u32 crc32 of payload
    payloads, in table order

Kinds: 0 = float64 array, 1 = int64 array, 2 = utf-8 text. Offsets are
absolute. All integers are little-endian.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from . import tensor as T
from .diffusion import DenoiserConfig, Denoiser, DiffusionSchedule, Normalizer, TrainState
from .encoder import EncoderConfig, EquivariantEncoder
from .inr import MlpArchitecture, WeightVector

MAGIC = b"WFG1"
VERSION = 1
KIND_F64, KIND_I64, KIND_TEXT = 0, 1, 2


class CheckpointError(IOError):
    def __init__(self, message: str, section: str | None = None):
        super().__init__(message if section is None else f"section {section!r}: {message}")
        self.section = section


def _encode(value):
    if isinstance(value, str):
        return KIND_TEXT, (), value.encode("utf-8")
    arr = np.asarray(value)
    if arr.dtype.kind in "iub":
        return KIND_I64, arr.shape, np.ascontiguousarray(arr, dtype="<i8").tobytes()
    if arr.dtype.kind == "f":
        return KIND_F64, arr.shape, np.ascontiguousarray(arr, dtype="<f8").tobytes()
    raise CheckpointError(f"unsupported value of dtype {arr.dtype}")


def save_checkpoint(path, sections: dict) -> None:
    encoded = []
    for name, value in sections.items():
        try:
            encoded.append((name.encode("utf-8"), *_encode(value)))
        except CheckpointError as e:
            raise CheckpointError(str(e), name) from None
    table_size = sum(2 + len(n) + 2 + 8 * len(shape) + 8 + 8 + 4 for n, _, shape, _ in encoded)
    offset = 12 + table_size
    table = bytearray()
    for name, kind, shape, payload in encoded:
        table += struct.pack("<H", len(name)) + name + struct.pack("<BB", kind, len(shape))
        table += struct.pack(f"<{len(shape)}Q", *shape)
        table += struct.pack("<QQI", offset, len(payload), zlib.crc32(payload))
        offset += len(payload)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", VERSION, len(encoded)))
        f.write(table)
        for *_, payload in encoded:
            f.write(payload)


def load_checkpoint(path) -> dict:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)", "header")
    if len(raw) < 12:
        raise CheckpointError("truncated header", "header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}", "header")
    pos = 12
    out = {}
    for i in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2 : pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            kind, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            off, nbytes, crc = struct.unpack_from("<QQI", raw, pos)
            pos += 20
        except (struct.error, UnicodeDecodeError):
            raise CheckpointError(f"truncated section table at entry {i}", "table") from None
        payload = raw[off : off + nbytes]
        if len(payload) != nbytes:
            raise CheckpointError("payload truncated", name)
        if zlib.crc32(payload) != crc:
            raise CheckpointError("checksum mismatch", name)
        if kind == KIND_TEXT:
            out[name] = payload.decode("utf-8")
        elif kind in (KIND_F64, KIND_I64):
            dtype = "<f8" if kind == KIND_F64 else "<i8"
            if int(np.prod(shape, dtype=np.int64)) * 8 != nbytes:
                raise CheckpointError("shape does not match payload size", name)
            out[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype[1:])
        else:
            raise CheckpointError(f"unknown section kind {kind}", name)
    return out


def _require(sections: dict, name: str):
    if name not in sections:
        raise CheckpointError("missing", name)
    return sections[name]


def _meta(sections: dict, expected_type: str) -> dict:
    try:
        meta = json.loads(_require(sections, "meta"))
    except json.JSONDecodeError:
        raise CheckpointError("malformed metadata", "meta") from None
    if meta.get("type") != expected_type:
        raise CheckpointError(f"expected a {expected_type} checkpoint, found {meta.get('type')!r}", "meta")
    return meta


def _dumps(d: dict) -> str:
    return json.dumps(d, sort_keys=True)


# -- weight vectors -------------------------------------------------------------------
def save_weights(path, w: WeightVector, extra: dict | None = None) -> None:
    meta = {"type": "weights", "arch": w.arch.to_dict(), "tag": w.tag, "class": w.class_label}
    meta.update(extra or {})
    save_checkpoint(path, {"meta": _dumps(meta), "values": w.values})


def load_weights(path) -> WeightVector:
    s = load_checkpoint(path)
    meta = _meta(s, "weights")
    arch = MlpArchitecture.from_dict(meta["arch"])
    values = _require(s, "values")
    if values.shape != (arch.d,):
        raise CheckpointError(f"expected {arch.d} values, found {values.shape}", "values")
    return WeightVector(arch, values, meta["tag"], meta.get("class"))


# -- encoder -----------------------------------------------------------------------------
def encoder_sections(enc: EquivariantEncoder, prefix: str = "") -> dict:
    out = {f"{prefix}param/{k}": p.data for k, p in enc.named_parameters().items()}
    out[f"{prefix}block_stats"] = np.array(enc.block_stats, dtype=np.float64)
    out[f"{prefix}feature_stats"] = np.stack(enc.feature_stats)
    return out


def encoder_meta(enc: EquivariantEncoder) -> dict:
    return {"arch": enc.arch.to_dict(), "encoder": enc.config.__dict__}


def encoder_from_sections(s: dict, meta: dict, prefix: str = "") -> EquivariantEncoder:
    enc = EquivariantEncoder(MlpArchitecture.from_dict(meta["arch"]), EncoderConfig(**meta["encoder"]))
    for k, p in enc.named_parameters().items():
        arr = _require(s, f"{prefix}param/{k}")
        if arr.shape != p.shape:
            raise CheckpointError(f"shape {arr.shape} != {p.shape}", f"{prefix}param/{k}")
        p.data = arr.copy()
    enc.block_stats = [tuple(map(float, row)) for row in _require(s, f"{prefix}block_stats")]
    fs = _require(s, f"{prefix}feature_stats")
    if fs.shape != (2, enc.config.feature_dim):
        raise CheckpointError(f"shape {fs.shape} != (2, {enc.config.feature_dim})", f"{prefix}feature_stats")
    enc.feature_stats = (fs[0].copy(), fs[1].copy())
    return enc


def save_encoder(path, enc: EquivariantEncoder, extra: dict | None = None, config_text: str = "") -> None:
    meta = {"type": "encoder", **encoder_meta(enc), **(extra or {})}
    sections = {"meta": _dumps(meta), "config": config_text, **encoder_sections(enc)}
    save_checkpoint(path, sections)


def load_encoder(path) -> EquivariantEncoder:
    s = load_checkpoint(path)
    return encoder_from_sections(s, _meta(s, "encoder"))


# -- diffusion state ---------------------------------------------------------------------
def save_diffusion(path, state: TrainState, config_text: str = "", extra: dict | None = None) -> None:
    if state.encoder is None:
        raise CheckpointError("diffusion state has no encoder to embed", "encoder")
    den = state.denoiser
    meta = {
        "type": "diffusion",
        "arch": den.arch.to_dict(),
        "denoiser": den.config.__dict__,
        "encoder": state.encoder.config.__dict__,
        "T": state.schedule.T,
        "lam": state.lam,
        "ema_beta": state.ema_beta,
        "step": state.step,
        "epoch": state.epoch,
        "opt": {"lr": state.opt.lr, "weight_decay": state.opt.weight_decay, "betas": list(state.opt.betas),
                "eps": state.opt.eps, "step": state.opt.state.get("step", 0)},
    }
    meta.update(extra or {})
    sections = {"meta": _dumps(meta), "config": config_text}
    names = list(den.params)
    for k in names:
        sections[f"theta/{k}"] = den.params[k].data
        sections[f"ema/{k}"] = state.ema[k]
    for key in ("m", "v"):
        for k, arr in zip(names, state.opt.state.get(key) or []):
            sections[f"opt_{key}/{k}"] = arr
    sections["norm/mean"] = state.normalizer.mean
    sections["norm/std"] = state.normalizer.std
    sections["schedule/betas"] = state.schedule.betas
    sections.update(encoder_sections(state.encoder, "encoder/"))
    save_checkpoint(path, sections)


def load_diffusion(path) -> TrainState:
    s = load_checkpoint(path)
    meta = _meta(s, "diffusion")
    arch = MlpArchitecture.from_dict(meta["arch"])
    den = Denoiser(arch, DenoiserConfig(**meta["denoiser"]))
    names = list(den.params)
    den.load_arrays({k: _require(s, f"theta/{k}") for k in names})
    ema = {k: _require(s, f"ema/{k}").copy() for k in names}
    encoder = encoder_from_sections(s, {"arch": meta["arch"], "encoder": meta["encoder"]}, "encoder/")
    encoder.set_trainable(False)
    o = meta["opt"]
    opt = T.AdamW(den.parameters(), lr=o["lr"], weight_decay=o["weight_decay"], betas=tuple(o["betas"]), eps=o["eps"])
    if o["step"]:
        opt.state = {
            "step": o["step"],
            "m": [_require(s, f"opt_m/{k}").copy() for k in names],
            "v": [_require(s, f"opt_v/{k}").copy() for k in names],
        }
    betas = _require(s, "schedule/betas")
    if len(betas) != meta["T"]:
        raise CheckpointError("schedule length differs from T", "schedule/betas")
    alphas = 1.0 - betas
    schedule = DiffusionSchedule(meta["T"], betas, alphas, np.cumprod(alphas))
    norm = Normalizer(_require(s, "norm/mean").copy(), _require(s, "norm/std").copy())
    return TrainState(
        denoiser=den, ema=ema, opt=opt, schedule=schedule, normalizer=norm, encoder=encoder,
        lam=meta["lam"], ema_beta=meta["ema_beta"], step=meta["step"], epoch=meta["epoch"],
    )


def checkpoint_config_text(path) -> str:
    return load_checkpoint(path).get("config", "")
