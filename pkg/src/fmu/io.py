"""Little-endian binary containers for cubes and checkpoints, and INI config loading.

Both containers share one layout::

    magic (4 bytes) | header length (uint32 LE) | JSON header (UTF-8) | payload

The header is written with sorted keys and no whitespace so identical inputs
give identical bytes on every platform.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from . import ndtensor as nt
from .ndtensor import ParamStore

CUBE_MAGIC = b"HSC1"
CKPT_MAGIC = b"FMU1"
_DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}


class FormatError(ValueError):
    """Malformed file. ``code`` is one of the ERROR_CODES."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


ERROR_CODES = ("bad_magic", "bad_header", "truncated_payload", "trailing_bytes", "shape_mismatch", "offset_mismatch")


def _dtype_tag(dtype) -> str:
    for tag, dt in _DTYPES.items():
        if np.dtype(dtype).kind == "f" and np.dtype(dtype).itemsize == dt.itemsize:
            return tag
    raise ValueError(f"unsupported dtype {np.dtype(dtype)}")


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<I", len(head)) + head + payload


def _unpack(blob: bytes, magic: bytes) -> tuple[dict, bytes]:
    if blob[:4] != magic:
        raise FormatError("bad_magic", f"expected {magic!r}, found {blob[:4]!r}")
    if len(blob) < 8:
        raise FormatError("bad_header", "file ends inside the header length")
    (n,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + n:
        raise FormatError("bad_header", "file ends inside the header")
    try:
        header = json.loads(blob[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("bad_header", f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("bad_header", "header must be an object")
    return header, blob[8 + n :]


def _check_length(payload: bytes, expected: int) -> None:
    if len(payload) < expected:
        raise FormatError("truncated_payload", f"payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise FormatError("trailing_bytes", f"payload has {len(payload) - expected} bytes past the end")


# ---------------------------------------------------------------------------
# cubes


def cube_bytes(cube) -> bytes:
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ValueError(f"cube must be [W, H, L], got shape {cube.shape}")
    w, h, b = cube.shape
    header = {"width": w, "height": h, "bands": b, "dtype": "f32le"}
    return _pack(CUBE_MAGIC, header, np.ascontiguousarray(cube, dtype="<f4").tobytes())


def cube_from_bytes(blob: bytes) -> np.ndarray:
    header, payload = _unpack(blob, CUBE_MAGIC)
    try:
        shape = tuple(int(header[k]) for k in ("width", "height", "bands"))
    except (KeyError, TypeError, ValueError):
        raise FormatError("bad_header", "cube header needs integer width, height, bands") from None
    if header.get("dtype") != "f32le":
        raise FormatError("bad_header", f"unsupported cube dtype {header.get('dtype')!r}")
    if min(shape) < 1:
        raise FormatError("shape_mismatch", f"non-positive cube extent {shape}")
    _check_length(payload, 4 * int(np.prod(shape)))
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_cube(path, cube) -> None:
    Path(path).write_bytes(cube_bytes(cube))


def load_cube(path) -> np.ndarray:
    return cube_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# checkpoints


def ckpt_bytes(ckpt) -> bytes:
    """Serialise a training checkpoint: parameters, Adam moments, mask, and run metadata."""
    arrays = []
    for p in ckpt.params.entries():
        arrays.append(("param", p.name, p.value.data, p.trainable))
    for kind, moments in (("adam_m", ckpt.adam.m), ("adam_v", ckpt.adam.v)):
        for name in sorted(moments):
            arrays.append((kind, name, moments[name], None))
    if ckpt.mask is not None:
        arrays.append(("mask", "mask", ckpt.mask, None))
    tag = _dtype_tag(nt.default_dtype())
    dt = _DTYPES[tag]
    entries, chunks, offset = [], [], 0
    for kind, name, arr, trainable in arrays:
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entry = {"kind": kind, "name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)}
        if trainable is not None:
            entry["trainable"] = bool(trainable)
        entries.append(entry)
        chunks.append(raw)
        offset += len(raw)
    header = {
        "dtype": tag,
        "phase": ckpt.phase,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "rng_state": ckpt.rng_state,
        "param_seed": ckpt.params.seed,
        "adam_t": ckpt.adam.t,
        "losses": [float(v) for v in ckpt.losses],
        "entries": entries,
        "payload_bytes": offset,
    }
    return _pack(CKPT_MAGIC, header, b"".join(chunks))


def ckpt_from_bytes(blob: bytes):
    from .training import AdamState, Checkpoint

    header, payload = _unpack(blob, CKPT_MAGIC)
    try:
        dt = _DTYPES[header["dtype"]]
        entries = header["entries"]
        total = int(header["payload_bytes"])
    except (KeyError, TypeError):
        raise FormatError("bad_header", "checkpoint manifest is incomplete") from None
    _check_length(payload, total)
    # offsets must tile the payload with no gaps or overlaps
    cursor = 0
    for e in entries:
        if e["offset"] != cursor:
            raise FormatError("offset_mismatch", f"entry {e['name']!r} starts at {e['offset']}, expected {cursor}")
        if e["nbytes"] != dt.itemsize * int(np.prod(e["shape"], dtype=np.int64)):
            raise FormatError("shape_mismatch", f"entry {e['name']!r}: {e['nbytes']} bytes for shape {e['shape']}")
        cursor += e["nbytes"]
    if cursor != total:
        raise FormatError("offset_mismatch", f"entries cover {cursor} of {total} payload bytes")

    work = nt.default_dtype()
    params = ParamStore(header.get("param_seed", 0))
    adam = AdamState(t=int(header["adam_t"]))
    mask = None
    for e in entries:
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"]).reshape(e["shape"])
        if e["kind"] == "param":
            params.add(e["name"], arr.astype(work), trainable=e.get("trainable", True))
        elif e["kind"] == "adam_m":
            adam.m[e["name"]] = arr.astype(work)
        elif e["kind"] == "adam_v":
            adam.v[e["name"]] = arr.astype(work)
        elif e["kind"] == "mask":
            mask = arr.astype(np.float64)
        else:
            raise FormatError("bad_header", f"unknown entry kind {e['kind']!r}")
    return Checkpoint(
        params=params,
        adam=adam,
        phase=int(header["phase"]),
        step=int(header["step"]),
        config=header["config"],
        config_hash=header["config_hash"],
        rng_state=header["rng_state"],
        losses=list(header["losses"]),
        mask=mask,
    )


def save_ckpt(path, ckpt) -> None:
    Path(path).write_bytes(ckpt_bytes(ckpt))


def load_ckpt(path):
    return ckpt_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# config files

_NESTED = ("data", "sensing", "model", "unfolding")
_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


class ConfigError(ValueError):
    pass


def _convert(raw: str, typ, key: str):
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    name = name.replace("typing.", "")
    try:
        if name == "bool":
            return _BOOL[raw.strip().lower()]
        if name == "int":
            return int(raw)
        if name == "float":
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"{key}: cannot read {raw!r} as {name}") from None
    return raw.strip()


def _section(cp: configparser.ConfigParser, section: str, cls) -> dict:
    if not cp.has_section(section):
        return {}
    fields = {f.name: f.type for f in dataclasses.fields(cls) if f.name not in _NESTED}
    out = {}
    for key, raw in cp.items(section):
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        out[key] = _convert(raw, fields[key], f"[{section}] {key}")
    return out


def config_from_text(text: str):
    """Parse an INI config. Sections: [train], [data], [sensing], [model], [unfolding].

    Keys mirror the config dataclass fields; an unknown section or key is an error.
    """
    from .training import DataConfig, SensingConfig, TrainConfig
    from .unfolding import ModelConfig, UnfoldingConfig

    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = {"train": TrainConfig, "data": DataConfig, "sensing": SensingConfig, "model": ModelConfig, "unfolding": UnfoldingConfig}
    for s in cp.sections():
        if s not in sections:
            raise ConfigError(f"unknown section [{s}]")
    body = _section(cp, "train", TrainConfig)
    for s in _NESTED:
        body[s] = _section(cp, s, sections[s])
    return TrainConfig.from_dict(body)


def load_config(path):
    return config_from_text(Path(path).read_text())
