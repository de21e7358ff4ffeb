"""Single-file checkpoint container.

Layout (all integers little-endian)::

    b"SPCK"  uint32 version  uint64 manifest_len  uint32 manifest_crc
    manifest (UTF-8 JSON)
    tensor blocks, float64 LE, in manifest order

The manifest describes the model (backbone config, conv widths, split,
codec width, channel), the pipeline metadata and metric history, optimizer
and rng state, and for every tensor block its name, shape, byte offset and
CRC32.  Loading rebuilds the model from the manifest and checks every block
against it, so a truncated, tampered or mismatched file fails loudly.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .channel import AwgnChannel
from .errors import ChecksumError, ConfigError, DimensionError, StateError
from .models import BackboneConfig, ModelMeta, SplitModel, build_split_model

MAGIC = b"SPCK"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")

# phase tags in pipeline order, and the tag each phase needs before it can run
PHASE_ORDER = ("init", "pretrained", "pruned", "codec", "e2e")
REQUIRES = {"phase1": "init", "phase2": "pretrained", "phase3": "pruned", "phase4": "codec"}


class VersionError(ChecksumError):
    """Raised when a checkpoint was written by an incompatible format version."""


@dataclass
class Checkpoint:
    model: SplitModel
    optimizer: dict = field(default_factory=dict)
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def phase(self) -> str:
        return self.model.meta.phase

    @property
    def history(self) -> list:
        return self.model.meta.history


def _sanitize(obj):
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        # strict JSON has no inf/nan literals
        return {"__float__": repr(obj)}
    return obj


def _restore(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__float__"}:
            return float(obj["__float__"])
        return {k: _restore(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_restore(v) for v in obj]
    return obj


def model_manifest(model: SplitModel) -> dict:
    channel = model.channel
    return {
        "backbone": model.cfg.to_dict(),
        "widths": model.conv_widths(),
        "split": model.split,
        "c_enc": model.c_enc,
        "channel": None if channel is None else {"snr_db": channel.snr_db, "power": channel.power},
        "meta": asdict(model.meta),
    }


def save(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Write ``ckpt`` atomically (temp file + rename)."""
    model = ckpt.model
    blocks: list[tuple[str, str, np.ndarray]] = []
    for name, p in model.named_parameters():
        blocks.append(("param", name, p.data))
    for name, b in model.named_buffers():
        blocks.append(("buffer", name, b))
    for name, v in sorted(ckpt.optimizer.items()):
        blocks.append(("optim", name, np.asarray(v, dtype=np.float64)))

    entries, payload, offset = [], [], 0
    for kind, name, arr in blocks:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append(
            {"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)}
        )
        payload.append(raw)
        offset += len(raw)

    channel_rng = None
    if model.channel is not None and model.channel.rng is not None:
        channel_rng = model.channel.rng.bit_generator.state
    manifest = {
        "model": model_manifest(model),
        "tensors": entries,
        "rng_state": ckpt.rng_state,
        "channel_rng_state": channel_rng,
        "extra": ckpt.extra,
    }
    mbytes = json.dumps(_sanitize(manifest), sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(mbytes), zlib.crc32(mbytes)))
        fh.write(mbytes)
        for raw in payload:
            fh.write(raw)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _read_manifest(raw: bytes, path) -> tuple[dict, int]:
    if len(raw) < _HEADER.size:
        raise ChecksumError(f"{path}: file too short for a checkpoint header ({len(raw)} bytes)")
    magic, version, mlen, mcrc = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ChecksumError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"{path}: checkpoint format version {version}, this build reads version {VERSION}")
    start = _HEADER.size
    mbytes = raw[start : start + mlen]
    if len(mbytes) != mlen or zlib.crc32(mbytes) != mcrc:
        raise ChecksumError(f"{path}: manifest checksum mismatch")
    return _restore(json.loads(mbytes.decode("utf-8"))), start + mlen


def load(path: str | os.PathLike, expect: BackboneConfig | None = None) -> Checkpoint:
    """Read a checkpoint and rebuild its model.

    With ``expect`` the stored backbone config must match it exactly
    (``ConfigError`` otherwise).  Tensor shapes are validated against the
    rebuilt model (``DimensionError``) and every block against its CRC32
    (``ChecksumError``).
    """
    raw = Path(path).read_bytes()
    manifest, data_start = _read_manifest(raw, path)
    mm = manifest["model"]
    cfg = BackboneConfig.from_dict(mm["backbone"])
    if expect is not None and cfg != expect:
        raise ConfigError(f"{path}: checkpoint backbone {cfg} does not match the configured {expect}")
    model = build_split_model(cfg, mm["split"], widths=mm["widths"], c_enc=mm["c_enc"])

    arrays: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "optim": {}}
    for e in manifest["tensors"]:
        lo = data_start + e["offset"]
        block = raw[lo : lo + e["nbytes"]]
        if len(block) != e["nbytes"] or zlib.crc32(block) != e["crc32"]:
            raise ChecksumError(f"{path}: checksum mismatch in tensor block {e['name']!r}")
        n = int(np.prod(e["shape"], dtype=np.int64))
        if n * 8 != e["nbytes"]:
            raise DimensionError(f"{path}: block {e['name']!r} holds {e['nbytes']} bytes, shape {e['shape']} needs {n * 8}")
        arrays[e["kind"]][e["name"]] = np.frombuffer(block, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    state = {**arrays["param"], **arrays["buffer"]}
    model.load_state_dict(state)

    meta = mm["meta"]
    model.meta = ModelMeta(**meta)
    if mm["channel"] is not None:
        ch = AwgnChannel(mm["channel"]["snr_db"], mm["channel"]["power"])
        if manifest["channel_rng_state"] is not None:
            ch.rng.bit_generator.state = manifest["channel_rng_state"]
        model.channel = ch
    return Checkpoint(model, arrays["optim"], manifest["rng_state"], manifest["extra"] or {}, VERSION)


def require_phase(ckpt_or_model, phase: str) -> None:
    """Raise ``StateError`` unless the model may enter ``phase`` (phase1..phase4).

    A model may enter a phase once it has reached the required tag; a
    pruning-free run passes phase 2 with tag "pretrained", so phase 3 also
    accepts that tag when nothing was pruned.
    """
    model = ckpt_or_model.model if isinstance(ckpt_or_model, Checkpoint) else ckpt_or_model
    if phase not in REQUIRES:
        raise ValueError(f"unknown phase {phase!r}")
    have = model.meta.phase
    need = REQUIRES[phase]
    if phase == "phase3" and have == "pretrained" and model.meta.removed_filters == 0:
        return
    if phase == "phase4" and not model.meta.codec_trained:
        raise StateError(f"phase4 needs a trained codec; checkpoint is at stage {have!r}")
    if PHASE_ORDER.index(have) < PHASE_ORDER.index(need):
        raise StateError(f"{phase} needs stage {need!r}, checkpoint is at {have!r}")
