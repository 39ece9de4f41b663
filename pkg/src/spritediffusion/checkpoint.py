"""The .mdck checkpoint container and weighted-sum model merging.

Layout: 4-byte magic "MDCK", one version byte, u64-LE manifest length, a
canonical-JSON manifest, then the payload — all tensors as little-endian
float32 in lexicographic name order, tiling the payload with no gaps. The
manifest records a CRC32 of the payload, so truncation and corruption are
detected before any tensor is handed out.
"""

from __future__ import annotations

import binascii
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"MDCK"
FORMAT_VERSION = 1
EXTENSION = ".mdck"
KINDS = ("base", "lora", "control")


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ArchMismatchError(CheckpointError):
    def __init__(self, expected: str, found: str):
        super().__init__(f"architecture hash mismatch: expected {expected}, checkpoint has {found}")
        self.expected = expected
        self.found = found


class MergeMismatchError(CheckpointError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def arch_hash(arch: dict) -> str:
    return hashlib.sha256(canonical_json(arch).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    kind: str
    arch: dict
    meta: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def arch_hash(self) -> str:
        return arch_hash(self.arch)

    def require_arch(self, expected: dict) -> None:
        want = arch_hash(expected)
        if self.arch_hash != want:
            raise ArchMismatchError(want, self.arch_hash)


def save(ckpt: Checkpoint, path) -> None:
    if ckpt.kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {ckpt.kind!r}")
    names = sorted(ckpt.tensors)
    index = []
    payload_parts = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "dtype": "f4", "offset": offset})
        payload_parts.append(arr.tobytes())
        offset += arr.nbytes
    payload = b"".join(payload_parts)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "arch": ckpt.arch,
        "arch_hash": ckpt.arch_hash,
        "meta": ckpt.meta,
        "payload_bytes": offset,
        "crc32": binascii.crc32(payload) & 0xFFFFFFFF,
        "tensors": index,
    }
    blob = canonical_json(manifest).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([FORMAT_VERSION]))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 13 or raw[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = raw[4]
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported format version {version} (supported: {FORMAT_VERSION})")
    (mlen,) = struct.unpack("<Q", raw[5:13])
    if len(raw) < 13 + mlen:
        raise CorruptCheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[13 : 13 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable manifest: {exc}") from exc
    payload = raw[13 + mlen :]
    if len(payload) != manifest["payload_bytes"]:
        raise CorruptCheckpointError(
            f"{path}: truncated payload ({len(payload)} bytes, manifest says {manifest['payload_bytes']})"
        )
    if (binascii.crc32(payload) & 0xFFFFFFFF) != manifest["crc32"]:
        raise CorruptCheckpointError(f"{path}: payload checksum failure")

    tensors: dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if entry["offset"] != expected_offset:
            raise CorruptCheckpointError(f"{path}: tensor index has gaps at {entry['name']!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"]).reshape(shape)
        tensors[entry["name"]] = arr.copy()
        expected_offset += count * 4
    if expected_offset != len(payload):
        raise CorruptCheckpointError(f"{path}: payload extends past tensor index")
    names = [e["name"] for e in manifest["tensors"]]
    if names != sorted(names):
        raise CorruptCheckpointError(f"{path}: tensor index is not in canonical order")
    return Checkpoint(kind=manifest["kind"], arch=manifest["arch"], meta=manifest["meta"], tensors=tensors)


def merge(a: Checkpoint, b: Checkpoint, alpha: float) -> Checkpoint:
    """Parameter-wise (1-alpha)*A + alpha*B in float32; endpoints return
    verbatim copies so bit-identity holds even around signed zeros."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if a.kind != b.kind:
        raise MergeMismatchError(f"cannot merge kinds {a.kind!r} and {b.kind!r}")
    if a.arch_hash != b.arch_hash:
        raise MergeMismatchError(f"architecture mismatch: {a.arch_hash} vs {b.arch_hash}")
    only_a = sorted(set(a.tensors) - set(b.tensors))
    only_b = sorted(set(b.tensors) - set(a.tensors))
    if only_a or only_b:
        raise MergeMismatchError(f"tensor name sets differ; only in A: {only_a[:8]}, only in B: {only_b[:8]}")
    bad_shapes = sorted(k for k in a.tensors if a.tensors[k].shape != b.tensors[k].shape)
    if bad_shapes:
        raise MergeMismatchError(f"tensor shapes differ for: {bad_shapes[:8]}")

    wa = 1.0 - alpha
    if alpha == 0.0:
        tensors = {k: v.copy() for k, v in a.tensors.items()}
    elif alpha == 1.0:
        tensors = {k: v.copy() for k, v in b.tensors.items()}
    else:
        tensors = {k: wa * a.tensors[k] + alpha * b.tensors[k] for k in a.tensors}
    meta = {
        "merged_from": [a.meta.get("checkpoint_hash", ""), b.meta.get("checkpoint_hash", "")],
        "alpha": alpha,
        "parent_meta": [a.meta, b.meta],
    }
    return Checkpoint(kind=a.kind, arch=a.arch, meta=meta, tensors=tensors)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# model <-> checkpoint plumbing


def model_arch(config, schedule_cfg: dict, vocab_tokens: list[str]) -> dict:
    from dataclasses import asdict

    return {"model": asdict(config), "schedule": dict(schedule_cfg), "vocab": list(vocab_tokens)}


def checkpoint_from_model(model, schedule_cfg: dict, kind: str = "base", meta: Optional[dict] = None) -> Checkpoint:
    arch = model_arch(model.config, schedule_cfg, model.vocab.tokens)
    return Checkpoint(kind=kind, arch=arch, meta=dict(meta or {}), tensors=model.state_dict())


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild a GenerativeModel (and its NoiseSchedule) from a base checkpoint."""
    from .denoiser import DenoiserConfig, GenerativeModel
    from .schedule import make_schedule
    from .text import Vocabulary

    if ckpt.kind != "base":
        raise CheckpointError(f"expected a base checkpoint, got kind={ckpt.kind!r}")
    config = DenoiserConfig(**ckpt.arch["model"])
    vocab = Vocabulary(ckpt.arch["vocab"])
    if vocab.tokens != ckpt.arch["vocab"]:
        raise CheckpointError("vocabulary in checkpoint is not in canonical order")
    model = GenerativeModel(config, vocab, seed=0)
    model.load_state_dict(ckpt.tensors)
    sched = ckpt.arch["schedule"]
    schedule = make_schedule(sched["timesteps"], sched["beta_start"], sched["beta_end"])
    return model, schedule
