"""Per-layer LoRA adapter data model and bit-exact container storage.

An adapter holds factor matrices B (d x r) and A (m x r); its weight update
is scale * B @ A.T with scale = lora_alpha / rank, the standard training
convention. Collections group one base weight plus N task adapters per layer,
with a consistent task order across layers.

Storage is the LMK1 container: magic "LMK1", u32-LE header length, a UTF-8
JSON header describing tensors, then concatenated row-major little-endian
float32 payloads. Round trips are bit-exact on the 32-bit payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"LMK1"
FORMAT_VERSION = 1
BASE_TASK_KEY = "__base__"


class ContainerError(ValueError):
    """Container parse/validation failure with a stable error code."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class LoraAdapter:
    task_id: str
    layer_id: str
    b: np.ndarray          # (d, r)
    a: np.ndarray          # (m, r)
    rank: int
    lora_alpha: float = 16.0
    dropout_meta: float = 0.0

    def __post_init__(self):
        b = np.asarray(self.b, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.float64)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", a)
        if b.ndim != 2 or a.ndim != 2:
            raise ValueError("adapter factors must be 2-D")
        if b.shape[1] != self.rank or a.shape[1] != self.rank:
            raise ValueError(
                f"factor columns must equal rank {self.rank}: B {b.shape}, A {a.shape}"
            )
        if self.rank < 1 or self.rank > min(b.shape[0], a.shape[0]):
            raise ValueError(f"rank {self.rank} outside [1, min(d, m)]")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(a))):
            raise ValueError("adapter factors contain non-finite entries")

    @property
    def scale(self) -> float:
        return self.lora_alpha / self.rank


@dataclass(frozen=True)
class Rank1Direction:
    """One rank-1 component sigma * left @ right^T of an update."""

    owner_task: int
    owner_rank: int
    left: np.ndarray    # (d,)
    right: np.ndarray   # (m,)
    sigma: float = 1.0

    def matrix(self) -> np.ndarray:
        return self.sigma * np.outer(self.left, self.right)


def delta_weight(ad: LoraAdapter) -> np.ndarray:
    """Scaled low-rank update scale * B @ A.T, shape (d, m)."""
    return ad.scale * (ad.b @ ad.a.T)


def rank1_directions(ad: LoraAdapter) -> list[Rank1Direction]:
    """Unscaled rank-1 components b_j a_j^T; scale * sum equals delta_weight."""
    return [
        Rank1Direction(
            owner_task=0,
            owner_rank=j,
            left=ad.b[:, j].copy(),
            right=ad.a[:, j].copy(),
            sigma=1.0,
        )
        for j in range(ad.rank)
    ]


@dataclass
class AdapterCollection:
    """Base weights plus one adapter per (task, layer); immutable after load."""

    layer_ids: list[str]
    task_ids: list[str]
    base: dict[str, np.ndarray] = field(default_factory=dict)
    adapters: dict[str, list[LoraAdapter]] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if len(set(self.layer_ids)) != len(self.layer_ids):
            raise ValueError("duplicate layer ids")
        if len(set(self.task_ids)) != len(self.task_ids):
            raise ValueError("duplicate task ids")
        for layer in self.layer_ids:
            if layer not in self.base:
                raise ValueError(f"missing base weight for layer {layer!r}")
            w0 = np.asarray(self.base[layer], dtype=np.float64)
            self.base[layer] = w0
            ads = self.adapters.get(layer, [])
            if [ad.task_id for ad in ads] != self.task_ids:
                raise ValueError(
                    f"layer {layer!r} task order differs from collection task order"
                )
            d, m = w0.shape
            for ad in ads:
                if ad.b.shape[0] != d or ad.a.shape[0] != m:
                    raise ValueError(
                        f"adapter {ad.task_id}/{layer} shape mismatch with base {w0.shape}"
                    )

    @property
    def n_tasks(self) -> int:
        return len(self.task_ids)

    def adapter(self, task_id: str, layer_id: str) -> LoraAdapter:
        idx = self.task_ids.index(task_id)
        return self.adapters[layer_id][idx]

    def subset(self, task_ids: list[str]) -> "AdapterCollection":
        """New collection restricted to the given tasks (same order as given)."""
        missing = [t for t in task_ids if t not in self.task_ids]
        if missing:
            raise ValueError(f"unknown tasks: {missing}")
        idx = [self.task_ids.index(t) for t in task_ids]
        return AdapterCollection(
            layer_ids=list(self.layer_ids),
            task_ids=list(task_ids),
            base={l: self.base[l] for l in self.layer_ids},
            adapters={l: [self.adapters[l][i] for i in idx] for l in self.layer_ids},
        )


def _tensor_entries(coll: AdapterCollection):
    """Deterministic tensor order: base weights first, then adapters by (layer, task)."""
    for layer in coll.layer_ids:
        yield f"{BASE_TASK_KEY}/{layer}/W", coll.base[layer], None
    for layer in coll.layer_ids:
        for ad in coll.adapters[layer]:
            yield f"{ad.task_id}/{layer}/B", ad.b, ad
            yield f"{ad.task_id}/{layer}/A", ad.a, ad


def save_collection(coll: AdapterCollection, path):
    tensors = []
    payload = bytearray()
    meta = {}
    for key, arr, ad in _tensor_entries(coll):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append(
            {
                "key": key,
                "dtype": "f32",
                "shape": list(arr.shape),
                "offset": len(payload),
                "length": len(data),
            }
        )
        payload.extend(data)
        if ad is not None:
            meta.setdefault(ad.task_id, {})[ad.layer_id] = {
                "rank": ad.rank,
                "lora_alpha": ad.lora_alpha,
                "dropout": ad.dropout_meta,
            }
    header = {
        "version": FORMAT_VERSION,
        "layer_order": coll.layer_ids,
        "task_order": coll.task_ids,
        "tensors": tensors,
        "adapters": meta,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        fh.write(bytes(payload))


def load_collection(path) -> AdapterCollection:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ContainerError("bad_magic", f"expected {MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 8:
        raise ContainerError("truncated", "file shorter than header length field")
    (hdr_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hdr_len:
        raise ContainerError("truncated", "header extends past end of file")
    try:
        header = json.loads(blob[8 : 8 + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError("bad_header", str(exc)) from exc
    payload = blob[8 + hdr_len :]

    arrays: dict[str, np.ndarray] = {}
    for rec in header["tensors"]:
        key = rec["key"]
        if key in arrays:
            raise ContainerError("duplicate_key", key)
        n = int(np.prod(rec["shape"])) if rec["shape"] else 1
        if rec["length"] != 4 * n:
            raise ContainerError(
                "size_mismatch",
                f"{key}: header declares shape {rec['shape']} but payload holds "
                f"{rec['length'] // 4} floats",
            )
        if rec["offset"] + rec["length"] > len(payload):
            raise ContainerError("truncated", f"{key}: payload extends past end of file")
        raw = payload[rec["offset"] : rec["offset"] + rec["length"]]
        arrays[key] = (
            np.frombuffer(raw, dtype="<f4").reshape(rec["shape"]).astype(np.float64)
        )

    layer_ids = header["layer_order"]
    task_ids = header["task_order"]
    base = {}
    adapters: dict[str, list[LoraAdapter]] = {l: [] for l in layer_ids}
    for layer in layer_ids:
        bkey = f"{BASE_TASK_KEY}/{layer}/W"
        if bkey not in arrays:
            raise ContainerError("size_mismatch", f"missing base tensor {bkey}")
        base[layer] = arrays[bkey]
        for task in task_ids:
            try:
                b = arrays[f"{task}/{layer}/B"]
                a = arrays[f"{task}/{layer}/A"]
            except KeyError as exc:
                raise ContainerError("size_mismatch", f"missing tensor {exc}") from exc
            m = header["adapters"][task][layer]
            adapters[layer].append(
                LoraAdapter(
                    task_id=task,
                    layer_id=layer,
                    b=b,
                    a=a,
                    rank=int(m["rank"]),
                    lora_alpha=float(m["lora_alpha"]),
                    dropout_meta=float(m["dropout"]),
                )
            )
    return AdapterCollection(
        layer_ids=layer_ids, task_ids=task_ids, base=base, adapters=adapters
    )


def export_debug_json(coll: AdapterCollection, path):
    """Human-readable JSON dump, lossy to 9 significant digits. Not for round trips."""

    def fmt(arr):
        return [[float(f"{v:.9g}") for v in row] for row in np.asarray(arr)]

    doc = {
        "layer_order": coll.layer_ids,
        "task_order": coll.task_ids,
        "base": {l: fmt(coll.base[l]) for l in coll.layer_ids},
        "adapters": {
            l: [
                {
                    "task_id": ad.task_id,
                    "rank": ad.rank,
                    "lora_alpha": ad.lora_alpha,
                    "dropout": ad.dropout_meta,
                    "B": fmt(ad.b),
                    "A": fmt(ad.a),
                }
                for ad in coll.adapters[l]
            ]
            for l in coll.layer_ids
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
