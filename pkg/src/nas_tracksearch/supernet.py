"""Weight-sharing supernet store.

Every ``(layer_id, choice_id)`` pair of a space owns one entry: a dict of named
weight tensors. A path view for a genome hands out the very same entry objects,
so two genomes that agree on a gene share that layer's weights.

Initialization stands in for ImageNet/tracking training: fan-in scaled
Gaussians drawn from a stream keyed by ``(seed, layer_id, choice_id, tensor)``,
so values do not depend on iteration order or on which other entries exist.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Iterator, Mapping

import numpy as np

from .cost import SE_DIVISOR
from .space import (
    BACKBONE_BLOCKS,
    BACKBONE_CHOICES,
    FULL_SPACE,
    HEAD_CHANNELS,
    HEAD_FIRST_KERNELS,
    HEAD_IN_CHANNELS,
    HEAD_LAYER_KERNEL,
    STEM_CHANNELS,
    Genome,
    Space,
    output_block,
)

MAGIC = b"NTSW"
FORMAT_VERSION = 1
DTYPE = np.dtype("<f4")
NECK_CHANNELS = (80, 96)
HEAD_OUT = {"cls": 1, "reg": 4}
_HEAD_KINDS = ("k3", "k5")

Key = tuple[str, int]
Entry = Mapping[str, np.ndarray]


class StoreError(Exception):
    pass


class CorruptStoreError(StoreError):
    pass


class FingerprintError(StoreError):
    pass


# --------------------------------------------------------------------------
# Entry layouts


def _conv_bn(prefix: str, k: int, cin: int, cout: int, groups: int = 1) -> dict[str, tuple]:
    return {
        f"{prefix}": (k, k, cin // groups, cout),
        f"{prefix}_bn.gamma": (cout,),
        f"{prefix}_bn.beta": (cout,),
    }


def _dsconv(k: int, cin: int, cout: int) -> dict[str, tuple]:
    return {**_conv_bn("dw", k, cin, cin, groups=cin), **_conv_bn("pw", 1, cin, cout)}


def _mbconv(k: int, e: int, cin: int, cout: int) -> dict[str, tuple]:
    ce = cin * e
    cr = max(1, ce // SE_DIVISOR)
    return {
        **_conv_bn("expand", 1, cin, ce),
        **_conv_bn("dw", k, ce, ce, groups=ce),
        "se.w1": (ce, cr), "se.b1": (cr,), "se.w2": (cr, ce), "se.b2": (ce,),
        **_conv_bn("project", 1, ce, cout),
    }


def head_choice(channels: int, kernel_index: int) -> int:
    return HEAD_CHANNELS.index(channels) * 2 + kernel_index


def entry_layout(layer_id: str, choice_id: int) -> dict[str, tuple]:
    """Tensor names and shapes of one store entry."""
    if layer_id == "stem":
        return _conv_bn("conv", 3, 3, STEM_CHANNELS)
    if layer_id == "dsconv":
        return _dsconv(3, STEM_CHANNELS, STEM_CHANNELS)
    if layer_id.startswith("backbone."):
        blk = BACKBONE_BLOCKS[int(layer_id.split(".")[1])]
        k, e = BACKBONE_CHOICES[choice_id]
        return _mbconv(k, e, blk.in_channels, blk.out_channels)
    if layer_id == "neck":
        return _conv_bn("conv", 1, NECK_CHANNELS[choice_id], HEAD_IN_CHANNELS)
    branch, pos = layer_id.split(".")
    if pos == "final":
        c = HEAD_CHANNELS[choice_id]
        return {"conv": (3, 3, c, HEAD_OUT[branch]), "bias": (HEAD_OUT[branch],)}
    c = HEAD_CHANNELS[choice_id // 2]
    if pos == "0":
        return _dsconv(HEAD_FIRST_KERNELS[choice_id % 2], HEAD_IN_CHANNELS, c)
    return _dsconv(HEAD_LAYER_KERNEL[_HEAD_KINDS[choice_id % 2]], c, c)


def space_keys(space: Space = FULL_SPACE) -> list[Key]:
    """Every (layer_id, choice_id) pair a store for ``space`` must hold."""
    keys: list[Key] = [("stem", 0), ("dsconv", 0)]
    for i, choices in enumerate(space.backbone):
        keys += [(f"backbone.{i}", c) for c in sorted(choices)]
    necks = sorted({NECK_CHANNELS.index(BACKBONE_BLOCKS[output_block(o)].out_channels)
                    for o in space.output_layers})
    keys += [("neck", c) for c in necks]
    kinds = sorted({_HEAD_KINDS.index(k) for layer in space.head_layers for k in layer if k != "skip"})
    for branch in ("cls", "reg"):
        for ch in space.head_channels:
            keys += [(f"{branch}.0", head_choice(ch, HEAD_FIRST_KERNELS.index(k)))
                     for k in space.head_first_kernels]
        for i in range(1, len(space.head_layers) + 1):
            present = {_HEAD_KINDS.index(k) for k in space.head_layers[i - 1] if k != "skip"}
            for ch in space.head_channels:
                keys += [(f"{branch}.{i}", head_choice(ch, k)) for k in kinds if k in present]
        keys += [(f"{branch}.final", HEAD_CHANNELS.index(ch)) for ch in space.head_channels]
    return sorted(set(keys))


def genome_keys(g: Genome) -> dict[str, Key]:
    """Role name -> store key for every weighted layer on the genome's path."""
    keys = {"stem": ("stem", 0), "dsconv": ("dsconv", 0)}
    last = output_block(g.output_layer)
    for i in range(last + 1):
        keys[f"backbone.{i}"] = (f"backbone.{i}", g.backbone[i])
    keys["neck"] = ("neck", NECK_CHANNELS.index(BACKBONE_BLOCKS[last].out_channels))
    for name, br in (("cls", g.cls), ("reg", g.reg)):
        keys[f"{name}.0"] = (f"{name}.0", head_choice(br.channels, HEAD_FIRST_KERNELS.index(br.first_kernel)))
        for i, kind in enumerate(br.layers, start=1):
            if kind != "skip":
                keys[f"{name}.{i}"] = (f"{name}.{i}", head_choice(br.channels, _HEAD_KINDS.index(kind)))
        keys[f"{name}.final"] = (f"{name}.final", HEAD_CHANNELS.index(br.channels))
    return keys


# --------------------------------------------------------------------------
# Store


def _freeze(entry: dict[str, np.ndarray]) -> Entry:
    for arr in entry.values():
        arr.flags.writeable = False
    return MappingProxyType(entry)


@dataclass(frozen=True, eq=False)
class WeightStore:
    entries: Mapping[Key, Entry]
    seed: int
    fingerprint: str

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Key]:
        return iter(self.entries)

    def __getitem__(self, key: Key) -> Entry:
        return self.entries[key]

    def keys(self):
        return self.entries.keys()

    @classmethod
    def from_entries(cls, entries: Mapping[Key, Mapping[str, np.ndarray]], seed: int,
                     space: Space = FULL_SPACE) -> WeightStore:
        """Build a store from explicit tensors, e.g. hand-constructed oracle weights."""
        frozen = {}
        for key in space_keys(space):
            if key not in entries:
                raise StoreError(f"missing entry {key}")
            layout = entry_layout(*key)
            got = entries[key]
            if set(got) != set(layout):
                raise StoreError(f"entry {key} has tensors {sorted(got)}, expected {sorted(layout)}")
            arrs = {}
            for name, shape in layout.items():
                a = np.array(got[name], dtype=DTYPE)
                if a.shape != shape:
                    raise StoreError(f"{key}/{name}: shape {a.shape} != {shape}")
                arrs[name] = a
            frozen[key] = _freeze(arrs)
        return cls(MappingProxyType(frozen), int(seed), space.fingerprint())

    def payload_bytes(self) -> bytes:
        h = bytearray()
        for key in sorted(self.entries):
            for name in sorted(self.entries[key]):
                h += self.entries[key][name].tobytes()
        return bytes(h)

    def num_scalars(self) -> int:
        return sum(a.size for e in self.entries.values() for a in e.values())


def _stream(seed: int, layer_id: str, choice_id: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{layer_id}|{choice_id}|{name}".encode()).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *words]))


def init_tensor(seed: int, layer_id: str, choice_id: int, name: str, shape: tuple) -> np.ndarray:
    if name.endswith(".gamma"):
        return np.ones(shape, DTYPE)
    if name.endswith(".beta") or name in ("bias", "se.b1", "se.b2"):
        return np.zeros(shape, DTYPE)
    # conv kernels are (k, k, cin_per_group, cout); FC maps are (in, out)
    fan_in = int(np.prod(shape[:-1]))
    rng = _stream(seed, layer_id, choice_id, name)
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(DTYPE)


def init_weights(space: Space = FULL_SPACE, seed: int = 0) -> WeightStore:
    entries = {}
    for layer_id, choice_id in space_keys(space):
        layout = entry_layout(layer_id, choice_id)
        entries[(layer_id, choice_id)] = {
            name: init_tensor(seed, layer_id, choice_id, name, shape) for name, shape in layout.items()
        }
    return WeightStore.from_entries(entries, seed, space)


class PathView(Mapping):
    """Read-only mapping from role name (``"backbone.3"``, ``"cls.0"`` ...) to store entries."""

    def __init__(self, store: WeightStore, g: Genome):
        self.genome = g
        self.keys_by_role = genome_keys(g)
        missing = [k for k in self.keys_by_role.values() if k not in store.entries]
        if missing:
            raise StoreError(f"store does not cover path entries {missing}")
        self._entries = {role: store.entries[k] for role, k in self.keys_by_role.items()}

    def __getitem__(self, role: str) -> Entry:
        return self._entries[role]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def num_scalars(self) -> int:
        return sum(a.size for e in self._entries.values() for a in e.values())


def path_view(store: WeightStore, g: Genome, space: Space | None = None) -> PathView:
    if space is not None and space.fingerprint() != store.fingerprint:
        raise FingerprintError("store was built for a different space")
    return PathView(store, g)


# --------------------------------------------------------------------------
# Binary container
#
# header : MAGIC | u8 version | 64-byte hex fingerprint | i64 seed | u32 records | u64 body size
# record : u16 len + layer_id | u16 choice | u16 tensors, then per tensor
#          u16 len + name | u8 ndim | u32 dims... | float32 LE payload
# trailer: sha256 of the body

_HEADER = struct.Struct("<4sB64sqIQ")


def save(store: WeightStore, path: str | Path) -> None:
    body = bytearray()
    for layer_id, choice_id in sorted(store.entries):
        entry = store.entries[(layer_id, choice_id)]
        lid = layer_id.encode()
        body += struct.pack("<H", len(lid)) + lid + struct.pack("<HH", choice_id, len(entry))
        for name in sorted(entry):
            arr = entry[name]
            nb = name.encode()
            body += struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
            body += struct.pack(f"<{arr.ndim}I", *arr.shape)
            body += np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, store.fingerprint.encode(), store.seed,
                          len(store.entries), len(body))
    Path(path).write_bytes(header + bytes(body) + hashlib.sha256(body).digest())


def load(path: str | Path, space: Space = FULL_SPACE) -> WeightStore:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptStoreError("file too short for header")
    magic, version, fp, seed, n_records, body_size = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptStoreError("bad magic")
    if version != FORMAT_VERSION:
        raise StoreError(f"unsupported format version {version}")
    body = data[_HEADER.size:_HEADER.size + body_size]
    trailer = data[_HEADER.size + body_size:]
    if len(body) != body_size or len(trailer) != 32:
        raise CorruptStoreError("truncated file")
    if hashlib.sha256(body).digest() != trailer:
        raise CorruptStoreError("checksum mismatch")
    if fp.decode() != space.fingerprint():
        raise FingerprintError("store fingerprint does not match the requested space")
    entries: dict[Key, dict[str, np.ndarray]] = {}
    off = 0
    try:
        for _ in range(n_records):
            (n,) = struct.unpack_from("<H", body, off)
            off += 2
            layer_id = body[off:off + n].decode()
            off += n
            choice_id, n_tensors = struct.unpack_from("<HH", body, off)
            off += 4
            tensors = {}
            for _ in range(n_tensors):
                (n,) = struct.unpack_from("<H", body, off)
                off += 2
                name = body[off:off + n].decode()
                off += n
                (ndim,) = struct.unpack_from("<B", body, off)
                off += 1
                shape = struct.unpack_from(f"<{ndim}I", body, off)
                off += 4 * ndim
                size = int(np.prod(shape)) * DTYPE.itemsize
                if off + size > len(body):
                    raise CorruptStoreError("tensor payload runs past end of body")
                tensors[name] = np.frombuffer(body, DTYPE, int(np.prod(shape)), off).reshape(shape).copy()
                off += size
            entries[(layer_id, choice_id)] = tensors
    except struct.error as exc:
        raise CorruptStoreError(f"malformed record: {exc}") from None
    if off != len(body):
        raise CorruptStoreError("trailing bytes after last record")
    return WeightStore.from_entries(entries, seed, space)
