"""Named parameter storage, Adam, and the binary checkpoint container.

Checkpoint byte layout (little-endian throughout):

    magic   4 bytes  b"SPKC"
    version u16      currently 1
    count   u32      number of sections
    section * count:
        name_len u16
        name     UTF-8 bytes
        kind     u8    0 = float64 array, 1 = raw byte blob
        kind 0:  ndim u8, then ndim * u64 dims, then C-order float64 data
        kind 1:  length u64, then raw bytes

Sections are written in sorted-name order so identical state produces
identical files.  Loading rejects bad magic, unknown versions, and (via
ParamStore.load_state) shape mismatches.
"""

from __future__ import annotations

import struct
from typing import Iterable

import numpy as np

from spectrl.nn.tape import Tensor

__all__ = ["Adam", "CheckpointError", "ParamStore", "read_checkpoint", "write_checkpoint"]

_MAGIC = b"SPKC"
_VERSION = 1


class CheckpointError(Exception):
    pass


class ParamStore:
    """Mapping of names to parameter tensors, created lazily on first use.

    Weights use uniform fan-in scaled initialization from the store's own
    RNG stream; passing fan_in=None yields zeros (biases).  `version` is
    bumped by the optimizer after each step and lets caches of derived values
    (e.g. task embeddings) notice stale parameters.
    """

    def __init__(self, rng: np.random.Generator):
        self._params: dict[str, Tensor] = {}
        self.rng = rng
        self.version = 0

    def param(self, name: str, shape: tuple[int, ...], fan_in: int | None = None) -> Tensor:
        t = self._params.get(name)
        if t is not None:
            if t.data.shape != tuple(shape):
                raise ValueError(f"param {name!r}: have shape {t.data.shape}, asked {shape}")
            return t
        if fan_in is None:
            data = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            data = self.rng.uniform(-bound, bound, size=shape)
        t = Tensor(data)
        self._params[name] = t
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def tensor(self, name: str) -> Tensor:
        return self._params[name]

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def collect_grads(self) -> dict[str, np.ndarray]:
        """Gradients by name; parameters off the tape map to zeros."""
        out = {}
        for name in self.names():
            t = self._params[name]
            out[name] = np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad)
        return out

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}/{name}": t.data for name, t in sorted(self._params.items())}

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        want = prefix + "/"
        for key, data in arrays.items():
            if not key.startswith(want):
                continue
            name = key[len(want):]
            existing = self._params.get(name)
            if existing is not None and existing.data.shape != data.shape:
                raise CheckpointError(
                    f"param {name!r}: checkpoint shape {data.shape} != live {existing.data.shape}")
            self._params[name] = Tensor(data.copy())


class Adam:
    """Adam with bias correction; lr 3e-4, betas (0.9, 0.999) by default.

    A nonempty `scope` restricts updates to parameters whose name starts
    with it, so several optimizers can own disjoint slices of one store.
    """

    def __init__(self, store: ParamStore, lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 scope: str = ""):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.scope = scope
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        if grads is None:
            grads = self.store.collect_grads()
        if self.scope:
            grads = {n: g for n, g in grads.items() if n.startswith(self.scope)}
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            p = self.store.tensor(name)
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.store.zero_grads()
        self.store.version += 1

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/t": np.array(float(self.t))}
        for name, m in sorted(self._m.items()):
            out[f"{prefix}/m/{name}"] = m
            out[f"{prefix}/v/{name}"] = self._v[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        self.t = int(arrays[f"{prefix}/t"])
        self._m.clear()
        self._v.clear()
        mw = f"{prefix}/m/"
        for key, data in arrays.items():
            if key.startswith(mw):
                name = key[len(mw):]
                self._m[name] = data.copy()
                self._v[name] = arrays[f"{prefix}/v/{name}"].copy()


# ---------------------------------------------------------------------------
# on-disk container


def write_checkpoint(path, arrays: dict[str, np.ndarray],
                     blobs: dict[str, bytes] | None = None) -> None:
    blobs = blobs or {}
    overlap = set(arrays) & set(blobs)
    if overlap:
        raise CheckpointError(f"duplicate section names: {sorted(overlap)}")
    sections: list[tuple[str, int, bytes]] = []
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype=np.float64, order="C")
        payload = struct.pack("<B", a.ndim)
        payload += b"".join(struct.pack("<Q", d) for d in a.shape)
        payload += a.astype("<f8").tobytes()
        sections.append((name, 0, payload))
    for name in sorted(blobs):
        b = blobs[name]
        sections.append((name, 1, struct.pack("<Q", len(b)) + b))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, len(sections)))
        for name, kind, payload in sections:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", kind))
            fh.write(payload)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, bytes]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 10
    arrays: dict[str, np.ndarray] = {}
    blobs: dict[str, bytes] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        kind = raw[off]
        off += 1
        if kind == 0:
            ndim = raw[off]
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", raw, off) if ndim else ()
            off += 8 * ndim
            n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
            off += 8 * n
        elif kind == 1:
            (blen,) = struct.unpack_from("<Q", raw, off)
            off += 8
            blobs[name] = raw[off:off + blen]
            off += blen
        else:
            raise CheckpointError(f"unknown section kind {kind}")
    if off != len(raw):
        raise CheckpointError("trailing bytes after final section")
    return arrays, blobs


def rng_state_blob(gen: np.random.Generator) -> bytes:
    """Serialize a Generator's bit-generator state as deterministic JSON."""
    import json
    return json.dumps(gen.bit_generator.state, sort_keys=True).encode("ascii")


def load_rng_state(gen: np.random.Generator, blob: bytes) -> None:
    import json
    gen.bit_generator.state = json.loads(blob.decode("ascii"))
