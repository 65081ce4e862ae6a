"""TKAT tensor container used for model checkpoints and perturbation dumps.

Layout (all integers little-endian)::

    b"TKAT" | u8 version=1 | u32 tensor_count
    per tensor: u16 name_len | utf-8 name | u8 rank | rank * u32 dims | f32 values
    u32 meta_len | utf-8 JSON metadata
"""

import json
from pathlib import Path
import struct

import numpy as np

from .errors import ConsistencyError, FormatError, TruncatedFileError

MAGIC = b"TKAT"
VERSION = 1


def write_container(path, tensors, metadata):
    """Write an ordered ``name -> array`` mapping plus JSON metadata."""
    out = bytearray(MAGIC)
    out += struct.pack("<BI", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(meta)) + meta
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data, name):
        self.data = data
        self.pos = 0
        self.name = name

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"{self.name}: need {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path):
    """Return ``(tensors, metadata)``; tensors keep file order."""
    data = Path(path).read_bytes()
    r = _Reader(data, str(path))
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a TKAT container (magic {data[:4]!r})")
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        if name in tensors:
            raise ConsistencyError(f"{path}: duplicate tensor name {name!r}")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        count_vals = int(np.prod(dims, dtype=np.int64))
        vals = np.frombuffer(r.take(4 * count_vals), dtype="<f4").astype(np.float32)
        tensors[name] = vals.reshape(dims)
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode("utf-8"))
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    return tensors, meta


def save_checkpoint(path, model, metadata=None):
    from .models import parameter_shapes

    spec = model.spec
    meta = {
        "family": spec.family,
        "q": spec.patch,
        "depth": spec.depth,
        "width": spec.width,
        "m": spec.num_classes,
        "spec": spec.to_dict(),
    }
    meta.update(metadata or {})
    expected = parameter_shapes(spec)
    tensors = {k: model.params[k].data for k in expected}
    write_container(path, tensors, meta)


def load_checkpoint(path):
    """Return ``(Classifier, metadata)``."""
    from .models import Classifier, ModelSpec
    from .tensor import Tensor

    tensors, meta = read_container(path)
    if "spec" not in meta:
        raise FormatError(f"{path}: metadata lacks a model spec")
    spec = ModelSpec.from_dict(meta["spec"])
    model = Classifier(spec, {k: Tensor(v) for k, v in tensors.items()})
    return model, meta


class Checkpoint:
    """A trained classifier together with its metadata."""

    def __init__(self, model, metadata=None):
        self.model = model
        self.metadata = dict(metadata or {})

    @property
    def spec(self):
        return self.model.spec

    def save(self, path):
        save_checkpoint(path, self.model, self.metadata)

    @classmethod
    def load(cls, path):
        model, meta = load_checkpoint(path)
        return cls(model, meta)
