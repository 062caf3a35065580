"""Model configuration, checkpoint container and the GUIDECK1 file format.

File layout::

    b"GUIDECK1"                      8-byte magic
    uint64 little-endian             header length in bytes
    header                           UTF-8 key=value lines, then one
                                     "tensor <name> <dtype> <shape> <offset> <nbytes>"
                                     line per tensor
    payloads                         raw little-endian arrays in record order,
                                     each starting on a 64-byte boundary
"""
import hashlib
import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigMismatch, CorruptCheckpoint

MAGIC = b"GUIDECK1"
ALIGN = 64
DEFAULT_TOKENIZER = "byte-259"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}
BLOCK_TENSORS = ("norm1", "wq", "wk", "wv", "wo", "norm2", "w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    num_layers: int
    num_heads: int
    head_dim: int
    ffn_dim: int
    vocab_size: int
    context_len: int

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigMismatch(f"{f.name} must be a positive integer, got {value!r}")
        if self.d_model != self.num_heads * self.head_dim:
            raise ConfigMismatch(
                f"d_model ({self.d_model}) != num_heads * head_dim "
                f"({self.num_heads} * {self.head_dim})"
            )

    def block_shapes(self):
        d, f = self.d_model, self.ffn_dim
        return {
            "norm1": (d,), "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "norm2": (d,), "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,),
        }

    def tensor_shapes(self):
        """Ordered mapping of tensor name to shape for a checkpoint of this config."""
        shapes = {"embed": (self.vocab_size, self.d_model), "pos": (self.context_len, self.d_model)}
        for i in range(self.num_layers):
            for name, shape in self.block_shapes().items():
                shapes[f"block.{i}.{name}"] = shape
        shapes["final_norm"] = (self.d_model,)
        shapes["unembed"] = (self.d_model, self.vocab_size)
        return shapes

    def num_params(self):
        return sum(int(np.prod(s)) for s in self.tensor_shapes().values())


@dataclass
class BlockWeights:
    """One transformer block. wq/wk/wv are d x (h*l), head i owning columns [i*l, (i+1)*l)."""

    norm1: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    norm2: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class Checkpoint:
    config: ModelConfig
    embed: np.ndarray
    pos: np.ndarray
    blocks: list
    final_norm: np.ndarray
    unembed: np.ndarray
    step: int = 0
    tokenizer: str = DEFAULT_TOKENIZER

    def tensors(self):
        out = {"embed": self.embed, "pos": self.pos}
        for i, block in enumerate(self.blocks):
            for name in BLOCK_TENSORS:
                out[f"block.{i}.{name}"] = getattr(block, name)
        out["final_norm"] = self.final_norm
        out["unembed"] = self.unembed
        return out

    @classmethod
    def from_tensors(cls, config, tensors, step=0, tokenizer=DEFAULT_TOKENIZER):
        blocks = [
            BlockWeights(**{name: tensors[f"block.{i}.{name}"] for name in BLOCK_TENSORS})
            for i in range(config.num_layers)
        ]
        return cls(config, tensors["embed"], tensors["pos"], blocks,
                   tensors["final_norm"], tensors["unembed"], step, tokenizer)

    def replace(self, **changes):
        return replace(self, **changes)

    def astype(self, dtype):
        tensors = {k: np.asarray(v, dtype=dtype) for k, v in self.tensors().items()}
        return Checkpoint.from_tensors(self.config, tensors, self.step, self.tokenizer)

    def copy(self):
        tensors = {k: np.array(v, copy=True) for k, v in self.tensors().items()}
        return Checkpoint.from_tensors(self.config, tensors, self.step, self.tokenizer)

    def validate(self):
        """Raise CorruptCheckpoint unless every tensor has its config shape and is finite."""
        expected = self.config.tensor_shapes()
        tensors = self.tensors()
        if list(tensors) != list(expected):
            raise CorruptCheckpoint("tensor set does not match config")
        for name, shape in expected.items():
            t = np.asarray(tensors[name])
            if t.shape != shape:
                raise CorruptCheckpoint(f"{name}: shape {t.shape} != expected {shape}")
            if not np.all(np.isfinite(t)):
                raise CorruptCheckpoint(f"{name}: non-finite values")
        return self

    def digest(self):
        h = hashlib.sha256()
        h.update(repr((self.config, self.step, self.tokenizer)).encode())
        for name, t in self.tensors().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t).tobytes())
        return h.hexdigest()


def _truncated_normal(rng, shape, std):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(np.float32)


def random_init(config, seed, tokenizer=DEFAULT_TOKENIZER):
    """Fan-in scaled truncated-normal weights (cut at 2 std), zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    d_std, f_std = config.d_model ** -0.5, config.ffn_dim ** -0.5
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("norm1", "norm2", "final_norm"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif leaf in ("b1", "b2"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = _truncated_normal(rng, shape, f_std if leaf == "w2" else d_std)
    return Checkpoint.from_tensors(config, tensors, 0, tokenizer)


def _header(ckpt):
    lines = ["format=1"]
    for f in fields(ckpt.config):
        lines.append(f"{f.name}={getattr(ckpt.config, f.name)}")
    lines.append(f"step={ckpt.step}")
    lines.append(f"tokenizer={ckpt.tokenizer}")
    records = []
    # offsets depend on header length, so lay out twice until stable
    base = 0
    for _ in range(4):
        offset = base
        records = []
        for name, t in ckpt.tensors().items():
            t = np.asarray(t)
            code = _CODES.get(t.dtype.newbyteorder("<"))
            if code is None:
                raise CorruptCheckpoint(f"{name}: unsupported dtype {t.dtype}")
            offset = -(-offset // ALIGN) * ALIGN
            shape = "x".join(str(s) for s in t.shape)
            records.append(f"tensor {name} {code} {shape} {offset} {t.nbytes}")
            offset += t.nbytes
        text = "\n".join(lines + [f"tensors={len(records)}"] + records).encode("utf-8")
        new_base = -(-(len(MAGIC) + 8 + len(text)) // ALIGN) * ALIGN
        if new_base == base:
            return text
        base = new_base
    raise AssertionError("header layout did not stabilise")


def save(ckpt, path):
    """Write ``ckpt`` to ``path``. Output bytes depend only on the checkpoint."""
    ckpt.validate()
    header = _header(ckpt)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        pos = len(MAGIC) + 8 + len(header)
        for t in ckpt.tensors().values():
            t = np.asarray(t)
            pad = -pos % ALIGN
            fh.write(b"\0" * pad)
            data = np.ascontiguousarray(t, dtype=t.dtype.newbyteorder("<")).tobytes()
            fh.write(data)
            pos += pad + len(data)


def _parse_header(text):
    meta, records = {}, []
    for line in text.splitlines():
        if line.startswith("tensor "):
            parts = line.split(" ")
            if len(parts) != 6:
                raise CorruptCheckpoint(f"bad tensor record: {line!r}")
            _, name, code, shape, offset, nbytes = parts
            if code not in _DTYPES:
                raise CorruptCheckpoint(f"unknown dtype code {code!r}")
            dims = tuple(int(s) for s in shape.split("x")) if shape else ()
            records.append((name, _DTYPES[code], dims, int(offset), int(nbytes)))
        else:
            key, sep, value = line.partition("=")
            if not sep:
                raise CorruptCheckpoint(f"bad header line: {line!r}")
            meta[key] = value
    return meta, records


def read_header(path):
    """Return (meta dict, tensor records) without reading payloads."""
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 8)
        if len(head) < len(MAGIC) + 8 or head[:len(MAGIC)] != MAGIC:
            raise CorruptCheckpoint(f"{path}: bad magic")
        (length,) = struct.unpack("<Q", head[len(MAGIC):])
        text = fh.read(length)
    if len(text) != length:
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        return _parse_header(text.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CorruptCheckpoint):
            raise
        raise CorruptCheckpoint(f"{path}: unreadable header ({exc})") from exc


def load(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    (length,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + length > len(blob):
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        meta, records = _parse_header(blob[start:start + length].decode("utf-8"))
        config = ModelConfig(**{f.name: int(meta[f.name]) for f in fields(ModelConfig)})
        step = int(meta["step"])
        tokenizer = meta["tokenizer"]
        count = int(meta["tensors"])
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CorruptCheckpoint):
            raise
        raise CorruptCheckpoint(f"{path}: bad header ({exc})") from exc

    expected = config.tensor_shapes()
    if count != len(records) or [r[0] for r in records] != list(expected):
        raise CorruptCheckpoint(f"{path}: tensor records do not match config")
    tensors = {}
    end = start + length
    for name, dtype, shape, offset, nbytes in records:
        if shape != expected[name]:
            raise CorruptCheckpoint(f"{path}: {name} declared {shape}, config implies {expected[name]}")
        if offset % ALIGN or offset < end or nbytes != int(np.prod(shape)) * dtype.itemsize:
            raise CorruptCheckpoint(f"{path}: bad layout for {name}")
        if offset + nbytes > len(blob):
            raise CorruptCheckpoint(f"{path}: truncated payload for {name}")
        tensors[name] = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)),
                                      offset=offset).reshape(shape).astype(dtype.newbyteorder("="))
        end = offset + nbytes
    if end != len(blob):
        raise CorruptCheckpoint(f"{path}: {len(blob) - end} unexpected trailing bytes")
    return Checkpoint.from_tensors(config, tensors, step, tokenizer).validate()
