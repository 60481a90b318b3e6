"""Binary model files.

Layout (little-endian): ``b"XAINET01"``, u32 layer count, u32 rank + u32 dims of the input shape,
then per layer a u32 tag, u32 int-parameter count with i64 values, u32 array
count with (u32 ndim, u32 dims..., f64 data) per array. A question-embedding
section (u32 flag, u32 byte length + JSON vocabulary, table array) follows,
and a CRC32 of everything before it closes the file.
"""
from __future__ import annotations

import io
import json
import struct
import zlib

import numpy as np

from .layers import BatchNorm, Conv2D, Dense, PairConcat, ReLU, SumPool
from .model import Model, QuestionEncoder

MAGIC = b"XAINET01"
_PREFIX = MAGIC[:6]

TAGS = {Conv2D: 1, BatchNorm: 2, Dense: 3, ReLU: 4, PairConcat: 5, SumPool: 6}


class ModelFileError(ValueError):
    pass


class BadMagic(ModelFileError):
    pass


class VersionMismatch(ModelFileError):
    pass


class CorruptPayload(ModelFileError):
    pass


def _u32(buf, v):
    buf.write(struct.pack("<I", v))


def _array(buf, a):
    a = np.ascontiguousarray(a, dtype="<f8")
    _u32(buf, a.ndim)
    for d in a.shape:
        _u32(buf, d)
    buf.write(a.tobytes())


def _layer_payload(layer) -> tuple[list[int], list[np.ndarray]]:
    if isinstance(layer, Conv2D):
        return [layer.stride], [layer.weight, layer.bias]
    if isinstance(layer, BatchNorm):
        return [], [layer.gamma, layer.beta, layer.running_mean, layer.running_var, np.array([layer.eps])]
    if isinstance(layer, Dense):
        return [], [layer.weight, layer.bias]
    if isinstance(layer, PairConcat):
        return [layer.question_dim, int(layer.coords)], []
    return [], []


def dumps_model(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    _u32(buf, len(model.layers))
    _u32(buf, len(model.input_shape))
    for d in model.input_shape:
        _u32(buf, d)
    for layer in model.layers:
        _u32(buf, TAGS[type(layer)])
        ints, arrays = _layer_payload(layer)
        _u32(buf, len(ints))
        for v in ints:
            buf.write(struct.pack("<q", v))
        _u32(buf, len(arrays))
        for a in arrays:
            _array(buf, a)
    if model.encoder is None:
        _u32(buf, 0)
    else:
        _u32(buf, 1)
        vocab = json.dumps(model.encoder.vocab).encode("utf-8")
        _u32(buf, len(vocab))
        buf.write(vocab)
        _array(buf, model.encoder.table)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(model: Model, path) -> None:
    with open(path, "wb") as f:
        f.write(dumps_model(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptPayload("unexpected end of model file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def array(self) -> np.ndarray:
        ndim = self.u32()
        if ndim > 8:
            raise CorruptPayload(f"implausible array rank {ndim}")
        shape = tuple(self.u32() for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)


def loads_model(data: bytes) -> Model:
    if data[:6] != _PREFIX:
        raise BadMagic(f"not a model file (magic {data[:8]!r})")
    if data[:8] != MAGIC:
        raise VersionMismatch(f"unsupported model file version {data[6:8]!r}")
    if len(data) < 12:
        raise CorruptPayload("model file truncated")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CorruptPayload("checksum mismatch (truncated or damaged file)")
    r = _Reader(body)
    r.take(8)
    n_layers = r.u32()
    input_shape = tuple(r.u32() for _ in range(r.u32()))
    by_tag = {v: k for k, v in TAGS.items()}
    layers = []
    for _ in range(n_layers):
        tag = r.u32()
        if tag not in by_tag:
            raise CorruptPayload(f"unknown layer tag {tag}")
        ints = [r.i64() for _ in range(r.u32())]
        arrays = [r.array() for _ in range(r.u32())]
        cls = by_tag[tag]
        try:
            if cls is Conv2D:
                layers.append(Conv2D(arrays[0], arrays[1], int(ints[0])))
            elif cls is BatchNorm:
                layers.append(BatchNorm(*arrays[:4], eps=float(arrays[4][0])))
            elif cls is Dense:
                layers.append(Dense(arrays[0], arrays[1]))
            elif cls is PairConcat:
                layers.append(PairConcat(int(ints[0]), bool(ints[1])))
            else:
                layers.append(cls())
        except IndexError:
            raise CorruptPayload(f"layer tag {tag} has missing parameters") from None
    encoder = None
    if r.u32():
        vocab = json.loads(r.take(r.u32()).decode("utf-8"))
        encoder = QuestionEncoder(vocab, r.array())
    if r.pos != len(body):
        raise CorruptPayload("trailing bytes after model payload")
    return Model(layers, input_shape, encoder)


def load_model(path) -> Model:
    with open(path, "rb") as f:
        return loads_model(f.read())
