"""Binary weight containers and multi-epoch snapshot archives.

Both formats open with a single ASCII header line naming the format, its
version and the tensor axis order.  Tensor payloads are little-endian
float32 in C order over ``(kh, kw, cin, cout)``.

Weights container (one snapshot)::

    CONET-WEIGHTS 1 axis=kh,kw,cin,cout\\n
    u32 record count
    per record: u16 name length, utf-8 name, 4 x u32 dims, payload

Archive (one snapshot per epoch)::

    CONET-ARCHIVE 1 axis=kh,kw,cin,cout\\n
    one-line JSON index: {"epochs", "layers": [[name, dims], ...], "loss", "accuracy"}\\n
    per epoch, per manifest layer: payload
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .tensor import AXIS_ORDER, ConvTensor

FORMAT_VERSION = 1
_AXES = ",".join(AXIS_ORDER)
WEIGHTS_MAGIC = f"CONET-WEIGHTS {FORMAT_VERSION} axis={_AXES}\n".encode("ascii")
ARCHIVE_MAGIC = f"CONET-ARCHIVE {FORMAT_VERSION} axis={_AXES}\n".encode("ascii")
_F32 = np.dtype("<f4")


def as_float32(tensor: ConvTensor) -> ConvTensor:
    if tensor.values.dtype == _F32:
        return tensor
    return ConvTensor(tensor.values.astype(_F32))


def _payload(tensor: ConvTensor) -> bytes:
    return np.ascontiguousarray(tensor.values, dtype=_F32).tobytes()


def _decode(data, offset, dims, what):
    n = int(np.prod(dims)) * 4
    if offset + n > len(data):
        raise FormatError(f"truncated payload for {what}: need {n} bytes, "
                          f"{len(data) - offset} available", offset=len(data))
    arr = np.frombuffer(data, dtype=_F32, count=n // 4, offset=offset).reshape(dims)
    return ConvTensor(arr.copy()), offset + n


def _read_line(data, offset, what):
    end = data.find(b"\n", offset)
    if end < 0:
        raise FormatError(f"missing newline terminating {what}", offset=len(data))
    return data[offset:end], end + 1


# ---------------------------------------------------------------------------
# single snapshot
# ---------------------------------------------------------------------------

def dump_weights(tensors: dict[str, ConvTensor]) -> bytes:
    out = [WEIGHTS_MAGIC, struct.pack("<I", len(tensors))]
    for name, tensor in tensors.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<4I", *tensor.dims))
        out.append(_payload(tensor))
    return b"".join(out)


def load_weights(data: bytes) -> dict[str, ConvTensor]:
    if not data.startswith(WEIGHTS_MAGIC):
        raise FormatError(f"bad weights header {data[:40]!r}", offset=0)
    offset = len(WEIGHTS_MAGIC)
    if offset + 4 > len(data):
        raise FormatError("truncated record count", offset=len(data))
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    tensors = {}
    for _ in range(count):
        if offset + 2 > len(data):
            raise FormatError("truncated record name length", offset=len(data))
        (nlen,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + nlen + 16 > len(data):
            raise FormatError("truncated record header", offset=len(data))
        name = data[offset:offset + nlen].decode("utf-8")
        offset += nlen
        dims = struct.unpack_from("<4I", data, offset)
        offset += 16
        if min(dims) < 1:
            raise FormatError(f"layer {name!r} has a zero dimension", offset=offset - 16)
        if name in tensors:
            raise FormatError(f"duplicate layer {name!r}", offset=offset)
        tensors[name], offset = _decode(data, offset, dims, f"layer {name!r}")
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes", offset=offset)
    return tensors


def write_weights(path, tensors: dict[str, ConvTensor]) -> None:
    Path(path).write_bytes(dump_weights(tensors))


def read_weights(path) -> dict[str, ConvTensor]:
    return load_weights(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# archives
# ---------------------------------------------------------------------------

@dataclass
class SnapshotArchive:
    """Per-epoch weight snapshots of one training run.

    Epoch ``t`` is the state after ``t + 1`` passes over the data.  Tensors
    are held in float32 so that an archive read back from disk is bit-equal
    to the one that was written.
    """

    epochs: list[dict[str, ConvTensor]] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.epochs = [{k: as_float32(v) for k, v in snap.items()} for snap in self.epochs]
        self.loss = [float(x) for x in self.loss]
        self.accuracy = [float(x) for x in self.accuracy]
        self._check()

    def _check(self):
        if self.epochs:
            manifest = self.manifest
            for t, snap in enumerate(self.epochs):
                if [(k, v.dims) for k, v in snap.items()] != manifest:
                    raise InputError(f"epoch {t} layer set or dims differ from epoch 0")
        if len(self.loss) != len(self.epochs) or len(self.accuracy) != len(self.epochs):
            raise InputError("loss/accuracy length must equal the epoch count")

    def append(self, tensors: dict[str, ConvTensor], loss: float, accuracy: float):
        self.epochs.append({k: as_float32(v) for k, v in tensors.items()})
        self.loss.append(float(loss))
        self.accuracy.append(float(accuracy))
        self._check()

    def __len__(self):
        return len(self.epochs)

    @property
    def layers(self) -> list[str]:
        return list(self.epochs[0]) if self.epochs else []

    @property
    def manifest(self) -> list[tuple[str, tuple[int, int, int, int]]]:
        return [(k, v.dims) for k, v in self.epochs[0].items()] if self.epochs else []

    def slice(self, start: int, stop: int) -> "SnapshotArchive":
        return SnapshotArchive(self.epochs[start:stop], self.loss[start:stop],
                               self.accuracy[start:stop])

    def histories(self, layers=None):
        """Rank/condition time series for each requested layer."""
        from .lowrank import LayerMetricsHistory, layer_metrics

        names = self.layers if layers is None else list(layers)
        missing = [n for n in names if self.epochs and n not in self.epochs[0]]
        if missing:
            raise InputError(f"archive has no layers {missing}")
        return {
            name: LayerMetricsHistory(tuple(layer_metrics(snap[name]) for snap in self.epochs))
            for name in names
        }


def dump_archive(archive: SnapshotArchive) -> bytes:
    index = {
        "epochs": len(archive),
        "layers": [[name, list(dims)] for name, dims in archive.manifest],
        "loss": [repr(x) for x in archive.loss],
        "accuracy": [repr(x) for x in archive.accuracy],
    }
    out = [ARCHIVE_MAGIC, json.dumps(index, separators=(",", ":")).encode("utf-8"), b"\n"]
    for snap in archive.epochs:
        out.extend(_payload(t) for t in snap.values())
    return b"".join(out)


def load_archive(data: bytes) -> SnapshotArchive:
    header, offset = _read_line(data, 0, "header")
    if header + b"\n" != ARCHIVE_MAGIC:
        raise FormatError(f"bad archive header {header[:60]!r}", offset=0)
    raw_index, payload_start = _read_line(data, offset, "index")
    try:
        index = json.loads(raw_index)
        n_epochs = int(index["epochs"])
        manifest = [(str(name), tuple(int(d) for d in dims)) for name, dims in index["layers"]]
        loss = [float(x) for x in index["loss"]]
        acc = [float(x) for x in index["accuracy"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable archive index: {exc}", offset=offset) from None
    if n_epochs < 1 or not manifest:
        raise FormatError("archive holds no epochs or no layers", offset=offset)
    if len(loss) != n_epochs or len(acc) != n_epochs:
        raise FormatError("index loss/accuracy length disagrees with epoch count", offset=offset)
    for name, dims in manifest:
        if len(dims) != 4 or min(dims) < 1:
            raise FormatError(f"layer {name!r} has invalid dims {dims}", offset=offset)
    pos = payload_start
    epochs = []
    for t in range(n_epochs):
        snap = {}
        for name, dims in manifest:
            snap[name], pos = _decode(data, pos, dims, f"epoch {t} layer {name!r}")
        epochs.append(snap)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes", offset=pos)
    return SnapshotArchive(epochs, loss, acc)


def write_archive(path, archive: SnapshotArchive) -> None:
    Path(path).write_bytes(dump_archive(archive))


def read_archive(path) -> SnapshotArchive:
    return load_archive(Path(path).read_bytes())
