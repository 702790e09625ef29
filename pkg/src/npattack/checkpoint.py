"""Versioned binary checkpoints for the image model and victim classifiers.

Layout: 4 magic bytes ("ANP1" / "CLF1"), a little-endian uint32 architecture
descriptor, then a tensor table: uint32 count, and per tensor uint32 rank,
uint32 extents, and the row-major float64 little-endian payload. Loaders
reject wrong magic and any shape that disagrees with the descriptor.
"""

from __future__ import annotations

import struct

import numpy as np

from .anp import PARAM_SHAPES, AnpParameters
from .autodiff import Tensor
from .errors import CheckpointError
from .victim import Classifier

ANP_MAGIC = b"ANP1"
CLF_MAGIC = b"CLF1"


def _write_tensor_table(fh, arrays):
    fh.write(struct.pack("<I", len(arrays)))
    for arr in arrays:
        arr = np.asarray(arr, dtype=np.float64)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes(order="C"))


class _Reader:
    def __init__(self, fh, path):
        self.fh = fh
        self.path = path

    def exact(self, n, what):
        buf = self.fh.read(n)
        if len(buf) != n:
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        return buf

    def u32(self, what):
        return struct.unpack("<I", self.exact(4, what))[0]

    def tensor_table(self):
        count = self.u32("tensor count")
        arrays = []
        for i in range(count):
            rank = self.u32(f"tensor {i} rank")
            shape = struct.unpack(f"<{rank}I", self.exact(4 * rank, f"tensor {i} shape"))
            n = int(np.prod(shape)) if rank else 1
            payload = self.exact(8 * n, f"tensor {i} payload")
            arrays.append(np.frombuffer(payload, dtype="<f8").reshape(shape).copy())
        return arrays


def save_anp(path, params):
    with open(path, "wb") as fh:
        fh.write(ANP_MAGIC)
        fh.write(struct.pack("<5I", params.d_z, params.d_r, params.image_h,
                             params.image_w, params.image_c))
        _write_tensor_table(fh, [params.tensors[name].data for name in PARAM_SHAPES])


def load_anp(path):
    with open(path, "rb") as fh:
        reader = _Reader(fh, path)
        magic = reader.exact(4, "magic")
        if magic != ANP_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {ANP_MAGIC!r}")
        d_z, d_r, h, w, c = struct.unpack("<5I", reader.exact(20, "descriptor"))
        arrays = reader.tensor_table()
    names = list(PARAM_SHAPES)
    if len(arrays) != len(names):
        raise CheckpointError(f"{path}: expected {len(names)} tensors, found {len(arrays)}")
    tensors = {}
    for name, arr in zip(names, arrays):
        if arr.shape != PARAM_SHAPES[name]:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {arr.shape}, expected {PARAM_SHAPES[name]}")
        tensors[name] = Tensor(arr)
    params = AnpParameters(image_h=h, image_w=w, image_c=c, tensors=tensors,
                           d_z=d_z, d_r=d_r)
    if d_z != 128 or d_r != 128:
        raise CheckpointError(f"{path}: unsupported latent widths ({d_z}, {d_r})")
    return params


def save_classifier(path, clf):
    with open(path, "wb") as fh:
        fh.write(CLF_MAGIC)
        fh.write(struct.pack("<I", len(clf.widths)))
        fh.write(struct.pack(f"<{len(clf.widths)}I", *clf.widths))
        arrays = []
        for i in range(1, clf.n_layers + 1):
            arrays.append(clf.tensors[f"w{i}"].data)
            arrays.append(clf.tensors[f"b{i}"].data)
        _write_tensor_table(fh, arrays)


def load_classifier(path):
    with open(path, "rb") as fh:
        reader = _Reader(fh, path)
        magic = reader.exact(4, "magic")
        if magic != CLF_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CLF_MAGIC!r}")
        n_widths = reader.u32("width count")
        widths = list(struct.unpack(f"<{n_widths}I", reader.exact(4 * n_widths, "widths")))
        arrays = reader.tensor_table()
    if len(arrays) != 2 * (len(widths) - 1):
        raise CheckpointError(f"{path}: tensor count does not match {len(widths)} widths")
    tensors = {}
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        w, b = arrays[2 * (i - 1)], arrays[2 * (i - 1) + 1]
        if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise CheckpointError(f"{path}: layer {i} shapes disagree with the width table")
        tensors[f"w{i}"] = Tensor(w)
        tensors[f"b{i}"] = Tensor(b)
    return Classifier(widths=widths, tensors=tensors)
