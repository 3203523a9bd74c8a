"""Binary checkpoint of the two flows and the residual head.

Layout, all little-endian::

    magic       4 bytes   b"FEPN"
    version     u8        1
    dim         u32
    n_blocks    u32
    hidden      u32       coupling-net width
    head_hidden u32
    n_classes   u32
    prior_in    f64
    backbone    i64       seed of the frozen backbone the model was fit on
    n_tensors   u32
    then n_tensors records:
        name_len u16, name (utf-8), ndim u8, shape u32 x ndim,
        data f64 x prod(shape) in C order

Tensor names are the parameter names of ``losses.model_params``
(``in.blocks.0.scale.W1``, ..., ``res.b2``) in that order.  Coupling masks
are not stored; they follow from ``n_blocks`` (block k conditions on the
dimensions whose index has the parity of k).  Nothing time- or
host-dependent is written, so equal models give equal bytes.
"""

import struct

import numpy as np

from .errors import CheckpointError
from .flow import ClassConditionalFlows, make_flow
from .head import make_head

__all__ = ["MAGIC", "VERSION", "save_checkpoint", "load_checkpoint"]

MAGIC = b"FEPN"
VERSION = 1
_HEADER = struct.Struct("<4sBIIIIIdqI")


def _encode(flows, head, backbone_seed):
    fp = flows.params()
    hp = {"res." + k: v for k, v in head.params().items()}
    tensors = list(fp.items()) + list(hp.items())
    out = [
        _HEADER.pack(
            MAGIC,
            VERSION,
            flows.dim,
            len(flows.flow_in.blocks),
            flows.flow_in.hidden,
            head.W1.shape[1],
            head.n_classes,
            float(flows.prior_in),
            int(backbone_seed),
            len(tensors),
        )
    ]
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_checkpoint(path, flows, head, backbone_seed=0):
    with open(path, "wb") as fh:
        fh.write(_encode(flows, head, backbone_seed))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def bytes(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path):
    """Returns (flows, head, meta) where meta holds the header fields."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint at {path}") from exc
    rd = _Reader(buf)
    magic, version, dim, n_blocks, hidden, head_hidden, n_cls, prior, bb, n = rd.take(
        _HEADER.format
    )
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(n):
        (name_len,) = rd.take("<H")
        name = rd.bytes(name_len).decode("utf-8")
        (ndim,) = rd.take("<B")
        shape = rd.take(f"<{ndim}I")
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(rd.bytes(8 * count), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(shape)
    if rd.pos != len(buf):
        raise CheckpointError("trailing bytes after the last tensor")

    skeleton = ClassConditionalFlows(
        make_flow(dim, n_blocks, hidden), make_flow(dim, n_blocks, hidden), prior
    )
    head = make_head(dim, head_hidden, n_cls)
    try:
        flows = skeleton.with_params({k: v for k, v in tensors.items() if not k.startswith("res.")})
        head = head.with_params({k[4:]: v for k, v in tensors.items() if k.startswith("res.")})
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint tensors do not fit the header: {exc}") from exc
    meta = {
        "version": version,
        "dim": dim,
        "n_blocks": n_blocks,
        "hidden": hidden,
        "head_hidden": head_hidden,
        "n_classes": n_cls,
        "prior_in": prior,
        "backbone_seed": bb,
    }
    return flows, head, meta
