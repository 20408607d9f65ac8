"""Named-parameter checkpoint archive.

Layout (little-endian)::

    b"TPVCKPT1"
    u32 n | n bytes UTF-8 JSON header {"run_config": ..., "encoder": ..., "head": ...,
                                       "estimator": ..., "entries": [names]}
    for each entry in header order:
        u32 n | n bytes UTF-8 name | tensor snapshot (b"TPVT", u32 rank, u32 extents, f32 data)
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import torch

from .errors import DataError
from .estimator import TPVSegmenter
from .head import LossRouting, SegmentationHead
from .numeric import read_tensor, write_tensor

CKPT_MAGIC = b"TPVCKPT1"
CKPT_VERSION = 1


def _pack_str(fh, text: str) -> None:
    raw = text.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _unpack_str(fh) -> str:
    head = fh.read(4)
    if len(head) != 4:
        raise DataError("checkpoint truncated")
    (n,) = struct.unpack("<I", head)
    raw = fh.read(n)
    if len(raw) != n:
        raise DataError("checkpoint truncated")
    return raw.decode("utf-8")


def save_checkpoint(path, estimator: TPVSegmenter, run_config: dict | None = None) -> None:
    """Write a fitted estimator's parameters plus the configuration that produced them."""
    model = estimator.model
    state = model.state_dict()
    header = {
        "version": CKPT_VERSION,
        "run_config": run_config or {},
        "estimator": estimator.get_params(),
        "encoder": model.config.to_dict(),
        "head": {"activation": SegmentationHead.activation, "n_outputs": model.n_classes + 1},
        "entries": list(state),
    }
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    _pack_str(buf, json.dumps(header, sort_keys=True, default=str))
    for name, tensor in state.items():
        if tensor.dtype != torch.float32:
            raise DataError(f"checkpoint entry {name} is {tensor.dtype}; only float32 is stored")
        _pack_str(buf, name)
        write_tensor(buf, tensor.detach())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Header dict and the name -> tensor map, without building a model."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if raw[:8] != CKPT_MAGIC:
        raise DataError(f"{path}: not a TPVCKPT1 checkpoint")
    fh = io.BytesIO(raw[8:])
    try:
        header = json.loads(_unpack_str(fh))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt checkpoint header: {exc}") from None
    tensors = {}
    for expected in header.get("entries", []):
        name = _unpack_str(fh)
        if name != expected:
            raise DataError(f"{path}: entry {name!r} out of order (expected {expected!r})")
        tensors[name] = read_tensor(fh)
    if fh.read(1):
        raise DataError(f"{path}: trailing bytes after last entry")
    return header, tensors


def load_checkpoint(path) -> tuple[TPVSegmenter, dict]:
    """Rebuild a fitted :class:`TPVSegmenter`; returns it with the stored run config."""
    header, tensors = read_checkpoint(path)
    estimator = TPVSegmenter(**header["estimator"])
    model = estimator.build_model()
    missing = set(model.state_dict()) ^ set(tensors)
    if missing:
        raise DataError(f"{path}: checkpoint entries do not match the model: {sorted(missing)[:5]}")
    model.load_state_dict(tensors)
    estimator.model_ = model
    estimator.routing_ = LossRouting.parse(str(estimator.routing))
    estimator.n_features_in_ = model.config.channels
    estimator.loss_history_ = []
    return estimator, header.get("run_config", {})
