"""Export a trained plan-driven generator as manifest.json + weights.bin.

Normalization layers are folded to per-channel affine scale/shift using
their inference statistics, and training-only ops (dropout) are elided with
skip indices remapped. The write is atomic: a temp directory is populated
and renamed into place.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .model import (
    ClampNonneg,
    ConcatSkip,
    Conv,
    Dropout,
    LeakyRelu,
    NnResize,
    NormAffine,
    PlanNet,
    Relu,
)


def fold_batchnorm(bn: torch.nn.BatchNorm2d):
    """(scale, shift) so that scale*x + shift == eval-mode batch norm."""
    with torch.no_grad():
        scale = bn.weight / torch.sqrt(bn.running_var + bn.eps)
        shift = bn.bias - bn.running_mean * scale
    return scale.cpu().numpy(), shift.cpu().numpy()


def export_generator(
    net: PlanNet,
    directory: Union[str, Path],
    train_size: Optional[int] = None,
    input_channels: int = 1,
) -> None:
    directory = Path(directory)
    blob = bytearray()

    def put(tensor: np.ndarray) -> dict:
        offset = len(blob)
        blob.extend(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
        return {"offset": offset, "shape": list(tensor.shape)}

    layers = []
    # plan index -> manifest index of the op producing the same activation
    index_map: dict[int, int] = {}
    for plan_idx, (op, module) in enumerate(zip(net.plan, net.ops)):
        if isinstance(op, Dropout):
            # identity at inference: alias to the previous op's output
            index_map[plan_idx] = index_map[plan_idx - 1]
            continue
        if isinstance(op, Conv):
            layers.append(
                {
                    "kind": "conv",
                    "in_channels": op.in_channels,
                    "out_channels": op.out_channels,
                    "kernel": [op.kernel, op.kernel],
                    "stride": op.stride,
                    "padding": op.padding,
                    "pad_mode": op.pad_mode,
                    "weight": put(module.weight.detach().cpu().numpy()),
                    "bias": put(module.bias.detach().cpu().numpy()),
                }
            )
        elif isinstance(op, NormAffine):
            scale, shift = fold_batchnorm(module)
            layers.append(
                {
                    "kind": "norm_affine",
                    "channels": op.channels,
                    "scale": put(scale),
                    "shift": put(shift),
                }
            )
        elif isinstance(op, LeakyRelu):
            layers.append({"kind": "leaky_relu", "slope": op.slope})
        elif isinstance(op, Relu):
            layers.append({"kind": "relu"})
        elif isinstance(op, NnResize):
            layers.append({"kind": "nn_resize", "factor": op.factor})
        elif isinstance(op, ConcatSkip):
            layers.append({"kind": "concat_skip", "source": index_map[op.source]})
        elif isinstance(op, ClampNonneg):
            layers.append({"kind": "clamp_nonneg"})
        else:
            raise TypeError(f"cannot export plan op {op!r}")
        index_map[plan_idx] = len(layers) - 1

    manifest = {
        "kind": "cellstorm-weights",
        "version": 1,
        "input_channels": input_channels,
        "weights": "weights.bin",
        "layers": layers,
    }
    if train_size is not None:
        manifest["train_size"] = train_size

    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".export-", dir=directory.parent))
    try:
        (tmp / "weights.bin").write_bytes(bytes(blob))
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        if directory.exists():
            for name in ("manifest.json", "weights.bin"):
                target = directory / name
                if target.exists():
                    target.unlink()
            for name in ("manifest.json", "weights.bin"):
                os.replace(tmp / name, directory / name)
            tmp.rmdir()
        else:
            os.replace(tmp, directory)
    finally:
        if tmp.exists():
            for child in tmp.iterdir():
                child.unlink()
            tmp.rmdir()
