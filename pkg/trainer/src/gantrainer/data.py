"""Reader for the paired-stack training dataset.

The dataset directory holds ``x.cstk`` (upsampled degraded frames, 12-bit
ADU) and ``y.cstk`` (location maps quantized to 16 bit) plus a
``dataset.json`` manifest; the stack container is a 6-byte magic, one JSON
header line and little-endian uint16 payload.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

MAGIC = b"CSTK1\n"


def read_cstk(path: Union[str, Path]) -> Tuple[dict, np.ndarray]:
    """(header, frames) with frames shaped (n_frames, height, width)."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a CSTK1 stack")
        header = json.loads(fh.readline())
        payload = fh.read()
    n = header["n_frames"] * header["height"] * header["width"]
    if len(payload) != 2 * n:
        raise ValueError(f"{path}: payload size mismatch")
    data = np.frombuffer(payload, dtype="<u2").reshape(
        header["n_frames"], header["height"], header["width"]
    )
    return header, data


@dataclass
class PairDataset:
    x: np.ndarray  # (n, h, w) float32 in [0, 1]
    y: np.ndarray
    factor: int
    pixel_nm: float

    def __len__(self) -> int:
        return self.x.shape[0]


def load_dataset(directory: Union[str, Path]) -> PairDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "dataset.json").read_text())
    _, x_raw = read_cstk(directory / manifest["x_stack"])
    _, y_raw = read_cstk(directory / manifest["y_stack"])
    x = x_raw.astype(np.float32) / float(manifest["x_scale"])
    y = y_raw.astype(np.float32) / float(manifest["y_scale"])
    return PairDataset(
        x=x, y=y, factor=int(manifest["factor"]), pixel_nm=float(manifest["pixel_nm"])
    )


def merge_datasets(parts: List[PairDataset], fractions: List[float], rng) -> PairDataset:
    """Mix datasets by the given fractions of the total (e.g. 50/50).

    The merged size is the largest total consistent with each part's size;
    pair order is shuffled.
    """
    if len(parts) != len(fractions):
        raise ValueError("one fraction per dataset required")
    total = min(int(len(p) / f) for p, f in zip(parts, fractions) if f > 0)
    xs, ys = [], []
    for part, fraction in zip(parts, fractions):
        take = int(round(total * fraction))
        idx = rng.choice(len(part), size=min(take, len(part)), replace=False)
        xs.append(part.x[idx])
        ys.append(part.y[idx])
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    order = rng.permutation(x.shape[0])
    return PairDataset(
        x=x[order], y=y[order], factor=parts[0].factor, pixel_nm=parts[0].pixel_nm
    )
