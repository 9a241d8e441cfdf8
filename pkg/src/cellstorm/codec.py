"""Intra-only emulation of the H.264 4x4 integer transform + quantization.

Each frame is level-shifted by half range, cut into 4x4 blocks on a
(possibly shifted) grid, transformed with the exact-match integer matrix,
uniformly quantized, dequantized and inverse-transformed with the
norm-compensating scaling so the chain is lossless when quantization is
bypassed. No motion compensation, no entropy coding: the artifacts of
interest are the block-transform quantization patterns themselves.
"""

from __future__ import annotations

import shutil
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .formats import STREAM_CODEC, FrameStack, stream_rng

# Forward core matrix; rows have norms (2, sqrt(10), 2, sqrt(10)).
CF = np.array(
    [[1, 1, 1, 1], [2, 1, -1, -2], [1, -1, -1, 1], [1, -2, 2, -1]],
    dtype=np.int64,
)
# Inverse core matrix (the standard's half-integer variant of CF).
CI = np.array(
    [[1.0, 1.0, 1.0, 1.0], [1.0, 0.5, -0.5, -1.0], [1.0, -1.0, -1.0, 1.0], [0.5, -1.0, 1.0, -0.5]]
)

_ROW_NORM = np.array([2.0, np.sqrt(10.0), 2.0, np.sqrt(10.0)])
# Per-position quantizer norm factors s_ij = |row_i| * |row_j|.
QUANT_NORM = np.outer(_ROW_NORM, _ROW_NORM)
# Pre-scaling for the inverse core, chosen so that
# floor((CI.T @ (CF X CF.T * INV_SCALE) @ CI + 32) / 64) == X exactly.
_U = np.array([0.25, 0.2, 0.25, 0.2])
INV_SCALE = 64.0 * np.outer(_U, _U)


@dataclass(frozen=True)
class CodecConfig:
    """Quality percentage, grid offset policy and optional explicit QP."""

    quality: float = 100.0
    block: int = 4
    grid_offset: Union[str, Tuple[int, int]] = (0, 0)
    qp_override: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0 <= self.quality <= 100:
            raise ValueError(f"quality must be in [0, 100], got {self.quality}")
        if self.block != 4:
            raise ValueError("only 4x4 blocks are supported")
        if isinstance(self.grid_offset, str):
            if self.grid_offset != "random-per-stack":
                raise ValueError(f"unknown grid_offset policy {self.grid_offset!r}")
        else:
            dx, dy = self.grid_offset
            if not (0 <= dx <= 3 and 0 <= dy <= 3):
                raise ValueError(f"grid offsets must be in [0, 3], got {self.grid_offset}")
        if self.qp_override is not None and not 0 <= self.qp_override <= 51:
            raise ValueError(f"qp_override must be in [0, 51], got {self.qp_override}")


def quality_to_qp(quality: float) -> int:
    """Linear map of the 0-100 quality percentage onto QP 51-0."""
    return int(round(51.0 * (100.0 - quality) / 100.0))


def qstep_for_qp(qp: int) -> float:
    """Standard quantizer step: 0.625 * 2^(QP/6)."""
    return 0.625 * 2.0 ** (qp / 6.0)


def forward_transform4x4(block: np.ndarray) -> np.ndarray:
    """W = CF @ X @ CF.T in exact integer arithmetic."""
    x = np.asarray(block, dtype=np.int64)
    if x.shape != (4, 4):
        raise ValueError(f"expected a 4x4 block, got shape {x.shape}")
    return CF @ x @ CF.T


def inverse_transform4x4(coeffs: np.ndarray) -> np.ndarray:
    """Inverse with norm-compensating scaling and (y + 32) >> 6 rounding."""
    w = np.asarray(coeffs, dtype=np.float64)
    if w.shape != (4, 4):
        raise ValueError(f"expected 4x4 coefficients, got shape {w.shape}")
    y = CI.T @ (w * INV_SCALE) @ CI
    return np.floor((y + 32.0) / 64.0).astype(np.int64)


def _blockify(frame: np.ndarray) -> np.ndarray:
    h, w = frame.shape
    return frame.reshape(h // 4, 4, w // 4, 4).transpose(0, 2, 1, 3).reshape(-1, 4, 4)


def _unblockify(blocks: np.ndarray, h: int, w: int) -> np.ndarray:
    return blocks.reshape(h // 4, w // 4, 4, 4).transpose(0, 2, 1, 3).reshape(h, w)


def resolve_grid_offset(cfg: CodecConfig, seed: int) -> Tuple[int, int]:
    """Fixed offset, or one per-stack draw for the random policy."""
    if cfg.grid_offset == "random-per-stack":
        rng = stream_rng(seed, STREAM_CODEC)
        dx, dy = rng.integers(0, 4, size=2)
        return int(dx), int(dy)
    dx, dy = cfg.grid_offset
    return int(dx), int(dy)


def transcode_stack(stack: FrameStack, cfg: CodecConfig, seed: int = 0) -> FrameStack:
    """Apply the transform/quantization round trip to every frame.

    Quality 100 (without a QP override) bypasses quantization, which makes
    the whole chain a bit-exact identity. Edge-partial blocks are padded by
    edge replication and cropped back.
    """
    dx, dy = resolve_grid_offset(cfg, seed)
    bypass = cfg.qp_override is None and cfg.quality == 100
    qp = cfg.qp_override if cfg.qp_override is not None else quality_to_qp(cfg.quality)
    step = qstep_for_qp(qp) * QUANT_NORM
    level = 1 << (stack.bit_depth - 1)
    max_adu = stack.max_adu

    pad_left = (4 - dx % 4) % 4
    pad_top = (4 - dy % 4) % 4
    h, w = stack.height, stack.width
    pad_bottom = (4 - (h + pad_top) % 4) % 4
    pad_right = (4 - (w + pad_left) % 4) % 4
    ph = h + pad_top + pad_bottom
    pw = w + pad_left + pad_right

    out = np.empty_like(stack.data)
    for t in range(stack.n_frames):
        frame = np.pad(
            stack.data[t].astype(np.int64),
            ((pad_top, pad_bottom), (pad_left, pad_right)),
            mode="edge",
        )
        blocks = _blockify(frame - level)
        coeffs = np.einsum("ij,bjk,lk->bil", CF, blocks, CF).astype(np.float64)
        if not bypass:
            z = np.rint(coeffs / step)
            coeffs = z * step
        y = np.einsum("ji,bjk,kl->bil", CI, coeffs * INV_SCALE, CI)
        rec = np.floor((y + 32.0) / 64.0).astype(np.int64) + level
        rec = np.clip(rec, 0, max_adu)
        out[t] = _unblockify(rec, ph, pw)[pad_top : pad_top + h, pad_left : pad_left + w]
    return FrameStack(
        width=stack.width,
        height=stack.height,
        n_frames=stack.n_frames,
        pixel_nm=stack.pixel_nm,
        fps=stack.fps,
        data=out,
        bit_depth=stack.bit_depth,
    )


def transcode_external(
    stack: FrameStack,
    quality: float,
    executable: str = "ffmpeg",
) -> FrameStack:
    """Round-trip the stack through an installed H.264 encoder.

    Qualitative-comparison shim only: frames are scaled to 8 bit, piped
    through the external encoder as grayscale video and scaled back. Not
    used by any quantitative test.
    """
    if shutil.which(executable) is None:
        raise RuntimeError(f"external encoder {executable!r} not found")
    shift = max(stack.bit_depth - 8, 0)
    crf = quality_to_qp(quality)
    with tempfile.TemporaryDirectory() as tmp:
        raw_in = Path(tmp) / "in.gray"
        encoded = Path(tmp) / "out.mp4"
        raw_out = Path(tmp) / "out.gray"
        (stack.data >> shift).astype(np.uint8).tofile(raw_in)
        size = f"{stack.width}x{stack.height}"
        common = [executable, "-y", "-loglevel", "error"]
        subprocess.run(
            common
            + ["-f", "rawvideo", "-pix_fmt", "gray", "-s", size, "-r", str(stack.fps)]
            + ["-i", str(raw_in), "-c:v", "libx264", "-crf", str(crf), str(encoded)],
            check=True,
        )
        subprocess.run(
            common
            + ["-i", str(encoded), "-f", "rawvideo", "-pix_fmt", "gray", str(raw_out)],
            check=True,
        )
        decoded = np.fromfile(raw_out, dtype=np.uint8)
    decoded = decoded[: stack.data.size].reshape(stack.data.shape)
    return FrameStack(
        width=stack.width,
        height=stack.height,
        n_frames=stack.n_frames,
        pixel_nm=stack.pixel_nm,
        fps=stack.fps,
        data=(decoded.astype(np.uint16) << shift),
        bit_depth=stack.bit_depth,
    )
