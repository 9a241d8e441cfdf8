"""Shared data model and bit-exact file formats.

Two on-disk formats are defined here and used by every other module:

* ``.cstk`` image stacks: a 6-byte magic, a one-line JSON header and a raw
  little-endian uint16 payload in frame-major, row-major order.
* localization / ground-truth tables: CSV with the ThunderSTORM-style header
  ``frame,x [nm],y [nm],sigma [nm],intensity [photon]``. Frame indices are
  1-based on disk and 0-based in memory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

MAGIC = b"CSTK1\n"
CSV_HEADER = "frame,x [nm],y [nm],sigma [nm],intensity [photon]"

# spawn-key stream ids: every consumer of randomness derives its generator
# from (seed, stream, *counters) so frames can be produced independently.
STREAM_CAMERA = 1
STREAM_BLINK = 2
STREAM_CODEC = 3
STREAM_SPLIT = 4
STREAM_DATASET = 5


class StackFormatError(Exception):
    """Malformed .cstk container."""


class BadMagicError(StackFormatError):
    """File does not start with the CSTK1 magic."""


class TruncatedPayloadError(StackFormatError):
    """Payload is shorter than the header promises."""


class PayloadSizeError(StackFormatError):
    """Payload is longer than the header promises."""


class TableFormatError(Exception):
    """Malformed localization/emitter CSV row."""


def stream_rng(seed: int, stream: int, *counters: int) -> np.random.Generator:
    """Derive an independent generator from (seed, stream, counters).

    Counter-based derivation keeps per-frame streams reproducible no matter
    in which order (or on how many workers) frames are produced.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = (int(stream),) + tuple(int(c) for c in counters)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


@dataclass
class FrameStack:
    """A time series of 2-D pixel arrays in ADU with physical metadata.

    ``data`` has shape (n_frames, height, width), dtype uint16, row-major.
    """

    width: int
    height: int
    n_frames: int
    pixel_nm: float
    fps: float
    data: np.ndarray
    bit_depth: int = 12

    def __post_init__(self) -> None:
        if self.pixel_nm <= 0:
            raise ValueError(f"pixel_nm must be > 0, got {self.pixel_nm}")
        if self.fps <= 0:
            raise ValueError(f"fps must be > 0, got {self.fps}")
        if not 1 <= self.bit_depth <= 16:
            raise ValueError(f"bit_depth must be in [1, 16], got {self.bit_depth}")
        data = np.asarray(self.data, dtype=np.uint16)
        expected = (self.n_frames, self.height, self.width)
        if data.size != self.n_frames * self.height * self.width:
            raise ValueError(
                f"data has {data.size} values, expected {expected[0] * expected[1] * expected[2]}"
            )
        data = data.reshape(expected)
        if data.size and int(data.max()) > self.max_adu:
            raise ValueError(
                f"pixel value {int(data.max())} exceeds {self.bit_depth}-bit range"
            )
        self.data = data

    @property
    def max_adu(self) -> int:
        return (1 << self.bit_depth) - 1

    def frame(self, t: int) -> np.ndarray:
        return self.data[t]


def write_stack(stack: FrameStack, path: Union[str, Path]) -> None:
    """Write a FrameStack to a .cstk file (refuses out-of-range pixels)."""
    if stack.data.size and int(stack.data.max()) > stack.max_adu:
        raise ValueError("pixel value exceeds declared bit depth; refusing to write")
    header = {
        "width": stack.width,
        "height": stack.height,
        "n_frames": stack.n_frames,
        "bit_depth": stack.bit_depth,
        "pixel_nm": stack.pixel_nm,
        "fps": stack.fps,
    }
    payload = np.ascontiguousarray(stack.data, dtype="<u2").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        fh.write(payload)


def read_stack(path: Union[str, Path]) -> FrameStack:
    """Inverse of write_stack; raises distinct errors for each corruption."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise StackFormatError(f"{path}: invalid header: {exc}") from exc
        try:
            width = int(header["width"])
            height = int(header["height"])
            n_frames = int(header["n_frames"])
            bit_depth = int(header["bit_depth"])
            pixel_nm = float(header["pixel_nm"])
            fps = float(header["fps"])
        except (KeyError, TypeError, ValueError) as exc:
            raise StackFormatError(f"{path}: incomplete header: {exc}") from exc
        payload = fh.read()
    expected = width * height * n_frames * 2
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, header promises {expected}"
        )
    if len(payload) > expected:
        raise PayloadSizeError(
            f"{path}: payload has {len(payload)} bytes, header promises {expected}"
        )
    data = np.frombuffer(payload, dtype="<u2").reshape(n_frames, height, width)
    return FrameStack(
        width=width,
        height=height,
        n_frames=n_frames,
        pixel_nm=pixel_nm,
        fps=fps,
        data=data.copy(),
        bit_depth=bit_depth,
    )


def _as_column(values, n: int, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if arr.shape != (n,):
        raise ValueError(f"column has shape {arr.shape}, expected ({n},)")
    return arr


@dataclass
class EmitterTable:
    """Per-frame ground-truth point emitters (nm coordinates, photon counts)."""

    frame: np.ndarray
    x: np.ndarray
    y: np.ndarray
    photons: np.ndarray
    id: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.frame = np.asarray(self.frame, dtype=np.int64)
        n = self.frame.shape[0]
        self.x = _as_column(self.x, n)
        self.y = _as_column(self.y, n)
        self.photons = _as_column(self.photons, n)
        if self.id is not None:
            self.id = _as_column(self.id, n, dtype=np.int64)
        if n and np.any(self.photons <= 0):
            raise ValueError("emitter photons must be > 0")
        order = np.argsort(self.frame, kind="stable")
        if not np.array_equal(order, np.arange(n)):
            self.frame = self.frame[order]
            self.x = self.x[order]
            self.y = self.y[order]
            self.photons = self.photons[order]
            if self.id is not None:
                self.id = self.id[order]

    def __len__(self) -> int:
        return int(self.frame.shape[0])

    def rows_for_frame(self, t: int) -> "EmitterTable":
        lo = np.searchsorted(self.frame, t, side="left")
        hi = np.searchsorted(self.frame, t, side="right")
        return EmitterTable(
            frame=self.frame[lo:hi],
            x=self.x[lo:hi],
            y=self.y[lo:hi],
            photons=self.photons[lo:hi],
            id=None if self.id is None else self.id[lo:hi],
        )

    @staticmethod
    def empty() -> "EmitterTable":
        z = np.zeros(0)
        return EmitterTable(frame=z, x=z, y=z, photons=z)


@dataclass
class LocalizationTable:
    """Detections with nm coordinates; sigma/background may be absent (NaN)."""

    frame: np.ndarray
    x: np.ndarray
    y: np.ndarray
    sigma: np.ndarray
    intensity: np.ndarray
    background: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.frame = np.asarray(self.frame, dtype=np.int64)
        n = self.frame.shape[0]
        self.x = _as_column(self.x, n)
        self.y = _as_column(self.y, n)
        self.sigma = _as_column(self.sigma, n)
        self.intensity = _as_column(self.intensity, n)
        if self.background is not None:
            self.background = _as_column(self.background, n)
        present = self.sigma[np.isfinite(self.sigma)]
        if present.size and np.any(present <= 0):
            raise ValueError("sigma must be > 0 when present")
        order = np.argsort(self.frame, kind="stable")
        if not np.array_equal(order, np.arange(n)):
            self.frame = self.frame[order]
            self.x = self.x[order]
            self.y = self.y[order]
            self.sigma = self.sigma[order]
            self.intensity = self.intensity[order]
            if self.background is not None:
                self.background = self.background[order]

    def __len__(self) -> int:
        return int(self.frame.shape[0])

    def rows_for_frame(self, t: int) -> "LocalizationTable":
        lo = np.searchsorted(self.frame, t, side="left")
        hi = np.searchsorted(self.frame, t, side="right")
        return LocalizationTable(
            frame=self.frame[lo:hi],
            x=self.x[lo:hi],
            y=self.y[lo:hi],
            sigma=self.sigma[lo:hi],
            intensity=self.intensity[lo:hi],
            background=None if self.background is None else self.background[lo:hi],
        )

    @staticmethod
    def empty() -> "LocalizationTable":
        z = np.zeros(0)
        return LocalizationTable(frame=z, x=z, y=z, sigma=z, intensity=z)

    @staticmethod
    def concatenate(tables: list["LocalizationTable"]) -> "LocalizationTable":
        if not tables:
            return LocalizationTable.empty()
        background = None
        if all(t.background is not None for t in tables):
            background = np.concatenate([t.background for t in tables])
        return LocalizationTable(
            frame=np.concatenate([t.frame for t in tables]),
            x=np.concatenate([t.x for t in tables]),
            y=np.concatenate([t.y for t in tables]),
            sigma=np.concatenate([t.sigma for t in tables]),
            intensity=np.concatenate([t.intensity for t in tables]),
            background=background,
        )


def _fmt(value: float) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return repr(float(value))


def write_table(table: Union[LocalizationTable, EmitterTable], path: Union[str, Path]) -> None:
    """Write a table as CSV; frame indices are written 1-based."""
    lines = [CSV_HEADER]
    if isinstance(table, EmitterTable):
        for i in range(len(table)):
            lines.append(
                f"{int(table.frame[i]) + 1},{_fmt(table.x[i])},{_fmt(table.y[i])},"
                f",{_fmt(table.photons[i])}"
            )
    else:
        for i in range(len(table)):
            lines.append(
                f"{int(table.frame[i]) + 1},{_fmt(table.x[i])},{_fmt(table.y[i])},"
                f"{_fmt(table.sigma[i])},{_fmt(table.intensity[i])}"
            )
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_float(token: str, path, lineno: int, column: str) -> float:
    token = token.strip()
    if token == "":
        return math.nan
    try:
        return float(token)
    except ValueError as exc:
        raise TableFormatError(f"{path}: line {lineno}: bad {column} value {token!r}") from exc


def read_table(path: Union[str, Path], emitters: bool = False):
    """Read a CSV table back (0-based frames in memory).

    With ``emitters=True`` the intensity column is interpreted as the
    ground-truth photon count and an EmitterTable is returned.
    """
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n")
        if header != CSV_HEADER:
            raise TableFormatError(f"{path}: line 1: unexpected header {header!r}")
        frames, xs, ys, sigmas, intensities = [], [], [], [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise TableFormatError(
                    f"{path}: line {lineno}: expected 5 fields, got {len(parts)}"
                )
            try:
                frame = int(parts[0])
            except ValueError as exc:
                raise TableFormatError(
                    f"{path}: line {lineno}: bad frame value {parts[0]!r}"
                ) from exc
            if frame < 1:
                raise TableFormatError(f"{path}: line {lineno}: frame must be >= 1")
            frames.append(frame - 1)
            xs.append(_parse_float(parts[1], path, lineno, "x"))
            ys.append(_parse_float(parts[2], path, lineno, "y"))
            sigmas.append(_parse_float(parts[3], path, lineno, "sigma"))
            intensities.append(_parse_float(parts[4], path, lineno, "intensity"))
    if emitters:
        photons = np.asarray(intensities, dtype=np.float64)
        if photons.size and not np.all(np.isfinite(photons)):
            bad = int(np.flatnonzero(~np.isfinite(photons))[0]) + 2
            raise TableFormatError(f"{path}: line {bad}: emitter photons missing")
        return EmitterTable(frame=frames, x=xs, y=ys, photons=photons)
    return LocalizationTable(frame=frames, x=xs, y=ys, sigma=sigmas, intensity=intensities)


@dataclass
class RunConfig:
    """Seed plus per-module parameter groups, loadable from one JSON document."""

    seed: int = 0
    groups: dict = field(default_factory=dict)

    def get(self, dotted: str, default: Any = None) -> Any:
        node: Any = self.groups
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def set(self, dotted: str, value: Any) -> None:
        parts = dotted.split(".")
        node = self.groups
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise TypeError(f"config path {dotted!r} crosses a non-object value")
        node[parts[-1]] = value

    def to_json(self) -> str:
        doc = {"seed": self.seed, **self.groups}
        return json.dumps(doc, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        doc = json.loads(text)
        if not isinstance(doc, dict):
            raise TypeError("config document must be a JSON object")
        seed = int(doc.pop("seed", 0))
        return cls(seed=seed, groups=doc)
