"""Generator inference from a portable weight archive plus dataset plumbing.

The archive is a ``manifest.json`` describing an ordered layer list and a
``weights.bin`` blob of little-endian float32 tensors at declared byte
offsets. Inference executes the layers with plain numpy: stride-2 4x4
convolutions with leaky rectifiers on the way down, nearest-neighbor resize
plus 3x3 convolutions with skip concatenation on the way up, per-channel
affine normalization with statistics baked in at export, and a final
non-negative clamp.

Training pairs couple an upsampled degraded frame (normalized to [0, 1])
with a sparse location map whose single pixels carry normalized emitter
brightness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .camera import CameraModel
from .codec import CodecConfig
from .formats import (
    STREAM_DATASET,
    EmitterTable,
    FrameStack,
    LocalizationTable,
    read_stack,
    stream_rng,
    write_stack,
)
from .localize import strict_local_maxima
from .simulate import BlinkModel, PsfModel, SimScene, simulate_stack

EXTRACT_THRESHOLD = 0.3
TILE_OVERLAP = 16


class ArchiveError(Exception):
    """Weight archive cannot be loaded."""


class ShapeMismatchError(ArchiveError):
    """Declared tensor or topology shapes are inconsistent."""


class DanglingSkipError(ArchiveError):
    """A skip connection references a missing or later layer."""


class TruncatedBlobError(ArchiveError):
    """weights.bin is shorter than the manifest requires."""


@dataclass(frozen=True)
class UpsampleGrid:
    """Upsampling factor between camera and map pixels (nearest-neighbor)."""

    factor: int = 5
    interp: str = "nearest"

    def __post_init__(self) -> None:
        if self.factor < 1:
            raise ValueError(f"factor must be >= 1, got {self.factor}")
        if self.interp != "nearest":
            raise ValueError(f"only nearest-neighbor upsampling is supported, got {self.interp!r}")

    def up_px_nm(self, pixel_nm: float) -> float:
        return pixel_nm / self.factor


@dataclass
class TrainingPair:
    """x: upsampled degraded frame in [0, 1]; y: sparse location map."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.float32)
        if self.x.shape != self.y.shape:
            raise ValueError(f"x/y shape mismatch: {self.x.shape} vs {self.y.shape}")


@dataclass
class TrainingSet:
    pairs: List[TrainingPair]
    collisions: int
    factor: int
    pixel_nm: float
    # source material per clip, kept for closed-loop bookkeeping and
    # training-set evaluation; not part of the exported dataset
    stacks: List[FrameStack] = field(default_factory=list)
    gt_tables: List[EmitterTable] = field(default_factory=list)


@dataclass
class ConvLayer:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int]
    stride: int
    padding: int
    pad_mode: str
    weight: np.ndarray
    bias: np.ndarray
    kind: str = "conv"


@dataclass
class LeakyReluLayer:
    slope: float = 0.2
    kind: str = "leaky_relu"


@dataclass
class ReluLayer:
    kind: str = "relu"


@dataclass
class NnResizeLayer:
    factor: int = 2
    kind: str = "nn_resize"


@dataclass
class ConcatSkipLayer:
    source: int = 0
    kind: str = "concat_skip"


@dataclass
class NormAffineLayer:
    channels: int = 0
    scale: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    shift: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    kind: str = "norm_affine"


@dataclass
class ClampNonnegLayer:
    kind: str = "clamp_nonneg"


Layer = Union[
    ConvLayer, LeakyReluLayer, ReluLayer, NnResizeLayer, ConcatSkipLayer,
    NormAffineLayer, ClampNonnegLayer,
]


@dataclass
class WeightArchive:
    """Validated ordered layer list defining the generator."""

    layers: List[Layer]
    input_channels: int = 1
    train_size: Optional[int] = None

    @property
    def depth(self) -> int:
        return sum(1 for l in self.layers if isinstance(l, ConvLayer) and l.stride == 2)


def _read_tensor(blob: bytes, desc: dict, what: str) -> np.ndarray:
    try:
        offset = int(desc["offset"])
        shape = tuple(int(s) for s in desc["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ShapeMismatchError(f"{what}: malformed tensor descriptor: {exc}") from exc
    count = int(np.prod(shape)) if shape else 1
    if offset < 0 or offset + 4 * count > len(blob):
        raise TruncatedBlobError(
            f"{what}: needs {count} floats at offset {offset}, blob has {len(blob)} bytes"
        )
    return np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy()


def _validate_topology(archive: WeightArchive) -> None:
    """Channel/level bookkeeping plus the U-shape check."""
    channels = archive.input_channels
    level = 0
    history: List[Tuple[int, int]] = []  # (channels, level) of each layer output
    n_down = 0
    n_up = 0
    for i, layer in enumerate(archive.layers):
        if isinstance(layer, ConvLayer):
            if layer.stride not in (1, 2):
                raise ShapeMismatchError(f"layer {i}: unsupported stride {layer.stride}")
            if layer.in_channels != channels:
                raise ShapeMismatchError(
                    f"layer {i}: conv expects {layer.in_channels} channels, "
                    f"activation has {channels}"
                )
            expected = (layer.out_channels, layer.in_channels, *layer.kernel)
            if layer.weight.shape != expected:
                raise ShapeMismatchError(
                    f"layer {i}: weight shape {layer.weight.shape} != declared {expected}"
                )
            if layer.bias.shape != (layer.out_channels,):
                raise ShapeMismatchError(
                    f"layer {i}: bias shape {layer.bias.shape} != ({layer.out_channels},)"
                )
            channels = layer.out_channels
            if layer.stride == 2:
                level += 1
                n_down += 1
        elif isinstance(layer, NnResizeLayer):
            level -= 1
            n_up += 1
        elif isinstance(layer, ConcatSkipLayer):
            if not 0 <= layer.source < i:
                raise DanglingSkipError(
                    f"layer {i}: skip source {layer.source} is not an earlier layer"
                )
            src_channels, src_level = history[layer.source]
            if src_level != level:
                raise ShapeMismatchError(
                    f"layer {i}: skip source at level {src_level}, activation at {level}"
                )
            channels += src_channels
        elif isinstance(layer, NormAffineLayer):
            if layer.channels != channels:
                raise ShapeMismatchError(
                    f"layer {i}: norm_affine over {layer.channels} channels, "
                    f"activation has {channels}"
                )
            if layer.scale.shape != (channels,) or layer.shift.shape != (channels,):
                raise ShapeMismatchError(f"layer {i}: norm_affine tensor shape mismatch")
        history.append((channels, level))
    if n_down != n_up:
        raise ShapeMismatchError(
            f"unbalanced U topology: {n_down} stride-2 convs vs {n_up} resizes"
        )


def load_weights(path: Union[str, Path]) -> WeightArchive:
    """Load and validate manifest.json + weights.bin.

    ``path`` may be the archive directory or the manifest file itself.
    """
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise ArchiveError(f"manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    blob_name = manifest.get("weights", "weights.bin")
    blob_path = manifest_path.parent / blob_name
    if not blob_path.exists():
        raise ArchiveError(f"weight blob not found: {blob_path}")
    blob = blob_path.read_bytes()

    layers: List[Layer] = []
    for i, spec in enumerate(manifest.get("layers", [])):
        kind = spec.get("kind")
        what = f"layer {i} ({kind})"
        if kind == "conv":
            layers.append(
                ConvLayer(
                    in_channels=int(spec["in_channels"]),
                    out_channels=int(spec["out_channels"]),
                    kernel=tuple(int(k) for k in spec["kernel"]),
                    stride=int(spec.get("stride", 1)),
                    padding=int(spec.get("padding", 0)),
                    pad_mode=spec.get("pad_mode", "zeros"),
                    weight=_read_tensor(blob, spec["weight"], what),
                    bias=_read_tensor(blob, spec["bias"], what),
                )
            )
        elif kind == "leaky_relu":
            layers.append(LeakyReluLayer(slope=float(spec.get("slope", 0.2))))
        elif kind == "relu":
            layers.append(ReluLayer())
        elif kind == "nn_resize":
            layers.append(NnResizeLayer(factor=int(spec.get("factor", 2))))
        elif kind == "concat_skip":
            layers.append(ConcatSkipLayer(source=int(spec["source"])))
        elif kind == "norm_affine":
            layers.append(
                NormAffineLayer(
                    channels=int(spec["channels"]),
                    scale=_read_tensor(blob, spec["scale"], what),
                    shift=_read_tensor(blob, spec["shift"], what),
                )
            )
        elif kind == "clamp_nonneg":
            layers.append(ClampNonnegLayer())
        else:
            raise ArchiveError(f"layer {i}: unknown kind {kind!r}")
    archive = WeightArchive(
        layers=layers,
        input_channels=int(manifest.get("input_channels", 1)),
        train_size=(int(manifest["train_size"]) if "train_size" in manifest else None),
    )
    _validate_topology(archive)
    return archive


def save_weights(archive: WeightArchive, directory: Union[str, Path]) -> None:
    """Write manifest.json + weights.bin (sequential offsets)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = bytearray()

    def put(tensor: np.ndarray) -> dict:
        offset = len(blob)
        blob.extend(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
        return {"offset": offset, "shape": list(tensor.shape)}

    specs = []
    for layer in archive.layers:
        if isinstance(layer, ConvLayer):
            specs.append(
                {
                    "kind": "conv",
                    "in_channels": layer.in_channels,
                    "out_channels": layer.out_channels,
                    "kernel": list(layer.kernel),
                    "stride": layer.stride,
                    "padding": layer.padding,
                    "pad_mode": layer.pad_mode,
                    "weight": put(layer.weight),
                    "bias": put(layer.bias),
                }
            )
        elif isinstance(layer, LeakyReluLayer):
            specs.append({"kind": "leaky_relu", "slope": layer.slope})
        elif isinstance(layer, ReluLayer):
            specs.append({"kind": "relu"})
        elif isinstance(layer, NnResizeLayer):
            specs.append({"kind": "nn_resize", "factor": layer.factor})
        elif isinstance(layer, ConcatSkipLayer):
            specs.append({"kind": "concat_skip", "source": layer.source})
        elif isinstance(layer, NormAffineLayer):
            specs.append(
                {
                    "kind": "norm_affine",
                    "channels": layer.channels,
                    "scale": put(layer.scale),
                    "shift": put(layer.shift),
                }
            )
        elif isinstance(layer, ClampNonnegLayer):
            specs.append({"kind": "clamp_nonneg"})
        else:
            raise TypeError(f"unknown layer type {type(layer)!r}")
    manifest = {
        "kind": "cellstorm-weights",
        "version": 1,
        "input_channels": archive.input_channels,
        "weights": "weights.bin",
        "layers": specs,
    }
    if archive.train_size is not None:
        manifest["train_size"] = archive.train_size
    (directory / "weights.bin").write_bytes(bytes(blob))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _conv2d(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    kh, kw = layer.kernel
    p = layer.padding
    if p:
        mode = "edge" if layer.pad_mode == "replicate" else "constant"
        x = np.pad(x, ((0, 0), (p, p), (p, p)), mode=mode)
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))
    windows = windows[:, :: layer.stride, :: layer.stride]
    out = np.einsum(
        "chwij,ocij->ohw",
        windows.astype(np.float64),
        layer.weight.astype(np.float64),
        optimize=True,
    )
    return out + layer.bias.astype(np.float64)[:, None, None]


def infer(frame: np.ndarray, weights: WeightArchive) -> np.ndarray:
    """Deterministic forward pass of the generator on one 2-D map."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ValueError(f"expected a 2-D frame, got shape {frame.shape}")
    multiple = 1 << weights.depth
    h, w = frame.shape
    if h % multiple or w % multiple:
        raise ValueError(
            f"frame dims {h}x{w} must be divisible by {multiple} (2^depth)"
        )
    act = frame[None, :, :]
    outputs: List[np.ndarray] = []
    for layer in weights.layers:
        if isinstance(layer, ConvLayer):
            act = _conv2d(act, layer)
        elif isinstance(layer, LeakyReluLayer):
            act = np.where(act > 0, act, layer.slope * act)
        elif isinstance(layer, ReluLayer):
            act = np.maximum(act, 0.0)
        elif isinstance(layer, NnResizeLayer):
            act = np.repeat(np.repeat(act, layer.factor, axis=1), layer.factor, axis=2)
        elif isinstance(layer, ConcatSkipLayer):
            act = np.concatenate([act, outputs[layer.source]], axis=0)
        elif isinstance(layer, NormAffineLayer):
            act = act * layer.scale.astype(np.float64)[:, None, None] + layer.shift.astype(
                np.float64
            )[:, None, None]
        elif isinstance(layer, ClampNonnegLayer):
            act = np.maximum(act, 0.0)
        outputs.append(act)
    if act.shape[0] != 1:
        raise ShapeMismatchError(f"generator output has {act.shape[0]} channels, expected 1")
    return act[0]


def _extract_rows(map_: np.ndarray, threshold: float) -> Tuple[np.ndarray, np.ndarray]:
    """(n, 2) array of (row, col) peak indices and their values."""
    mask = strict_local_maxima(map_) & (map_ > threshold)
    peaks = np.argwhere(mask)
    return peaks, map_[mask]


def extract_table(
    map_: np.ndarray,
    grid: UpsampleGrid,
    pixel_nm: float,
    frame_index: int = 0,
) -> LocalizationTable:
    """Peaks above 0.3*max(map) converted to nm coordinates.

    A pixel qualifies when it exceeds the threshold and all 8 neighbors;
    coordinates are the centers of the upsampled pixels. An all-zero map
    yields no rows.
    """
    map_ = np.asarray(map_, dtype=np.float64)
    peak_max = float(map_.max()) if map_.size else 0.0
    if peak_max <= 0:
        return LocalizationTable.empty()
    peaks, values = _extract_rows(map_, EXTRACT_THRESHOLD * peak_max)
    up = grid.up_px_nm(pixel_nm)
    n = peaks.shape[0]
    return LocalizationTable(
        frame=np.full(n, frame_index, dtype=np.int64),
        x=(peaks[:, 1] + 0.5) * up,
        y=(peaks[:, 0] + 0.5) * up,
        sigma=np.full(n, np.nan),
        intensity=values,
    )


def upsample_frame(frame: np.ndarray, grid: UpsampleGrid, bit_depth: int) -> np.ndarray:
    """Normalize by the ADU range and nearest-neighbor upsample."""
    norm = frame.astype(np.float32) / float((1 << bit_depth) - 1)
    return np.repeat(np.repeat(norm, grid.factor, axis=0), grid.factor, axis=1)


def _pad_to_multiple(map_: np.ndarray, multiple: int) -> Tuple[np.ndarray, int, int]:
    h, w = map_.shape
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph or pw:
        map_ = np.pad(map_, ((0, ph), (0, pw)), mode="edge")
    return map_, h, w


def _tile_starts(total: int, tile: int) -> List[int]:
    if total <= tile:
        return [0]
    stride = max(tile - 2 * TILE_OVERLAP, 1)
    starts = list(range(0, total - tile, stride))
    starts.append(total - tile)
    return starts


def _ownership(starts: List[int], tile: int, total: int) -> List[Tuple[int, int]]:
    """Disjoint intervals covering [0, total), each >= TILE_OVERLAP inside its tile."""
    bounds = [0]
    for a, b in zip(starts[:-1], starts[1:]):
        bounds.append((b + a + tile) // 2)
    bounds.append(total)
    return list(zip(bounds[:-1], bounds[1:]))


def nn_localize_stack(
    stack: FrameStack,
    weights: WeightArchive,
    grid: UpsampleGrid,
    camera: Optional[CameraModel] = None,
) -> LocalizationTable:
    """Normalize, upsample, infer and extract every frame.

    Frames larger than the training size are processed as overlapping tiles
    and only detections from tile interiors are kept; the extraction
    threshold uses the per-frame maximum. ``camera`` is accepted for
    interface symmetry (normalization depends only on the stack bit depth).
    """
    del camera
    multiple = 1 << weights.depth
    tile = weights.train_size
    up = grid.up_px_nm(stack.pixel_nm)
    tables = []
    for t in range(stack.n_frames):
        upsampled = upsample_frame(stack.data[t], grid, stack.bit_depth)
        h_up, w_up = upsampled.shape
        if tile is None or (h_up <= tile and w_up <= tile):
            padded, h0, w0 = _pad_to_multiple(upsampled, multiple)
            out = infer(padded, weights)[:h0, :w0]
            table = extract_table(out, grid, stack.pixel_nm, frame_index=t)
            if len(table):
                tables.append(table)
            continue
        padded, h0, w0 = _pad_to_multiple(upsampled, multiple)
        ys = _tile_starts(padded.shape[0], tile)
        xs = _tile_starts(padded.shape[1], tile)
        own_y = _ownership(ys, tile, padded.shape[0])
        own_x = _ownership(xs, tile, padded.shape[1])
        maps = {}
        frame_max = 0.0
        for yi, y0 in enumerate(ys):
            for xi, x0 in enumerate(xs):
                out = infer(padded[y0 : y0 + tile, x0 : x0 + tile], weights)
                maps[yi, xi] = out
                oy = (own_y[yi][0] - y0, own_y[yi][1] - y0)
                ox = (own_x[xi][0] - x0, own_x[xi][1] - x0)
                owned = out[oy[0] : oy[1], ox[0] : ox[1]]
                if owned.size:
                    frame_max = max(frame_max, float(owned.max()))
        if frame_max <= 0:
            continue
        rows_r, rows_c, rows_v = [], [], []
        for (yi, xi), out in maps.items():
            peaks, values = _extract_rows(out, EXTRACT_THRESHOLD * frame_max)
            if peaks.size == 0:
                continue
            y0, x0 = ys[yi], xs[xi]
            rr = peaks[:, 0] + y0
            cc = peaks[:, 1] + x0
            keep = (
                (rr >= own_y[yi][0])
                & (rr < own_y[yi][1])
                & (cc >= own_x[xi][0])
                & (cc < own_x[xi][1])
                & (rr < h0)
                & (cc < w0)
            )
            rows_r.extend(rr[keep])
            rows_c.extend(cc[keep])
            rows_v.extend(values[keep])
        n = len(rows_r)
        if n:
            tables.append(
                LocalizationTable(
                    frame=np.full(n, t, dtype=np.int64),
                    x=(np.asarray(rows_c, dtype=np.float64) + 0.5) * up,
                    y=(np.asarray(rows_r, dtype=np.float64) + 0.5) * up,
                    sigma=np.full(n, np.nan),
                    intensity=rows_v,
                )
            )
    return LocalizationTable.concatenate(tables)


def _location_map(
    events: EmitterTable,
    shape: Tuple[int, int],
    grid: UpsampleGrid,
    pixel_nm: float,
    norm: float,
) -> Tuple[np.ndarray, int]:
    """Sparse map: floor(coord / up_px) pixels set to normalized brightness."""
    y_map = np.zeros(shape, dtype=np.float32)
    up = grid.up_px_nm(pixel_nm)
    collisions = 0
    for i in range(len(events)):
        col = int(events.x[i] // up)
        row = int(events.y[i] // up)
        if not (0 <= row < shape[0] and 0 <= col < shape[1]):
            continue
        value = np.float32(events.photons[i] / norm)
        if y_map[row, col] > 0:
            collisions += 1
            if value <= y_map[row, col]:
                continue
        y_map[row, col] = value
    return y_map, collisions


def make_pairs_simulated(
    scene: SimScene,
    blink: BlinkModel,
    psf: PsfModel,
    camera: CameraModel,
    codec: CodecConfig,
    n_frames: int,
    grid: UpsampleGrid,
    seed: int,
    clip_frames: int = 50,
) -> TrainingSet:
    """Simulated dataset: clips with quality drawn from U[80, 90] and a
    random block-grid offset; y maps built from the exact ground truth.

    Brightness is normalized by the clip's maximum ground-truth photons.
    Two emitters landing on one target pixel keep the brighter and count a
    collision.
    """
    import dataclasses

    pairs: List[TrainingPair] = []
    collisions = 0
    pixel_nm = None
    stacks: List[FrameStack] = []
    gt_tables: List[EmitterTable] = []
    n_clips = (n_frames + clip_frames - 1) // clip_frames
    for clip in range(n_clips):
        frames_here = min(clip_frames, n_frames - clip * clip_frames)
        rng = stream_rng(seed, STREAM_DATASET, clip)
        quality = float(rng.uniform(80.0, 90.0))
        clip_seed = int(rng.integers(0, 2**63 - 1))
        clip_codec = dataclasses.replace(
            codec, quality=quality, qp_override=None, grid_offset="random-per-stack"
        )
        stack, gt = simulate_stack(
            scene, blink, psf, camera, clip_codec, frames_here, clip_seed
        )
        pixel_nm = stack.pixel_nm
        stacks.append(stack)
        gt_tables.append(gt)
        norm = float(gt.photons.max()) if len(gt) else 1.0
        up_shape = (stack.height * grid.factor, stack.width * grid.factor)
        for t in range(stack.n_frames):
            x = upsample_frame(stack.data[t], grid, stack.bit_depth)
            y, c = _location_map(
                gt.rows_for_frame(t), up_shape, grid, stack.pixel_nm, norm
            )
            collisions += c
            pairs.append(TrainingPair(x=x, y=y))
    return TrainingSet(
        pairs=pairs,
        collisions=collisions,
        factor=grid.factor,
        pixel_nm=pixel_nm or 100.0,
        stacks=stacks,
        gt_tables=gt_tables,
    )


def make_pairs_from_localizations(
    stack: FrameStack,
    table: LocalizationTable,
    grid: UpsampleGrid,
    seed: int,
) -> TrainingSet:
    """Measured dataset: x from the stack, y from detections.

    Brightness is the fitted intensity normalized by the table maximum;
    the seed only shuffles pair order.
    """
    if len(table) == 0:
        raise ValueError("localization table is empty")
    if int(table.frame.max()) >= stack.n_frames:
        raise ValueError("table references frames beyond the stack")
    norm = float(np.nanmax(table.intensity))
    if not np.isfinite(norm) or norm <= 0:
        norm = 1.0
    up_shape = (stack.height * grid.factor, stack.width * grid.factor)
    pairs = []
    collisions = 0
    for t in range(stack.n_frames):
        x = upsample_frame(stack.data[t], grid, stack.bit_depth)
        rows = table.rows_for_frame(t)
        events = EmitterTable(
            frame=rows.frame,
            x=rows.x,
            y=rows.y,
            photons=np.where(np.isfinite(rows.intensity), rows.intensity, norm),
        ) if len(rows) else EmitterTable.empty()
        y, c = _location_map(events, up_shape, grid, stack.pixel_nm, norm)
        collisions += c
        pairs.append(TrainingPair(x=x, y=y))
    rng = stream_rng(seed, STREAM_DATASET)
    order = rng.permutation(len(pairs))
    pairs = [pairs[i] for i in order]
    return TrainingSet(
        pairs=pairs, collisions=collisions, factor=grid.factor, pixel_nm=stack.pixel_nm
    )


Y_EXPORT_SCALE = 65535


def export_pairs(dataset: TrainingSet, directory: Union[str, Path]) -> None:
    """Write the dataset as paired .cstk stacks plus a JSON manifest.

    x maps are stored as 12-bit ADU (lossless), y maps quantized to 16 bit.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not dataset.pairs:
        raise ValueError("dataset has no pairs")
    h, w = dataset.pairs[0].x.shape
    up_px = dataset.pixel_nm / dataset.factor
    x_data = np.stack(
        [np.rint(p.x * 4095.0).astype(np.uint16) for p in dataset.pairs]
    )
    y_data = np.stack(
        [
            np.rint(np.clip(p.y, 0.0, 1.0) * Y_EXPORT_SCALE).astype(np.uint16)
            for p in dataset.pairs
        ]
    )
    write_stack(
        FrameStack(w, h, len(dataset.pairs), up_px, 1.0, x_data, bit_depth=12),
        directory / "x.cstk",
    )
    write_stack(
        FrameStack(w, h, len(dataset.pairs), up_px, 1.0, y_data, bit_depth=16),
        directory / "y.cstk",
    )
    manifest = {
        "kind": "cellstorm-dataset",
        "version": 1,
        "n_pairs": len(dataset.pairs),
        "factor": dataset.factor,
        "pixel_nm": dataset.pixel_nm,
        "collisions": dataset.collisions,
        "x_stack": "x.cstk",
        "y_stack": "y.cstk",
        "x_scale": 4095,
        "y_scale": Y_EXPORT_SCALE,
    }
    (directory / "dataset.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_pairs(directory: Union[str, Path]) -> TrainingSet:
    """Inverse of export_pairs (y values quantized to 1/65535)."""
    directory = Path(directory)
    manifest = json.loads((directory / "dataset.json").read_text())
    xs = read_stack(directory / manifest["x_stack"])
    ys = read_stack(directory / manifest["y_stack"])
    pairs = [
        TrainingPair(
            x=xs.data[i].astype(np.float32) / float(manifest["x_scale"]),
            y=ys.data[i].astype(np.float32) / float(manifest["y_scale"]),
        )
        for i in range(manifest["n_pairs"])
    ]
    return TrainingSet(
        pairs=pairs,
        collisions=int(manifest["collisions"]),
        factor=int(manifest["factor"]),
        pixel_nm=float(manifest["pixel_nm"]),
    )
