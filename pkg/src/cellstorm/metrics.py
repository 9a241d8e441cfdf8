"""Quantitative evaluation: GT matching, sweep tables, rendering, FRC.

Matching follows the one-sided nearest-neighbor convention: every detection
is paired with its nearest ground-truth event of the same frame (ground
truth reusable) and counts as a match within the radius. Resolution is
estimated by Fourier ring correlation of two renders built from a seeded
random half-split of the localization table, with the community-standard
1/7 threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter1d
from scipy.spatial import cKDTree

from .formats import STREAM_SPLIT, EmitterTable, FrameStack, LocalizationTable, stream_rng

FRC_THRESHOLD = 1.0 / 7.0


@dataclass
class MatchReport:
    matched_count: int
    gt_count: int
    detected_count: int
    mean_distance_nm: float
    match_radius_nm: float
    distances: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def matched_fraction(self) -> float:
        return self.matched_count / self.gt_count if self.gt_count else 0.0


def match_to_gt(
    detections: LocalizationTable,
    gt: EmitterTable,
    radius_nm: float = 200.0,
    one_to_one: bool = False,
) -> MatchReport:
    """Nearest-neighbor matching per frame, aggregated across frames.

    With ``one_to_one=True`` a strict greedy assignment (ascending distance,
    each ground-truth event used once) replaces the reusable-GT convention.
    """
    distances: List[float] = []
    frames = np.unique(detections.frame) if len(detections) else np.zeros(0, dtype=np.int64)
    for t in frames:
        det = detections.rows_for_frame(int(t))
        ref = gt.rows_for_frame(int(t))
        if len(det) == 0 or len(ref) == 0:
            continue
        tree = cKDTree(np.column_stack([ref.x, ref.y]))
        d, idx = tree.query(np.column_stack([det.x, det.y]), k=1)
        if one_to_one:
            order = np.argsort(d, kind="stable")
            used = set()
            for i in order:
                if d[i] <= radius_nm and idx[i] not in used:
                    used.add(idx[i])
                    distances.append(float(d[i]))
        else:
            distances.extend(float(v) for v in d[d <= radius_nm])
    distances_arr = np.asarray(distances, dtype=np.float64)
    return MatchReport(
        matched_count=int(distances_arr.size),
        gt_count=len(gt),
        detected_count=len(detections),
        mean_distance_nm=float(distances_arr.mean()) if distances_arr.size else math.nan,
        match_radius_nm=radius_nm,
        distances=distances_arr,
    )


SWEEP_COLUMNS = (
    "method,photons,quality,gt_count,detected_count,matched_count,"
    "matched_fraction,mean_distance_nm"
)


@dataclass
class SweepReport:
    """Flat table over the photons x quality grid, one row per method/cell."""

    rows: List[dict]

    def to_csv(self) -> str:
        lines = [SWEEP_COLUMNS]
        for r in self.rows:
            mean = r["mean_distance_nm"]
            lines.append(
                f"{r['method']},{r['photons']},{r['quality']},{r['gt_count']},"
                f"{r['detected_count']},{r['matched_count']},"
                f"{r['matched_fraction']:.6f},"
                f"{'' if math.isnan(mean) else format(mean, '.3f')}"
            )
        return "\n".join(lines) + "\n"

    def series(self, method: str, quality) -> Tuple[List[float], List[float], List[float]]:
        """(photons, matched_fraction, mean_distance) at fixed quality."""
        rows = sorted(
            (r for r in self.rows if r["method"] == method and r["quality"] == quality),
            key=lambda r: r["photons"],
        )
        return (
            [r["photons"] for r in rows],
            [r["matched_fraction"] for r in rows],
            [r["mean_distance_nm"] for r in rows],
        )


def sweep_report(
    cells: Dict[Tuple[str, float, float], MatchReport],
    methods: Sequence[str],
    photons: Sequence[float],
    qualities: Sequence[float],
) -> SweepReport:
    """Assemble the grid into plot-ready rows; a missing cell is an error."""
    rows = []
    for method in methods:
        for p in photons:
            for q in qualities:
                if (method, p, q) not in cells:
                    raise KeyError(f"missing sweep cell {(method, p, q)!r}")
                rep = cells[(method, p, q)]
                rows.append(
                    {
                        "method": method,
                        "photons": p,
                        "quality": q,
                        "gt_count": rep.gt_count,
                        "detected_count": rep.detected_count,
                        "matched_count": rep.matched_count,
                        "matched_fraction": rep.matched_fraction,
                        "mean_distance_nm": rep.mean_distance_nm,
                    }
                )
    return SweepReport(rows=rows)


def render(
    table: LocalizationTable,
    render_px_nm: float = 10.0,
    blur_sigma_nm: Optional[float] = None,
    shape: Optional[Tuple[int, int]] = None,
) -> np.ndarray:
    """2-D histogram of (x, y) positions, optionally Gaussian-blurred.

    Without an explicit shape the canvas grows to cover all points, so the
    unblurred total mass equals the row count.
    """
    if shape is None:
        if len(table) == 0:
            return np.zeros((1, 1))
        ny = int(np.floor(table.y.max() / render_px_nm)) + 1
        nx = int(np.floor(table.x.max() / render_px_nm)) + 1
        shape = (ny, nx)
    ny, nx = shape
    img, _, _ = np.histogram2d(
        table.y,
        table.x,
        bins=(ny, nx),
        range=((0.0, ny * render_px_nm), (0.0, nx * render_px_nm)),
    )
    if blur_sigma_nm:
        img = gaussian_filter(img, blur_sigma_nm / render_px_nm)
    return img


def widefield(stack: FrameStack) -> np.ndarray:
    """Sum of all recorded frames (the widefield-equivalent image)."""
    return stack.data.astype(np.float64).sum(axis=0)


@dataclass
class FrcResult:
    ring_frequencies: np.ndarray
    correlation: np.ndarray
    resolution_nm: Optional[float]


def _ring_correlation(img1: np.ndarray, img2: np.ndarray) -> np.ndarray:
    f1 = np.fft.fft2(img1)
    f2 = np.fft.fft2(img2)
    n = img1.shape[0]
    k = np.fft.fftfreq(n) * n
    radius = np.rint(np.sqrt(k[:, None] ** 2 + k[None, :] ** 2)).astype(np.int64)
    n_rings = n // 2
    flat = radius.ravel()
    num = np.bincount(flat, weights=(f1 * np.conj(f2)).real.ravel(), minlength=n_rings)
    p1 = np.bincount(flat, weights=np.abs(f1.ravel()) ** 2, minlength=n_rings)
    p2 = np.bincount(flat, weights=np.abs(f2.ravel()) ** 2, minlength=n_rings)
    num = num[:n_rings]
    denom = np.sqrt(p1[:n_rings] * p2[:n_rings])
    out = np.zeros(n_rings)
    ok = denom > 0
    out[ok] = num[ok] / denom[ok]
    return out


def frc_curve(
    img1: np.ndarray,
    img2: np.ndarray,
    render_px_nm: float,
) -> FrcResult:
    """FRC of two same-shape square renders with 3-ring smoothing."""
    if img1.shape != img2.shape or img1.shape[0] != img1.shape[1]:
        raise ValueError("FRC requires two square images of equal shape")
    corr = _ring_correlation(img1, img2)
    smoothed = uniform_filter1d(corr, size=3, mode="nearest")
    n = img1.shape[0]
    freqs = np.arange(corr.size) / (n * render_px_nm)
    resolution = None
    below = np.flatnonzero(smoothed < FRC_THRESHOLD)
    below = below[below > 0]
    if below.size:
        i = int(below[0])
        f_lo, f_hi = freqs[i - 1], freqs[i]
        c_lo, c_hi = smoothed[i - 1], smoothed[i]
        if c_lo == c_hi:
            f_cross = f_hi
        else:
            f_cross = f_lo + (c_lo - FRC_THRESHOLD) * (f_hi - f_lo) / (c_lo - c_hi)
        if f_cross > 0:
            resolution = float(1.0 / f_cross)
    return FrcResult(ring_frequencies=freqs, correlation=smoothed, resolution_nm=resolution)


def frc(
    table: LocalizationTable,
    render_px_nm: float = 10.0,
    seed: int = 0,
) -> FrcResult:
    """Split the table into random halves, render and correlate.

    Random (seeded) splitting rather than odd/even frames avoids trivial
    correlation from emitters staying on across frames.
    """
    n = len(table)
    if n < 100:
        raise ValueError(f"need >= 100 localizations for FRC, got {n}")
    rng = stream_rng(seed, STREAM_SPLIT)
    perm = rng.permutation(n)
    half = n // 2
    side = int(max(np.floor(table.x.max() / render_px_nm), np.floor(table.y.max() / render_px_nm))) + 1
    side = max(side, 8)
    shape = (side, side)

    def pick(idx: np.ndarray) -> LocalizationTable:
        return LocalizationTable(
            frame=table.frame[idx],
            x=table.x[idx],
            y=table.y[idx],
            sigma=table.sigma[idx],
            intensity=table.intensity[idx],
        )

    img1 = render(pick(perm[:half]), render_px_nm, shape=shape)
    img2 = render(pick(perm[half:]), render_px_nm, shape=shape)
    return frc_curve(img1, img2, render_px_nm)


def write_pgm(image: np.ndarray, path: Union[str, Path]) -> None:
    """16-bit binary PGM (big-endian sample bytes, per the format)."""
    img = np.asarray(image)
    if img.dtype != np.uint16:
        raise ValueError("write_pgm expects a uint16 image")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(img.astype(">u2").tobytes())


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        w, h = (int(v) for v in fh.readline().split())
        maxval = int(fh.readline())
        dtype = ">u2" if maxval > 255 else np.uint8
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h)
    return data.reshape(h, w).astype(np.uint16)
