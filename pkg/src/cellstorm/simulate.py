"""Ground-truth blinking emitters and ideal photon-map rendering.

Sites are placed on a chosen structure at a fixed areal density, blink with
a memoryless two-state model (geometric on-times) and emit Poisson photons
while on. Rendering integrates a 2-D Gaussian PSF over each pixel area with
the difference-of-error-function formulation, truncated at a configurable
radius.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import erf

from .camera import CameraModel, apply_camera
from .formats import STREAM_BLINK, EmitterTable, FrameStack, stream_rng

_SQRT2 = float(np.sqrt(2.0))


@dataclass(frozen=True)
class SimScene:
    """Field geometry and emitter-site support.

    structure is one of "uniform-random", "line-set" or "bitmap-mask";
    density is emitter sites per um^2. background_photons adds a uniform
    expected level to every rendered frame.
    """

    fov_um: float = 10.0
    structure: str = "uniform-random"
    density: float = 6.0
    mask: Optional[np.ndarray] = None
    n_lines: int = 10
    background_photons: float = 0.0

    def __post_init__(self) -> None:
        if self.fov_um <= 0:
            raise ValueError(f"fov_um must be > 0, got {self.fov_um}")
        if self.density <= 0:
            raise ValueError(f"density must be > 0, got {self.density}")
        if self.structure not in ("uniform-random", "line-set", "bitmap-mask"):
            raise ValueError(f"unknown structure {self.structure!r}")
        if self.structure == "bitmap-mask" and self.mask is None:
            raise ValueError("bitmap-mask structure requires a mask")


@dataclass(frozen=True)
class BlinkModel:
    """Two-state blinking: activation probability, mean on-time, brightness."""

    p_on: float = 0.005
    mean_on_frames: float = 1.0
    photons: float = 1000.0

    def __post_init__(self) -> None:
        if not 0 <= self.p_on <= 1:
            raise ValueError(f"p_on must be in [0, 1], got {self.p_on}")
        if self.mean_on_frames < 1:
            raise ValueError(f"mean_on_frames must be >= 1, got {self.mean_on_frames}")
        if self.photons <= 0:
            raise ValueError(f"photons must be > 0, got {self.photons}")


@dataclass(frozen=True)
class PsfModel:
    """Integrated Gaussian PSF; truncation defaults to 4 sigma (in pixels)."""

    sigma_nm: float = 130.0
    truncation_radius: Optional[float] = None

    def __post_init__(self) -> None:
        if self.sigma_nm <= 0:
            raise ValueError(f"sigma_nm must be > 0, got {self.sigma_nm}")

    def radius_px(self, pixel_nm: float) -> float:
        if self.truncation_radius is not None:
            return self.truncation_radius
        return 4.0 * self.sigma_nm / pixel_nm


def frame_shape(scene: SimScene, pixel_nm: float) -> Tuple[int, int]:
    """(width, height) in pixels for a square field of view."""
    side = int(round(scene.fov_um * 1000.0 / pixel_nm))
    if side < 1:
        raise ValueError("field of view smaller than one pixel")
    return side, side


def _place_sites(scene: SimScene, w_nm: float, h_nm: float, n_sites: int, rng) -> np.ndarray:
    if scene.structure == "uniform-random":
        return rng.uniform([0.0, 0.0], [w_nm, h_nm], size=(n_sites, 2))
    if scene.structure == "line-set":
        p0 = rng.uniform([0.0, 0.0], [w_nm, h_nm], size=(scene.n_lines, 2))
        p1 = rng.uniform([0.0, 0.0], [w_nm, h_nm], size=(scene.n_lines, 2))
        lengths = np.linalg.norm(p1 - p0, axis=1)
        weights = lengths / lengths.sum() if lengths.sum() > 0 else None
        which = rng.choice(scene.n_lines, size=n_sites, p=weights)
        t = rng.uniform(0.0, 1.0, size=n_sites)
        return p0[which] + t[:, None] * (p1[which] - p0[which])
    mask = np.asarray(scene.mask)
    nz = np.argwhere(mask > 0)
    if nz.shape[0] == 0:
        raise ValueError("bitmap mask has no nonzero pixels")
    mh, mw = mask.shape
    cell_w = w_nm / mw
    cell_h = h_nm / mh
    picks = nz[rng.integers(0, nz.shape[0], size=n_sites)]
    offsets = rng.uniform(0.0, 1.0, size=(n_sites, 2))
    xs = (picks[:, 1] + offsets[:, 0]) * cell_w
    ys = (picks[:, 0] + offsets[:, 1]) * cell_h
    return np.column_stack([xs, ys])


def generate_ground_truth(
    scene: SimScene,
    blink: BlinkModel,
    n_frames: int,
    seed: int,
    pixel_nm: float = 100.0,
) -> EmitterTable:
    """Simulate site placement and blinking; one row per (site, on-frame).

    The field is snapped to whole pixels so coordinates always lie inside
    [0, width*pixel_nm) x [0, height*pixel_nm). Realized photons are Poisson
    around the model brightness; zero-photon draws emit nothing.
    """
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    width, height = frame_shape(scene, pixel_nm)
    w_nm = width * pixel_nm
    h_nm = height * pixel_nm
    area_um2 = (w_nm / 1000.0) * (h_nm / 1000.0)
    n_sites = int(round(scene.density * area_um2))

    rng = stream_rng(seed, STREAM_BLINK)
    sites = _place_sites(scene, w_nm, h_nm, n_sites, rng)
    # uniform draws can hit the inclusive upper edge in float; fold it back
    sites[:, 0] = np.minimum(sites[:, 0], np.nextafter(w_nm, 0.0))
    sites[:, 1] = np.minimum(sites[:, 1], np.nextafter(h_nm, 0.0))

    stay = 1.0 - 1.0 / blink.mean_on_frames
    on = np.zeros(n_sites, dtype=bool)
    frames, xs, ys, photons, ids = [], [], [], [], []
    for t in range(n_frames):
        activate = rng.random(n_sites) < blink.p_on
        keep_on = rng.random(n_sites) < stay
        on = (~on & activate) | (on & keep_on)
        idx = np.flatnonzero(on)
        if idx.size == 0:
            continue
        realized = rng.poisson(blink.photons, size=idx.size)
        emitting = realized > 0
        idx = idx[emitting]
        frames.append(np.full(idx.size, t, dtype=np.int64))
        xs.append(sites[idx, 0])
        ys.append(sites[idx, 1])
        photons.append(realized[emitting].astype(np.float64))
        ids.append(idx.astype(np.int64))
    if not frames:
        return EmitterTable.empty()
    return EmitterTable(
        frame=np.concatenate(frames),
        x=np.concatenate(xs),
        y=np.concatenate(ys),
        photons=np.concatenate(photons),
        id=np.concatenate(ids),
    )


def render_photon_map(
    events: EmitterTable,
    psf: PsfModel,
    width: int,
    height: int,
    pixel_nm: float,
) -> np.ndarray:
    """Expected photons per pixel for the events of a single frame.

    Each emitter deposits photons * [integrated Gaussian over the pixel
    area], computed with error-function differences and truncated at the
    PSF truncation radius.
    """
    if len(events) and np.unique(events.frame).size > 1:
        raise ValueError("render_photon_map expects events of a single frame")
    out = np.zeros((height, width), dtype=np.float64)
    sigma_px = psf.sigma_nm / pixel_nm
    radius = psf.radius_px(pixel_nm)
    denom = sigma_px * _SQRT2
    for i in range(len(events)):
        cx = events.x[i] / pixel_nm
        cy = events.y[i] / pixel_nm
        ix0 = max(0, int(np.floor(cx - radius)))
        ix1 = min(width, int(np.ceil(cx + radius)))
        iy0 = max(0, int(np.floor(cy - radius)))
        iy1 = min(height, int(np.ceil(cy + radius)))
        if ix0 >= ix1 or iy0 >= iy1:
            continue
        gx = np.arange(ix0, ix1 + 1, dtype=np.float64)
        gy = np.arange(iy0, iy1 + 1, dtype=np.float64)
        ex = 0.5 * np.diff(erf((gx - cx) / denom))
        ey = 0.5 * np.diff(erf((gy - cy) / denom))
        out[iy0:iy1, ix0:ix1] += events.photons[i] * np.outer(ey, ex)
    return out


def simulate_stack(
    scene: SimScene,
    blink: BlinkModel,
    psf: PsfModel,
    camera: CameraModel,
    codec,
    n_frames: int,
    seed: int,
    pixel_nm: float = 100.0,
    fps: float = 20.0,
) -> Tuple[FrameStack, EmitterTable]:
    """Full chain: ground truth -> PSF rendering -> camera -> optional codec.

    Returns the degraded stack together with the exact ground truth used.
    Passing ``codec=None`` skips the compression stage.
    """
    from .codec import transcode_stack  # local import to avoid a cycle

    width, height = frame_shape(scene, pixel_nm)
    gt = generate_ground_truth(scene, blink, n_frames, seed, pixel_nm=pixel_nm)
    frames = np.empty((n_frames, height, width), dtype=np.uint16)
    for t in range(n_frames):
        events = gt.rows_for_frame(t)
        photon_map = render_photon_map(events, psf, width, height, pixel_nm)
        if scene.background_photons:
            photon_map = photon_map + scene.background_photons
        frames[t] = apply_camera(photon_map, camera, t, seed, fps=fps)
    stack = FrameStack(
        width=width,
        height=height,
        n_frames=n_frames,
        pixel_nm=pixel_nm,
        fps=fps,
        data=frames,
        bit_depth=camera.bit_depth,
    )
    if codec is not None:
        stack = transcode_stack(stack, codec, seed)
    return stack, gt
