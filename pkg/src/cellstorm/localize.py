"""Classical localization: band-pass detection plus integrated-Gaussian fitting.

Candidates are strict 8-neighborhood maxima of a difference-of-Gaussians
filtered frame above a robust threshold. Each candidate ROI is fitted with
a damped (Levenberg-Marquardt) least-squares integrated Gaussian in photon
units; converged fits are accepted on amplitude and width criteria.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter
from scipy.special import erf

from .camera import CameraModel
from .formats import FrameStack, LocalizationTable

logger = logging.getLogger(__name__)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class LocalizerConfig:
    filter_sigmas: Tuple[float, float] = (1.0, 2.0)
    threshold_k: float = 3.0
    roi_radius: int = 3
    max_iters: int = 50
    converge_tol: float = 1e-6
    min_photons: float = 30.0

    def __post_init__(self) -> None:
        s1, s2 = self.filter_sigmas
        if not 0 < s1 < s2:
            raise ValueError(f"need sigma2 > sigma1 > 0, got {self.filter_sigmas}")
        if self.roi_radius < 2:
            raise ValueError(f"roi_radius must be >= 2, got {self.roi_radius}")


def strict_local_maxima(img: np.ndarray) -> np.ndarray:
    """Boolean mask of pixels strictly greater than all 8 neighbors."""
    footprint = np.ones((3, 3), dtype=bool)
    footprint[1, 1] = False
    neighbor_max = maximum_filter(img, footprint=footprint, mode="constant", cval=-np.inf)
    return img > neighbor_max


def detect_candidates(frame: np.ndarray, cfg: LocalizerConfig) -> np.ndarray:
    """Peak pixels as an (n, 2) array of (row, col), brightest first.

    Peaks closer than roi_radius to a brighter peak are suppressed.
    """
    f = np.asarray(frame, dtype=np.float64)
    s1, s2 = cfg.filter_sigmas
    dog = gaussian_filter(f, s1) - gaussian_filter(f, s2)
    threshold = cfg.threshold_k * dog.std()
    mask = strict_local_maxima(dog) & (dog > threshold)
    peaks = np.argwhere(mask)
    if peaks.shape[0] == 0:
        return peaks.reshape(0, 2)
    values = dog[peaks[:, 0], peaks[:, 1]]
    order = np.argsort(-values, kind="stable")
    peaks = peaks[order]
    kept: list[np.ndarray] = []
    for p in peaks:
        if all(np.hypot(*(p - q)) >= cfg.roi_radius for q in kept):
            kept.append(p)
    return np.asarray(kept, dtype=np.int64)


@dataclass
class FitResult:
    x_nm: float
    y_nm: float
    sigma_nm: float
    photons: float
    background: float


def _model_and_jacobian(theta: np.ndarray, r: int):
    """Integrated-Gaussian ROI model b + A*Ex*Ey and its 5-column Jacobian."""
    x0, y0, sigma, amp, bg = theta
    size = 2 * r + 1
    edges = np.arange(size + 1, dtype=np.float64)
    tx = (edges - x0) / sigma
    ty = (edges - y0) / sigma
    phix = 0.5 * (1.0 + erf(tx / _SQRT2))
    phiy = 0.5 * (1.0 + erf(ty / _SQRT2))
    ex = np.diff(phix)
    ey = np.diff(phiy)
    pdfx = _INV_SQRT2PI * np.exp(-0.5 * tx**2)
    pdfy = _INV_SQRT2PI * np.exp(-0.5 * ty**2)
    dex_dx0 = -(np.diff(pdfx)) / sigma
    dey_dy0 = -(np.diff(pdfy)) / sigma
    dex_ds = -(np.diff(tx * pdfx)) / sigma
    dey_ds = -(np.diff(ty * pdfy)) / sigma

    model = bg + amp * np.outer(ey, ex)
    jac = np.empty((size * size, 5))
    jac[:, 0] = (amp * np.outer(ey, dex_dx0)).ravel()
    jac[:, 1] = (amp * np.outer(dey_dy0, ex)).ravel()
    jac[:, 2] = (amp * (np.outer(dey_ds, ex) + np.outer(ey, dex_ds))).ravel()
    jac[:, 3] = np.outer(ey, ex).ravel()
    jac[:, 4] = 1.0
    return model.ravel(), jac


def fit_gaussian(
    frame: np.ndarray,
    peak: Tuple[int, int],
    cfg: LocalizerConfig,
    camera: CameraModel,
    pixel_nm: float,
) -> Optional[FitResult]:
    """Fit one candidate; returns None when the fit is rejected.

    Rejections: peak too close to the border, singular normal equations,
    no convergence within max_iters, amplitude below min_photons, or width
    outside [0.5, 4] x initial sigma.
    """
    r = cfg.roi_radius
    pr, pc = int(peak[0]), int(peak[1])
    h, w = frame.shape
    if pr < r or pc < r or pr >= h - r or pc >= w - r:
        return None
    roi_adu = np.asarray(frame[pr - r : pr + r + 1, pc - r : pc + r + 1], dtype=np.float64)
    roi = (roi_adu - camera.offset) * camera.gain / camera.qe
    target = roi.ravel()

    sigma0 = cfg.filter_sigmas[0]
    bg0 = float(roi.min())
    weights = np.clip(roi - bg0, 0.0, None)
    total = float(weights.sum())
    centers = np.arange(2 * r + 1, dtype=np.float64) + 0.5
    if total > 0:
        x0 = float((weights.sum(axis=0) * centers).sum() / total)
        y0 = float((weights.sum(axis=1) * centers).sum() / total)
    else:
        x0 = y0 = r + 0.5
    theta = np.array([x0, y0, sigma0, max(total, 1e-3), bg0])

    lam = 1e-3
    model, jac = _model_and_jacobian(theta, r)
    residual = model - target
    cost = float(residual @ residual)
    converged = False
    for _ in range(cfg.max_iters):
        jtj = jac.T @ jac
        jtr = jac.T @ residual
        damped = jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-12))
        try:
            delta = np.linalg.solve(damped, -jtr)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(delta)):
            return None
        trial = theta + delta
        trial[2] = max(trial[2], 1e-3)
        trial_model, trial_jac = _model_and_jacobian(trial, r)
        trial_residual = trial_model - target
        trial_cost = float(trial_residual @ trial_residual)
        if trial_cost < cost:
            # unit scale floor keeps near-zero parameters (background) from
            # masking convergence
            rel_change = float(np.max(np.abs(delta) / np.maximum(np.abs(theta), 1.0)))
            theta, model, jac = trial, trial_model, trial_jac
            residual, cost = trial_residual, trial_cost
            lam = max(lam / 10.0, 1e-12)
            if rel_change < cfg.converge_tol:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                break
    if not converged:
        return None
    x0, y0, sigma, amp, bg = theta
    if amp < cfg.min_photons:
        return None
    if not (0.5 * sigma0 <= sigma <= 4.0 * sigma0):
        return None
    return FitResult(
        x_nm=(pc - r + x0) * pixel_nm,
        y_nm=(pr - r + y0) * pixel_nm,
        sigma_nm=sigma * pixel_nm,
        photons=float(amp),
        background=float(bg),
    )


def localize_frame(
    frame: np.ndarray,
    cfg: LocalizerConfig,
    camera: CameraModel,
    pixel_nm: float,
    frame_index: int,
) -> LocalizationTable:
    rows_frame, xs, ys, sigmas, intensities, bgs = [], [], [], [], [], []
    rejected = 0
    for peak in detect_candidates(frame, cfg):
        fit = fit_gaussian(frame, peak, cfg, camera, pixel_nm)
        if fit is None:
            rejected += 1  # counted, never fatal
            continue
        rows_frame.append(frame_index)
        xs.append(fit.x_nm)
        ys.append(fit.y_nm)
        sigmas.append(fit.sigma_nm)
        intensities.append(fit.photons)
        bgs.append(fit.background)
    if rejected:
        logger.debug("frame %d: %d candidates rejected during fitting", frame_index, rejected)
    return LocalizationTable(
        frame=np.asarray(rows_frame, dtype=np.int64),
        x=xs,
        y=ys,
        sigma=sigmas,
        intensity=intensities,
        background=np.asarray(bgs, dtype=np.float64),
    )


def localize_stack(
    stack: FrameStack,
    cfg: LocalizerConfig,
    camera: CameraModel,
    threads: int = 1,
) -> LocalizationTable:
    """Detect + fit every frame; concatenation is deterministic."""
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            tables = list(
                pool.map(
                    lambda t: localize_frame(
                        stack.data[t].astype(np.float64), cfg, camera, stack.pixel_nm, t
                    ),
                    range(stack.n_frames),
                )
            )
    else:
        tables = [
            localize_frame(stack.data[t].astype(np.float64), cfg, camera, stack.pixel_nm, t)
            for t in range(stack.n_frames)
        ]
    return LocalizationTable.concatenate([t for t in tables if len(t)])
