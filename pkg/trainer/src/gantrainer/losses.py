"""Hybrid objective: adversarial term + PSF-smoothed L1 + sparsity L1.

The adversarial weight follows the warm-up schedule: zero for the first
``warmup_iters`` iterations, afterwards active only on every
``cgan_every``-th iteration. L1 norms are sums over pixels, averaged over
the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossConfig:
    lambda_cgan: float = 3.0
    lambda_l1: float = 100.0
    lambda_l1s: float = 100.0
    psf_sigma_px: float = 1.0
    warmup_iters: int = 1000
    cgan_every: int = 3

    def __post_init__(self) -> None:
        if min(self.lambda_cgan, self.lambda_l1, self.lambda_l1s) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class LossParts:
    cgan: torch.Tensor
    l1_psf: torch.Tensor
    l1_sparse: torch.Tensor
    lambda_cgan_eff: float
    total: torch.Tensor


def effective_lambda_cgan(cfg: LossConfig, iteration: int) -> float:
    """0 during warm-up and off-schedule iterations, else lambda_cgan."""
    if iteration < cfg.warmup_iters or iteration % cfg.cgan_every != 0:
        return 0.0
    return cfg.lambda_cgan


def gaussian_kernel(sigma_px: float) -> torch.Tensor:
    """Unit-peak 2-D Gaussian; sigma <= 0 degenerates to the identity.

    Peak (not mass) normalization keeps a matched prediction strictly
    cheaper than predicting zeros once the sparsity term is added.
    """
    if sigma_px <= 0:
        return torch.ones(1, 1, 1, 1)
    radius = max(1, int(math.ceil(3.0 * sigma_px)))
    coords = torch.arange(-radius, radius + 1, dtype=torch.float32)
    g = torch.exp(-0.5 * (coords / sigma_px) ** 2)
    k = torch.outer(g, g)
    return k.reshape(1, 1, 2 * radius + 1, 2 * radius + 1)


def psf_blur(maps: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    pad = kernel.shape[-1] // 2
    return F.conv2d(maps, kernel, padding=pad)


def _batch_l1(t: torch.Tensor) -> torch.Tensor:
    """Sum of |.| per sample, mean over the batch."""
    return t.abs().sum(dim=(1, 2, 3)).mean()


def loss_components(
    g_out: torch.Tensor,
    y: torch.Tensor,
    d_logits_fake: Optional[torch.Tensor],
    cfg: LossConfig,
    iteration: int,
    kernel: Optional[torch.Tensor] = None,
) -> LossParts:
    """Generator objective pieces from precomputed G(x) and D(x, G(x))."""
    if g_out.shape != y.shape:
        raise ValueError(f"shape mismatch: G(x) {tuple(g_out.shape)} vs y {tuple(y.shape)}")
    if kernel is None:
        kernel = gaussian_kernel(cfg.psf_sigma_px)
    kernel = kernel.to(g_out.device, g_out.dtype)
    lam = effective_lambda_cgan(cfg, iteration)
    if d_logits_fake is not None:
        cgan = F.binary_cross_entropy_with_logits(
            d_logits_fake, torch.ones_like(d_logits_fake)
        )
    else:
        cgan = torch.zeros((), device=g_out.device, dtype=g_out.dtype)
    l1_psf = cfg.lambda_l1 * _batch_l1(psf_blur(y, kernel) - psf_blur(g_out, kernel))
    l1_sparse = cfg.lambda_l1s * _batch_l1(g_out)
    total = lam * cgan + l1_psf + l1_sparse
    return LossParts(
        cgan=cgan, l1_psf=l1_psf, l1_sparse=l1_sparse, lambda_cgan_eff=lam, total=total
    )


def loss_total(
    x: torch.Tensor,
    y: torch.Tensor,
    generator: torch.nn.Module,
    discriminator: torch.nn.Module,
    cfg: LossConfig,
    iteration: int,
) -> LossParts:
    """Full generator objective on a batch (runs G and D)."""
    g_out = generator(x)
    d_logits = discriminator(x, g_out) if discriminator is not None else None
    return loss_components(g_out, y, d_logits, cfg, iteration)


def discriminator_loss(
    discriminator: torch.nn.Module,
    x: torch.Tensor,
    y: torch.Tensor,
    g_out: torch.Tensor,
) -> torch.Tensor:
    """Standard real/fake BCE, halved."""
    real = discriminator(x, y)
    fake = discriminator(x, g_out.detach())
    loss_real = F.binary_cross_entropy_with_logits(real, torch.ones_like(real))
    loss_fake = F.binary_cross_entropy_with_logits(fake, torch.zeros_like(fake))
    return 0.5 * (loss_real + loss_fake)
