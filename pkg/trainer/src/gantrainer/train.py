"""Alternating generator/discriminator training with loss logging.

The generator always minimizes the PSF-smoothed L1 + sparsity terms; the
adversarial term joins per the warm-up schedule. A non-finite loss aborts
with a state dump. The trained generator is exported as a portable weight
archive; per-iteration loss components go to a CSV.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import torch

from .data import PairDataset
from .export import export_generator
from .losses import (
    LossConfig,
    discriminator_loss,
    effective_lambda_cgan,
    gaussian_kernel,
    loss_components,
)
from .model import PatchDiscriminator, PlanNet, build_generator


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.25
    batch_size: int = 4
    epochs: int = 10
    first_layer_filters: int = 32
    depth: int = 3
    dropout_layers: int = 0
    iterations: Optional[int] = None  # overrides epochs when set

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("hyperparameters must be positive")


@dataclass
class TrainResult:
    archive_dir: Path
    loss_csv: Path
    history: List[dict]


def _dump_state(generator, discriminator, out_dir: Path, history: List[dict]) -> Path:
    dump = out_dir / "diverged_state.pt"
    torch.save(
        {
            "generator": generator.state_dict(),
            "discriminator": discriminator.state_dict(),
        },
        dump,
    )
    (out_dir / "diverged_history.json").write_text(json.dumps(history[-50:], indent=2))
    return dump


def train(
    dataset: PairDataset,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    seed: int,
    out_dir: Union[str, Path],
    generator: Optional[PlanNet] = None,
) -> TrainResult:
    """Train on the pair dataset and export the generator.

    The exported archive records the pair size as train_size so inference
    can tile larger frames.
    """
    if len(dataset) < 100:
        raise ValueError(f"need >= 100 pairs, got {len(dataset)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(seed)
    order_rng = np.random.default_rng(seed)

    if generator is None:
        generator = build_generator(
            depth=train_cfg.depth,
            first_filters=train_cfg.first_layer_filters,
            dropout_layers=train_cfg.dropout_layers,
        )
    discriminator = PatchDiscriminator(first_filters=train_cfg.first_layer_filters)
    opt_g = torch.optim.Adam(
        generator.parameters(), lr=train_cfg.learning_rate, betas=(train_cfg.adam_beta1, 0.999)
    )
    opt_d = torch.optim.Adam(
        discriminator.parameters(), lr=train_cfg.learning_rate, betas=(train_cfg.adam_beta1, 0.999)
    )
    kernel = gaussian_kernel(loss_cfg.psf_sigma_px)

    n = len(dataset)
    per_epoch = (n + train_cfg.batch_size - 1) // train_cfg.batch_size
    total_iters = (
        train_cfg.iterations if train_cfg.iterations is not None else train_cfg.epochs * per_epoch
    )

    history: List[dict] = []
    loss_csv = out_dir / "loss.csv"
    generator.train()
    discriminator.train()
    with open(loss_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iteration", "lambda_cgan_eff", "cgan", "l1_psf", "l1_sparse", "g_total", "d_loss"]
        )
        iteration = 0
        while iteration < total_iters:
            epoch_order = order_rng.permutation(n)
            for start in range(0, n, train_cfg.batch_size):
                if iteration >= total_iters:
                    break
                idx = epoch_order[start : start + train_cfg.batch_size]
                x = torch.from_numpy(dataset.x[idx]).unsqueeze(1)
                y = torch.from_numpy(dataset.y[idx]).unsqueeze(1)

                g_out = generator(x)
                lam = effective_lambda_cgan(loss_cfg, iteration)

                d_loss_val = float("nan")
                if lam > 0:
                    opt_d.zero_grad()
                    d_loss = discriminator_loss(discriminator, x, y, g_out)
                    d_loss.backward()
                    opt_d.step()
                    d_loss_val = float(d_loss.detach())

                d_logits = discriminator(x, g_out) if lam > 0 else None
                parts = loss_components(g_out, y, d_logits, loss_cfg, iteration, kernel)
                opt_g.zero_grad()
                parts.total.backward()
                opt_g.step()

                row = {
                    "iteration": iteration,
                    "lambda_cgan_eff": parts.lambda_cgan_eff,
                    "cgan": float(parts.cgan.detach()),
                    "l1_psf": float(parts.l1_psf.detach()),
                    "l1_sparse": float(parts.l1_sparse.detach()),
                    "g_total": float(parts.total.detach()),
                    "d_loss": d_loss_val,
                }
                history.append(row)
                writer.writerow([row[k] for k in row])
                if not np.isfinite(row["g_total"]):
                    dump = _dump_state(generator, discriminator, out_dir, history)
                    raise TrainingDivergedError(
                        f"non-finite loss at iteration {iteration}; state dumped to {dump}"
                    )
                iteration += 1

    _recalibrate_norm_stats(generator, dataset, train_cfg.batch_size, order_rng)
    generator.eval()
    archive_dir = out_dir / "weights"
    export_generator(
        generator, archive_dir, train_size=int(dataset.x.shape[1]), input_channels=1
    )
    return TrainResult(archive_dir=archive_dir, loss_csv=loss_csv, history=history)


def _recalibrate_norm_stats(
    generator: PlanNet, dataset: PairDataset, batch_size: int, rng, batches: int = 50
) -> None:
    """Replace momentum-lagged norm running stats with a cumulative average
    measured on the final model, so the exported inference statistics match
    what the trained network actually produces."""
    norms = [m for m in generator.modules() if isinstance(m, torch.nn.BatchNorm2d)]
    if not norms:
        return
    generator.train()
    with torch.no_grad():
        for m in norms:
            m.reset_running_stats()
            m.momentum = None
        for _ in range(batches):
            idx = rng.integers(0, len(dataset), batch_size)
            generator(torch.from_numpy(dataset.x[idx]).unsqueeze(1))
