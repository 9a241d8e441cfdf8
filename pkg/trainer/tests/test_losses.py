"""Loss arithmetic against hand-computed oracles, plus export round trips.

The secondary acceptance prints one line per criterion; run with -s.
"""

import numpy as np
import pytest
import torch

from gantrainer import (
    LossConfig,
    PatchDiscriminator,
    build_generator,
    discriminator_loss,
    effective_lambda_cgan,
    export_generator,
    fold_batchnorm,
    gaussian_kernel,
    loss_components,
    loss_total,
)


def report(criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    print(line)
    assert ok, line


def unit_pixel_map(row, col, value=1.0):
    t = torch.zeros(1, 1, 4, 4)
    t[0, 0, row, col] = value
    return t


def test_criterion_7_loss_arithmetic_and_schedule():
    cfg = LossConfig(psf_sigma_px=0.0)  # identity kernel
    y = unit_pixel_map(1, 1)
    g_out = unit_pixel_map(2, 3)

    parts = loss_components(g_out, y, None, cfg, iteration=0)
    # identity kernel: l1_psf = 100 * sum|y - g| = 100 * 2; l1_sparse = 100 * 1
    psf_ok = float(parts.l1_psf) == pytest.approx(200.0)
    sparse_ok = float(parts.l1_sparse) == pytest.approx(100.0)

    perfect = loss_components(y.clone(), y, None, cfg, iteration=0)
    perfect_ok = float(perfect.l1_psf) == 0.0 and float(perfect.l1_sparse) == pytest.approx(100.0)

    schedule = [effective_lambda_cgan(cfg, i) for i in range(1200)]
    schedule_ok = (
        all(v == 0.0 for v in schedule[:1000])
        and schedule[999] == 0.0
        and schedule[1002] == 3.0
        and all(
            (v == 3.0) == (i >= 1000 and i % 3 == 0)
            for i, v in enumerate(schedule)
        )
    )

    total_ok = float(parts.total) == pytest.approx(
        parts.lambda_cgan_eff * float(parts.cgan)
        + float(parts.l1_psf)
        + float(parts.l1_sparse)
    )
    report(
        7,
        psf_ok and sparse_ok and perfect_ok and schedule_ok and total_ok,
        f"toy l1_psf=200: {psf_ok}; toy l1_sparse=100: {sparse_ok}; "
        f"perfect prediction zeroes l1_psf: {perfect_ok}; "
        f"warm-up first-1000/every-third rule: {schedule_ok}; "
        f"total == weighted sum: {total_ok}",
    )


def test_loss_components_nonnegative():
    torch.manual_seed(0)
    g = torch.rand(2, 1, 8, 8)
    y = torch.rand(2, 1, 8, 8)
    d = torch.randn(2, 1, 2, 2)
    parts = loss_components(g, y, d, LossConfig(), iteration=1002)
    assert float(parts.cgan) >= 0
    assert float(parts.l1_psf) >= 0
    assert float(parts.l1_sparse) >= 0
    assert parts.lambda_cgan_eff == 3.0


def test_loss_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        loss_components(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5), None, LossConfig(), 0)


def test_loss_total_runs_models():
    torch.manual_seed(1)
    g = build_generator(depth=2, first_filters=4)
    d = PatchDiscriminator(first_filters=4)
    x = torch.rand(2, 1, 16, 16)
    y = torch.rand(2, 1, 16, 16)
    parts = loss_total(x, y, g, d, LossConfig(psf_sigma_px=1.0), iteration=1002)
    assert torch.isfinite(parts.total)
    assert parts.lambda_cgan_eff == 3.0


def test_gaussian_kernel_unit_peak_and_identity():
    k = gaussian_kernel(1.5)
    assert float(k.max()) == 1.0
    assert k.shape[-1] == 2 * 5 + 1  # radius ceil(4.5) = 5
    assert gaussian_kernel(0.0).shape == (1, 1, 1, 1)


def test_discriminator_loss_finite():
    torch.manual_seed(2)
    d = PatchDiscriminator(first_filters=4)
    x, y, g = torch.rand(2, 1, 16, 16), torch.rand(2, 1, 16, 16), torch.rand(2, 1, 16, 16)
    loss = discriminator_loss(d, x, y, g)
    assert torch.isfinite(loss) and float(loss.detach()) > 0


def test_fold_batchnorm_matches_eval_output():
    torch.manual_seed(3)
    bn = torch.nn.BatchNorm2d(5)
    bn.train()
    for _ in range(4):
        bn(torch.randn(8, 5, 6, 6))
    bn.eval()
    scale, shift = fold_batchnorm(bn)
    x = torch.randn(2, 5, 6, 6)
    with torch.no_grad():
        expected = bn(x).numpy()
    folded = x.numpy() * scale[None, :, None, None] + shift[None, :, None, None]
    assert np.allclose(folded, expected, atol=1e-6)


def test_export_reload_round_trip_bit_exact(tmp_path):
    cellstorm = pytest.importorskip("cellstorm")
    torch.manual_seed(4)
    net = build_generator(depth=2, first_filters=4)
    net.train()
    with torch.no_grad():
        for _ in range(3):
            net(torch.rand(2, 1, 16, 16))
    net.eval()
    export_generator(net, tmp_path / "arch", train_size=64)
    archive = cellstorm.load_weights(tmp_path / "arch")

    convs = [m for m in net.ops if isinstance(m, torch.nn.Conv2d)]
    loaded_convs = [l for l in archive.layers if l.kind == "conv"]
    assert len(convs) == len(loaded_convs)
    for module, layer in zip(convs, loaded_convs):
        assert np.array_equal(
            module.weight.detach().numpy().astype("<f4"), layer.weight
        )
        assert np.array_equal(module.bias.detach().numpy().astype("<f4"), layer.bias)

    # the exported affine layers reproduce eval-mode behavior end to end
    x = torch.rand(1, 1, 16, 16)
    with torch.no_grad():
        torch_out = net(x).numpy()[0, 0]
    numpy_out = cellstorm.infer(x.numpy()[0, 0], archive)
    assert np.allclose(numpy_out, torch_out, rtol=1e-5, atol=1e-6)


def test_export_elides_dropout_and_remaps_skips(tmp_path):
    cellstorm = pytest.importorskip("cellstorm")
    torch.manual_seed(5)
    net = build_generator(depth=2, first_filters=4, dropout_layers=1)
    assert any(op.kind == "dropout" for op in net.plan)
    net.eval()
    export_generator(net, tmp_path / "arch", train_size=32)
    archive = cellstorm.load_weights(tmp_path / "arch")  # validation checks skips
    assert all(layer.kind != "dropout" for layer in archive.layers)
    x = torch.rand(1, 1, 32, 32)
    with torch.no_grad():
        torch_out = net(x).numpy()[0, 0]
    numpy_out = cellstorm.infer(x.numpy()[0, 0], archive)
    assert np.allclose(numpy_out, torch_out, rtol=1e-5, atol=1e-6)
