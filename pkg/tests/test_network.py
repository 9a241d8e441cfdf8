import json

import numpy as np
import pytest

import cellstorm as cs
from cellstorm.network import (
    ClampNonnegLayer,
    ConvLayer,
    NnResizeLayer,
    ReluLayer,
    TrainingPair,
    upsample_frame,
)


def make_archive(tmp_path, layers, input_channels=1, train_size=None, blob=None):
    """Write a raw manifest + blob for loader tests."""
    directory = tmp_path / "arch"
    directory.mkdir(exist_ok=True)
    manifest = {"input_channels": input_channels, "layers": layers}
    if train_size:
        manifest["train_size"] = train_size
    (directory / "manifest.json").write_text(json.dumps(manifest))
    (directory / "weights.bin").write_bytes(blob if blob is not None else b"")
    return directory


def conv_spec(in_ch, out_ch, k, stride, offset, pad=1, pad_mode="zeros"):
    weight_floats = out_ch * in_ch * k * k
    return (
        {
            "kind": "conv",
            "in_channels": in_ch,
            "out_channels": out_ch,
            "kernel": [k, k],
            "stride": stride,
            "padding": pad,
            "pad_mode": pad_mode,
            "weight": {"offset": offset, "shape": [out_ch, in_ch, k, k]},
            "bias": {"offset": offset + 4 * weight_floats, "shape": [out_ch]},
        },
        offset + 4 * (weight_floats + out_ch),
    )


def test_fixture_archive_loads_and_validates(tiny_unet_dir):
    archive = cs.load_weights(tiny_unet_dir)
    assert archive.depth == 2
    assert archive.train_size == 64
    kinds = [layer.kind for layer in archive.layers]
    assert "concat_skip" in kinds and "norm_affine" in kinds and kinds[-1] == "clamp_nonneg"


def test_truncated_blob_is_detected(tmp_path):
    spec, _ = conv_spec(4, 8, 3, 1, 0)
    blob = b"\x00" * (4 * 287)  # one float short of the declared 8*4*3*3
    directory = make_archive(tmp_path, [spec], input_channels=4, blob=blob)
    with pytest.raises(cs.TruncatedBlobError):
        cs.load_weights(directory)


def test_dangling_skip_is_detected(tmp_path):
    spec, end = conv_spec(1, 2, 4, 2, 0)
    layers = [spec, {"kind": "concat_skip", "source": 5}, {"kind": "nn_resize", "factor": 2}]
    directory = make_archive(tmp_path, layers, blob=b"\x00" * end)
    with pytest.raises(cs.DanglingSkipError):
        cs.load_weights(directory)


def test_channel_mismatch_is_detected(tmp_path):
    spec, end = conv_spec(3, 2, 4, 2, 0)  # input has 1 channel, conv wants 3
    directory = make_archive(tmp_path, [spec], blob=b"\x00" * end)
    with pytest.raises(cs.ShapeMismatchError):
        cs.load_weights(directory)


def test_unbalanced_topology_is_detected(tmp_path):
    spec, end = conv_spec(1, 2, 4, 2, 0)
    directory = make_archive(tmp_path, [spec], blob=b"\x00" * end)  # down without up
    with pytest.raises(cs.ShapeMismatchError):
        cs.load_weights(directory)


def test_skip_between_levels_is_detected(tmp_path):
    s1, end1 = conv_spec(1, 2, 4, 2, 0)
    s2, end2 = conv_spec(2, 4, 4, 2, end1)
    layers = [
        s1,
        s2,
        {"kind": "nn_resize", "factor": 2},
        # source 1 sits at level 2, the activation after the resize at level 1
        {"kind": "concat_skip", "source": 1},
    ]
    directory = make_archive(tmp_path, layers, blob=b"\x00" * end2)
    with pytest.raises(cs.ShapeMismatchError):
        cs.load_weights(directory)


def test_save_load_round_trip_bit_exact(tmp_path, tiny_unet_dir):
    archive = cs.load_weights(tiny_unet_dir)
    out = tmp_path / "resaved"
    cs.save_weights(archive, out)
    back = cs.load_weights(out)
    for a, b in zip(archive.layers, back.layers):
        assert a.kind == b.kind
        if a.kind == "conv":
            assert np.array_equal(a.weight, b.weight)
            assert np.array_equal(a.bias, b.bias)
        if a.kind == "norm_affine":
            assert np.array_equal(a.scale, b.scale)
            assert np.array_equal(a.shift, b.shift)


def test_infer_zero_weights_zero_input_gives_zero(tmp_path):
    layers = [
        ConvLayer(1, 2, (4, 4), 2, 1, "zeros", np.zeros((2, 1, 4, 4), np.float32), np.zeros(2, np.float32)),
        NnResizeLayer(2),
        ConvLayer(2, 1, (3, 3), 1, 1, "replicate", np.zeros((1, 2, 3, 3), np.float32), np.zeros(1, np.float32)),
        ClampNonnegLayer(),
    ]
    archive = cs.WeightArchive(layers=layers, input_channels=1)
    out = cs.infer(np.zeros((16, 16)), archive)
    assert out.shape == (16, 16)
    assert np.all(out == 0)


def test_nn_resize_replicates_pixels():
    archive = cs.WeightArchive(layers=[NnResizeLayer(2)], input_channels=1)
    out = cs.infer(np.array([[1.0, 2.0], [3.0, 4.0]]), archive)
    assert np.array_equal(out, np.repeat(np.repeat([[1.0, 2.0], [3.0, 4.0]], 2, 0), 2, 1))


def test_infer_requires_divisible_dims(tiny_unet_dir):
    archive = cs.load_weights(tiny_unet_dir)
    with pytest.raises(ValueError, match="divisible by 4"):
        cs.infer(np.zeros((30, 30)), archive)


def test_infer_matches_golden_tensor(tiny_unet_dir):
    archive = cs.load_weights(tiny_unet_dir)
    golden_in = np.load(tiny_unet_dir / "golden_input.npy")
    golden_out = np.load(tiny_unet_dir / "golden_output.npy")
    out = cs.infer(golden_in, archive)
    assert np.allclose(out, golden_out, rtol=1e-5, atol=1e-6)


def test_infer_deterministic(tiny_unet_dir):
    archive = cs.load_weights(tiny_unet_dir)
    frame = np.random.default_rng(0).random((32, 32))
    a = cs.infer(frame, archive)
    b = cs.infer(frame, archive)
    assert np.array_equal(a, b)


def constant_filter_decoder():
    """Resize + replicate-padded averaging conv: a minimal decoder stage."""
    weight = np.full((1, 1, 3, 3), 1.0 / 9.0, dtype=np.float32)
    return cs.WeightArchive(
        layers=[
            NnResizeLayer(2),
            ConvLayer(1, 1, (3, 3), 1, 1, "replicate", weight, np.zeros(1, np.float32)),
            ReluLayer(),
        ],
        input_channels=1,
    )


def test_resize_convolution_has_no_checkerboard_parity():
    out = cs.infer(np.full((8, 8), 0.37), constant_filter_decoder())
    assert out.shape == (16, 16)
    assert np.all(out == out[0, 0])  # constant in, constant out, borders included


def test_extract_zero_map_is_empty():
    table = cs.extract_table(np.zeros((20, 20)), cs.UpsampleGrid(5), 100.0)
    assert len(table) == 0


def test_extract_coordinates_are_pixel_centers():
    map_ = np.zeros((20, 20))
    map_[7, 10] = 1.0
    table = cs.extract_table(map_, cs.UpsampleGrid(5), 100.0)
    assert len(table) == 1
    assert table.x[0] == pytest.approx(10.5 * 20.0)
    assert table.y[0] == pytest.approx(7.5 * 20.0)
    assert table.intensity[0] == 1.0


def test_extract_threshold_is_relative_to_max():
    map_ = np.zeros((20, 20))
    map_[5, 5] = 1.0
    map_[12, 12] = 0.2  # below 0.3 * max
    map_[15, 3] = 0.5
    table = cs.extract_table(map_, cs.UpsampleGrid(5), 100.0)
    assert len(table) == 2
    assert set(np.round(table.intensity, 2)) == {1.0, 0.5}


def test_extract_bounded_by_local_maxima_count():
    rng = np.random.default_rng(8)
    map_ = rng.random((40, 40))
    table = cs.extract_table(map_, cs.UpsampleGrid(5), 100.0)
    from cellstorm.localize import strict_local_maxima

    assert len(table) <= int(strict_local_maxima(map_).sum())
    assert np.all(table.x < 40 * 20.0)
    assert np.all(table.y < 40 * 20.0)


def test_upsample_normalizes_and_replicates():
    frame = np.array([[0, 4095], [819, 2048]], dtype=np.uint16)
    up = upsample_frame(frame, cs.UpsampleGrid(3), 12)
    assert up.shape == (6, 6)
    assert up.max() == pytest.approx(1.0)
    assert np.all(up[:3, 3:] == up[0, 3])


def simulated_training_set(n_frames=40, seed=5, factor=5):
    scene = cs.SimScene(fov_um=1.6, density=6.0)
    blink = cs.BlinkModel(p_on=0.2, photons=1000.0)
    return cs.make_pairs_simulated(
        scene,
        blink,
        cs.PsfModel(),
        cs.CameraModel(),
        cs.CodecConfig(quality=85.0),
        n_frames,
        cs.UpsampleGrid(factor),
        seed,
        clip_frames=20,
    )


def test_pair_bookkeeping_matches_ground_truth():
    ts = simulated_training_set()
    nonzero = sum(int((p.y > 0).sum()) for p in ts.pairs)
    gt_rows = sum(len(gt) for gt in ts.gt_tables)
    assert nonzero == gt_rows - ts.collisions
    assert len(ts.pairs) == 40


def test_pairs_x_are_normalized_upsampled_frames():
    ts = simulated_training_set()
    stack = ts.stacks[0]
    expected = upsample_frame(stack.data[0], cs.UpsampleGrid(5), stack.bit_depth)
    assert np.array_equal(ts.pairs[0].x, expected)


def test_pairs_from_localizations_mapping():
    data = np.zeros((1, 4, 4), dtype=np.uint16)
    stack = cs.FrameStack(4, 4, 1, 100.0, 20.0, data)
    table = cs.LocalizationTable(
        frame=[0], x=[151.0], y=[0.0], sigma=[np.nan], intensity=[500.0]
    )
    ts = cs.make_pairs_from_localizations(stack, table, cs.UpsampleGrid(5), seed=0)
    assert len(ts.pairs) == 1
    nz = np.argwhere(ts.pairs[0].y > 0)
    assert nz.shape == (1, 2)
    assert tuple(nz[0]) == (0, 7)  # floor(151 / 20) = 7, row 0
    assert ts.pairs[0].y[0, 7] == pytest.approx(1.0)


def test_pairs_from_localizations_track_ground_truth():
    scene = cs.SimScene(fov_um=3.0)
    blink = cs.BlinkModel(p_on=0.02, photons=1000.0)
    camera = cs.CameraModel()
    stack, gt = cs.simulate_stack(scene, blink, cs.PsfModel(), camera, None, 60, seed=8)
    table = cs.localize_stack(stack, cs.LocalizerConfig(), camera)
    grid = cs.UpsampleGrid(5)
    ts = cs.make_pairs_from_localizations(stack, table, grid, seed=0)

    # compare against GT events the fitter can reach (it rejects peaks
    # within the ROI radius of the border by contract)
    up = 100.0 / 5
    margin = 4 * 100.0
    w_nm = stack.width * 100.0
    bright = 0
    within_one = 0
    for i in range(len(gt)):
        if gt.photons[i] < 500.0:
            continue
        if not (margin <= gt.x[i] < w_nm - margin and margin <= gt.y[i] < w_nm - margin):
            continue
        bright += 1
        rows = table.rows_for_frame(int(gt.frame[i]))
        if len(rows) == 0:
            continue
        tx = np.floor(rows.x / up)
        ty = np.floor(rows.y / up)
        gx, gy = np.floor(gt.x[i] / up), np.floor(gt.y[i] / up)
        if np.any((np.abs(tx - gx) <= 1) & (np.abs(ty - gy) <= 1)):
            within_one += 1
    assert bright > 30
    assert within_one / bright >= 0.90
    assert len(ts.pairs) == stack.n_frames


def test_pairs_from_empty_table_rejected():
    stack = cs.FrameStack(4, 4, 1, 100.0, 20.0, np.zeros((1, 4, 4), dtype=np.uint16))
    with pytest.raises(ValueError):
        cs.make_pairs_from_localizations(stack, cs.LocalizationTable.empty(), cs.UpsampleGrid(5), 0)


def test_collision_keeps_brighter_emitter():
    stack = cs.FrameStack(4, 4, 1, 100.0, 20.0, np.zeros((1, 4, 4), dtype=np.uint16))
    table = cs.LocalizationTable(
        frame=[0, 0], x=[5.0, 12.0], y=[5.0, 12.0], sigma=[np.nan] * 2, intensity=[100.0, 400.0]
    )
    ts = cs.make_pairs_from_localizations(stack, table, cs.UpsampleGrid(5), seed=0)
    assert ts.collisions == 1
    assert ts.pairs[0].y[0, 0] == pytest.approx(1.0)  # 400 / max(400)


def test_export_import_pairs_round_trip(tmp_path):
    ts = simulated_training_set(n_frames=10)
    cs.export_pairs(ts, tmp_path / "ds")
    back = cs.load_pairs(tmp_path / "ds")
    assert len(back.pairs) == len(ts.pairs)
    assert back.factor == ts.factor and back.pixel_nm == ts.pixel_nm
    assert back.collisions == ts.collisions
    for a, b in zip(ts.pairs, back.pairs):
        assert np.array_equal(a.x, b.x)  # 12-bit x round-trips losslessly
        assert np.max(np.abs(a.y - b.y)) <= 0.5 / 65535


def test_nn_localize_single_tile_equals_plain_inference(tiny_unet_dir):
    archive = cs.load_weights(tiny_unet_dir)
    rng = np.random.default_rng(3)
    # 16 px frame at factor 4 -> 64 upsampled = train_size exactly
    data = rng.integers(0, 4096, size=(1, 16, 16), dtype=np.uint16)
    stack = cs.FrameStack(16, 16, 1, 100.0, 20.0, data)
    grid = cs.UpsampleGrid(4)
    table = cs.nn_localize_stack(stack, archive, grid)
    up = upsample_frame(stack.data[0], grid, 12)
    direct = cs.extract_table(cs.infer(up, archive), grid, 100.0, frame_index=0)
    assert np.array_equal(table.x, direct.x)
    assert np.array_equal(table.y, direct.y)


def test_nn_localize_tiled_large_frame(tiny_unet_dir):
    archive = cs.load_weights(tiny_unet_dir)
    rng = np.random.default_rng(4)
    data = rng.integers(0, 4096, size=(1, 40, 40), dtype=np.uint16)
    stack = cs.FrameStack(40, 40, 1, 100.0, 20.0, data)
    grid = cs.UpsampleGrid(4)  # 160 upsampled > train_size 64 -> tiling
    table = cs.nn_localize_stack(stack, archive, grid)
    a = cs.nn_localize_stack(stack, archive, grid)
    assert np.array_equal(table.x, a.x)
    assert np.all(table.x < 40 * 100.0) and np.all(table.y < 40 * 100.0)
    coords = list(zip(table.x.tolist(), table.y.tolist()))
    assert len(coords) == len(set(coords))  # interiors partition: no duplicates


def test_nn_localize_dark_stack_is_empty(tmp_path):
    layers = [
        ConvLayer(1, 2, (4, 4), 2, 1, "zeros", np.zeros((2, 1, 4, 4), np.float32), np.zeros(2, np.float32)),
        NnResizeLayer(2),
        ConvLayer(2, 1, (3, 3), 1, 1, "replicate", np.zeros((1, 2, 3, 3), np.float32), np.zeros(1, np.float32)),
        ClampNonnegLayer(),
    ]
    archive = cs.WeightArchive(layers=layers, input_channels=1, train_size=64)
    stack = cs.FrameStack(16, 16, 2, 100.0, 20.0, np.zeros((2, 16, 16), dtype=np.uint16))
    assert len(cs.nn_localize_stack(stack, archive, cs.UpsampleGrid(4))) == 0


def test_training_pair_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        TrainingPair(x=np.zeros((4, 4)), y=np.zeros((4, 5)))
