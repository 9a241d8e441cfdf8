import numpy as np
import pytest

import cellstorm as cs
from conftest import make_uniform_stacks


def closed_form_adu_stats(photons, model):
    """Mean/variance of the ADU output in the linear range.

    Sheppard's 1/12 term accounts for integer rounding of a wide smooth
    density.
    """
    mean = model.offset + model.qe * photons / model.gain
    var = (model.qe * photons + model.read_noise**2) / model.gain**2 + 1.0 / 12.0
    return mean, var


def test_zero_signal_zero_read_noise_gives_rounded_offset():
    model = cs.CameraModel(read_noise=0.0, clip_floor=0.0)
    frame = cs.apply_camera(np.zeros((16, 16)), model, 0, seed=1)
    assert np.all(frame == 4)  # round(4.1)


def test_monte_carlo_mean_variance_match_closed_form():
    model = cs.CameraModel()
    n = 1000 * 1000
    frame = cs.apply_camera(np.full((1000, 1000), 100.0), model, 0, seed=42)
    exp_mean, exp_var = closed_form_adu_stats(100.0, model)
    se_mean = np.sqrt(exp_var / n)
    se_var = exp_var * np.sqrt(2.0 / (n - 1))
    assert abs(frame.mean() - exp_mean) < 3 * se_mean
    assert abs(frame.var(ddof=1) - exp_var) < 3 * se_var


def test_saturation_clamps_to_max_adu():
    model = cs.CameraModel()
    frame = cs.apply_camera(np.full((4, 4), 1e7), model, 0, seed=1)
    assert np.all(frame == 4095)


def test_clip_floor_zeroes_small_values():
    model = cs.CameraModel(read_noise=0.0, clip_floor=3.0)
    frame = cs.apply_camera(np.zeros((8, 8)), model, 0, seed=1)
    # round(4.1) = 4 >= 3 survives; now push the offset under the floor
    assert np.all(frame == 4)
    low = cs.CameraModel(read_noise=0.0, offset=2.0, clip_floor=3.0)
    frame = cs.apply_camera(np.zeros((8, 8)), low, 0, seed=1)
    assert np.all(frame == 0)


def test_negative_photons_rejected():
    with pytest.raises(ValueError):
        cs.apply_camera(np.full((2, 2), -1.0), cs.CameraModel(), 0, seed=0)


def test_apply_camera_deterministic_per_seed_and_frame():
    model = cs.CameraModel()
    photons = np.full((32, 32), 50.0)
    a = cs.apply_camera(photons, model, 3, seed=9)
    b = cs.apply_camera(photons, model, 3, seed=9)
    c = cs.apply_camera(photons, model, 4, seed=9)
    d = cs.apply_camera(photons, model, 3, seed=10)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_temporal_dip_scales_signal_not_offset():
    model = cs.CameraModel(read_noise=0.0, dip_depth=0.5, dip_period_s=1.0, clip_floor=0.0)
    photons = np.full((8, 8), 1000.0)
    dipped = cs.apply_camera(photons, model, 0, seed=1, fps=20.0)  # frame 0 is a dip frame
    normal = cs.apply_camera(photons, model, 1, seed=1, fps=20.0)
    # signal halves, offset stays: mean (d - offset) should be about half
    ratio = (dipped.mean() - model.offset) / (normal.mean() - model.offset)
    assert abs(ratio - 0.5) < 0.03


def test_camera_model_validation():
    with pytest.raises(ValueError):
        cs.CameraModel(gain=0.0)
    with pytest.raises(ValueError):
        cs.CameraModel(qe=0.0)
    with pytest.raises(ValueError):
        cs.CameraModel(clip_floor=250.0, knee=220.0)


def test_presets_ship_both_published_parameter_sets():
    assert cs.CAMERA_PRESETS["p9"].gain == 0.69
    assert cs.CAMERA_PRESETS["p9"].read_noise == 2.5
    assert cs.CAMERA_PRESETS["p9-early"].gain == 0.34
    assert cs.CAMERA_PRESETS["p9-early"].offset == 4.074
    assert cs.CAMERA_PRESETS["p9-early"].read_noise == 1.23


def test_calibration_closed_loop_recovers_parameters():
    model = cs.CameraModel()
    stacks = make_uniform_stacks(np.linspace(5, 140, 10), model)
    dark = make_uniform_stacks([0.0], model, frames=50)[0]
    result = cs.calibrate_mean_variance(stacks, dark)
    assert abs(result.gain - model.gain) / model.gain < 0.05
    assert abs(result.offset - model.offset) < 0.5
    assert abs(result.read_noise - model.read_noise) / model.read_noise < 0.15
    assert result.fit_points == 10
    assert result.r_squared > 0.99


def test_calibration_rejects_levels_above_knee():
    model = cs.CameraModel()
    # means land around offset + qe*p/gain: 300 photons -> ~330 ADU > knee
    stacks = make_uniform_stacks([20.0, 80.0, 300.0, 500.0], model)
    dark = make_uniform_stacks([0.0], model, frames=50)[0]
    result = cs.calibrate_mean_variance(stacks, dark)
    assert result.fit_points == 2


def test_calibration_constant_stacks_degenerate():
    data = np.full((5, 8, 8), 7, dtype=np.uint16)
    stacks = [cs.FrameStack(8, 8, 5, 100.0, 20.0, data) for _ in range(3)]
    with pytest.raises(cs.DegenerateFitError):
        cs.calibrate_mean_variance(stacks, stacks[0])


def test_calibration_needs_two_usable_points():
    model = cs.CameraModel()
    stacks = make_uniform_stacks([50.0], model)
    dark = make_uniform_stacks([0.0], model)[0]
    with pytest.raises(cs.CalibrationError):
        cs.calibrate_mean_variance(stacks, dark)


def test_calibration_needs_two_frames_per_stack():
    model = cs.CameraModel()
    stacks = make_uniform_stacks([10.0, 50.0], model, frames=1)
    dark = make_uniform_stacks([0.0], model)[0]
    with pytest.raises(ValueError):
        cs.calibrate_mean_variance(stacks, dark)


def dark_dip_stack(dip_period_s, fps, n_frames, dip_depth=0.1, seed=3):
    model = cs.CameraModel(dip_depth=dip_depth, dip_period_s=dip_period_s)
    data = np.stack(
        [
            cs.apply_camera(np.full((32, 32), 50.0), model, t, seed=seed, fps=fps)
            for t in range(n_frames)
        ]
    )
    return cs.FrameStack(32, 32, n_frames, 100.0, fps, data)


def test_dip_period_detected_at_29_fps():
    profile = cs.dark_drift_profile(dark_dip_stack(1.07, 29.0, 310))
    assert profile.period_frames == 31


def test_dip_period_detected_at_20_fps():
    profile = cs.dark_drift_profile(dark_dip_stack(1.0, 20.0, 300))
    assert profile.period_frames == 20


def test_constant_stack_has_no_period():
    stack = cs.FrameStack(8, 8, 64, 100.0, 20.0, np.full((64, 8, 8), 7, dtype=np.uint16))
    profile = cs.dark_drift_profile(stack)
    assert profile.period_frames is None
    assert np.allclose(profile.means, 7.0)


def test_drift_profile_needs_64_frames():
    stack = cs.FrameStack(8, 8, 10, 100.0, 20.0, np.zeros((10, 8, 8), dtype=np.uint16))
    with pytest.raises(ValueError):
        cs.dark_drift_profile(stack)
