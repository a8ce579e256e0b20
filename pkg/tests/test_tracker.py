"""Tracking-loop tests: fixed point, convergence, parity, lock loss, relock."""

import dataclasses

import numpy as np
import pytest

from resotrack import calib, tracker
from resotrack.config import EmiConfig, PlantConfig, StimulusProgram, StimulusSegment
from resotrack.errors import NoDipError, ParameterError
from resotrack.plant import Plant

DIP_V = 1.6
SLOPE = 2e8  # V -> Hz, linear term of the default tuning polynomial


def analytic_plant(seed=0, **over):
    return Plant(dataclasses.replace(PlantConfig.analytic(), seed=seed, **over))


@pytest.fixture()
def analytic_cal():
    cfg = PlantConfig.analytic()
    return calib.am_closed_form(cfg), calib.k_closed_form(cfg)


# -- config/state validation -------------------------------------------------

def test_config_rejects_bad_values():
    with pytest.raises(ParameterError):
        tracker.TrackerConfig(k_i=0.0, a_m=0.017)
    with pytest.raises(ParameterError):
        tracker.TrackerConfig(k_i=1e-3, a_m=-1.0)
    with pytest.raises(ParameterError):
        tracker.TrackerConfig(k_i=1e-3, a_m=0.017, modulation="triangle")
    with pytest.raises(ParameterError):
        tracker.TrackerConfig(k_i=1e-3, a_m=0.017, sine_samples_per_period=5)
    with pytest.raises(ParameterError):
        tracker.TrackerConfig(k_i=1e-3, a_m=0.017, sine_samples_per_period=2)
    with pytest.raises(ParameterError):
        tracker.TrackerConfig(k_i=1e-3, a_m=0.017, lock_loss_step_limit=0.0)


def test_config_from_calibration_scales_gain():
    res, _ = calib.calibrate(analytic_plant(), n_points=3301, averaging=1)
    c = tracker.config_from_calibration(res, k_fraction=0.5)
    assert c.k_i == pytest.approx(0.5 * res.k_gain, rel=1e-12)
    assert c.a_m == res.a_m
    with pytest.raises(ParameterError):
        tracker.config_from_calibration(res, k_fraction=0.0)


# -- error signal ------------------------------------------------------------

def test_error_zero_at_dip(analytic_cal):
    # 1.6 V is not exactly representable on the 24-bit grid, so the error
    # is tiny but nonzero.
    a_m, _ = analytic_cal
    e = tracker.error_square(analytic_plant(), DIP_V, a_m)
    assert abs(e) < 1e-4


def test_error_sign_tracks_detuning(analytic_cal):
    a_m, _ = analytic_cal
    p = analytic_plant()
    assert tracker.error_square(p, DIP_V + 0.3 * a_m, a_m) > 0
    assert tracker.error_square(p, DIP_V - 0.3 * a_m, a_m) < 0


def test_error_antisymmetric(analytic_cal):
    a_m, _ = analytic_cal
    p = analytic_plant()
    for d_frac in (0.1, 0.25, 0.5):
        ep = tracker.error_square(p, DIP_V + d_frac * a_m, a_m)
        em = tracker.error_square(p, DIP_V - d_frac * a_m, a_m)
        assert ep + em == pytest.approx(0.0, abs=1e-4)


def test_error_square_consumes_two_conversions(analytic_cal):
    a_m, _ = analytic_cal
    p = analytic_plant()
    tracker.error_square(p, DIP_V, a_m)
    assert p.time_index == 2
    tracker.error_sine(p, DIP_V, a_m, 16)
    assert p.time_index == 18


def test_modulation_span_two_am(analytic_cal, monkeypatch):
    """The instantaneous probe band covers 2 x a_m in DAC volts (quantized)."""
    from resotrack import kernels

    a_m, _ = analytic_cal
    p = analytic_plant()
    lsb = p.config.quantizer.lsb
    seen = []
    orig = kernels.chain

    def spy(vq, *args, **kw):
        seen.append(np.array(vq, copy=True))
        return orig(vq, *args, **kw)

    monkeypatch.setattr(tracker.kernels, "chain", spy)
    tracker.error_square(p, DIP_V, a_m)
    (cmds,) = seen
    span = float(cmds.max() - cmds.min())
    assert span == pytest.approx(2 * a_m, abs=lsb)
    # band in hertz through the linear tuning slope
    assert span * SLOPE == pytest.approx(2 * a_m * SLOPE, rel=lsb / a_m)


# -- one-step convergence ----------------------------------------------------

@pytest.mark.parametrize("d_frac", [0.05, 0.1, 0.2, 0.35, 0.5])
def test_one_step_reduces_residual(analytic_cal, d_frac):
    """A single correction at gain K removes >= 95% of small detunings."""
    a_m, k = analytic_cal
    st = tracker.TrackerState(v_center=DIP_V + d_frac * a_m)
    tracker.step_square(st, tracker.TrackerConfig(k_i=k, a_m=a_m), analytic_plant())
    assert abs(st.v_center - DIP_V) <= 0.05 * d_frac * a_m + 1e-9


def test_three_steps_converge_tight(analytic_cal):
    a_m, k = analytic_cal
    st = tracker.TrackerState(v_center=DIP_V + 0.5 * a_m)
    c = tracker.TrackerConfig(k_i=k, a_m=a_m)
    p = analytic_plant()
    for _ in range(3):
        tracker.step_square(st, c, p)
    assert abs(st.v_center - DIP_V) <= 0.005 * 0.5 * a_m + 1e-9


def test_regression_gain_converges_within_three():
    """The windowed-regression gain overshoots but still settles quickly."""
    res, _ = calib.calibrate(analytic_plant(), n_points=3301, averaging=1)
    st = tracker.TrackerState(v_center=res.v0 + 0.5 * res.a_m)
    c = tracker.config_from_calibration(res)
    p = analytic_plant()
    for _ in range(3):
        tracker.step_square(st, c, p)
    assert abs(st.v_center - res.v0) <= 0.006 * 0.5 * res.a_m


def test_negative_detuning_converges(analytic_cal):
    a_m, k = analytic_cal
    st = tracker.TrackerState(v_center=DIP_V - 0.4 * a_m)
    tracker.step_square(st, tracker.TrackerConfig(k_i=k, a_m=a_m), analytic_plant())
    assert abs(st.v_center - DIP_V) <= 0.05 * 0.4 * a_m + 1e-9


# -- batching parity and accounting -----------------------------------------

def test_run_matches_stepwise_bitwise(noisy_plant):
    cfg = noisy_plant.config
    p2 = Plant(cfg)
    c = tracker.TrackerConfig(k_i=6.7e-3, a_m=0.0172)
    st1 = tracker.TrackerState(v_center=1.59)
    st2 = tracker.TrackerState(v_center=1.59)
    batch = tracker.run(500, st1, c, noisy_plant)
    single = [tracker.step_square(st2, c, p2) for _ in range(500)]
    assert batch == single
    assert st1 == st2
    assert noisy_plant.time_index == p2.time_index == 1000


def test_run_backends_agree(noisy_plant):
    c = tracker.TrackerConfig(k_i=6.7e-3, a_m=0.0172)
    outs = []
    for be in ("python", "numpy"):
        p = Plant(noisy_plant.config)
        st = tracker.TrackerState(v_center=1.59)
        outs.append(tracker.run_arrays(300, st, c, p, backend=be))
    for a, b in zip(outs[0], outs[1]):
        np.testing.assert_array_equal(a, b)


def test_run_emits_exact_count_and_indices(noisy_plant):
    c = tracker.TrackerConfig(k_i=6.7e-3, a_m=0.0172)
    st = tracker.TrackerState(v_center=1.6)
    got = []
    out = tracker.run(37, st, c, noisy_plant, sink=got.append)
    assert len(out) == len(got) == 37
    assert [s.iteration for s in out] == list(range(37))
    assert st.iteration == 37
    more = tracker.run(5, st, c, noisy_plant)
    assert [s.iteration for s in more] == list(range(37, 42))


def test_run_block_boundary_invariance(noisy_plant):
    """Results are independent of the internal kernel batch size."""
    c = tracker.TrackerConfig(k_i=6.7e-3, a_m=0.0172)
    n = 2 * tracker._RUN_BLOCK + 17
    st1 = tracker.TrackerState(v_center=1.6)
    v1, e1, l1, s1 = tracker.run_arrays(n, st1, c, noisy_plant)
    p2 = Plant(noisy_plant.config)
    st2 = tracker.TrackerState(v_center=1.6)
    parts = []
    for m in (1, tracker._RUN_BLOCK - 1, n - tracker._RUN_BLOCK):
        parts.append(tracker.run_arrays(m, st2, c, p2))
    v2 = np.concatenate([q[0] for q in parts])
    np.testing.assert_array_equal(v1, v2)
    assert st1 == st2


def test_integral_acc_tracks_center_motion(noisy_plant):
    """With k_p = k_d = 0 the accumulator equals the total correction."""
    c = tracker.TrackerConfig(k_i=6.7e-3, a_m=0.0172)
    st = tracker.TrackerState(v_center=1.59)
    tracker.run(400, st, c, noisy_plant)
    assert st.v_center - 1.59 == pytest.approx(st.integral_acc, abs=1e-12)


def test_static_hold_within_one_lsb():
    """Locked on a quiet plant, the output never leaves the dip's code."""
    p = analytic_plant()
    cfg = p.config
    a_m = calib.am_closed_form(cfg)
    k = calib.k_closed_form(cfg)
    st = tracker.TrackerState(v_center=DIP_V)
    v, e, locked, sat = tracker.run_arrays(
        10_000, st, tracker.TrackerConfig(k_i=k, a_m=a_m), p
    )
    assert np.all(np.abs(v - DIP_V) <= cfg.quantizer.lsb)
    assert locked.all()
    assert not sat.any()


def test_zero_duration_run(noisy_plant):
    st = tracker.TrackerState(v_center=1.6)
    c = tracker.TrackerConfig(k_i=6.7e-3, a_m=0.0172)
    assert tracker.run(0, st, c, noisy_plant) == []
    assert noisy_plant.time_index == 0
    with pytest.raises(ParameterError):
        tracker.run_arrays(-1, st, c, noisy_plant)


# -- sine modulation ---------------------------------------------------------

def test_sine_step_accounting(analytic_cal):
    a_m, k = analytic_cal
    p = analytic_plant()
    st = tracker.TrackerState(v_center=DIP_V + 0.2 * a_m)
    c = tracker.TrackerConfig(k_i=k, a_m=a_m, modulation="sine",
                              sine_samples_per_period=16)
    s = tracker.step_sine(st, c, p)
    assert p.time_index == 16
    assert s.iteration == 0 and st.iteration == 1
    assert s.locked and not s.saturated


def test_sine_converges_like_square(analytic_cal):
    a_m, k = analytic_cal
    st = tracker.TrackerState(v_center=DIP_V + 0.3 * a_m)
    c = tracker.TrackerConfig(k_i=k, a_m=a_m, modulation="sine")
    p = analytic_plant()
    for _ in range(4):
        tracker.step_sine(st, c, p)
    assert abs(st.v_center - DIP_V) < 0.02 * 0.3 * a_m


def test_sine_square_ratio_constant(analytic_cal):
    """Demodulated-sine and two-point errors stay proportional off-center."""
    a_m, _ = analytic_cal
    p = analytic_plant()
    ratios = []
    for d_frac in np.linspace(-0.5, 0.5, 11):
        if abs(d_frac) < 1e-9:
            continue
        v = DIP_V + d_frac * a_m
        ratios.append(tracker.error_sine(p, v, a_m) / tracker.error_square(p, v, a_m))
    ratios = np.asarray(ratios)
    mid = float(np.median(ratios))
    assert np.all(np.abs(ratios / mid - 1.0) < 0.01)


def test_run_sine_mode_uses_sine_steps(analytic_cal):
    a_m, k = analytic_cal
    c = tracker.TrackerConfig(k_i=k, a_m=a_m, modulation="sine",
                              sine_samples_per_period=8)
    p = analytic_plant()
    st = tracker.TrackerState(v_center=DIP_V)
    out = tracker.run(10, st, c, p)
    assert len(out) == 10
    assert p.time_index == 80
    with pytest.raises(ParameterError):
        tracker.run_arrays(10, st, c, p)


# -- lock loss ---------------------------------------------------------------

def test_detect_lock_loss_step_limit_is_strict():
    c = tracker.TrackerConfig(k_i=1.0, a_m=0.01, lock_loss_step_limit=5.0)
    st = tracker.TrackerState(v_center=1.6)
    at_limit = tracker.TrackerSample(0, 1.6, 5.0 * 0.01, True, False)
    over = tracker.TrackerSample(0, 1.6, 5.0 * 0.01 * (1 + 1e-9), True, False)
    assert not tracker.detect_lock_loss(st, c, at_limit)
    assert tracker.detect_lock_loss(st, c, over)


def test_detect_lock_loss_range_exit():
    c = tracker.TrackerConfig(k_i=1e-3, a_m=0.05)
    ok = tracker.TrackerState(v_center=3.3 - 0.05)
    out = tracker.TrackerState(v_center=3.3 - 0.04)
    sample = tracker.TrackerSample(0, 0.0, 0.0, True, False)
    assert not tracker.detect_lock_loss(ok, c, sample)
    assert tracker.detect_lock_loss(out, c, sample)
    low = tracker.TrackerState(v_center=0.04)
    assert tracker.detect_lock_loss(low, c, sample)


def test_detect_lock_loss_saturation_streak():
    c = tracker.TrackerConfig(k_i=1e-3, a_m=0.017)
    sample = tracker.TrackerSample(0, 1.6, 0.0, True, True)
    st = tracker.TrackerState(v_center=1.6, sat_streak=99)
    assert not tracker.detect_lock_loss(st, c, sample)
    st.sat_streak = 100
    assert tracker.detect_lock_loss(st, c, sample)


def test_saturated_plant_unlocks_after_streak():
    """A rail-pinned detector output trips the 100-conversion streak."""
    cfg = dataclasses.replace(
        PlantConfig.ideal(),
        emi=EmiConfig(enabled=True, amplitude=5.0, frequency=0.0, phase=np.pi / 2),
    )
    p = Plant(cfg)
    st = tracker.TrackerState(v_center=1.6)
    out = tracker.run(80, st, tracker.TrackerConfig(k_i=6.7e-3, a_m=0.0172), p)
    assert all(s.saturated for s in out)
    first_unlocked = next(s.iteration for s in out if not s.locked)
    # two conversions per iteration -> the streak reaches 100 mid-iteration 49
    assert first_unlocked == 49
    assert not st.locked
    # the flag latches: everything after stays unlocked
    assert all(not s.locked for s in out if s.iteration >= first_unlocked)


def test_unlock_latches_but_loop_keeps_updating():
    cfg = dataclasses.replace(
        PlantConfig.ideal(),
        emi=EmiConfig(enabled=True, amplitude=5.0, frequency=0.0, phase=np.pi / 2),
    )
    p = Plant(cfg)
    st = tracker.TrackerState(v_center=1.6)
    tracker.run(60, st, tracker.TrackerConfig(k_i=6.7e-3, a_m=0.0172), p)
    assert not st.locked
    v_before = st.v_center
    s = tracker.step_square(st, tracker.TrackerConfig(k_i=6.7e-3, a_m=0.0172), p)
    assert not s.locked
    # saturated full-scale error keeps pushing the center: output still moves
    assert s.v_out != v_before or st.err_prev == 0.0


def test_sine_lock_loss_on_range_exit():
    c = tracker.TrackerConfig(k_i=1e-4, a_m=0.05, modulation="sine")
    p = analytic_plant()
    st = tracker.TrackerState(v_center=3.28)  # +a_m exceeds the 3.3 V rail
    s = tracker.step_sine(st, c, p)
    assert not s.locked and not st.locked


# -- relock ------------------------------------------------------------------

def test_relock_after_large_jump_within_one_lsb():
    """After a 50 x a_m resonance jump, reacquisition lands on the new dip."""
    cfg0 = PlantConfig.ideal()
    a_m = calib.am_closed_form(cfg0)
    step_hz = 50.0 * a_m * SLOPE
    stim = StimulusProgram(
        segments=(StimulusSegment(kind="step", start=0.0, duration=10.0,
                                  magnitude=step_hz),),
        domain="frequency",
    )
    cfg = dataclasses.replace(cfg0, stimulus=stim, seed=3)
    res, st = tracker.relock(Plant(cfg), n_points=3301, averaging=1)
    target = DIP_V + 50.0 * a_m
    assert abs(res.v0 - target) <= cfg.quantizer.lsb
    assert st.v_center == res.v0
    assert st.locked and st.iteration == 0 and st.integral_acc == 0.0


def test_relock_deterministic():
    cfg = dataclasses.replace(PlantConfig.ideal(), seed=7)
    r1, s1 = tracker.relock(Plant(cfg), n_points=1024, averaging=2)
    r2, s2 = tracker.relock(Plant(cfg), n_points=1024, averaging=2)
    assert r1.v0 == r2.v0 and r1.a_m == r2.a_m and r1.k_gain == r2.k_gain
    assert s1 == s2


def test_relock_propagates_no_dip():
    cfg = PlantConfig.ideal()
    far = dataclasses.replace(
        cfg, resonator=dataclasses.replace(cfg.resonator, f_r0=8e9)
    )
    with pytest.raises(NoDipError):
        tracker.relock(Plant(far))


# -- run log CSV -------------------------------------------------------------

def test_run_log_round_trip(tmp_path, noisy_plant):
    c = tracker.TrackerConfig(k_i=6.7e-3, a_m=0.0172)
    st = tracker.TrackerState(v_center=1.6)
    samples = tracker.run(50, st, c, noisy_plant)
    path = str(tmp_path / "log.csv")
    tracker.run_log_to_csv(samples, path, meta={"seed": 42})
    back = tracker.run_log_from_csv(path)
    assert back == samples


def test_run_log_rejects_missing_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ParameterError):
        tracker.run_log_from_csv(str(path))
