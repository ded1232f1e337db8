import math
import random

import numpy as np
import pytest

from vidbus.controller import (
    DEFAULT_INTEGRAL_GAIN,
    DEFAULT_PROPORTIONAL_GAIN,
    ControlOutcome,
    ControllerConfig,
    LatencyController,
)
from vidbus.frames import Colorspace, Frame, QosBound
from vidbus.knobs import IDENTITY, FrameDiffState, KnobSetting, enumerate_settings
from vidbus.netsim import ChannelModel, ClosedLoopScenario, run_closed_loop
from vidbus.profiles import (
    LinearLatencyModel,
    ProfileEntry,
    ProfileTable,
    fit_latency_model,
    size_for_latency,
    synthetic_profile,
)

SETTINGS = [s for s in enumerate_settings() if not s.is_identity][:200]
JAAD_POINTS = [(610_000, 32.09), (760_000, 35.16), (970_000, 46.09)]
BOUND = QosBound(100.0, 96.0)


def _step_config(table, model):
    return ControllerConfig.from_gains(model, table, proportional=0.0, integral=0.163)


def _controller(config=None, table=None, model=None):
    table = table or synthetic_profile(100_000, 970_000, count=30, knee_bytes=25_000)
    model = model or fit_latency_model(JAAD_POINTS)
    config = config or ControllerConfig.from_gains(model, table)
    return LatencyController(config, table, model, camera_id="cam0", clock=lambda: 0)


def _feed(controller, samples):
    for sample in samples:
        controller.observe_latency(sample)


def test_set_target_resets_state_and_is_idempotent():
    controller = _controller()
    assert controller.set_target(BOUND)
    assert controller.target == BOUND
    assert controller.error_integral_ms == 0.0
    assert controller.current_setting == IDENTITY
    epoch = controller.epoch
    assert not controller.set_target(QosBound(100.0, 96.0))
    assert controller.epoch == epoch


def test_control_step_requires_a_target():
    controller = _controller()
    with pytest.raises(ValueError):
        controller.control_step()


def test_window_uses_nearest_rank_p95():
    config = ControllerConfig(k1=1.0, k2=1.0, integral_clamp_bytes=1e6, sample_window=10)
    controller = _controller(config=config)
    controller.set_target(BOUND)
    _feed(controller, [100.0] * 10)
    assert controller.latency_sampled == 100.0
    assert controller.observe_latency(200.0) == 200.0
    single = _controller(config=config)
    assert single.observe_latency(42.0) == 42.0


def test_deadband_leaves_setting_and_integral_alone():
    for sample in (90.0, 103.0, 105.0):
        controller = _controller()
        controller.set_target(QosBound(100.0, 90.0))
        controller.observe_latency(sample)
        decision = controller.control_step()
        assert decision.outcome is ControlOutcome.NO_CHANGE, sample
        assert controller.current_setting == IDENTITY
        assert controller.error_integral_ms == 0.0


def test_error_is_measured_against_the_latency_bound():
    controller = _controller()
    controller.set_target(QosBound(100.0, 90.0))
    controller.observe_latency(106.0)
    decision = controller.control_step()
    assert decision.outcome is not ControlOutcome.NO_CHANGE
    assert controller.error_integral_ms == pytest.approx(6.0)
    assert controller.nominal_size == controller.profile.largest.size_bytes


def test_default_gains_scale_the_inverted_model_slope():
    model = fit_latency_model(JAAD_POINTS)
    table = synthetic_profile(100_000, 970_000)
    config = ControllerConfig.from_gains(model, table)
    assert config.k1 == pytest.approx(0.6 * model.bytes_per_ms)
    assert config.k2 == pytest.approx(0.1 * config.k1)
    assert DEFAULT_INTEGRAL_GAIN == pytest.approx(0.1 * DEFAULT_PROPORTIONAL_GAIN)
    assert config.integral_clamp_bytes == 2 * table.largest.size_bytes
    assert config.error_threshold_ms == 5.0
    assert config.sample_window == 20


def test_no_samples_means_no_change():
    controller = _controller()
    controller.set_target(BOUND)
    assert controller.control_step().outcome is ControlOutcome.NO_CHANGE


def test_large_error_selects_feasible_smaller_setting():
    table = synthetic_profile(100_000, 970_000, count=30, knee_bytes=25_000)
    model = fit_latency_model(JAAD_POINTS)
    controller = _controller(config=_step_config(table, model), table=table, model=model)
    controller.set_target(BOUND)
    _feed(controller, [260.0] * 5)
    decision = controller.control_step()
    assert decision.outcome is ControlOutcome.SETTING
    assert decision.changed
    size = controller.profile.size_of(decision.setting)
    assert size <= size_for_latency(controller.model, 100.0)
    assert size < controller.profile.largest.size_bytes
    assert controller.profile.accuracy_of(decision.setting) >= 96.0


def test_switch_bumps_epoch_and_discards_stale_samples():
    table = synthetic_profile(100_000, 970_000, count=30, knee_bytes=25_000)
    model = fit_latency_model(JAAD_POINTS)
    controller = _controller(config=_step_config(table, model), table=table, model=model)
    controller.set_target(BOUND)
    old_epoch = controller.epoch
    _feed(controller, [260.0] * 5)
    controller.control_step()
    assert controller.epoch == old_epoch + 1
    assert len(controller.samples) == 0
    assert controller.observe_latency(300.0, epoch=old_epoch) is None
    assert len(controller.samples) == 0
    assert controller.observe_latency(50.0, epoch=controller.epoch) == 50.0


def test_infeasible_reports_best_accuracy_and_degrades():
    table = ProfileTable(
        [
            ProfileEntry(SETTINGS[0], 100_000, 90.0),
            ProfileEntry(SETTINGS[1], 200_000, 94.0),
        ]
    )
    model = LinearLatencyModel(slope=1e-4, intercept=0.0)
    config = ControllerConfig(k1=0.0, k2=0.0, integral_clamp_bytes=1.0)
    controller = _controller(config=config, table=table, model=model)
    controller.set_target(BOUND)
    for _ in range(3):
        _feed(controller, [150.0] * 3)
        decision = controller.control_step()
        assert decision.outcome is ControlOutcome.INFEASIBLE
        assert decision.best_accuracy == 94.0
        assert controller.infeasible
    assert controller.current_setting == table.smallest.setting


def test_integral_contribution_stays_clamped():
    table = synthetic_profile(100_000, 970_000)
    model = fit_latency_model(JAAD_POINTS)
    config = ControllerConfig(k1=10.0, k2=5_000.0, integral_clamp_bytes=400_000.0)
    controller = _controller(config=config, table=table, model=model)
    controller.set_target(QosBound(100.0, 90.0))
    rng = random.Random(4)
    for _ in range(500):
        controller.observe_latency(rng.uniform(0, 2000), epoch=controller.epoch)
        controller.control_step()
        assert abs(controller.error_integral_ms * config.k2) <= config.integral_clamp_bytes + 1e-6


def test_monotone_actuation_with_fixed_integral():
    model = fit_latency_model(JAAD_POINTS)
    table = synthetic_profile(100_000, 970_000)
    config = ControllerConfig.from_gains(model, table, proportional=0.5, integral=0.05)
    rng = random.Random(8)
    for _ in range(200):
        integral = rng.uniform(0, 500)
        low, high = sorted(rng.uniform(101, 600) for _ in range(2))
        sizes = []
        for sample in (low, high):
            controller = _controller(config=config, table=table, model=model)
            controller.set_target(QosBound(100.0, 90.0))
            controller.error_integral_ms = integral
            controller.observe_latency(sample)
            decision = controller.control_step()
            if decision.outcome is not ControlOutcome.SETTING:
                break
            sizes.append(table.size_of(decision.setting))
        if len(sizes) == 2:
            assert sizes[1] <= sizes[0]


def _floor_entry(table, size):
    below = [entry for key, entry in table.size_index if key <= size]
    return below[-1] if below else None


def _reference_run(table, model, k1, k2, clamp, window, bound, samples_per_step, threshold=5.0):
    # straight-line restatement of one camera's control loop
    target = bound.latency_max_ms
    nominal = min(
        max((target - model.intercept) / model.slope, table.smallest.size_bytes),
        table.largest.size_bytes,
    )
    integral = 0.0
    setting = IDENTITY
    samples = []
    outcomes = []
    for batch in samples_per_step:
        samples = (samples + batch)[-window:]
        ranked = sorted(samples)
        sampled = ranked[math.ceil(0.95 * len(ranked)) - 1]
        error = sampled - target
        if error <= threshold:
            outcomes.append(("no_change", setting))
            continue
        integral += error
        if k2 > 0:
            integral = max(-clamp / k2, min(clamp / k2, integral))
        size = nominal - (k1 * error + k2 * integral)
        entry = _floor_entry(table, size)
        if entry is None or entry.accuracy_pct < bound.accuracy_min:
            if table.smallest.setting != setting:
                setting = table.smallest.setting
                samples = []
            outcomes.append(("infeasible", setting))
            continue
        if entry.setting != setting:
            setting = entry.setting
            samples = []
        outcomes.append(("setting", setting))
    return outcomes

def test_randomized_against_straight_line_loop():
    rng = random.Random(100)
    for _ in range(100):
        count = rng.randint(2, 20)
        sizes = sorted(rng.sample(range(10, 2000), count))
        accuracies = sorted(rng.sample(range(800, 1000), count))
        table = ProfileTable(
            ProfileEntry(SETTINGS[i], sizes[i] * 1000, accuracies[i] / 10)
            for i in range(count)
        )
        model = LinearLatencyModel(slope=rng.uniform(1e-5, 1e-4), intercept=rng.uniform(0, 20))
        k1 = rng.uniform(0, 2) * model.bytes_per_ms
        k2 = rng.uniform(0, 0.3) * model.bytes_per_ms
        clamp = 2.0 * table.largest.size_bytes
        window = rng.randint(1, 20)
        bound = QosBound(rng.uniform(40, 150), rng.uniform(80, 99))
        steps = []
        for _ in range(rng.randint(1, 30)):
            steps.append([rng.uniform(0, 400) for _ in range(rng.randint(1, 4))])

        config = ControllerConfig(k1=k1, k2=k2, integral_clamp_bytes=clamp, sample_window=window)
        controller = _controller(config=config, table=table, model=model)
        controller.set_target(bound)
        if bound.latency_max_ms <= model.intercept:
            continue
        observed = []
        for batch in steps:
            _feed(controller, batch)
            decision = controller.control_step()
            observed.append((decision.outcome.value, controller.current_setting))
        expected = _reference_run(table, model, k1, k2, clamp, window, bound, steps)
        assert observed == expected


def test_controllers_share_no_state():
    first = _controller()
    second = _controller()
    first.set_target(BOUND)
    second.set_target(BOUND)
    _feed(first, [400.0] * 5)
    first.control_step()
    assert second.current_setting == IDENTITY
    assert second.error_integral_ms == 0.0
    assert len(second.samples) == 0


def test_process_frame_applies_current_setting():
    controller = _controller()
    array = np.full((16, 16, 3), 90, dtype=np.uint8)
    frame = Frame.from_array(1, array, Colorspace.BGR, "cam0")
    assert controller.process_frame(frame, FrameDiffState()) == frame
    controller.current_setting = KnobSetting(framediff_threshold=0.18)
    state = FrameDiffState()
    assert controller.process_frame(frame, state) == frame
    assert controller.process_frame(frame, state) is None


def test_default_gains_settle_under_stationary_interference():
    table = synthetic_profile(100_000, 970_000, count=30, knee_bytes=25_000)
    model = fit_latency_model(JAAD_POINTS)
    scenario = ClosedLoopScenario(
        channel=ChannelModel(base=model, interference_schedule=[(0.0, 2.5)], jitter=0.02, seed=1),
        profile=table,
        bound=BOUND,
        duration_s=10.0,
    )
    result = run_closed_loop(scenario)
    assert result.infeasible_count == 0
    late = [p for p in result.series if p.t_ms >= 5000.0]
    assert late
    assert all(p.p95_ms <= BOUND.latency_max_ms + 5.0 for p in late)
    assert all(p.accuracy_pct >= BOUND.accuracy_min for p in late)
