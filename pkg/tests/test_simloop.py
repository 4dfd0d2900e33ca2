import asyncio
import dataclasses
import json
import math
import struct

import numpy as np
import pytest

from modules.errors import OverflowDetected
from modules.lindesign import PlantModel, place_gain, spectral_norm
from modules.polyapprox import eval_quantized_poly
from modules.protocol import ControllerNodeState
from modules.simloop import (
    CSV_VERSION_LINE,
    Mode,
    Scenario,
    TransportKind,
    prepare_plant,
    run_encrypted,
    run_event_triggered,
    run_linear,
    run_nonlinear,
    run_reference_plaintext,
)
from modules.zoom import Phase, containment_region


def wire_uint(value: int) -> bytes:
    magnitude = value.to_bytes((value.bit_length() + 7) // 8, "big")
    return struct.pack(">I", len(magnitude)) + magnitude


def wire_sint(value: int) -> bytes:
    return bytes([value < 0]) + wire_uint(abs(value))


def after_capture(record):
    return [step for step in record.steps if step.phase is not Phase.ZOOM_OUT]


def stage_deltas(record):
    deltas = {}
    for step in record.steps:
        if step.phase is not Phase.ZOOM_OUT:
            deltas.setdefault(step.stage, step.delta)
    return [deltas[i] for i in sorted(deltas)]


def test_zero_initial_state(scalar_scenario):
    record = run_linear(scalar_scenario(x0=0.0))
    assert record.t0 == 1
    assert len(record.steps) == 2
    assert record.final_norm == 0.0
    assert record.steps[0].phase is Phase.ZOOM_OUT
    assert record.steps[0].u == (0.0,)


def test_double_integrator_converges(double_integrator_scenario):
    scenario = double_integrator_scenario
    record = run_linear(scenario)
    design = scenario.design

    assert record.t0 is not None
    assert record.final_norm <= 1e-9 * math.sqrt(2)
    assert len(record.steps) < scenario.horizon
    assert record.update_times == sorted(set(record.update_times))
    assert record.trigger_count == sum(step.phase is not Phase.ZOOM_OUT for step in record.steps)

    deltas = np.array(stage_deltas(record))
    assert len(deltas) > 5
    assert np.allclose(deltas[1:] / deltas[:-1], design.omega, rtol=1e-12, atol=0)

    for step in record.steps:
        if step.phase is Phase.ZOOM_OUT:
            assert step.x_levels == (0, 0)
            assert step.u == (0.0,)
        else:
            region = containment_region(design.P_bar, step.delta, design.q_sat)
            assert region.contains(step.x, rtol=1e-9), f"t={step.t} left its stage region"


def test_encrypted_matches_plaintext_reference(double_integrator_scenario):
    encrypted = run_linear(double_integrator_scenario)
    reference = run_reference_plaintext(double_integrator_scenario)

    assert encrypted.to_csv() == reference.to_csv()
    assert [s.u_levels for s in encrypted.steps] == [s.u_levels for s in reference.steps]
    assert reference.key_bits is None
    assert encrypted.key_bits is not None


def test_reblinding_does_not_change_the_trajectory(double_integrator_scenario):
    scenario = dataclasses.replace(double_integrator_scenario, reblind_each_step=True, horizon=60)
    plain = dataclasses.replace(double_integrator_scenario, horizon=60)
    assert run_linear(scenario).to_csv() == run_reference_plaintext(plain).to_csv()


def test_tcp_matches_in_process(scalar_scenario):
    inprocess = run_linear(scalar_scenario(seed=4))
    tcp = run_linear(scalar_scenario(seed=4, transport=TransportKind.TCP))
    assert tcp.to_csv() == inprocess.to_csv()


@pytest.mark.parametrize("x0", [1.0, 10.0, 100.0])
def test_scalar_capture_and_convergence(scalar_scenario, x0):
    record = run_linear(scalar_scenario(x0=x0))
    assert 1 <= record.t0 <= 60
    assert record.final_norm <= 1e-9 * x0


def test_scalar_capture_times(scalar_scenario):
    record = run_reference_plaintext(scalar_scenario(x0=100.0))
    # x = 1600 at t = 4, Δ = 256
    assert record.t0 == 4
    assert record.steps[4].delta == 256.0
    assert record.steps[4].x_levels == (6,)
    assert run_reference_plaintext(scalar_scenario(x0=1.0)).t0 == 1


def test_undersized_key_overflows(scalar_scenario):
    scenario = scalar_scenario(x0=100.0, key_primes=(5, 7), r_max=2)
    # level 6 times gain -2 is -12, outside the band of N = 35
    with pytest.raises(OverflowDetected):
        run_linear(scenario)


def test_always_trigger_matches_periodic(scalar_scenario, double_integrator_scenario):
    periodic = run_reference_plaintext(double_integrator_scenario)
    always = run_reference_plaintext(
        dataclasses.replace(double_integrator_scenario, mode=Mode.EVENT_TRIGGERED, always_trigger=True)
    )
    assert always.to_csv() == periodic.to_csv()

    scalar = scalar_scenario(x0=10.0)
    encrypted = run_event_triggered(dataclasses.replace(scalar, mode=Mode.EVENT_TRIGGERED, always_trigger=True))
    assert encrypted.to_csv() == run_linear(scalar).to_csv()


def test_event_triggered_matches_reference(double_integrator_scenario):
    scenario = dataclasses.replace(double_integrator_scenario, mode=Mode.EVENT_TRIGGERED)
    record = run_event_triggered(scenario)
    assert record.final_norm <= 1e-9 * math.sqrt(2)
    assert run_reference_plaintext(scenario).to_csv() == record.to_csv()


def test_sampled_double_integrator_event_rate(scenario_config):
    _, run = scenario_config("double_integrator_et.ini")
    scenario = run.scenario
    record = run_reference_plaintext(scenario)
    steps = after_capture(record)

    assert record.t0 == 1
    assert record.final_norm <= 1e-9 * math.sqrt(2)
    assert len(record.steps) < scenario.horizon
    assert sum(step.triggered for step in steps) == record.trigger_count
    assert record.trigger_count < 0.5 * len(steps)

    head = dataclasses.replace(scenario, horizon=200)
    assert run_event_triggered(head).to_csv() == run_reference_plaintext(head).to_csv()


def test_event_triggered_holds_input():
    scenario = Scenario(
        mode=Mode.EVENT_TRIGGERED,
        plant=PlantModel(A=[[1.05]], B=[[1]]),
        K=[[0.15]],
        x0=[5.0],
        q_sat=10,
        seed=5,
        horizon=2000,
    )
    record = run_event_triggered(scenario)
    steps = after_capture(record)

    assert record.final_norm <= 1e-9 * 5
    assert record.trigger_count < 0.5 * len(steps)

    held = None
    for step in steps:
        if step.triggered:
            held = step.u
        else:
            assert step.u == held
            assert step.x_levels == ()


def test_nonlinear_square(square_scenario):
    scenario = square_scenario
    record = run_nonlinear(scenario)
    design = scenario.design

    first = record.steps[0]
    assert first.x_levels == (19, 15, 12)
    assert first.u_levels == (33,)
    assert record.steps[1].x[0] == pytest.approx(0.41095625, rel=1e-12)

    assert all(step.phase is Phase.FROZEN for step in record.steps)
    assert np.max(np.abs(record.states)) <= design.practical_radius
    assert len(record.steps) == 200
    assert record.to_csv() == run_reference_plaintext(scenario).to_csv()


def test_nonlinear_zero_freezes(scenario_config):
    _, run = scenario_config("nonlinear_zero.ini")
    scenario = run.scenario
    record = run_nonlinear(scenario)
    design = scenario.design

    assert len(record.update_times) == 7
    assert record.update_times[:2] == [0, 3]
    assert record.steps[-1].phase is Phase.FROZEN
    assert record.steps[-1].delta == pytest.approx(design.stage_delta(6), rel=1e-12)
    assert all(step.u == (0.0,) for step in record.steps)

    deltas = np.array(stage_deltas(record))
    assert np.allclose(deltas[1:] / deltas[:-1], design.omega, rtol=1e-12, atol=0)

    frozen_at = record.update_times[-1]
    assert np.max(np.abs(record.states[frozen_at:])) <= design.practical_radius


def test_runner_checks_mode(double_integrator_scenario):
    with pytest.raises(ValueError):
        run_nonlinear(double_integrator_scenario)


def test_privacy_of_controller_bound_traffic(scalar_scenario):
    scenario = scalar_scenario(x0=100.0, key_bits=64, r_max=2**20, seed=11)
    tap = []
    record = asyncio.run(run_encrypted(scenario, tap))
    stream = b"".join(tap)

    plant = prepare_plant(scenario)
    lam, r = plant.private.lam, plant.blinding.r
    assert r > 1

    needles = [
        lam.to_bytes((lam.bit_length() + 7) // 8, "big"),
        wire_uint(lam),
        str(lam).encode(),
        wire_uint(r),
        wire_sint(r),
        str(r).encode(),
    ]
    needles += [struct.pack(">d", step.delta) for step in record.steps]
    levels = {abs(v) for step in record.steps for v in step.x_levels if v != 0}
    assert levels
    for level in levels:
        needles += [wire_sint(level), wire_sint(-level), wire_uint(level)]
    k_q = int(scenario.design.K_q[0, 0])
    needles += [wire_sint(k_q), wire_sint(-k_q), wire_uint(k_q)]

    leaked = [needle for needle in needles if needle in stream]
    assert not leaked

    names = {f.name for f in dataclasses.fields(ControllerNodeState)}
    assert names <= {"public", "epoch", "gain_epoch", "blinded_gain", "message_counts"}


def test_trajectory_outputs(scalar_scenario):
    record = run_reference_plaintext(scalar_scenario(x0=1.0, horizon=5))
    lines = record.to_csv().splitlines()

    assert lines[0] == CSV_VERSION_LINE
    assert lines[1] == "t,x_0,u_0,delta,phase,stage,triggered,crypto_ms"
    assert lines[2] == "0,1.0,0.0,1.0,zoom-out,0,0,"
    assert len(lines) == 2 + len(record.steps)

    metrics = json.loads(record.metrics())
    assert metrics["mode"] == "linear"
    assert metrics["t0"] == 1
    assert metrics["steps"] == len(record.steps)
    assert metrics["crypto_ms_mean"] is None


def test_timing_column(scalar_scenario):
    record = run_linear(scalar_scenario(x0=1.0, horizon=5))
    assert all(step.crypto_ms is not None for step in record.steps)
    assert record.to_csv(record_timing=True).splitlines()[2].split(",")[-1] != ""
    assert json.loads(record.metrics(record_timing=True))["crypto_ms_mean"] > 0


@pytest.mark.slow
def test_random_plants_converge(rng):
    for _ in range(100):
        A = rng.normal(size=(2, 2))
        A *= 1.5 / spectral_norm(A)
        B = rng.normal(size=(2, 1))
        K = place_gain(A, B, rng.uniform(-0.5, 0.5, 2) + [0.0, 1e-3])
        x0 = rng.normal(size=2)
        scenario = Scenario(mode=Mode.LINEAR, plant=PlantModel(A=A, B=B), K=K, x0=x0)

        record = run_reference_plaintext(scenario)
        assert record.final_norm <= 1e-9 * np.linalg.norm(x0)
        deltas = np.array(stage_deltas(record))
        assert np.allclose(deltas[1:] / deltas[:-1], scenario.design.omega, rtol=1e-12, atol=0)


@pytest.mark.slow
def test_random_plants_encrypted_inputs_match(rng):
    for i in range(100):
        n_x = int(rng.integers(1, 5))
        n_u = int(rng.integers(1, min(n_x, 2) + 1))
        A = rng.normal(size=(n_x, n_x))
        A *= 1.5 / spectral_norm(A)
        B = rng.normal(size=(n_x, n_u))
        K = place_gain(A, B, rng.uniform(-0.5, 0.5, n_x) + 1e-3 * np.arange(n_x))
        x0 = rng.normal(size=n_x)
        scenario = Scenario(
            mode=Mode.LINEAR, plant=PlantModel(A=A, B=B), K=K, x0=x0, horizon=80, seed=i
        )

        encrypted = run_linear(scenario)
        reference = run_reference_plaintext(scenario)
        assert [s.u for s in encrypted.steps] == [s.u for s in reference.steps], f"plant {i}"
        assert [s.u_levels for s in encrypted.steps] == [s.u_levels for s in reference.steps]
        assert encrypted.to_csv() == reference.to_csv()


def test_nonlinear_inputs_are_quantized_polynomials(scenario_config):
    _, run = scenario_config("nonlinear_square_stages.ini")
    scenario = run.scenario
    record = run_nonlinear(scenario)
    design = scenario.design

    for step in record.steps:
        gain = design.gain_levels(step.delta)
        assert step.u_levels == (sum(int(g) * int(z) for g, z in zip(gain, step.x_levels)),)
        assert step.u[0] == eval_quantized_poly(gain, step.x_levels, step.delta)


def test_nonlinear_square_stages(scenario_config):
    _, run = scenario_config("nonlinear_square_stages.ini")
    scenario = run.scenario
    record = run_nonlinear(scenario)
    design = scenario.design

    assert design.freeze_stage == 2
    assert record.update_times == [0, 1, 2]
    assert [step.phase for step in record.steps[:3]] == [Phase.ZOOM_IN, Phase.ZOOM_IN, Phase.FROZEN]
    assert record.steps[0].x_levels == (1, 1, 1)
    assert record.steps[0].u_levels == (1,)
    assert record.steps[1].x[0] == pytest.approx(0.28, rel=1e-12)

    for step in record.steps:
        region = containment_region([[1.0]], step.delta, design.q_sat)
        assert region.contains(step.x, rtol=1e-9), f"t={step.t} left stage {step.stage}"
        if step.phase is Phase.FROZEN:
            assert abs(step.x[0]) <= design.practical_radius

    deltas = np.array(stage_deltas(record))
    assert len(deltas) == 3
    assert np.allclose(deltas[1:] / deltas[:-1], design.omega, rtol=1e-12, atol=0)
    assert record.to_csv() == run_reference_plaintext(scenario).to_csv()
