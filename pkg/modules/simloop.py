from __future__ import annotations

import asyncio
import csv
import enum
import functools
import io
import json
import math
import time

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

import config
from modules.errors import ContainmentViolated, DesignError
from modules.lindesign import LinearDesign, PlantModel, auto_key_bits, design_linear, should_trigger
from modules.paillier import PrivateKey, PublicKey, keygen, keypair_from_primes
from modules.polyapprox import NonlinearDesign, NonlinearModel, design_nonlinear, eval_quantized_poly
from modules.protocol import (
    ControllerNodeState,
    MessageType,
    PlantNodeState,
    PlantQuantizer,
    WireMessage,
    controller_handle,
    plant_apply_input,
    plant_emit_gain,
    plant_emit_state,
    plant_new_epoch,
)
from modules.transport import QueueTransport, StreamTransport, Transport
from modules.utils import get_logger
from modules.zoom import Phase, ZoomState, zoomin_step, zoomin_step_nonlinear, zoomout_step

logger = get_logger()

CSV_VERSION_LINE = "# ectl-trajectory v1"


class Mode(enum.Enum):
    LINEAR = "linear"
    EVENT_TRIGGERED = "event_triggered"
    NONLINEAR = "nonlinear"


class TransportKind(enum.Enum):
    INPROCESS = "inprocess"
    TCP = "tcp"


@dataclass(frozen=True, eq=False)
class Scenario:
    """
    A complete, deterministic run description.

    Attributes
    ----------------
    mode: :class:`Mode`
        Which loop to run.
    plant: Union[:class:`PlantModel`, :class:`NonlinearModel`]
        The plant, the nonlinear model carries its own gain k.
    x0: :class:`numpy.ndarray`
        Initial state.
    K: Optional[:class:`numpy.ndarray`]
        State feedback gain of the linear modes.
    key_bits: Union[:class:`int`, :class:`str`]
        Paillier modulus length, or ``"auto"`` to size it from the design's key bound.
    key_primes: Optional[Tuple[:class:`int`, :class:`int`]]
        Explicit primes, overrides ``key_bits``. Only meant for tiny test keys.
    seed: :class:`int`
        Seeds key generation, encryption randomness and blinding.
    """

    mode: Mode
    plant: Union[PlantModel, NonlinearModel]
    x0: np.ndarray
    K: Optional[np.ndarray] = None
    q_sat: Union[int, str] = "auto"
    epsilon: float = config.EPSILON
    safety_factor: float = config.SAFETY_FACTOR
    r_max: int = config.R_MAX
    Q: Optional[np.ndarray] = None
    Q_bar: Optional[np.ndarray] = None
    target_eps: float = 1e-6
    max_degree: int = 12
    delta0: Optional[float] = None
    freeze_radius: Optional[float] = None
    freeze_stage: Optional[int] = None
    horizon: int = config.DEFAULT_HORIZON
    key_bits: Union[int, str] = "auto"
    key_primes: Optional[Tuple[int, int]] = None
    seed: int = 0
    transport: TransportKind = TransportKind.INPROCESS
    reblind_each_step: bool = False
    always_trigger: bool = False
    convergence_floor: float = config.CONVERGENCE_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))
        if self.horizon < 1:
            raise ValueError(f"Horizon must be at least 1, got {self.horizon}")
        if self.key_bits != "auto" and int(self.key_bits) < 4:
            raise ValueError(f"Key length {self.key_bits} is too small")

        if self.mode is Mode.NONLINEAR:
            if not isinstance(self.plant, NonlinearModel):
                raise ValueError("Nonlinear mode needs a NonlinearModel")
            if self.q_sat == "auto":
                raise ValueError("Nonlinear mode needs an explicit q_sat")
            if self.x0.size != 1:
                raise ValueError("Nonlinear plants are scalar")
        else:
            if not isinstance(self.plant, PlantModel):
                raise ValueError(f"{self.mode.value} mode needs a linear PlantModel")
            if self.K is None:
                raise ValueError(f"{self.mode.value} mode needs a gain K")
            if self.x0.size != self.plant.n_x:
                raise ValueError(f"x0 has {self.x0.size} entries for a plant with {self.plant.n_x} states")

    @functools.cached_property
    def design(self) -> Union[LinearDesign, NonlinearDesign]:
        if self.mode is not Mode.NONLINEAR:
            return design_linear(
                self.plant,
                self.K,
                q_sat=self.q_sat,
                epsilon=self.epsilon,
                r_max=self.r_max,
                Q=self.Q,
                Q_bar=self.Q_bar,
                safety_factor=self.safety_factor,
            )

        design = design_nonlinear(
            self.plant,
            q_sat=int(self.q_sat),
            epsilon=self.epsilon,
            target_eps=self.target_eps,
            max_degree=self.max_degree,
            delta0=self.delta0,
            freeze_radius=self.freeze_radius,
            freeze_stage=self.freeze_stage,
            r_max=self.r_max,
            safety_factor=self.safety_factor,
        )
        lo, hi = self.plant.domain
        x0 = float(self.x0[0])
        if not lo <= x0 <= hi or abs(x0) > design.delta0 * (design.q_sat - 0.5):
            raise DesignError(f"x0={x0} must lie in {self.plant.domain} and within the initial quantizer range")

        return design

    def new_zoom(self) -> ZoomState:
        design = self.design
        if self.mode is Mode.NONLINEAR:
            return ZoomState.for_nonlinear(
                design.delta0, design.omega, design.q_sat, design.theta, design.epsilon, design.freeze_stage
            )
        return ZoomState.for_linear(design)

    def keypair(self) -> Tuple[PublicKey, PrivateKey]:
        if self.key_primes is not None:
            public, private = keypair_from_primes(*self.key_primes)
        else:
            bits = auto_key_bits(self.design.N_min) if self.key_bits == "auto" else int(self.key_bits)
            public, private = keygen(bits, self.seed)

        if public.n <= self.design.N_min:
            logger.warning(f"Modulus {public.n} does not exceed the key bound {self.design.N_min}, overflow is possible")
        logger.info(f"Using a {public.n.bit_length()}-bit key")

        return public, private


@dataclass(frozen=True)
class StepRecord:
    t: int
    x: Tuple[float, ...]
    u: Tuple[float, ...]
    delta: float
    phase: Phase
    stage: int
    triggered: bool
    x_levels: Tuple[int, ...] = ()
    u_levels: Tuple[int, ...] = ()
    crypto_ms: Optional[float] = None


@dataclass
class TrajectoryRecord:
    """
    Outcome of one run, steps are appended and never changed afterwards.

    Attributes
    ----------------
    steps: List[:class:`StepRecord`]
        One entry per executed step.
    t0: Optional[:class:`int`]
        Capture time, None if the run ended while zooming out.
    update_times: List[:class:`int`]
        Stage start times.
    trigger_count: :class:`int`
        Number of encrypted round trips after capture.
    final_norm: :class:`float`
        ‖x‖ after the last step.
    """

    mode: Mode
    steps: List[StepRecord] = field(default_factory=list)
    t0: Optional[int] = None
    update_times: List[int] = field(default_factory=list)
    trigger_count: int = 0
    final_norm: float = math.nan
    key_bits: Optional[int] = None
    design_summary: Dict[str, Any] = field(default_factory=dict)

    @property
    def states(self) -> np.ndarray:
        return np.array([step.x for step in self.steps])

    @property
    def crypto_ms_mean(self) -> Optional[float]:
        timings = [step.crypto_ms for step in self.steps if step.crypto_ms is not None]
        return sum(timings) / len(timings) if timings else None

    def to_csv(self, record_timing: bool = False) -> str:
        """Trajectory CSV, floats in their shortest round-trip form so equal runs give equal bytes."""
        n_x = len(self.steps[0].x) if self.steps else 0
        n_u = len(self.steps[0].u) if self.steps else 0

        buffer = io.StringIO()
        buffer.write(CSV_VERSION_LINE + "\n")
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(
            ["t"]
            + [f"x_{i}" for i in range(n_x)]
            + [f"u_{i}" for i in range(n_u)]
            + ["delta", "phase", "stage", "triggered", "crypto_ms"]
        )
        for step in self.steps:
            timing = f"{step.crypto_ms:.3f}" if record_timing and step.crypto_ms is not None else ""
            writer.writerow(
                [step.t]
                + [repr(v) for v in step.x]
                + [repr(v) for v in step.u]
                + [repr(step.delta), step.phase.value, step.stage, int(step.triggered), timing]
            )

        return buffer.getvalue()

    def metrics(self, record_timing: bool = False) -> str:
        document = {
            "mode": self.mode.value,
            "steps": len(self.steps),
            "t0": self.t0,
            "update_times": self.update_times,
            "trigger_count": self.trigger_count,
            "final_norm": self.final_norm,
            "key_bits": self.key_bits,
            "crypto_ms_mean": self.crypto_ms_mean if record_timing else None,
            "design": self.design_summary,
        }
        return json.dumps(document, indent=2) + "\n"


class PlaintextLink:
    """Round trip without encryption, the integer matvec done in the clear."""

    def __init__(self, quantizer: PlantQuantizer):
        self.quantizer = quantizer

    async def open(self):
        pass

    async def refresh_gain(self):
        pass

    async def round_trip(self, x, t: int) -> Tuple[np.ndarray, np.ndarray, Tuple[int, ...], Optional[float]]:
        levels = self.quantizer.state_levels(x)
        gain = self.quantizer.gain_levels()
        u_levels = tuple(sum(int(g) * int(z) for g, z in zip(row, levels)) for row in gain)
        if self.quantizer.nonlinear:
            u = np.array([eval_quantized_poly(row, levels, self.quantizer.zoom.delta) for row in gain])
        else:
            u = np.array([float(v) for v in u_levels]) * self.quantizer.input_scale()
        return u, levels, u_levels, None

    async def close(self):
        pass


class EncryptedLink:
    """
    Plant end of the encrypted round trip.

    Parameters
    ----------------
    plant: :class:`PlantNodeState`
        The plant node.
    transport: :class:`Transport`
        Channel to the controller.
    """

    def __init__(self, plant: PlantNodeState, transport: Transport):
        self.plant = plant
        self.transport = transport
        self.quantizer = plant.quantizer

    async def open(self):
        await self.transport.send(WireMessage.pubkey(self.plant.public))
        await self.transport.send(WireMessage.sensitivity_epoch(self.plant.epoch))
        await self.transport.send(plant_emit_gain(self.plant))

    async def refresh_gain(self):
        await self.transport.send(plant_new_epoch(self.plant))
        await self.transport.send(plant_emit_gain(self.plant))
        logger.debug(f"Gain epoch {self.plant.epoch} installed")

    async def round_trip(self, x, t: int) -> Tuple[np.ndarray, np.ndarray, Tuple[int, ...], Optional[float]]:
        started = time.perf_counter()
        msg = plant_emit_state(self.plant, x, t)
        elapsed = time.perf_counter() - started

        await self.transport.send(msg)
        reply = await self.transport.receive()

        started = time.perf_counter()
        u, u_levels = plant_apply_input(self.plant, reply, t)
        elapsed += time.perf_counter() - started

        return u, self.plant.last_levels, tuple(int(v) for v in u_levels), elapsed * 1000

    async def close(self):
        try:
            await self.transport.send(WireMessage.shutdown())
        finally:
            await self.transport.close()


Link = Union[PlaintextLink, EncryptedLink]


def _record_step(record, t, x, u, zoom, triggered, levels=(), u_levels=(), crypto_ms=None):
    record.steps.append(
        StepRecord(
            t=t,
            x=tuple(float(v) for v in np.ravel(x)),
            u=tuple(float(v) for v in np.ravel(u)),
            delta=float(zoom.delta),
            phase=zoom.phase,
            stage=zoom.stage_index,
            triggered=triggered,
            x_levels=tuple(int(v) for v in np.ravel(levels)),
            u_levels=tuple(u_levels),
            crypto_ms=crypto_ms,
        )
    )


async def _drive_linear(scenario: Scenario, link: Link, record: TrajectoryRecord) -> np.ndarray:
    quantizer = link.quantizer
    design, zoom = quantizer.design, quantizer.zoom
    A, B = design.plant.A, design.plant.B
    event_triggered = scenario.mode is Mode.EVENT_TRIGGERED

    x = scenario.x0.copy()
    floor = scenario.convergence_floor * np.linalg.norm(x)
    held_u = np.zeros(design.n_u)
    x_held = np.zeros(design.n_x)

    for t in range(scenario.horizon):
        captured = False
        if zoom.phase is Phase.ZOOM_OUT:
            _, captured = zoomout_step(zoom, x, t)

        if zoom.phase is Phase.ZOOM_OUT:
            # keep the channel busy with E(0) so traffic does not reveal the phase
            u, levels, u_levels, crypto_ms = await link.round_trip(x, t)
            _record_step(record, t, x, u, zoom, False, levels, u_levels, crypto_ms)
        else:
            fire = (
                captured
                or not event_triggered
                or scenario.always_trigger
                or should_trigger(design.theta, x, x - x_held)
            )
            if fire:
                if not captured:
                    zoomin_step(zoom, x, t)
                if scenario.reblind_each_step:
                    await link.refresh_gain()
                u, levels, u_levels, crypto_ms = await link.round_trip(x, t)
                x_held = levels * zoom.delta
                held_u = u
                record.trigger_count += 1
                _record_step(record, t, x, u, zoom, True, levels, u_levels, crypto_ms)
            else:
                u = held_u
                _record_step(record, t, x, u, zoom, False)

        x = A @ x + B @ u
        if zoom.phase is not Phase.ZOOM_OUT and np.linalg.norm(x) <= floor:
            break

    return x


async def _drive_nonlinear(scenario: Scenario, link: Link, record: TrajectoryRecord) -> np.ndarray:
    quantizer = link.quantizer
    design, zoom = quantizer.design, quantizer.zoom
    model = design.model
    limit = design.practical_radius * (1 + 1e-12)

    x = float(scenario.x0[0])
    for t in range(scenario.horizon):
        advanced = False
        if t > 0:
            _, advanced = zoomin_step_nonlinear(zoom, x, t)
        if advanced or scenario.reblind_each_step:
            await link.refresh_gain()

        if zoom.phase is Phase.FROZEN and abs(x) > limit:
            raise ContainmentViolated(f"|x|={abs(x):.6g} left the practical set of radius {limit:.6g} at t={t}")

        u, levels, u_levels, crypto_ms = await link.round_trip(np.array([x]), t)
        record.trigger_count += 1
        _record_step(record, t, [x], u, zoom, True, levels, u_levels, crypto_ms)

        x = model.step(x, float(u[0]))

    return np.array([x])


async def drive(scenario: Scenario, link: Link, key_bits: Optional[int] = None) -> TrajectoryRecord:
    """Run the closed loop for ``scenario`` over ``link`` and collect the trajectory."""
    record = TrajectoryRecord(mode=scenario.mode, key_bits=key_bits)
    design = link.quantizer.design
    record.design_summary = {
        "q_sat": design.q_sat,
        "theta": design.theta,
        "omega": design.omega,
        "N_min": design.N_min,
    }

    await link.open()
    try:
        if scenario.mode is Mode.NONLINEAR:
            x = await _drive_nonlinear(scenario, link, record)
        else:
            x = await _drive_linear(scenario, link, record)
    finally:
        await link.close()

    zoom = link.quantizer.zoom
    record.t0 = zoom.t0
    record.update_times = list(zoom.update_times)
    record.final_norm = float(np.linalg.norm(x))
    logger.info(
        f"{scenario.mode.value} run finished after {len(record.steps)} steps, "
        f"t0={record.t0} triggers={record.trigger_count} final_norm={record.final_norm:.3g}"
    )

    return record


def prepare_plant(scenario: Scenario) -> PlantNodeState:
    """Keys, blinding and a fresh quantizer for one encrypted run."""
    public, private = scenario.keypair()
    quantizer = PlantQuantizer(scenario.design, scenario.new_zoom())
    return PlantNodeState.create(public, private, quantizer, scenario.seed, scenario.design.r_max)


class ControllerNode:
    """Event loop of the controller, it answers every encrypted state until SHUTDOWN."""

    def __init__(self):
        self.state = ControllerNodeState()

    async def serve(self, transport: Transport):
        try:
            while True:
                msg = await transport.receive()
                if msg.msg_type is MessageType.SHUTDOWN:
                    self.state.message_counts[msg.msg_type.name] += 1
                    break
                reply = controller_handle(self.state, msg)
                if reply is not None:
                    await transport.send(reply)
        finally:
            await transport.close()
            counts = ", ".join(f"{name}={count}" for name, count in sorted(self.state.message_counts.items()))
            logger.info(f"Controller handled {counts or 'no messages'}")


async def _run_nodes(scenario: Scenario, plant: PlantNodeState, plant_end: Transport, controller_end: Transport):
    plant_task = asyncio.create_task(drive(scenario, EncryptedLink(plant, plant_end), plant.public.n.bit_length()))
    controller_task = asyncio.create_task(ControllerNode().serve(controller_end))

    done, _ = await asyncio.wait({plant_task, controller_task}, return_when=asyncio.FIRST_EXCEPTION)
    for task in (plant_task, controller_task):
        if task in done and task.exception() is not None:
            for other in (plant_task, controller_task):
                other.cancel()
            raise task.exception()

    await controller_task
    return plant_task.result()


async def run_encrypted(scenario: Scenario, tap: Optional[List[bytes]] = None) -> TrajectoryRecord:
    """
    Encrypted run with both nodes in this process.

    Parameters
    ----------------
    scenario: :class:`Scenario`
        The run.
    tap: Optional[List[:class:`bytes`]]
        Collects every frame sent towards the controller.
    """
    plant = prepare_plant(scenario)

    if scenario.transport is TransportKind.INPROCESS:
        plant_end, controller_end = QueueTransport.pair(tap)
        return await _run_nodes(scenario, plant, plant_end, controller_end)

    accepted = asyncio.Queue()
    server = await asyncio.start_server(lambda r, w: accepted.put_nowait((r, w)), "127.0.0.1", 0)
    try:
        port = server.sockets[0].getsockname()[1]
        reader, writer = await asyncio.open_connection("127.0.0.1", port)
        controller_reader, controller_writer = await accepted.get()
        return await _run_nodes(
            scenario,
            plant,
            StreamTransport(reader, writer, tap),
            StreamTransport(controller_reader, controller_writer),
        )
    finally:
        server.close()
        await server.wait_closed()


async def run_plaintext(scenario: Scenario) -> TrajectoryRecord:
    return await drive(scenario, PlaintextLink(PlantQuantizer(scenario.design, scenario.new_zoom())))


def _check_mode(scenario: Scenario, *modes: Mode):
    if scenario.mode not in modes:
        raise ValueError(f"Scenario mode {scenario.mode.value} does not match this runner")


def run_linear(scenario: Scenario) -> TrajectoryRecord:
    _check_mode(scenario, Mode.LINEAR)
    return asyncio.run(run_encrypted(scenario))


def run_event_triggered(scenario: Scenario) -> TrajectoryRecord:
    _check_mode(scenario, Mode.EVENT_TRIGGERED)
    return asyncio.run(run_encrypted(scenario))


def run_nonlinear(scenario: Scenario) -> TrajectoryRecord:
    _check_mode(scenario, Mode.NONLINEAR)
    return asyncio.run(run_encrypted(scenario))


def run_reference_plaintext(scenario: Scenario) -> TrajectoryRecord:
    return asyncio.run(run_plaintext(scenario))
