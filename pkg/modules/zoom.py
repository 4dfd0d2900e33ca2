from __future__ import annotations

import enum
import math

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from modules.encoding import QuantizerSpec, quantize, quantize_vector
from modules.errors import CaptureFailed
from modules.lindesign import LinearDesign, eig_extremes_sym
from modules.utils import get_logger

logger = get_logger()


class Phase(enum.Enum):
    ZOOM_OUT = "zoom-out"
    ZOOM_IN = "zoom-in"
    FROZEN = "frozen"


@dataclass
class ZoomState:
    """
    Sensitivity schedule of the state quantizer.

    Attributes
    ----------------
    phase: :class:`Phase`
        Current phase.
    delta: :class:`float`
        Current sensitivity Δ[t].
    omega: :class:`float`
        Zoom-in ratio in (0, 1).
    q_sat: :class:`int`
        Saturation of the state quantizer.
    capture_threshold: :class:`float`
        Bound on the level norm that ends the zoom-out phase.
    update_threshold: :class:`float`
        Bound on the level norm that advances a zoom-in stage.
    norm_a: :class:`float`
        ‖A‖, zoom-out grows Δ as ‖A‖^(2t).
    delta0: Optional[:class:`float`]
        Sensitivity at capture.
    stage_index: :class:`int`
        Zoom-in stage i, Δ = Ω^i Δ₀.
    t0: Optional[:class:`int`]
        Capture time.
    update_times: List[:class:`int`]
        Times at which a stage began, t0 first.
    freeze_stage: Optional[:class:`int`]
        Stage after which Δ stays constant (nonlinear loop only).
    """

    phase: Phase
    delta: float
    omega: float
    q_sat: int
    capture_threshold: float
    update_threshold: float
    norm_a: float = 1.0
    delta0: Optional[float] = None
    stage_index: int = 0
    t0: Optional[int] = None
    update_times: List[int] = field(default_factory=list)
    freeze_stage: Optional[int] = None

    @classmethod
    def for_linear(cls, design: LinearDesign) -> ZoomState:
        lo, hi = eig_extremes_sym(design.P_bar)
        root_n = math.sqrt(design.n_x)
        return cls(
            phase=Phase.ZOOM_OUT,
            delta=1.0,
            omega=design.omega,
            q_sat=design.q_sat,
            capture_threshold=(design.q_sat - 0.5) * math.sqrt(lo / hi) - root_n / 2,
            update_threshold=design.omega_prime - root_n / 2,
            norm_a=design.norm_a,
        )

    @classmethod
    def for_nonlinear(
        cls, delta0: float, omega: float, q_sat: int, theta: float, epsilon: float, freeze_stage: int
    ) -> ZoomState:
        return cls(
            phase=Phase.FROZEN if freeze_stage == 0 else Phase.ZOOM_IN,
            delta=delta0,
            omega=omega,
            q_sat=q_sat,
            capture_threshold=math.inf,
            update_threshold=theta + epsilon + 0.5,
            delta0=delta0,
            t0=0,
            update_times=[0],
            freeze_stage=freeze_stage,
        )

    @property
    def spec(self) -> QuantizerSpec:
        return QuantizerSpec(self.delta, self.q_sat)

    def stage_delta(self, i: int) -> float:
        # Ω^i Δ₀ rather than repeated multiplication so stages stay exactly geometric
        return self.delta0 * self.omega**i

    def _advance(self, t: int):
        self.stage_index += 1
        self.delta = self.stage_delta(self.stage_index)
        self.update_times.append(t)
        logger.debug(f"Zoom stage {self.stage_index} at t={t}, delta={self.delta:.6g}")


def zoomout_step(state: ZoomState, x, t: int) -> Tuple[float, bool]:
    """
    Zoom-out update for time ``t``: Δ[t] = ‖A‖^(2t), capture once the quantized state is small.

    Returns
    -------
    :class:`tuple`
        (Δ[t], captured)
    """
    if state.phase is not Phase.ZOOM_OUT:
        raise ValueError(f"zoomout_step called in phase {state.phase.value}")

    try:
        delta = state.norm_a ** (2 * t)
    except OverflowError:
        delta = math.inf
    if not math.isfinite(delta) or delta <= 0:
        raise CaptureFailed(f"Zoom-out sensitivity left the floating point range at t={t}")
    state.delta = delta

    if t < 1:
        return delta, False

    levels = quantize_vector(QuantizerSpec(delta, state.q_sat), x)
    if np.linalg.norm(levels) > state.capture_threshold:
        return delta, False

    state.phase = Phase.ZOOM_IN
    state.t0 = t
    state.delta0 = delta
    state.stage_index = 0
    state.update_times = [t]
    logger.debug(f"State captured at t0={t}, delta0={delta:.6g}")

    return delta, True


def zoomin_step(state: ZoomState, x, t: int) -> Tuple[float, bool]:
    """
    Advance one stage when ‖q_{Δ_i}(x)‖ <= Ω' - √n_x/2, at most once per step.

    Returns
    -------
    :class:`tuple`
        (Δ[t], stage_advanced)
    """
    if state.phase is not Phase.ZOOM_IN:
        raise ValueError(f"zoomin_step called in phase {state.phase.value}")

    if t < state.update_times[-1] + 1:
        return state.delta, False

    if np.linalg.norm(quantize_vector(state.spec, x)) > state.update_threshold:
        return state.delta, False

    state._advance(t)
    return state.delta, True


def zoomin_step_nonlinear(state: ZoomState, x: float, t: int) -> Tuple[float, bool]:
    """Scalar zoom-in with threshold Θ + ε + 1/2 that freezes once stage ``freeze_stage`` is reached."""
    if state.phase is Phase.FROZEN:
        return state.delta, False
    if state.phase is not Phase.ZOOM_IN:
        raise ValueError(f"zoomin_step_nonlinear called in phase {state.phase.value}")

    if t < state.update_times[-1] + 1 or state.stage_index >= state.freeze_stage:
        return state.delta, False

    if abs(quantize(state.spec, float(x)).level) > state.update_threshold:
        return state.delta, False

    state._advance(t)
    if state.stage_index == state.freeze_stage:
        state.phase = Phase.FROZEN
        logger.debug(f"Sensitivity frozen at stage {state.stage_index}")

    return state.delta, True


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    shape: np.ndarray
    radius_sq: float

    def contains(self, x, rtol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float).reshape(-1)
        return bool(x @ self.shape @ x <= self.radius_sq * (1 + rtol))


def containment_region(p_bar, delta_i: float, q_sat: int) -> Ellipsoid:
    """The ellipsoid xᵀP̄x <= λ_min(P̄) Δ_i² (q_sat - 1/2)² that holds the state during stage i."""
    p_bar = np.atleast_2d(np.asarray(p_bar, dtype=float))
    lo, _ = eig_extremes_sym(p_bar)
    return Ellipsoid(shape=p_bar, radius_sq=lo * delta_i**2 * (q_sat - 0.5) ** 2)
