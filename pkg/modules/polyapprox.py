from __future__ import annotations

import math

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from numpy.polynomial import polynomial as P

import config
from modules.encoding import QuantizerSpec, is_saturated, quantize, quantize_vector
from modules.errors import (
    DegreeExhausted,
    DesignError,
    LengthMismatch,
    NoConvergence,
    NotSchur,
    QSatTooSmall,
    SaturationInDomain,
)
from modules.lindesign import key_size_bound
from modules.utils import get_logger

logger = get_logger()

ALPHAS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "zero": np.zeros_like,
    "square": np.square,
    "sin": np.sin,
    "cubic": lambda x: np.power(x, 3),
}


@dataclass(frozen=True, eq=False)
class NonlinearModel:
    """
    Scalar plant x[t+1] = a x[t] + b (u[t] - alpha(x[t])) with local feedback gain k.

    Attributes
    ----------------
    a, b: :class:`float`
        Plant coefficients, a*b != 0.
    alpha: Callable
        Vectorised nonlinearity.
    domain: Tuple[:class:`float`, :class:`float`]
        Interval X on which alpha is approximated, it must contain 0.
    k: :class:`float`
        Gain with |a - bk| < 1.
    """

    a: float
    b: float
    alpha: Callable[[np.ndarray], np.ndarray]
    domain: Tuple[float, float]
    k: float

    def __post_init__(self):
        if self.a * self.b == 0:
            raise ValueError("Nonlinear plant needs a*b != 0")
        lo, hi = self.domain
        if not lo <= 0 <= hi or lo == hi:
            raise ValueError(f"Domain {self.domain} must be an interval around 0")
        if abs(self.a - self.b * self.k) >= 1:
            raise NotSchur(f"|a - bk| = {abs(self.a - self.b * self.k):.4f} is not below 1")

    def evaluate(self, x):
        return self.alpha(np.asarray(x, dtype=float))

    def step(self, x: float, u: float) -> float:
        return self.a * x + self.b * (u - float(self.evaluate(x)))


@dataclass(frozen=True)
class PolyApprox:
    """
    Polynomial fit of alpha.

    Attributes
    ----------------
    degree: :class:`int`
        Degree p.
    coeffs: Tuple[:class:`float`, ...]
        c_0 ... c_p, lowest power first.
    eps1_prime: :class:`float`
        Measured sup error on the domain.
    """

    degree: int
    coeffs: Tuple[float, ...]
    eps1_prime: float

    def __call__(self, x):
        return P.polyval(np.asarray(x, dtype=float), self.coeffs)


def chebyshev_nodes(lo: float, hi: float, count: int) -> np.ndarray:
    k = np.arange(count)
    return (lo + hi) / 2 + (hi - lo) / 2 * np.cos(np.pi * (k + 0.5) / count)


def fit_polynomial(model: NonlinearModel, target_eps: float, max_degree: int) -> PolyApprox:
    """
    Least-squares fit of increasing degree on Chebyshev nodes until the sup error is below ``target_eps``.

    The error is measured on a uniform grid of :data:`config.POLY_GRID_POINTS` points.

    Raises
    ------
    :class:`DegreeExhausted`
        If ``max_degree`` is reached first.
    """
    lo, hi = model.domain
    grid = np.linspace(lo, hi, config.POLY_GRID_POINTS)
    truth = model.evaluate(grid)

    error = math.inf
    for degree in range(max_degree + 1):
        nodes = chebyshev_nodes(lo, hi, 2 * degree + 1)
        coeffs = P.polyfit(nodes, model.evaluate(nodes), degree)
        error = float(np.max(np.abs(P.polyval(grid, coeffs) - truth)))
        if error <= target_eps:
            logger.debug(f"Degree {degree} fit, sup error {error:.3g}")
            return PolyApprox(degree=degree, coeffs=tuple(float(c) for c in coeffs), eps1_prime=error)

    raise DegreeExhausted(f"Best sup error {error:.3g} at degree {max_degree} is above {target_eps:.3g}")


def monomial_range(lo: float, hi: float, j: int) -> Tuple[float, float]:
    """Range of x^j over [lo, hi]."""
    if j == 0:
        return 1.0, 1.0

    candidates = [lo**j, hi**j]
    if lo < 0 < hi:
        candidates.append(0.0)

    return min(candidates), max(candidates)


def monomial_vector(x: float, p: int) -> np.ndarray:
    return np.array([float(x) ** j for j in range(p + 1)])


def eps2_bound(approx: PolyApprox, spec: QuantizerSpec, domain: Tuple[float, float]) -> float:
    """
    Certified bound on the error the quantized polynomial adds per unit of Δ/2 over ``domain``.

    Raises
    ------
    :class:`SaturationInDomain`
        If a coefficient saturates, or a monomial with a nonzero coefficient level saturates inside ``domain``.
    """
    lo, hi = domain
    total = 0.0
    for j, c in enumerate(approx.coeffs):
        level = quantize(spec, c).level
        if is_saturated(spec, c):
            raise SaturationInDomain(f"Coefficient c_{j}={c:.6g} saturates at delta={spec.delta:.6g}")

        low, high = monomial_range(lo, hi, j)
        if level != 0 and (is_saturated(spec, low) or is_saturated(spec, high)):
            raise SaturationInDomain(f"x^{j} saturates on [{lo:.6g}, {hi:.6g}] at delta={spec.delta:.6g}")

        total += max(abs(low), abs(high)) + spec.delta / 2 + abs(level * spec.delta) + abs(c)

    return total


def eval_quantized_poly(coeff_levels: Sequence[int], monomial_levels: Sequence[int], delta: float) -> float:
    """sum(a_j * b_j) * Δ², the plaintext of what the controller computes."""
    if len(coeff_levels) != len(monomial_levels):
        raise LengthMismatch(f"{len(coeff_levels)} coefficients for {len(monomial_levels)} monomials")

    total = sum(int(a) * int(b) for a, b in zip(coeff_levels, monomial_levels))
    return float(total) * delta**2


def approximation_gap(model: NonlinearModel, approx: PolyApprox, spec: QuantizerSpec, points) -> np.ndarray:
    """|alpha_bar(x_bar) - alpha(x)| at every point, alpha_bar being the quantized polynomial."""
    points = np.asarray(points, dtype=float)
    coeff_levels = quantize_vector(spec, approx.coeffs)
    powers = np.power.outer(points, np.arange(approx.degree + 1))
    monomial_levels = quantize_vector(spec, powers)

    quantized = (monomial_levels @ coeff_levels).astype(float) * spec.delta * spec.delta
    return np.abs(quantized - model.evaluate(points))


@dataclass(frozen=True, eq=False)
class NonlinearDesign:
    """
    Design of the encrypted loop around a polynomial approximation.

    Attributes
    ----------------
    model: :class:`NonlinearModel`
        The plant.
    approx: :class:`PolyApprox`
        Fit of alpha.
    q_sat: :class:`int`
        Saturation shared by every quantizer.
    epsilon: :class:`float`
        Margin in the stage threshold.
    delta0: :class:`float`
        Sensitivity at t=0.
    theta: :class:`float`
        Largest per-stage Theta.
    omega: :class:`float`
        Zoom-in ratio.
    freeze_stage: :class:`int`
        Last zoom-in stage f.
    stage_thetas: Tuple[:class:`float`, ...]
        Theta of stages 0 ... f.
    """

    model: NonlinearModel
    approx: PolyApprox
    q_sat: int
    epsilon: float
    delta0: float
    theta: float
    omega: float
    freeze_stage: int
    stage_thetas: Tuple[float, ...]
    r_max: int
    N_min: int
    gain_length: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "gain_length", max(self.approx.degree + 1, 2))

    def stage_delta(self, i: int) -> float:
        return self.delta0 * self.omega**i

    @property
    def practical_radius(self) -> float:
        """Bound on |x[t]| once the sensitivity is frozen."""
        return self.stage_delta(self.freeze_stage) * (self.q_sat - 0.5)

    def gain_levels(self, delta: float) -> np.ndarray:
        """Integer gain vector, coefficient levels with the k level subtracted at the x slot."""
        spec = QuantizerSpec(delta, self.q_sat)
        gain = np.zeros(self.gain_length, dtype=np.int64)
        gain[: self.approx.degree + 1] = quantize_vector(spec, self.approx.coeffs)
        gain[1] -= quantize(spec, self.model.k).level
        return gain


def _stage_theta(model: NonlinearModel, approx: PolyApprox, q_sat: int, delta: float) -> float:
    spec = QuantizerSpec(delta, q_sat)
    lo, hi = model.domain
    radius = (q_sat - 0.5) * delta
    eps2 = eps2_bound(approx, spec, (max(lo, -radius), min(hi, radius)))

    if is_saturated(spec, model.k):
        raise SaturationInDomain(f"Gain k={model.k:.6g} saturates at delta={delta:.6g}")

    k_bar = quantize(spec, model.k).reconstruct
    rho_bar = abs(model.a - model.b * k_bar)
    if rho_bar >= 1:
        raise NotSchur(f"|a - b k_bar| = {rho_bar:.4f} at delta={delta:.6g}")

    m = 2 * approx.eps1_prime / delta + eps2
    return abs(model.b) * (abs(k_bar) + m) / (1 - rho_bar)


def _freeze_stage(delta0: float, omega: float, q_sat: int, freeze_radius: float) -> int:
    f = 0
    while f < config.NONLINEAR_MAX_STAGES and omega ** (f + 1) * delta0 * (q_sat - 0.5) >= freeze_radius:
        f += 1

    return f


def design_nonlinear(
    model: NonlinearModel,
    *,
    q_sat: int,
    epsilon: float = config.EPSILON,
    target_eps: float = 1e-6,
    max_degree: int = 12,
    delta0: Optional[float] = None,
    freeze_radius: Optional[float] = None,
    freeze_stage: Optional[int] = None,
    r_max: int = config.R_MAX,
    safety_factor: float = config.SAFETY_FACTOR,
) -> NonlinearDesign:
    """
    Fit alpha and pick Δ₀, Θ, Ω and the freeze stage.

    Parameters
    ----------------
    model: :class:`NonlinearModel`
        The plant.
    q_sat: :class:`int`
        Saturation shared by every quantizer.
    delta0: Optional[:class:`float`]
        Initial sensitivity, by default the largest value that keeps k_bar stabilizing and covers X.
    freeze_radius: Optional[:class:`float`]
        Stages continue while the stage radius stays above this value,
        by default the smallest radius that keeps k and every coefficient unsaturated.
    freeze_stage: Optional[:class:`int`]
        Explicit freeze stage, overrides ``freeze_radius``.

    Raises
    ------
    :class:`QSatTooSmall`
        If Omega >= 1.
    :class:`SaturationInDomain`
        If a stage saturates a coefficient, k, or an active monomial.
    :class:`NoConvergence`
        If Theta does not settle.
    """
    approx = fit_polynomial(model, target_eps, max_degree)
    lo, hi = model.domain
    rho = abs(model.a - model.b * model.k)
    delta_cap = safety_factor * 2 * (1 - rho) / abs(model.b)

    if delta0 is None:
        delta0 = min(delta_cap, max(abs(lo), abs(hi)) / (q_sat - 0.5))
    elif not 0 < delta0 <= delta_cap:
        raise DesignError(f"delta0={delta0} must be in (0, {delta_cap:.6g}]")

    if freeze_stage is None:
        if freeze_radius is None:
            freeze_radius = max([abs(model.k)] + [abs(c) for c in approx.coeffs])
        if freeze_radius <= 0:
            raise DesignError("Zero gain and zero nonlinearity leave no freeze radius, set freeze_stage")
    elif freeze_stage < 0:
        raise DesignError(f"freeze_stage must be non-negative, got {freeze_stage}")

    theta = _stage_theta(model, approx, q_sat, delta0)
    for _ in range(20):
        omega = (theta + epsilon + 1) / (q_sat - 0.5)
        if omega >= 1:
            raise QSatTooSmall(f"q_sat={q_sat} gives Omega={omega:.4f}")

        f = freeze_stage if freeze_stage is not None else _freeze_stage(delta0, omega, q_sat, freeze_radius)
        thetas = tuple(_stage_theta(model, approx, q_sat, delta0 * omega**i) for i in range(f + 1))
        if max(thetas) <= theta:
            break
        theta = max(thetas)
    else:
        raise NoConvergence("Theta did not settle across the zoom-in stages")

    gain_length = max(approx.degree + 1, 2)
    n_min = key_size_bound(q_sat, 2 * q_sat, gain_length, r_max)

    design = NonlinearDesign(
        model=model,
        approx=approx,
        q_sat=q_sat,
        epsilon=epsilon,
        delta0=delta0,
        theta=theta,
        omega=omega,
        freeze_stage=f,
        stage_thetas=thetas,
        r_max=r_max,
        N_min=n_min,
    )

    # the certified bound must hold on a dense grid of every stage
    for i in range(f + 1):
        delta = design.stage_delta(i)
        radius = (q_sat - 0.5) * delta
        points = np.linspace(max(lo, -radius), min(hi, radius), config.POLY_GRID_POINTS)
        spec = QuantizerSpec(delta, q_sat)
        m = 2 * approx.eps1_prime / delta + eps2_bound(approx, spec, (points[0], points[-1]))
        if np.max(approximation_gap(model, approx, spec, points)) > m * delta / 2 * (1 + 1e-9):
            raise DesignError(f"Quantized polynomial misses its error bound at stage {i}")

    logger.info(
        f"Nonlinear design: degree={approx.degree} eps1'={approx.eps1_prime:.3g} delta0={delta0:.6g} "
        f"theta={theta:.6g} omega={omega:.6g} f={f} N_min={n_min}"
    )

    return design
