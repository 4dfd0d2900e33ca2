from __future__ import annotations

import math

from dataclasses import dataclass
from typing import NamedTuple, Tuple, Union

import numpy as np

from scipy import signal

import config
from modules.encoding import QuantizerSpec, quantize_matrix
from modules.errors import DegenerateB, NoConvergence, NotControllable, NotSchur, QSatTooSmall
from modules.utils import get_logger

logger = get_logger()


def _as_matrix(m) -> np.ndarray:
    return np.atleast_2d(np.asarray(m, dtype=float))


@dataclass(frozen=True, eq=False)
class PlantModel:
    """
    Linear plant x[t+1] = Ax[t] + Bu[t].

    Attributes
    ----------------
    A: :class:`numpy.ndarray`
        n_x by n_x state matrix.
    B: :class:`numpy.ndarray`
        n_x by n_u input matrix.
    """

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A)
        B = np.asarray(self.B, dtype=float).reshape(A.shape[0], -1)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got shape {A.shape}")

        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

        n = A.shape[0]
        controllability = np.hstack([np.linalg.matrix_power(A, i) @ B for i in range(n)])
        if np.linalg.matrix_rank(controllability) < n:
            raise NotControllable("(A, B) is not controllable")

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]


class ZoomConstants(NamedTuple):
    theta: float
    omega_prime: float
    omega: float


@dataclass(frozen=True, eq=False)
class LinearDesign:
    """
    Everything the encrypted state-feedback loop needs, computed once up front.

    Attributes
    ----------------
    plant: :class:`PlantModel`
        The plant.
    K: :class:`numpy.ndarray`
        Stabilizing gain, u = -Kx.
    Q, P: :class:`numpy.ndarray`
        Lyapunov certificate of A - BK.
    delta_g: :class:`float`
        Sensitivity of the gain quantizer.
    q_sat_g: :class:`int`
        Saturation of the gain quantizer, large enough that K never saturates.
    K_q: :class:`numpy.ndarray`
        Integer gain levels, K_bar = K_q * delta_g.
    Q_bar, P_bar: :class:`numpy.ndarray`
        Lyapunov certificate of A - BK_bar.
    theta, omega_prime, omega: :class:`float`
        Zoom constants, omega in (0, 1) is the zoom-in ratio.
    q_sat: :class:`int`
        Saturation of the state quantizer.
    N_min: :class:`int`
        Lower bound on the Paillier modulus that rules out overflow.
    """

    plant: PlantModel
    K: np.ndarray
    Q: np.ndarray
    P: np.ndarray
    delta_g: float
    q_sat_g: int
    K_q: np.ndarray
    K_bar: np.ndarray
    Q_bar: np.ndarray
    P_bar: np.ndarray
    theta: float
    omega_prime: float
    omega: float
    q_sat: int
    epsilon: float
    r_max: int
    N_min: int

    @property
    def n_x(self) -> int:
        return self.plant.n_x

    @property
    def n_u(self) -> int:
        return self.plant.n_u

    @property
    def p_bar_extremes(self) -> Tuple[float, float]:
        return eig_extremes_sym(self.P_bar)

    @property
    def norm_a(self) -> float:
        return spectral_norm(self.plant.A)


def eig_extremes_sym(
    s,
    tolerance: float = config.JACOBI_TOLERANCE,
    max_sweeps: int = config.JACOBI_MAX_SWEEPS,
) -> Tuple[float, float]:
    """
    Smallest and largest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.

    Parameters
    ----------------
    s: :class:`numpy.ndarray`
        Symmetric matrix.
    tolerance: :class:`float`
        Sweeps stop once the off-diagonal Frobenius norm is below ``tolerance`` times the
        Frobenius norm of ``s``.
    max_sweeps: :class:`int`
        Sweep budget.

    Returns
    -------
    :class:`tuple`
        (lambda_min, lambda_max)

    Raises
    ------
    :class:`NoConvergence`
        If the budget runs out.
    """
    a = np.array(_as_matrix(s), dtype=float)
    if a.shape[0] != a.shape[1] or not np.allclose(a, a.T, rtol=1e-10, atol=1e-12):
        raise ValueError("Matrix is not symmetric")

    n = a.shape[0]
    scale = np.linalg.norm(a)
    if n == 1 or scale == 0:
        diagonal = np.diag(a)
        return float(diagonal.min()), float(diagonal.max())

    for _ in range(max_sweeps):
        off_diagonal = np.linalg.norm(a - np.diag(np.diag(a)))
        if off_diagonal <= tolerance * scale:
            diagonal = np.diag(a)
            return float(diagonal.min()), float(diagonal.max())

        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue

                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s_ = t * c

                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s_ * col_q
                a[:, q] = s_ * col_p + c * col_q

                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s_ * row_q
                a[q, :] = s_ * row_p + c * row_q

                a[p, q] = a[q, p] = 0.0

    raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")


def spectral_norm(m) -> float:
    """Induced 2-norm, the square root of the largest eigenvalue of MᵀM."""
    m = _as_matrix(m)
    if m.size == 0:
        return 0.0

    gram = m.T @ m
    return math.sqrt(max(eig_extremes_sym((gram + gram.T) / 2)[1], 0.0))


def solve_discrete_lyapunov(a_cl, q) -> np.ndarray:
    """
    Solve A_clᵀ P A_cl - P + Q = 0 by vectorization.

    Parameters
    ----------------
    a_cl: :class:`numpy.ndarray`
        Closed-loop matrix, expected to be Schur.
    q: :class:`numpy.ndarray`
        Symmetric positive-definite right-hand side.

    Returns
    -------
    :class:`numpy.ndarray`
        The exactly symmetric positive-definite solution P.

    Raises
    ------
    :class:`NotSchur`
        If the system is singular, the residual is too large or P is not positive-definite.
    """
    a_cl = _as_matrix(a_cl)
    q = _as_matrix(q)
    n = a_cl.shape[0]
    if q.shape != (n, n):
        raise ValueError(f"Q has shape {q.shape}, expected {(n, n)}")
    if eig_extremes_sym(q)[0] <= 0:
        raise ValueError("Q must be positive-definite")

    system = np.eye(n * n) - np.kron(a_cl.T, a_cl.T)
    try:
        p = np.linalg.solve(system, q.reshape(-1)).reshape(n, n)
    except np.linalg.LinAlgError as e:
        raise NotSchur(f"Lyapunov system is singular: {e}") from e

    p = (p + p.T) / 2
    if not np.all(np.isfinite(p)):
        raise NotSchur("Lyapunov solution is not finite")

    residual = np.linalg.norm(a_cl.T @ p @ a_cl - p + q)
    if residual > config.LYAPUNOV_RESIDUAL * np.linalg.norm(p):
        raise NotSchur(f"Lyapunov residual {residual:.3e} is too large")
    if eig_extremes_sym(p)[0] <= 0:
        raise NotSchur("Lyapunov solution is not positive-definite, closed loop is not Schur")

    return p


def gain_sensitivity_bound(plant: PlantModel, K, Q, P, safety_factor: float = config.SAFETY_FACTOR) -> float:
    """
    Largest gain-quantizer sensitivity that keeps A - BK_bar Schur, times a safety factor.

    Parameters
    ----------------
    plant: :class:`PlantModel`
        The plant.
    K: :class:`numpy.ndarray`
        Gain certified by ``P`` for weight ``Q``.
    Q, P: :class:`numpy.ndarray`
        Lyapunov pair of A - BK.
    safety_factor: :class:`float`
        Multiplier in (0, 1] applied to the bound.

    Returns
    -------
    :class:`float`
        Positive sensitivity.
    """
    A, B = plant.A, plant.B
    K = _as_matrix(K)

    b = spectral_norm(B.T @ P @ B)
    if b == 0:
        raise DegenerateB("BᵀPB is zero")

    c = spectral_norm((A - B @ K).T @ P @ B)
    lam = eig_extremes_sym(Q)[0]

    # -c + sqrt(c² + lam*b) rewritten without cancellation
    root = lam * b / (c + math.sqrt(c * c + lam * b))
    return safety_factor * 2.0 / (math.sqrt(plant.n_x * plant.n_u) * b) * root


def gain_saturation(K, delta_g: float) -> int:
    """Smallest q_sat_g >= 1 with max|K_ij| <= (q_sat_g - 1/2) delta_g."""
    if delta_g <= 0:
        raise ValueError("Gain sensitivity must be positive")

    largest = float(np.max(np.abs(_as_matrix(K))))
    q = max(1, math.ceil(largest / delta_g + 0.5))
    while (q - 0.5) * delta_g < largest:
        q += 1
    while q > 1 and (q - 1.5) * delta_g >= largest:
        q -= 1

    return q


def zoom_constants(plant: PlantModel, K_bar, Q_bar, P_bar, epsilon: float, q_sat: int) -> ZoomConstants:
    """
    Theta, Omega' and the zoom-in ratio Omega.

    Raises
    ------
    :class:`QSatTooSmall`
        If Omega >= 1.
    """
    A, B = plant.A, plant.B
    K_bar = _as_matrix(K_bar)
    n = plant.n_x

    m1 = spectral_norm((A - B @ K_bar).T @ P_bar @ B @ K_bar)
    m2 = spectral_norm(K_bar.T @ B.T @ P_bar @ B @ K_bar)
    lam_q = eig_extremes_sym(Q_bar)[0]
    theta = (m1 + math.sqrt(m1 * m1 + lam_q * m2)) / (2.0 * lam_q)

    ratio = _condition_ratio(P_bar)
    omega_prime = (theta * math.sqrt(n) + epsilon) * ratio + math.sqrt(n)
    omega = omega_prime * ratio / (q_sat - 0.5)
    if omega >= 1:
        raise QSatTooSmall(f"q_sat={q_sat} gives Omega={omega:.4f}, raise q_sat above {omega_prime * ratio + 0.5:.1f}")

    return ZoomConstants(theta=theta, omega_prime=omega_prime, omega=omega)


def _condition_ratio(p) -> float:
    lo, hi = eig_extremes_sym(p)
    return math.sqrt(hi / lo)


def minimal_q_sat(plant: PlantModel, K_bar, Q_bar, P_bar, epsilon: float, omega_target: float) -> int:
    """Smallest q_sat whose Omega does not exceed ``omega_target``."""
    # Omega' does not depend on q_sat, so evaluate with a q_sat that always passes
    trial = zoom_constants(plant, K_bar, Q_bar, P_bar, epsilon, q_sat=2**62)
    scaled = trial.omega_prime * _condition_ratio(P_bar)

    q = max(1, math.ceil(scaled / omega_target + 0.5))
    while scaled / (q - 0.5) > omega_target:
        q += 1

    return q


def event_trigger_threshold(theta: float) -> float:
    if theta <= 0:
        raise ValueError("Theta must be positive")

    return 2.0 * theta


def should_trigger(theta: float, x, e) -> bool:
    """True when ‖x‖ <= 2Θ‖e‖, the held input must then be refreshed."""
    return bool(np.linalg.norm(x) <= event_trigger_threshold(theta) * np.linalg.norm(e))


def key_size_bound(q_sat: int, q_sat_g: int, n_x: int, r_max: int) -> int:
    """Ceiling of 3(q_sat + 1/2)(q_sat_g + 1/2) n_x r_max, in exact integer arithmetic."""
    numerator = 3 * (2 * q_sat + 1) * (2 * q_sat_g + 1) * n_x * r_max
    return -(-numerator // 4)


def auto_key_bits(n_min: int, margin_bits: int = config.KEY_MARGIN_BITS) -> int:
    """Smallest power-of-two key length whose smallest possible N clears ``n_min`` by ``margin_bits``."""
    bits = 16
    # the smallest N of a b-bit key is 2^(b-2)
    while bits - 2 < n_min.bit_length() + margin_bits:
        bits *= 2

    return bits


def place_gain(A, B, poles) -> np.ndarray:
    """Gain K such that A - BK has the requested (distinct) poles."""
    return signal.place_poles(_as_matrix(A), np.asarray(B, dtype=float).reshape(len(A), -1), poles).gain_matrix


def design_linear(
    plant: PlantModel,
    K,
    *,
    q_sat: Union[int, str] = "auto",
    epsilon: float = config.EPSILON,
    r_max: int = config.R_MAX,
    Q=None,
    Q_bar=None,
    safety_factor: float = config.SAFETY_FACTOR,
    omega_target: float = config.OMEGA_TARGET,
) -> LinearDesign:
    """
    Build the full design for encrypted state feedback.

    Parameters
    ----------------
    plant: :class:`PlantModel`
        The plant.
    K: :class:`numpy.ndarray`
        Stabilizing gain for u = -Kx.
    q_sat: Union[:class:`int`, :class:`str`]
        State quantizer saturation, or ``"auto"`` for the smallest value with Omega <= ``omega_target``.
    epsilon: :class:`float`
        Margin inside Omega'.
    r_max: :class:`int`
        Exclusive bound of the blinding integer.
    Q, Q_bar: Optional[:class:`numpy.ndarray`]
        Lyapunov weights, identity by default.
    safety_factor: :class:`float`
        Multiplier on the gain sensitivity bound.
    omega_target: :class:`float`
        Only used by ``q_sat="auto"``.
    """
    n_x, n_u = plant.n_x, plant.n_u
    K = np.asarray(K, dtype=float).reshape(n_u, n_x)
    Q = np.eye(n_x) if Q is None else _as_matrix(Q)
    Q_bar = np.eye(n_x) if Q_bar is None else _as_matrix(Q_bar)

    P = solve_discrete_lyapunov(plant.A - plant.B @ K, Q)
    delta_g = gain_sensitivity_bound(plant, K, Q, P, safety_factor)
    q_sat_g = gain_saturation(K, delta_g)
    K_q = quantize_matrix(QuantizerSpec(delta_g, q_sat_g), K)
    K_bar = K_q * delta_g

    P_bar = solve_discrete_lyapunov(plant.A - plant.B @ K_bar, Q_bar)
    if q_sat == "auto":
        q_sat = minimal_q_sat(plant, K_bar, Q_bar, P_bar, epsilon, omega_target)
    constants = zoom_constants(plant, K_bar, Q_bar, P_bar, epsilon, int(q_sat))
    n_min = key_size_bound(int(q_sat), q_sat_g, n_x, r_max)

    logger.info(
        f"Linear design: delta_g={delta_g:.6g} q_sat_g={q_sat_g} q_sat={q_sat} "
        f"theta={constants.theta:.6g} omega'={constants.omega_prime:.6g} omega={constants.omega:.6g} N_min={n_min}"
    )

    return LinearDesign(
        plant=plant,
        K=K,
        Q=Q,
        P=P,
        delta_g=delta_g,
        q_sat_g=q_sat_g,
        K_q=K_q,
        K_bar=K_bar,
        Q_bar=Q_bar,
        P_bar=P_bar,
        theta=constants.theta,
        omega_prime=constants.omega_prime,
        omega=constants.omega,
        q_sat=int(q_sat),
        epsilon=epsilon,
        r_max=r_max,
        N_min=n_min,
    )
