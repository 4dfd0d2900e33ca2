# Logging
LOG_DIR = "logs/"
LOG_NAME = "ectl"
LOG_LEVEL = "info"

# Paillier
MILLER_RABIN_ROUNDS = 40
PRIME_SEARCH_ATTEMPTS = 100_000
KEY_MARGIN_BITS = 8
MIN_CLI_KEY_BITS = 64
# exclusive bound for the blinding integer r
R_MAX = 2**16

# Design
EPSILON = 0.01
SAFETY_FACTOR = 0.9
OMEGA_TARGET = 0.5
JACOBI_TOLERANCE = 1e-12
JACOBI_MAX_SWEEPS = 100
LYAPUNOV_RESIDUAL = 1e-9
POLY_GRID_POINTS = 10_001
NONLINEAR_MAX_STAGES = 200

# Simulation
CONVERGENCE_FLOOR = 1e-9
DEFAULT_HORIZON = 5000

# Wire
MAX_MESSAGE_SIZE = 16 * 1024 * 1024
CONTROLLER_IDLE_TIMEOUT = 30.0
DEFAULT_LISTEN = "127.0.0.1:7878"

MODES = {
    "linear": True,
    "event_triggered": True,
    "nonlinear": True,
}

TRANSPORTS = {
    "inprocess": True,
    "tcp": True,
}
