"""Time evolution of the Galerkin-truncated fractional cubic NLS.

The truncated system, in coefficients, reads

    d/dt c_n = i |n|^(2 alpha) c_n - i gamma [P_N(|u|^2 u)]_n ,   |n| <= N.

Three solvers are provided: a Strang splitting of linear flow and cubic
sub-flow, classical RK4 on the vector field above, and a Picard iteration
of the Duhamel formula.  All stepping functions accept batched coefficient
arrays of shape ``(..., 2N+1)`` as well as single states.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.polynomial import legendre

from .spectral import (
    DimensionError,
    ModelParams,
    SpectralState,
    _MATRIX_MAX_POINTS,
    _MATRIX_MAX_POINTS_BATCH,
    _dft_matrices,
    _unwrap,
    _wrap,
    coeffs_to_grid,
    fractional_symbol,
    grid_to_coeffs,
    hamiltonian,
    linf_norm,
    mass,
    modes_of,
    quadrature_size,
    sobolev_norm,
)

SCHEMES = ("strang", "rk4", "picard")


class IntegrationError(RuntimeError):
    """Non-finite values or a failed inner solve during time stepping.

    ``last_good_time`` holds the last time at which the state was finite.
    """

    def __init__(self, message: str, last_good_time: float | None = None):
        super().__init__(message)
        self.last_good_time = last_good_time


def default_dt(params: ModelParams) -> float:
    return min(1e-3, 0.5 / params.n_modes ** (2 * params.alpha))


@dataclass(frozen=True)
class IntegratorConfig:
    """Stepping scheme, step size and logging cadence.

    ``substep`` selects how the Strang scheme solves the cubic sub-flow:
    ``"midpoint"`` (implicit midpoint on the truncated system, exactly
    unitary) or ``"pointwise"`` (exact phase rotation on the grid followed by
    truncation, which leaks mass into the discarded modes).
    """

    scheme: str = "strang"
    dt: float = 1e-3
    record_every: int = 1
    substep: str = "midpoint"
    sigmas: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise ValueError("record_every must be a positive integer")
        if self.substep not in ("midpoint", "pointwise"):
            raise ValueError(f"unknown substep {self.substep!r}")


@dataclass
class TrajectoryLog:
    """Invariants recorded along a trajectory."""

    sigmas: tuple[float, ...]
    t: list[float] = field(default_factory=list)
    mass: list[float] = field(default_factory=list)
    hamiltonian: list[float] = field(default_factory=list)
    h_norms: dict[float, list[float]] = field(default_factory=dict)
    linf: list[float] = field(default_factory=list)

    def record(self, t: float, state: SpectralState, params: ModelParams) -> None:
        self.t.append(float(t))
        self.mass.append(mass(state))
        self.hamiltonian.append(hamiltonian(state, params))
        for sigma in self.sigmas:
            self.h_norms.setdefault(sigma, []).append(sobolev_norm(state, sigma))
        self.linf.append(linf_norm(state))

    def __len__(self):
        return len(self.t)

    def max_drift(self, quantity: str = "hamiltonian") -> float:
        """Largest ``|q(t) - q(0)|`` over the recorded rows."""
        values = np.asarray(getattr(self, quantity))
        return float(np.max(np.abs(values - values[0])))

    @property
    def header(self) -> list[str]:
        return (["t", "mass", "hamiltonian"]
                + [f"h_norm_{sigma!r}" for sigma in self.sigmas] + ["linf"])

    def rows(self):
        for i, t in enumerate(self.t):
            yield ([t, self.mass[i], self.hamiltonian[i]]
                   + [self.h_norms[sigma][i] for sigma in self.sigmas] + [self.linf[i]])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header)
            for row in self.rows():
                writer.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# vector field pieces

def linear_flow(state, t: float, alpha: float):
    """Exact linear propagator: ``c_n -> exp(i t |n|^(2 alpha)) c_n``."""
    c, as_state = _unwrap(state)
    phase = np.exp(1j * t * fractional_symbol(modes_of(c), alpha))
    return _wrap(c * phase, as_state)


def cubic_term(state):
    """P_N(|u|^2 u), computed alias-free on ``M >= 4N+1`` nodes."""
    c, as_state = _unwrap(state)
    n = modes_of(c)
    u = coeffs_to_grid(c, quadrature_size(n))
    return _wrap(grid_to_coeffs((u.real ** 2 + u.imag ** 2) * u, n), as_state)


def rhs(state, params: ModelParams):
    c, as_state = _unwrap(state)
    _check_modes(c, params)
    return _wrap(_kernel(params).rhs(c), as_state)


def _check_modes(c: np.ndarray, params: ModelParams) -> None:
    n = modes_of(c)
    if n != params.n_modes:
        raise DimensionError(f"state has N={n} but params expect N={params.n_modes}")


def _check_finite(c: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(c)):
        raise IntegrationError(f"non-finite coefficients after {where}")


def _batch_norm(c: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(c.real ** 2 + c.imag ** 2, axis=-1))


class _Kernel:
    """Hot loops for one ``(N, alpha, gamma)``; shared, stateless apart from caches."""

    def __init__(self, n_modes: int, alpha: float, gamma: int):
        self.n = n_modes
        self.gamma = gamma
        self.sym = fractional_symbol(n_modes, alpha)
        self.m = quadrature_size(n_modes)
        self.lin = 1j * self.sym
        self.nl = -1j * gamma
        self.small = self.m <= _MATRIX_MAX_POINTS
        self.small_batch = self.m <= _MATRIX_MAX_POINTS_BATCH
        if self.small:
            self.synth, self.analysis = _dft_matrices(n_modes, self.m)
            self.analysis_nl = self.nl * self.analysis
        self._phase_cache: dict[float, np.ndarray] = {}

    def phase(self, t: float) -> np.ndarray:
        ph = self._phase_cache.get(t)
        if ph is None:
            if len(self._phase_cache) > 16:
                self._phase_cache.clear()
            ph = self._phase_cache[t] = np.exp(1j * t * self.sym)
        return ph

    def _dense(self, c: np.ndarray) -> bool:
        return self.small if c.ndim == 1 else self.small_batch

    @staticmethod
    def _cube(u: np.ndarray) -> np.ndarray:
        # |u|^2 u in place: avoids fresh large temporaries in batched runs
        w = u.real ** 2
        w += u.imag ** 2
        u *= w
        return u

    def cubic(self, c: np.ndarray) -> np.ndarray:
        if self._dense(c):
            return np.dot(self._cube(np.dot(c, self.synth)), self.analysis)
        return grid_to_coeffs(self._cube(coeffs_to_grid(c, self.m)), self.n)

    def rhs(self, c: np.ndarray) -> np.ndarray:
        if self._dense(c):
            return self.lin * c + np.dot(self._cube(np.dot(c, self.synth)), self.analysis_nl)
        return self.lin * c + self.nl * self.cubic(c)

    def rk4(self, c: np.ndarray, dt: float) -> np.ndarray:
        k1 = self.rhs(c)
        k2 = self.rhs(c + (0.5 * dt) * k1)
        k3 = self.rhs(c + (0.5 * dt) * k2)
        k4 = self.rhs(c + dt * k3)
        return c + (dt / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)

    def rotate_pointwise(self, c: np.ndarray, dt: float) -> np.ndarray:
        u = coeffs_to_grid(c, self.m)
        u = u * np.exp((-1j * self.gamma * dt) * (u.real ** 2 + u.imag ** 2))
        return grid_to_coeffs(u, self.n)

    def midpoint(self, c: np.ndarray, dt: float, max_iter: int = 60) -> np.ndarray:
        if c.ndim == 1:
            def norm(x):
                return math.sqrt(np.vdot(x, x).real)
            l1 = float(np.abs(c).sum())
        else:
            def norm(x):
                return float(_batch_norm(x).max())
            l1 = float(np.abs(c).sum(axis=-1).max())
        coef = self.nl * dt
        # explicit midpoint predictor: O(dt^3) away from the implicit solution
        v = c + coef * self.cubic(c + (0.5 * coef) * self.cubic(c))
        scale = max(norm(c), 1e-300)
        # Lipschitz bound of the fixed-point map: 3/2 |dt| sup|w|^2, with
        # sup|w| <= l1 = sum|c_n| (inflated slightly since w is the midpoint, not c)
        lip = 1.5 * abs(dt) * (1.05 * l1) ** 2
        factor = lip / (1.0 - lip) if lip < 0.5 else math.inf
        prev = math.inf
        stalled = 0
        inc = math.inf
        for _ in range(max_iter):
            v_new = c + coef * self.cubic(0.5 * (c + v))
            inc = norm(v_new - v) / scale
            v = v_new
            if inc <= 1e-15 or factor * inc <= 1e-16:
                return v
            if not math.isfinite(inc):
                break
            if inc >= prev:
                stalled += 1
                # increments hovering at round-off level: converged as far as possible
                if inc < 1e-13 or (stalled >= 3 and inc < 1e-11):
                    return v
                if stalled >= 3:
                    break
            else:
                stalled = 0
            prev = inc
        # slow but steady contraction that already sits at round-off level
        if inc < 1e-13:
            return v
        raise IntegrationError(
            f"implicit midpoint iteration did not converge (increment {inc:.3e}); reduce dt")

    def strang(self, c: np.ndarray, dt: float, substep: str = "midpoint") -> np.ndarray:
        half = self.phase(0.5 * dt)
        c = c * half
        c = self.midpoint(c, dt) if substep == "midpoint" else self.rotate_pointwise(c, dt)
        return c * half


@lru_cache(maxsize=32)
def _kernel_for(n_modes: int, alpha: float, gamma: int) -> _Kernel:
    return _Kernel(n_modes, alpha, gamma)


def _kernel(params: ModelParams) -> _Kernel:
    return _kernel_for(params.n_modes, float(params.alpha), params.gamma)


# ---------------------------------------------------------------------------
# steppers

def cubic_substep_pointwise(c: np.ndarray, gamma: int, dt: float) -> np.ndarray:
    """Exact solution of ``i u_t = gamma |u|^2 u`` on the grid, truncated back.

    Leaves the truncated space before the projection, so mass leaks at a rate
    ``dt^2 |(1 - P_N)(|u|^2 u)|^2`` per step.
    """
    n = modes_of(c)
    u = coeffs_to_grid(c, quadrature_size(n))
    u = u * np.exp(-1j * gamma * dt * (u.real ** 2 + u.imag ** 2))
    return grid_to_coeffs(u, n)


def cubic_substep_midpoint(c: np.ndarray, gamma: int, dt: float,
                           max_iter: int = 60) -> np.ndarray:
    """Implicit midpoint step for ``d/dt c = -i gamma P_N(|u|^2 u)``.

    The map is a Cayley transform of a Hermitian operator on the truncated
    space, so it conserves mass exactly and is symmetric in ``dt``.  Solved by
    fixed-point iteration to round-off from an explicit midpoint predictor.
    """
    return _kernel_for(modes_of(c), 1.0, gamma).midpoint(c, dt, max_iter)


def step_strang(state, params: ModelParams, dt: float, substep: str = "midpoint"):
    """Half linear flow, cubic sub-flow over ``dt``, half linear flow."""
    c, as_state = _unwrap(state)
    _check_modes(c, params)
    c = _kernel(params).strang(c, dt, substep)
    _check_finite(c, "Strang step")
    return _wrap(c, as_state)


def rk4_stability_limit(params: ModelParams) -> float:
    # RK4 stability interval on the imaginary axis is |z| <= 2*sqrt(2)
    return 2 * math.sqrt(2) / max(1.0, params.n_modes ** (2 * params.alpha))


def step_rk4(state, params: ModelParams, dt: float):
    c, as_state = _unwrap(state)
    _check_modes(c, params)
    if abs(dt) > rk4_stability_limit(params):
        warnings.warn(f"dt={dt:g} exceeds the RK4 linear stability limit "
                      f"{rk4_stability_limit(params):.3g}", RuntimeWarning, stacklevel=2)
    c = _kernel(params).rk4(c, dt)
    _check_finite(c, "RK4 step")
    return _wrap(c, as_state)


# ---------------------------------------------------------------------------
# Picard / Duhamel oracle

class ContractionError(RuntimeError):
    """The Picard iterates stopped contracting."""


@dataclass
class PicardResult:
    state: SpectralState | np.ndarray
    increments: list[float]
    panels: int


def _gauss_integration(nodes: int):
    """Gauss-Legendre nodes on [0,1] and the matrix integrating the
    interpolant from 0 to each node, plus weights for the full interval."""
    x, w = legendre.leggauss(nodes)
    vander = legendre.legvander(x, nodes - 1)
    to_coef = np.linalg.inv(vander)
    integ = np.zeros((nodes, nodes))
    for k in range(nodes):
        e = np.zeros(nodes)
        e[k] = 1.0
        anti = legendre.legint(e, lbnd=-1)
        integ[:, k] = legendre.legval(x, anti)
    # on [-1,1]: S = integ @ to_coef; map to [0,1] (half the length)
    return 0.5 * (x + 1), 0.5 * integ @ to_coef, 0.5 * w


def picard_panel_length(c: np.ndarray, params: ModelParams) -> float:
    """Default panel length inside the contraction regime of the Picard map.

    Uses ``sup|u| <= sum|c_n|`` and keeps the fastest interaction-picture
    phase within a few radians per panel.
    """
    l1 = float(np.max(np.sum(np.abs(c), axis=-1)))
    fastest = 3.0 * params.n_modes ** (2 * params.alpha)
    return min(0.1 / (1.0 + l1 ** 2), 4.0 / fastest)


def picard_solve(state, params: ModelParams, T: float, iterations: int = 60,
                 nodes: int = 16, panels: int | None = None,
                 tol: float = 1e-15) -> PicardResult:
    """Fixed-point iteration of the Duhamel formula over ``[0, T]``.

    In the interaction picture ``v(t) = L(-t) u(t)``,

        v(t) = u0 - i gamma int_0^t L(-tau) P_N(|u|^2 u)(tau) dtau ,

    with ``L(t)`` the linear propagator.  Time integrals use Gauss-Legendre
    collocation on ``panels`` consecutive sub-intervals; on each, iteration
    stops once successive iterates differ by less than ``tol`` (relative), and
    a :class:`ContractionError` is raised if the distance keeps growing.
    """
    c0, as_state = _unwrap(state)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    n = modes_of(c0)
    if n != params.n_modes:
        raise DimensionError(f"state has N={n} but params expect N={params.n_modes}")
    if T == 0:
        return PicardResult(_wrap(c0.copy(), as_state), [], 0)
    if panels is None:
        panels = max(1, math.ceil(abs(T) / picard_panel_length(c0, params)))
    h = T / panels
    tau, integ, weights = _gauss_integration(nodes)
    sym = fractional_symbol(n, params.alpha)
    # phases[j] = exp(i tau_j h sym): L(tau_j h)
    fwd = np.exp(1j * np.outer(tau * h, sym))
    end = np.exp(1j * h * sym)
    scale = max(float(np.max(_batch_norm(c0))), 1e-300)
    increments: list[float] = []
    c = c0
    for _ in range(panels):
        # v at nodes, shape (nodes, ..., 2N+1)
        v = np.broadcast_to(c, (nodes,) + c.shape).copy()
        fwd_b = fwd.reshape((nodes,) + (1,) * (c.ndim - 1) + (-1,))
        converged = False
        prev = np.inf
        growth = 0
        for _ in range(iterations):
            u = fwd_b * v
            g = np.conj(fwd_b) * cubic_term(u) * (-1j * params.gamma * h)
            v_new = c + np.tensordot(integ, g, axes=(1, 0))
            inc = float(np.max(_batch_norm(v_new - v)) / scale)
            v = v_new
            increments.append(inc)
            if inc <= tol:
                converged = True
                break
            if inc > prev:
                growth += 1
                if growth >= 3 and inc > 1e-10:
                    raise ContractionError(
                        f"Picard iterates diverging (distance {inc:.3e}); use a smaller T "
                        "or more panels")
            else:
                growth = 0
            prev = inc
        if not converged and inc > 1e-10:
            raise ContractionError(
                f"Picard iteration not converged after {iterations} iterations "
                f"(distance {inc:.3e}); use a smaller T or more iterations")
        u = fwd_b * v
        g = np.conj(fwd_b) * cubic_term(u) * (-1j * params.gamma * h)
        v_end = c + np.tensordot(weights, g, axes=(0, 0))
        c = end * v_end
        _check_finite(c, "Picard panel")
    return PicardResult(_wrap(c, as_state), increments, panels)


def step_picard(state, params: ModelParams, dt: float):
    return picard_solve(state, params, dt).state


# ---------------------------------------------------------------------------
# driver

def step(state, params: ModelParams, dt: float, config: IntegratorConfig):
    if config.scheme == "strang":
        return step_strang(state, params, dt, config.substep)
    if config.scheme == "rk4":
        return step_rk4(state, params, dt)
    return step_picard(state, params, dt)


def _run_steps(c: np.ndarray, params: ModelParams, config: IntegratorConfig,
               sizes: Sequence[float], t0: float = 0.0) -> np.ndarray:
    """Apply a sequence of steps to raw coefficients; the inner loop of evolve."""
    kern = _kernel(params)
    if config.scheme == "rk4" and sizes and max(abs(h) for h in sizes) > rk4_stability_limit(params):
        warnings.warn(f"dt={config.dt:g} exceeds the RK4 linear stability limit "
                      f"{rk4_stability_limit(params):.3g}", RuntimeWarning, stacklevel=3)
    t = t0
    last_ok = t0  # latest time at which the state was verified finite
    check_every = 64
    with np.errstate(over="ignore", invalid="ignore"):
        for k, h in enumerate(sizes, start=1):
            try:
                if config.scheme == "strang":
                    c = kern.strang(c, h, config.substep)
                elif config.scheme == "rk4":
                    c = kern.rk4(c, h)
                else:
                    c = step_picard(c, params, h)
            except (IntegrationError, ContractionError) as exc:
                raise IntegrationError(f"{exc} (at t={t + h:g})", last_good_time=t) from exc
            t += h
            if k % check_every == 0 or k == len(sizes):
                if not np.all(np.isfinite(c)):
                    raise IntegrationError(f"non-finite coefficients by t={t:g}",
                                           last_good_time=last_ok)
                last_ok = t
    return c


def _step_sizes(T: float, dt: float) -> list[float]:
    if T == 0:
        return []
    steps = max(1, math.ceil(abs(T) / dt - 1e-9))
    sign = 1.0 if T > 0 else -1.0
    sizes = [sign * dt] * (steps - 1)
    sizes.append(T - sign * dt * (steps - 1))
    return sizes


def evolve(state: SpectralState, params: ModelParams, config: IntegratorConfig,
           T: float) -> tuple[SpectralState, TrajectoryLog]:
    """Integrate over ``[0, T]`` (time-reversed for ``T < 0``) with logging.

    Rows are recorded at ``t = 0``, every ``record_every`` steps, and at
    ``t = T``; the final step is shortened to land exactly on ``T``.
    """
    if state.n_modes != params.n_modes:
        raise DimensionError(f"state has N={state.n_modes} but params expect N={params.n_modes}")
    log = TrajectoryLog(tuple(config.sigmas))
    log.record(0.0, state, params)
    c = state.coeffs
    sizes = _step_sizes(T, config.dt)
    t = 0.0
    for start in range(0, len(sizes), config.record_every):
        chunk = sizes[start:start + config.record_every]
        c = _run_steps(c, params, config, chunk, t)
        last = start + len(chunk) == len(sizes)
        t = T if last else t + sum(chunk)
        log.record(t, SpectralState(params.n_modes, c), params)
    return SpectralState(params.n_modes, c), log


def evolve_batch(coeffs: np.ndarray, params: ModelParams, config: IntegratorConfig,
                 T: float, checkpoints: Sequence[float] = ()) -> tuple[np.ndarray, list]:
    """Evolve a batch ``(count, 2N+1)`` without logging.

    Returns the final coefficients and one snapshot per entry of
    ``checkpoints`` (ascending, within ``[0, T]`` for ``T >= 0``).  The run is
    split into segments ending on each checkpoint; each segment's last step is
    shortened to land on it.
    """
    c = np.asarray(coeffs, dtype=np.complex128)
    _check_modes(c, params)
    times = [float(x) for x in checkpoints]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("checkpoints must be ascending")
    if times and T >= 0 and not 0 <= times[-1] <= T:
        raise ValueError("checkpoints must lie within [0, T]")
    snaps = []
    t = 0.0
    for target in times + [T]:
        c = _run_steps(c, params, config, _step_sizes(target - t, config.dt), t)
        t = target
        snaps.append(c.copy())
    return c, snaps[:-1]
