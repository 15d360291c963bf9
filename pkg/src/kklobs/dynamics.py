"""Benchmark systems, input signals, ODE integration and noise injection.

All drifts and output maps are vectorized over leading axes, so the same
callable serves pointwise integration and batched dataset construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

__all__ = [
    "SystemSpec",
    "InputSignal",
    "Trajectory",
    "IntegrationError",
    "get_system",
    "system_names",
    "sample_input",
    "sample_initial_condition",
    "integrate",
    "integrate_ode",
    "add_noise",
    "write_trajectory_csv",
]


class IntegrationError(RuntimeError):
    """Step-size underflow (stiffness) or non-finite state (escape)."""


@dataclass(frozen=True)
class SystemSpec:
    """One benchmark system: dimensions, drift f(x, u), output h(x), IC box."""

    name: str
    n_x: int
    n_u: int
    n_y: int
    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    output: Callable[[np.ndarray], np.ndarray]
    x0_box: tuple[tuple[float, float], ...]


def _duffing_f(x, u):
    return np.stack([x[..., 1], -x[..., 0] - x[..., 0] ** 3 + u[..., 0]], axis=-1)


def _vdp_f(x, u):
    return np.stack(
        [x[..., 1], (1.0 - x[..., 0] ** 2) * x[..., 1] - x[..., 0] + u[..., 0]], axis=-1
    )


def _rossler_f(x, u):
    return np.stack(
        [
            -(x[..., 1] + x[..., 2]),
            x[..., 0] + 0.1 * x[..., 1] + u[..., 0],
            0.1 + x[..., 2] * (x[..., 0] - 14.0),
        ],
        axis=-1,
    )


def _fhn_f(x, u):
    return np.stack(
        [
            10.0 * (x[..., 0] - x[..., 0] ** 3 - x[..., 1]) + u[..., 0],
            1.5 * x[..., 0] - x[..., 1] + 0.8,
        ],
        axis=-1,
    )


def _linear_f(x, u):
    return -x + u


def _measure_x1(x):
    return x[..., 0:1]


def _measure_x2(x):
    return x[..., 1:2]


_SYSTEMS: dict[str, SystemSpec] = {
    "duffing": SystemSpec("duffing", 2, 1, 1, _duffing_f, _measure_x1,
                          ((-1.0, 1.0), (-1.0, 1.0))),
    "vdp": SystemSpec("vdp", 2, 1, 1, _vdp_f, _measure_x1,
                      ((-1.0, 1.0), (-1.0, 1.0))),
    "rossler": SystemSpec("rossler", 3, 1, 1, _rossler_f, _measure_x2,
                          ((-5.0, 5.0), (-5.0, 5.0), (0.0, 2.0))),
    "fhn": SystemSpec("fhn", 2, 1, 1, _fhn_f, _measure_x1,
                      ((-1.0, 1.0), (-1.0, 1.0))),
    # scalar sanity system with the closed-form transformation T(x) = x
    "linear": SystemSpec("linear", 1, 1, 1, _linear_f, lambda x: x[..., 0:1],
                         ((-1.0, 1.0),)),
}


def get_system(name: str) -> SystemSpec:
    try:
        return _SYSTEMS[name]
    except KeyError:
        raise KeyError(f"unknown system {name!r}; known: {sorted(_SYSTEMS)}") from None


def system_names() -> list[str]:
    return sorted(_SYSTEMS)


# -- input signals -----------------------------------------------------------

INPUT_KINDS = ("zero", "constant", "sinusoid", "square")


@dataclass(frozen=True)
class InputSignal:
    """Parametric exogenous input; ``zero`` evaluates to exactly 0.0."""

    kind: str
    amplitude: float = 0.0
    frequency: float = 0.0  # rad/s
    phase: float = 0.0
    offset: float = 0.0
    n_u: int = 1

    def values(self, t) -> np.ndarray:
        """Evaluate at scalar or array ``t``; returns shape (..., n_u)."""
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "zero":
            base = np.zeros(t.shape)
        elif self.kind == "constant":
            base = np.full(t.shape, self.offset)
        elif self.kind == "sinusoid":
            base = self.offset + self.amplitude * np.sin(self.frequency * t + self.phase)
        elif self.kind == "square":
            s = np.sin(self.frequency * t + self.phase)
            base = self.offset + self.amplitude * np.where(s >= 0.0, 1.0, -1.0)
        else:
            raise ValueError(f"unknown input kind {self.kind!r}")
        return np.repeat(base[..., None], self.n_u, axis=-1)


def sample_input(kind: str, rng: np.random.Generator, n_u: int = 1) -> InputSignal:
    """Draw signal parameters: constant offset ~ U[-1,1]; sinusoid/square
    amplitude ~ U[0.2,1], frequency ~ U[0.2,2] rad/s, phase ~ U[0,2pi)."""
    if kind == "zero":
        return InputSignal("zero", n_u=n_u)
    if kind == "constant":
        return InputSignal("constant", offset=float(rng.uniform(-1.0, 1.0)), n_u=n_u)
    if kind in ("sinusoid", "square"):
        return InputSignal(
            kind,
            amplitude=float(rng.uniform(0.2, 1.0)),
            frequency=float(rng.uniform(0.2, 2.0)),
            phase=float(rng.uniform(0.0, 2.0 * math.pi)),
            n_u=n_u,
        )
    raise ValueError(f"unknown input kind {kind!r}")


def sample_initial_condition(spec: SystemSpec, rng: np.random.Generator) -> np.ndarray:
    lo = np.array([b[0] for b in spec.x0_box])
    hi = np.array([b[1] for b in spec.x0_box])
    return rng.uniform(lo, hi)


# -- trajectories ------------------------------------------------------------

@dataclass
class Trajectory:
    """States/inputs/outputs on the uniform grid t_k = k * dt."""

    system: str
    times: np.ndarray       # (N+1,)
    states: np.ndarray      # (N+1, n_x)
    inputs: np.ndarray      # (N+1, n_u)
    outputs: np.ndarray     # (N+1, n_y)
    signal: InputSignal | None = None

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


def write_trajectory_csv(traj: Trajectory, path) -> None:
    n_x = traj.states.shape[1]
    n_u = traj.inputs.shape[1]
    n_y = traj.outputs.shape[1]
    header = (
        ["t"]
        + [f"x{i+1}" for i in range(n_x)]
        + [f"u{i+1}" for i in range(n_u)]
        + [f"y{i+1}" for i in range(n_y)]
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(traj.times.shape[0]):
            row = [traj.times[k], *traj.states[k], *traj.inputs[k], *traj.outputs[k]]
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


# -- Dormand-Prince 5(4) with dense output ------------------------------------

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B = np.concatenate([_A[6], [0.0]])
# difference between 5th-order solution and embedded 4th-order estimate
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# dense-output correction coefficients (Hairer's contd5)
_D = np.array([
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
])

_MAX_FACTOR = 5.0
_MIN_FACTOR = 0.2
_SAFETY = 0.9


def _dense_eval(y0, y1, h, ks, theta):
    """Quartic interpolant on one accepted step, exact at both endpoints."""
    ydiff = y1 - y0
    bspl = h * ks[0] - ydiff
    c4 = ydiff - h * ks[6] - bspl
    c5 = h * (ks.T @ _D)
    th1 = 1.0 - theta
    return y0 + theta * (ydiff + th1 * (bspl + theta * (c4 + th1 * c5)))


def _dopri5_grid(f, t_grid, y0, rtol, atol, h_init=None):
    """Integrate dy/dt = f(t, y) producing values at every grid time."""
    t0, t_end = float(t_grid[0]), float(t_grid[-1])
    n = y0.shape[0]
    out = np.empty((len(t_grid), n))
    out[0] = y0
    next_idx = 1
    t, y = t0, y0.astype(np.float64)
    k1 = f(t, y)
    span = t_end - t0
    h = min(float(t_grid[1] - t_grid[0]), 0.1 * span) if h_init is None else h_init
    h_min = 1e-13 * max(abs(span), 1.0)
    ks = np.empty((7, n))
    while t < t_end:
        h = min(h, t_end - t)
        if h < h_min:
            raise IntegrationError(f"step size underflow at t={t:.6g} (stiff problem?)")
        ks[0] = k1
        for i in range(1, 7):
            yi = y + h * (_A[i] @ ks[:i])
            ks[i] = f(t + _C[i] * h, yi)
        y_new = y + h * (_B @ ks)
        if not np.all(np.isfinite(y_new)):
            raise IntegrationError(f"non-finite state at t={t:.6g} (escape)")
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = math.sqrt(float(np.mean((h * (_E @ ks) / scale) ** 2)))
        if err <= 1.0:
            t_new = t + h
            while next_idx < len(t_grid) and t_grid[next_idx] <= t_new + 1e-12 * max(abs(t_new), 1.0):
                theta = (t_grid[next_idx] - t) / h
                if theta >= 1.0:
                    out[next_idx] = y_new
                else:
                    out[next_idx] = _dense_eval(y, y_new, h, ks, theta)
                next_idx += 1
            t, y = t_new, y_new
            k1 = ks[6].copy()  # FSAL
            factor = _MAX_FACTOR if err == 0.0 else min(_MAX_FACTOR, _SAFETY * err ** -0.2)
            h *= factor
        else:
            h *= max(_MIN_FACTOR, _SAFETY * err ** -0.2)
    return out, h


def _rk4_grid(f, t_grid, y0, substeps=1):
    out = np.empty((len(t_grid), y0.shape[0]))
    out[0] = y0
    y = y0.astype(np.float64)
    for k in range(len(t_grid) - 1):
        t = float(t_grid[k])
        h = (float(t_grid[k + 1]) - t) / substeps
        for s in range(substeps):
            ts = t + s * h
            k1 = f(ts, y)
            k2 = f(ts + 0.5 * h, y + 0.5 * h * k1)
            k3 = f(ts + 0.5 * h, y + 0.5 * h * k2)
            k4 = f(ts + h, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f"non-finite state at t={t_grid[k+1]:.6g} (escape)")
        out[k + 1] = y
    return out


def integrate(
    spec: SystemSpec,
    x0: np.ndarray,
    signal: InputSignal,
    T: float,
    dt: float,
    method: str = "rk45",
    rtol: float = 1e-8,
    atol: float = 1e-8,
    rk4_substeps: int = 1,
    process_noise: np.ndarray | None = None,
) -> Trajectory:
    """Simulate the system on the uniform grid over [0, T].

    ``rk45`` is adaptive Dormand-Prince sampled through its dense output;
    ``rk4`` is classic fixed-step Runge-Kutta. ``process_noise`` is an
    optional (N, n_x) array added to the drift, held constant over each
    grid interval.
    """
    if T <= 0 or dt <= 0:
        raise ValueError("T and dt must be positive")
    n_steps = round(T / dt)
    if abs(n_steps * dt - T) > 1e-9 * T:
        raise ValueError(f"T={T} is not an integral multiple of dt={dt}")
    times = np.arange(n_steps + 1) * dt
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (spec.n_x,):
        raise ValueError(f"x0 shape {x0.shape} != ({spec.n_x},)")

    def f(t, y):
        return spec.drift(y, signal.values(t))

    if process_noise is not None:
        if process_noise.shape != (n_steps, spec.n_x):
            raise ValueError("process_noise must have shape (N, n_x)")
        states = np.empty((n_steps + 1, spec.n_x))
        states[0] = x0
        y = x0
        h_carry = None
        for k in range(n_steps):
            w = process_noise[k]
            fk = lambda t, yv: f(t, yv) + w  # noqa: B023  (bound per interval)
            if method == "rk45":
                seg, h_carry = _dopri5_grid(fk, times[k:k + 2], y, rtol, atol, h_carry)
                y = seg[-1]
            elif method == "rk4":
                y = _rk4_grid(fk, times[k:k + 2], y, rk4_substeps)[-1]
            else:
                raise ValueError(f"unknown method {method!r}")
            states[k + 1] = y
    elif method == "rk45":
        states, _ = _dopri5_grid(f, times, x0, rtol, atol)
    elif method == "rk4":
        states = _rk4_grid(f, times, x0, rk4_substeps)
    else:
        raise ValueError(f"unknown method {method!r}")

    inputs = signal.values(times)
    outputs = spec.output(states)
    return Trajectory(spec.name, times, states, inputs, outputs, signal)


def integrate_ode(f, times: np.ndarray, y0: np.ndarray, method: str = "rk45",
                  rtol: float = 1e-8, atol: float = 1e-8, substeps: int = 1) -> np.ndarray:
    """Integrate dy/dt = f(t, y) on an explicit time grid; returns states."""
    y0 = np.asarray(y0, dtype=np.float64)
    if method == "rk45":
        return _dopri5_grid(f, times, y0, rtol, atol)[0]
    if method == "rk4":
        return _rk4_grid(f, times, y0, substeps)
    raise ValueError(f"unknown method {method!r}")


def add_noise(traj: Trajectory, var: float, rng: np.random.Generator,
              spec: SystemSpec | None = None) -> Trajectory:
    """Return a noisy copy: process noise (piecewise-constant N(0, var I)
    re-realized through the drift) and i.i.d. N(0, var I) measurement noise.

    ``var`` = 0 returns the trajectory unchanged.
    """
    if var < 0:
        raise ValueError("noise variance must be non-negative")
    if var == 0.0:
        return traj
    if spec is None:
        spec = get_system(traj.system)
    if traj.signal is None:
        raise ValueError("trajectory lacks its input signal; cannot re-integrate")
    n_steps = traj.times.shape[0] - 1
    sd = math.sqrt(var)
    w = rng.normal(0.0, sd, size=(n_steps, spec.n_x))
    T = float(traj.times[-1])
    noisy = integrate(spec, traj.states[0], traj.signal, T, traj.dt,
                      method="rk45", process_noise=w)
    v = rng.normal(0.0, sd, size=noisy.outputs.shape)
    return replace(noisy, outputs=noisy.outputs + v)
