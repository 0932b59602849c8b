"""Fixed-step ODE solvers, differentiable end to end.

A dynamics function takes (state, time, params) and returns the state
derivative as a Tensor of the same shape; integration composes tape
operations so gradients flow through every step. Euler and fourth-order
Runge-Kutta steppers are provided; the step count over a segment is
ceil(span / step_size) with the final step shortened to land exactly on
the segment end.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import numerics as nm
from .errors import ConfigError

METHODS = ("euler", "rk4")


@dataclass(frozen=True)
class SolveSpec:
    """Solver choice and step size for one time segment."""

    method: str = "euler"
    step_size: float = 0.25
    t_start: float = 0.0
    t_end: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown solver {self.method!r}; expected one of {METHODS}")
        if not 0.0 < self.step_size <= 1.0:
            raise ConfigError(f"step size must be in (0, 1], got {self.step_size}")
        if self.t_start > self.t_end:
            raise ConfigError(f"empty segment: t_start {self.t_start} > t_end {self.t_end}")

    def over(self, t_start: float, t_end: float) -> "SolveSpec":
        return replace(self, t_start=t_start, t_end=t_end)


def euler_step(h, t, s, f, params):
    """One explicit Euler update h + s*f(h, t)."""
    if s <= 0:
        raise ConfigError(f"step size must be positive, got {s}")
    dh = nm.check_finite(f(h, t, params), f"euler step at t={t:g}")
    return nm.add(h, nm.scale(dh, s))


def rk4_step(h, t, s, f, params):
    """One classical fourth-order Runge-Kutta update."""
    if s <= 0:
        raise ConfigError(f"step size must be positive, got {s}")
    half = s / 2.0
    ctx = f"rk4 step at t={t:g}"
    f1 = nm.check_finite(f(h, t, params), ctx)
    f2 = nm.check_finite(f(nm.add(h, nm.scale(f1, half)), t + half, params), ctx)
    f3 = nm.check_finite(f(nm.add(h, nm.scale(f2, half)), t + half, params), ctx)
    f4 = nm.check_finite(f(nm.add(h, nm.scale(f3, s)), t + s, params), ctx)
    combo = nm.add(nm.add(f1, f4), nm.scale(nm.add(f2, f3), 2.0))
    return nm.add(h, nm.scale(combo, s / 6.0))


_STEPPERS = {"euler": euler_step, "rk4": rk4_step}


def segment_steps(t_start: float, t_end: float, step_size: float):
    """(time, size) pairs covering [t_start, t_end]; last step shortened."""
    span = t_end - t_start
    if span <= 0:
        return []
    n = max(1, int(-(-span // step_size)))  # ceil
    # guard against float slop producing an extra sliver step
    if (n - 1) * step_size >= span - 1e-12:
        n -= 1 if n > 1 else 0
    steps = []
    t = t_start
    for i in range(n):
        s = step_size if i < n - 1 else t_end - t
        steps.append((t, s))
        t += step_size
    return steps


def integrate(h0, spec: SolveSpec, f, params):
    """March h0 from spec.t_start to spec.t_end with the configured stepper."""
    stepper = _STEPPERS[spec.method]
    h = h0
    for t, s in segment_steps(spec.t_start, spec.t_end, spec.step_size):
        h = stepper(h, t, s, f, params)
    return h
