"""Convex generator functions f for f-divergences.

Every generator is evaluated from ``log u`` so that power and log terms stay
finite for ratios spanning many orders of magnitude. The public helpers
:func:`eval_generator` and :func:`eval_generator_derivative` accept ``u``
itself and validate the domain.

String names accepted by :func:`parse_generator`::

    fkl, rkl, js, jeffreys, alpha:<float>

plus any name added with :func:`register_generator`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import DomainError, NonFiniteError

LN2 = math.log(2.0)

# alpha requests within this distance of 0 or 1 collapse to the KL endpoints
ALPHA_ENDPOINT_TOL = 1e-6


def _softplus(x):
    return np.logaddexp(0.0, x)


class _Form(NamedTuple):
    f_log: Callable  # (log_u, alpha) -> f(u)
    df_log: Callable  # (log_u, alpha) -> f'(u)
    f_at_zero: float | None  # finite limit f(0+), None for a pole
    slope: float | None  # lim f(u)/u as u -> inf, None when unbounded
    needs_alpha: bool = False


def _fkl(lu, a):
    return np.exp(lu) * lu


def _fkl_d(lu, a):
    return lu + 1.0


def _rkl(lu, a):
    return -lu


def _rkl_d(lu, a):
    return -np.exp(-lu)


def _js_d(lu, a):
    # ln(2u / (u + 1))
    return LN2 - _softplus(-lu)


def _js(lu, a):
    return np.exp(lu) * _js_d(lu, a) + LN2 - _softplus(lu)


def _jeffreys(lu, a):
    return np.expm1(lu) * lu


def _jeffreys_d(lu, a):
    return lu - np.expm1(-lu)


def _alpha(lu, a):
    # two algebraically equal forms; each avoids cancellation near its endpoint
    denom = a * (a - 1.0)
    if a < 0.5:
        return (np.exp(lu) * np.expm1(-a * lu) + a * np.expm1(lu)) / denom
    b = 1.0 - a
    return (np.expm1(b * lu) - b * np.expm1(lu)) / denom


def _alpha_d(lu, a):
    return -np.expm1(-a * lu) / a


_REGISTRY: dict[str, _Form] = {
    "fkl": _Form(_fkl, _fkl_d, 0.0, None),
    "rkl": _Form(_rkl, _rkl_d, None, 0.0),
    "js": _Form(_js, _js_d, LN2, LN2),
    "jeffreys": _Form(_jeffreys, _jeffreys_d, None, None),
    "alpha": _Form(_alpha, _alpha_d, None, None, needs_alpha=True),
}

SHIPPED = ("fkl", "rkl", "js", "jeffreys", "alpha")


def register_generator(
    name: str,
    f: Callable[[np.ndarray], np.ndarray],
    df: Callable[[np.ndarray], np.ndarray],
    *,
    f_at_zero: float | None = None,
    slope: float | None = None,
) -> None:
    """Add a generator to the catalog.

    ``f`` and ``df`` take ``u`` (not ``log u``) and must be vectorized.
    ``f_at_zero`` is the finite value f(0+) if one exists, ``slope`` the
    finite limit of f(u)/u as u grows, if one exists.
    """
    if name in _REGISTRY or ":" in name:
        raise ValueError(f"cannot register generator {name!r}")
    _REGISTRY[name] = _Form(
        lambda lu, a: f(np.exp(lu)),
        lambda lu, a: df(np.exp(lu)),
        f_at_zero,
        slope,
    )


@dataclass(frozen=True)
class Generator:
    """A named convex generator, optionally plus an affine term ``shift*(u-1)``.

    Prefer the constructors (:func:`forward_kl`, :func:`alpha_divergence`, ...)
    over direct instantiation.
    """

    name: str
    alpha: float | None = None
    shift: float = 0.0

    def __post_init__(self):
        form = _REGISTRY.get(self.name)
        if form is None:
            raise DomainError(f"unknown generator {self.name!r}")
        if form.needs_alpha:
            if self.alpha is None or not 0.0 < self.alpha < 1.0:
                raise DomainError(f"alpha must lie in (0, 1), got {self.alpha}")
        elif self.alpha is not None:
            raise DomainError(f"generator {self.name!r} takes no alpha")

    @property
    def _form(self) -> _Form:
        return _REGISTRY[self.name]

    def f_log(self, log_u):
        """f(u) evaluated from log u."""
        out = self._form.f_log(log_u, self.alpha)
        if self.shift:
            out = out + self.shift * np.expm1(log_u)
        return out

    def df_log(self, log_u):
        """f'(u) evaluated from log u."""
        out = self._form.df_log(log_u, self.alpha)
        if self.shift:
            out = out + self.shift
        return out

    @property
    def f_at_zero(self) -> float | None:
        v = self._form.f_at_zero
        return None if v is None else v - self.shift

    @property
    def slope_at_infinity(self) -> float | None:
        """lim f(u)/u for u -> inf, or None if it diverges."""
        if self.name == "alpha":
            s = 1.0 / self.alpha
        else:
            s = self._form.slope
        return None if s is None else s + self.shift

    @property
    def has_pole_at_zero(self) -> bool:
        return self.f_at_zero is None

    def shifted(self, c: float) -> "Generator":
        """Same divergence family with ``c*(u-1)`` added to f."""
        return Generator(self.name, self.alpha, self.shift + c)

    def __str__(self):
        s = f"alpha:{self.alpha!r}" if self.name == "alpha" else self.name
        if self.shift:
            s += f"+{self.shift!r}(u-1)"
        return s


def forward_kl() -> Generator:
    """f(u) = u ln u."""
    return Generator("fkl")


def reverse_kl() -> Generator:
    """f(u) = -ln u."""
    return Generator("rkl")


def jensen_shannon() -> Generator:
    """f(u) = u ln(2u/(u+1)) + ln(2/(u+1))."""
    return Generator("js")


def jeffreys() -> Generator:
    """f(u) = (u - 1) ln u."""
    return Generator("jeffreys")


def alpha_divergence(alpha: float) -> Generator:
    """f(u) = (u^(1-alpha) - (1-alpha) u - alpha) / (alpha (alpha - 1)).

    Requests within 1e-6 of either endpoint return the KL generator that the
    family converges to (up to an affine term): alpha -> 0 gives forward KL,
    alpha -> 1 gives reverse KL.
    """
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    if alpha <= ALPHA_ENDPOINT_TOL:
        return forward_kl()
    if alpha >= 1.0 - ALPHA_ENDPOINT_TOL:
        return reverse_kl()
    return Generator("alpha", alpha)


def parse_generator(text: str) -> Generator:
    """Build a generator from its config name, e.g. ``"rkl"`` or ``"alpha:0.1"``."""
    text = text.strip()
    if text.startswith("alpha:"):
        try:
            a = float(text.split(":", 1)[1])
        except ValueError:
            raise DomainError(f"bad alpha in {text!r}") from None
        return alpha_divergence(a)
    if text == "alpha":
        raise DomainError("alpha generator needs a value, e.g. 'alpha:0.1'")
    return Generator(text)


def default_generators() -> list[Generator]:
    """The five named generators, alpha at 0.5."""
    return [forward_kl(), reverse_kl(), jensen_shannon(), jeffreys(), alpha_divergence(0.5)]


def _log_of_positive(gen: Generator, u):
    u = np.asarray(u, dtype=float)
    if np.any(np.isnan(u)) or np.any(u < 0):
        raise DomainError(f"generator {gen} needs u >= 0")
    zero = u == 0
    if np.any(zero) and gen.f_at_zero is None:
        raise DomainError(f"generator {gen} has a pole at u = 0")
    with np.errstate(divide="ignore"):
        return np.log(u), zero


def eval_generator(gen: Generator, u):
    """f(u) for scalar or array ``u``.

    u = 0 is allowed only for generators with a finite limit there
    (forward KL, Jensen-Shannon).
    """
    lu, zero = _log_of_positive(gen, u)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.where(zero, gen.f_at_zero if gen.f_at_zero is not None else 0.0,
                       gen.f_log(np.where(zero, 0.0, lu)))
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"generator {gen} overflowed")
    return out[()] if out.ndim == 0 else out


def eval_generator_derivative(gen: Generator, u):
    """f'(u) for u > 0."""
    u = np.asarray(u, dtype=float)
    if np.any(np.isnan(u)) or np.any(u <= 0):
        raise DomainError("derivative requires u > 0")
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.asarray(gen.df_log(np.log(u)), dtype=float)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"derivative of {gen} overflowed")
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class ValidityReport:
    f_one_residual: float
    max_convexity_violation: float
    max_derivative_error: float

    def ok(self, tol_one=1e-12, tol_convex=1e-9, tol_deriv=1e-5) -> bool:
        return (
            self.f_one_residual < tol_one
            and self.max_convexity_violation < tol_convex
            and self.max_derivative_error < tol_deriv
        )


def log_grid(lo=1e-4, hi=1e4, n=101) -> np.ndarray:
    """Log-spaced grid; the point closest to 1 is snapped to exactly 1."""
    g = np.logspace(math.log10(lo), math.log10(hi), n)
    if lo <= 1.0 <= hi:
        g[np.argmin(np.abs(np.log(g)))] = 1.0
    return g


def check_generator(gen: Generator, grid, rel_step=1e-6) -> ValidityReport:
    """Numerical sanity checks of a generator over a sorted positive grid.

    Reports |f(1)|, the worst violation of f((a+c)/2) <= (f(a)+f(c))/2 over
    neighbours (a, b, c) of each interior grid point, and the worst
    |f' - central difference| / max(|f'|, 1) with step ``rel_step * u``.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise DomainError("grid must be a nonempty 1-d sequence")
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise DomainError("grid must be positive and strictly increasing")
    if not np.any(grid == 1.0):
        raise DomainError("grid must contain 1")

    f1 = abs(float(eval_generator(gen, 1.0)))

    viol = 0.0
    if grid.size >= 3:
        a, c = grid[:-2], grid[2:]
        mid = eval_generator(gen, 0.5 * (a + c))
        chord = 0.5 * (eval_generator(gen, a) + eval_generator(gen, c))
        viol = max(0.0, float(np.max(mid - chord)))

    h = rel_step * grid
    fd = (eval_generator(gen, grid + h) - eval_generator(gen, grid - h)) / (2 * h)
    d = eval_generator_derivative(gen, grid)
    err = float(np.max(np.abs(d - fd) / np.maximum(np.abs(d), 1.0)))
    return ValidityReport(f1, viol, err)
