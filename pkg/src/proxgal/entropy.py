"""Pointwise Legendre (entropy) functions for interval constraints.

Three families are provided, each defined by its dual gradient map
``grad_dual = (grad R)^{-1}`` sending the whole real line into the open
feasible interval:

``lower``       ``u >= lo``:        ``grad_dual(psi) = lo + exp(psi)``
``upper``       ``u <= hi``:        ``grad_dual(psi) = hi - exp(-psi)``
``bilateral``   ``lo <= u <= hi``:  ``grad_dual(psi) = lo + (hi - lo) * expit(psi)``

The matching primal entropies are the (shifted) Boltzmann/Fermi-Dirac
functions ``R(u) = d log d - d`` with ``d`` the distance to the bound, and
``R(u) = (u-lo) log(u-lo) + (hi-u) log(hi-u)`` for the bilateral case.

Bounds may be constants, arrays aligned with ``psi``, or callables of the
physical point ``x`` (shape ``(..., 2)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, xlogy

VARIANTS = ("lower", "upper", "bilateral")

#: ``|psi|`` is clamped here before exponentiation.
PSI_CLAMP = 700.0


class DomainError(ValueError):
    """A primal argument lies outside the closure of the feasible interval."""


def _softplus(psi):
    return -log_expit(-psi)


@dataclass(eq=False)
class LegendreMap:
    """Entropy for scalar interval constraints.

    Parameters
    ----------
    variant : {"lower", "upper", "bilateral"}
    lower, upper : float, array or callable ``x -> array``
        Obstacles.  The unused side of a one-sided map is ignored.
    """

    variant: str
    lower: object = 0.0
    upper: object = 1.0
    clamp_events: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown entropy variant {self.variant!r}; choose from {VARIANTS}")
        if self.variant == "lower":
            self.upper = np.inf
        elif self.variant == "upper":
            self.lower = -np.inf

    # ------------------------------------------------------------- bounds
    def bounds(self, x=None, shape=None) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate ``(lo, hi)`` at points ``x`` (or broadcast to ``shape``)."""

        def ev(b):
            if callable(b):
                if x is None:
                    raise ValueError("spatially varying bound needs evaluation points")
                return np.asarray(b(x), dtype=float)
            return np.asarray(b, dtype=float)

        lo, hi = ev(self.lower), ev(self.upper)
        if shape is None and x is not None:
            shape = np.shape(x)[:-1]
        if shape is not None:
            lo = np.broadcast_to(lo, shape)
            hi = np.broadcast_to(hi, shape)
        return lo, hi

    def _resolve(self, x, bounds, shape):
        return bounds if bounds is not None else self.bounds(x, shape)

    def _clamp(self, psi):
        psi = np.asarray(psi, dtype=float)
        over = np.abs(psi) > PSI_CLAMP
        if np.any(over):
            self.clamp_events += int(np.count_nonzero(over))
            psi = np.clip(psi, -PSI_CLAMP, PSI_CLAMP)
        return psi

    # ------------------------------------------------------- dual side
    def grad_dual(self, psi, x=None, bounds=None) -> np.ndarray:
        """``grad R*(psi)``, always strictly inside ``(lo, hi)``."""
        psi = self._clamp(psi)
        lo, hi = self._resolve(x, bounds, psi.shape)
        if self.variant == "lower":
            out = lo + np.exp(psi)
        elif self.variant == "upper":
            out = hi - np.exp(-psi)
        else:
            w = hi - lo
            # evaluate from the nearer bound so the small offset is not lost
            out = np.where(psi <= 0, lo + w * expit(psi), hi - w * expit(-psi))
        # float64 cannot resolve lo + tiny; keep the result strictly interior
        return np.clip(out, np.nextafter(lo, np.inf), np.nextafter(hi, -np.inf))

    def grad_dual_derivative(self, psi, x=None, bounds=None) -> np.ndarray:
        """``d/dpsi grad R*(psi) > 0``."""
        psi = self._clamp(psi)
        if self.variant == "lower":
            return np.exp(psi)
        if self.variant == "upper":
            return np.exp(-psi)
        lo, hi = self._resolve(x, bounds, psi.shape)
        return (hi - lo) * expit(psi) * expit(-psi)

    def conjugate(self, psi, x=None, bounds=None) -> np.ndarray:
        """``R*(psi)``."""
        psi = self._clamp(psi)
        lo, hi = self._resolve(x, bounds, psi.shape)
        if self.variant == "lower":
            return np.exp(psi) + lo * psi
        if self.variant == "upper":
            return hi * psi + np.exp(-psi)
        w = hi - lo
        return lo * psi + w * _softplus(psi) - xlogy(w, w)

    def dual_bregman(self, chi, psi, x=None, bounds=None) -> np.ndarray:
        """``D*(chi, psi) = R*(chi) - R*(psi) - grad R*(psi) (chi - psi)``."""
        chi = np.asarray(chi, dtype=float)
        psi = np.asarray(psi, dtype=float)
        b = self._resolve(x, bounds, np.broadcast_shapes(chi.shape, psi.shape))
        return self.conjugate(chi, bounds=b) - self.conjugate(psi, bounds=b) - self.grad_dual(psi, bounds=b) * (chi - psi)

    # ----------------------------------------------------- primal side
    def _distances(self, u, lo, hi, closed: bool):
        below = u - lo
        above = hi - u
        bad = (below < 0) | (above < 0) if closed else (below <= 0) | (above <= 0)
        if np.any(bad):
            where = "closure of the" if closed else "open"
            raise DomainError(f"argument outside the {where} feasible interval")
        return below, above

    def entropy(self, u, x=None, bounds=None) -> np.ndarray:
        """``R(u)``, finite on the closed interval."""
        u = np.asarray(u, dtype=float)
        lo, hi = self._resolve(x, bounds, u.shape)
        below, above = self._distances(u, lo, hi, closed=True)
        if self.variant == "lower":
            return xlogy(below, below) - below
        if self.variant == "upper":
            return xlogy(above, above) - above
        return xlogy(below, below) + xlogy(above, above)

    def grad_primal(self, u, x=None, bounds=None) -> np.ndarray:
        """``grad R(u)``, defined on the open interval."""
        u = np.asarray(u, dtype=float)
        lo, hi = self._resolve(x, bounds, u.shape)
        below, above = self._distances(u, lo, hi, closed=False)
        if self.variant == "lower":
            return np.log(below)
        if self.variant == "upper":
            return -np.log(above)
        return np.log(below) - np.log(above)

    def bregman(self, u, v, x=None, bounds=None) -> np.ndarray:
        """``D(u, v) = R(u) - R(v) - grad R(v) (u - v)``; ``u`` closed, ``v`` open."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        b = self._resolve(x, bounds, np.broadcast_shapes(u.shape, v.shape))
        return self.entropy(u, bounds=b) - self.entropy(v, bounds=b) - self.grad_primal(v, bounds=b) * (u - v)

    def three_point_residual(self, u, v, w, x=None, bounds=None) -> np.ndarray:
        """``D(u,v) - D(u,w) + D(v,w) - (grad R(v) - grad R(w)) (v - u)``."""
        u, v, w = (np.asarray(a, dtype=float) for a in (u, v, w))
        b = self._resolve(x, bounds, np.broadcast_shapes(u.shape, v.shape, w.shape))
        lhs = self.bregman(u, v, bounds=b) - self.bregman(u, w, bounds=b) + self.bregman(v, w, bounds=b)
        rhs = (self.grad_primal(v, bounds=b) - self.grad_primal(w, bounds=b)) * (v - u)
        return lhs - rhs
