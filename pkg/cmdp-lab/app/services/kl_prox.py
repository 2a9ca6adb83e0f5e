"""
Constrained KL Proximal Step
============================

Exact solution of the x-subproblem

    min_y  <g, y> + sum_i y_i log(y_i / y0_i) - y_i + y0_i
    s.t.   y_i <= a_i,  sum_i y_i <= B1,  sum_i c_i y_i <= B2

for a one-hot linear term g (only coordinate k is nonzero) and a feasible,
strictly positive y0. Stationarity gives

    y_i = y0_i exp(-alpha - c_i beta)                  (i != k)
    y_k = min(y0_k exp(-g - alpha - c_k beta), a_k)

with multipliers alpha, beta >= 0 for the two coupling constraints. The four
sign patterns of (alpha, beta) are tried in order; the one-dimensional roots
are found by bisection on monotone functions evaluated in the log domain, and
each candidate is accepted only after an independent KKT check.
"""

from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from ..core.config import NumericConfig, get_numeric_config
from ..core.exceptions import InvalidArgumentError, SolverError
from ..models.requests import FeasibleRegions

MODULE = "dpdl"
_TINY = np.finfo(float).tiny


class KktCase(IntEnum):
    """Which coupling constraints are active."""

    NONE_ACTIVE = 1
    MASS_ACTIVE = 2
    RATIO_ACTIVE = 3
    BOTH_ACTIVE = 4


@dataclass(frozen=True)
class ProxSolution:
    """Minimizer with its multipliers and the KKT residual it was accepted at."""

    y: np.ndarray
    alpha: float
    beta: float
    case: KktCase
    residual: float


class KlProxSolver:
    """
    Solver for one feasible region (fixed caps a, weights c and budgets B1, B2).

    In DPDL terms: a_i = psi mu_hat_i/(1-gamma), c_i = 1/mu_hat_i,
    B1 = 4/(1-gamma), B2 = N psi/(1-gamma).
    """

    def __init__(self, caps: np.ndarray, weights: np.ndarray, mass_budget: float, ratio_budget: float, numeric: Optional[NumericConfig] = None):
        self.a = np.asarray(caps, dtype=float).reshape(-1)
        self.c = np.asarray(weights, dtype=float).reshape(-1)
        if self.a.size != self.c.size or np.any(self.a <= 0.0) or np.any(self.c <= 0.0):
            raise InvalidArgumentError(MODULE, "caps and weights must be positive vectors of equal length")
        if mass_budget <= 0.0 or ratio_budget <= 0.0:
            raise InvalidArgumentError(MODULE, "budgets must be positive")
        self.B1 = float(mass_budget)
        self.B2 = float(ratio_budget)
        self.log_a = np.log(self.a)
        self.log_c = np.log(self.c)
        self.numeric = numeric or get_numeric_config()

    @classmethod
    def for_regions(cls, regions: FeasibleRegions, mu_hat: np.ndarray) -> "KlProxSolver":
        mu_hat = np.asarray(mu_hat, dtype=float).reshape(-1)
        return cls(
            caps=regions.x_cap_per_coord * mu_hat,
            weights=1.0 / mu_hat,
            mass_budget=regions.x_cap_mass,
            ratio_budget=regions.x_cap_aggregate,
        )

    # Case 1 only needs the updated coordinate and the two running sums.
    def try_uncoupled(self, y0_k: float, k: int, g: float, total: float, weighted: float) -> Optional[Tuple[float, float, float]]:
        """
        O(1) check of the no-coupling case.

        Returns:
            (new y_k, new sum y, new sum c y) when both budgets stay satisfied,
            otherwise None
        """
        y_k = min(y0_k * np.exp(-g), self.a[k]) if -g < 700.0 else self.a[k]
        new_total = total - y0_k + y_k
        new_weighted = weighted + self.c[k] * (y_k - y0_k)
        if new_total <= self.B1 and new_weighted <= self.B2:
            return float(y_k), float(new_total), float(new_weighted)
        return None

    def solve(self, y0: np.ndarray, k: int, g: float) -> ProxSolution:
        """Exact proximal point for the one-hot term g at coordinate k."""
        y0 = np.asarray(y0, dtype=float).reshape(-1)
        n = y0.size
        if n != self.a.size or not 0 <= k < n:
            raise InvalidArgumentError(MODULE, f"expected {self.a.size} coordinates and a hit index in range")
        if np.any(y0 <= 0.0):
            raise InvalidArgumentError(MODULE, "prox centre must be strictly positive")

        log_y0 = np.log(y0)
        log_free = log_y0[k] - g
        others = np.arange(n) != k
        best_residual = np.inf

        for case, alpha, beta in self._candidates(log_y0, log_free, k, others):
            y = self._point(log_y0, log_free, k, alpha, beta)
            residual = self.kkt_residual(y0, k, g, y, alpha, beta)
            best_residual = min(best_residual, residual)
            if residual <= self.numeric.KKT_TOL:
                return ProxSolution(y=y, alpha=alpha, beta=beta, case=case, residual=residual)
        raise SolverError(MODULE, f"no KKT case validated for the x-subproblem (best residual {best_residual:.3e})")

    def _point(self, log_y0: np.ndarray, log_free: float, k: int, alpha: float, beta: float) -> np.ndarray:
        log_y = log_y0 - alpha - self.c * beta
        log_y[k] = min(log_free - alpha - self.c[k] * beta, self.log_a[k])
        return np.maximum(np.exp(log_y), _TINY)

    def _log_weights(self, log_y0: np.ndarray, log_free: float, k: int, beta: float) -> np.ndarray:
        log_w = log_y0 - self.c * beta
        log_w[k] = log_free - self.c[k] * beta
        return log_w

    def _candidates(self, log_y0: np.ndarray, log_free: float, k: int, others: np.ndarray):
        """Yield (case, alpha, beta) in case order; later cases only when earlier fail."""
        B1, B2, a_k, c_k, log_a_k = self.B1, self.B2, self.a[k], self.c[k], self.log_a[k]
        has_others = bool(others.any())
        log_rest = float(logsumexp(log_y0[others])) if has_others else -np.inf

        yield KktCase.NONE_ACTIVE, 0.0, 0.0

        # alpha > 0, beta = 0: mass budget binds.
        alpha_free = float(np.logaddexp(log_free, log_rest)) - np.log(B1)
        if alpha_free > 0.0 and log_free - alpha_free <= log_a_k:
            yield KktCase.MASS_ACTIVE, alpha_free, 0.0
        elif has_others and B1 > a_k:
            alpha_cap = log_rest - np.log(B1 - a_k)
            if alpha_cap > 0.0:
                yield KktCase.MASS_ACTIVE, alpha_cap, 0.0

        # alpha = 0, beta > 0: ratio budget binds.
        def ratio_excess(beta: float) -> float:
            log_w = self._log_weights(log_y0, log_free, k, beta)
            log_w[k] = min(log_w[k], log_a_k)
            return float(logsumexp(self.log_c + log_w)) - np.log(B2)

        beta = self._decreasing_root(ratio_excess)
        if beta is not None:
            yield KktCase.RATIO_ACTIVE, 0.0, beta

        # alpha > 0, beta > 0: the weighted mean of c must equal B2/B1.
        def weighted_mean_excess(beta: float) -> float:
            log_w = self._log_weights(log_y0, log_free, k, beta)
            return float(logsumexp(self.log_c + log_w) - logsumexp(log_w)) - np.log(B2 / B1)

        beta = self._decreasing_root(weighted_mean_excess)
        if beta is not None:
            alpha = float(logsumexp(self._log_weights(log_y0, log_free, k, beta))) - np.log(B1)
            if alpha > 0.0 and log_free - alpha - c_k * beta <= log_a_k:
                yield KktCase.BOTH_ACTIVE, alpha, beta

        if has_others and B1 > a_k and B2 > c_k * a_k:
            target = np.log((B2 - c_k * a_k) / (B1 - a_k))

            def capped_mean_excess(beta: float) -> float:
                log_w = log_y0[others] - self.c[others] * beta
                return float(logsumexp(self.log_c[others] + log_w) - logsumexp(log_w)) - target

            beta = self._decreasing_root(capped_mean_excess)
            if beta is not None:
                alpha = float(logsumexp(log_y0[others] - self.c[others] * beta)) - np.log(B1 - a_k)
                if alpha > 0.0:
                    yield KktCase.BOTH_ACTIVE, alpha, beta

    def _decreasing_root(self, fn: Callable[[float], float]) -> Optional[float]:
        """Positive root of a nonincreasing function, or None when fn(0) <= 0 or no sign change exists."""
        if fn(0.0) <= 0.0:
            return None
        upper = 1.0
        for _ in range(self.numeric.BISECT_MAX_ITER):
            value = fn(upper)
            if value <= 0.0:
                break
            upper *= 2.0
        else:
            return None
        if value == 0.0:
            return upper
        try:
            return float(
                optimize.bisect(
                    fn, 0.0, upper, xtol=self.numeric.BISECT_FTOL * 1e-3, rtol=4.0 * np.finfo(float).eps,
                    maxiter=self.numeric.BISECT_MAX_ITER,
                )
            )
        except RuntimeError as exc:
            raise SolverError(MODULE, f"bisection did not converge: {exc}") from exc

    def kkt_residual(self, y0: np.ndarray, k: int, g: float, y: np.ndarray, alpha: float, beta: float) -> float:
        """
        Largest violation among primal feasibility, dual feasibility,
        complementary slackness and stationarity (relative where scale-free).
        """
        y0 = np.asarray(y0, dtype=float)
        mass = float(y.sum())
        ratio = float(self.c @ y)
        terms: List[float] = [
            max(0.0, mass / self.B1 - 1.0),
            max(0.0, ratio / self.B2 - 1.0),
            float(np.max(np.maximum(y / self.a - 1.0, 0.0))),
            max(0.0, -alpha),
            max(0.0, -beta),
            alpha * abs(mass / self.B1 - 1.0),
            beta * abs(ratio / self.B2 - 1.0),
        ]
        shift = alpha + self.c * beta
        # Stationarity on coordinates that did not underflow and are below their cap.
        free = (y > _TINY) & (y < self.a * (1.0 - 1e-12))
        expected = np.log(y0) - shift
        expected[k] -= g
        if free.any():
            terms.append(float(np.max(np.abs(np.log(y[free]) - expected[free]))))
        # Cap multiplier at k must be nonnegative when the cap binds.
        if y[k] >= self.a[k] * (1.0 - 1e-12):
            terms.append(max(0.0, self.log_a[k] - expected[k]))
        return max(terms)


def update_x(
    x: np.ndarray,
    g_x: np.ndarray,
    eta: float,
    alpha_x: float,
    regions: FeasibleRegions,
    mu_hat: np.ndarray,
) -> np.ndarray:
    """
    One KL mirror-ascent step on x for a one-hot stochastic gradient.

    Maps to the prox problem with g = -(eta/alpha_x) g_x and returns the
    exact constrained minimizer in the shape of ``x``.
    """
    x = np.asarray(x, dtype=float)
    flat_g = np.asarray(g_x, dtype=float).reshape(-1)
    nonzero = np.flatnonzero(flat_g)
    if nonzero.size > 1:
        raise InvalidArgumentError(MODULE, "g_x must have at most one nonzero coordinate")
    k = int(nonzero[0]) if nonzero.size else 0
    g = -(eta / alpha_x) * float(flat_g[k])
    solver = KlProxSolver.for_regions(regions, mu_hat)
    return solver.solve(x.reshape(-1), k, g).y.reshape(x.shape)
