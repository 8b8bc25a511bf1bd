"""Privacy accounting for iterated Gaussian gradient perturbation.

Composition rules for pure/approximate DP (naive and advanced composition),
zero-concentrated DP and Renyi DP, the conversions between them, per-step
Gaussian accounting, noise calibration and the membership-advantage bound.

Everything here is a pure function of its arguments.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "AccountingError",
    "CalibrationError",
    "DEFAULT_RDP_ORDERS",
    "MechanismSpec",
    "PrivacyBudget",
    "RdpCurve",
    "Variant",
    "ZcdpBudget",
    "achieved_budget",
    "advantage_bound",
    "calibrate_sigma",
    "compose_ac",
    "compose_nc",
    "compose_rdp_table1",
    "compose_zcdp",
    "dp_to_zcdp",
    "gaussian_sigma_for",
    "gaussian_step_rdp",
    "gaussian_step_zcdp",
    "rdp_to_dp",
    "zcdp_to_dp",
]


class AccountingError(ValueError):
    """Raised for out-of-domain accounting inputs or violated validity conditions."""


class CalibrationError(AccountingError):
    """No noise scale in the search range meets the requested budget."""


class Variant(str, enum.Enum):
    NC = "NC"
    AC = "AC"
    ZCDP = "ZCDP"
    RDP = "RDP"


# Orders near 1 serve budgets around eps ~ 1000; the large orders are needed to
# reach eps ~ 0.01 at all, since ln(1/delta)/(a - 1) floors the conversion.
DEFAULT_RDP_ORDERS: tuple[float, ...] = (
    1.01, 1.02, 1.05, 1.1, 1.15, 1.2,
    1.25, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0,
    512.0, 1024.0, 2048.0, 4096.0,
)


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise AccountingError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if not (0.0 <= self.delta < 1.0):
            raise AccountingError(f"delta must lie in [0, 1), got {self.delta}")


@dataclass(frozen=True)
class ZcdpBudget:
    rho: float
    xi: float = 0.0

    def __post_init__(self):
        if self.xi != 0.0:
            raise AccountingError("only xi = 0 is supported")
        if not (math.isfinite(self.rho) and self.rho >= 0):
            raise AccountingError(f"rho must be finite and >= 0, got {self.rho}")


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[float, ...]
    eps_at_order: tuple[float, ...]

    def __post_init__(self):
        orders = tuple(float(a) for a in self.orders)
        eps = tuple(float(e) for e in self.eps_at_order)
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "eps_at_order", eps)
        if len(orders) != len(eps):
            raise AccountingError("orders and eps_at_order differ in length")
        if any(a <= 1.0 for a in orders):
            raise AccountingError("all Renyi orders must exceed 1")
        if any(b <= a for a, b in zip(orders, orders[1:])):
            raise AccountingError("orders must be strictly increasing")
        if any(not (math.isfinite(e) and e >= 0) for e in eps):
            raise AccountingError("RDP values must be finite and >= 0")

    def __len__(self) -> int:
        return len(self.orders)


@dataclass(frozen=True)
class MechanismSpec:
    """A Gaussian mechanism with l2 sensitivity `sensitivity` and noise std
    `sigma`, invoked `steps` times."""

    sensitivity: float
    sigma: float
    steps: int = 1

    def __post_init__(self):
        if not self.sensitivity > 0:
            raise AccountingError("sensitivity must be positive")
        if not self.sigma > 0:
            raise AccountingError("sigma must be positive")
        if int(self.steps) != self.steps or self.steps < 1:
            raise AccountingError("steps must be a positive integer")


def _check_k(k: int) -> int:
    if int(k) != k or k < 1:
        raise AccountingError(f"k must be a positive integer, got {k}")
    return int(k)


def _check_open_delta(delta: float) -> float:
    if not (0.0 < delta < 1.0):
        raise AccountingError(f"delta must lie in (0, 1), got {delta}")
    return float(delta)


# --------------------------------------------------------------------------
# composition and conversion


def compose_nc(eps_step: float, delta_step: float, k: int) -> PrivacyBudget:
    """Naive (linear) composition of `k` (eps_step, delta_step)-DP mechanisms."""
    k = _check_k(k)
    if not (math.isfinite(eps_step) and eps_step >= 0):
        raise AccountingError("eps_step must be finite and >= 0")
    if not (0.0 <= delta_step < 1.0):
        raise AccountingError("delta_step must lie in [0, 1)")
    delta = k * delta_step
    if delta >= 1.0:
        raise AccountingError(f"composed delta {delta} >= 1: invalid composition")
    return PrivacyBudget(k * eps_step, delta)


def compose_ac(eps_step: float, k: int, delta_slack: float) -> PrivacyBudget:
    """Advanced composition of `k` eps_step-DP mechanisms.

    Total epsilon is ``eps*sqrt(2k ln(1/d)) + k*eps*(e^eps - 1)``; the
    returned delta is the composition slack only (callers add any per-step
    delta themselves).
    """
    k = _check_k(k)
    delta_slack = _check_open_delta(delta_slack)
    if not (math.isfinite(eps_step) and eps_step > 0):
        raise AccountingError("eps_step must be finite and > 0")
    total = eps_step * math.sqrt(2.0 * k * math.log(1.0 / delta_slack))
    total += k * eps_step * math.expm1(eps_step)
    return PrivacyBudget(total, delta_slack)


def compose_zcdp(rho_step: float, k: int) -> ZcdpBudget:
    k = _check_k(k)
    if not (math.isfinite(rho_step) and rho_step >= 0):
        raise AccountingError("rho_step must be finite and >= 0")
    return ZcdpBudget(k * rho_step)


def zcdp_to_dp(budget: ZcdpBudget, delta: float) -> PrivacyBudget:
    delta = _check_open_delta(delta)
    rho = budget.rho
    return PrivacyBudget(rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta)), delta)


def dp_to_zcdp(eps: float) -> ZcdpBudget:
    if not (math.isfinite(eps) and eps >= 0):
        raise AccountingError("eps must be finite and >= 0")
    return ZcdpBudget(0.5 * eps * eps)


def rdp_to_dp(curve: RdpCurve, delta: float, conversion: str = "basic") -> PrivacyBudget:
    """Convert an RDP curve to (eps, delta)-DP, minimizing over its orders.

    ``conversion="basic"`` uses ``eps(a) + ln(1/delta)/(a-1)``.
    ``conversion="tight"`` uses the sharper bound
    ``eps(a) + (ln(1/delta) - ln a)/(a-1) + ln((a-1)/a)``,
    which never exceeds the basic one.

    Ties go to the smallest order.
    """
    delta = _check_open_delta(delta)
    if len(curve) == 0:
        raise AccountingError("cannot convert an empty RDP curve")
    if conversion not in ("basic", "tight"):
        raise AccountingError(f"unknown conversion {conversion!r}")
    log_inv_delta = math.log(1.0 / delta)
    best = math.inf
    for alpha, eps_a in zip(curve.orders, curve.eps_at_order):
        val = eps_a + log_inv_delta / (alpha - 1.0)
        if conversion == "tight":
            val += math.log((alpha - 1.0) / alpha) - math.log(alpha) / (alpha - 1.0)
        if val < best:
            best = val
    return PrivacyBudget(max(best, 0.0), delta)


def compose_rdp_table1(eps_step: float, k: int, delta: float) -> PrivacyBudget:
    """RDP composition of `k` pure eps_step-DP mechanisms: ``4*eps*sqrt(2k ln(1/delta))``.

    Only valid when ``ln(1/delta) >= eps_step**2 * k``.
    """
    k = _check_k(k)
    delta = _check_open_delta(delta)
    if not (math.isfinite(eps_step) and eps_step > 0):
        raise AccountingError("eps_step must be finite and > 0")
    log_inv_delta = math.log(1.0 / delta)
    if log_inv_delta < eps_step * eps_step * k:
        raise AccountingError(
            f"validity condition ln(1/delta) >= eps^2*k violated: "
            f"{log_inv_delta:.6g} < {eps_step * eps_step * k:.6g}"
        )
    return PrivacyBudget(4.0 * eps_step * math.sqrt(2.0 * k * log_inv_delta), delta)


# --------------------------------------------------------------------------
# Gaussian mechanism


def gaussian_step_zcdp(spec: MechanismSpec) -> ZcdpBudget:
    """Composed zCDP of `spec.steps` Gaussian invocations: ``k*D^2/(2 s^2)``."""
    return ZcdpBudget(spec.steps * spec.sensitivity**2 / (2.0 * spec.sigma**2))


def gaussian_step_rdp(spec: MechanismSpec, orders: Sequence[float] = DEFAULT_RDP_ORDERS) -> RdpCurve:
    orders = tuple(float(a) for a in orders)
    if any(a <= 1.0 for a in orders):
        raise AccountingError("all Renyi orders must exceed 1")
    rho = spec.steps * spec.sensitivity**2 / (2.0 * spec.sigma**2)
    return RdpCurve(orders, tuple(a * rho for a in orders))


def gaussian_sigma_for(eps: float, delta: float, sensitivity: float = 1.0) -> float:
    """Classic Gaussian-mechanism std ``D*sqrt(2 ln(1.25/delta))/eps``."""
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / eps


def _nc_delta_step(delta: float, k: int) -> float:
    return delta / (k + 1)


def _ac_delta_step(delta: float, k: int) -> float:
    return delta / (2 * k)


def _forward_epsilon(variant: Variant, sigma: float, k: int, delta: float, sensitivity: float, orders) -> float:
    # may return inf when sigma is tiny
    if variant in (Variant.NC, Variant.AC):
        d_step = _nc_delta_step(delta, k) if variant is Variant.NC else _ac_delta_step(delta, k)
        eps_step = sensitivity * math.sqrt(2.0 * math.log(1.25 / d_step)) / sigma
        if variant is Variant.NC:
            return k * eps_step
        if eps_step > 700.0:
            return math.inf
        return compose_ac(eps_step, k, delta / 2.0).epsilon
    spec = MechanismSpec(sensitivity, sigma, k)
    if variant is Variant.ZCDP:
        return zcdp_to_dp(gaussian_step_zcdp(spec), delta).epsilon
    return rdp_to_dp(gaussian_step_rdp(spec, orders), delta, conversion="tight").epsilon


def achieved_budget(
    variant: Variant | str,
    sigma: float,
    k: int,
    delta: float,
    sensitivity: float = 1.0,
    orders: Sequence[float] = DEFAULT_RDP_ORDERS,
) -> PrivacyBudget:
    """Forward accounting: (eps, delta) spent by `k` Gaussian steps with std `sigma`.

    NC and AC treat each step as an (eps_step, delta_step)-DP Gaussian
    mechanism, with ``delta_step = delta/(k+1)`` (NC) or ``delta/(2k)`` plus a
    ``delta/2`` composition slack (AC). zCDP and RDP use the closed-form
    Gaussian curves; RDP converts with the tight bound.
    """
    variant = Variant(variant)
    k = _check_k(k)
    delta = _check_open_delta(delta)
    MechanismSpec(sensitivity, sigma, k)
    eps = _forward_epsilon(variant, sigma, k, delta, sensitivity, orders)
    if not math.isfinite(eps):
        raise AccountingError(f"sigma={sigma:g} is too small to account for")
    return PrivacyBudget(eps, delta)


def step_budget(variant: Variant | str, sigma: float, k: int, delta: float, sensitivity: float = 1.0) -> float:
    """Per-step quantity reported alongside a calibrated sigma: eps_step for
    NC/AC, rho_step for zCDP/RDP."""
    variant = Variant(variant)
    if variant is Variant.NC:
        d_step = _nc_delta_step(delta, k)
    elif variant is Variant.AC:
        d_step = _ac_delta_step(delta, k)
    else:
        return sensitivity**2 / (2.0 * sigma**2)
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / d_step)) / sigma


def calibrate_sigma(
    variant: Variant | str,
    target: PrivacyBudget,
    k: int,
    sensitivity: float = 1.0,
    orders: Sequence[float] = DEFAULT_RDP_ORDERS,
    rtol: float = 1e-6,
) -> float:
    """Smallest Gaussian std whose forward accounting stays within `target`.

    Bisects on log(sigma) over ``[1e-6, 1e12] * sensitivity``. The returned
    sigma satisfies ``target.epsilon*(1 - rtol) <= eps_achieved <= target.epsilon``.
    """
    variant = Variant(variant)
    k = _check_k(k)
    if not target.epsilon > 0:
        raise CalibrationError("target epsilon must be positive")
    delta = _check_open_delta(target.delta)
    goal = target.epsilon

    def eps_at(sigma: float) -> float:
        return _forward_epsilon(variant, sigma, k, delta, sensitivity, orders)

    lo, hi = 1e-6 * sensitivity, 1e12 * sensitivity
    if eps_at(hi) > goal:
        raise CalibrationError(
            f"{variant.value}: no sigma in [{lo:g}, {hi:g}] reaches eps={goal:g} (k={k})"
        )
    if eps_at(lo) <= goal:
        return lo
    # eps is continuous and strictly decreasing in sigma
    for _ in range(400):
        mid = math.sqrt(lo * hi)
        if eps_at(mid) <= goal:
            hi = mid
        else:
            lo = mid
        if eps_at(hi) >= goal * (1.0 - rtol):
            return hi
    raise CalibrationError(f"{variant.value}: bisection did not converge for eps={goal:g}")


def advantage_bound(eps: float | np.ndarray) -> float | np.ndarray:
    """Upper bound ``e^eps - 1`` on membership advantage under eps-DP (unclamped).

    Overflows to ``inf`` beyond eps ~ 709.78.
    """
    if np.any(np.asarray(eps) < 0):
        raise AccountingError("eps must be >= 0")
    with np.errstate(over="ignore"):
        out = np.expm1(eps)
    return float(out) if np.ndim(out) == 0 else out
