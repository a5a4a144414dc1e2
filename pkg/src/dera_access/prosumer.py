"""Household economics under a net-metering (NEM X) tariff.

Energy is in kWh and money in $ throughout this module.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class UtilityFn:
    """Capped quadratic utility ``U(x) = a x - b x^2 / 2`` up to the knee ``a / b``."""

    a_hat: float
    b_hat: float

    def __post_init__(self) -> None:
        if self.a_hat <= 0 or self.b_hat <= 0:
            raise ValueError("a_hat and b_hat must be positive")

    @property
    def knee(self) -> float:
        return self.a_hat / self.b_hat

    def __call__(self, x: float) -> float:
        if x < 0:
            raise ValueError(f"consumption must be nonnegative, got {x}")
        x = min(x, self.knee)
        return self.a_hat * x - 0.5 * self.b_hat * x * x


@dataclass(frozen=True)
class NemTariff:
    pi_plus: float
    pi_minus: float
    pi_zero: float = 0.0

    def __post_init__(self) -> None:
        if self.pi_plus < 0 or self.pi_minus < 0:
            raise ValueError("negative retail or sell rates are not supported")
        if self.pi_plus < self.pi_minus:
            raise ValueError("retail rate must not be below the sell rate")


@dataclass(frozen=True)
class ProsumerParams:
    d_min: float
    d_max: float
    r: float

    def __post_init__(self) -> None:
        if not 0 <= self.d_min <= self.d_max:
            raise ValueError(f"need 0 <= d_min <= d_max, got [{self.d_min}, {self.d_max}]")
        if self.r < 0:
            raise ValueError("renewable output must be nonnegative")


def marginal_utility(u: UtilityFn, x: float) -> float:
    if x < 0:
        raise ValueError(f"consumption must be nonnegative, got {x}")
    return max(u.a_hat - u.b_hat * x, 0.0)


def inverse_marginal(u: UtilityFn, y: float) -> float:
    """Smallest consumption at which marginal utility drops to ``y``.

    At ``y = 0`` this is the knee; above the intercept it clamps to 0.
    """
    if y < 0:
        raise ValueError(f"negative prices are not supported, got {y}")
    if y >= u.a_hat:
        return 0.0
    return (u.a_hat - y) / u.b_hat


def nem_consumption(u: UtilityFn, t: NemTariff, p: ProsumerParams) -> float:
    return min(p.d_max, max(inverse_marginal(u, t.pi_plus), p.d_min))


def nem_surplus(u: UtilityFn, t: NemTariff, p: ProsumerParams) -> float:
    """Optimal surplus of a net-metered household; net exports are paid at ``pi_minus``."""
    d = nem_consumption(u, t, p)
    rate = t.pi_minus if p.r >= d else t.pi_plus
    return u(d) - rate * (d - p.r) - t.pi_zero
