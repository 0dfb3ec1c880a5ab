"""Log-linear noise schedule and time-sampling utilities.

The keep-probability is alpha(t) = alpha0 * (1 - t): alpha(0) = alpha0,
alpha(1) = 0, strictly decreasing for alpha0 > 0. Other strictly
decreasing schedules can subclass NoiseSchedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PreconditionError, SingularityError

# Smallest time used when drawing t for the weighted masked-prediction
# loss; keeps the alpha0=1 weight -1/t finite.
TIME_FLOOR = 1e-6


class NoiseSchedule:
    """Interface: strictly decreasing keep-probability on [0, 1]."""

    alpha0: float

    def alpha(self, t: float) -> float:
        raise NotImplementedError

    def alpha_prime(self, t: float) -> float:
        raise NotImplementedError

    def diffusion_weight(self, t: float, variance_reduced: bool = False) -> float:
        """Coefficient alpha'(t) / (1 - alpha(t)) of the masked-prediction loss.

        Always <= 0 where defined. With variance_reduced (valid only for
        alpha0 == 1) the coefficient is the constant -1, which sidesteps
        the t -> 0 singularity of the alpha0 = 1 weight.
        """
        if variance_reduced:
            if self.alpha0 != 1.0:
                raise ConfigError(
                    f"variance-reduced weight requires alpha0 == 1, got {self.alpha0}"
                )
            return -1.0
        _check_time(t)
        denom = 1.0 - self.alpha(t)
        if denom == 0.0:
            raise SingularityError(
                f"diffusion weight singular at t={t} with alpha0={self.alpha0}"
            )
        return self.alpha_prime(t) / denom


@dataclass(frozen=True)
class LogLinearSchedule(NoiseSchedule):
    alpha0: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha0 <= 1.0:
            raise ConfigError(f"alpha0 must lie in [0, 1], got {self.alpha0}")

    def alpha(self, t: float) -> float:
        _check_time(t)
        return self.alpha0 * (1.0 - t)

    def alpha_prime(self, t: float) -> float:
        _check_time(t)
        return -self.alpha0


def _check_time(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise PreconditionError(f"t must lie in [0, 1], got {t}")


def low_discrepancy_times(
    n: int, rng: np.random.Generator, floor: float = TIME_FLOOR
) -> np.ndarray:
    """Stratified times t_i ~ U[(i-1)/n, i/n], one per stratum, ascending.

    Clamped below at `floor` so downstream weights stay finite.
    """
    if n < 1:
        raise PreconditionError(f"need at least one stratum, got n={n}")
    t = (np.arange(n, dtype=np.float64) + rng.uniform(size=n)) / n
    return np.maximum(t, floor)
