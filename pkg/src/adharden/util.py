"""Small shared helpers: confidence intervals and evaluation records."""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class EvalResult:
    """Empirical success rate with a binomial 95% confidence interval."""

    mean: float
    ci_low: float
    ci_high: float
    episodes: int

    def __str__(self) -> str:
        return f"{self.mean:.4f} [{self.ci_low:.4f}, {self.ci_high:.4f}] ({self.episodes} eps)"


def binomial_ci(successes: float, n: int, z: float = 1.96) -> EvalResult:
    """Normal-approximation CI for a Bernoulli mean estimated from n trials."""
    if n <= 0:
        raise ValueError("need at least one trial")
    p = successes / n
    half = z * math.sqrt(max(p * (1.0 - p), 0.0) / n)
    return EvalResult(p, max(0.0, p - half), min(1.0, p + half), n)
