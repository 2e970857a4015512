"""Reputation bookkeeping and reputation-weighted client selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Container, Mapping, Sequence

import numpy as np

from .errors import InsufficientClientsError, InvalidInputError, NoEligibleClientsError


@dataclass(frozen=True)
class ReputationConfig:
    r_basic: float = 0.1
    r_quality: float = 0.5
    r_quantity: float = 0.5
    initial_reputation: float = 1.0
    # False: reward R_quantity * quality factor + R_quality * quantity factor, as written
    swap_factor_pairing: bool = False

    def __post_init__(self):
        for name in ("r_basic", "r_quality", "r_quantity"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be non-negative")
        if not self.initial_reputation > 0:
            raise InvalidInputError("initial_reputation must be positive")


def _unit_factor(value: float, lo: float, hi: float, what: str) -> float:
    if not lo <= value <= hi:
        raise InvalidInputError(f"{what} {value} outside [{lo}, {hi}]")
    if hi == lo:
        return 1.0
    return (value - lo) / (hi - lo)


def quality_factor(theta: float, theta_min: float, theta_max: float) -> float:
    """Min-max scaled test accuracy; 1.0 when all accuracies coincide."""
    return _unit_factor(theta, theta_min, theta_max, "accuracy")


def quantity_factor(size: float, size_min: float, size_max: float) -> float:
    """Min-max scaled data size; 1.0 when all sizes coincide."""
    return _unit_factor(size, size_min, size_max, "data size")


def update_reputation(
    r_prev: float,
    alpha: int,
    beta: int,
    quality: float,
    quantity_prev: float,
    cfg: ReputationConfig,
) -> float:
    """One round of reward or punishment.

    ``(1 - beta) * (1 - alpha / 2) * (r_prev + r_basic + r_quantity * quality
    + r_quality * quantity_prev)``; with ``cfg.swap_factor_pairing`` each
    factor is paired with its like-named reward instead.
    """
    if cfg.swap_factor_pairing:
        reward = cfg.r_quality * quality + cfg.r_quantity * quantity_prev
    else:
        reward = cfg.r_quantity * quality + cfg.r_quality * quantity_prev
    return (1 - beta) * (1 - alpha / 2) * (r_prev + cfg.r_basic + reward)


@dataclass
class ReputationLedger:
    values: dict[str, float] = field(default_factory=dict)
    round: int = 0

    @classmethod
    def uniform(cls, addresses: Sequence[str], cfg: ReputationConfig) -> "ReputationLedger":
        return cls({a: cfg.initial_reputation for a in addresses}, 0)

    def __getitem__(self, address: str) -> float:
        return self.values[address]

    def __setitem__(self, address: str, value: float) -> None:
        if value < 0:
            raise InvalidInputError("reputation cannot be negative")
        self.values[address] = float(value)

    def snapshot(self) -> dict[str, float]:
        return dict(self.values)


def selection_probabilities(ledger: ReputationLedger | Mapping[str, float], blacklist: Container[str] = ()) -> dict[str, float]:
    """Reputations normalised over non-blacklisted clients; blacklisted get 0."""
    values = ledger.values if isinstance(ledger, ReputationLedger) else dict(ledger)
    eligible = {a: r for a, r in values.items() if a not in blacklist}
    total = sum(eligible.values())
    if not eligible or total <= 0:
        raise NoEligibleClientsError("no non-blacklisted client has positive reputation")
    return {a: (eligible[a] / total if a in eligible else 0.0) for a in values}


def select_clients(probs: Mapping[str, float], count: int, rng: np.random.Generator) -> list[str]:
    """Weighted sampling without replacement by sequential renormalised draws.

    Returned in draw order. Zero-probability clients are never drawn.
    """
    pool = [(a, p) for a, p in probs.items() if p > 0]
    if count > len(pool):
        raise InsufficientClientsError(f"asked for {count} clients but only {len(pool)} are eligible")
    if count < 0:
        raise InvalidInputError("count must be non-negative")
    chosen = []
    addresses = [a for a, _ in pool]
    weights = np.array([p for _, p in pool], dtype=np.float64)
    for _ in range(count):
        cdf = np.cumsum(weights)
        u = rng.random() * cdf[-1]
        i = int(np.searchsorted(cdf, u, side="right"))
        i = min(i, len(weights) - 1)
        while weights[i] == 0:  # guard against landing on a spent slot at the cdf edge
            i -= 1
        chosen.append(addresses[i])
        weights[i] = 0.0
    return chosen
