"""Client behaviour profiles: honest training plus the attack models the
monitor is meant to catch (lazy re-submission, post-commit tampering, forged
identities and replayed uploads)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .fl_core import Dataset, ModelParameters, TrainConfig, evaluate, local_train
from .ledger import KeyPair, ModelRecord, make_record
from .monitor import Submission


class Kind(str, Enum):
    HONEST = "honest"
    LAZY = "lazy"
    FALSIFIER = "falsifier"
    SYBIL = "sybil"
    REPLAYER = "replayer"


@dataclass(frozen=True)
class BehaviorProfile:
    kind: Kind = Kind.HONEST
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "params", dict(self.params))

    @property
    def malicious(self) -> bool:
        return self.kind is not Kind.HONEST

    @property
    def freeze_after(self) -> int:
        """Lazy clients train honestly for this many submissions, then freeze."""
        return int(self.params.get("freeze_after", 1))

    @property
    def noise(self) -> float:
        return float(self.params.get("noise", 0.5))

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "params": dict(sorted(self.params.items()))}


HONEST = BehaviorProfile()


@dataclass
class ClientState:
    index: int
    key: KeyPair
    dataset: Dataset
    profile: BehaviorProfile = HONEST
    sequence: int = 0
    submissions: int = 0
    frozen: Optional[tuple[ModelParameters, float]] = None
    last_mined: Optional[tuple[ModelRecord, ModelParameters]] = None
    trained_last: bool = False

    @property
    def address(self) -> str:
        return self.key.address

    @property
    def data_size(self) -> int:
        return self.dataset.size

    def next_sequence(self) -> int:
        self.sequence += 1
        return self.sequence


def _train(state: ClientState, global_model: ModelParameters, train: TrainConfig) -> tuple[ModelParameters, float]:
    params = local_train(global_model, state.dataset, train)
    return params, evaluate(params, state.dataset)


def produce_submission(
    profile: BehaviorProfile,
    client_state: ClientState,
    global_model: ModelParameters,
    chain,
    rng: np.random.Generator,
    *,
    round: int,
    timestamp: int,
    train: TrainConfig,
) -> Submission:
    """Build what client ``client_state`` sends to the server this round.

    ``chain`` is the client's synchronised view of the ledger; none of the
    implemented profiles read it beyond what the client remembers itself.
    ``client_state`` is updated in place (sequence counter, frozen model,
    ``trained_last``).
    """
    del chain  # profiles act on local memory; kept for interface symmetry
    state = client_state
    kind = profile.kind
    state.trained_last = True

    if kind is Kind.REPLAYER and state.last_mined is not None:
        record, params = state.last_mined
        state.trained_last = False
        state.submissions += 1
        return Submission(record.client_address, params, record, timestamp)

    if kind is Kind.LAZY and state.frozen is not None and state.submissions >= profile.freeze_after:
        params, acc = state.frozen
        state.trained_last = False
    else:
        params, acc = _train(state, global_model, train)
        if kind is Kind.LAZY:
            state.frozen = (params, acc)

    if kind is Kind.SYBIL:
        fake = KeyPair.from_seed(rng.bytes(32))
        record = make_record(fake, round, params, acc, state.data_size, timestamp, state.next_sequence())
        state.submissions += 1
        return Submission(record.client_address, params, record, timestamp)

    record = make_record(state.key, round, params, acc, state.data_size, timestamp, state.next_sequence())
    if kind is Kind.FALSIFIER:
        if profile.noise <= 0:
            raise InvalidInputError("falsifier noise must be positive")
        tampered = params.values + profile.noise * rng.standard_normal(params.values.size)
        params = ModelParameters(tampered, params.arch)
    state.submissions += 1
    return Submission(state.address, params, record, timestamp)


def assign_profiles(
    k: int,
    malicious_rate: float,
    mix: Mapping[str, float],
    rng: np.random.Generator,
    params: Optional[Mapping[str, Mapping[str, Any]]] = None,
) -> list[BehaviorProfile]:
    """Sample which clients misbehave and split them across ``mix`` kinds.

    ``round(malicious_rate * k)`` clients are malicious; kind counts follow the
    mix weights by largest remainder, ties broken by kind order in ``mix``.
    """
    if not 0.0 <= malicious_rate < 1.0:
        raise InvalidInputError("malicious_rate must lie in [0, 1)")
    n_bad = int(round(malicious_rate * k))
    params = params or {}
    kinds = [Kind(name) for name in mix]
    if n_bad and (not kinds or Kind.HONEST in kinds):
        raise InvalidInputError("behaviour mix must list only malicious kinds")
    weights = np.array([float(mix[name]) for name in mix])
    if n_bad and (weights.min() < 0 or weights.sum() <= 0):
        raise InvalidInputError("behaviour mix weights must be non-negative with a positive sum")

    counts: list[int] = []
    if n_bad:
        raw = weights / weights.sum() * n_bad
        counts = [int(math.floor(x)) for x in raw]
        order = sorted(range(len(kinds)), key=lambda i: (-(raw[i] - counts[i]), i))
        for i in order[: n_bad - sum(counts)]:
            counts[i] += 1

    bad = rng.choice(k, size=n_bad, replace=False) if n_bad else np.array([], dtype=int)
    profiles = [HONEST] * k
    pos = 0
    for kind, c in zip(kinds, counts):
        for idx in bad[pos:pos + c]:
            profiles[int(idx)] = BehaviorProfile(kind, params.get(kind.value, {}))
        pos += c
    return profiles


def explicit_profiles(k: int, assignment: Mapping[int, Any]) -> list[BehaviorProfile]:
    """Profiles from ``{client_index: kind or {"kind":..., "params":...}}``."""
    profiles = [HONEST] * k
    for idx, spec in assignment.items():
        idx = int(idx)
        if not 0 <= idx < k:
            raise InvalidInputError(f"client index {idx} out of range")
        if isinstance(spec, Mapping):
            profiles[idx] = BehaviorProfile(spec["kind"], spec.get("params", {}))
        else:
            profiles[idx] = BehaviorProfile(spec)
    return profiles


def malicious_fraction(profiles: Sequence[BehaviorProfile]) -> float:
    return sum(p.malicious for p in profiles) / len(profiles)
