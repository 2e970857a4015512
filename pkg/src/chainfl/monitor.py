"""Server-side screening of client submissions before aggregation.

Checks run per submission in a fixed order and the first failure decides the
outcome: blacklist, identity, replay, duplicate (lazy) hash, falsified hash,
then accuracy against the batch threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

from .errors import InvalidInputError, VerificationPendingError
from .fl_core import Dataset, ModelParameters, evaluate
from .ledger import Chain, ModelRecord, hash_model, latest_record_for, verify_identity


class Reason(str, Enum):
    OK = "ok"
    LAZY_DUPLICATE = "lazy_duplicate"
    HASH_MISMATCH = "hash_mismatch"
    LOW_ACCURACY = "low_accuracy"
    REPLAY = "replay"
    UNAUTHORIZED = "unauthorized"
    BLACKLISTED = "blacklisted"


# reasons that put the submitting client on the blacklist
BLACKLISTING = frozenset({Reason.UNAUTHORIZED, Reason.REPLAY, Reason.LAZY_DUPLICATE})


@dataclass(frozen=True)
class Submission:
    client_address: str
    params: ModelParameters
    record: ModelRecord
    arrival_timestamp: int = 0

    def __post_init__(self):
        if self.record.client_address != self.client_address:
            raise InvalidInputError("record address does not match submission address")


@dataclass(frozen=True)
class ScreeningResult:
    client_address: str
    alpha: int = 0
    beta: int = 0
    measured_accuracy: float = 0.0
    reason: Reason = Reason.OK

    @property
    def included(self) -> bool:
        return self.alpha == 0 and self.beta == 0 and self.reason is Reason.OK

    def to_json(self) -> dict:
        return {
            "client_address": self.client_address,
            "alpha": self.alpha,
            "beta": self.beta,
            "measured_accuracy": self.measured_accuracy,
            "included": self.included,
            "reason": self.reason.value,
        }


@dataclass
class Blacklist:
    """Grow-only set of addresses, remembering the round each was added."""

    added: dict[str, int] = field(default_factory=dict)

    def __contains__(self, address: str) -> bool:
        return address in self.added

    def __len__(self):
        return len(self.added)

    def __iter__(self):
        return iter(self.added)

    def add(self, address: str, round: int) -> None:
        self.added.setdefault(address, round)

    def to_json(self) -> dict:
        return dict(sorted(self.added.items()))


def _latest(chain, address: str, before_round: Optional[int]) -> Optional[ModelRecord]:
    if isinstance(chain, Chain):
        return chain.latest_record_for(address, before_round)
    return latest_record_for(chain, address, before_round)


def detect_lazy(sub: Submission, chain, before_round: Optional[int] = None) -> int:
    """1 iff the submitted parameters hash to the client's latest on-chain model hash."""
    prior = _latest(chain, sub.client_address, before_round)
    if prior is None:
        return 0
    return int(hash_model(sub.params) == prior.model_hash)


def _committed_record(sub: Submission, chain) -> Optional[ModelRecord]:
    rec = sub.record
    if isinstance(chain, Chain):
        return chain.find_record(rec.client_address, rec.round, rec.sequence_number)
    for block in chain:
        for r in block.records:
            if (r.client_address, r.round, r.sequence_number) == (rec.client_address, rec.round, rec.sequence_number):
                return r
    return None


def detect_falsification(sub: Submission, chain) -> int:
    """0 iff the recomputed model hash equals the hash committed on chain for this round."""
    committed = _committed_record(sub, chain)
    if committed is None:
        raise VerificationPendingError(
            f"no on-chain record for {sub.client_address} round {sub.record.round}"
        )
    return int(hash_model(sub.params) != committed.model_hash)


def accuracy_threshold(accuracies: Sequence[float], slack: float = 1.0) -> float:
    if len(accuracies) == 0:
        raise InvalidInputError("need at least one accuracy to form a threshold")
    return slack * (sum(accuracies) / len(accuracies))


def check_replay(sub: Submission, chain, before_round: Optional[int] = None) -> bool:
    prior = _latest(chain, sub.client_address, before_round)
    if prior is None:
        return False
    return sub.record.sequence_number <= prior.sequence_number or sub.record.timestamp <= prior.timestamp


def precheck(
    sub: Submission,
    chain,
    auth: Mapping[str, bytes],
    blacklist: Blacklist,
    before_round: Optional[int] = None,
) -> Optional[ScreeningResult]:
    """Checks that run before a record may be mined; ``None`` means it may."""
    if sub.client_address in blacklist:
        return ScreeningResult(sub.client_address, reason=Reason.BLACKLISTED)
    if not verify_identity(sub.record, auth):
        return ScreeningResult(sub.client_address, reason=Reason.UNAUTHORIZED)
    if check_replay(sub, chain, before_round):
        return ScreeningResult(sub.client_address, reason=Reason.REPLAY)
    if detect_lazy(sub, chain, before_round):
        return ScreeningResult(sub.client_address, beta=1, reason=Reason.LAZY_DUPLICATE)
    return None


def screen(
    subs: Sequence[Submission],
    chain,
    test_set: Dataset,
    blacklist: Blacklist,
    auth: Mapping[str, bytes],
    round_index: Optional[int] = None,
    slack: float = 1.0,
) -> list[ScreeningResult]:
    """Screen a batch; results are returned in input order.

    ``round_index`` is the round being aggregated. History checks (replay and
    duplicate hash) then look only at records from earlier rounds, so this
    round's freshly mined records do not shadow the client's previous upload.
    Every submission is evaluated on ``test_set`` so the measured accuracy is
    reported even for rejected ones; the accuracy threshold is the mean over
    submissions that cleared all hash checks.
    """
    if test_set.size == 0:
        raise InvalidInputError("test set is empty")
    accuracies = [evaluate(s.params, test_set) for s in subs]
    pending: list[Optional[ScreeningResult]] = []
    for sub, acc in zip(subs, accuracies):
        early = precheck(sub, chain, auth, blacklist, round_index)
        if early is None and detect_falsification(sub, chain):
            early = ScreeningResult(sub.client_address, alpha=1, reason=Reason.HASH_MISMATCH)
        if early is not None:
            early = ScreeningResult(early.client_address, early.alpha, early.beta, acc, early.reason)
        pending.append(early)

    survivors = [acc for res, acc in zip(pending, accuracies) if res is None]
    threshold = accuracy_threshold(survivors, slack) if survivors else 0.0
    results = []
    for sub, res, acc in zip(subs, pending, accuracies):
        if res is None:
            reason = Reason.LOW_ACCURACY if acc < threshold else Reason.OK
            res = ScreeningResult(sub.client_address, measured_accuracy=acc, reason=reason)
        results.append(res)
    return results


def apply_blacklist(results: Iterable[ScreeningResult], blacklist: Blacklist, round: int) -> list[str]:
    """Add clients whose result calls for blacklisting; returns newly added addresses."""
    added = []
    for res in results:
        if res.reason in BLACKLISTING and res.client_address not in blacklist:
            blacklist.add(res.client_address, round)
            added.append(res.client_address)
    return added
