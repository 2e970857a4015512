import numpy as np
import pytest

from chainfl.adversary import (
    HONEST,
    BehaviorProfile,
    ClientState,
    Kind,
    assign_profiles,
    explicit_profiles,
    malicious_fraction,
    produce_submission,
)
from chainfl.errors import InvalidInputError
from chainfl.fl_core import TrainConfig, init_model
from chainfl.ledger import Chain, hash_model, verify_identity
from chainfl.monitor import Blacklist, Reason, check_replay, detect_falsification, detect_lazy, screen

TRAIN = TrainConfig(0.05, 1, 16, 0)


@pytest.fixture
def setup(keys, auth, arch, blob_data):
    chain = Chain(auth, difficulty=2)
    global_model = init_model(arch, 0)

    def client(profile, i=0):
        return ClientState(i, keys[i], blob_data.subset(np.arange(i * 60, i * 60 + 60)), profile)

    return chain, global_model, client


def _submit(profile, state, model, chain, rnd, seed=0):
    return produce_submission(
        profile, state, model, chain, np.random.default_rng(seed),
        round=rnd, timestamp=1000 * rnd, train=TrainConfig(0.05, 1, 16, rnd),
    )


def test_honest_submission_passes(setup, auth, blob_data):
    chain, model, client = setup
    state = client(HONEST)
    sub = _submit(HONEST, state, model, chain, 1)
    assert sub.client_address == state.address
    assert sub.record.model_hash == hash_model(sub.params)
    assert sub.params != model
    chain.mine_and_append([sub.record], "m", 1)
    res = screen([sub], chain, blob_data, Blacklist(), auth, round_index=1)[0]
    assert (res.alpha, res.beta, res.included) == (0, 0, True)


def test_lazy_freezes_after_first_submission(setup):
    chain, model, client = setup
    lazy = BehaviorProfile(Kind.LAZY)
    state = client(lazy)
    subs = []
    for rnd in (1, 2, 3):
        subs.append(_submit(lazy, state, model, chain, rnd))
        model = init_model(model.arch, rnd)  # the global model moves on
    digests = [hash_model(s.params) for s in subs]
    assert digests[1] == digests[2] == digests[0]
    assert [s.record.sequence_number for s in subs] == [1, 2, 3]
    assert state.trained_last is False


def test_lazy_freeze_after_parameter(setup):
    chain, model, client = setup
    lazy = BehaviorProfile(Kind.LAZY, {"freeze_after": 2})
    state = client(lazy)
    d = []
    for rnd in (1, 2, 3):
        d.append(hash_model(_submit(lazy, state, model, chain, rnd).params))
        model = init_model(model.arch, 10 + rnd)
    assert d[0] != d[1] and d[1] == d[2]


def test_lazy_flagged_by_second_submission(setup):
    chain, model, client = setup
    lazy = BehaviorProfile(Kind.LAZY)
    state = client(lazy)
    first = _submit(lazy, state, model, chain, 1)
    assert detect_lazy(first, chain) == 0
    chain.mine_and_append([first.record], "m", 1)
    second = _submit(lazy, state, init_model(model.arch, 5), chain, 2)
    assert detect_lazy(second, chain) == 1


def test_falsifier_signs_truth_then_tampers(setup, auth):
    chain, model, client = setup
    prof = BehaviorProfile(Kind.FALSIFIER, {"noise": 0.1})
    sub = _submit(prof, client(prof), model, chain, 1)
    assert verify_identity(sub.record, auth)
    chain.mine_and_append([sub.record], "m", 1)
    assert detect_falsification(sub, chain) == 1


def test_falsifier_needs_positive_noise(setup):
    chain, model, client = setup
    prof = BehaviorProfile(Kind.FALSIFIER, {"noise": 0})
    with pytest.raises(InvalidInputError):
        _submit(prof, client(prof), model, chain, 1)


def test_sybil_uses_unregistered_identity(setup, auth):
    chain, model, client = setup
    prof = BehaviorProfile(Kind.SYBIL)
    state = client(prof)
    sub = _submit(prof, state, model, chain, 1)
    assert sub.client_address != state.address
    assert sub.client_address not in auth
    assert not verify_identity(sub.record, auth)


def test_replayer_resends_last_mined(setup):
    chain, model, client = setup
    prof = BehaviorProfile(Kind.REPLAYER)
    state = client(prof)
    first = _submit(prof, state, model, chain, 1)
    chain.mine_and_append([first.record], "m", 1)
    state.last_mined = (first.record, first.params)
    again = _submit(prof, state, model, chain, 2)
    assert again.record == first.record and again.params == first.params
    assert check_replay(again, chain)


def test_assign_profiles_counts_and_mix():
    rng = np.random.default_rng(0)
    profiles = assign_profiles(30, 0.3, {"lazy": 1.0}, rng)
    assert sum(p.kind is Kind.LAZY for p in profiles) == 9
    assert malicious_fraction(profiles) == pytest.approx(0.3)

    mixed = assign_profiles(10, 0.5, {"sybil": 1, "replayer": 1, "falsifier": 1}, np.random.default_rng(1))
    counts = {k: sum(p.kind is k for p in mixed) for k in Kind}
    assert counts[Kind.HONEST] == 5
    assert (counts[Kind.SYBIL], counts[Kind.REPLAYER], counts[Kind.FALSIFIER]) == (2, 2, 1)

    assert all(p is HONEST for p in assign_profiles(10, 0.0, {"lazy": 1}, rng))


@pytest.mark.parametrize("rate, mix", [(1.0, {"lazy": 1}), (0.5, {"honest": 1}), (0.5, {}), (0.5, {"lazy": 0})])
def test_assign_profiles_rejects(rate, mix):
    with pytest.raises(InvalidInputError):
        assign_profiles(10, rate, mix, np.random.default_rng(0))


def test_explicit_profiles():
    profiles = explicit_profiles(5, {3: "lazy", "1": {"kind": "falsifier", "params": {"noise": 2.0}}})
    assert profiles[3].kind is Kind.LAZY
    assert profiles[1].noise == 2.0
    assert malicious_fraction(profiles) == 0.4
    with pytest.raises(InvalidInputError):
        explicit_profiles(5, {5: "lazy"})


def test_attack_reasons_end_to_end(setup, keys, auth, blob_data):
    """One round-2 batch mixing every behaviour lands on the expected reasons."""
    chain, model, client = setup
    kinds = [Kind.HONEST, Kind.LAZY, Kind.FALSIFIER, Kind.REPLAYER]
    states = [client(BehaviorProfile(k), i) for i, k in enumerate(kinds)]
    r1 = [_submit(s.profile, s, model, chain, 1) for s in states]
    # round 1: everyone honest-looking except the falsifier's tamper
    chain.mine_and_append([s.record for s in r1], "m", 1)
    for s, sub in zip(states, r1):
        s.last_mined = (sub.record, sub.params)

    model2 = init_model(model.arch, 77)
    r2 = [_submit(s.profile, s, model2, chain, 2) for s in states]
    fresh = [sub.record for sub, s in zip(r2, states) if s.profile.kind in (Kind.HONEST, Kind.FALSIFIER)]
    chain.mine_and_append(fresh, "m", 2)
    results = screen(r2, chain, blob_data, Blacklist(), auth, round_index=2, slack=0.5)
    assert [r.reason for r in results] == [Reason.OK, Reason.LAZY_DUPLICATE, Reason.HASH_MISMATCH, Reason.REPLAY]
