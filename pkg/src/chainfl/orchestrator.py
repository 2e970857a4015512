"""Round loop: select, train, commit, screen, aggregate, publish, reward.

``mode="bfmeta"`` runs the full protected pipeline. ``mode="fedavg"`` is the
baseline: uniform selection, no ledger, no screening, no reputation, and every
selected submission is averaged with weight n_k / n.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .adversary import ClientState, Kind, assign_profiles, explicit_profiles, produce_submission
from .config import ExperimentConfig
from .datasets import BlobSpec, draw_client_sizes, load_csv, make_blobs, partition, pool_size_for
from .errors import EmptyAggregationError, InvalidInputError, NoEligibleClientsError
from .fl_core import (
    Activation,
    Dataset,
    MlpArchitecture,
    ModelParameters,
    TrainConfig,
    WeightedSubmission,
    aggregate,
    aggregation_weights,
    evaluate,
    init_model,
)
from .incentive import (
    ReputationLedger,
    quality_factor,
    quantity_factor,
    select_clients,
    selection_probabilities,
    update_reputation,
)
from .ledger import AuthorizationList, Chain, KeyPair, hash_model, make_record
from .monitor import BLACKLISTING, Blacklist, Reason, ScreeningResult, Submission, apply_blacklist, precheck, screen
from .netsim import EventKind, LatencyReport, RoundLatency, Simulator, broadcast_chain, deliver

log = logging.getLogger(__name__)

# reasons counted as raised flags in the per-round summary
FLAG_REASONS = frozenset(
    {Reason.LAZY_DUPLICATE, Reason.HASH_MISMATCH, Reason.REPLAY, Reason.UNAUTHORIZED, Reason.BLACKLISTED}
)


@dataclass
class RoundReport:
    round: int
    selected: list[str]
    screening: list[dict]
    global_accuracy: float
    aggregated: bool
    aggregation_weights: dict[str, float]
    selection_probabilities: dict[str, float]
    reputation: dict[str, float]
    newly_blacklisted: list[str]
    latency: RoundLatency
    blocks: list[dict]

    @property
    def n_flagged(self) -> int:
        return sum(1 for s in self.screening if Reason(s["reason"]) in FLAG_REASONS)

    @property
    def n_included(self) -> int:
        return sum(1 for s in self.screening if s["included"])

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "selected": list(self.selected),
            "screening": self.screening,
            "global_accuracy": self.global_accuracy,
            "aggregated": self.aggregated,
            "aggregation_weights": dict(sorted(self.aggregation_weights.items())),
            "selection_probabilities": dict(sorted(self.selection_probabilities.items())),
            "reputation": dict(sorted(self.reputation.items())),
            "newly_blacklisted": list(self.newly_blacklisted),
            "n_flagged": self.n_flagged,
            "n_included": self.n_included,
            "latency": self.latency.to_json(),
            "blocks": self.blocks,
        }


@dataclass
class ExperimentState:
    cfg: ExperimentConfig
    clients: list[ClientState]
    server_key: KeyPair
    auth: AuthorizationList
    chain: Chain
    holdout: Dataset
    global_model: ModelParameters
    reputation: ReputationLedger
    blacklist: Blacklist
    sim: Simulator
    rngs: dict[str, np.random.Generator]
    latency: LatencyReport = field(default_factory=LatencyReport)
    round: int = 0
    server_sequence: int = 0
    global_accuracy: float = 0.0
    prev_quantity: dict[str, float] = field(default_factory=dict)
    local_heads: dict[str, str] = field(default_factory=dict)
    reports: list[RoundReport] = field(default_factory=list)

    @property
    def bfmeta(self) -> bool:
        return self.cfg.mode == "bfmeta"

    def client_by_address(self) -> dict[str, ClientState]:
        return {c.address: c for c in self.clients}

    def copy(self) -> "ExperimentState":
        return copy.deepcopy(self)


_STREAMS = ("data", "init", "keys", "profiles", "selection", "latency", "adversary")


def _streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(_STREAMS, children)}


def _train_seed(seed: int, round: int, client: int) -> int:
    return int(np.random.SeedSequence([seed, round, client]).generate_state(1, np.uint64)[0])


def build_data(cfg: ExperimentConfig, rng: np.random.Generator):
    d = cfg.data
    k = cfg.experiment.total_clients
    sizes = draw_client_sizes(k, d.client_size_min, d.client_size_max, rng)
    if d.source == "csv":
        pool = load_csv(d.csv_path)
    else:
        spec = BlobSpec(d.n_classes, d.n_features, d.center_scale, d.noise)
        pool = make_blobs(pool_size_for(sizes, d.holdout_fraction), spec, rng)
    arch = cfg.model.layer_sizes
    if pool.features.shape[1] != arch[0]:
        raise InvalidInputError(f"data has {pool.features.shape[1]} features but model input is {arch[0]}")
    if int(pool.labels.max()) >= arch[-1]:
        raise InvalidInputError(f"data has label {int(pool.labels.max())} but model has {arch[-1]} outputs")
    return partition(pool, sizes, d.holdout_fraction, rng, d.label_skew)


def init_state(cfg: ExperimentConfig) -> ExperimentState:
    rngs = _streams(cfg.seed)
    k = cfg.experiment.total_clients
    parts = build_data(cfg, rngs["data"])
    arch = MlpArchitecture(cfg.model.layer_sizes, Activation(cfg.model.activation))
    global_model = init_model(arch, int(rngs["init"].integers(2**63)))

    keys = [KeyPair.from_seed(rngs["keys"].bytes(32)) for _ in range(k)]
    server_key = KeyPair.from_seed(rngs["keys"].bytes(32))
    auth = AuthorizationList.from_keys(keys + [server_key])

    adv = cfg.adversary
    if adv.explicit:
        profiles = explicit_profiles(k, adv.explicit)
    else:
        profiles = assign_profiles(k, adv.malicious_rate, adv.mix, rngs["profiles"], adv.params)
    clients = [ClientState(i, keys[i], parts.clients[i], profiles[i]) for i in range(k)]

    chain = Chain(auth, cfg.ledger.difficulty)
    state = ExperimentState(
        cfg=cfg,
        clients=clients,
        server_key=server_key,
        auth=auth,
        chain=chain,
        holdout=parts.holdout,
        global_model=global_model,
        reputation=ReputationLedger.uniform([c.address for c in clients], cfg.reputation),
        blacklist=Blacklist(),
        sim=Simulator(),
        rngs=rngs,
    )
    state.global_accuracy = evaluate(global_model, parts.holdout)
    state.local_heads = {c.address: chain.head.hash.hex() for c in clients}
    return state


def _will_train(client: ClientState) -> bool:
    p = client.profile
    if p.kind is Kind.LAZY:
        return client.frozen is None or client.submissions < p.freeze_after
    if p.kind is Kind.REPLAYER:
        return client.last_mined is None
    return True


def _select(state: ExperimentState) -> tuple[list[ClientState], dict[str, float]]:
    cfg = state.cfg
    k = len(state.clients)
    want = math.ceil(k * cfg.experiment.selection_rate)
    rng = state.rngs["selection"]
    if state.bfmeta:
        try:
            probs = selection_probabilities(state.reputation, state.blacklist)
        except NoEligibleClientsError:
            return [], {c.address: 0.0 for c in state.clients}
    else:
        probs = {c.address: 1.0 / k for c in state.clients}
    eligible = sum(1 for p in probs.values() if p > 0)
    chosen = set(select_clients(probs, min(want, eligible), rng))
    return [c for c in state.clients if c.address in chosen], probs


def run_round(state: ExperimentState) -> RoundReport:
    """Advance ``state`` by one round in place and return its report."""
    cfg = state.cfg
    lat = cfg.latency
    lat_rng = state.rngs["latency"]
    sim = state.sim
    t = state.round + 1
    selected, probs = _select(state)

    # local training and upload
    round_start = sim.now
    train_cfg = cfg.training
    subs: list[Submission] = []
    train_draws, upload_draws = [], []
    for client in selected:
        train_time = lat.t_fl.sample(lat_rng) if _will_train(client) else 0
        upload = lat.t_c_to_s.sample(lat_rng)
        tc = TrainConfig(train_cfg.learning_rate, train_cfg.epochs, train_cfg.batch_size, _train_seed(cfg.seed, t, client.index))
        sub = produce_submission(
            client.profile, client, state.global_model, state.chain, state.rngs["adversary"],
            round=t, timestamp=round_start + train_time, train=tc,
        )
        arrival = round_start + train_time + upload
        sub = dataclasses.replace(sub, arrival_timestamp=arrival)
        sim.schedule_at(arrival, EventKind.SUBMIT, client.index)
        subs.append(sub)
        train_draws.append(train_time)
        upload_draws.append(upload)
    sim.run_until_idle()

    blocks = []
    t_bg = t_bv = t_bs = 0
    newly: list[str] = []
    if state.bfmeta:
        t_bg, t_bv = lat.t_bg.sample(lat_rng), lat.t_bv.sample(lat_rng)
        # Verify: only records passing identity/replay/duplicate checks reach the miner
        cleared = [precheck(s, state.chain, state.auth, state.blacklist, t) is None for s in subs]
        passing = [s.record for s, ok in zip(subs, cleared) if ok]
        sim.schedule(t_bg, EventKind.MINE, t)
        sim.run_until_idle()
        block = state.chain.mine_and_append(passing, _miner(cfg, t), sim.now)
        blocks.append(_block_summary(block, "submissions"))
        sim.schedule(t_bv, EventKind.VERIFY, t)
        sim.run_until_idle()
        results = screen(subs, state.chain, state.holdout, state.blacklist, state.auth, t, cfg.monitor.accuracy_slack)
    else:
        results = [ScreeningResult(s.client_address, measured_accuracy=evaluate(s.params, state.holdout)) for s in subs]

    sim.schedule(0, EventKind.AGGREGATE, t)
    sim.run_until_idle()
    weighted = [
        WeightedSubmission(s.params, s.record.data_size, r.alpha, r.beta)
        for s, r in zip(subs, results)
        if r.included
    ]
    weights: dict[str, float] = {}
    aggregated = False
    try:
        new_model = aggregate(weighted)
        ws = aggregation_weights(weighted)
        included_clients = [c for c, r in zip(selected, results) if r.included]
        weights = {c.address: w for c, w in zip(included_clients, ws)}
        state.global_model = new_model
        aggregated = True
    except EmptyAggregationError:
        log.info("round %d: no submission passed screening; global model unchanged", t)
    state.global_accuracy = evaluate(state.global_model, state.holdout)

    if state.bfmeta:
        if aggregated:
            state.server_sequence += 1
            rec = make_record(
                state.server_key, t, state.global_model, state.global_accuracy,
                sum(w.size for w in weighted), sim.now, state.server_sequence,
            )
            block = state.chain.mine_and_append([rec], _miner(cfg, t), sim.now)
            blocks.append(_block_summary(block, "global_model"))
        newly = apply_blacklist(results, state.blacklist, t)
        for client, res in zip(selected, results):
            # a forged identity is pinned on the participant that sent it
            if res.reason in BLACKLISTING and client.address not in state.blacklist:
                state.blacklist.add(client.address, t)
                newly.append(client.address)
        for client, sub, ok in zip(selected, subs, cleared):
            if ok:
                client.last_mined = (sub.record, sub.params)
        head = state.chain.head.hash.hex()
        syncs = broadcast_chain(sim, head, [c.address for c in state.clients], lat.t_bs, lat_rng)
        t_bs = max((e.fire_time for e in syncs), default=sim.now) - sim.now
        deliver(sim.run_until_idle(), state.local_heads)
        _update_reputation(state, selected, results)

    downloads = [lat.t_s_to_c.sample(lat_rng) for _ in state.clients]
    for c, d in zip(state.clients, downloads):
        sim.schedule(d, EventKind.BROADCAST, ("model", c.address))
    sim.run_until_idle()
    sim.advance_to(sim.now + 1)  # round boundary keeps timestamps strictly increasing

    sample = RoundLatency(
        t_fl=max(train_draws, default=0),
        t_c_to_s=max(upload_draws, default=0),
        t_s_to_c=max(downloads, default=0),
        t_bg=t_bg,
        t_bv=t_bv,
        t_bs=t_bs,
    )
    state.latency.add(sample)
    state.round = t
    state.reputation.round = t
    report = RoundReport(
        round=t,
        selected=[c.address for c in selected],
        screening=[
            {"client": c.address, "client_index": c.index, **r.to_json()} for c, r in zip(selected, results)
        ],
        global_accuracy=state.global_accuracy,
        aggregated=aggregated,
        aggregation_weights=weights,
        selection_probabilities=probs,
        reputation=state.reputation.snapshot(),
        newly_blacklisted=newly,
        latency=sample,
        blocks=blocks,
    )
    state.reports.append(report)
    return report


def _miner(cfg: ExperimentConfig, round: int) -> str:
    return f"miner-{round % cfg.ledger.miners}"


def _block_summary(block, kind: str) -> dict:
    return {"index": block.index, "hash": block.hash.hex(), "kind": kind, "n_records": len(block.records)}


def _update_reputation(state: ExperimentState, selected: list[ClientState], results: list[ScreeningResult]) -> None:
    cfg = state.cfg.reputation
    sizes = [c.data_size for c in state.clients]
    l_min, l_max = min(sizes), max(sizes)
    rewarded = [
        (c, r) for c, r in zip(selected, results)
        if r.reason in (Reason.OK, Reason.LOW_ACCURACY, Reason.HASH_MISMATCH)
    ]
    thetas = [r.measured_accuracy for _, r in rewarded]
    for client, res in zip(selected, results):
        addr = client.address
        phi = quantity_factor(client.data_size, l_min, l_max)
        phi_prev = state.prev_quantity.get(addr, phi)
        state.prev_quantity[addr] = phi
        if res.beta or addr in state.blacklist:
            state.reputation[addr] = 0.0
            continue
        omega = quality_factor(res.measured_accuracy, min(thetas), max(thetas))
        state.reputation[addr] = update_reputation(
            state.reputation[addr], res.alpha, res.beta, omega, phi_prev, cfg
        )
    for addr in state.blacklist:
        if addr in state.reputation.values:
            state.reputation[addr] = 0.0


@dataclass
class ExperimentResult:
    state: ExperimentState
    initial_reputation: dict[str, float]
    initial_accuracy: float

    @property
    def rounds(self) -> list[RoundReport]:
        return self.state.reports

    @property
    def converged(self) -> bool:
        return bool(self.rounds) and self.rounds[-1].global_accuracy >= self.state.cfg.experiment.target_accuracy

    @property
    def final_accuracy(self) -> float:
        return self.state.global_accuracy

    @property
    def chain(self) -> Chain:
        return self.state.chain

    def to_json(self) -> dict:
        st = self.state
        cfg = st.cfg
        check = st.chain.validate()
        return {
            "config": cfg.to_json(),
            "mode": cfg.mode,
            "seed": cfg.seed,
            "server_address": st.server_key.address,
            "clients": [
                {
                    "index": c.index,
                    "address": c.address,
                    "data_size": c.data_size,
                    "behavior": c.profile.to_json(),
                }
                for c in st.clients
            ],
            "initial_accuracy": self.initial_accuracy,
            "initial_reputation": dict(sorted(self.initial_reputation.items())),
            "realized_rounds": len(self.rounds),
            "converged": self.converged,
            "final_accuracy": self.final_accuracy,
            "final_model_hash": hash_model(st.global_model).hex(),
            "rounds": [r.to_json() for r in self.rounds],
            "latency": st.latency.to_json(),
            "blacklist": st.blacklist.to_json(),
            "chain": {
                "length": len(st.chain),
                "head": st.chain.head.hash.hex(),
                "valid": check.valid,
                "reason": check.reason,
            },
        }


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run rounds until the global model reaches the target accuracy or the cap."""
    state = init_state(cfg)
    result = ExperimentResult(state, state.reputation.snapshot(), state.global_accuracy)
    target = cfg.experiment.target_accuracy
    for _ in range(cfg.experiment.max_rounds):
        report = run_round(state)
        log.debug("round %d accuracy %.4f", report.round, report.global_accuracy)
        if report.global_accuracy >= target:
            break
    return result
