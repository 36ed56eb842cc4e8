"""Deterministic discrete-event orchestration of the full protocol.

A scenario drives, per round: model distribution (with receipt-time hash
verification against the committed server block when defenses are on),
knowledge retrieval and fusion, local training with attack injection,
transaction submission with replay screening, the three-phase consensus,
block commitment with byte accounting, tampered distribution by a
malicious primary, and optional sliced arbitration.  Everything is seeded;
two runs of the same scenario produce byte-identical outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import heapq
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import arbitration as arb
from . import consensus as cns
from . import cost_model as cm
from . import learner as lrn
from .knowledge_index import HyperplaneSet, KnowledgeVector, RetrievalTable
from .ledger import (
    ClientTransaction,
    Ledger,
    enc_f64_vector,
    fingerprint,
    sign,
)

# seed-stream domains (spawn keys off the scenario seed)
_D_PLANES, _D_TASKS, _D_DATA, _D_TEST, _D_ATTACK, _D_ARB = 0, 1, 2, 3, 4, 5


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def _client_secret(seed: int, cid: int) -> bytes:
    return hashlib.sha256(
        b"client-secret" + seed.to_bytes(8, "little", signed=True) + cid.to_bytes(4, "little")
    ).digest()


class ScenarioError(Exception):
    pass


class ScenarioHalted(Exception):
    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class ClientAttack:
    kind: str  # "label_flip" | "replay"
    flip_fraction: float = 1.0


@dataclass(frozen=True)
class ServerFault:
    kind: str  # "tamper_scale" | "silent" | "proof_forgery"
    scale: float = 10.0


@dataclass(frozen=True)
class Scenario:
    """Full configuration of one simulated run (defaults: desk-scale network
    of 20 clients and 6 committee servers, 4 label-flipping clients and one
    scaling server, 10 tasks of 5 rounds)."""

    seed: int = 7
    n_clients: int = 20
    n_servers: int = 6
    n_tasks: int = 10
    rounds_per_task: int = 5
    classes_per_task: int = 2
    features: int = 16
    n_classes: int = 12
    samples_per_class: int = 20
    train_epochs: int = 5
    learning_rate: float = 0.5
    weight_decay: float = 0.0
    stddev: float = 1.0
    mean_scale: float = 3.0
    knowledge_kind: str = "parameters"
    fusion: lrn.FusionPolicy = lrn.FusionPolicy()
    forgetting: lrn.ForgettingParams = lrn.ForgettingParams()
    # index
    groups: int = 4
    planes_per_group: int = 16
    n_buckets: int = 64
    # consensus
    select_count: int = 0  # 0 = ceil(0.8 c)
    weighted_scores: bool = False
    retry_budget: int = 3
    # arbitration
    segment_size: int = 1000
    arbitration_schedule: str = "final-round"  # final-round | every-round | never
    tolerance_units: int = 1
    # attacks
    malicious_clients: dict[int, ClientAttack] = field(default_factory=dict)
    malicious_servers: dict[int, ServerFault] = field(default_factory=dict)
    # defenses (master switch: selection filter, replay check, receipt hash
    # check, arbitration)
    defenses: bool = True
    # latency model
    latency: cm.LatencyParams = cm.LatencyParams()
    broadcast_fanout: float = 1.0
    per_hop_delay: float = 0.001

    def __post_init__(self):
        if self.n_clients < 1:
            raise ScenarioError("need at least one client")
        if self.n_servers < 1:
            raise ScenarioError("need at least one committee server")
        if self.n_tasks < 1 or self.rounds_per_task < 1:
            raise ScenarioError("need at least one task and one round per task")
        bad_c = set(self.malicious_clients) - set(range(self.n_clients))
        bad_s = set(self.malicious_servers) - set(range(self.n_servers))
        if bad_c or bad_s:
            raise ScenarioError(f"malicious ids outside population: {bad_c | bad_s}")
        if self.arbitration_schedule not in ("final-round", "every-round", "never"):
            raise ScenarioError(f"unknown arbitration schedule {self.arbitration_schedule!r}")

    @property
    def dim(self) -> int:
        return lrn.model_dim(self.features, self.n_classes)

    def effective_select_count(self) -> int:
        if not self.defenses:
            return self.n_clients
        if self.select_count > 0:
            return self.select_count
        return math.ceil(0.8 * self.n_clients)

    def arbitration_fires(self, round_: int) -> bool:
        if not self.defenses or self.arbitration_schedule == "never":
            return False
        if self.arbitration_schedule == "every-round":
            return True
        return round_ == self.rounds_per_task


def disable_defenses(scenario: Scenario) -> Scenario:
    """Ablation switch: selection filter off (select all), arbitration off,
    replay and receipt checks off."""
    return replace(scenario, defenses=False)


def enable_defenses(scenario: Scenario) -> Scenario:
    return replace(scenario, defenses=True)


# ---------------------------------------------------------------------------
# scenario file format (TOML)


def scenario_from_dict(cfg: dict) -> Scenario:
    def grab(table: str) -> dict:
        sub = cfg.get(table, {})
        if not isinstance(sub, dict):
            raise ScenarioError(f"[{table}] must be a table")
        return sub

    net, training = grab("network"), grab("training")
    fusion, index = grab("fusion"), grab("index")
    consensus_t, arbitration_t = grab("consensus"), grab("arbitration")
    attacks, defenses = grab("attacks"), grab("defenses")
    forgetting, latency = grab("forgetting"), grab("latency")

    mal_clients = {}
    for cid in attacks.get("malicious_clients", []):
        mal_clients[int(cid)] = ClientAttack(
            kind=attacks.get("client_attack", "label_flip"),
            flip_fraction=float(attacks.get("flip_fraction", 1.0)),
        )
    mal_servers = {}
    for sid in attacks.get("malicious_servers", []):
        mal_servers[int(sid)] = ServerFault(
            kind=attacks.get("server_fault", "tamper_scale"),
            scale=float(attacks.get("tamper_scale", 10.0)),
        )
    try:
        return Scenario(
            seed=int(cfg.get("seed", 7)),
            n_clients=int(net.get("clients", 20)),
            n_servers=int(net.get("servers", 6)),
            n_tasks=int(training.get("tasks", 10)),
            rounds_per_task=int(training.get("rounds_per_task", 5)),
            classes_per_task=int(training.get("classes_per_task", 2)),
            features=int(training.get("features", 16)),
            n_classes=int(training.get("classes", 12)),
            samples_per_class=int(training.get("samples_per_class", 20)),
            train_epochs=int(training.get("epochs", 5)),
            learning_rate=float(training.get("learning_rate", 0.5)),
            weight_decay=float(training.get("weight_decay", 0.0)),
            stddev=float(training.get("stddev", 1.0)),
            mean_scale=float(training.get("mean_scale", 3.0)),
            knowledge_kind=str(training.get("knowledge_kind", "parameters")),
            fusion=lrn.FusionPolicy(
                knowledge_weight=float(fusion.get("knowledge_weight", 0.3)),
                retrieve_count=int(fusion.get("retrieve_count", 10)),
                probe_policy=str(fusion.get("probe_policy", "latest")),
            ),
            forgetting=lrn.ForgettingParams(
                margin=float(forgetting.get("margin", 0.01)),
                confidence_floor=float(forgetting.get("confidence_floor", 0.6)),
            ),
            groups=int(index.get("groups", 4)),
            planes_per_group=int(index.get("planes_per_group", 16)),
            n_buckets=int(index.get("buckets", 64)),
            select_count=int(consensus_t.get("select_count", 0)),
            weighted_scores=bool(consensus_t.get("weighted_scores", False)),
            retry_budget=int(consensus_t.get("retry_budget", 3)),
            segment_size=int(arbitration_t.get("segment_size", 1000)),
            arbitration_schedule=str(arbitration_t.get("schedule", "final-round")),
            tolerance_units=int(arbitration_t.get("tolerance_units", 1)),
            malicious_clients=mal_clients,
            malicious_servers=mal_servers,
            defenses=bool(defenses.get("enabled", True)),
            latency=cm.LatencyParams(
                train_s=float(latency.get("train_s", 0.0)),
                p2p_s=0.0,  # computed from payload sizes
                agg_s=float(latency.get("agg_s", 0.0)),
                block_s=float(latency.get("block_s", 0.0)),
                broadcast_s=0.0,  # computed from broadcast bytes
                knowledge_search_s=float(latency.get("knowledge_search_s", 0.0)),
                p2p_rate_bytes_per_s=float(latency.get("p2p_rate_bytes_per_s", 50e6)),
            ),
            broadcast_fanout=float(latency.get("broadcast_fanout", 1.0)),
        )
    except ScenarioError:
        raise
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"invalid scenario value: {e}") from e


def load_scenario(path) -> Scenario:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python 3.10
        import tomli as tomllib
    try:
        with open(path, "rb") as f:
            cfg = tomllib.load(f)
    except FileNotFoundError as e:
        raise ScenarioError(f"scenario file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ScenarioError(f"scenario file is not valid TOML: {e}") from e
    return scenario_from_dict(cfg)


def scenario_config_bytes(s: Scenario) -> bytes:
    """Canonical genesis payload describing the network configuration."""
    d = {
        "seed": s.seed,
        "clients": s.n_clients,
        "servers": s.n_servers,
        "tasks": s.n_tasks,
        "rounds_per_task": s.rounds_per_task,
        "dim": s.dim,
        "groups": s.groups,
        "planes_per_group": s.planes_per_group,
        "buckets": s.n_buckets,
        "select_count": s.effective_select_count(),
        "defenses": s.defenses,
    }
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode()


# ---------------------------------------------------------------------------
# event queue


class EventQueue:
    """Totally ordered (time, sequence, event) queue; ties broken by the
    monotone sequence number so processing order is fully deterministic."""

    def __init__(self):
        self._heap: list[tuple[float, int, tuple]] = []
        self._seq = 0

    def push(self, time: float, event: tuple) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time, self._seq, event))

    def pop(self) -> tuple[float, int, tuple]:
        return heapq.heappop(self._heap)

    def __len__(self) -> int:
        return len(self._heap)


# ---------------------------------------------------------------------------
# simulation state


@dataclass
class ClientState:
    cid: int
    tasks: list[lrn.TaskSpec]
    model: np.ndarray
    attack: ClientAttack | None = None
    last_knowledge: np.ndarray | None = None
    # last accepted submission (tx, weights, knowledge): what a replay
    # attacker fraudulently resubmits
    last_submission: tuple | None = None
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    knowledge_snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    train_data: dict[int, lrn.TaskData] = field(default_factory=dict)
    test_data: dict[int, lrn.TaskData] = field(default_factory=dict)


@dataclass
class RoundMetrics:
    task: int
    round: int
    time_s: float
    consensus: str
    primary: int
    retries: int
    mean_accuracy: float
    honest_mean_accuracy: float
    mean_forgetting: float
    selected: tuple[int, ...]
    blacklist_size: int
    distribution_tampered: bool
    tamper_detected: bool
    arbitration_ran: bool
    arbitration_flagged: tuple[int, ...]
    onchain_knowledge_bits: int
    client_block_broadcast_bytes: int
    consensus_message_bytes: int
    candidate_comparisons: int
    latency_s: float
    per_client_accuracy: tuple[float, ...]


CSV_HEADER = (
    "schema_version,task,round,time_s,consensus,primary,retries,"
    "mean_accuracy,honest_mean_accuracy,mean_forgetting,selected,"
    "blacklist_size,distribution_tampered,tamper_detected,arbitration_ran,"
    "arbitration_flagged,onchain_knowledge_bits,client_block_broadcast_bytes,"
    "consensus_message_bytes,candidate_comparisons,latency_s,per_client_accuracy"
)

CSV_SCHEMA_VERSION = 1


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_row(m: RoundMetrics) -> str:
    return ",".join([
        str(CSV_SCHEMA_VERSION),
        str(m.task),
        str(m.round),
        _fmt(m.time_s),
        m.consensus,
        str(m.primary),
        str(m.retries),
        _fmt(m.mean_accuracy),
        _fmt(m.honest_mean_accuracy),
        _fmt(m.mean_forgetting),
        ";".join(str(c) for c in m.selected),
        str(m.blacklist_size),
        str(int(m.distribution_tampered)),
        str(int(m.tamper_detected)),
        str(int(m.arbitration_ran)),
        ";".join(str(s) for s in m.arbitration_flagged),
        str(m.onchain_knowledge_bits),
        str(m.client_block_broadcast_bytes),
        str(m.consensus_message_bytes),
        str(m.candidate_comparisons),
        _fmt(m.latency_s),
        ";".join(_fmt(a) for a in m.per_client_accuracy),
    ])


class SimState:
    def __init__(self, scenario: Scenario):
        s = scenario
        self.scenario = s
        self.clock = 0.0
        self.queue = EventQueue()
        self.hp = HyperplaneSet(
            seed=int(_rng(s.seed, _D_PLANES).integers(0, 2**31)),
            dim=s.dim, groups=s.groups,
            planes_per_group=s.planes_per_group, n_buckets=s.n_buckets,
        )
        self.index = RetrievalTable(self.hp)
        self.ledger = Ledger(genesis_config=scenario_config_bytes(s), groups=s.groups)
        self.ledger.replay_protection = s.defenses
        self.k_pro, self.k_ver = arb.issue_proof_keys(
            s.seed.to_bytes(8, "little", signed=True)
        )
        sequences = lrn.gen_tasks(
            seed=int(_rng(s.seed, _D_TASKS).integers(0, 2**31)),
            n_clients=s.n_clients, n_tasks=s.n_tasks,
            classes_per_task=s.classes_per_task, features=s.features,
            n_classes=s.n_classes, samples_per_class=s.samples_per_class,
            stddev=s.stddev, mean_scale=s.mean_scale,
        )
        self.clients: list[ClientState] = []
        for cid in range(s.n_clients):
            self.ledger.register_client(cid, _client_secret(s.seed, cid))
            self.clients.append(ClientState(
                cid=cid, tasks=sequences[cid],
                model=lrn.init_model(s.features, s.n_classes),
                attack=s.malicious_clients.get(cid),
            ))
        self.committee = tuple(range(s.n_servers))
        self.excluded_servers: set[int] = set()
        self.task = 1
        self.round = 1
        # what clients received most recently (initial global model is zero)
        self.distributed = lrn.init_model(s.features, s.n_classes)
        self.distributing_primary: int | None = None
        self.distribution_tampered = False
        self.true_wg = self.distributed.copy()
        self.last_server_tx = None
        self.metrics: list[RoundMetrics] = []
        self.arbitrations: list[dict] = []
        # selected update matrix of the latest committed round, retained by
        # every committee server for audits
        self.last_selected_updates: np.ndarray | None = None
        # counters
        self.total_candidate_comparisons = 0
        self.query_count = 0
        self.block_knowledge_bits: list[int] = []
        self.block_broadcast_bytes: list[int] = []
        self.arb_counter = 0

    def committee_config(self, n_updates: int) -> cns.CommitteeConfig:
        s = self.scenario
        if s.defenses:
            select = s.effective_select_count()  # short rounds abort UnderQuorum
        else:
            select = min(s.effective_select_count(), max(n_updates, 1))
        return cns.CommitteeConfig(
            servers=self.committee,
            select_count=select,
            weighted_scores=s.weighted_scores,
        )

    def knowledge_count(self) -> int:
        return len(self.index)


def init(scenario: Scenario) -> SimState:
    """Register participants, issue keys, append genesis, generate tasks."""
    return SimState(scenario)


# ---------------------------------------------------------------------------
# per-round data plumbing


def _task_data(state: SimState, client: ClientState, t: int) -> lrn.TaskData:
    if t not in client.train_data:
        spec = client.tasks[t - 1]
        client.train_data[t] = lrn.sample_task_data(
            spec, seed=int(_rng(state.scenario.seed, _D_DATA, client.cid, t).integers(0, 2**31))
        )
        client.test_data[t] = lrn.sample_task_data(
            spec, seed=int(_rng(state.scenario.seed, _D_TEST, client.cid, t).integers(0, 2**31))
        )
    return client.train_data[t]


def _client_round_data(state: SimState, client: ClientState, t: int, r: int) -> lrn.TaskData:
    data = _task_data(state, client, t)
    if client.attack is not None and client.attack.kind == "label_flip":
        flip_seed = int(
            _rng(state.scenario.seed, _D_ATTACK, client.cid, t, r).integers(0, 2**31)
        )
        return lrn.attack_label_flip(data, client.attack.flip_fraction, flip_seed)
    return data


def _build_tx(state: SimState, client: ClientState, t: int, r: int,
              weights: np.ndarray, knowledge: np.ndarray) -> ClientTransaction:
    buckets = state.hp.signatures(knowledge)
    buckets = tuple(state.hp.bucket_of(g, sg) for g, sg in enumerate(buckets))
    payload_hash = fingerprint(enc_f64_vector(weights))
    tx_id = f"c{client.cid}-t{t}-r{r}"
    timestamp = int(state.clock * 1000)
    unsigned = ClientTransaction(
        tx_id=tx_id, task=t, round=r, model_hash=payload_hash,
        buckets=buckets, timestamp=timestamp, signature=b"",
    )
    sig = sign(_client_secret(state.scenario.seed, client.cid), unsigned.signing_payload())
    return dataclasses.replace(unsigned, signature=sig)


def _retrieve(state: SimState, client: ClientState):
    """Similar-knowledge lookup for fusion; returns (vectors, comparisons,
    queried flag).

    Under the "latest" probe policy only the newest knowledge probes the
    index; under "per-task" each completed task's own end-of-task knowledge
    probes too, splitting the n_k budget, so old-task anchors surface
    alongside recent structure.
    """
    policy = state.scenario.fusion
    if (client.last_knowledge is None or len(state.index) == 0
            or policy.knowledge_weight == 0.0 or policy.retrieve_count < 1
            or not np.any(client.last_knowledge)):
        return [], 0, False
    probe_values = []
    if policy.probe_policy == "per-task":
        probe_values.extend(
            client.knowledge_snapshots[tt]
            for tt in sorted(client.knowledge_snapshots)
            if np.any(client.knowledge_snapshots[tt])
        )
    probe_values.append(client.last_knowledge)
    per_probe = max(1, policy.retrieve_count // len(probe_values))
    comparisons = 0
    hits: dict[int, float] = {}
    for values in probe_values:
        probe = KnowledgeVector(
            owner=client.cid, task=state.task, round=state.round, values=values
        )
        comparisons += len(state.index.candidates(probe))
        for rid, cos in state.index.query(probe, per_probe):
            hits.setdefault(rid, cos)
    ranked = sorted(hits.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = ranked[: policy.retrieve_count]
    vectors = [state.index.store[rid].vector.values for rid, _ in keep]
    return vectors, comparisons, True


# ---------------------------------------------------------------------------
# the round loop


def run_round(state: SimState) -> RoundMetrics:
    s = state.scenario
    t, r = state.task, state.round
    dim_bytes = len(enc_f64_vector(state.distributed))
    lp = s.latency

    # --- C1: clients receive the current aggregated model ------------------
    received = state.distributed
    tamper_detected = False
    if s.defenses and state.last_server_tx is not None:
        if cns.model_hash(received) != state.last_server_tx.global_model_hash:
            tamper_detected = True
    base_global = state.true_wg if tamper_detected else received
    for client in state.clients:
        state.queue.push(
            state.clock + s.per_hop_delay + dim_bytes / lp.p2p_rate_bytes_per_s,
            ("distribute", client.cid),
        )
    while len(state.queue):
        when, _, _event = state.queue.pop()
        state.clock = max(state.clock, when)

    # receipt-triggered arbitration over the previous round's aggregation
    receipt_flagged: tuple[int, ...] = ()
    if tamper_detected and state.last_server_tx is not None:
        verdict = _run_arbitration(
            state, received, state.last_server_tx, state.distributing_primary,
            trigger="receipt-mismatch",
        )
        receipt_flagged = tuple(sorted(verdict.flagged))
        # remediation: the distribution channel identifies the tamperer
        if state.distributing_primary is not None:
            state.excluded_servers.add(state.distributing_primary)

    # --- C2/C3 + local training --------------------------------------------
    comparisons = 0
    for client in state.clients:
        vectors, cand, queried = _retrieve(state, client)
        comparisons += cand
        if queried:
            state.query_count += 1
        fused = lrn.fuse(base_global, vectors, s.fusion)
        data = _client_round_data(state, client, t, r)
        model, knowledge = lrn.train_local(
            fused, data, s.features, s.n_classes,
            epochs=s.train_epochs, lr=s.learning_rate,
            knowledge_kind=s.knowledge_kind,
            weight_decay=s.weight_decay,
        )
        client.model = model
        client.last_knowledge = knowledge
    state.total_candidate_comparisons += comparisons
    state.clock += lp.train_s

    # --- submission ----------------------------------------------------------
    updates: dict[int, np.ndarray] = {}
    knowledge_map: dict[int, KnowledgeVector] = {}
    txs: dict[int, ClientTransaction] = {}
    for client in state.clients:
        if client.attack is not None and client.attack.kind == "replay" \
                and client.last_submission is not None:
            tx, weights, knowledge = client.last_submission  # verbatim replay
        else:
            weights, knowledge = client.model, client.last_knowledge
            tx = _build_tx(state, client, t, r, weights, knowledge)
        result = state.ledger.submit_client_tx(tx)
        if result != "accept":
            continue
        client.last_submission = (tx, weights.copy(), knowledge.copy())
        updates[client.cid] = weights.copy()
        knowledge_map[client.cid] = KnowledgeVector(
            owner=client.cid, task=tx.task, round=tx.round, values=knowledge.copy()
        )
        txs[client.cid] = tx
        state.queue.push(
            state.clock + s.per_hop_delay + len(tx.to_bytes()) / lp.p2p_rate_bytes_per_s,
            ("submit", client.cid),
        )
    while len(state.queue):
        when, _, _event = state.queue.pop()
        state.clock = max(state.clock, when)

    # --- S4..S6: consensus with primary rotation on abort --------------------
    cfg = state.committee_config(len(updates))
    behaviors = {}
    for sid, fault in s.malicious_servers.items():
        if fault.kind == "silent":
            behaviors[sid] = cns.Behavior(kind="silent")
    ctx = cns.RoundContext(
        task=t, round=r, updates=updates, knowledge=knowledge_map, txs=txs,
        hp=state.hp, tip_hash=state.ledger.tip_hash,
        next_height=state.ledger.height() + 1,
    )
    outcome = None
    retries = 0
    for retry in range(s.retry_budget + 1):
        primary = cns.primary_for(cfg, t, r, s.rounds_per_task, retry,
                                  state.excluded_servers)
        outcome = cns.consensus_round(ctx, cfg, primary, behaviors)
        retries = retry
        if outcome.committed:
            break
    if outcome is None or not outcome.committed:
        raise ScenarioHalted(
            f"round t={t} r={r} failed to commit after {retries + 1} attempts "
            f"(last reason: {outcome.reason if outcome else 'n/a'})",
        )
    state.clock += lp.agg_s + lp.block_s

    # --- commit: append blocks, update derived state, count bytes ------------
    state.ledger.append_block(outcome.client_block)
    state.ledger.append_block(outcome.server_block)
    server_tx = outcome.server_block.txs[0]
    for tx in outcome.client_block.txs:
        cid = Ledger.owner_of(tx)
        state.index.insert(knowledge_map[cid])
        state.ledger.store_offchain(enc_f64_vector(updates[cid]))
        state.ledger.store_offchain(enc_f64_vector(knowledge_map[cid].values))
    state.last_selected_updates = np.stack(
        [updates[cid] for cid in server_tx.selected]
    )
    payload_bits = state.ledger.knowledge_payload_bits(outcome.client_block)
    bcast_bytes = payload_bits * (s.n_clients + s.n_servers - 1) // 8
    state.block_knowledge_bits.append(payload_bits)
    state.block_broadcast_bytes.append(bcast_bytes)
    broadcast_s = cm.broadcast_latency_s(
        payload_bits * (s.n_clients + s.n_servers - 1), lp, s.broadcast_fanout
    )
    state.clock += broadcast_s

    # --- distribution back to clients (a scaling primary tampers here) -------
    w_true = outcome.w_g
    fault = s.malicious_servers.get(outcome.primary)
    tampered = fault is not None and fault.kind == "tamper_scale"
    state.true_wg = w_true.copy()
    state.distributed = lrn.attack_model_scale(w_true, fault.scale) if tampered else w_true.copy()
    state.distribution_tampered = tampered
    state.distributing_primary = outcome.primary
    state.last_server_tx = server_tx
    state.clock += s.per_hop_delay + dim_bytes / lp.p2p_rate_bytes_per_s

    # --- S7: scheduled arbitration over this round's aggregation -------------
    arb_ran = tamper_detected
    flagged: tuple[int, ...] = receipt_flagged
    if s.arbitration_fires(r):
        verdict = _run_arbitration(
            state, state.distributed, server_tx, outcome.primary, trigger="scheduled",
        )
        arb_ran = True
        flagged = tuple(sorted(set(flagged) | verdict.flagged))
        if state.distribution_tampered:
            # receipt check of the *next* round would catch this too; the
            # scheduled audit already names the distributor
            state.excluded_servers.add(outcome.primary)
        else:
            state.excluded_servers.update(verdict.flagged)
        if state.distribution_tampered and s.defenses:
            # client recovers the committed model from an honest replica
            state.distributed = state.true_wg.copy()
            state.distribution_tampered = False
            state.clock += s.per_hop_delay + dim_bytes / lp.p2p_rate_bytes_per_s

    # --- evaluation -----------------------------------------------------------
    acc, forg = [], []
    for client in state.clients:
        per_task = [
            lrn.accuracy(client.model, client.test_data[tt], s.features, s.n_classes)
            for tt in range(1, t + 1) if tt in client.test_data
        ]
        acc.append(float(np.mean(per_task)) if per_task else 0.0)
        scores, counts = [], []
        for tt in range(1, t):
            snap = client.snapshots.get(tt)
            if snap is None or tt not in client.test_data:
                continue
            f_score, n_anchor = lrn.forgetting_score(
                snap, client.model, client.test_data[tt],
                s.features, s.n_classes, s.forgetting,
            )
            scores.append(f_score)
            counts.append(n_anchor)
        forg.append(lrn.forgetting_aggregate(scores, counts))
    honest = [a for a, c in zip(acc, state.clients) if c.attack is None]

    if r == s.rounds_per_task:
        for client in state.clients:
            client.snapshots[t] = client.model.copy()
            client.knowledge_snapshots[t] = client.last_knowledge.copy()

    p2p_s = dim_bytes / lp.p2p_rate_bytes_per_s
    latency_s = (lp.train_s + p2p_s + lp.agg_s + lp.block_s + broadcast_s
                 + lp.knowledge_search_s)
    m = RoundMetrics(
        task=t, round=r, time_s=state.clock,
        consensus="committed", primary=outcome.primary, retries=retries,
        mean_accuracy=float(np.mean(acc)),
        honest_mean_accuracy=float(np.mean(honest)) if honest else 0.0,
        mean_forgetting=float(np.mean(forg)),
        selected=tuple(server_tx.selected),
        blacklist_size=len(state.ledger.blacklist),
        distribution_tampered=tampered,
        tamper_detected=tamper_detected,
        arbitration_ran=arb_ran,
        arbitration_flagged=flagged,
        onchain_knowledge_bits=payload_bits,
        client_block_broadcast_bytes=bcast_bytes,
        consensus_message_bytes=outcome.message_bytes,
        candidate_comparisons=comparisons,
        latency_s=latency_s,
        per_client_accuracy=tuple(acc),
    )
    state.metrics.append(m)

    if r == s.rounds_per_task:
        state.task += 1
        state.round = 1
    else:
        state.round += 1
    return m


def _run_arbitration(state: SimState, client_wg: np.ndarray, server_tx,
                     primary: int | None, trigger: str) -> arb.ArbitrationVerdict:
    """One sliced audit: assignment, per-server proving, client verification."""
    s = state.scenario
    state.arb_counter += 1
    arb_id = f"arb-{state.arb_counter}"
    if primary is None:
        primary = state.committee[0]
    honest_ids = [
        c.cid for c in state.clients
        if c.attack is None and c.cid not in state.ledger.blacklist
    ]
    initiator = min(honest_ids) if honest_ids else min(c.cid for c in state.clients)
    assignment = arb.build_assignment(
        arbitration_id=arb_id, dim=s.dim, segment_size=s.segment_size,
        committee=state.committee, primary=primary,
        seed=int(_rng(s.seed, _D_ARB, state.arb_counter).integers(0, 2**31)),
        selected=tuple(server_tx.selected),
    )
    # every committee server retained the selected updates it validated
    updates_matrix = state.last_selected_updates
    proofs: dict[tuple[int, int, int], arb.ProofFile | None] = {}
    for sid, lo, hi in assignment.slices:
        fault = s.malicious_servers.get(sid)
        if fault is not None and fault.kind == "silent":
            proofs[(sid, lo, hi)] = None
            continue
        if fault is not None and fault.kind == "proof_forgery":
            proofs[(sid, lo, hi)] = arb.forge_proof(arb_id, sid, lo, hi, state.k_pro)
            continue
        proofs[(sid, lo, hi)] = arb.prove(
            arb.ServerRoundData(updates=updates_matrix), arb_id, sid, lo, hi,
            client_wg[lo:hi], state.k_pro, s.tolerance_units,
        )
    verdict = arb.arbitrate(client_wg, assignment, proofs, state.k_ver)
    state.arbitrations.append({
        "arbitration_id": arb_id,
        "trigger": trigger,
        "task": state.task,
        "round": state.round,
        "initiator": initiator,
        "primary": primary,
        "slices": [[sid, lo, hi] for sid, lo, hi in assignment.slices],
        "per_server": verdict.to_json()["per_server"],
        "flagged": sorted(verdict.flagged),
    })
    return verdict


def run_scenario(scenario: Scenario):
    """Execute tasks x rounds; returns (metrics list, cost report, state)."""
    state = init(scenario)
    total = scenario.n_tasks * scenario.rounds_per_task
    for _ in range(total):
        run_round(state)
    report = build_cost_report(state)
    return state.metrics, report, state


def build_cost_report(state: SimState) -> dict:
    s = state.scenario
    c_prime = s.effective_select_count()
    params = cm.CostParams(
        clients=s.n_clients, tasks=s.n_tasks, stored_per_round=c_prime,
        dim=s.dim, n_buckets=s.n_buckets, groups=s.groups,
        candidate_exponent=1.0, rounds_per_task=s.rounds_per_task,
    )
    knowledge_total = state.knowledge_count()
    mean_cand = (state.total_candidate_comparisons / state.query_count
                 if state.query_count else 0.0)
    rho_hat = cm.estimate_candidate_exponent(max(mean_cand, 1.0), max(knowledge_total, 2))
    params_rho = dataclasses.replace(params, candidate_exponent=rho_hat)
    formula_block_bits = cm.onchain_block_bits(params)
    formula_bcast_bits = cm.broadcast_bits(params, s.n_servers)
    bits_match = all(b == formula_block_bits for b in state.block_knowledge_bits)
    bcast_match = all(
        b == formula_bcast_bits // 8 for b in state.block_broadcast_bytes
    )
    measured_cost = mean_cand * s.dim + s.n_buckets * s.groups * s.dim
    bound_ok = measured_cost <= 4.0 * cm.index_compute_cost(params_rho)
    crossover_consistent = all(
        (cm.baseline_table_bits(dataclasses.replace(params, tasks=tt))
         > formula_block_bits)
        == (s.n_clients * tt > s.groups)
        for tt in range(1, s.n_tasks + 1)
    )
    return {
        "params": {
            "clients": s.n_clients,
            "servers": s.n_servers,
            "tasks": s.n_tasks,
            "rounds_per_task": s.rounds_per_task,
            "stored_per_round": c_prime,
            "dim": s.dim,
            "groups": s.groups,
            "buckets": s.n_buckets,
            "float_bits": params.float_bits,
            "int_bits": params.int_bits,
        },
        "formulas": {
            "onchain_block_bits": formula_block_bits,
            "baseline_table_bits_final_task": cm.baseline_table_bits(params),
            "broadcast_bits": formula_bcast_bits,
            "broadcast_savings_bits": cm.broadcast_savings_bits(params, s.n_servers),
            "index_compute_cost": cm.index_compute_cost(params_rho),
            "linear_compute_cost": cm.linear_compute_cost(params),
            "crossover_threshold_min": cm.index_crossover_threshold(2, 1),
            "collusion_safety_prob_p0.1": cm.collusion_safety_prob(s.n_servers, 0.1),
            "collusion_attack_prob_p0.1": cm.collusion_attack_prob(s.n_servers, 0.1),
            "latency_per_task_s": cm.latency_total(s.latency, s.rounds_per_task),
        },
        "measured": {
            "blocks": len(state.block_knowledge_bits),
            "knowledge_bits_per_client_block_min": min(state.block_knowledge_bits, default=0),
            "knowledge_bits_per_client_block_max": max(state.block_knowledge_bits, default=0),
            "broadcast_bytes_per_client_block_min": min(state.block_broadcast_bytes, default=0),
            "broadcast_bytes_per_client_block_max": max(state.block_broadcast_bytes, default=0),
            "mean_candidates_per_query": mean_cand,
            "stored_knowledge": knowledge_total,
            "rho_hat": rho_hat,
        },
        "checks": {
            "prop2_per_block_bits_constant_and_exact": bits_match,
            "prop3_broadcast_bytes_exact": bcast_match,
            "prop1_candidate_bound_x4": bound_ok,
            "prop2_crossover_predicate_consistent": crossover_consistent,
        },
    }


# ---------------------------------------------------------------------------
# output documents


def metrics_csv(metrics: list[RoundMetrics]) -> str:
    lines = [CSV_HEADER]
    lines.extend(metrics_row(m) for m in metrics)
    return "\n".join(lines) + "\n"


def arbitration_jsonl(state: SimState) -> str:
    if not state.arbitrations:
        return "\n"
    return "\n".join(
        json.dumps(a, sort_keys=True, separators=(",", ":")) for a in state.arbitrations
    ) + "\n"


def cost_report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"
