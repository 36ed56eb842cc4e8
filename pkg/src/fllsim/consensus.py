"""Correlation-scored selection and three-phase committee consensus.

Each round the primary scores submitted updates by summed ReLU-clipped
cosine similarity, selects the top n_a, aggregates them by uniform mean,
and proposes a client block (selected clients' transactions) plus a server
block (Merkle root over selected model hashes, selected ids, global model
hash).  Replicas recompute everything from their own copy of the round
inputs and vote only on a byte-identical match; any server holding more
than ceil(2s/3) votes sends a commit, and the primary finalizes once it
holds more than ceil(2s/3) commits.  Replicas adopt a finalized block only
if it matches their own recomputation, so a lying primary cannot push a
divergent block to an honest replica.

The state machine is message-driven with no internal threads; a bounded
deterministic delivery loop (simulated time, sequence-number tie-break)
drives one round.  Fault injection goes through Behavior (silent,
equivocating primary, bogus voter) and Schedule (per-link drops/delays).
"""

from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .knowledge_index import HyperplaneSet, KnowledgeVector, compute_signature
from .ledger import (
    Block,
    ClientTransaction,
    ServerTransaction,
    CLIENT_KIND,
    SERVER_KIND,
    enc_bytes,
    enc_f64_vector,
    enc_str,
    enc_u32,
    fingerprint,
    merkle_root,
)


@dataclass(frozen=True)
class ModelUpdate:
    owner: int
    task: int
    round: int
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("update weights must be finite")


@dataclass(frozen=True)
class CommitteeConfig:
    servers: tuple[int, ...]
    select_count: int  # n_a
    weighted_scores: bool = False  # norm-weighted correlation variant
    message_budget: int = 0  # 0 = auto (generous)

    def __post_init__(self):
        if len(self.servers) < 1:
            raise ValueError("committee needs at least one server")
        if self.select_count < 1:
            raise ValueError("select_count must be >= 1")

    @property
    def size(self) -> int:
        return len(self.servers)

    @property
    def vote_threshold(self) -> int:
        """Quorum is strictly more than ceil(2s/3) messages."""
        return math.ceil(2 * self.size / 3)


class UnderQuorum(Exception):
    pass


# ---------------------------------------------------------------------------
# correlation scores and aggregation


def correlation_table(updates: list[ModelUpdate], weighted: bool = False) -> dict[int, float]:
    """Score every update by the sum over all submitted updates of the
    ReLU-clipped cosine similarity (self-term included).

    Zero-norm updates are excluded from both sides and score 0.  The
    weighted variant multiplies each term by the counterpart's norm.
    """
    if not updates:
        raise ValueError("no updates to score")
    mat = np.stack([u.weights for u in updates])
    norms = np.linalg.norm(mat, axis=1)
    live = norms > 0.0
    scores = {u.owner: 0.0 for u in updates}
    if not np.any(live):
        return scores
    sub = mat[live]
    sub_norms = norms[live]
    cos = (sub @ sub.T) / np.outer(sub_norms, sub_norms)
    relu = np.maximum(cos, 0.0)
    if weighted:
        relu = relu * sub_norms[None, :]
    sums = relu.sum(axis=1)
    live_owners = [u.owner for u, ok in zip(updates, live) if ok]
    for owner, s in zip(live_owners, sums):
        scores[owner] = float(s)
    return scores


def correlation_score(updates: list[ModelUpdate], i: int, weighted: bool = False) -> float:
    """Score of updates[i]; see correlation_table."""
    if not 0 <= i < len(updates):
        raise IndexError("update index out of range")
    return correlation_table(updates, weighted)[updates[i].owner]


def rank_by_score(scores: dict[int, float]) -> list[int]:
    """Client ids by descending score, ties by ascending id."""
    return [cid for cid, _ in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))]


def select_and_aggregate(updates: list[ModelUpdate], cfg: CommitteeConfig):
    """Top-n_a selection by correlation score and uniform-mean aggregation.

    Returns (w_g, selected ids in rank order, score table).  Pure function
    of its inputs.
    """
    if len(updates) < cfg.select_count:
        raise UnderQuorum(
            f"{len(updates)} updates < select_count {cfg.select_count}"
        )
    scores = correlation_table(updates, cfg.weighted_scores)
    ranked = rank_by_score(scores)
    selected = tuple(ranked[: cfg.select_count])
    by_owner = {u.owner: u for u in updates}
    w_g = np.mean(np.stack([by_owner[cid].weights for cid in selected]), axis=0)
    return w_g, selected, scores


def model_hash(weights: np.ndarray) -> bytes:
    return fingerprint(enc_f64_vector(weights))


# ---------------------------------------------------------------------------
# round inputs and proposals


@dataclass
class RoundContext:
    """What every committee server holds for one round: the admitted client
    transactions, the broadcast updates and knowledge, the hash bank, and
    the chain attachment point."""

    task: int
    round: int
    updates: dict[int, np.ndarray]
    knowledge: dict[int, KnowledgeVector]
    txs: dict[int, ClientTransaction]
    hp: HyperplaneSet
    tip_hash: bytes
    next_height: int

    def update_list(self) -> list[ModelUpdate]:
        return [
            ModelUpdate(owner=cid, task=self.task, round=self.round, weights=w)
            for cid, w in sorted(self.updates.items())
        ]


@dataclass(frozen=True)
class Proposal:
    client_block: Block
    server_block: Block
    w_g: np.ndarray

    def digest(self) -> bytes:
        return hashlib.sha256(
            self.client_block.block_hash + self.server_block.block_hash
        ).digest()


def build_proposal(ctx: RoundContext, cfg: CommitteeConfig, primary: int) -> Proposal:
    """Deterministic proposal construction from shared round inputs."""
    w_g, selected, _ = select_and_aggregate(ctx.update_list(), cfg)
    client_txs = [ctx.txs[cid] for cid in selected]
    client_block = Block.build(ctx.next_height, ctx.tip_hash, CLIENT_KIND, client_txs)
    leaves = [ctx.txs[cid].model_hash for cid in selected]
    server_tx = ServerTransaction(
        tx_id=f"g{primary}-t{ctx.task}-r{ctx.round}",
        merkle_root=merkle_root(leaves),
        selected=selected,
        global_model_hash=model_hash(w_g),
    )
    server_block = Block.build(
        ctx.next_height + 1, client_block.block_hash, SERVER_KIND, [server_tx]
    )
    return Proposal(client_block=client_block, server_block=server_block, w_g=w_g)


def validate_proposal(ctx: RoundContext, cfg: CommitteeConfig, primary: int,
                      proposal: Proposal) -> tuple[bool, str | None]:
    """Full recomputation check; returns (valid, first differing field)."""
    try:
        expected = build_proposal(ctx, cfg, primary)
    except UnderQuorum:
        return False, "selected"
    got_tx = proposal.server_block.txs[0] if proposal.server_block.txs else None
    exp_tx = expected.server_block.txs[0]
    if got_tx is None or not isinstance(got_tx, ServerTransaction):
        return False, "server_block"
    if tuple(got_tx.selected) != tuple(exp_tx.selected):
        return False, "selected"
    if got_tx.merkle_root != exp_tx.merkle_root:
        return False, "merkle_root"
    if got_tx.global_model_hash != exp_tx.global_model_hash:
        return False, "global_model_hash"
    for tx in proposal.client_block.txs:
        cid = int(tx.tx_id.split("-", 1)[0][1:])
        k = ctx.knowledge.get(cid)
        if k is None or compute_signature(ctx.hp, k).buckets != tuple(tx.buckets):
            return False, "client_buckets"
    if proposal.client_block != expected.client_block:
        return False, "client_block"
    if proposal.server_block != expected.server_block:
        return False, "server_block"
    return True, None


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class Propose:
    sender: int
    proposal: Proposal

    def to_bytes(self) -> bytes:
        p = self.proposal
        return (
            enc_str("propose") + enc_u32(self.sender)
            + enc_bytes(p.client_block.block_hash)
            + enc_bytes(p.server_block.block_hash)
            + enc_f64_vector(p.w_g)
        )


@dataclass(frozen=True)
class Vote:
    sender: int
    proposal_digest: bytes

    def to_bytes(self) -> bytes:
        return enc_str("vote") + enc_u32(self.sender) + enc_bytes(self.proposal_digest)


@dataclass(frozen=True)
class Commit:
    sender: int
    proposal_digest: bytes

    def to_bytes(self) -> bytes:
        return enc_str("commit") + enc_u32(self.sender) + enc_bytes(self.proposal_digest)


@dataclass(frozen=True)
class Finalize:
    sender: int
    proposal: Proposal

    def to_bytes(self) -> bytes:
        return enc_str("finalize") + enc_u32(self.sender) + enc_bytes(self.proposal.digest())


# ---------------------------------------------------------------------------
# behaviors and schedules (fault injection)


@dataclass
class Behavior:
    """Per-server behavior during one consensus round.

    kinds: "honest"; "silent" (crash: sends and processes nothing);
    "equivocate" (as primary, sends a per-replica choice of the valid or a
    tampered proposal, with configurable vote/finalize actions);
    "bogus_vote" (votes for a fabricated digest instead of its validation
    result).
    """

    kind: str = "honest"
    variant_map: dict[int, str] = field(default_factory=dict)  # sid -> good|bad|drop
    vote_action: str = "good"  # none | good | bad | both
    finalize_action: str = "none"  # none | good | bad | both
    tamper_scale: float = 10.0  # scaling used to build the "bad" variant


class Schedule:
    """Delivery policy: which messages arrive and when. Deterministic."""

    per_hop_delay = 0.001

    def deliver(self, src: int, dst: int, msg) -> bool:
        return True

    def delay(self, src: int, dst: int, msg) -> float:
        return self.per_hop_delay


class DropSchedule(Schedule):
    """Drops any (src, dst, message-type-name) triple in the drop set."""

    def __init__(self, drops: set[tuple[int, int, str]]):
        self.drops = drops

    def deliver(self, src: int, dst: int, msg) -> bool:
        return (src, dst, type(msg).__name__) not in self.drops


# ---------------------------------------------------------------------------
# one consensus round


@dataclass
class ConsensusOutcome:
    status: str  # "committed" | "aborted"
    reason: str | None
    primary: int
    w_g: np.ndarray | None
    client_block: Block | None
    server_block: Block | None
    finalized: dict[int, list[tuple[int, bytes]]]  # server -> adopted (height, hash)
    messages_delivered: int
    message_bytes: int

    @property
    def committed(self) -> bool:
        return self.status == "committed"


def primary_for(cfg: CommitteeConfig, task: int, round_: int, rounds_per_task: int,
                retry: int = 0, excluded: set[int] | None = None) -> int:
    """Round-robin primary over the committee by global round index; flagged
    or excluded servers are skipped."""
    excluded = excluded or set()
    eligible = [s for s in cfg.servers if s not in excluded]
    if not eligible:
        raise ValueError("no eligible primary")
    g = (task - 1) * rounds_per_task + (round_ - 1) + retry
    return eligible[g % len(eligible)]


class _ServerNode:
    def __init__(self, sid: int, behavior: Behavior):
        self.sid = sid
        self.behavior = behavior
        self.validated: Proposal | None = None
        self.rejected_field: str | None = None
        self.votes: dict[bytes, set[int]] = {}
        self.commits: dict[bytes, set[int]] = {}
        self.commit_sent = False
        self.adopted: Proposal | None = None
        self.finalized: list[tuple[int, bytes]] = []

    def is_honest(self) -> bool:
        return self.behavior.kind == "honest"


class _Driver:
    def __init__(self, schedule: Schedule):
        self.schedule = schedule
        self.queue: list[tuple[float, int, int, object]] = []
        self.now = 0.0
        self.seq = 0
        self.delivered = 0
        self.bytes = 0

    def send(self, src: int, dst: int, msg) -> None:
        if not self.schedule.deliver(src, dst, msg):
            return
        self.seq += 1
        heapq.heappush(
            self.queue,
            (self.now + self.schedule.delay(src, dst, msg), self.seq, dst, msg),
        )

    def broadcast(self, src: int, dests, msg) -> None:
        for dst in dests:
            if dst != src:
                self.send(src, dst, msg)


def consensus_round(ctx: RoundContext, cfg: CommitteeConfig, primary: int,
               behaviors: dict[int, Behavior] | None = None,
               schedule: Schedule | None = None) -> ConsensusOutcome:
    """Drive one prepare/vote/commit round to a terminal state.

    Aborts with "Timeout" when the message budget runs out or nothing could
    progress (e.g. a silent primary), and "NoQuorum" when replicas rejected
    the proposal and withheld votes.
    """
    behaviors = behaviors or {}
    schedule = schedule or Schedule()
    budget = cfg.message_budget or (20 * cfg.size * cfg.size + 50)
    driver = _Driver(schedule)
    nodes = {sid: _ServerNode(sid, behaviors.get(sid, Behavior())) for sid in cfg.servers}
    threshold = cfg.vote_threshold
    everyone = list(cfg.servers)

    def tampered_variant(good: Proposal, scale: float) -> Proposal:
        bad_w = scale * good.w_g
        good_tx = good.server_block.txs[0]
        bad_tx = ServerTransaction(
            tx_id=good_tx.tx_id,
            merkle_root=good_tx.merkle_root,
            selected=good_tx.selected,
            global_model_hash=model_hash(bad_w),
        )
        bad_server = Block.build(
            good.server_block.height, good.server_block.prev_hash, SERVER_KIND, [bad_tx]
        )
        return Proposal(client_block=good.client_block, server_block=bad_server, w_g=bad_w)

    def adopt(node: _ServerNode, proposal: Proposal) -> None:
        node.adopted = proposal
        node.finalized.append(
            (proposal.client_block.height, proposal.client_block.block_hash)
        )
        node.finalized.append(
            (proposal.server_block.height, proposal.server_block.block_hash)
        )

    def cast_vote(node: _ServerNode, digest: bytes) -> None:
        node.votes.setdefault(digest, set()).add(node.sid)
        driver.broadcast(node.sid, everyone, Vote(node.sid, digest))
        maybe_commit(node)

    def maybe_commit(node: _ServerNode) -> None:
        if node.commit_sent or node.validated is None:
            return
        digest = node.validated.digest()
        if len(node.votes.get(digest, ())) > threshold:
            node.commit_sent = True
            msg = Commit(node.sid, digest)
            if node.sid == primary:
                handle(node.sid, msg)  # local hand-off, not a network hop
            else:
                driver.send(node.sid, primary, msg)

    def maybe_finalize(node: _ServerNode) -> None:
        if node.sid != primary or node.adopted is not None or node.validated is None:
            return
        digest = node.validated.digest()
        if len(node.commits.get(digest, ())) > threshold:
            adopt(node, node.validated)
            driver.broadcast(node.sid, everyone, Finalize(node.sid, node.validated))

    def handle(dst: int, msg) -> None:
        node = nodes[dst]
        if node.behavior.kind == "silent":
            return  # crashed: processes nothing
        if isinstance(msg, Propose):
            if node.validated is not None or node.rejected_field is not None:
                return  # at most one proposal considered per round
            ok, bad_field = validate_proposal(ctx, cfg, primary, msg.proposal)
            if not ok:
                node.rejected_field = bad_field
                return
            node.validated = msg.proposal
            if node.behavior.kind == "bogus_vote":
                fake = hashlib.sha256(b"bogus" + bytes([node.sid % 256])).digest()
                node.votes.setdefault(fake, set()).add(node.sid)
                driver.broadcast(node.sid, everyone, Vote(node.sid, fake))
                return
            cast_vote(node, msg.proposal.digest())
        elif isinstance(msg, Vote):
            node.votes.setdefault(msg.proposal_digest, set()).add(msg.sender)
            maybe_commit(node)
        elif isinstance(msg, Commit):
            node.commits.setdefault(msg.proposal_digest, set()).add(msg.sender)
            maybe_finalize(node)
        elif isinstance(msg, Finalize):
            # adopt only what matches this replica's own recomputation
            if (node.adopted is None and node.validated is not None
                    and msg.proposal.digest() == node.validated.digest()):
                adopt(node, msg.proposal)

    # --- phase 1: the primary proposes -------------------------------------
    pnode = nodes[primary]
    if pnode.behavior.kind in ("honest", "bogus_vote"):
        try:
            proposal = build_proposal(ctx, cfg, primary)
        except UnderQuorum as e:
            return ConsensusOutcome(
                status="aborted", reason=f"UnderQuorum: {e}", primary=primary,
                w_g=None, client_block=None, server_block=None,
                finalized={sid: [] for sid in cfg.servers},
                messages_delivered=0, message_bytes=0,
            )
        pnode.validated = proposal
        driver.broadcast(primary, everyone, Propose(primary, proposal))
        cast_vote(pnode, proposal.digest())
    elif pnode.behavior.kind == "equivocate":
        good = build_proposal(ctx, cfg, primary)
        bad = tampered_variant(good, pnode.behavior.tamper_scale)
        pnode.validated = good  # the byz primary knows the valid proposal
        for sid in cfg.servers:
            if sid == primary:
                continue
            variant = pnode.behavior.variant_map.get(sid, "good")
            if variant == "drop":
                continue
            chosen = good if variant == "good" else bad
            driver.send(primary, sid, Propose(primary, chosen))
        va = pnode.behavior.vote_action
        if va in ("good", "both"):
            pnode.votes.setdefault(good.digest(), set()).add(primary)
            driver.broadcast(primary, everyone, Vote(primary, good.digest()))
        if va in ("bad", "both"):
            pnode.votes.setdefault(bad.digest(), set()).add(primary)
            driver.broadcast(primary, everyone, Vote(primary, bad.digest()))
        fa = pnode.behavior.finalize_action
        if fa in ("good", "both"):
            driver.broadcast(primary, everyone, Finalize(primary, good))
        if fa in ("bad", "both"):
            driver.broadcast(primary, everyone, Finalize(primary, bad))
    # a silent primary proposes nothing

    # --- delivery loop ------------------------------------------------------
    overrun = False
    while driver.queue:
        if driver.delivered >= budget:
            overrun = True
            break
        when, _, dst, msg = heapq.heappop(driver.queue)
        driver.now = when
        driver.delivered += 1
        driver.bytes += len(msg.to_bytes())
        handle(dst, msg)

    finalized = {sid: list(nodes[sid].finalized) for sid in cfg.servers}
    if pnode.adopted is not None and pnode.behavior.kind == "honest":
        return ConsensusOutcome(
            status="committed", reason=None, primary=primary,
            w_g=pnode.adopted.w_g,
            client_block=pnode.adopted.client_block,
            server_block=pnode.adopted.server_block,
            finalized=finalized,
            messages_delivered=driver.delivered, message_bytes=driver.bytes,
        )
    if overrun:
        reason = "Timeout"
    elif any(n.rejected_field for n in nodes.values()):
        reason = "NoQuorum"
    else:
        reason = "Timeout"
    return ConsensusOutcome(
        status="aborted", reason=reason, primary=primary,
        w_g=None, client_block=None, server_block=None, finalized=finalized,
        messages_delivered=driver.delivered, message_bytes=driver.bytes,
    )


def commit_decision(commit_count: int, cfg: CommitteeConfig) -> bool:
    """The primary's finalization predicate: strictly more than ceil(2s/3)
    commit messages."""
    return commit_count > cfg.vote_threshold
