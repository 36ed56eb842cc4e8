"""Correlation scoring, selection, and the three-phase commit protocol."""

import itertools

import numpy as np
import pytest

from fllsim.consensus import (
    Behavior,
    CommitteeConfig,
    DropSchedule,
    ModelUpdate,
    Proposal,
    RoundContext,
    UnderQuorum,
    build_proposal,
    commit_decision,
    correlation_score,
    correlation_table,
    model_hash,
    consensus_round,
    primary_for,
    rank_by_score,
    select_and_aggregate,
    validate_proposal,
)
from fllsim.knowledge_index import HyperplaneSet, KnowledgeVector, compute_signature
from fllsim.ledger import (
    Block,
    ClientTransaction,
    SERVER_KIND,
    ServerTransaction,
    ZERO32,
    enc_f64_vector,
    fingerprint,
    merkle_root,
    verify_merkle_path,
    merkle_path,
)


def updates_from(vectors, task=1, round_=1):
    return [
        ModelUpdate(owner=i, task=task, round=round_, weights=np.asarray(v, float))
        for i, v in enumerate(vectors)
    ]


class TestCorrelationScore:
    def test_identical_vectors(self):
        ups = updates_from([[1.0, 2.0]] * 3)
        for i in range(3):
            assert correlation_score(ups, i) == pytest.approx(3.0)

    def test_sign_flip_analytic_case(self):
        honest = [1.0, -2.0, 0.5]
        ups = updates_from([honest] * 4 + [[-x for x in honest]])
        table = correlation_table(ups)
        for cid in range(4):
            assert table[cid] == pytest.approx(4.0)
        assert table[4] == pytest.approx(1.0)

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(3)
        vecs = rng.standard_normal((10, 24))
        ups = updates_from(vecs)
        table = correlation_table(ups)
        for i in range(10):
            total = 0.0
            for j in range(10):
                cos = float(vecs[i] @ vecs[j]) / (
                    np.linalg.norm(vecs[i]) * np.linalg.norm(vecs[j])
                )
                total += max(0.0, cos)
            assert table[i] == pytest.approx(total, rel=1e-12)

    def test_zero_norm_excluded_scores_zero(self):
        ups = updates_from([[1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
        table = correlation_table(ups)
        assert table[1] == 0.0
        assert table[0] == pytest.approx(2.0)  # zero vector not in self sums

    def test_scale_invariance_of_ranking(self):
        rng = np.random.default_rng(7)
        vecs = rng.standard_normal((8, 16))
        base = rank_by_score(correlation_table(updates_from(vecs)))
        scaled = vecs.copy()
        scaled[3] *= 17.5
        assert rank_by_score(correlation_table(updates_from(scaled))) == base

    def test_weighted_variant(self):
        vecs = [[2.0, 0.0], [1.0, 0.0]]
        table = correlation_table(updates_from(vecs), weighted=True)
        # each term multiplied by the counterpart's norm
        assert table[0] == pytest.approx(2.0 + 1.0)
        assert table[1] == pytest.approx(2.0 + 1.0)


class TestSelectAndAggregate:
    def cfg(self, n_a, s=4):
        return CommitteeConfig(servers=tuple(range(s)), select_count=n_a)

    def test_select_all_identical(self):
        ups = updates_from([[1.0, 2.0]] * 4)
        w_g, selected, _ = select_and_aggregate(ups, self.cfg(4))
        assert np.allclose(w_g, [1.0, 2.0])
        assert selected == (0, 1, 2, 3)

    def test_sign_flip_attacker_excluded(self):
        honest = [1.0, -2.0, 0.5]
        ups = updates_from([honest] * 4 + [[-x for x in honest]])
        w_g, selected, _ = select_and_aggregate(ups, self.cfg(4))
        assert 4 not in selected
        assert np.allclose(w_g, honest)

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(11)
        vecs = rng.standard_normal((9, 12))
        ups = updates_from(vecs)
        w_g, selected, scores = select_and_aggregate(ups, self.cfg(5))
        order = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        expect = tuple(cid for cid, _ in order[:5])
        assert selected == expect
        assert np.allclose(w_g, vecs[list(expect)].mean(axis=0))

    def test_under_quorum(self):
        with pytest.raises(UnderQuorum):
            select_and_aggregate(updates_from([[1.0, 0.0]]), self.cfg(2))

    def test_deterministic(self):
        rng = np.random.default_rng(13)
        vecs = rng.standard_normal((6, 8))
        a = select_and_aggregate(updates_from(vecs), self.cfg(4))
        b = select_and_aggregate(updates_from(vecs), self.cfg(4))
        assert np.array_equal(a[0], b[0]) and a[1] == b[1]

    def test_sign_flip_never_selected_property(self):
        rng = np.random.default_rng(17)
        for _ in range(25):
            v = rng.standard_normal(10)
            c = int(rng.integers(3, 8))
            ups = updates_from([v] * (c - 1) + [-v])
            _, selected, _ = select_and_aggregate(ups, self.cfg(c - 1))
            assert (c - 1) not in selected


# ---------------------------------------------------------------------------
# round fixtures


def make_ctx(n_clients=4, dim=6, task=1, round_=1, seed=0):
    rng = np.random.default_rng(seed)
    hp = HyperplaneSet(seed=99, dim=dim, groups=2, planes_per_group=4, n_buckets=8)
    updates, knowledge, txs = {}, {}, {}
    for cid in range(n_clients):
        w = rng.standard_normal(dim) + 3.0  # correlated cluster
        updates[cid] = w
        k = KnowledgeVector(owner=cid, task=task, round=round_, values=w.copy())
        knowledge[cid] = k
        txs[cid] = ClientTransaction(
            tx_id=f"c{cid}-t{task}-r{round_}",
            task=task, round=round_,
            model_hash=fingerprint(enc_f64_vector(w)),
            buckets=compute_signature(hp, k).buckets,
            timestamp=0,
            signature=fingerprint(b"sig" + bytes([cid])),
        )
    return RoundContext(
        task=task, round=round_, updates=updates, knowledge=knowledge,
        txs=txs, hp=hp, tip_hash=ZERO32, next_height=1,
    )


def committee(s, n_a=3):
    return CommitteeConfig(servers=tuple(range(s)), select_count=n_a)


class TestThreshold:
    def test_threshold_values(self):
        assert committee(4).vote_threshold == 3
        assert committee(6).vote_threshold == 4
        assert committee(9).vote_threshold == 6

    def test_commit_decision_strictness(self):
        cfg = committee(6)
        assert not commit_decision(4, cfg)  # exactly ceil(2s/3) -> no
        assert commit_decision(5, cfg)  # one more -> yes


class TestValidateProposal:
    def test_honest_proposal_valid(self):
        ctx = make_ctx()
        cfg = committee(4)
        prop = build_proposal(ctx, cfg, primary=0)
        ok, field = validate_proposal(ctx, cfg, 0, prop)
        assert ok and field is None

    def test_scaled_global_model_detected(self):
        ctx = make_ctx()
        cfg = committee(4)
        good = build_proposal(ctx, cfg, primary=0)
        tx = good.server_block.txs[0]
        bad_tx = ServerTransaction(
            tx_id=tx.tx_id, merkle_root=tx.merkle_root, selected=tx.selected,
            global_model_hash=model_hash(10.0 * good.w_g),
        )
        bad = Proposal(
            client_block=good.client_block,
            server_block=Block.build(
                good.server_block.height, good.server_block.prev_hash,
                SERVER_KIND, [bad_tx],
            ),
            w_g=10.0 * good.w_g,
        )
        ok, field = validate_proposal(ctx, cfg, 0, bad)
        assert not ok and field == "global_model_hash"

    def test_swapped_selected_detected(self):
        ctx = make_ctx()
        cfg = committee(4)
        good = build_proposal(ctx, cfg, primary=0)
        tx = good.server_block.txs[0]
        swapped = tuple(reversed(tx.selected))
        bad_tx = ServerTransaction(
            tx_id=tx.tx_id, merkle_root=tx.merkle_root, selected=swapped,
            global_model_hash=tx.global_model_hash,
        )
        bad = Proposal(
            client_block=good.client_block,
            server_block=Block.build(
                good.server_block.height, good.server_block.prev_hash,
                SERVER_KIND, [bad_tx],
            ),
            w_g=good.w_g,
        )
        ok, field = validate_proposal(ctx, cfg, 0, bad)
        assert not ok and field == "selected"

    def test_committed_merkle_root_verifies(self):
        ctx = make_ctx()
        cfg = committee(4)
        prop = build_proposal(ctx, cfg, primary=0)
        tx = prop.server_block.txs[0]
        leaves = [ctx.txs[cid].model_hash for cid in tx.selected]
        assert merkle_root(leaves) == tx.merkle_root
        for i, leaf in enumerate(leaves):
            assert verify_merkle_path(leaf, merkle_path(leaves, i), tx.merkle_root)


class TestConsensusRound:
    def test_all_honest_commits(self):
        ctx = make_ctx()
        cfg = committee(6)
        out = consensus_round(ctx, cfg, primary=0)
        assert out.committed
        assert out.client_block.height == 1
        assert out.server_block.height == 2
        # every honest server adopted the same blocks
        for sid in cfg.servers:
            assert out.finalized[sid] == out.finalized[0]

    def test_one_silent_replica_still_commits(self):
        ctx = make_ctx()
        cfg = committee(6)
        out = consensus_round(ctx, cfg, primary=0, behaviors={3: Behavior(kind="silent")})
        assert out.committed
        assert out.finalized[3] == []

    def test_silent_primary_aborts(self):
        ctx = make_ctx()
        cfg = committee(6)
        out = consensus_round(ctx, cfg, primary=2, behaviors={2: Behavior(kind="silent")})
        assert not out.committed
        assert out.reason == "Timeout"

    def test_tampering_primary_no_quorum(self):
        ctx = make_ctx()
        cfg = committee(6)
        behaviors = {0: Behavior(kind="equivocate",
                                 variant_map={s: "bad" for s in range(1, 6)},
                                 vote_action="bad")}
        out = consensus_round(ctx, cfg, primary=0, behaviors=behaviors)
        assert not out.committed
        assert out.reason == "NoQuorum"

    def test_under_quorum_aborts(self):
        ctx = make_ctx(n_clients=2)
        cfg = committee(4, n_a=3)
        out = consensus_round(ctx, cfg, primary=0)
        assert not out.committed
        assert out.reason.startswith("UnderQuorum")

    def test_exact_threshold_votes_insufficient(self):
        # drop enough vote messages that every server holds exactly
        # ceil(2s/3) votes: nobody commits
        ctx = make_ctx()
        s = 6
        cfg = committee(s)
        # every server receives votes from senders {0,1,2,3} only (self
        # included): 4 votes = ceil(2*6/3) exactly
        drops = set()
        for src in (4, 5):
            for dst in range(s):
                drops.add((src, dst, "Vote"))
        out = consensus_round(ctx, cfg, primary=0, schedule=DropSchedule(drops))
        assert not out.committed

    def test_one_extra_vote_commits(self):
        ctx = make_ctx()
        s = 6
        cfg = committee(s)
        drops = set()
        for dst in range(s):
            drops.add((5, dst, "Vote"))  # 5 votes held everywhere
        out = consensus_round(ctx, cfg, primary=0, schedule=DropSchedule(drops))
        assert out.committed

    def test_primary_rotation(self):
        cfg = committee(6)
        assert primary_for(cfg, 1, 1, 5) == 0
        assert primary_for(cfg, 1, 2, 5) == 1
        assert primary_for(cfg, 2, 1, 5) == 5
        assert primary_for(cfg, 1, 1, 5, retry=1) == 1
        assert primary_for(cfg, 1, 1, 5, excluded={0}) == 1  # skip flagged

    def test_liveness_under_rotation(self):
        # a silent server never blocks a round for more than one retry at
        # s=6 (quorum 5 of 6 honest)
        ctx = make_ctx()
        cfg = committee(6)
        behaviors = {1: Behavior(kind="silent")}
        committed = False
        for retry in range(3):
            primary = primary_for(cfg, 1, 2, 5, retry)
            out = consensus_round(ctx, cfg, primary, behaviors)
            if out.committed:
                committed = True
                break
        assert committed


def honest_conflicts(outcomes_by_server, behaviors):
    """Check no two honest servers adopted different blocks at one height."""
    seen: dict[int, bytes] = {}
    for sid, pairs in outcomes_by_server.items():
        if behaviors.get(sid, Behavior()).kind != "honest":
            continue
        for height, digest in pairs:
            if height in seen and seen[height] != digest:
                return True
            seen.setdefault(height, digest)
    return False


class TestSafety:
    def test_exhaustive_s4_one_byzantine(self):
        """Exhaustive enumeration over the Byzantine action space at s=4.

        The protocol is counting-based and votes are deduplicated per
        sender, so outcomes depend only on which messages are delivered,
        not their order (early votes for unknown digests are buffered);
        enumerating delivery subsets therefore covers all orderings.
        Honest-to-honest links are reliable; every delivery choice of the
        Byzantine server's messages is enumerated.
        """
        ctx = make_ctx()
        cfg = committee(4)
        servers = list(cfg.servers)
        checked = 0
        for byz in servers:
            # case 1: byzantine server is the primary and equivocates
            if True:
                variants = itertools.product(
                    ["good", "bad", "drop"], repeat=3
                )
                for assignment in variants:
                    vmap = dict(zip([s for s in servers if s != byz], assignment))
                    for vote_action in ("none", "good", "bad", "both"):
                        for fin_action in ("none", "bad", "both"):
                            behaviors = {byz: Behavior(
                                kind="equivocate", variant_map=vmap,
                                vote_action=vote_action,
                                finalize_action=fin_action,
                            )}
                            out = consensus_round(ctx, cfg, primary=byz,
                                             behaviors=behaviors)
                            assert not honest_conflicts(out.finalized, behaviors)
                            checked += 1
            # case 2: byzantine server is a replica (silent or bogus voter),
            # with every drop pattern of its vote links
            for honest_primary in servers:
                if honest_primary == byz:
                    continue
                for kind in ("silent", "bogus_vote"):
                    for mask in range(16):
                        drops = {
                            (byz, dst, "Vote")
                            for bit, dst in enumerate(servers)
                            if mask & (1 << bit)
                        }
                        behaviors = {byz: Behavior(kind=kind)}
                        out = consensus_round(ctx, cfg, primary=honest_primary,
                                         behaviors=behaviors,
                                         schedule=DropSchedule(drops))
                        assert not honest_conflicts(out.finalized, behaviors)
                        checked += 1
        assert checked == 4 * (27 * 4 * 3) + 4 * 3 * 2 * 16

    def test_randomized_s6_schedules(self):
        """1000 random lossy schedules at s=6 with one Byzantine server."""
        ctx = make_ctx()
        cfg = committee(6)
        rng = np.random.default_rng(42)
        msg_types = ("Propose", "Vote", "Commit", "Finalize")
        for trial in range(1000):
            byz = int(rng.integers(0, 6))
            primary = int(rng.integers(0, 6))
            if byz == primary:
                behaviors = {byz: Behavior(
                    kind="equivocate",
                    variant_map={
                        s: rng.choice(["good", "bad", "drop"])
                        for s in cfg.servers if s != byz
                    },
                    vote_action=rng.choice(["none", "good", "bad", "both"]),
                    finalize_action=rng.choice(["none", "bad", "both"]),
                )}
            else:
                behaviors = {byz: Behavior(
                    kind=str(rng.choice(["silent", "bogus_vote"]))
                )}
            drop_p = rng.choice([0.0, 0.2, 0.5])
            drops = {
                (src, dst, mt)
                for src in cfg.servers for dst in cfg.servers
                for mt in msg_types
                if rng.random() < drop_p
            }
            out = consensus_round(ctx, cfg, primary, behaviors, DropSchedule(drops))
            assert not honest_conflicts(out.finalized, behaviors)
