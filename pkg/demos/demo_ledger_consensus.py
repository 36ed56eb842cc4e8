# Walks the chain machinery: client/server transactions, Merkle commitments,
# replay screening, and one three-phase consensus round with a tampering
# primary rejected by the replicas.

import numpy as np

from fllsim import consensus as cns
from fllsim.knowledge_index import HyperplaneSet, KnowledgeVector, compute_signature
from fllsim.ledger import (
    Block,
    ClientTransaction,
    Ledger,
    enc_f64_vector,
    fingerprint,
    merkle_path,
    sign,
    verify_merkle_path,
)

rng = np.random.default_rng(1)
dim = 32
n_clients = 5

# --------------------------------------------------------------------------
# Register clients on a fresh ledger and build one round of transactions.
# --------------------------------------------------------------------------

ledger = Ledger(genesis_config=b"demo network", groups=4)
secrets = {}
for cid in range(n_clients):
    secrets[cid] = bytes([cid]) * 32
    ledger.register_client(cid, secrets[cid])

hp = HyperplaneSet(seed=3, dim=dim, groups=4, planes_per_group=8, n_buckets=32)
updates, knowledge, txs = {}, {}, {}
for cid in range(n_clients):
    w = rng.standard_normal(dim) + 2.0
    updates[cid] = w
    k = KnowledgeVector(owner=cid, task=1, round=1, values=w.copy())
    knowledge[cid] = k
    unsigned = ClientTransaction(
        tx_id=f"c{cid}-t1-r1", task=1, round=1,
        model_hash=fingerprint(enc_f64_vector(w)),
        buckets=compute_signature(hp, k).buckets,
        timestamp=0, signature=b"",
    )
    txs[cid] = ClientTransaction(
        tx_id=unsigned.tx_id, task=1, round=1, model_hash=unsigned.model_hash,
        buckets=unsigned.buckets, timestamp=0,
        signature=sign(secrets[cid], unsigned.signing_payload()),
    )
    print(f"submit {txs[cid].tx_id}: {ledger.submit_client_tx(txs[cid])}")

print("resubmitting client 2's transaction:",
      ledger.submit_client_tx(txs[2]), "-> blacklist:", sorted(ledger.blacklist))

# The blacklisted client is excluded from the round from here on.
for pool in (updates, knowledge, txs):
    pool.pop(2)

# --------------------------------------------------------------------------
# Run one consensus round: honest committee of 6, then a tampering primary.
# --------------------------------------------------------------------------

ctx = cns.RoundContext(
    task=1, round=1, updates=updates, knowledge=knowledge, txs=txs,
    hp=hp, tip_hash=ledger.tip_hash, next_height=ledger.height() + 1,
)
cfg = cns.CommitteeConfig(servers=(0, 1, 2, 3, 4, 5), select_count=4)

out = cns.consensus_round(ctx, cfg, primary=0)
print(f"\nhonest round: {out.status} after {out.messages_delivered} messages")
print("selected:", out.server_block.txs[0].selected)

ledger.append_block(out.client_block)
ledger.append_block(out.server_block)
print("chain height:", ledger.height(), "verify:", ledger.verify_chain() or "ok")

# Merkle inclusion proof for the first selected client
stx = out.server_block.txs[0]
leaves = [txs[cid].model_hash for cid in stx.selected]
path = merkle_path(leaves, 0)
print("inclusion path verifies:",
      verify_merkle_path(leaves[0], path, stx.merkle_root))

# A primary that scales the global model before hashing is caught by every
# replica's recomputation and the round aborts without a quorum.
bad = cns.Behavior(kind="equivocate",
                   variant_map={s: "bad" for s in (1, 2, 3, 4, 5)},
                   vote_action="bad", tamper_scale=10.0)
out2 = cns.consensus_round(ctx, cfg, primary=0, behaviors={0: bad})
print(f"\ntampering primary: {out2.status} ({out2.reason})")
