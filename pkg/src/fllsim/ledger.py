"""Append-only hash-linked ledger with client/server blocks.

The chain records two kinds of blocks per committed training round: a client
block holding the selected clients' update transactions (model hash + bucket
signature of the extracted knowledge) and a server block holding the
aggregation transaction (Merkle root over selected model hashes, selected ids,
global model hash).  Replay detection keys on the (model_hash, task, round)
fingerprint; resubmission of a seen fingerprint blacklists the sender.

Canonical serialization is length-prefixed little-endian, fields in
declaration order, so hashes are stable across runs and platforms.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

ZERO32 = b"\x00" * 32

GENESIS_KIND = "genesis"
CLIENT_KIND = "client"
SERVER_KIND = "server"


def fingerprint(payload: bytes) -> bytes:
    """SHA-256 digest of a byte payload (model/knowledge fingerprinting)."""
    return hashlib.sha256(payload).digest()


# ---------------------------------------------------------------------------
# canonical encoding


def enc_u32(n: int) -> bytes:
    return struct.pack("<I", n)


def enc_u64(n: int) -> bytes:
    return struct.pack("<Q", n)


def enc_i64(n: int) -> bytes:
    return struct.pack("<q", n)


def enc_bytes(b: bytes) -> bytes:
    return enc_u32(len(b)) + b


def enc_str(s: str) -> bytes:
    return enc_bytes(s.encode("utf-8"))


def enc_u32_list(xs) -> bytes:
    out = [enc_u32(len(xs))]
    out.extend(enc_u32(int(x)) for x in xs)
    return b"".join(out)


def enc_i64_list(xs) -> bytes:
    out = [enc_u32(len(xs))]
    out.extend(enc_i64(int(x)) for x in xs)
    return b"".join(out)


def enc_f64_vector(values) -> bytes:
    """Canonical bytes of a float vector (little-endian float64)."""
    out = [enc_u32(len(values))]
    out.extend(struct.pack("<d", float(v)) for v in values)
    return b"".join(out)


# ---------------------------------------------------------------------------
# signatures: deterministic keyed-digest commitments, not real asymmetric
# crypto.  A key pair is a 32-byte secret and public = sha256(secret); the
# registry (trusted authority role) holds secrets for verification.  The
# scheme is swappable behind sign/verify.


def keypair_from_secret(secret: bytes) -> tuple[bytes, bytes]:
    if len(secret) != 32:
        raise ValueError("secret must be 32 bytes")
    return secret, hashlib.sha256(secret).digest()


def sign(secret: bytes, payload: bytes) -> bytes:
    return hashlib.sha256(secret + payload).digest()


def verify_signature(secret: bytes, payload: bytes, signature: bytes) -> bool:
    return sign(secret, payload) == signature


# ---------------------------------------------------------------------------
# Merkle commitments


def merkle_root(leaves: list[bytes]) -> bytes:
    """Binary Merkle root; an odd trailing node is promoted unchanged."""
    if not leaves:
        raise ValueError("merkle_root requires at least one leaf")
    level = list(leaves)
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level) - 1, 2):
            nxt.append(hashlib.sha256(level[i] + level[i + 1]).digest())
        if len(level) % 2 == 1:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def merkle_path(leaves: list[bytes], index: int) -> list[tuple[str, bytes]]:
    """Inclusion path for leaves[index]: list of ('L'|'R', sibling digest)."""
    if not 0 <= index < len(leaves):
        raise IndexError("leaf index out of range")
    path = []
    level = list(leaves)
    pos = index
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level) - 1, 2):
            nxt.append(hashlib.sha256(level[i] + level[i + 1]).digest())
        odd = len(level) % 2 == 1
        if odd:
            nxt.append(level[-1])
        if odd and pos == len(level) - 1:
            pass  # promoted: no sibling at this level
        elif pos % 2 == 0:
            path.append(("R", level[pos + 1]))
        else:
            path.append(("L", level[pos - 1]))
        pos //= 2
        level = nxt
    return path


def verify_merkle_path(leaf: bytes, path: list[tuple[str, bytes]], root: bytes) -> bool:
    h = leaf
    for side, sibling in path:
        if side == "R":
            h = hashlib.sha256(h + sibling).digest()
        else:
            h = hashlib.sha256(sibling + h).digest()
    return h == root


# ---------------------------------------------------------------------------
# transactions


@dataclass(frozen=True)
class ClientTransaction:
    """One client's per-round update record: model hash + knowledge buckets."""

    tx_id: str
    task: int
    round: int
    model_hash: bytes
    buckets: tuple[int, ...]  # per-group bucket ids of the extracted knowledge
    timestamp: int  # logical simulation time
    signature: bytes

    def signing_payload(self) -> bytes:
        return (
            enc_str(self.tx_id)
            + enc_u32(self.task)
            + enc_u32(self.round)
            + enc_bytes(self.model_hash)
            + enc_u32_list(self.buckets)
            + enc_u64(self.timestamp)
        )

    def to_bytes(self) -> bytes:
        return self.signing_payload() + enc_bytes(self.signature)

    def to_json(self) -> dict:
        return {
            "type": "client",
            "tx_id": self.tx_id,
            "task": self.task,
            "round": self.round,
            "model_hash": self.model_hash.hex(),
            "buckets": list(self.buckets),
            "timestamp": self.timestamp,
            "signature": self.signature.hex(),
        }

    @staticmethod
    def from_json(d: dict) -> "ClientTransaction":
        return ClientTransaction(
            tx_id=d["tx_id"],
            task=d["task"],
            round=d["round"],
            model_hash=bytes.fromhex(d["model_hash"]),
            buckets=tuple(d["buckets"]),
            timestamp=d["timestamp"],
            signature=bytes.fromhex(d["signature"]),
        )


@dataclass(frozen=True)
class ServerTransaction:
    """Aggregation record: Merkle root over selected model hashes, selected
    client ids in selection order, and the global model hash."""

    tx_id: str
    merkle_root: bytes
    selected: tuple[int, ...]
    global_model_hash: bytes

    def to_bytes(self) -> bytes:
        return (
            enc_str(self.tx_id)
            + enc_bytes(self.merkle_root)
            + enc_u32_list(self.selected)
            + enc_bytes(self.global_model_hash)
        )

    def to_json(self) -> dict:
        return {
            "type": "server",
            "tx_id": self.tx_id,
            "merkle_root": self.merkle_root.hex(),
            "selected": list(self.selected),
            "global_model_hash": self.global_model_hash.hex(),
        }

    @staticmethod
    def from_json(d: dict) -> "ServerTransaction":
        return ServerTransaction(
            tx_id=d["tx_id"],
            merkle_root=bytes.fromhex(d["merkle_root"]),
            selected=tuple(d["selected"]),
            global_model_hash=bytes.fromhex(d["global_model_hash"]),
        )


@dataclass(frozen=True)
class ConfigTransaction:
    """Genesis payload: system and network configuration digestable bytes."""

    label: str
    payload: bytes

    def to_bytes(self) -> bytes:
        return enc_str(self.label) + enc_bytes(self.payload)

    def to_json(self) -> dict:
        return {"type": "config", "label": self.label, "payload": self.payload.hex()}

    @staticmethod
    def from_json(d: dict) -> "ConfigTransaction":
        return ConfigTransaction(label=d["label"], payload=bytes.fromhex(d["payload"]))


Transaction = ClientTransaction | ServerTransaction | ConfigTransaction

_TX_FROM_JSON = {
    "client": ClientTransaction.from_json,
    "server": ServerTransaction.from_json,
    "config": ConfigTransaction.from_json,
}


def tx_from_json(d: dict) -> Transaction:
    return _TX_FROM_JSON[d["type"]](d)


# ---------------------------------------------------------------------------
# blocks


def block_hash_of(prev_hash: bytes, kind: str, txs: list, height: int) -> bytes:
    body = [prev_hash, enc_str(kind), enc_u32(len(txs))]
    body.extend(tx.to_bytes() for tx in txs)
    body.append(enc_u64(height))
    return hashlib.sha256(b"".join(body)).digest()


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    kind: str
    txs: tuple
    block_hash: bytes

    @staticmethod
    def build(height: int, prev_hash: bytes, kind: str, txs: list) -> "Block":
        return Block(
            height=height,
            prev_hash=prev_hash,
            kind=kind,
            txs=tuple(txs),
            block_hash=block_hash_of(prev_hash, kind, txs, height),
        )

    def to_json(self) -> dict:
        return {
            "height": self.height,
            "prev_hash": self.prev_hash.hex(),
            "kind": self.kind,
            "txs": [tx.to_json() for tx in self.txs],
            "block_hash": self.block_hash.hex(),
        }

    @staticmethod
    def from_json(d: dict) -> "Block":
        return Block(
            height=d["height"],
            prev_hash=bytes.fromhex(d["prev_hash"]),
            kind=d["kind"],
            txs=tuple(tx_from_json(t) for t in d["txs"]),
            block_hash=bytes.fromhex(d["block_hash"]),
        )


# ---------------------------------------------------------------------------
# rejection reasons


class SubmitResult:
    ACCEPT = "accept"
    REPLAY = "replay"
    BLACKLISTED = "blacklisted"
    BAD_SIGNATURE = "bad_signature"
    MALFORMED = "malformed"


class LedgerError(Exception):
    pass


class Ledger:
    """Single-writer append-only chain plus derived indices.

    ``seen_fingerprints`` is strictly chain-derived (rebuildable by replaying
    blocks); fingerprints of accepted-but-uncommitted submissions live in
    ``pending_fingerprints`` until their block is appended.  Replay checks
    consult the union.
    """

    def __init__(self, genesis_config: bytes = b"", groups: int | None = None):
        self.groups = groups  # expected bucket-signature length, if enforced
        self.replay_protection = True  # ablation switch: False admits replays
        self.client_keys: dict[int, bytes] = {}  # client id -> signing secret
        self.seen_fingerprints: set[tuple[bytes, tuple[int, int]]] = set()
        self.pending_fingerprints: set[tuple[bytes, tuple[int, int]]] = set()
        self.blacklist: set[int] = set()
        self.offchain_store: dict[bytes, bytes] = {}
        genesis = Block.build(
            0, ZERO32, GENESIS_KIND, [ConfigTransaction("config", genesis_config)]
        )
        self.chain: list[Block] = [genesis]
        self.tip_hash: bytes = genesis.block_hash

    # -- registration / off-chain -----------------------------------------

    def register_client(self, client_id: int, secret: bytes) -> bytes:
        secret, public = keypair_from_secret(secret)
        self.client_keys[client_id] = secret
        return public

    def store_offchain(self, payload: bytes) -> bytes:
        digest = fingerprint(payload)
        self.offchain_store[digest] = payload
        return digest

    def fetch_offchain(self, digest: bytes) -> bytes:
        return self.offchain_store[digest]

    def export_offchain(self, directory) -> int:
        """Write the off-chain store as content-addressed files named by hex
        digest; returns the number of files written."""
        from pathlib import Path

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for digest, payload in self.offchain_store.items():
            (directory / digest.hex()).write_bytes(payload)
        return len(self.offchain_store)

    # -- client transaction admission --------------------------------------

    @staticmethod
    def owner_of(tx: ClientTransaction) -> int:
        # tx ids are "c<owner>-t<task>-r<round>[...]"; owner is authoritative
        # in the id because Eq-style records carry no separate owner field.
        return int(tx.tx_id.split("-", 1)[0][1:])

    def submit_client_tx(self, tx: ClientTransaction) -> str:
        """Admit a client transaction; replays blacklist the sender."""
        if len(tx.model_hash) != 32:
            return SubmitResult.MALFORMED
        if self.groups is not None and len(tx.buckets) != self.groups:
            return SubmitResult.MALFORMED
        try:
            owner = self.owner_of(tx)
        except (ValueError, IndexError):
            return SubmitResult.MALFORMED
        if owner in self.blacklist:
            return SubmitResult.BLACKLISTED
        secret = self.client_keys.get(owner)
        if secret is None or not verify_signature(
            secret, tx.signing_payload(), tx.signature
        ):
            return SubmitResult.BAD_SIGNATURE
        key = (tx.model_hash, (tx.task, tx.round))
        if self.replay_protection and (
            key in self.seen_fingerprints or key in self.pending_fingerprints
        ):
            self.blacklist.add(owner)
            return SubmitResult.REPLAY
        self.pending_fingerprints.add(key)
        return SubmitResult.ACCEPT

    # -- chain growth -------------------------------------------------------

    def height(self) -> int:
        return self.chain[-1].height

    def tip(self) -> Block:
        return self.chain[-1]

    def append_block(self, block: Block) -> int:
        if block.prev_hash != self.tip_hash:
            raise LedgerError("prev_hash does not match chain tip")
        if block.height != self.height() + 1:
            raise LedgerError("non-consecutive height")
        expect = block_hash_of(block.prev_hash, block.kind, list(block.txs), block.height)
        if expect != block.block_hash:
            raise LedgerError("block hash mismatch")
        if block.kind == CLIENT_KIND:
            for tx in block.txs:
                if not isinstance(tx, ClientTransaction):
                    raise LedgerError("client block holds non-client tx")
                owner = self.owner_of(tx)
                if owner in self.blacklist:
                    raise LedgerError(f"tx from blacklisted client {owner}")
                secret = self.client_keys.get(owner)
                if secret is None or not verify_signature(
                    secret, tx.signing_payload(), tx.signature
                ):
                    raise LedgerError(f"invalid signature on {tx.tx_id}")
                key = (tx.model_hash, (tx.task, tx.round))
                if self.replay_protection and key in self.seen_fingerprints:
                    raise LedgerError(f"replayed fingerprint in block: {tx.tx_id}")
        elif block.kind == SERVER_KIND:
            for tx in block.txs:
                if not isinstance(tx, ServerTransaction):
                    raise LedgerError("server block holds non-server tx")
                if len(set(tx.selected)) != len(tx.selected):
                    raise LedgerError("duplicate selected ids")
        else:
            raise LedgerError(f"cannot append block of kind {block.kind!r}")
        self.chain.append(block)
        self.tip_hash = block.block_hash
        if block.kind == CLIENT_KIND:
            for tx in block.txs:
                key = (tx.model_hash, (tx.task, tx.round))
                self.seen_fingerprints.add(key)
                self.pending_fingerprints.discard(key)
        return block.height

    # -- audit ----------------------------------------------------------------

    def verify_chain(self) -> int | None:
        """Recompute every hash and link; returns first bad height or None."""
        bad = verify_block_sequence(self.chain)
        if bad is not None:
            return bad
        if self.chain[-1].block_hash != self.tip_hash:
            return self.chain[-1].height
        return None

    def knowledge_payload_bits(self, block: Block, bits_per_bucket: int = 32) -> int:
        """On-chain knowledge payload of a client block, in bits."""
        if block.kind != CLIENT_KIND:
            raise ValueError("knowledge payload is defined for client blocks")
        return sum(len(tx.buckets) for tx in block.txs) * bits_per_bucket

    # -- dump / load -----------------------------------------------------------

    def dump_jsonl(self) -> str:
        lines = [
            json.dumps(b.to_json(), sort_keys=True, separators=(",", ":"))
            for b in self.chain
        ]
        return "\n".join(lines) + "\n"


def verify_block_sequence(chain: list[Block]) -> int | None:
    """Self-consistency check of a block sequence (hashes, links, heights)."""
    prev = None
    for i, block in enumerate(chain):
        if block.height != i:
            return block.height
        if i == 0:
            if block.prev_hash != ZERO32:
                return 0
        elif block.prev_hash != prev.block_hash:
            return block.height
        expect = block_hash_of(block.prev_hash, block.kind, list(block.txs), block.height)
        if expect != block.block_hash:
            return block.height
        prev = block
    return None


def load_chain_jsonl(text: str) -> list[Block]:
    blocks = []
    for line in text.splitlines():
        line = line.strip()
        if line:
            blocks.append(Block.from_json(json.loads(line)))
    return blocks


def rebuild_derived_state(chain: list[Block]) -> dict:
    """Replay a chain into its derived indices (fingerprints, tip, heights)."""
    seen = set()
    for block in chain:
        if block.kind == CLIENT_KIND:
            for tx in block.txs:
                seen.add((tx.model_hash, (tx.task, tx.round)))
    return {
        "seen_fingerprints": seen,
        "tip_hash": chain[-1].block_hash if chain else None,
        "height": chain[-1].height if chain else None,
    }
