"""Client-initiated sliced audit of aggregation correctness.

A suspicious client splits its received global model into z slices, sends
each slice to an assigned committee server, and asks for a proof that the
slice equals the mean of the selected client updates on that index range.
Servers check the relation over 7-decimal-digit fixed-point integers
(`n * agg[j]` within `n * tolerance_units` of the update sum) and return a
proof file binding the verified slice and verdict to the slice range, the
server id, and the proving key.  A proof that fails verification at the
client - bad binding, wrong slice commitment, failing witness verdict, or
no response within the message budget - flags its server.

The reference proof backend is a keyed-digest commitment scheme, not a real
zero-knowledge proof: it preserves the message flow, slice distribution,
key separation, and detection semantics, and can be swapped for a real
prover/verifier pair behind the same interface.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .ledger import enc_bytes, enc_i64_list, enc_str, enc_u32, enc_u64

FIXED_SCALE = 10**7  # 7 significant decimal digits retained
_MAX_ABS_INPUT = 1e11  # headroom so scaled values stay inside int64


def to_fixed(x: float) -> int:
    """Round-half-to-even of x * 10^7 as a 64-bit integer."""
    if not math.isfinite(x):
        raise ValueError("cannot convert non-finite value to fixed point")
    if abs(x) >= _MAX_ABS_INPUT:
        raise ValueError(f"|x| must be < {_MAX_ABS_INPUT:g} for fixed-point headroom")
    scaled = x * FIXED_SCALE
    # round-half-even at the integer boundary
    return int(np.rint(scaled))


def to_fixed_vector(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot convert non-finite values to fixed point")
    if np.any(np.abs(values) >= _MAX_ABS_INPUT):
        raise ValueError("values exceed fixed-point headroom")
    return np.rint(values * FIXED_SCALE).astype(np.int64)


def from_fixed(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64) / FIXED_SCALE


@dataclass(frozen=True)
class FixedPointSlice:
    lo: int
    hi: int
    values: np.ndarray  # int64, length hi - lo

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.int64))
        if self.hi - self.lo != len(self.values):
            raise ValueError("slice range does not match value count")


def make_witness(update_slices: list[np.ndarray], agg_slice: np.ndarray,
                 n_selected: int, tolerance_units: int = 1) -> bool:
    """Aggregation relation over fixed-point integers.

    Passes iff for every coordinate j,
    |n * agg[j] - sum_i update_i[j]| <= n * tolerance_units.
    """
    if n_selected < 1:
        raise ValueError("n_selected must be >= 1")
    if len(update_slices) != n_selected:
        raise ValueError("expected one slice per selected update")
    agg = np.asarray(agg_slice, dtype=np.int64)
    bound = 2**62 // n_selected
    if np.any(np.abs(agg) >= bound):
        raise ValueError("fixed-point values too large for safe summation")
    total = np.zeros(len(agg), dtype=np.int64)
    for s in update_slices:
        s = np.asarray(s, dtype=np.int64)
        if len(s) != len(agg):
            raise ValueError("update slice range mismatch")
        if np.any(np.abs(s) >= bound):
            raise ValueError("fixed-point values too large for safe summation")
        total += s
    resid = n_selected * agg - total
    return bool(np.all(np.abs(resid) <= n_selected * tolerance_units))


# ---------------------------------------------------------------------------
# slice assignment


@dataclass(frozen=True)
class SliceAssignment:
    arbitration_id: str
    z: int
    slices: tuple[tuple[int, int, int], ...]  # (server id, lo, hi)
    selected: tuple[int, ...]  # from the challenged server block

    def servers(self) -> set[int]:
        return {sid for sid, _, _ in self.slices}


def build_assignment(arbitration_id: str, dim: int, segment_size: int,
                     committee: tuple[int, ...], primary: int, seed: int,
                     selected: tuple[int, ...]) -> SliceAssignment:
    """Tile [0, dim) into ceil(dim/segment_size) slices and deal them
    round-robin over the committee, primary first, remaining servers in
    seeded-shuffle order.

    The aggregation's producer always receives a slice, so full-model
    tampering by the distributing primary is always attributable.  When the
    slice count is at least the committee size every server receives one.
    """
    if dim < 1 or segment_size < 1:
        raise ValueError("dim and segment_size must be >= 1")
    if primary not in committee:
        raise ValueError("primary must be a committee member")
    z = math.ceil(dim / segment_size)
    rest = [s for s in committee if s != primary]
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    rng.shuffle(rest)
    order = [primary] + rest
    slices = []
    for k in range(z):
        lo = k * segment_size
        hi = min(dim, (k + 1) * segment_size)
        slices.append((order[k % len(order)], lo, hi))
    return SliceAssignment(
        arbitration_id=arbitration_id, z=z, slices=tuple(slices), selected=selected
    )


# ---------------------------------------------------------------------------
# proof files


@dataclass(frozen=True)
class ProofFile:
    arbitration_id: str
    server_id: int
    lo: int
    hi: int
    witness_digest: bytes
    binding_tag: bytes

    def to_bytes(self) -> bytes:
        return (
            enc_str(self.arbitration_id)
            + enc_u32(self.server_id)
            + enc_u64(self.lo)
            + enc_u64(self.hi)
            + enc_bytes(self.witness_digest)
            + enc_bytes(self.binding_tag)
        )


def issue_proof_keys(seed: bytes) -> tuple[bytes, bytes]:
    """(proving key, verification key) pair for the reference backend.

    The reference scheme is a shared-secret MAC: servers hold the proving
    key, clients the verification key, and the two coincide.  An asymmetric
    backend can replace this behind the same prove/verify interface.
    """
    k_pro = hashlib.sha256(b"proving" + seed).digest()
    return k_pro, k_pro


def witness_digest_of(arbitration_id: str, lo: int, hi: int,
                      slice_fx: np.ndarray, passed: bool) -> bytes:
    payload = (
        enc_str(arbitration_id) + enc_u64(lo) + enc_u64(hi)
        + enc_i64_list(list(np.asarray(slice_fx, dtype=np.int64)))
        + (b"\x01" if passed else b"\x00")
    )
    return hashlib.sha256(payload).digest()


def binding_tag_of(k_pro: bytes, witness_digest: bytes, lo: int, hi: int,
                   server_id: int, arbitration_id: str) -> bytes:
    return hashlib.sha256(
        k_pro + witness_digest + enc_u64(lo) + enc_u64(hi)
        + enc_u32(server_id) + enc_str(arbitration_id)
    ).digest()


@dataclass
class ServerRoundData:
    """What a committee server retains for proving one round: the selected
    clients' update vectors (row-major) for the challenged aggregation."""

    updates: np.ndarray  # (n_selected, dim)

    @property
    def n_selected(self) -> int:
        return self.updates.shape[0]


class MissingRoundData(Exception):
    pass


def prove(state: ServerRoundData | None, arbitration_id: str, server_id: int,
          lo: int, hi: int, client_slice: np.ndarray, k_pro: bytes,
          tolerance_units: int = 1) -> ProofFile:
    """Honest proof generation over the client-provided slice.

    The witness is the fixed-point slice plus the relation verdict; a
    tampered slice yields a failing verdict, so the emitted commitment can
    never match the client's expectation of a passing one.
    """
    if state is None or state.updates.size == 0:
        raise MissingRoundData("server holds no data for the challenged round")
    slice_fx = to_fixed_vector(client_slice)
    update_slices = [to_fixed_vector(row[lo:hi]) for row in state.updates]
    passed = make_witness(update_slices, slice_fx, state.n_selected, tolerance_units)
    wd = witness_digest_of(arbitration_id, lo, hi, slice_fx, passed)
    tag = binding_tag_of(k_pro, wd, lo, hi, server_id, arbitration_id)
    return ProofFile(
        arbitration_id=arbitration_id, server_id=server_id, lo=lo, hi=hi,
        witness_digest=wd, binding_tag=tag,
    )


def forge_proof(arbitration_id: str, server_id: int, lo: int, hi: int,
                k_pro: bytes, filler: bytes = b"forged") -> ProofFile:
    """A forged proof with a fabricated witness commitment (test/attack aid)."""
    wd = hashlib.sha256(filler + enc_str(arbitration_id)).digest()
    tag = binding_tag_of(k_pro, wd, lo, hi, server_id, arbitration_id)
    return ProofFile(
        arbitration_id=arbitration_id, server_id=server_id, lo=lo, hi=hi,
        witness_digest=wd, binding_tag=tag,
    )


def verify_proof(proof: ProofFile, own_slice: np.ndarray, expected_server: int,
                 lo: int, hi: int, arbitration_id: str, k_ver: bytes) -> bool:
    """Client-side check: authentic binding for this slice and server, and a
    passing witness commitment over the client's own fixed-point slice."""
    if (proof.arbitration_id != arbitration_id or proof.server_id != expected_server
            or proof.lo != lo or proof.hi != hi):
        return False
    expect_tag = binding_tag_of(
        k_ver, proof.witness_digest, proof.lo, proof.hi,
        proof.server_id, proof.arbitration_id,
    )
    if proof.binding_tag != expect_tag:
        return False
    own_fx = to_fixed_vector(own_slice)
    expect_wd = witness_digest_of(arbitration_id, lo, hi, own_fx, passed=True)
    return proof.witness_digest == expect_wd


@dataclass(frozen=True)
class ArbitrationVerdict:
    arbitration_id: str
    per_server: dict[int, str]  # "pass" | "fail"
    flagged: frozenset[int]

    def to_json(self) -> dict:
        return {
            "arbitration_id": self.arbitration_id,
            "per_server": {str(k): v for k, v in sorted(self.per_server.items())},
            "flagged": sorted(self.flagged),
        }


def arbitrate(client_wg: np.ndarray, assignment: SliceAssignment,
              proofs: dict[tuple[int, int, int], ProofFile | None],
              k_ver: bytes) -> ArbitrationVerdict:
    """Verify one proof per assigned slice against the client's own model.

    ``proofs`` maps (server, lo, hi) to the returned proof, or None for a
    server that never responded within the budget.  A server fails if any
    of its slices fails; flagged is exactly the failing servers.
    """
    client_wg = np.asarray(client_wg, dtype=np.float64)
    results: dict[int, str] = {sid: "pass" for sid in assignment.servers()}
    for sid, lo, hi in assignment.slices:
        proof = proofs.get((sid, lo, hi))
        ok = proof is not None and verify_proof(
            proof, client_wg[lo:hi], sid, lo, hi, assignment.arbitration_id, k_ver
        )
        if not ok:
            results[sid] = "fail"
    flagged = frozenset(sid for sid, v in results.items() if v == "fail")
    return ArbitrationVerdict(
        arbitration_id=assignment.arbitration_id,
        per_server=results,
        flagged=flagged,
    )
