# Demonstrates the sliced aggregation audit: fixed-point witnesses, proof
# files bound to slice and key, and verdicts that localize misbehavior.

import numpy as np

from fllsim.arbitration import (
    arbitrate,
    build_assignment,
    forge_proof,
    issue_proof_keys,
    prove,
    ServerRoundData,
    to_fixed,
)

rng = np.random.default_rng(2)
dim, n_selected = 4000, 16
committee = (0, 1, 2, 3, 4, 5)
k_pro, k_ver = issue_proof_keys(b"demo")

updates = rng.standard_normal((n_selected, dim))
w_g = updates.mean(axis=0)
state = ServerRoundData(updates=updates)

print("fixed-point conversion keeps 7 decimal digits:")
for x in (1.0, 0.1234567891, -2.5e-4):
    print(f"  {x!r:>15} -> {to_fixed(x)}")

# --------------------------------------------------------------------------
# Case 1: honest committee, honest model. Every slice passes.
# --------------------------------------------------------------------------

assignment = build_assignment("arb-1", dim, 1000, committee, primary=2, seed=7,
                              selected=tuple(range(n_selected)))
print(f"\n{assignment.z} slices dealt to servers:",
      [sid for sid, _, _ in assignment.slices])

proofs = {
    (sid, lo, hi): prove(state, "arb-1", sid, lo, hi, w_g[lo:hi], k_pro)
    for sid, lo, hi in assignment.slices
}
verdict = arbitrate(w_g, assignment, proofs, k_ver)
print("honest run flagged:", sorted(verdict.flagged) or "nobody")

# --------------------------------------------------------------------------
# Case 2: the distributing primary scaled the model by 10. Every slice of
# the received copy fails its witness, so the primary (always dealt a
# slice) is flagged.
# --------------------------------------------------------------------------

tampered = 10.0 * w_g
proofs = {
    (sid, lo, hi): prove(state, "arb-1", sid, lo, hi, tampered[lo:hi], k_pro)
    for sid, lo, hi in assignment.slices
}
verdict = arbitrate(tampered, assignment, proofs, k_ver)
print("scaled distribution flagged:", sorted(verdict.flagged),
      "(primary 2 included:", 2 in verdict.flagged, ")")

# --------------------------------------------------------------------------
# Case 3: one server forges its proof (or copies a neighbor's): the binding
# tag covers the slice range and server id, so only the forger is flagged.
# --------------------------------------------------------------------------

proofs = {
    (sid, lo, hi): prove(state, "arb-1", sid, lo, hi, w_g[lo:hi], k_pro)
    for sid, lo, hi in assignment.slices
}
forger_sid, lo, hi = assignment.slices[1]
proofs[(forger_sid, lo, hi)] = forge_proof("arb-1", forger_sid, lo, hi, k_pro)
verdict = arbitrate(w_g, assignment, proofs, k_ver)
print("forged proof flagged:", sorted(verdict.flagged))
