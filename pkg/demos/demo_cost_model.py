# Evaluates the closed-form cost oracles: retrieval compute, on-chain
# storage, broadcast bits, the collusion probability, and task latency.

from fllsim.cost_model import (
    CostParams,
    LatencyParams,
    baseline_table_bits,
    broadcast_bits,
    broadcast_savings_bits,
    collusion_attack_prob,
    collusion_safety_prob,
    index_compute_cost,
    index_crossover_threshold,
    latency_total,
    linear_compute_cost,
    onchain_block_bits,
)

# Default desk-scale network: 20 clients, 6 servers, 20 records per block.
p = CostParams(clients=20, tasks=10, stored_per_round=20, dim=424,
               n_buckets=64, groups=4, candidate_exponent=0.7)

print("retrieval compute (operation counts):")
print(f"  hash index : {index_compute_cost(p):,.0f}")
print(f"  linear scan: {linear_compute_cost(p):,.0f}")
print(f"  index pays off once stored knowledge exceeds "
      f"{index_crossover_threshold(2, 1):.0f} items (best M, groups)")

print("\non-chain storage per client block:")
print(f"  bucket ids          : {onchain_block_bits(p):,} bits (constant in tasks)")
for t in (1, 10, 50):
    pt = CostParams(clients=20, tasks=t, stored_per_round=20, dim=424,
                    n_buckets=64, groups=4)
    print(f"  similarity table t={t:2d}: {baseline_table_bits(pt):,} bits")

print("\nbroadcast of one client block to the other 25 nodes:")
print(f"  cost   : {broadcast_bits(p, 6):,} bits")
print(f"  savings: {broadcast_savings_bits(p, 6):,} bits vs similarity table")

print("\ncommittee collusion (independent compromise probability p):")
for s in (4, 6, 9):
    for prob in (0.05, 0.1, 0.2):
        safe = collusion_safety_prob(s, prob)
        attack = collusion_attack_prob(s, prob)
        print(f"  s={s} p={prob:.2f}: safety {safe:.4f}  attack {attack:.6f}")

print("\nper-task latency with 5 rounds and a 10 MB model at 50 MB/s:")
lp = LatencyParams(train_s=2.0, p2p_s=10e6 / 50e6, agg_s=0.05, block_s=0.1,
                   broadcast_s=0.02, knowledge_search_s=0.01)
print(f"  total: {latency_total(lp, 5):.2f} s")
