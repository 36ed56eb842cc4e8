# Runs the full protocol twice on a compact network - once with defenses,
# once without - under label-flipping clients and a model-scaling server,
# and prints the round-by-round story.

import numpy as np

from fllsim import sim

attacks = dict(
    malicious_clients={0: sim.ClientAttack("label_flip", 1.0),
                       1: sim.ClientAttack("label_flip", 1.0)},
    malicious_servers={0: sim.ServerFault("tamper_scale", 10.0)},
)
base = dict(seed=17, n_clients=10, n_servers=6, n_tasks=4, rounds_per_task=5,
            features=12, n_classes=12, samples_per_class=15, train_epochs=4,
            select_count=8)  # tolerate the two poisoning clients

for label, scenario in [
    ("defended", sim.Scenario(**base, **attacks)),
    ("defenses off", sim.disable_defenses(sim.Scenario(**base, **attacks))),
]:
    print(f"=== {label} ===")
    metrics, report, state = sim.run_scenario(scenario)
    for m in metrics:
        flags = f" flagged={list(m.arbitration_flagged)}" if m.arbitration_flagged else ""
        tamper = " [distribution tampered]" if m.distribution_tampered else ""
        print(f"  t{m.task} r{m.round}: acc {m.mean_accuracy:.3f} "
              f"(honest {m.honest_mean_accuracy:.3f}) primary {m.primary}"
              f"{tamper}{flags}")
    print(f"  final mean accuracy : {metrics[-1].mean_accuracy:.4f}")
    print(f"  chain height        : {state.ledger.height()}"
          f" (verify: {'ok' if state.ledger.verify_chain() is None else 'BROKEN'})")
    print(f"  excluded servers    : {sorted(state.excluded_servers) or 'none'}")
    print(f"  per-block knowledge : {report['measured']['knowledge_bits_per_client_block_max']} bits"
          f" (formula {report['formulas']['onchain_block_bits']})")
    print()
