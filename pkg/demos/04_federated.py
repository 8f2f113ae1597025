"""Differential privacy in federated averaging.

100 participants train a small MLP.  Two of them hold all examples of
class 4; the other 98 share classes 0-3.  Each round 20 participants are
sampled, their model updates clipped to norm 0.5 and averaged, and the
server adds Gaussian noise.  The rare participants are rarely sampled and
their clipped updates are swamped by the noise, so the "rare" group pays
for privacy while the "majority" group hardly notices.

The reported epsilon treats a whole participant as the unit of privacy.

    python demos/04_federated.py                (a few seconds)
"""

import os

from dpdisparity import audit
from dpdisparity import experiments as X
from dpdisparity.config import load_config

HERE = os.path.dirname(os.path.abspath(__file__))

cfg, _ = load_config(os.path.join(HERE, "fed_two_group.cfg"))
res = X.run_fed(cfg)

rep = audit.disparity(res.plain_eval, res.dp_eval)
print(f"participants: {res.group_sizes}, rounds: {res.config.rounds}, per round: {res.config.per_round}")
print(f"participant-level budget: eps = {res.epsilon:.2f} at delta = {cfg['dp.delta']}")
print("\ngroup      FedAvg   DP-FedAvg  drop")
for g, b, d, drop in rep.rows():
    print(f"{g:<9}  {b:6.3f}   {d:8.3f}  {drop:5.3f}")

print("\nrare-group accuracy over training (every 10 rounds)")
for r in range(0, len(res.dp_trace.group_accuracy), 10):
    print(f"  round {r:>3}: FedAvg {res.plain_trace.group_accuracy[r]['rare']:.3f}"
          f"  DP {res.dp_trace.group_accuracy[r]['rare']:.3f}")
