"""How small is too small?

Repeat the baseline / DP-SGD comparison with class 8 cut to 50, 100 and
500 training examples.  The command-line equivalent is

    dpdisparity sweep --config demos/sweep_class_size.cfg

which writes one run directory per value plus summary.csv.

    python demos/05_class_size_sweep.py         (about a minute)
"""

import os

from dpdisparity import experiments as X
from dpdisparity.config import load_config

HERE = os.path.dirname(os.path.abspath(__file__))

print("class-8 size  eps    baseline c8  DP c8   DP gap")
for keep in (50, 100, 500):
    cfg, _ = load_config(os.path.join(HERE, "desk.cfg"), [f"imbalance.keep={keep}"])
    data = X.load_data(cfg)
    base = X.run_arm(cfg, "baseline", data).evaluation.accuracy
    dp_arm = X.run_arm(cfg, "clip_and_noise", data)
    dp = dp_arm.evaluation.accuracy
    print(f"{keep:>12}  {dp_arm.epsilon:5.2f}  {base[8]:11.3f}  {dp[8]:6.3f}  {max(dp.values()) - dp[8]:6.3f}")
