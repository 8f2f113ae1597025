"""Is it the clipping or the noise?

Four arms share data, initial weights and batch order:

    baseline        plain SGD
    clip_only       per-example clipping at S=1, no noise
    noise_only      Gaussian noise of the DP scale, no clipping (no guarantee)
    clip_and_noise  DP-SGD

Noise alone leaves class 8 intact and clipping alone costs it a little:
its large gradients are cut down to the size of everyone else's.  Together
they cost it the most, because the noise then drowns the few, already
clipped gradients of class 8.  How the loss splits between the two arms
varies with the seed at this scale.

    python demos/03_ablation.py                 (about a minute)
"""

import os

from dpdisparity import experiments as X
from dpdisparity.config import load_config

HERE = os.path.dirname(os.path.abspath(__file__))

cfg, _ = load_config(os.path.join(HERE, "desk.cfg"))
data = X.load_data(cfg)

arms = {m: X.run_arm(cfg, m, data) for m in ("baseline", "clip_only", "noise_only", "clip_and_noise")}
base = arms["baseline"].evaluation.accuracy

print("arm             epsilon   overall  class 8  gap    class-8 drop")
for mode, arm in arms.items():
    acc = arm.evaluation.accuracy
    eps = "-" if arm.epsilon is None else f"{arm.epsilon:.2f}"
    gap = max(acc.values()) - acc[8]
    print(f"{mode:<15} {eps:>7}  {arm.evaluation.overall:7.3f}  {acc[8]:7.3f}  {gap:5.3f}  {base[8] - acc[8]:6.3f}")
