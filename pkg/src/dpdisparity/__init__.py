"""Differentially private training and its uneven cost across groups.

Modules: ``numeric_core`` (seeded randomness, checked vector ops),
``model`` (small MLP/convnet with per-example gradients), ``dp_optimizer``
(DP-SGD and ablation modes), ``accountant`` (Renyi DP for the sampled
Gaussian), ``fed_sim`` (DP federated averaging), ``data_harness`` (IDX and
synthetic data), ``audit`` (per-group accuracy and disparity) and ``cli``.
"""

__version__ = "0.1.0"
