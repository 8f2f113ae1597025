"""How much privacy does a DP-SGD run spend?

The accountant tracks Renyi divergence of the subsampled Gaussian at a grid
of orders, adds it up over steps and converts to (epsilon, delta).  This
script prints the budget of the reference configuration, the smallest
noise multiplier that keeps epsilon under 10, and how epsilon moves with
batch size and epochs.

    python demos/01_privacy_budget.py
"""

from dpdisparity import accountant as A

N, DELTA = 60000, 1e-6

eps, order = A.epsilon_and_order(N, 256, 0.8, 60, DELTA)
print(f"reference run (N={N}, b=256, z=0.8, 60 epochs): eps = {eps:.2f} at order {order}")

eps = A.epsilon_for_run(N, 32, 0.6, 30, DELTA)
print(f"small batches (b=32, z=0.6, 30 epochs):           eps = {eps:.2f}")

print("\nnoise multiplier vs epsilon for the reference run")
for z in (0.5, 0.6, 0.7, 0.8, 1.0, 1.5):
    eps = A.epsilon_for_run(N, 256, z, 60, DELTA)
    flag = "  <- under 10" if eps < 10 else ""
    print(f"  z={z:<4} eps={eps:8.2f}{flag}")

# Larger batches mean a larger sampling rate but fewer steps per epoch;
# at fixed z the sampling rate wins and epsilon grows.
print("\nbatch size vs epsilon (z=0.8, 60 epochs)")
for b in (64, 128, 256, 512, 1024):
    print(f"  b={b:<5} q={b / N:.5f} steps={60 * (N // b):<6} eps={A.epsilon_for_run(N, b, 0.8, 60, DELTA):.2f}")

print("\nepochs vs epsilon (b=256, z=0.8)")
for T in (1, 5, 15, 30, 60, 120):
    print(f"  T={T:<4} eps={A.epsilon_for_run(N, 256, 0.8, T, DELTA):.2f}")

# The full accountant table: which order gives the tightest bound.
curve = A.compose(A.rdp_curve(256 / N, 0.8), 60 * (N // 256))
rows = A.rdp_table(curve, DELTA)
best = min(rows, key=lambda r: r[2])
print("\norders near the optimum")
for a, rdp, e in rows:
    if abs(a - best[0]) <= 2:
        print(f"  alpha={a:<5} rdp={rdp:8.4f} eps={e:8.4f}{'  *' if a == best[0] else ''}")
