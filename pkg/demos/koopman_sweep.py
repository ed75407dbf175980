"""EDMD on an irrational torus rotation and the three-term error decomposition.

    python demos/koopman_sweep.py
"""
import math

import numpy as np

from worldprobe.koopman import TorusRotation, edmd_fit, error_decomposition, fourier_torus, k_step, project

alpha = math.sqrt(2) - 1
torus = TorusRotation(alpha)
x = torus.trajectory(2001, 0.1)
basis = fourier_torus(1)  # 1, cos 2πx, sin 2πx
est = edmd_fit(x[:-1], x[1:], basis)
np.set_printoptions(precision=4, suppress=True)
print("fitted Koopman matrix:\n", est.A)

# Predict cos 2πx five steps ahead by propagating its coefficients.
c = project(np.cos(2 * np.pi * x[:-1]), basis, x[:-1])
pts = np.array([0.0, 0.25, 0.6])
print("predicted:", basis(pts) @ k_step(est, c, 5))
print("truth:    ", np.cos(2 * np.pi * (pts + 5 * alpha)))

# cos 4πx is outside the span of the m = 1 basis: the projection error (term3)
# stays at sqrt(1/2) however much data we add, while the estimation error falls.
for g, label in ((lambda t: np.cos(2 * np.pi * t), "cos 2πx"), (lambda t: np.cos(4 * np.pi * t), "cos 4πx")):
    print(label)
    for r in error_decomposition(torus, [3], [100, 1000, 10_000], g, obs_noise=0.1):
        print(f"  M={r.M:>6}  term1={r.term1:.2e}  term3={r.term3:.3f}  total={r.total:.3f} <= {r.bound:.3f}")
