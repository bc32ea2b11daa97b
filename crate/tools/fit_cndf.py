#!/usr/bin/env python3
"""Fit the degree-9 polynomial used for the cumulative normal distribution.

The approximation is Phi(D_CORE * u) ~= 0.5 + A1 * u + c(u) for u in [-1, 1],
where c(u) = a3*T3(u) + a5*T5(u) + a7*T7(u) + a9*T9(u) is the higher-order
Chebyshev correction the device evaluates with one fully-connected
instruction. The correction coefficients travel through 8-bit quantization,
so they are snapped to the quantization grid of the declared coefficient
range and locally searched (with A1 refit in closed form per candidate) for
the smallest max error.

Regenerates the constants in crates/reef-core/src/kernels/blackscholes.rs.
"""

import itertools
import math

import numpy as np

D_CORE = 3.0
COEFF_RANGE = 0.15  # declared range of the correction coefficients

u = np.linspace(-1.0, 1.0, 4001)
phi = 0.5 * (1.0 + np.vectorize(math.erf)(D_CORE * u / math.sqrt(2.0)))
target = phi - 0.5  # odd in u

cheb = np.polynomial.chebyshev.chebvander(u, 9)
t1 = cheb[:, 1]
basis = cheb[:, 3::2]  # T3, T5, T7, T9

full = np.column_stack([t1, basis])
coeffs, *_ = np.linalg.lstsq(full, target, rcond=None)
a1_seed, high_seed = coeffs[0], coeffs[1:]

code_scale = 255.0 / (2.0 * COEFF_RANGE)
base_codes = np.round(high_seed * code_scale).astype(int)

best = None
for deltas in itertools.product(range(-2, 3), repeat=4):
    codes = base_codes + np.array(deltas)
    c = basis @ (codes / code_scale)
    resid = target - c
    # Closed-form refit of the host-side linear term.
    a1 = float(t1 @ resid / (t1 @ t1))
    err = np.max(np.abs(a1 * t1 + c - target))
    if best is None or err < best[0]:
        best = (err, codes.copy(), a1)

err, codes, a1 = best
snapped = codes / code_scale
print(f"D_CORE = {D_CORE}")
print(f"COEFF_RANGE = {COEFF_RANGE}")
print(f"A1 (host, f64) = {a1!r}")
print(f"correction codes (offset from zero point): {codes}")
print("snapped correction coefficients (T3, T5, T7, T9):")
for c in snapped:
    print(f"    {c!r},")
print(f"max |approx - Phi| over the core: {err:.6e}")
print(f"tail clamp error 1 - Phi(D_CORE): {1 - 0.5*(1+math.erf(D_CORE/math.sqrt(2))):.6e}")
