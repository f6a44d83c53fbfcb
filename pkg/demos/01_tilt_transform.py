"""How a beam tilt turns aberrations into a measurable image shift."""

import numpy as np

from tiltopt import (
    AberrationVector,
    build_tilt_polynomial_table,
    enumerate_basis,
    observation_matrix,
    phase_plate_grid,
    tilt_transform,
    wave_aberration_phase,
)

basis = enumerate_basis(4)
print("real coefficient slots:", basis.real_dim)
print(" ".join(basis.slot_labels))

# 20 nm defocus, 5 nm astigmatism and 300 nm coma (meters)
c = AberrationVector.from_dict(
    basis, {(2, 0): 20e-9, (2, 2): 5e-9 * np.exp(0.3j), (3, 1): 300e-9 * np.exp(-1.1j)}
)

for mrad in (0.0, 1.0, 3.0, 5.0):
    t = np.array([mrad * 1e-3, 0.0])
    shift = tilt_transform(c, t).as_complex()[0]
    print(f"tilt {mrad:3.1f} mrad -> image shift {shift.real * 1e12:8.2f} + {shift.imag * 1e12:8.2f}i pm")

# the shift is linear in the coefficients: C(theta) c reproduces it
table = build_tilt_polynomial_table(basis)
theta = np.array([2e-3, -1e-3])
print("C(theta) c    :", observation_matrix(table, theta) @ c.values)
print("transform c11 :", tilt_transform(c, theta).values[:2])

# wave aberration phase at a few spatial frequencies, 300 kV
wavelength = 1.97e-12
for g in (0.0, 1e9, 2e9 * np.exp(0.5j)):
    print(f"chi(|g| = {abs(g):.1e} 1/m) = {wave_aberration_phase(c, g, wavelength):+.3f} rad")

plate = phase_plate_grid(c, wavelength, 2e9, 65)
print("phase plate grid", plate.shape, "range", plate.min().round(2), plate.max().round(2))
