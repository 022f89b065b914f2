"""Finding the largest stable time step on a sequence of meshes.

For each mesh spacing a grid of time steps is probed, then the boundary
between stable and unstable runs is bisected. The critical step grows
linearly with the spacing. The fitted slope is compared with the much
more conservative theoretical bound.
"""
from fpsi import PhysicalParams, stability_sweep

result = stability_sweep(PhysicalParams(), dx_list=[0.05, 0.1 / 3, 0.025],
                         dt_grid=[2e-5, 4e-5, 8e-5, 1.6e-4, 3.2e-4], t_end=6e-3, aspect=4, n_bisect=6)

for line in result.lines:
    print(f"dx = {line.dx:.4f} cm -> critical dt = {line.dt_critical:.3e} s")
print(f"\nslope through the origin: {result.slope:.3e} s/cm (R^2 = {result.r2:.4f})")
print(f"that is {result.slope / 3.5e-7:.0f} times the theoretical sufficient slope 3.5e-7")
