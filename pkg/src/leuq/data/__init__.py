"""Navier-Stokes trajectory generation, storage and windowing."""

from .dataset import (
    BundledWindow,
    SolverFailure,
    TrajectorySet,
    generate_dataset,
    load_dataset,
    make_bundled_windows,
    read_header,
    save_dataset,
    stack_windows,
    window_count,
)
from .navier_stokes import (
    NavierStokes2D,
    SolverConfig,
    SpectralGrid,
    forcing_field,
    gaussian_random_field,
    kinetic_energy,
    solve_navier_stokes,
)

__all__ = [
    "BundledWindow", "NavierStokes2D", "SolverConfig", "SolverFailure", "SpectralGrid", "TrajectorySet",
    "forcing_field", "gaussian_random_field", "generate_dataset", "kinetic_energy", "load_dataset",
    "make_bundled_windows", "read_header", "save_dataset", "solve_navier_stokes", "stack_windows", "window_count",
]
