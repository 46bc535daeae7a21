"""Finite-strain gradient damage-plasticity FE toolkit with POD/DEIM model
reduction and Ramm-type arc-length continuation.

Layout:
    numerics  - linear algebra wrappers, SNP1 matrix file format, hashing
    meshing   - hex8 mesh type, JSON IO, structured generators
    material  - two-surface damage-plasticity point model (batched)
    fem       - element kernels, assembly, boundary conditions, field output
    solver    - Newton and arc-length continuation on full systems
    mor       - POD basis, DEIM operators, reduced online systems, artifacts
    postproc  - path/error metrics, speedup tables, sweep CSV
    cli       - offline/online command-line pipeline
"""

__version__ = "0.1.0"
