"""Fokker-Planck morphing on grids and spherical point clouds."""
