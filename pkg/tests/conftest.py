"""Shared fixtures: hand-built oracle meshes and small reference problems."""

import numpy as np
import pytest

from entrofv.mesh import (DIRICHLET, INTERIOR, NEUMANN, BOTTOM, LEFT, RIGHT,
                          TOP, BoundarySpec, Mesh, reference_mesh)


def build_two_cell_mesh() -> Mesh:
    """Unit square split at x = 0.5 into two rectangular cells.

    Edge table: 0 interior (tau = 2), 1 left Dirichlet (tau = 4), 2 right
    Dirichlet (tau = 4), 3..6 Neumann top/bottom halves.
    """
    cell_area = np.array([0.5, 0.5])
    cell_center = np.array([[0.25, 0.5], [0.75, 0.5]])
    edge_length = np.array([1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5])
    edge_d = np.array([0.5, 0.25, 0.25, 0.5, 0.5, 0.5, 0.5])
    edge_cells = np.array([[0, 1], [0, -1], [1, -1],
                           [0, -1], [1, -1], [0, -1], [1, -1]])
    edge_dcell = np.array([[0.25, 0.25], [0.25, np.nan], [0.25, np.nan],
                           [0.5, np.nan], [0.5, np.nan], [0.5, np.nan], [0.5, np.nan]])
    edge_tag = np.array([INTERIOR, DIRICHLET, DIRICHLET,
                         NEUMANN, NEUMANN, NEUMANN, NEUMANN], dtype=np.uint8)
    return Mesh(cell_area=cell_area, cell_center=cell_center,
                edge_length=edge_length, edge_d=edge_d, edge_cells=edge_cells,
                edge_dcell=edge_dcell, edge_tag=edge_tag, xi=0.5,
                domain_measure=1.0)


def build_single_cell_mesh() -> Mesh:
    """One unit cell with four Neumann edges (no Dirichlet boundary)."""
    return Mesh(cell_area=np.array([1.0]),
                cell_center=np.array([[0.5, 0.5]]),
                edge_length=np.ones(4),
                edge_d=np.full(4, 0.5),
                edge_cells=np.array([[0, -1]] * 4),
                edge_dcell=np.array([[0.5, np.nan]] * 4),
                edge_tag=np.full(4, NEUMANN, dtype=np.uint8),
                xi=1.0, domain_measure=1.0)


@pytest.fixture
def two_cell_mesh():
    return build_two_cell_mesh()


@pytest.fixture
def single_cell_mesh():
    return build_single_cell_mesh()


@pytest.fixture(scope="session")
def toy_boundary():
    return BoundarySpec(dirichlet=(LEFT, RIGHT), neumann=(BOTTOM, TOP))


@pytest.fixture(scope="session")
def mesh0(toy_boundary):
    return reference_mesh(0, toy_boundary)


@pytest.fixture(scope="session")
def mesh1(toy_boundary):
    return reference_mesh(1, toy_boundary)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
