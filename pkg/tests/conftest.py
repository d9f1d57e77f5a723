"""Shared fixtures: small meshes, cached discretizations and the locking-prone reference."""
from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from hrfem.assembly import solve_primal
from hrfem.elasticity import LameParams
from hrfem.local_fe import CellGeometry, sym_voigt
from hrfem.mesh import Mesh, generate_structured, mesh_from_spec, refine_uniform
from hrfem.quadrature import quadrature
from hrfem.schemes import DiscreteSolution, Discretization


def jiggle(mesh: Mesh, amount: float, seed: int) -> Mesh:
    """Move interior vertices randomly by up to ``amount`` times the local size."""
    rng = np.random.default_rng(seed)
    v = mesh.vertices.copy()
    iv = mesh.interior_vertices
    step = amount * mesh.diameters.min()
    v[iv] += rng.uniform(-step, step, size=(len(iv), 2))
    return Mesh(v, mesh.triangles)


@pytest.fixture(scope="session")
def cc1() -> Mesh:
    return generate_structured(1, "crisscross")


@pytest.fixture(scope="session")
def cc2() -> Mesh:
    return generate_structured(2, "crisscross")


@pytest.fixture(scope="session")
def disc1(cc1) -> Discretization:
    return Discretization(cc1)


@pytest.fixture(scope="session")
def disc2(cc2) -> Discretization:
    return Discretization(cc2)


@pytest.fixture(scope="session")
def disc2_jiggled(cc2) -> Discretization:
    return Discretization(jiggle(refine_uniform(cc2), 0.2, 7))


# -- locking-prone reference: conforming P1 in both displacement components ---

def _p1p1_solve(mesh: Mesh, params: LameParams, load) -> DiscreteSolution:
    """Primal solve with hat functions in both components and load ``-(f, v)``.

    This is the KS primal scheme with the Crouzeix-Raviart component replaced
    by conforming P1, which is known to lock as lambda grows.
    """
    geom = CellGeometry.from_mesh(mesh)
    nt = mesh.nt
    iv = mesh.interior_vertices
    n = len(iv)
    vmap = np.full(mesh.nv, -1)
    vmap[iv] = np.arange(n)
    first = vmap[mesh.triangles]
    l2g = np.concatenate([first, np.where(first >= 0, first + n, -1)], axis=1)
    rows = np.arange(6 * nt).reshape(nt, 6)
    mask = l2g >= 0
    P = sp.csr_matrix((np.ones(mask.sum()), (rows[mask], l2g[mask])), shape=(6 * nt, 2 * n))

    grad = np.zeros((nt, 6, 2, 2))
    grad[:, 0:3, 0, :] = geom.grad_bary
    grad[:, 3:6, 1, :] = geom.grad_bary

    rule = quadrature(10)
    fx = load(geom.physical(rule), params)
    w = geom.weights(rule)
    local = np.concatenate([np.einsum("nq,nq,qk->nk", w, fx[..., c], rule.points) for c in (0, 1)], axis=1)
    u = solve_primal(P, sym_voigt(grad), geom, params, -(P.T @ local.ravel()))

    loc = (P @ u).reshape(nt, 6)
    g1 = np.einsum("nk,nkd->nd", loc[:, 0:3], geom.grad_bary)
    g2 = np.einsum("nk,nkd->nd", loc[:, 3:6], geom.grad_bary)
    p1 = np.column_stack([loc[:, 0:3].mean(1), loc[:, 3:6].mean(1), g1[:, 0], g1[:, 1], g2[:, 0], g2[:, 1]])
    return DiscreteSolution("p1p1", mesh, params, None, "p1", p1, 2 * n)


@pytest.fixture(scope="session")
def locking_reference():
    """Solver callable ``(mesh, params, load) -> DiscreteSolution`` of the P1-P1 reference."""
    return _p1p1_solve


@pytest.fixture(scope="session")
def crisscross_levels():
    """crisscross:4 and its first two uniform refinements."""
    meshes = [mesh_from_spec("crisscross:4")]
    for _ in range(2):
        meshes.append(refine_uniform(meshes[-1]))
    return meshes
