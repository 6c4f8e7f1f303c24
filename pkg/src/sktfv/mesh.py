"""Admissible finite-volume meshes in one and two space dimensions.

A mesh stores its geometry as flat numpy arrays.  Interior edges come first in
the edge arrays, boundary edges after them; ``edge_cells[e, 1] == -1`` marks a
boundary edge.  The cell point of a triangle is its circumcenter, so the
segment between two neighbouring cell points is orthogonal to their common
edge.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

ORTHOGONALITY_TOL = 1e-10


class MeshError(ValueError):
    """Raised for invalid input geometry or a non-admissible mesh."""


@dataclass(frozen=True)
class Cell:
    id: int
    center: np.ndarray
    measure: float
    edge_ids: tuple


@dataclass(frozen=True)
class Edge:
    id: int
    cells: tuple  # (K, L) for interior edges, (K,) on the boundary
    measure: float
    distance: float
    transmissibility: float
    normal_from_K: np.ndarray
    dual_measure: float

    @property
    def kind(self) -> str:
        return "interior" if len(self.cells) == 2 else "boundary"


@dataclass(frozen=True, eq=False)
class Mesh:
    dimension: int
    cell_centers: np.ndarray  # (N, d)
    cell_measures: np.ndarray  # (N,)
    edge_cells: np.ndarray  # (E, 2), -1 in column 1 for boundary edges
    edge_measures: np.ndarray  # m(sigma); 1 in 1D
    edge_distances: np.ndarray  # d_sigma
    transmissibilities: np.ndarray  # tau_sigma = m(sigma) / d_sigma
    edge_normals: np.ndarray  # (E, d), unit normal pointing out of edge_cells[:, 0]
    half_dual_measures: np.ndarray  # (E, 2) measures of the K- and L-halves of T_{K,sigma}
    cell_edge_distances: np.ndarray  # (E, 2) d(x_K, sigma), d(x_L, sigma)
    n_interior: int
    domain_measure: float
    zeta: float
    vertices: np.ndarray | None = None  # (V, 2) for 2D meshes, (V, 1) in 1D
    cell_vertices: np.ndarray | None = None  # (N, k) vertex ids per cell, VTK ordering
    edge_vertices: np.ndarray | None = None  # (E, 2)
    kind: str = "generic"
    meta: dict = field(default_factory=dict)

    @property
    def n_cells(self) -> int:
        return len(self.cell_measures)

    @property
    def n_edges(self) -> int:
        return len(self.edge_measures)

    @property
    def interior(self) -> slice:
        return slice(0, self.n_interior)

    @property
    def dual_measures(self) -> np.ndarray:
        return self.half_dual_measures.sum(axis=1)

    @cached_property
    def cell_edges(self) -> list:
        out = [[] for _ in range(self.n_cells)]
        for e, (k, l) in enumerate(self.edge_cells):
            out[k].append(e)
            if l >= 0:
                out[l].append(e)
        return [tuple(ids) for ids in out]

    @cached_property
    def incidence(self) -> tuple:
        """Sparse (N, E_int) incidence matrices of the K and L sides of interior edges."""
        e = np.arange(self.n_interior)
        K = self.edge_cells[: self.n_interior, 0]
        L = self.edge_cells[: self.n_interior, 1]
        shape = (self.n_cells, self.n_interior)
        SK = sparse.csr_matrix((np.ones(len(e)), (K, e)), shape=shape)
        SL = sparse.csr_matrix((np.ones(len(e)), (L, e)), shape=shape)
        return SK, SL, (SK - SL).tocsr()

    @cached_property
    def is_chain(self) -> bool:
        """True when interior edge e joins cells e and e+1 (banded 1D ordering)."""
        K = self.edge_cells[: self.n_interior, 0]
        L = self.edge_cells[: self.n_interior, 1]
        e = np.arange(self.n_interior)
        return bool(self.n_interior == self.n_cells - 1 and np.all(K == e) and np.all(L == e + 1))

    def cell(self, k: int) -> Cell:
        return Cell(int(k), self.cell_centers[k].copy(), float(self.cell_measures[k]),
                    self.cell_edges[k])

    def edge(self, e: int) -> Edge:
        k, l = (int(c) for c in self.edge_cells[e])
        return Edge(
            id=int(e),
            cells=(k, l) if l >= 0 else (k,),
            measure=float(self.edge_measures[e]),
            distance=float(self.edge_distances[e]),
            transmissibility=float(self.transmissibilities[e]),
            normal_from_K=self.edge_normals[e].copy(),
            dual_measure=float(self.half_dual_measures[e].sum()),
        )

    def orthogonality_residual(self) -> float:
        """Largest |angle - pi/2| between x_L - x_K and an interior edge (2D), else 0."""
        if self.dimension == 1 or self.n_interior == 0:
            return 0.0
        ev = self.edge_vertices[: self.n_interior]
        t = self.vertices[ev[:, 1]] - self.vertices[ev[:, 0]]
        t /= np.linalg.norm(t, axis=1)[:, None]
        c = self.edge_cells[: self.n_interior]
        s = self.cell_centers[c[:, 1]] - self.cell_centers[c[:, 0]]
        s /= np.linalg.norm(s, axis=1)[:, None]
        return float(np.max(np.abs(np.arcsin(np.clip(np.abs((t * s).sum(axis=1)), 0, 1)))))


def regularity_zeta(mesh: Mesh) -> float:
    """min over (K, sigma in E_K) of d(x_K, sigma) / d_sigma."""
    ratios = [mesh.cell_edge_distances[:, 0] / mesh.edge_distances]
    inner = mesh.n_interior
    ratios.append(mesh.cell_edge_distances[:inner, 1] / mesh.edge_distances[:inner])
    return float(np.min(np.concatenate(ratios)))


def _finish(mesh_kwargs: dict) -> Mesh:
    proto = Mesh(zeta=np.nan, **mesh_kwargs)
    zeta = regularity_zeta(proto)
    if not zeta > 0:
        raise MeshError(f"regularity constant zeta={zeta} is not positive")
    mesh = Mesh(zeta=zeta, **mesh_kwargs)
    total = mesh.cell_measures.sum()
    if abs(total - mesh.domain_measure) > 1e-12 * mesh.domain_measure:
        raise MeshError(f"cell measures sum to {total}, domain measure is {mesh.domain_measure}")
    if mesh.orthogonality_residual() > ORTHOGONALITY_TOL:
        raise MeshError("mesh violates the orthogonality condition")
    return mesh


def build_interval_mesh(a: float, b: float, n_cells: int) -> Mesh:
    """Uniform mesh of (a, b).  Edges have unit measure, so tau = 1/h."""
    if not a < b:
        raise MeshError(f"invalid interval ({a}, {b})")
    if n_cells < 2:
        raise MeshError("an interval mesh needs at least two cells")
    h = (b - a) / n_cells
    nodes = np.linspace(a, b, n_cells + 1)
    centers = 0.5 * (nodes[:-1] + nodes[1:])
    k = np.arange(n_cells - 1)
    edge_cells = np.vstack([np.column_stack([k, k + 1]), [[0, -1], [n_cells - 1, -1]]])
    n_edges = len(edge_cells)
    dist = np.full(n_edges, h)
    dist[-2:] = 0.5 * h
    normals = np.ones((n_edges, 1))
    normals[-2] = -1.0
    cell_edge = np.column_stack([np.full(n_edges, 0.5 * h), np.full(n_edges, 0.5 * h)])
    cell_edge[-2:, 1] = np.nan
    half = np.where(np.isnan(cell_edge), 0.0, cell_edge)
    return _finish(dict(
        dimension=1,
        cell_centers=centers[:, None],
        cell_measures=np.full(n_cells, h),
        edge_cells=edge_cells,
        edge_measures=np.ones(n_edges),
        edge_distances=dist,
        transmissibilities=1.0 / dist,
        edge_normals=normals,
        half_dual_measures=half,
        cell_edge_distances=cell_edge,
        n_interior=n_cells - 1,
        domain_measure=b - a,
        vertices=nodes[:, None],
        cell_vertices=np.column_stack([np.arange(n_cells), np.arange(1, n_cells + 1)]),
        edge_vertices=np.column_stack([np.r_[k + 1, 0, n_cells]] * 2),
        kind="interval",
        meta={"a": a, "b": b, "n_cells": n_cells},
    ))


def build_rectangle_mesh(x_range, y_range, nx: int, ny: int) -> Mesh:
    """Structured nx-by-ny mesh of a rectangle; cell k = i + nx*j."""
    (x0, x1), (y0, y1) = x_range, y_range
    if not (x0 < x1 and y0 < y1):
        raise MeshError(f"degenerate rectangle {x_range} x {y_range}")
    if nx < 2 or ny < 2:
        raise MeshError("a rectangle mesh needs nx, ny >= 2")
    hx, hy = (x1 - x0) / nx, (y1 - y0) / ny
    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    I, J = I.ravel(), J.ravel()
    cid = lambda i, j: i + nx * j  # noqa: E731
    vid = lambda i, j: i + (nx + 1) * j  # noqa: E731
    centers = np.column_stack([x0 + (I + 0.5) * hx, y0 + (J + 0.5) * hy])

    cells, meas, dist, normals, verts, cdist = [], [], [], [], [], []

    def add(K, L, m, d, nrm, v, dk, dl):
        cells.append(np.column_stack([K, L]))
        meas.append(np.full(len(K), m))
        dist.append(np.full(len(K), d))
        normals.append(np.tile(nrm, (len(K), 1)))
        verts.append(v)
        cdist.append(np.column_stack([np.full(len(K), dk), np.full(len(K), dl)]))

    iv, jv = np.meshgrid(np.arange(nx - 1), np.arange(ny), indexing="xy")
    iv, jv = iv.ravel(), jv.ravel()
    add(cid(iv, jv), cid(iv + 1, jv), hy, hx, [1.0, 0.0],
        np.column_stack([vid(iv + 1, jv), vid(iv + 1, jv + 1)]), hx / 2, hx / 2)
    ih, jh = np.meshgrid(np.arange(nx), np.arange(ny - 1), indexing="xy")
    ih, jh = ih.ravel(), jh.ravel()
    add(cid(ih, jh), cid(ih, jh + 1), hx, hy, [0.0, 1.0],
        np.column_stack([vid(ih, jh + 1), vid(ih + 1, jh + 1)]), hy / 2, hy / 2)
    n_interior = sum(len(c) for c in cells)
    none_y, none_x = np.full(ny, -1), np.full(nx, -1)
    jj, ii = np.arange(ny), np.arange(nx)
    add(cid(0, jj), none_y, hy, hx / 2, [-1.0, 0.0],
        np.column_stack([vid(0, jj), vid(0, jj + 1)]), hx / 2, np.nan)
    add(cid(nx - 1, jj), none_y, hy, hx / 2, [1.0, 0.0],
        np.column_stack([vid(nx, jj), vid(nx, jj + 1)]), hx / 2, np.nan)
    add(cid(ii, 0), none_x, hx, hy / 2, [0.0, -1.0],
        np.column_stack([vid(ii, 0), vid(ii + 1, 0)]), hy / 2, np.nan)
    add(cid(ii, ny - 1), none_x, hx, hy / 2, [0.0, 1.0],
        np.column_stack([vid(ii, ny), vid(ii + 1, ny)]), hy / 2, np.nan)

    edge_cells = np.vstack(cells)
    m = np.concatenate(meas)
    d = np.concatenate(dist)
    cd = np.vstack(cdist)
    vx, vy = np.meshgrid(np.linspace(x0, x1, nx + 1), np.linspace(y0, y1, ny + 1), indexing="xy")
    quads = np.column_stack([vid(I, J), vid(I + 1, J), vid(I + 1, J + 1), vid(I, J + 1)])
    return _finish(dict(
        dimension=2,
        cell_centers=centers,
        cell_measures=np.full(nx * ny, hx * hy),
        edge_cells=edge_cells,
        edge_measures=m,
        edge_distances=d,
        transmissibilities=m / d,
        edge_normals=np.vstack(normals),
        half_dual_measures=0.5 * m[:, None] * np.nan_to_num(cd),
        cell_edge_distances=cd,
        n_interior=n_interior,
        domain_measure=(x1 - x0) * (y1 - y0),
        vertices=np.column_stack([vx.ravel(), vy.ravel()]),
        cell_vertices=quads,
        edge_vertices=np.vstack(verts),
        kind="rectangle",
        meta={"x_range": list(x_range), "y_range": list(y_range), "nx": nx, "ny": ny},
    ))


def _circumcenters(P: np.ndarray) -> np.ndarray:
    a, b, c = P[:, 0], P[:, 1], P[:, 2]
    ba, ca = b - a, c - a
    d = 2.0 * (ba[:, 0] * ca[:, 1] - ba[:, 1] * ca[:, 0])
    nb, nc = (ba**2).sum(1), (ca**2).sum(1)
    ux = (ca[:, 1] * nb - ba[:, 1] * nc) / d
    uy = (ba[:, 0] * nc - ca[:, 0] * nb) / d
    return a + np.column_stack([ux, uy])


def import_triangulation(vertices, triangles) -> Mesh:
    """Build a finite-volume mesh from a conforming triangulation.

    Cell points are circumcenters.  Every circumcenter has to lie strictly on
    the inner side of each edge of its triangle (all triangles acute);
    otherwise d(x_K, sigma) <= 0 somewhere and the mesh is rejected.
    """
    X = np.asarray(vertices, dtype=float)
    T = np.asarray(triangles, dtype=int)
    if X.ndim != 2 or X.shape[1] != 2 or T.ndim != 2 or T.shape[1] != 3:
        raise MeshError("expected (V, 2) vertices and (T, 3) triangles")
    if T.min() < 0 or T.max() >= len(X):
        raise MeshError("triangle refers to a missing vertex")
    P = X[T]
    cross = (P[:, 1, 0] - P[:, 0, 0]) * (P[:, 2, 1] - P[:, 0, 1]) - (
        P[:, 1, 1] - P[:, 0, 1]) * (P[:, 2, 0] - P[:, 0, 0])
    scale = np.max(np.ptp(X, axis=0))
    if np.any(np.abs(cross) <= 1e-14 * scale**2):
        raise MeshError("degenerate triangle (collinear vertices)")
    T = np.where((cross < 0)[:, None], T[:, [0, 2, 1]], T)
    P = X[T]
    area = 0.5 * np.abs(cross)
    cc = _circumcenters(P)

    # local edge j is opposite to local vertex j
    local = np.array([[1, 2], [2, 0], [0, 1]])
    ev = np.sort(T[:, local].reshape(-1, 2), axis=1)
    owner = np.repeat(np.arange(len(T)), 3)
    opposite = T[:, [0, 1, 2]].reshape(-1)
    uniq, inv, counts = np.unique(ev, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    if np.any(counts > 2):
        raise MeshError("non-conforming triangulation: an edge is shared by more than two triangles")

    order = np.argsort(inv, kind="stable")
    first = np.full(len(uniq), -1)
    second = np.full(len(uniq), -1)
    for slot in order:
        u = inv[slot]
        if first[u] < 0:
            first[u] = slot
        else:
            second[u] = slot
    is_int = second >= 0
    edges_idx = np.r_[np.flatnonzero(is_int), np.flatnonzero(~is_int)]
    n_int = int(is_int.sum())

    bverts = np.unique(uniq[~is_int])
    for a, b in uniq[~is_int]:
        pa, pb = X[a], X[b]
        t = pb - pa
        rel = X[bverts] - pa
        s = rel @ t / (t @ t)
        off = np.abs(rel[:, 0] * t[1] - rel[:, 1] * t[0]) / np.linalg.norm(t)
        hit = (s > 1e-12) & (s < 1 - 1e-12) & (off < 1e-12 * scale)
        if np.any(hit):
            raise MeshError("non-conforming triangulation: hanging vertex on a boundary edge")

    ev_sorted = uniq[edges_idx]
    s1 = first[edges_idx]
    s2 = second[edges_idx]
    K = owner[s1]
    L = np.where(s2 >= 0, owner[np.maximum(s2, 0)], -1)
    pa, pb = X[ev_sorted[:, 0]], X[ev_sorted[:, 1]]
    tvec = pb - pa
    m = np.linalg.norm(tvec, axis=1)
    nrm = np.column_stack([tvec[:, 1], -tvec[:, 0]]) / m[:, None]
    # orient the normal away from K's opposite vertex
    ov = X[opposite[s1]]
    flip = ((ov - pa) * nrm).sum(1) > 0
    nrm[flip] *= -1

    dK = ((pa - cc[K]) * nrm).sum(1)
    dL = np.full(len(K), np.nan)
    inner = L >= 0
    dL[inner] = ((cc[L[inner]] - pa[inner]) * nrm[inner]).sum(1)
    if np.any(dK <= 1e-12 * scale) or np.any(dL[inner] <= 1e-12 * scale):
        raise MeshError("circumcenter on or beyond an edge of its triangle: mesh is not admissible "
                        "(requires acute triangles)")
    d = dK.copy()
    d[inner] = np.linalg.norm(cc[L[inner]] - cc[K[inner]], axis=1)
    half = 0.5 * m[:, None] * np.column_stack([dK, np.nan_to_num(dL)])

    lo, hi = X.min(axis=0), X.max(axis=0)
    return _finish(dict(
        dimension=2,
        cell_centers=cc,
        cell_measures=area,
        edge_cells=np.column_stack([K, L]),
        edge_measures=m,
        edge_distances=d,
        transmissibilities=m / d,
        edge_normals=nrm,
        half_dual_measures=half,
        cell_edge_distances=np.column_stack([dK, dL]),
        n_interior=n_int,
        domain_measure=float(area.sum()),
        vertices=X,
        cell_vertices=T,
        edge_vertices=ev_sorted,
        kind="triangulation",
        meta={"n_vertices": len(X), "n_triangles": len(T),
              "bounding_box": [lo.tolist(), hi.tolist()]},
    ))


def square_triangulation(nx: int, ny: int, x_range=(0.0, 1.0), y_range=(0.0, 1.0),
                         inset: float = 0.92):
    """Acute triangulation of a rectangle with 2*nx*ny triangles.

    Rows alternate between nx+1 points spanning the full width and nx points
    inset by ``inset*hx`` from both sides; ny must be even.  With ny/nx = 1.75
    and the default inset all angles stay below 83 degrees.  Returns
    (vertices, triangles).
    """
    from scipy.spatial import Delaunay

    if ny % 2:
        raise MeshError("ny must be even")
    (x0, x1), (y0, y1) = x_range, y_range
    hx = (x1 - x0) / nx
    rows = []
    for j, y in enumerate(np.linspace(y0, y1, ny + 1)):
        if j % 2 == 0:
            xs = np.linspace(x0, x1, nx + 1)
        else:
            xs = np.linspace(x0 + inset * hx, x1 - inset * hx, nx)
        rows.append(np.column_stack([xs, np.full(len(xs), y)]))
    X = np.vstack(rows)
    tri = Delaunay(X).simplices
    return X, np.sort(tri, axis=1)


def unit_square_3584() -> Mesh:
    """The 3584-triangle mesh of (0,1)^2 used by the 2D presets."""
    return import_triangulation(*square_triangulation(32, 56))


def read_triangulation(path) -> tuple:
    """Plain-text format: ``nv nt`` header, nv lines ``x y``, nt lines ``i j k`` (0-based)."""
    with open(path) as fh:
        tokens = fh.read().split()
    try:
        nv, nt = int(tokens[0]), int(tokens[1])
        vals = tokens[2:]
        X = np.array(vals[: 2 * nv], dtype=float).reshape(nv, 2)
        T = np.array(vals[2 * nv: 2 * nv + 3 * nt], dtype=int).reshape(nt, 3)
    except (IndexError, ValueError) as exc:
        raise MeshError(f"malformed triangulation file {path}: {exc}") from exc
    if len(vals) != 2 * nv + 3 * nt:
        raise MeshError(f"malformed triangulation file {path}: wrong token count")
    return X, T


def write_triangulation(path, vertices, triangles) -> None:
    X = np.asarray(vertices, dtype=float)
    T = np.asarray(triangles, dtype=int)
    with open(path, "w") as fh:
        fh.write(f"{len(X)} {len(T)}\n")
        for x, y in X.tolist():
            fh.write(f"{x!r} {y!r}\n")
        for i, j, k in T.tolist():
            fh.write(f"{i} {j} {k}\n")


def load_triangulation(path) -> Mesh:
    return import_triangulation(*read_triangulation(path))


def export_mesh_summary(mesh: Mesh, directory) -> tuple:
    """Write ``cells.csv`` and ``edges.csv`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    coords = ["x", "y"][: mesh.dimension]
    cells_path = directory / "cells.csv"
    with open(cells_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *coords, "measure"])
        for k in range(mesh.n_cells):
            w.writerow([k, *map(repr, mesh.cell_centers[k].tolist()), repr(float(mesh.cell_measures[k]))])
    edges_path = directory / "edges.csv"
    with open(edges_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "kind", "K", "L", "tau"])
        for e in range(mesh.n_edges):
            k, l = mesh.edge_cells[e]
            w.writerow([e, "interior" if l >= 0 else "boundary", k, l if l >= 0 else "",
                        repr(float(mesh.transmissibilities[e]))])
    return cells_path, edges_path
