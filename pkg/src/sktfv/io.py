"""Snapshot and plot-data writers.

Floats are written with ``repr`` so every file reparses to the exact values.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .mesh import Mesh


def _vals(state) -> np.ndarray:
    return state.values if hasattr(state, "values") else np.asarray(state, dtype=float)


def write_snapshot_csv(mesh: Mesh, state, path) -> Path:
    """One row per cell: id, center coordinates, u_1 ... u_n."""
    u = _vals(state)
    path = Path(path)
    coords = ["x", "y"][: mesh.dimension]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *coords] + [f"u{i + 1}" for i in range(u.shape[0])])
        for k in range(mesh.n_cells):
            w.writerow([k, *map(repr, mesh.cell_centers[k].tolist()), *map(repr, u[:, k].tolist())])
    return path


def read_snapshot_csv(path):
    """Returns (centers (N, d), values (n, N))."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    n_coord = sum(1 for h in head if h in ("x", "y"))
    data = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    return data[:, :n_coord], data[:, n_coord:].T.copy()


_VTK_TYPES = {2: 3, 3: 5, 4: 9}  # line, triangle, quad


def write_vtk(mesh: Mesh, state, path, names=None, title="sktfv snapshot") -> Path:
    """Legacy ASCII VTK unstructured grid with one scalar per species as cell data."""
    u = _vals(state)
    names = names or [f"u{i + 1}" for i in range(u.shape[0])]
    X = mesh.vertices
    if mesh.dimension == 1:
        cells = np.column_stack([np.arange(mesh.n_cells), np.arange(1, mesh.n_cells + 1)])
        pts = np.column_stack([X[:, 0], np.zeros(len(X)), np.zeros(len(X))])
    else:
        cells = mesh.cell_vertices
        pts = np.column_stack([X, np.zeros(len(X))])
    k = cells.shape[1]
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(pts)} double"]
    lines += [" ".join(map(repr, p)) for p in pts.tolist()]
    lines.append(f"CELLS {len(cells)} {len(cells) * (k + 1)}")
    lines += [f"{k} " + " ".join(map(str, c)) for c in cells.tolist()]
    lines.append(f"CELL_TYPES {len(cells)}")
    lines += [str(_VTK_TYPES[k])] * len(cells)
    lines.append(f"CELL_DATA {len(cells)}")
    for name, col in zip(names, u):
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [repr(v) for v in col.tolist()]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_vtk_cell_data(path) -> dict:
    """Scalar cell fields of a legacy ASCII file written by ``write_vtk``."""
    tokens = Path(path).read_text().split("\n")
    out = {}
    i = 0
    n_cells = None
    while i < len(tokens):
        line = tokens[i].strip()
        if line.startswith("CELL_DATA"):
            n_cells = int(line.split()[1])
        elif line.startswith("SCALARS") and n_cells is not None:
            name = line.split()[1]
            vals = tokens[i + 2: i + 2 + n_cells]
            out[name] = np.array([float(v) for v in vals])
            i += 1 + n_cells
        i += 1
    return out


def emit_snapshot(mesh: Mesh, state, fmt: str, path) -> Path:
    """``fmt`` is "csv" or "vtk"; 2D VTK output also writes a CSV next to it."""
    path = Path(path)
    if fmt == "csv":
        return write_snapshot_csv(mesh, state, path.with_suffix(".csv"))
    if fmt == "vtk":
        if mesh.dimension == 2:
            write_snapshot_csv(mesh, state, path.with_suffix(".csv"))
        return write_vtk(mesh, state, path.with_suffix(".vtk"))
    raise ValueError(f"unsupported snapshot format {fmt!r}")


def _write_columns(path: Path, header: list, cols) -> None:
    with open(path, "w") as fh:
        fh.write("# " + " ".join(header) + "\n")
        for row in zip(*cols):
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def emit_plotdata(artifacts: dict, kind: str, directory) -> list:
    """Gnuplot data plus a plot script.

    kind "decay": artifacts has ``times``, ``relative_entropy``, ``weighted_L1_sq``.
    kind "convergence": ``cells`` and ``errors`` (rows x species).
    kind "mass": ``times`` and ``mass`` (steps x species).
    Nothing is written when the history is empty.
    """
    directory = Path(directory)
    if kind == "decay":
        t = np.asarray(artifacts.get("times", []), dtype=float)
        if t.size == 0:
            raise ValueError("empty run history")
        cols = [t, artifacts["relative_entropy"], artifacts["weighted_L1_sq"]]
        header = ["t", "H", "weighted_L1_sq"]
        script = ("set logscale y\nset xlabel 't'\n"
                  "plot 'decay.dat' u 1:2 w lp t 'relative entropy', "
                  "'' u 1:3 w lp t 'weighted L1 squared'\npause -1\n")
    elif kind == "convergence":
        cells = np.asarray(artifacts.get("cells", []), dtype=float)
        if cells.size == 0:
            raise ValueError("empty run history")
        err = np.asarray(artifacts["errors"], dtype=float)
        cols = [cells] + [err[:, i] for i in range(err.shape[1])]
        header = ["cells"] + [f"error_u{i + 1}" for i in range(err.shape[1])]
        c0, e0 = float(cells[0]), float(err[0, 0])
        plots = ", ".join(f"'convergence.dat' u 1:{i + 2} w lp t 'u{i + 1}'" for i in range(err.shape[1]))
        script = (f"set logscale xy\nset xlabel 'cells'\nset ylabel 'L2 error'\n"
                  f"plot {plots}, {e0!r}*({c0!r}/x)**2 w l dt 2 t 'slope 2'\npause -1\n")
    elif kind == "mass":
        t = np.asarray(artifacts.get("times", []), dtype=float)
        if t.size == 0:
            raise ValueError("empty run history")
        m = np.asarray(artifacts["mass"], dtype=float)
        cols = [t] + [m[:, i] for i in range(m.shape[1])]
        header = ["t"] + [f"mass_u{i + 1}" for i in range(m.shape[1])]
        plots = ", ".join(f"'mass.dat' u 1:{i + 2} w l t 'u{i + 1}'" for i in range(m.shape[1]))
        script = f"set xlabel 't'\nset ylabel 'mass'\nplot {plots}\npause -1\n"
    else:
        raise ValueError(f"unknown plot kind {kind!r}")
    directory.mkdir(parents=True, exist_ok=True)
    data = directory / f"{kind}.dat"
    _write_columns(data, header, cols)
    gp = directory / f"{kind}.gp"
    gp.write_text(script)
    return [data, gp]
