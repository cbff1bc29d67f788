"""CSV ingestion of lattice problems and JSON/CSV writers for results.

Three input tables, each keyed by ``cell_id``:

* grid: ``cell_id,row,col`` -- the active lattice cells, in node order;
* observations: ``cell_id,y_1,...,y_D`` -- compositions at observed cells;
* covariates: ``cell_id,b_1,...,b_{p-1}`` -- required at every active cell,
  the intercept is added here.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .composition import alr, closure, repair_compositions
from .lattice import LatticeModel, lattice_from_cells

logger = logging.getLogger(__name__)

__all__ = [
    "DataError",
    "config_hash",
    "emit",
    "ingest",
    "read_table",
    "write_csv",
    "write_json",
]

PathLike = Union[str, Path]


class DataError(ValueError):
    """Input files are inconsistent or malformed."""


def read_table(path: PathLike):
    """Read a headed CSV; returns ``(header, rows)`` with rows as string lists."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with open(path, newline="") as fh:
        reader = csv.reader(row for row in fh if row.strip() and not row.startswith("#"))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [[c.strip() for c in r] for r in reader]
    if not header or header[0] != "cell_id":
        raise DataError(f"{path}: first column must be 'cell_id'")
    for i, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}:{i}: expected {len(header)} fields, got {len(r)}")
    return header, rows


def _parse_ids(values, path):
    try:
        ids = np.array([int(v) for v in values], dtype=np.int64)
    except ValueError:
        ids = np.array(values, dtype=str)
    uniq, counts = np.unique(ids, return_counts=True)
    if np.any(counts > 1):
        raise DataError(f"{path}: duplicate cell_id {uniq[counts > 1][0]}")
    return ids


def _parse_floats(rows, path, start=1):
    try:
        return np.array([[float(v) for v in r[start:]] for r in rows], dtype=float).reshape(
            len(rows), -1)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _lookup(ids, wanted, path, what):
    index = {k: i for i, k in enumerate(ids.tolist())}
    try:
        return np.array([index[k] for k in wanted.tolist()], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"{path}: {what} cell_id {exc.args[0]} is not in the grid") from None


def ingest(grid_csv: PathLike, obs_csv: PathLike, cov_csv: Optional[PathLike] = None,
           alr_columns: Optional[Sequence] = None, unit_spacing: float = 1.0,
           repair: bool = True):
    """Build a :class:`LatticeModel` and observation matrix from CSV files.

    Parameters
    ----------
    grid_csv, obs_csv, cov_csv : path
        The three tables described in the module docstring. Without
        ``cov_csv`` the design is intercept-only.
    alr_columns : sequence of str, or sequence of sequences
        Covariate columns holding a composition; each group is replaced by
        its alr transform (the last column of the group is the reference).
    unit_spacing : float
        Physical size of a lattice cell.
    repair : bool
        Pull compositions with zero parts into the simplex interior.

    Returns
    -------
    lattice : LatticeModel
        ``obs_index`` follows the observations sorted by ``cell_id``.
    Y : ndarray, shape (N_o, D)
    """
    g_head, g_rows = read_table(grid_csv)
    if g_head[1:] != ["row", "col"]:
        raise DataError(f"{grid_csv}: expected columns cell_id,row,col")
    if not g_rows:
        raise DataError(f"{grid_csv}: no cells")
    cell_ids = _parse_ids([r[0] for r in g_rows], grid_csv)
    try:
        rc = np.array([[int(r[1]), int(r[2])] for r in g_rows], dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"{grid_csv}: row/col must be integers ({exc})") from exc
    if len({tuple(x) for x in rc.tolist()}) != len(rc):
        raise DataError(f"{grid_csv}: two cells share a (row, col) position")

    o_head, o_rows = read_table(obs_csv)
    if len(o_head) < 3:
        raise DataError(f"{obs_csv}: need at least two composition parts")
    obs_ids = _parse_ids([r[0] for r in o_rows], obs_csv)
    Y = _parse_floats(o_rows, obs_csv)
    order = np.argsort(obs_ids, kind="stable")
    obs_ids, Y = obs_ids[order], Y[order]
    obs_index = _lookup(cell_ids, obs_ids, obs_csv, "observed")
    if len(Y):
        try:
            if repair:
                Y, n_fixed = repair_compositions(Y)
            else:
                repair_compositions(Y, floor=0.0)
                n_fixed = 0
        except ValueError as exc:
            raise DataError(f"{obs_csv}: {exc}") from exc
        if np.any(Y <= 0):
            raise DataError(f"{obs_csv}: compositions with zero parts (repair disabled)")
        if n_fixed:
            logger.warning("%s: %d observations had zero parts and were repaired", obs_csv, n_fixed)

    B = np.ones((len(cell_ids), 1))
    names = ["intercept"]
    if cov_csv is not None:
        c_head, c_rows = read_table(cov_csv)
        cov_ids = _parse_ids([r[0] for r in c_rows], cov_csv)
        values = _parse_floats(c_rows, cov_csv)
        pos = {k: i for i, k in enumerate(cov_ids.tolist())}
        missing = [k for k in cell_ids.tolist() if k not in pos]
        if missing:
            raise DataError(f"{cov_csv}: no covariates for cell_id {missing[0]}")
        grid_set = set(cell_ids.tolist())
        extra = [k for k in cov_ids.tolist() if k not in grid_set]
        if extra:
            raise DataError(f"{cov_csv}: cell_id {extra[0]} is not in the grid")
        values = values[[pos[k] for k in cell_ids.tolist()]]
        columns = c_head[1:]
        if not np.all(np.isfinite(values)):
            raise DataError(f"{cov_csv}: covariates must be finite")
        values, columns = _apply_alr(values, columns, alr_columns, cov_csv)
        B = np.column_stack([B, values])
        names += columns
    elif alr_columns:
        raise DataError("alr_columns given without a covariate file")

    lattice = lattice_from_cells(rc[:, 0], rc[:, 1], unit_spacing, cell_ids=cell_ids,
                                 obs_index=obs_index, B=B, covariate_names=names)
    return lattice, Y


def _apply_alr(values, columns, alr_columns, path):
    if not alr_columns:
        return values, list(columns)
    groups = [alr_columns] if isinstance(alr_columns[0], str) else list(alr_columns)
    out_cols, out_names, used = [], [], set()
    for group in groups:
        missing = [c for c in group if c not in columns]
        if missing:
            raise DataError(f"{path}: alr column {missing[0]!r} not found")
        if len(group) < 2:
            raise DataError(f"{path}: an alr group needs at least two columns")
        idx = [columns.index(c) for c in group]
        part = values[:, idx]
        if np.any(part <= 0):
            raise DataError(f"{path}: alr columns {list(group)} must be strictly positive")
        out_cols.append(alr(closure(part)))
        out_names += [f"alr({c}/{group[-1]})" for c in group[:-1]]
        used.update(idx)
    keep = [i for i in range(len(columns)) if i not in used]
    values = np.column_stack([values[:, keep]] + out_cols)
    return values, [columns[i] for i in keep] + out_names


def _fmt(x) -> str:
    """Shortest round-tripping float text."""
    return repr(float(x))


def emit(lattice: LatticeModel, Y, directory: PathLike, prefix: str = "") -> dict:
    """Write the grid, observation and covariate tables read by :func:`ingest`.

    Floats are written with ``repr`` so that re-ingesting reproduces the
    lattice and observations exactly. Returns the three paths.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Y = np.asarray(Y, dtype=float)
    paths = dict(grid=directory / f"{prefix}grid.csv",
                 observations=directory / f"{prefix}observations.csv",
                 covariates=directory / f"{prefix}covariates.csv")
    ids = lattice.cell_ids
    with open(paths["grid"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "row", "col"])
        for cid, r, c in zip(ids.tolist(), lattice.rows.tolist(), lattice.cols.tolist()):
            w.writerow([cid, r, c])
    with open(paths["observations"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id"] + [f"y_{k + 1}" for k in range(Y.shape[1])])
        for node, y in zip(lattice.obs_index.tolist(), Y):
            w.writerow([ids[node]] + [_fmt(v) for v in y])
    with open(paths["covariates"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id"] + [f"b_{j}" for j in range(1, lattice.p)])
        for cid, b in zip(ids.tolist(), lattice.B[:, 1:]):
            w.writerow([cid] + [_fmt(v) for v in b])
    return paths


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON form of ``config``."""
    text = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def write_json(path: PathLike, payload: dict, *, config_digest: str, seed: int) -> Path:
    """Write ``payload`` with the config hash and master seed embedded."""
    path = Path(path)
    doc = dict(config_hash=config_digest, seed=int(seed), **_jsonable(payload))
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path: PathLike, header: Sequence[str], rows, *, config_digest: str,
              seed: int) -> Path:
    """Write a CSV whose first line is a ``#`` comment with hash and seed."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_digest} seed={int(seed)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path
