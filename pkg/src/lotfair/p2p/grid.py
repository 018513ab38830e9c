"""DC power-flow sensitivities of a transmission grid.

Injection shift factors (ISF) give each line's flow per unit injected at a
node and withdrawn at the slack. Transfer factors (PTDF) between two nodes
are differences of ISF columns.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Line:
    from_node: int
    to_node: int
    susceptance: float
    limit: float


@dataclass(frozen=True)
class GridModel:
    """Bus/line topology with 0-based node indices.

    ``groups[i]`` is node i's group (0 or 1). Derived matrices are computed on
    first access and cached.
    """

    n_nodes: int
    lines: tuple
    slack: int = 0
    groups: Optional[tuple] = None

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ValueError("grid needs at least two nodes")
        if not self.lines:
            raise ValueError("grid needs at least one line")
        object.__setattr__(self, "lines", tuple(self.lines))
        for ln in self.lines:
            if not (0 <= ln.from_node < self.n_nodes and 0 <= ln.to_node < self.n_nodes):
                raise ValueError(f"line {ln} references an unknown node")
            if ln.from_node == ln.to_node:
                raise ValueError(f"line {ln} is a self-loop")
            if not ln.susceptance > 0 or not ln.limit > 0:
                raise ValueError(f"line {ln} needs positive susceptance and limit")
        if not 0 <= self.slack < self.n_nodes:
            raise ValueError(f"slack node {self.slack} out of range")
        groups = self.groups
        if groups is None:
            groups = tuple(i % 2 for i in range(self.n_nodes))
        groups = tuple(int(g) for g in groups)
        if len(groups) != self.n_nodes or any(g not in (0, 1) for g in groups):
            raise ValueError("groups must assign 0 or 1 to every node")
        object.__setattr__(self, "groups", groups)
        if not _connected(self.n_nodes, self.lines):
            raise ValueError("grid is not connected")

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def limits(self) -> np.ndarray:
        return np.array([ln.limit for ln in self.lines])

    @cached_property
    def isf(self) -> np.ndarray:
        return isf_matrix(self)

    @cached_property
    def distance(self) -> np.ndarray:
        return distance_matrix(self)

    def with_slack(self, slack: int) -> "GridModel":
        return GridModel(self.n_nodes, self.lines, slack, self.groups)

    def with_limit(self, limit: float) -> "GridModel":
        lines = tuple(Line(ln.from_node, ln.to_node, ln.susceptance, limit) for ln in self.lines)
        return GridModel(self.n_nodes, lines, self.slack, self.groups)


def _connected(n, lines) -> bool:
    adj = [[] for _ in range(n)]
    for ln in lines:
        adj[ln.from_node].append(ln.to_node)
        adj[ln.to_node].append(ln.from_node)
    seen = {0}
    stack = [0]
    while stack:
        for v in adj[stack.pop()]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == n


def incidence(grid: GridModel) -> np.ndarray:
    """Line-by-node incidence: +1 at the from node, -1 at the to node."""
    A = np.zeros((grid.n_lines, grid.n_nodes))
    for k, ln in enumerate(grid.lines):
        A[k, ln.from_node] = 1.0
        A[k, ln.to_node] = -1.0
    return A


def isf_matrix(grid: GridModel) -> np.ndarray:
    """ISF matrix (lines x nodes) with a zero slack column."""
    A = incidence(grid)
    B = np.diag([ln.susceptance for ln in grid.lines])
    C = A.T @ B @ A
    keep = [i for i in range(grid.n_nodes) if i != grid.slack]
    C_red = C[np.ix_(keep, keep)]
    try:
        inv = np.linalg.solve(C_red, np.eye(len(keep)))
    except np.linalg.LinAlgError as exc:
        raise ValueError("reduced susceptance matrix is singular") from exc
    phi = np.zeros((grid.n_lines, grid.n_nodes))
    phi[:, keep] = B @ A[:, keep] @ inv
    return phi


def ptdf(grid: GridModel, i: int, j: int) -> np.ndarray:
    """Per-line transfer factors for a transfer from node i to node j."""
    for k in (i, j):
        if not 0 <= k < grid.n_nodes:
            raise ValueError(f"node {k} out of range")
    phi = grid.isf
    return phi[:, i] - phi[:, j]


def ptdf_tensor(grid: GridModel) -> np.ndarray:
    """All transfer factors, shape (lines, nodes, nodes)."""
    phi = grid.isf
    return phi[:, :, None] - phi[:, None, :]


def distance_matrix(grid: GridModel) -> np.ndarray:
    """Power transfer distance: transfer factors summed over lines."""
    s = grid.isf.sum(axis=0)
    return s[:, None] - s[None, :]


def line_flows(X, grid: GridModel, surplus=None) -> np.ndarray:
    """Line flows caused by a trade matrix.

    With ``surplus`` the flow sums transfer factors over producer-to-consumer
    entries. Without it, the flow is the ISF applied to each node's net sales,
    which agrees on antisymmetric matrices that only trade between producers
    and consumers.
    """
    X = np.asarray(X, dtype=float)
    if surplus is None:
        return grid.isf @ X.sum(axis=1)
    h = np.asarray(surplus, dtype=float)
    prod = h >= 0
    mask = np.outer(prod, ~prod)
    return np.einsum("lij,ij->l", ptdf_tensor(grid), np.where(mask, X, 0.0))


def read_grid(path, limit: Optional[float] = None, groups: Optional[Sequence[int]] = None) -> GridModel:
    """Read a grid file: ``key=value`` header lines, then ``from,to,susceptance,limit`` rows.

    Bus numbers in the file are 1-based. Header keys are ``slack`` and
    ``groups`` (comma-separated, one entry per bus). ``limit`` overrides every
    line limit; ``groups`` overrides the file's mapping.
    """
    text = Path(path).read_text()
    return parse_grid(text, limit, groups)


def parse_grid(text: str, limit: Optional[float] = None, groups: Optional[Sequence[int]] = None) -> GridModel:
    header = {}
    rows = []
    seen_columns = False
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line and not seen_columns:
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in ("slack", "groups"):
                raise ValueError(f"unknown grid header key {key!r}")
            header[key] = value
            continue
        if not seen_columns:
            if [c.strip() for c in line.split(",")] != ["from", "to", "susceptance", "limit"]:
                raise ValueError(f"bad grid column header: {line!r}")
            seen_columns = True
            continue
        parts = [c.strip() for c in line.split(",")]
        if len(parts) != 4:
            raise ValueError(f"bad grid row: {line!r}")
        rows.append((int(parts[0]) - 1, int(parts[1]) - 1, float(parts[2]), float(parts[3])))
    if not rows:
        raise ValueError("grid file has no lines")
    n = max(max(r[0], r[1]) for r in rows) + 1
    lines = tuple(Line(f, t, b, limit if limit is not None else lim) for f, t, b, lim in rows)
    slack = int(header.get("slack", "1")) - 1
    if groups is None and "groups" in header:
        groups = [int(g) for g in header["groups"].split(",")]
    return GridModel(n, lines, slack, tuple(groups) if groups is not None else None)


def write_grid(grid: GridModel, path):
    out = [f"slack={grid.slack + 1}", "groups=" + ",".join(str(g) for g in grid.groups),
           "from,to,susceptance,limit"]
    for ln in grid.lines:
        out.append(f"{ln.from_node + 1},{ln.to_node + 1},{ln.susceptance!r},{ln.limit!r}")
    Path(path).write_text("\n".join(out) + "\n")


def ieee14(limit: Optional[float] = None, groups: Optional[Sequence[int]] = None) -> GridModel:
    """The shipped 14-bus test grid; groups default to node-index parity."""
    text = resources.files("lotfair.p2p").joinpath("data/ieee14.csv").read_text()
    return parse_grid(text, limit, groups)
