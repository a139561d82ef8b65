"""Lattice discretisations of domains, metric tensors, geodesic balls.

Nodes are the centres of the cells of a uniform Cartesian lattice that fall
inside the shape (cut-cell masking). The domain boundary sits on the faces
between masked and unmasked cells, which keeps the five-point (or 2d+1 point)
stencil and its boundary closures exact for separable eigenfunctions.
"""

from __future__ import annotations

import ast
import math
import warnings
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .errors import (
    DegenerateDomainError,
    EllipticityError,
    GraphDisconnectedError,
    SourceNotInDomainError,
    UnderResolvedWarning,
    ValidationError,
)

DIRICHLET = "dirichlet"
NEUMANN = "neumann"
BOUNDARY_CONDITIONS = (DIRICHLET, NEUMANN)

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0

# Largest |offset component| of the geodesic neighbourhood, per dimension.
# 2d with 3 gives 32 directions, max angular gap 18.4 deg -> <= 1.3% overestimate.
DEFAULT_STENCIL = {1: 1, 2: 3, 3: 2}

SHAPES = ("rectangle", "square_with_hole", "dumbbell", "mask_file")


# --------------------------------------------------------------------------
# metric tensors
# --------------------------------------------------------------------------

_EXPR_FUNCS = {
    name: getattr(np, name)
    for name in ("sin", "cos", "tan", "exp", "log", "sqrt", "tanh", "cosh", "sinh", "abs", "arctan")
}
_EXPR_CONSTS = {"pi": math.pi, "e": math.e}
_EXPR_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Constant, ast.Name, ast.Load, ast.Call,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd,
)


def evaluate_expression(expr: str, coords: np.ndarray) -> np.ndarray:
    """Evaluate an arithmetic expression in ``x, y, z`` at every row of ``coords``.

    Only numbers, the coordinate names, ``pi``/``e``, the four operations,
    powers and a handful of numpy functions are accepted.
    """
    tree = ast.parse(expr, mode="eval")
    names = {"x": 0, "y": 1, "z": 2}
    for node in ast.walk(tree):
        if not isinstance(node, _EXPR_NODES):
            raise ValidationError(f"unsupported syntax in metric expression {expr!r}")
        if isinstance(node, ast.Name) and node.id not in names and node.id not in _EXPR_CONSTS \
                and node.id not in _EXPR_FUNCS:
            raise ValidationError(f"unknown name {node.id!r} in metric expression {expr!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _EXPR_FUNCS):
            raise ValidationError(f"unsupported call in metric expression {expr!r}")
    env = dict(_EXPR_CONSTS)
    env.update(_EXPR_FUNCS)
    for name, axis in names.items():
        if axis < coords.shape[1]:
            env[name] = coords[:, axis]
    value = eval(compile(tree, "<metric>", "eval"), {"__builtins__": {}}, env)
    return np.broadcast_to(np.asarray(value, dtype=float), (coords.shape[0],)).copy()


@dataclass(frozen=True, eq=False)
class MetricField:
    """Per-node symmetric coefficient tensors ``g^{ij}`` (inverse metric).

    ``c_min``/``c_max`` are the extreme eigenvalues over all nodes, i.e. the
    uniform ellipticity constants. ``holder_norm`` is a sampled estimate of
    the Hölder seminorm with exponent ``alpha``.
    """

    tensors: np.ndarray
    alpha: float = 1.0
    c_min: float = field(init=False)
    c_max: float = field(init=False)
    holder_norm: float = field(init=False)
    is_identity: bool = False
    coords: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        g = np.asarray(self.tensors, dtype=float)
        if g.ndim != 3 or g.shape[1] != g.shape[2]:
            raise ValidationError("metric tensors must have shape (n_nodes, d, d)")
        if not np.allclose(g, np.swapaxes(g, 1, 2), rtol=0.0, atol=1e-12):
            raise ValidationError("metric tensors are not symmetric to 1e-12")
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError("Hölder exponent must lie in (0, 1]")
        g = 0.5 * (g + np.swapaxes(g, 1, 2))
        eig = np.linalg.eigvalsh(g)
        object.__setattr__(self, "tensors", g)
        object.__setattr__(self, "c_min", float(eig[:, 0].min()))
        object.__setattr__(self, "c_max", float(eig[:, -1].max()))
        object.__setattr__(self, "holder_norm", self._estimate_holder())

    # constructors -------------------------------------------------------
    @classmethod
    def identity(cls, n_nodes: int, dim: int) -> "MetricField":
        return cls(np.broadcast_to(np.eye(dim), (n_nodes, dim, dim)).copy(), is_identity=True)

    @classmethod
    def constant(cls, n_nodes: int, dim: int, value) -> "MetricField":
        value = np.asarray(value, dtype=float)
        tensor = value * np.eye(dim) if value.ndim == 0 else value
        return cls(np.broadcast_to(tensor, (n_nodes, dim, dim)).copy())

    @classmethod
    def from_function(cls, coords: np.ndarray, fn: Callable[[np.ndarray], np.ndarray],
                      alpha: float = 1.0) -> "MetricField":
        return cls(np.asarray(fn(coords), dtype=float), alpha=alpha, coords=coords)

    @classmethod
    def from_expressions(cls, coords: np.ndarray, expressions: Mapping[str, str],
                         alpha: float = 1.0) -> "MetricField":
        """Build from component expressions keyed ``g11``, ``g12``, ... (1-based)."""
        n, d = coords.shape
        g = np.zeros((n, d, d))
        for i in range(d):
            for j in range(i, d):
                key = f"g{i + 1}{j + 1}"
                alt = f"g{j + 1}{i + 1}"
                expr = expressions.get(key, expressions.get(alt, "1" if i == j else "0"))
                g[:, i, j] = g[:, j, i] = evaluate_expression(str(expr), coords)
        return cls(g, alpha=alpha, coords=coords)

    # derived quantities -------------------------------------------------
    @property
    def dim(self) -> int:
        return self.tensors.shape[1]

    @property
    def sqrt_det_g(self) -> np.ndarray:
        """Volume density sqrt(det g_ij) = det(g^ij)^(-1/2)."""
        return 1.0 / np.sqrt(np.linalg.det(self.tensors))

    @property
    def lower(self) -> np.ndarray:
        """The metric g_ij, used for edge lengths."""
        return np.linalg.inv(self.tensors)

    def ellipticity_violations(self, c_min: float = 0.0) -> np.ndarray:
        eig = np.linalg.eigvalsh(self.tensors)
        return np.flatnonzero(eig[:, 0] <= c_min)

    def _estimate_holder(self, n_pairs: int = 20000) -> float:
        if self.coords is None or self.is_identity or len(self.tensors) < 2:
            return 0.0
        rng = np.random.default_rng(0)
        n = len(self.tensors)
        a = rng.integers(0, n, n_pairs)
        b = rng.integers(0, n, n_pairs)
        keep = a != b
        a, b = a[keep], b[keep]
        dx = np.linalg.norm(self.coords[a] - self.coords[b], axis=1)
        dg = np.abs(self.tensors[a] - self.tensors[b]).reshape(len(a), -1).max(axis=1)
        return float(np.max(dg / dx ** self.alpha)) if len(a) else 0.0


# --------------------------------------------------------------------------
# grid domain
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapeSpec:
    """Descriptor of a built-in shape.

    ``dims`` are the side lengths for ``rectangle`` (any dimension), the side
    of the outer square for ``square_with_hole`` and the physical extent of
    the bitmap for ``mask_file``. The dumbbell is the unit square joined by a
    neck of width ``delta * s`` and length ``neck_length`` to a square of side
    ``s = golden_ratio / n``.
    """

    name: str = "rectangle"
    dims: tuple = (1.0, 1.0)
    hole: float = 0.4
    delta: float = 0.05
    n: int = 3
    neck_length: float = 0.25
    mask_file: Optional[str] = None

    @property
    def small_side(self) -> float:
        return GOLDEN_RATIO / self.n

    @property
    def neck_width(self) -> float:
        return self.delta * self.small_side

    def landmarks(self) -> dict:
        """Named points of the shape (centres of the squares, ...)."""
        if self.name == "dumbbell":
            s = self.small_side
            return {"big_center": (0.5, 0.5), "small_center": (1.0 + self.neck_length + s / 2, 0.5)}
        return {"center": tuple(0.5 * np.asarray(self.dims, dtype=float))}


@dataclass(frozen=True, eq=False)
class GridDomain:
    """Masked uniform lattice with boundary-condition tag and node measure.

    ``node_measure`` sums to one unless the domain is a restriction of a
    parent (then it carries the parent's weights, so kernels are comparable).
    """

    mask: np.ndarray
    spacing: float
    origin: np.ndarray
    bc: str
    node_measure: np.ndarray
    physical_volume: float
    metric: Optional[MetricField] = None
    shape_spec: Optional[ShapeSpec] = None
    parent_index: Optional[np.ndarray] = field(default=None, repr=False)
    index: np.ndarray = field(init=False, repr=False)
    lattice: np.ndarray = field(init=False, repr=False)
    coords: np.ndarray = field(init=False, repr=False)
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        lattice = np.argwhere(mask)
        index = np.full(mask.shape, -1, dtype=np.int64)
        index[tuple(lattice.T)] = np.arange(len(lattice))
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "lattice", lattice)
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "coords", self.origin + (lattice + 0.5) * self.spacing)

    @property
    def dim(self) -> int:
        return self.mask.ndim

    @property
    def shape(self) -> tuple:
        return self.mask.shape

    @property
    def n_nodes(self) -> int:
        return len(self.lattice)

    @property
    def total_volume(self) -> float:
        return float(self.node_measure.sum())

    @property
    def metric_field(self) -> MetricField:
        if self.metric is None:
            if "identity" not in self._cache:
                self._cache["identity"] = MetricField.identity(self.n_nodes, self.dim)
            return self._cache["identity"]
        return self.metric

    # lookups -----------------------------------------------------------
    def node_at(self, point: Sequence[float]) -> int:
        """Node whose cell contains ``point``."""
        p = np.asarray(point, dtype=float)
        if p.shape != (self.dim,):
            raise ValidationError(f"point must have {self.dim} coordinates")
        idx = np.floor((p - self.origin) / self.spacing + 1e-9).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.array(self.shape)):
            raise SourceNotInDomainError(f"source not in domain: {tuple(p)}")
        node = int(self.index[tuple(idx)])
        if node < 0:
            raise SourceNotInDomainError(f"source not in domain: {tuple(p)}")
        return node

    def neighbor(self, node: int, axis: int, step: int) -> int:
        """Node ``step`` cells away along ``axis``, or -1 if outside the mask."""
        idx = self.lattice[node].copy()
        idx[axis] += step
        if idx[axis] < 0 or idx[axis] >= self.shape[axis]:
            return -1
        return int(self.index[tuple(idx)])

    def boundary_nodes(self) -> np.ndarray:
        """Nodes with at least one axis neighbour outside the mask."""
        padded = np.pad(self.mask, 1, constant_values=False)
        interior = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(self.dim, 1))
        interior = interior[tuple(slice(1, -1) for _ in range(self.dim))]
        return np.flatnonzero(~interior[tuple(self.lattice.T)])

    def inscribed_radius(self, node: int) -> float:
        """Distance from the node to the nearest boundary face (Euclidean)."""
        if "edt" not in self._cache:
            padded = np.pad(self.mask, 1, constant_values=False)
            self._cache["edt"] = ndimage.distance_transform_edt(padded)
        edt = self._cache["edt"]
        idx = tuple(self.lattice[node] + 1)
        # edt is centre-to-centre; the boundary face sits half a cell closer
        return float((edt[idx] - 0.5) * self.spacing)

    def euclidean_ball(self, node: int, radius: float) -> np.ndarray:
        d = np.linalg.norm(self.coords - self.coords[node], axis=1)
        return np.flatnonzero(d <= radius)

    def lattice_ball_inside(self, center: Sequence[float], radius: float) -> bool:
        """True if every lattice cell centre within ``radius`` of ``center`` is masked."""
        c = np.asarray(center, dtype=float)
        lo = np.floor((c - radius - self.origin) / self.spacing - 0.5).astype(int)
        hi = np.ceil((c + radius - self.origin) / self.spacing - 0.5).astype(int)
        if np.any(lo < 0) or np.any(hi >= np.array(self.shape)):
            return False
        grids = np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(lo, hi)], indexing="ij")
        idx = np.stack([g.ravel() for g in grids], axis=1)
        pts = self.origin + (idx + 0.5) * self.spacing
        inside = np.linalg.norm(pts - c, axis=1) <= radius
        return bool(np.all(self.mask[tuple(idx[inside].T)]))

    # derived domains -----------------------------------------------------
    def restrict(self, nodes: Sequence[int], bc: str = DIRICHLET) -> "GridDomain":
        """Sub-domain on ``nodes`` keeping the parent's lattice and node weights."""
        nodes = np.unique(np.asarray(nodes, dtype=np.int64))
        if len(nodes) == 0:
            raise DegenerateDomainError("degenerate domain: empty restriction")
        mask = np.zeros_like(self.mask)
        mask[tuple(self.lattice[nodes].T)] = True
        # argwhere order of the new mask is the lexicographic order of nodes,
        # which matches the sorted parent ids
        metric = None
        if self.metric is not None:
            metric = MetricField(self.metric.tensors[nodes], alpha=self.metric.alpha, coords=self.coords[nodes])
        return GridDomain(mask=mask, spacing=self.spacing, origin=self.origin, bc=bc,
                          node_measure=self.node_measure[nodes].copy(),
                          physical_volume=self.physical_volume * float(self.node_measure[nodes].sum()),
                          metric=metric, shape_spec=None, parent_index=nodes)

    def with_metric(self, metric: MetricField) -> "GridDomain":
        """Attach a metric; node measure becomes h^d sqrt(det g), renormalised to one."""
        if metric.tensors.shape != (self.n_nodes, self.dim, self.dim):
            raise ValidationError("metric does not match the domain's node count / dimension")
        bad = metric.ellipticity_violations()
        if len(bad):
            raise EllipticityError(f"ellipticity violation at node {int(bad[0])} "
                                   f"(coords {tuple(np.round(self.coords[bad[0]], 6))})")
        raw = self.spacing ** self.dim * metric.sqrt_det_g
        return GridDomain(mask=self.mask, spacing=self.spacing, origin=self.origin, bc=self.bc,
                          node_measure=raw / raw.sum(), physical_volume=float(raw.sum()),
                          metric=metric, shape_spec=self.shape_spec)

    def scaled_measure_factor(self) -> float:
        """Ratio normalised / physical measure (1 / physical volume)."""
        return 1.0 / self.physical_volume

    # geodesic graph ------------------------------------------------------
    def neighbor_graph(self, stencil: Optional[int] = None) -> sp.csr_matrix:
        """Symmetric sparse graph of lattice edges weighted by metric length."""
        stencil = DEFAULT_STENCIL[self.dim] if stencil is None else int(stencil)
        key = ("graph", stencil)
        if key not in self._cache:
            self._cache[key] = _lattice_graph(self, stencil)
        return self._cache[key]


def _primitive_offsets(dim: int, stencil: int) -> list:
    """Integer offsets with max-norm <= stencil, gcd 1, one per +/- pair."""
    rng = range(-stencil, stencil + 1)
    out = []
    for v in np.array(np.meshgrid(*[rng] * dim, indexing="ij")).reshape(dim, -1).T:
        if not v.any():
            continue
        first = v[np.flatnonzero(v)[0]]
        if first < 0:
            continue
        if reduce(math.gcd, (abs(int(c)) for c in v)) != 1:
            continue
        out.append(v.astype(int))
    return out


def _segment_cells(v: np.ndarray) -> np.ndarray:
    """Lattice offsets crossed by the segment 0 -> v (endpoints excluded)."""
    m = int(np.abs(v).max())
    ts = np.linspace(0.0, 1.0, 8 * m + 1)[1:-1]
    cells = set()
    for t in ts:
        p = t * v
        for q in (np.floor(p + 0.5), np.floor(p + 0.5 - 1e-9)):
            cells.add(tuple(int(c) for c in q))
    cells.discard(tuple([0] * len(v)))
    cells.discard(tuple(int(c) for c in v))
    return np.array(sorted(cells), dtype=int).reshape(-1, len(v))


def _lattice_graph(domain: GridDomain, stencil: int) -> sp.csr_matrix:
    shape = np.array(domain.shape)
    lat = domain.lattice
    metric = domain.metric
    lower = None if metric is None or metric.is_identity else metric.lower
    rows, cols, vals = [], [], []
    for v in _primitive_offsets(domain.dim, stencil):
        target = lat + v
        ok = np.all((target >= 0) & (target < shape), axis=1)
        for u in _segment_cells(v):
            mid = lat + u
            inb = np.all((mid >= 0) & (mid < shape), axis=1)
            ok &= inb
            ok[inb] &= domain.mask[tuple(mid[inb].T)]
        ok[ok] &= domain.mask[tuple(target[ok].T)]
        a = np.flatnonzero(ok)
        b = domain.index[tuple(target[ok].T)]
        if lower is None:
            length = np.full(len(a), domain.spacing * float(np.linalg.norm(v)))
        else:
            e = domain.spacing * v.astype(float)
            la = np.sqrt(np.einsum("i,nij,j->n", e, lower[a], e))
            lb = np.sqrt(np.einsum("i,nij,j->n", e, lower[b], e))
            length = 0.5 * (la + lb)
        rows += [a, b]
        cols += [b, a]
        vals += [length, length]
    n = domain.n_nodes
    if not rows:
        return sp.csr_matrix((n, n))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------

def read_pbm(path) -> np.ndarray:
    """Read a plain (P1) or raw (P4) PBM bitmap; returns rows top-to-bottom, 1 = inside."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P1", b"P4"):
        raise ValidationError(f"{path}: not a PBM file")
    # header tokens, skipping comments
    pos, tokens = 2, []
    while len(tokens) < 2:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    width, height = tokens
    if magic == b"P1":
        bits = [c for c in data[pos:].decode("ascii") if c in "01"]
        arr = np.array(bits[: width * height], dtype=np.uint8)
    else:
        pos += 1
        row_bytes = (width + 7) // 8
        raw = np.frombuffer(data[pos:pos + row_bytes * height], dtype=np.uint8).reshape(height, row_bytes)
        arr = np.unpackbits(raw, axis=1)[:, :width].ravel()
    if arr.size != width * height:
        raise ValidationError(f"{path}: truncated PBM data")
    return arr.reshape(height, width).astype(bool)


def write_pbm(path, mask: np.ndarray) -> None:
    """Write a plain PBM (rows top-to-bottom)."""
    mask = np.asarray(mask, dtype=bool)
    lines = [f"P1\n{mask.shape[1]} {mask.shape[0]}"]
    lines += [" ".join("1" if b else "0" for b in row) for row in mask]
    Path(path).write_text("\n".join(lines) + "\n")


def _shape_mask(spec: ShapeSpec, resolution: float):
    """Return (mask, spacing, narrowest feature width)."""
    h = 1.0 / resolution
    if spec.name == "mask_file":
        if spec.mask_file is None:
            raise ValidationError("mask_file shape needs a mask_file path")
        if not Path(spec.mask_file).exists():
            raise ValidationError(f"mask file not found: {spec.mask_file}")
        img = read_pbm(spec.mask_file)
        # bitmap rows run top-to-bottom; lattice axis 1 runs upward
        mask = np.ascontiguousarray(img[::-1, :].T)
        h = float(spec.dims[0]) / mask.shape[0]
        # a bitmap carries no feature-size information
        return mask, h, math.inf
    if spec.name == "rectangle":
        dims = np.asarray(spec.dims, dtype=float)
        if dims.size not in (1, 2, 3) or np.any(dims <= 0):
            raise ValidationError("rectangle needs 1-3 positive side lengths")
        n = np.ceil(dims * resolution - 1e-9).astype(int)
        axes = [(np.arange(k) + 0.5) * h for k in n]
        grids = np.meshgrid(*axes, indexing="ij")
        mask = np.ones(tuple(n), dtype=bool)
        for g, length in zip(grids, dims):
            mask &= g < length
        return mask, h, float(dims.min())
    if spec.name == "square_with_hole":
        side = float(spec.dims[0])
        if not 0.0 < spec.hole < 1.0:
            raise ValidationError("hole fraction must lie in (0, 1)")
        n = int(math.ceil(side * resolution - 1e-9))
        x, y = np.meshgrid((np.arange(n) + 0.5) * h, (np.arange(n) + 0.5) * h, indexing="ij")
        half = 0.5 * spec.hole * side
        hole = (np.abs(x - side / 2) < half) & (np.abs(y - side / 2) < half)
        mask = (x < side) & (y < side) & ~hole
        return mask, h, 0.5 * side * (1.0 - spec.hole)
    if spec.name == "dumbbell":
        if spec.delta <= 0 or spec.n < 1 or spec.neck_length <= 0:
            raise ValidationError("dumbbell needs delta > 0, n >= 1, neck_length > 0")
        s, w, L = spec.small_side, spec.neck_width, spec.neck_length
        width = 1.0 + L + s
        height = max(1.0, s)
        nx = int(math.ceil(width * resolution - 1e-9))
        ny = int(math.ceil(height * resolution - 1e-9))
        x, y = np.meshgrid((np.arange(nx) + 0.5) * h, (np.arange(ny) + 0.5) * h, indexing="ij")
        big = (x < 1.0) & (y < 1.0)
        neck = (x >= 1.0) & (x < 1.0 + L) & (np.abs(y - 0.5) < w / 2)
        small = (x >= 1.0 + L) & (x < width) & (np.abs(y - 0.5) < s / 2)
        return big | neck | small, h, w
    raise ValidationError(f"unknown shape {spec.name!r}; expected one of {SHAPES}")


def build_grid_domain(spec, resolution: float, bc: str = DIRICHLET,
                      metric: Optional[Callable[[np.ndarray], MetricField]] = None) -> GridDomain:
    """Discretise a built-in shape on a cell-centred lattice.

    Args:
        spec: a :class:`ShapeSpec`, a shape name, or a mapping of ShapeSpec fields.
        resolution: nodes per unit length (>= 8).
        bc: ``"dirichlet"`` or ``"neumann"``.
        metric: optional callable mapping node coordinates to a MetricField.

    The node measure is normalised so the total volume is one.
    """
    if isinstance(spec, str):
        spec = ShapeSpec(name=spec)
    elif isinstance(spec, Mapping):
        spec = ShapeSpec(**spec)
    bc = str(bc).lower()
    if bc not in BOUNDARY_CONDITIONS:
        raise ValidationError(f"boundary condition must be one of {BOUNDARY_CONDITIONS}, got {bc!r}")
    if spec.name != "mask_file" and not resolution >= 8:
        raise ValidationError("resolution must be at least 8 nodes per unit")
    mask, h, feature = _shape_mask(spec, float(resolution))
    if not mask.any():
        raise DegenerateDomainError("degenerate domain: empty mask")
    if feature / h < 3.0:
        warnings.warn(f"under-resolved feature: narrowest width {feature:.4g} spans "
                      f"{feature / h:.2f} cells", UnderResolvedWarning, stacklevel=2)
    count = int(mask.sum())
    raw_volume = count * h ** mask.ndim
    measure = np.full(count, 1.0 / count)
    domain = GridDomain(mask=mask, spacing=h, origin=np.zeros(mask.ndim), bc=bc,
                        node_measure=measure, physical_volume=raw_volume, shape_spec=spec)
    if metric is not None:
        domain = domain.with_metric(metric(domain.coords))
    return domain


def connected_components(domain: GridDomain) -> int:
    structure = ndimage.generate_binary_structure(domain.dim, 1)
    _, n = ndimage.label(domain.mask, structure=structure)
    return int(n)


# --------------------------------------------------------------------------
# geodesic balls
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BallPatch:
    """Nodes within geodesic distance ``radius`` of ``center``."""

    center: int
    radius: float
    nodes: np.ndarray
    geodesic: np.ndarray
    domain: object = field(repr=False)
    stencil: Optional[int] = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def coords(self) -> np.ndarray:
        return self.domain.coords[self.nodes]

    @property
    def volume(self) -> float:
        return float(self.domain.node_measure[self.nodes].sum())

    def pairwise_distances(self) -> np.ndarray:
        """Geodesic distance matrix between ball nodes (exactly symmetric)."""
        if "pairwise" not in self._cache:
            graph = self.domain.neighbor_graph(self.stencil)
            dist = csgraph.dijkstra(graph, directed=False, indices=self.nodes,
                                    limit=2.0 * self.radius * (1 + 1e-9) + 1e-300)
            D = dist[:, self.nodes]
            self._cache["pairwise"] = np.minimum(D, D.T)
        return self._cache["pairwise"]

    def distances_from(self, rows) -> np.ndarray:
        """Geodesic distances from the ball nodes at positions ``rows`` to every ball node."""
        rows = np.asarray(rows, dtype=np.int64)
        if "pairwise" in self._cache:
            return self._cache["pairwise"][rows]
        graph = self.domain.neighbor_graph(self.stencil)
        dist = csgraph.dijkstra(graph, directed=False, indices=self.nodes[rows],
                                limit=2.0 * self.radius * (1 + 1e-9) + 1e-300)
        return dist[:, self.nodes]

    def subball(self, radius: float) -> "BallPatch":
        keep = self.geodesic <= radius
        sub = BallPatch(self.center, radius, self.nodes[keep], self.geodesic[keep], self.domain, self.stencil)
        if "pairwise" in self._cache:
            sub._cache["pairwise"] = self._cache["pairwise"][np.ix_(keep, keep)]
        return sub


def region_patch(domain, nodes, stencil: Optional[int] = None) -> BallPatch:
    """Wrap an arbitrary connected node set as a patch centred at its first node."""
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    if len(nodes) == 0:
        raise ValidationError("empty region")
    graph = domain.neighbor_graph(stencil)
    dist = csgraph.dijkstra(graph, directed=False, indices=int(nodes[0]))[nodes]
    if not np.all(np.isfinite(dist)):
        raise ValidationError("region is not connected")
    # radius >= half the diameter, so pairwise searches cover every pair
    return BallPatch(int(nodes[0]), float(dist.max()), nodes, dist, domain, stencil)


def geodesic_distances(domain, source: int, radius: float, stencil: Optional[int] = None) -> BallPatch:
    """Dijkstra distances from ``source`` over the metric-weighted lattice graph.

    The metric attached to ``domain`` (identity if none) sets the edge lengths.
    Returns the nodes within ``radius`` sorted by node id.
    """
    if not 0 <= int(source) < domain.n_nodes:
        raise SourceNotInDomainError(f"source not in domain: node {source}")
    if not radius > 0:
        raise ValidationError("radius must be positive")
    graph = domain.neighbor_graph(stencil)
    dist = csgraph.dijkstra(graph, directed=False, indices=int(source), limit=radius * (1 + 1e-12))
    nodes = np.flatnonzero(dist <= radius)
    return BallPatch(int(source), float(radius), nodes, dist[nodes], domain, stencil)


# --------------------------------------------------------------------------
# point clouds
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PointCloudGraph:
    """Gaussian-kernel graph on a point cloud with density-normalised weights.

    ``stiffness`` and ``mass`` define the generalised problem
    ``stiffness @ phi = lam * mass * phi`` approximating the Laplacian.
    """

    coords: np.ndarray
    bandwidth: float
    weights: sp.csr_matrix = field(repr=False)
    stiffness: sp.csr_matrix = field(repr=False)
    node_measure: np.ndarray = field(repr=False)
    spacing: float = 0.0
    bc: str = "graph"
    metric = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def total_volume(self) -> float:
        return float(self.node_measure.sum())

    @property
    def physical_volume(self) -> float:
        return 1.0

    def neighbor_graph(self, stencil=None) -> sp.csr_matrix:
        if "graph" not in self._cache:
            w = self.weights.tocoo()
            keep = w.row != w.col
            length = np.linalg.norm(self.coords[w.row[keep]] - self.coords[w.col[keep]], axis=1)
            self._cache["graph"] = sp.csr_matrix((length, (w.row[keep], w.col[keep])), shape=w.shape)
        return self._cache["graph"]


def build_point_cloud_graph(points, bandwidth: float, cutoff: float = 3.0) -> PointCloudGraph:
    """Kernel ``exp(-|x-y|^2 / bandwidth^2)`` truncated at ``cutoff * bandwidth``.

    Weights are density-normalised (``W / (q q^T)`` with ``q`` the kernel
    degree) so the limit operator is the Laplace-Beltrami operator regardless
    of sampling density. The stiffness ``4/eps (D - W)`` and mass ``D`` are
    both divided by the total degree, so the measure sums to one.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim != 2 or len(x) < 16:
        raise ValidationError("point cloud needs at least 16 points")
    if not bandwidth > 0:
        raise ValidationError("bandwidth must be positive")
    eps = bandwidth ** 2
    tree = cKDTree(x)
    dist = tree.sparse_distance_matrix(tree, cutoff * bandwidth, output_type="coo_matrix")
    r, c, d = dist.row, dist.col, dist.data
    n = len(x)
    W = sp.csr_matrix((np.exp(-d ** 2 / eps), (r, c)), shape=(n, n)) + sp.identity(n, format="csr")
    W = 0.5 * (W + W.T)
    n_comp, _ = csgraph.connected_components(W, directed=False)
    if n_comp > 1:
        raise GraphDisconnectedError(n_comp)
    q = np.asarray(W.sum(axis=1)).ravel()
    Qinv = sp.diags(1.0 / q)
    Wt = (Qinv @ W @ Qinv).tocsr()
    Wt = 0.5 * (Wt + Wt.T)
    deg = np.asarray(Wt.sum(axis=1)).ravel()
    total = deg.sum()
    stiffness = ((4.0 / eps) * (sp.diags(deg) - Wt) / total).tocsr()
    nn, _ = tree.query(x, k=2)
    return PointCloudGraph(coords=x, bandwidth=float(bandwidth), weights=Wt, stiffness=stiffness,
                           node_measure=deg / total, spacing=float(np.median(nn[:, 1])))
