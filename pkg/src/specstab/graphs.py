"""Sparse symmetric graph storage and pattern-restricted linear algebra.

A graph is held as an edge list over the strict lower/upper triangle: every
undirected edge (i, j), i < j, is stored exactly once.  Frobenius norms and
inner products account for both triangles, so all quantities agree with the
corresponding dense symmetric matrices.  Diagonal weights (self-similarities
produced by some generators and data files) are kept in a separate
bookkeeping array: they cancel exactly in the graph Laplacian and never enter
the perturbation pattern, but they do count toward ``nnz_stored``.
"""

from __future__ import annotations

import io
import warnings
import weakref
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.spatial.distance import pdist, squareform


class GraphStructureError(ValueError):
    """Malformed graph input: asymmetry, negative weights, bad file format."""


class DisconnectedGraphError(GraphStructureError):
    """Raised when an operation requires a connected graph."""

    def __init__(self, n_components: int, message: str | None = None):
        self.n_components = n_components
        super().__init__(message or f"graph is disconnected: {n_components} components")


@dataclass(frozen=True, eq=False)
class Pattern:
    """Edge set of an undirected graph on n vertices (no self loops).

    ``rows[e] < cols[e]`` for every stored edge, and edges are unique and
    lexicographically sorted.  Instances are immutable and hash by identity,
    which the Laplacian assembly cache relies on.
    """

    n: int
    rows: np.ndarray
    cols: np.ndarray

    @classmethod
    def from_pairs(cls, n: int, rows, cols) -> "Pattern":
        """Canonicalize arbitrary (i, j) index pairs: symmetrize, dedupe,
        drop diagonal entries."""
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        if rows.size and (rows.min() < 0 or cols.min() < 0
                          or rows.max() >= n or cols.max() >= n):
            raise GraphStructureError("edge index out of range")
        lo = np.minimum(rows, cols)
        hi = np.maximum(rows, cols)
        keep = lo != hi
        lo, hi = lo[keep], hi[keep]
        if lo.size:
            keys = lo * np.int64(n) + hi
            _, idx = np.unique(keys, return_index=True)
            lo, hi = lo[idx], hi[idx]
        return cls(n=n, rows=lo, cols=hi)

    @property
    def m(self) -> int:
        """Number of undirected edges (stored entry pairs are 2*m)."""
        return int(self.rows.size)

    def with_values(self, values) -> "PatternMatrix":
        return PatternMatrix(self, np.asarray(values, dtype=np.float64))

    def zeros(self) -> "PatternMatrix":
        return PatternMatrix(self, np.zeros(self.m))


@dataclass(frozen=True, eq=False)
class PatternMatrix:
    """Symmetric matrix supported on a pattern, one value per undirected edge.

    Sign-unrestricted: perturbation directions and gradients live here.
    """

    pattern: Pattern
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.pattern.m,):
            raise GraphStructureError(
                f"expected {self.pattern.m} edge values, got {self.values.shape}")

    def norm(self) -> float:
        """Frobenius norm of the full symmetric matrix."""
        return float(np.sqrt(2.0) * np.linalg.norm(self.values))

    def inner(self, other: "PatternMatrix") -> float:
        """Frobenius inner product; both operands must share the pattern."""
        _check_same_pattern(self.pattern, other.pattern)
        return float(2.0 * np.dot(self.values, other.values))

    def normalized(self) -> "PatternMatrix":
        nrm = self.norm()
        if nrm == 0.0:
            raise ZeroDivisionError("cannot normalize the zero matrix")
        return PatternMatrix(self.pattern, self.values / nrm)

    def to_csr(self) -> sp.csr_matrix:
        p = self.pattern
        return sp.csr_matrix(
            (np.concatenate([self.values, self.values]),
             (np.concatenate([p.rows, p.cols]), np.concatenate([p.cols, p.rows]))),
            shape=(p.n, p.n))

    def to_dense(self) -> np.ndarray:
        return self.to_csr().toarray()


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Nonnegative symmetric weight matrix of an undirected graph.

    ``diag`` is optional bookkeeping for stored diagonal entries; it is not
    part of the pattern and contributes nothing to the Laplacian.
    """

    pattern: Pattern
    weights: np.ndarray
    diag: np.ndarray | None = None

    def __post_init__(self):
        if self.weights.shape != (self.pattern.m,):
            raise GraphStructureError(
                f"expected {self.pattern.m} weights, got {self.weights.shape}")
        if self.weights.size and self.weights.min() < 0:
            raise GraphStructureError("negative edge weight")
        if self.diag is not None and self.diag.size and self.diag.min() < 0:
            raise GraphStructureError("negative diagonal weight")

    @property
    def n(self) -> int:
        return self.pattern.n

    @property
    def nnz_stored(self) -> int:
        """Stored nonzeros of the full matrix, diagonal included."""
        d = 0 if self.diag is None else int(np.count_nonzero(self.diag))
        return 2 * self.pattern.m + d

    def norm(self) -> float:
        """Frobenius norm of the off-diagonal (pattern) part."""
        return float(np.sqrt(2.0) * np.linalg.norm(self.weights))

    def as_pattern_matrix(self) -> PatternMatrix:
        return PatternMatrix(self.pattern, self.weights)

    def to_csr(self, with_diag: bool = False) -> sp.csr_matrix:
        A = self.as_pattern_matrix().to_csr()
        if with_diag and self.diag is not None:
            A = A + sp.diags(self.diag, format="csr")
        return A

    def perturbed_values(self, eps: float, direction: PatternMatrix) -> np.ndarray:
        """Edge values of W + eps*E (may be negative)."""
        _check_same_pattern(self.pattern, direction.pattern)
        return self.weights + eps * direction.values


def _check_same_pattern(a: Pattern, b: Pattern):
    if a is b:
        return
    if a.n != b.n or a.m != b.m or not (
            np.array_equal(a.rows, b.rows) and np.array_equal(a.cols, b.cols)):
        raise GraphStructureError("operands live on different patterns")


# ---------------------------------------------------------------------------
# Laplacian and its adjoint

_LAP_TEMPLATES: "weakref.WeakKeyDictionary[Pattern, tuple]" = weakref.WeakKeyDictionary()


def _laplacian_template(pattern: Pattern):
    """CSR skeleton of diag(A 1) - A for a fixed pattern.

    Returns (indptr, indices, perm) such that the CSR data array is
    ``full[perm]`` with ``full = [-v, -v, degrees]``.
    """
    tpl = _LAP_TEMPLATES.get(pattern)
    if tpl is not None:
        return tpl
    n, r, c = pattern.n, pattern.rows, pattern.cols
    rows_full = np.concatenate([r, c, np.arange(n, dtype=np.int64)])
    cols_full = np.concatenate([c, r, np.arange(n, dtype=np.int64)])
    nnz = rows_full.size
    marker = sp.coo_matrix((np.arange(nnz, dtype=np.float64), (rows_full, cols_full)),
                           shape=(n, n)).tocsr()
    tpl = (marker.indptr, marker.indices, marker.data.astype(np.int64))
    _LAP_TEMPLATES[pattern] = tpl
    return tpl


def laplacian(A: PatternMatrix | WeightMatrix) -> sp.csr_matrix:
    """Graph Laplacian diag(A 1) - A as a sparse symmetric matrix.

    Row sums vanish (to round-off); for nonnegative A the result is positive
    semidefinite.  Diagonal bookkeeping weights of a WeightMatrix cancel
    identically and are ignored.
    """
    if isinstance(A, WeightMatrix):
        A = A.as_pattern_matrix()
    if not isinstance(A, PatternMatrix):
        raise GraphStructureError("laplacian expects a PatternMatrix or WeightMatrix")
    p, v = A.pattern, A.values
    deg = np.bincount(p.rows, weights=v, minlength=p.n) \
        + np.bincount(p.cols, weights=v, minlength=p.n)
    indptr, indices, perm = _laplacian_template(p)
    full = np.concatenate([-v, -v, deg])
    return sp.csr_matrix((full[perm], indices, indptr), shape=(p.n, p.n))


def laplacian_adjoint(M, pattern: Pattern) -> PatternMatrix:
    """Adjoint of the Laplacian map in the Frobenius product.

    Satisfies <laplacian(A), M> = <A, laplacian_adjoint(M, P)> for every
    PatternMatrix A on P.  Edge value: (M_ii + M_jj)/2 - sym(M)_ij.
    """
    r, c = pattern.rows, pattern.cols
    if sp.issparse(M):
        d = M.diagonal()
        off = 0.5 * (np.asarray(M[r, c]).ravel() + np.asarray(M[c, r]).ravel())
    else:
        M = np.asarray(M, dtype=np.float64)
        if M.shape != (pattern.n, pattern.n):
            raise GraphStructureError("shape mismatch in laplacian_adjoint")
        d = np.diag(M)
        off = 0.5 * (M[r, c] + M[c, r])
    return PatternMatrix(pattern, 0.5 * (d[r] + d[c]) - off)


def project_pattern(M, pattern: Pattern) -> PatternMatrix:
    """Entrywise restriction of (M + M^T)/2 to the pattern.

    Idempotent and self-adjoint in the Frobenius product.
    """
    r, c = pattern.rows, pattern.cols
    if isinstance(M, PatternMatrix):
        _check_same_pattern(M.pattern, pattern)
        return M
    if sp.issparse(M):
        vals = 0.5 * (np.asarray(M[r, c]).ravel() + np.asarray(M[c, r]).ravel())
    else:
        M = np.asarray(M, dtype=np.float64)
        vals = 0.5 * (M[r, c] + M[c, r])
    return PatternMatrix(pattern, vals)


def n_components(pattern: Pattern) -> int:
    """Connected components of the pattern graph (isolated vertices count)."""
    if pattern.m == 0:
        return pattern.n
    adj = sp.csr_matrix(
        (np.ones(2 * pattern.m),
         (np.concatenate([pattern.rows, pattern.cols]),
          np.concatenate([pattern.cols, pattern.rows]))),
        shape=(pattern.n, pattern.n))
    ncomp, _ = csgraph.connected_components(adj, directed=False)
    return int(ncomp)


# ---------------------------------------------------------------------------
# Matrix Market I/O

_ASYM_TOL = 1e-12


def load_matrix_market(path) -> WeightMatrix:
    """Read a Matrix Market coordinate file into a WeightMatrix.

    Accepts real/integer/pattern fields with symmetric or general symmetry.
    General files must have symmetric content to relative tolerance 1e-12.
    Duplicate entries are summed; diagonal entries are moved out of the
    pattern into the bookkeeping array (with a warning); negative weights are
    rejected.
    """
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().strip()
        body = f.read()
    parts = header.lower().split()
    if len(parts) != 5 or parts[0] != "%%matrixmarket" or parts[1] != "matrix":
        raise GraphStructureError(f"not a Matrix Market header: {header!r}")
    layout, field, symmetry = parts[2], parts[3], parts[4]
    if layout != "coordinate":
        raise GraphStructureError(f"unsupported layout {layout!r} (coordinate only)")
    if field not in ("real", "integer", "pattern"):
        raise GraphStructureError(f"unsupported field {field!r}")
    if symmetry not in ("symmetric", "general"):
        raise GraphStructureError(f"unsupported symmetry {symmetry!r}")

    lines = [ln for ln in body.splitlines() if ln.strip() and not ln.startswith("%")]
    if not lines:
        raise GraphStructureError("missing size line")
    try:
        nrows, ncols, nnz = (int(t) for t in lines[0].split())
    except ValueError as exc:
        raise GraphStructureError(f"bad size line {lines[0]!r}") from exc
    if nrows != ncols:
        raise GraphStructureError(f"matrix is {nrows}x{ncols}, expected square")
    if len(lines) - 1 != nnz:
        raise GraphStructureError(f"expected {nnz} entries, found {len(lines) - 1}")

    want = 2 if field == "pattern" else 3
    try:
        table = np.loadtxt(io.StringIO("\n".join(lines[1:])), ndmin=2)
    except ValueError as exc:
        raise GraphStructureError(f"unparsable entry in {path}") from exc
    if nnz == 0:
        table = np.empty((0, want))
    if table.shape[1] < want:
        raise GraphStructureError(f"entries have {table.shape[1]} fields, expected {want}")
    ri = table[:, 0].astype(np.int64) - 1
    ci = table[:, 1].astype(np.int64) - 1
    vals = table[:, 2] if field != "pattern" else np.ones(len(ri))
    if len(ri) and (ri.min() < 0 or ci.min() < 0 or ri.max() >= nrows or ci.max() >= nrows):
        raise GraphStructureError("entry index out of range")

    A = sp.coo_matrix((vals, (ri, ci)), shape=(nrows, nrows)).tocsr()
    A.sum_duplicates()
    if symmetry == "general":
        scale = max(abs(A).max(), 1.0) if A.nnz else 1.0
        gap = abs(A - A.T).max() if A.nnz else 0.0
        if gap > _ASYM_TOL * scale:
            raise GraphStructureError(
                f"general file has asymmetric content: |A - A^T| = {gap:.3e}")
        A = 0.5 * (A + A.T)
    else:
        D = sp.diags(A.diagonal())
        A = A + A.T - D

    A = A.tocoo()
    off = A.row < A.col
    dmask = A.row == A.col
    n_diag = int(np.count_nonzero(dmask))
    diag = None
    if n_diag:
        diag = np.zeros(nrows)
        diag[A.row[dmask]] = A.data[dmask]
        warnings.warn(f"{n_diag} diagonal entries moved out of the pattern", stacklevel=2)
    rows, cols, v = A.row[off], A.col[off], A.data[off]
    if (v.size and v.min() < 0) or (diag is not None and diag.min() < 0):
        raise GraphStructureError("negative weight in input file")
    order = np.lexsort((cols, rows))
    pattern = Pattern(n=nrows, rows=rows[order], cols=cols[order])
    return WeightMatrix(pattern, v[order], diag)


def save_matrix_market(W: WeightMatrix, path, field: str = "real", comment: str = ""):
    """Write a WeightMatrix as a symmetric Matrix Market coordinate file.

    The lower triangle plus any stored diagonal is written, 1-based, with
    %.17g values so that load -> save -> load round-trips bit-exactly.
    """
    if field not in ("real", "pattern"):
        raise GraphStructureError(f"unsupported output field {field!r}")
    p = W.pattern
    di = np.array([], dtype=np.int64)
    dv = np.array([])
    if W.diag is not None:
        di = np.nonzero(W.diag)[0]
        dv = W.diag[di]
    rows = np.concatenate([p.cols, di])       # lower triangle: row >= col
    cols = np.concatenate([p.rows, di])
    vals = np.concatenate([W.weights, dv])
    order = np.lexsort((rows, cols))
    with open(path, "w", encoding="ascii") as f:
        f.write(f"%%MatrixMarket matrix coordinate {field} symmetric\n")
        if comment:
            f.write(f"%{comment}\n")
        f.write(f"{p.n} {p.n} {rows.size}\n")
        if field == "pattern":
            for i, j in zip(rows[order], cols[order]):
                f.write(f"{i + 1} {j + 1}\n")
        else:
            for i, j, v in zip(rows[order], cols[order], vals[order]):
                f.write(f"{i + 1} {j + 1} {v:.17g}\n")


# ---------------------------------------------------------------------------
# Generators

#: RNG family used by all seeded generators, recorded in run reports.
GENERATOR_ID = "numpy.random.default_rng (PCG64)"


def generate_sbm(p: int, q: int, seed: int) -> WeightMatrix:
    """Block-model weight matrix: p dense random blocks coupled along a path.

    W = kron(I_p, J) + kron(B_p, I_q) with J a dense symmetric q-by-q matrix
    with entries uniform in (0, 1) and B_p the path adjacency matrix.  J is
    drawn by sampling a q-by-q uniform matrix from ``default_rng(seed)`` and
    mirroring its upper triangle (diagonal included); deterministic per seed.
    J's diagonal is kept as bookkeeping weights.
    """
    if p < 2 or q < 1:
        raise GraphStructureError("need p >= 2 blocks and q >= 1 vertices per block")
    rng = np.random.default_rng(seed)
    A = rng.random((q, q))
    J = np.triu(A) + np.triu(A, 1).T
    n = p * q
    iu, ju = np.triu_indices(q, k=1)
    rows, cols, vals = [], [], []
    for b in range(p):
        rows.append(b * q + iu)
        cols.append(b * q + ju)
        vals.append(J[iu, ju])
    for b in range(p - 1):
        idx = np.arange(q, dtype=np.int64)
        rows.append(b * q + idx)
        cols.append((b + 1) * q + idx)
        vals.append(np.ones(q))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    order = np.lexsort((cols, rows))
    pattern = Pattern(n=n, rows=rows[order], cols=cols[order])
    diag = np.tile(np.diag(J), p)
    return WeightMatrix(pattern, vals[order], diag)


def compress_halve(W: WeightMatrix) -> WeightMatrix:
    """Halve the graph dimension by 2x2 block averaging, then zero the
    smallest entries so the off-diagonal density nnz/n^2 matches the input.

    Output dimension is (n-1)//2; an odd trailing vertex is dropped.  Ties at
    the density threshold keep the lexicographically smallest (i, j).
    """
    n = W.pattern.n
    n2 = (n - 1) // 2
    if n2 < 1:
        raise GraphStructureError("graph too small to compress")
    A = W.to_csr(with_diag=True)
    sel = sp.csr_matrix(
        (np.ones(2 * n2),
         (np.repeat(np.arange(n2, dtype=np.int64), 2), np.arange(2 * n2, dtype=np.int64))),
        shape=(n2, n))
    B = (sel @ A @ sel.T) * 0.25
    B = B.tocoo()
    off = B.row < B.col
    rows, cols, vals = B.row[off], B.col[off], B.data[off]

    density = (2.0 * W.pattern.m) / float(n) ** 2
    target_pairs = int(round(density * n2 * n2 / 2.0))
    target_pairs = min(target_pairs, vals.size)
    if target_pairs <= 0:
        return WeightMatrix(Pattern(n=n2, rows=np.array([], dtype=np.int64),
                                    cols=np.array([], dtype=np.int64)), np.array([]))
    order = np.lexsort((cols, rows, -vals))[:target_pairs]
    keep = np.sort(order)
    rows, cols, vals = rows[keep], cols[keep], vals[keep]
    order = np.lexsort((cols, rows))
    return WeightMatrix(Pattern(n=n2, rows=rows[order], cols=cols[order]), vals[order])


def principal_minor(W: WeightMatrix, size: int) -> WeightMatrix:
    """Leading size-by-size principal minor as a standalone graph."""
    if not 1 <= size <= W.pattern.n:
        raise GraphStructureError(f"size must be in [1, {W.pattern.n}]")
    keep = (W.pattern.rows < size) & (W.pattern.cols < size)
    pattern = Pattern(n=size, rows=W.pattern.rows[keep], cols=W.pattern.cols[keep])
    diag = None if W.diag is None else W.diag[:size].copy()
    return WeightMatrix(pattern, W.weights[keep], diag)


def build_knn_similarity(points, k_nn: int, sigma_rule: str = "self_kth") -> WeightMatrix:
    """Gaussian similarity graph on a mutualized k-nearest-neighbor pattern.

    Pairwise scores s_i(j) = exp(-4 ||x_i - x_j||^2 / sigma_i^2) are
    symmetrized by the maximum and restricted to the OR-symmetrized k-NN
    connectivity.  The local scale sigma_i is set by ``sigma_rule``:

    - ``'self_kth'``: distance to the (k-1)-th true neighbor, i.e. the k-th
      hit of a search that counts the query point itself (default; matches
      the reference preprocessing of the ecoli similarity graph).
    - ``'kth'``: distance to the k-th true neighbor.
    - ``'closest'``: distance to the nearest neighbor.

    Raises DisconnectedGraphError (naming the component count) if the
    resulting graph is disconnected.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise GraphStructureError("need at least two points of equal dimension")
    n = X.shape[0]
    if not 1 <= k_nn < n:
        raise GraphStructureError(f"k_nn must be in [1, {n - 1}]")
    D = squareform(pdist(X))
    D_offdiag = D + np.diag(np.full(n, np.inf))
    order = np.argsort(D_offdiag, axis=1, kind="stable")
    rng_idx = np.arange(n)
    if sigma_rule == "self_kth":
        sigma = D[rng_idx, order[:, k_nn - 2]] if k_nn >= 2 else np.zeros(n)
    elif sigma_rule == "kth":
        sigma = D[rng_idx, order[:, k_nn - 1]]
    elif sigma_rule == "closest":
        sigma = D[rng_idx, order[:, 0]]
    else:
        raise GraphStructureError(f"unknown sigma_rule {sigma_rule!r}")

    conn = np.zeros((n, n), dtype=bool)
    np.put_along_axis(conn, order[:, :k_nn], True, axis=1)
    conn |= conn.T
    np.fill_diagonal(conn, False)

    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.exp(-4.0 * D ** 2 / sigma[:, None] ** 2)
    scores = np.where(D == 0.0, 1.0, scores)          # coincident points
    scores = np.where((sigma[:, None] == 0.0) & (D > 0.0), 0.0, scores)
    sim = np.maximum(scores, scores.T)

    rows, cols = np.nonzero(np.triu(conn, k=1))
    pattern = Pattern(n=n, rows=rows.astype(np.int64), cols=cols.astype(np.int64))
    ncomp = n_components(pattern)
    if ncomp > 1:
        raise DisconnectedGraphError(ncomp,
                                     f"k-NN graph with k={k_nn} has {ncomp} components; increase k")
    return WeightMatrix(pattern, sim[rows, cols])
