"""Affine matrix-inequality programs over scalar / rectangular / symmetric
matrix variables, lowered to conic standard form and solved by an
interior-point backend (Clarabel primary, SCS fallback).

Standard form: minimize q'x subject to Ax + s = b, s in (nonnegative cone,
PSD cones). PSD slacks use the scaled upper-triangular column-major
vectorization (off-diagonals times sqrt(2)). Every returned "optimal"
solution is re-checked by eigenvalue evaluation of the original blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

DEFAULT_FEAS_TOL = 1e-7
DEFAULT_GAP_TOL = 1e-8
DEFAULT_EPS_PD = 1e-6
DEFAULT_MAX_ITER = 200


class LmiError(ValueError):
    pass


def min_eig(M: np.ndarray, sym_tol: float = 1e-12) -> float:
    """Smallest eigenvalue of a symmetric matrix (symmetry enforced)."""
    M = np.asarray(M, dtype=float)
    if M.shape[0] != M.shape[1]:
        raise LmiError("min_eig needs a square matrix")
    scale = max(1.0, np.abs(M).max())
    if np.abs(M - M.T).max() > sym_tol * scale:
        raise LmiError("matrix is not symmetric within tolerance")
    return float(scipy.linalg.eigvalsh((M + M.T) / 2.0)[0])


def max_eig(M: np.ndarray, sym_tol: float = 1e-12) -> float:
    return -min_eig(-np.asarray(M, dtype=float), sym_tol=sym_tol)


# ---------------------------------------------------------------------------
# variables

@dataclass(frozen=True)
class VarHandle:
    name: str
    kind: str                        # 'scalar' | 'rect' | 'sym'
    rows: int
    cols: int
    offset: int                      # first packed component
    comps: tuple                     # packed (i, j) entries, row-major

    @property
    def size(self):
        return len(self.comps)

    def unpack(self, x: np.ndarray):
        vals = x[self.offset:self.offset + self.size]
        if self.kind == "scalar":
            return float(vals[0])
        M = np.zeros((self.rows, self.cols))
        for v, (i, j) in zip(vals, self.comps):
            M[i, j] = v
            if self.kind == "sym":
                M[j, i] = v
        return M


def _make_comps(kind, rows, cols, mask=None):
    if kind == "scalar":
        return ((0, 0),)
    if kind == "sym":
        return tuple((i, j) for i in range(rows) for j in range(i, cols))
    if mask is not None:
        return tuple((i, j) for i in range(rows) for j in range(cols) if mask[i][j])
    return tuple((i, j) for i in range(rows) for j in range(cols))


# ---------------------------------------------------------------------------
# affine matrix expressions

class _Term:
    __slots__ = ("var", "L", "R", "trans", "coeff", "ravel_to", "ravel_row",
                 "post_L", "post_R")

    def __init__(self, var, L=None, R=None, trans=False, coeff=None, ravel_to=None,
                 ravel_row=False, post_L=None, post_R=None):
        self.var = var
        self.L = L            # left factor, or None for scalar terms
        self.R = R
        self.trans = trans
        self.coeff = coeff    # full coefficient matrix for scalar vars
        self.ravel_to = ravel_to    # (m, n) pre-ravel shape; term becomes a vector
        self.ravel_row = ravel_row  # raveled to a row instead of a column
        self.post_L = post_L  # factors applied after the ravel, if any
        self.post_R = post_R

    def _base(self, comp):
        if self.coeff is not None:
            return self.coeff
        i, j = comp
        if self.trans:
            i, j = j, i
        out = np.outer(self.L[:, i], self.R[j, :])
        if self.var.kind == "sym" and comp[0] != comp[1]:
            ii, jj = (comp[1], comp[0]) if not self.trans else (comp[0], comp[1])
            out = out + np.outer(self.L[:, ii], self.R[jj, :])
        return out

    def apply_ravel(self, base):
        out = base.reshape(1, -1) if self.ravel_row else base.reshape(-1, 1)
        if self.post_L is not None:
            out = self.post_L @ out
        if self.post_R is not None:
            out = out @ self.post_R
        return out

    def comp_matrix(self, comp):
        """Dense coefficient of one packed component of self.var."""
        out = self._base(comp)
        if self.ravel_to is not None:
            out = self.apply_ravel(out)
        return out

    def copy_with_post(self, post_L=None, post_R=None):
        pl, pr = self.post_L, self.post_R
        if post_L is not None:
            pl = post_L if pl is None else post_L @ pl
        if post_R is not None:
            pr = post_R if pr is None else pr @ post_R
        return _Term(self.var, L=self.L, R=self.R, trans=self.trans, coeff=self.coeff,
                     ravel_to=self.ravel_to, ravel_row=self.ravel_row,
                     post_L=pl, post_R=pr)

    def transposed(self):
        if self.ravel_to is not None:
            pl = self.post_R.T if self.post_R is not None else None
            pr = self.post_L.T if self.post_L is not None else None
            return _Term(self.var, L=self.L, R=self.R, trans=self.trans,
                         coeff=self.coeff, ravel_to=self.ravel_to,
                         ravel_row=not self.ravel_row, post_L=pl, post_R=pr)
        if self.coeff is not None:
            return _Term(self.var, coeff=self.coeff.T)
        return _Term(self.var, L=self.R.T, R=self.L.T, trans=not self.trans)


class MatExpr:
    """Matrix-valued expression affine in the program variables."""

    __array_ufunc__ = None  # keep numpy from elementwise-dispatching our operators

    def __init__(self, shape, const=None, terms=None):
        self.shape = tuple(shape)
        self.const = np.zeros(self.shape) if const is None else np.asarray(const, float)
        if self.const.shape != self.shape:
            raise LmiError(f"constant shape {self.const.shape} != {self.shape}")
        self.terms = list(terms) if terms else []

    # construction helpers -------------------------------------------------
    @staticmethod
    def constant(C):
        C = np.atleast_2d(np.asarray(C, float))
        return MatExpr(C.shape, const=C)

    @staticmethod
    def of(var: VarHandle):
        if var.kind == "scalar":
            return MatExpr((1, 1), terms=[_Term(var, coeff=np.eye(1))])
        m, n = var.rows, var.cols
        return MatExpr((m, n), terms=[_Term(var, L=np.eye(m), R=np.eye(n))])

    @staticmethod
    def scaled(var: VarHandle, C):
        """coefficient-matrix times a scalar variable."""
        if var.kind != "scalar":
            raise LmiError("scaled() expects a scalar variable")
        C = np.atleast_2d(np.asarray(C, float))
        return MatExpr(C.shape, terms=[_Term(var, coeff=C)])

    # algebra ---------------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, np.ndarray):
            other = MatExpr.constant(other)
        if self.shape != other.shape:
            raise LmiError(f"shape mismatch {self.shape} + {other.shape}")
        return MatExpr(self.shape, self.const + other.const, self.terms + other.terms)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        if isinstance(other, np.ndarray):
            other = MatExpr.constant(other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, a: float):
        a = float(a)
        terms = []
        for t in self.terms:
            # scaling the pre-ravel base is valid whether or not posts exist
            terms.append(_Term(t.var,
                               L=None if t.L is None else a * t.L,
                               R=t.R, trans=t.trans,
                               coeff=None if t.coeff is None else a * t.coeff,
                               ravel_to=t.ravel_to, ravel_row=t.ravel_row,
                               post_L=t.post_L, post_R=t.post_R))
        return MatExpr(self.shape, a * self.const, terms)

    __rmul__ = __mul__

    def lmul(self, A):
        """A @ expr."""
        A = np.atleast_2d(np.asarray(A, float))
        terms = []
        for t in self.terms:
            if t.ravel_to is not None:
                terms.append(t.copy_with_post(post_L=A))
            elif t.coeff is not None:
                terms.append(_Term(t.var, coeff=A @ t.coeff))
            else:
                terms.append(_Term(t.var, L=A @ t.L, R=t.R, trans=t.trans))
        return MatExpr((A.shape[0], self.shape[1]), A @ self.const, terms)

    def rmul(self, B):
        """expr @ B."""
        B = np.atleast_2d(np.asarray(B, float))
        terms = []
        for t in self.terms:
            if t.ravel_to is not None:
                terms.append(t.copy_with_post(post_R=B))
            elif t.coeff is not None:
                terms.append(_Term(t.var, coeff=t.coeff @ B))
            else:
                terms.append(_Term(t.var, L=t.L, R=t.R @ B, trans=t.trans))
        return MatExpr((self.shape[0], B.shape[1]), self.const @ B, terms)

    @property
    def T(self):
        return MatExpr((self.shape[1], self.shape[0]), self.const.T,
                       [t.transposed() for t in self.terms])

    def vec(self):
        """Row-major vectorization as an (m*n) x 1 expression."""
        if any(t.ravel_to is not None for t in self.terms):
            raise LmiError("expression is already vectorized")
        terms = [_Term(t.var, L=t.L, R=t.R, trans=t.trans, coeff=t.coeff,
                       ravel_to=self.shape) for t in self.terms]
        return MatExpr((self.shape[0] * self.shape[1], 1),
                       self.const.reshape(-1, 1), terms)

    def value(self, values: dict) -> np.ndarray:
        """Evaluate at a {var name: value} assignment."""
        out = self.const.copy()
        for t in self.terms:
            v = values[t.var.name]
            if t.coeff is not None:
                contrib = float(v) * t.coeff
            else:
                M = np.atleast_2d(v)
                if t.trans:
                    M = M.T
                contrib = t.L @ M @ t.R
            if t.ravel_to is not None:
                contrib = t.apply_ravel(contrib)
            out += contrib
        return out


class BlockMatrix:
    """Symmetric block-matrix builder; off-diagonal blocks mirror automatically."""

    def __init__(self, sizes):
        self.sizes = list(sizes)
        self.off = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.dim = int(self.off[-1])
        self.blocks = {}

    def set(self, i, j, expr):
        if isinstance(expr, (int, float)):
            expr = MatExpr.constant(np.array([[float(expr)]]))
        elif isinstance(expr, np.ndarray):
            expr = MatExpr.constant(expr)
        want = (self.sizes[i], self.sizes[j])
        if expr.shape != want:
            raise LmiError(f"block ({i},{j}) has shape {expr.shape}, expected {want}")
        if (i, j) in self.blocks or (j, i) in self.blocks:
            raise LmiError(f"block ({i},{j}) set twice")
        self.blocks[(i, j)] = expr

    def to_expr(self) -> MatExpr:
        total = MatExpr((self.dim, self.dim))
        for (i, j), expr in self.blocks.items():
            Ei = np.zeros((self.dim, self.sizes[i]))
            Ei[self.off[i]:self.off[i + 1]] = np.eye(self.sizes[i])
            Ej = np.zeros((self.dim, self.sizes[j]))
            Ej[self.off[j]:self.off[j + 1]] = np.eye(self.sizes[j])
            placed = expr.lmul(Ei).rmul(Ej.T)
            total = total + placed
            if i != j:
                total = total + placed.T
        return total


# ---------------------------------------------------------------------------
# programs

@dataclass
class StandardForm:
    """Conic standard-form triple: min q'x s.t. Ax + s = b, s in cones."""

    q: np.ndarray
    a_rows: np.ndarray
    a_cols: np.ndarray
    a_vals: np.ndarray
    b: np.ndarray
    cones: list          # [('l', m)] + [('s', d), ...] in row order

    @property
    def n(self):
        return self.q.size

    @property
    def m(self):
        return self.b.size

    def matrix(self):
        return sp.csc_matrix((self.a_vals, (self.a_rows, self.a_cols)),
                             shape=(self.m, self.n))

    def to_text(self) -> str:
        """Documented sparse dump: header, cones, objective, triplets, rhs."""
        lines = [f"sdp-standard-form v1 n={self.n} m={self.m}"]
        lines.append("cones " + " ".join(f"{k}:{d}" for k, d in self.cones))
        lines.append("q " + " ".join(repr(float(v)) for v in self.q))
        lines.append(f"A {self.a_rows.size}")
        for r, c, v in zip(self.a_rows, self.a_cols, self.a_vals):
            lines.append(f"{int(r)} {int(c)} {float(v)!r}")
        lines.append("b " + " ".join(repr(float(v)) for v in self.b))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "StandardForm":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = dict(tok.split("=") for tok in lines[0].split()[2:])
        n, m = int(head["n"]), int(head["m"])
        cones = []
        for tok in lines[1].split()[1:]:
            k, d = tok.split(":")
            cones.append((k, int(d)))
        q = np.array([float(v) for v in lines[2].split()[1:]])
        nnz = int(lines[3].split()[1])
        rows, cols, vals = [], [], []
        for ln in lines[4:4 + nnz]:
            r, c, v = ln.split()
            rows.append(int(r)); cols.append(int(c)); vals.append(float(v))
        b = np.array([float(v) for v in lines[4 + nnz].split()[1:]])
        assert q.size == n and b.size == m
        return cls(q=q, a_rows=np.array(rows, dtype=int), a_cols=np.array(cols, dtype=int),
                   a_vals=np.array(vals), b=b, cones=cones)


@dataclass
class SdpSolution:
    status: str                     # optimal | infeasible | max_iter | numerical_failure
    values: dict = field(default_factory=dict)
    objective: float = np.nan
    worst_violation: float = np.nan
    solver_status: str = ""
    iterations: int = 0

    @property
    def ok(self):
        return self.status == "optimal"


def _svec_pairs(d):
    # upper triangle, column-major (Clarabel's PSD triangle ordering)
    return [(i, j) for j in range(d) for i in range(j + 1)]


class SdpProgram:
    """Accumulates variables, objective, LMI blocks (expr <= 0 in the
    semidefinite order) and scalar lower bounds."""

    def __init__(self):
        self.variables: list[VarHandle] = []
        self._names = set()
        self.n = 0
        self.objective: dict[str, np.ndarray] = {}
        self.lmis: list[tuple[str, MatExpr]] = []
        self.bounds: list[tuple[VarHandle, float]] = []
        self.penalties: list[tuple[MatExpr, float, VarHandle]] = []

    # variables -------------------------------------------------------------
    def _add_var(self, name, kind, rows, cols, mask=None):
        if name in self._names:
            raise LmiError(f"duplicate variable name {name!r}")
        if rows <= 0 or cols <= 0:
            raise LmiError("variable dimensions must be positive")
        h = VarHandle(name, kind, rows, cols, self.n, _make_comps(kind, rows, cols, mask))
        self._names.add(name)
        self.variables.append(h)
        self.n += h.size
        return h

    def add_scalar(self, name, lb=None):
        h = self._add_var(name, "scalar", 1, 1)
        if lb is not None:
            self.bounds.append((h, float(lb)))
        return h

    def add_sym(self, name, dim):
        return self._add_var(name, "sym", dim, dim)

    def add_rect(self, name, rows, cols, mask=None):
        return self._add_var(name, "rect", rows, cols, mask)

    # constraints and objective ----------------------------------------------
    def add_lmi(self, expr: MatExpr, label: str = ""):
        """Require expr <= 0 (negative semidefinite)."""
        if expr.shape[0] != expr.shape[1]:
            raise LmiError("LMI blocks must be square")
        for t in expr.terms:
            if t.var.name not in self._names:
                raise LmiError(f"constraint references undeclared variable {t.var.name!r}")
        self.lmis.append((label or f"lmi{len(self.lmis)}", expr))

    def add_scalar_lb(self, var: VarHandle, lb: float):
        self.bounds.append((var, float(lb)))

    def add_objective(self, var: VarHandle, coeff=1.0):
        """Add coeff * var (scalar) or sum(coeff * packed components)."""
        arr = self.objective.setdefault(var.name, np.zeros(var.size))
        arr += np.broadcast_to(np.asarray(coeff, float), (var.size,))

    def lower_quadratic_penalty(self, expr: MatExpr, weight: float, name=None) -> VarHandle:
        """Add t >= ||expr||_F^2 via the Schur block [[t, vec'],[vec, I]] and
        weight*t to the objective; returns the epigraph variable."""
        t = self.add_scalar(name or f"_epi{len(self.penalties)}", lb=0.0)
        col = expr.vec()
        k = col.shape[0]
        blk = BlockMatrix([1, k])
        blk.set(0, 0, MatExpr.scaled(t, -np.eye(1)))
        blk.set(1, 0, col)
        blk.set(1, 1, -np.eye(k))
        self.add_lmi(blk.to_expr(), label=f"epigraph:{t.name}")
        self.add_objective(t, weight)
        self.penalties.append((expr, weight, t))
        return t

    # lowering ----------------------------------------------------------------
    def standard_form(self) -> StandardForm:
        q = np.zeros(self.n)
        byname = {v.name: v for v in self.variables}
        for name, coeffs in self.objective.items():
            v = byname[name]
            q[v.offset:v.offset + v.size] += coeffs

        rows, cols, vals = [], [], []
        b_parts = []
        cones = []
        row0 = 0

        if self.bounds:
            for k, (var, lb) in enumerate(self.bounds):
                rows.append(row0 + k)
                cols.append(var.offset)
                vals.append(-1.0)
                b_parts.append(-lb)
            cones.append(("l", len(self.bounds)))
            row0 += len(self.bounds)

        for _label, expr in self.lmis:
            d = expr.shape[0]
            pairs = _svec_pairs(d)
            pos = {pr: k for k, pr in enumerate(pairs)}
            scale = np.array([1.0 if i == j else np.sqrt(2.0) for (i, j) in pairs])
            # slack s = svec(-expr) in PSD cone: A[:,k] = svec(coeff_k), b = svec(-const)
            acc: dict[int, np.ndarray] = {}
            for t in expr.terms:
                for local, comp in enumerate(t.var.comps):
                    cm = t.comp_matrix(comp)
                    g = t.var.offset + local
                    if g in acc:
                        acc[g] = acc[g] + cm
                    else:
                        acc[g] = cm
            for g, cm in acc.items():
                cm = (cm + cm.T) / 2.0
                nz_i, nz_j = np.nonzero(np.triu(cm))
                for i, j in zip(nz_i, nz_j):
                    k = pos[(i, j)]
                    rows.append(row0 + k)
                    cols.append(g)
                    vals.append(cm[i, j] * scale[k])
            cst = (expr.const + expr.const.T) / 2.0
            bblk = np.zeros(len(pairs))
            for k, (i, j) in enumerate(pairs):
                bblk[k] = -cst[i, j] * scale[k]
            b_parts.extend(bblk.tolist())
            cones.append(("s", d))
            row0 += len(pairs)

        return StandardForm(q=q, a_rows=np.array(rows, dtype=int),
                            a_cols=np.array(cols, dtype=int), a_vals=np.array(vals),
                            b=np.array(b_parts), cones=cones)

    # evaluation ----------------------------------------------------------------
    def evaluate_violation(self, values: dict) -> float:
        """Max over constraints of the largest eigenvalue (negative = margin)."""
        worst = -np.inf
        for _label, expr in self.lmis:
            M = expr.value(values)
            worst = max(worst, max_eig(M, sym_tol=1e-8))
        for var, lb in self.bounds:
            v = values[var.name]
            worst = max(worst, lb - float(v))
        return worst


# ---------------------------------------------------------------------------
# backends

def _solve_clarabel(sf: StandardForm, feas_tol, gap_tol, max_iter):
    import clarabel

    A = sf.matrix()
    cones = []
    for kind, d in sf.cones:
        if kind == "l":
            cones.append(clarabel.NonnegativeConeT(d))
        else:
            cones.append(clarabel.PSDTriangleConeT(d))
    st = clarabel.DefaultSettings()
    st.verbose = False
    st.max_iter = max_iter
    st.tol_feas = min(feas_tol * 0.1, 1e-8)
    st.tol_gap_abs = gap_tol
    st.tol_gap_rel = gap_tol
    solver = clarabel.DefaultSolver(sp.csc_matrix((sf.n, sf.n)), sf.q, A, sf.b, cones, st)
    res = solver.solve()
    name = str(res.status)
    if name in ("Solved", "AlmostSolved"):
        status = "optimal"
    elif name in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        status = "infeasible"
    elif name in ("MaxIterations", "MaxTime"):
        status = "max_iter"
    else:
        status = "numerical_failure"
    x = np.array(res.x) if res.x is not None else np.full(sf.n, np.nan)
    return status, x, float(res.obj_val), name, int(res.iterations)


_SCS_PERM_CACHE: dict[int, np.ndarray] = {}


def _scs_perm(d):
    # canonical (upper col-major) -> scs (lower col-major) position map
    if d not in _SCS_PERM_CACHE:
        canon = _svec_pairs(d)
        scs_pairs = [(i, j) for j in range(d) for i in range(j, d)]
        pos = {pr: k for k, pr in enumerate(scs_pairs)}
        _SCS_PERM_CACHE[d] = np.array([pos[(j, i)] for (i, j) in canon], dtype=int)
    return _SCS_PERM_CACHE[d]


def _solve_scs(sf: StandardForm, feas_tol, gap_tol, max_iter):
    import scs

    # reorder PSD rows into scs's lower-triangular convention
    perm = np.arange(sf.m)
    row0 = 0
    l_rows = 0
    psd_dims = []
    for kind, d in sf.cones:
        if kind == "l":
            l_rows += d
            row0 += d
        else:
            ntri = d * (d + 1) // 2
            perm[row0:row0 + ntri] = row0 + _scs_perm(d)
            psd_dims.append(d)
            row0 += ntri
    rows = perm[sf.a_rows]
    A = sp.csc_matrix((sf.a_vals, (rows, sf.a_cols)), shape=(sf.m, sf.n))
    b = np.zeros(sf.m)
    b[perm] = sf.b
    cone = {}
    if l_rows:
        cone["l"] = l_rows
    if psd_dims:
        cone["s"] = psd_dims
    solver = scs.SCS({"A": A, "b": b, "c": sf.q}, cone,
                     eps_abs=min(feas_tol, 1e-7), eps_rel=min(feas_tol, 1e-7),
                     max_iters=max(20000, max_iter * 100), verbose=False)
    out = solver.solve()
    st = out["info"]["status"]
    if "solved" in st.lower():
        status = "optimal"
    elif "infeasible" in st.lower():
        status = "infeasible"
    elif "unbounded" in st.lower():
        status = "infeasible"
    else:
        status = "max_iter" if "iteration" in st.lower() else "numerical_failure"
    return status, out["x"], float(out["info"]["pobj"]), st, int(out["info"]["iter"])


_BACKENDS = {"clarabel": _solve_clarabel, "scs": _solve_scs}


@dataclass
class SolveOptions:
    feas_tol: float = DEFAULT_FEAS_TOL
    gap_tol: float = DEFAULT_GAP_TOL
    max_iter: int = DEFAULT_MAX_ITER
    backend: str = "clarabel"


def solve_standard_form(sf: StandardForm, options: SolveOptions | None = None):
    options = options or SolveOptions()
    return _BACKENDS[options.backend](sf, options.feas_tol, options.gap_tol,
                                      options.max_iter)


def solve_sdp(program: SdpProgram, options: SolveOptions | None = None) -> SdpSolution:
    """Lower to standard form, solve, unpack, and re-check feasibility."""
    options = options or SolveOptions()
    sf = program.standard_form()
    status, x, obj, raw, iters = solve_standard_form(sf, options)
    sol = SdpSolution(status=status, solver_status=raw, iterations=iters)
    if np.all(np.isfinite(x)):
        sol.values = {v.name: v.unpack(x) for v in program.variables}
        sol.objective = float(obj)
        sol.worst_violation = program.evaluate_violation(sol.values)
        if status == "optimal" and sol.worst_violation > options.feas_tol:
            sol.status = "numerical_failure"
    return sol
