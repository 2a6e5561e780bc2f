"""Sparse-recovery engines.

solve_l1 minimizes ||theta||_1 subject to A*Psi*theta = y (or, with
relaxed_epsilon > 0, ||A*Psi*theta - y||_2 <= epsilon*||y||_2) with a
first-order primal-dual scheme (Chambolle-Pock).  Only forward/adjoint
operator applications are used, no factorizations, so the same code runs
per-row systems and the large block-diagonal Kronecker systems.

solve_omp is the greedy baseline and solve_l0_bruteforce the exhaustive
oracle for tiny instances; both exist so the convex solver can be checked
against independent routes.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Philox
from scipy.sparse.linalg import LinearOperator, aslinearoperator, lsqr
from scipy.special import ndtri

from . import transforms
from .transforms import SparsityBasis

_CHECK_EVERY = 25
_POWER_ITERS = 30
# primal/dual step ratio and overrelaxation, tuned on planted-sparse and
# natural-image-row instances; tau*sigma*L^2 = 0.95^2 < 1 holds regardless
_STEP_RATIO = 0.25
_RELAX = 1.9


@dataclass(frozen=True)
class SolveConfig:
    """Tolerances for the l1 solver.

    feasibility_tol and relaxed_epsilon are relative to ||y||_2; a solve
    counts as converged once some iterate satisfies
    ||A*Psi*theta - y|| <= max(feasibility_tol, relaxed_epsilon)*||y||.
    objective_tol is the relative l1 decrease between residual checks below
    which a feasible solve stops early.  relaxed_epsilon = 0 selects the
    equality-constrained mode.
    """

    feasibility_tol: float = 1e-6
    objective_tol: float = 1e-8
    max_solver_iters: int = 5000
    relaxed_epsilon: float = 0.0

    def __post_init__(self):
        if self.feasibility_tol <= 0 or self.objective_tol <= 0:
            raise ValueError("tolerances must be > 0")
        if self.relaxed_epsilon < 0:
            raise ValueError("relaxed_epsilon must be >= 0")
        if self.max_solver_iters < 1:
            raise ValueError("max_solver_iters must be >= 1")


@dataclass
class SolveResult:
    theta_hat: np.ndarray
    residual_l2: float
    l1_objective: float
    iterations: int
    converged: bool
    # (iteration, l1 objective, residual l2) at each residual check
    trace: list = field(default_factory=list)


def trace_to_csv(result: SolveResult, path) -> None:
    """Dump a solve trace for debugging."""
    with open(path, "w") as fh:
        fh.write("iteration,l1_objective,residual_l2\n")
        for it, obj, res in result.trace:
            fh.write(f"{it},{obj!r},{res!r}\n")


def _as_operator(a) -> LinearOperator:
    if isinstance(a, LinearOperator):
        return a
    return aslinearoperator(np.asarray(a, dtype=np.float64))


def _soft_threshold(v: np.ndarray, t) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _seeded_normals(shape, key0: int, key1: int) -> np.ndarray:
    """Platform-stable standard normals (Philox words through the inverse CDF)."""
    raw = Philox(key=np.array([key0, key1], dtype=np.uint64)).random_raw(int(np.prod(shape)))
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return ndtri(u).reshape(shape)


class BatchedOperator:
    """A stack of independent m x n systems sharing one sparsity basis.

    phi has shape (batch, m, n); forward maps coefficient rows (batch, N)
    to measurement rows (batch, m) through the basis synthesis.
    """

    def __init__(self, phi: np.ndarray, basis: SparsityBasis | None):
        self.phi = np.asarray(phi, dtype=np.float64)
        self.basis = basis
        self.batch, self.m, self.n = self.phi.shape
        if basis is not None and basis.size != self.n:
            raise ValueError(f"basis size {basis.size} does not match n={self.n}")

    def forward(self, theta: np.ndarray) -> np.ndarray:
        x = theta if self.basis is None else transforms.synthesize(self.basis, theta)
        return np.matmul(self.phi, x[:, :, None])[..., 0]

    def adjoint(self, w: np.ndarray) -> np.ndarray:
        x = np.matmul(self.phi.transpose(0, 2, 1), w[:, :, None])[..., 0]
        return x if self.basis is None else transforms.analyze(self.basis, x)

    def take(self, idx: np.ndarray) -> "BatchedOperator":
        return BatchedOperator(self.phi[idx], self.basis)

    def single(self, b: int) -> LinearOperator:
        return _ComposedOperator(self.phi[b], self.basis)


class _SingleOperator:
    """Adapter presenting one LinearOperator (.matvec/.rmatvec) as a batch of 1."""

    def __init__(self, op: LinearOperator, basis: SparsityBasis | None):
        self.op = op
        self.basis = basis
        self.batch = 1
        self.m = op.shape[0]
        self.n = op.shape[1] if basis is None else basis.size
        if basis is not None and basis.size != op.shape[1]:
            raise ValueError(f"basis size {basis.size} does not match operator cols {op.shape[1]}")

    def forward(self, theta: np.ndarray) -> np.ndarray:
        t = theta[0]
        x = t if self.basis is None else transforms.synthesize(self.basis, t)
        return np.asarray(self.op.matvec(x), dtype=np.float64).reshape(1, self.m)

    def adjoint(self, w: np.ndarray) -> np.ndarray:
        x = np.asarray(self.op.rmatvec(w[0]), dtype=np.float64).reshape(-1)
        if self.basis is not None:
            x = transforms.analyze(self.basis, x)
        return x.reshape(1, self.n)

    def take(self, idx: np.ndarray) -> "_SingleOperator":
        if len(idx) == 1 and idx[0] == 0:
            return self
        raise IndexError("single operator only has batch index 0")

    def single(self, b: int) -> LinearOperator:
        if b != 0:
            raise IndexError("single operator only has batch index 0")

        outer = self

        class _View(LinearOperator):
            def __init__(self):
                super().__init__(dtype=np.float64, shape=(outer.m, outer.n))

            def _matvec(self, v):
                return outer.forward(np.asarray(v, dtype=np.float64).reshape(1, -1))[0]

            def _rmatvec(self, w):
                return outer.adjoint(np.asarray(w, dtype=np.float64).reshape(1, -1))[0]

        return _View()


def _operator_norms(op, n_iters: int = _POWER_ITERS) -> np.ndarray:
    """Per-problem spectral norm estimates via power iteration.

    The basis factor is orthonormal, so this equals the norm of the sensing
    part; power iteration keeps everything operator-only.  A deterministic
    seeded start vector keeps results reproducible.
    """
    v = _seeded_normals((op.batch, op.n), 0x9E37, 0x79B9)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    lam = np.ones(op.batch)
    for _ in range(n_iters):
        w = op.adjoint(op.forward(v))
        lam = np.linalg.norm(w, axis=1)
        nz = lam > 0
        v[nz] = w[nz] / lam[nz, None]
    return np.sqrt(lam) * 1.02  # safety margin so tau*sigma*L^2 < 1


@dataclass
class BatchSolveState:
    """Results of a batched solve, aligned with the input batch order."""

    theta: np.ndarray
    residual: np.ndarray
    objective: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    traces: list


def _determined_batch(op, y: np.ndarray, cfg: SolveConfig, keep_trace: bool) -> BatchSolveState:
    """Degenerate m >= n case: the constraint set pins theta, so l1 plays no
    role; LSQR (still operator-only) recovers the unique consistent point."""
    batch, m, n = op.batch, op.m, op.n
    y = np.asarray(y, dtype=np.float64).reshape(batch, m)
    ynorm = np.linalg.norm(y, axis=1)
    bound = max(cfg.feasibility_tol, cfg.relaxed_epsilon) * ynorm
    theta = np.zeros((batch, n))
    residual = np.zeros(batch)
    objective = np.zeros(batch)
    iterations = np.zeros(batch, dtype=np.int64)
    traces: list = [[] for _ in range(batch)]
    for b in range(batch):
        if ynorm[b] == 0:
            continue
        problem = op.single(b)
        sol = lsqr(problem, y[b], atol=1e-14, btol=1e-14, iter_lim=max(10 * n, 200))
        theta[b] = sol[0]
        iterations[b] = sol[2]
        residual[b] = np.linalg.norm(problem.matvec(sol[0]) - y[b])
        objective[b] = np.abs(sol[0]).sum()
        if keep_trace:
            traces[b].append((int(sol[2]), float(objective[b]), float(residual[b])))
    converged = residual <= np.maximum(bound, 1e-300)
    return BatchSolveState(theta, residual, objective, iterations, converged, traces)


class _ComposedOperator(LinearOperator):
    """scipy view of one dense sensing matrix composed with a basis."""

    def __init__(self, phi: np.ndarray, basis: SparsityBasis | None):
        super().__init__(dtype=np.float64, shape=phi.shape)
        self._phi = phi
        self._basis = basis

    def _matvec(self, v):
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        x = v if self._basis is None else transforms.synthesize(self._basis, v)
        return self._phi @ x

    def _rmatvec(self, w):
        x = self._phi.T @ np.asarray(w, dtype=np.float64).reshape(-1)
        return x if self._basis is None else transforms.analyze(self._basis, x)


def _pdhg_batch(op, y: np.ndarray, cfg: SolveConfig, keep_trace: bool) -> BatchSolveState:
    """Primal-dual iterations over a batch of independent problems.

    Problems that reach feasibility and an l1 plateau are retired and the
    working set compacted, so sweeps where most subproblems converge early
    stay cheap.
    """
    if op.m >= op.n:
        return _determined_batch(op, y, cfg, keep_trace)
    batch, m, n = op.batch, op.m, op.n
    y = np.asarray(y, dtype=np.float64).reshape(batch, m)
    ynorm = np.linalg.norm(y, axis=1)
    feas_rel = max(cfg.feasibility_tol, cfg.relaxed_epsilon)
    bound_full = feas_rel * ynorm
    eps_full = cfg.relaxed_epsilon * ynorm

    best_theta = np.zeros((batch, n))
    best_obj = np.full(batch, np.inf)
    best_res = ynorm.copy()
    iters_done = np.zeros(batch, dtype=np.int64)
    traces: list = [[] for _ in range(batch)]

    # zero measurements: theta = 0 is feasible with minimal l1
    best_obj[ynorm == 0] = 0.0
    best_res[ynorm == 0] = 0.0

    work = np.flatnonzero(ynorm > 0)
    if work.size:
        sub = op.take(work)
        # solve against y/||y||: the iteration is not scale-equivariant (the
        # soft-threshold has a fixed size), so normalizing keeps small-residual
        # problems in the same well-tuned regime as unit-scale ones
        yscale = ynorm[work]
        ysub = y[work] / yscale[:, None]
        L = np.maximum(_operator_norms(sub), 1e-12)
        tau = _STEP_RATIO * 0.95 / L
        sigma = 0.95 / (_STEP_RATIO * L)
        x = np.zeros((work.size, n))
        z = np.zeros((work.size, m))
        prev_obj = np.full(work.size, np.inf)

        k = 0
        while k < cfg.max_solver_iters:
            k += 1
            xt = _soft_threshold(x - tau[:, None] * sub.adjoint(z), tau[:, None])
            w = z + sigma[:, None] * (sub.forward(2.0 * xt - x) - ysub)
            if cfg.relaxed_epsilon > 0:
                wn = np.linalg.norm(w, axis=1)
                scale = np.maximum(0.0, 1.0 - sigma * cfg.relaxed_epsilon / np.maximum(wn, 1e-300))
                zt = w * scale[:, None]
            else:
                zt = w
            x = x + _RELAX * (xt - x)
            z = z + _RELAX * (zt - z)

            if k % _CHECK_EVERY == 0 or k == cfg.max_solver_iters:
                res = np.linalg.norm(sub.forward(x) - ysub, axis=1) * yscale
                obj = np.abs(x).sum(axis=1) * yscale
                iters_done[work] = k
                if keep_trace:
                    for local, g in enumerate(work):
                        traces[g].append((k, float(obj[local]), float(res[local])))
                feas = res <= bound_full[work]
                improve = feas & (obj < best_obj[work])
                gidx = work[improve]
                best_theta[gidx] = x[improve] * yscale[improve, None]
                best_obj[gidx] = obj[improve]
                best_res[gidx] = res[improve]

                rel_dec = np.abs(prev_obj - obj) / np.maximum(obj, 1e-300)
                done = feas & np.isfinite(prev_obj) & (rel_dec <= cfg.objective_tol)
                done &= np.isfinite(best_obj[work])
                prev_obj = obj

                if k == cfg.max_solver_iters:
                    # never-feasible problems fall back to the final iterate
                    miss = ~np.isfinite(best_obj[work])
                    gmiss = work[miss]
                    best_theta[gmiss] = x[miss] * yscale[miss, None]
                    best_obj[gmiss] = obj[miss]
                    best_res[gmiss] = res[miss]
                    break
                if np.any(done):
                    keep = ~done
                    if not np.any(keep):
                        break
                    if keep.sum() <= 0.7 * work.size:
                        kidx = np.flatnonzero(keep)
                        work = work[kidx]
                        sub = sub.take(kidx)
                        ysub = ysub[kidx]
                        yscale = yscale[kidx]
                        tau = tau[kidx]
                        sigma = sigma[kidx]
                        x = x[kidx]
                        z = z[kidx]
                        prev_obj = prev_obj[kidx]

    converged = np.isfinite(best_obj) & (best_res <= np.maximum(bound_full, 0.0) + 1e-300)
    return BatchSolveState(best_theta, best_res, best_obj, iters_done, converged, traces)


def solve_l1(apply_a, basis: SparsityBasis | None, y: np.ndarray, cfg: SolveConfig | None = None,
             keep_trace: bool = True) -> SolveResult:
    """Recover the minimum-l1 coefficient vector consistent with y.

    apply_a is the sensing operator (dense matrix or anything with
    matvec/rmatvec); basis is the sparsity basis (None means identity).
    Returns the best feasible iterate encountered; converged=False flags a
    solve that never met the residual bound within max_solver_iters.
    """
    cfg = cfg or SolveConfig()
    op = _SingleOperator(_as_operator(apply_a), basis)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != op.m:
        raise ValueError(f"measurement length {y.shape[0]} does not match operator rows {op.m}")
    state = _pdhg_batch(op, y[None, :], cfg, keep_trace)
    return SolveResult(
        theta_hat=state.theta[0],
        residual_l2=float(state.residual[0]),
        l1_objective=float(state.objective[0]),
        iterations=int(state.iterations[0]),
        converged=bool(state.converged[0]),
        trace=state.traces[0],
    )


def solve_l1_batch(phi: np.ndarray, basis: SparsityBasis | None, y: np.ndarray,
                   cfg: SolveConfig | None = None) -> BatchSolveState:
    """Vectorized solve of independent systems sharing (m, n) and one basis.

    phi: (batch, m, n) stack of sensing matrices; y: (batch, m).
    Used by the reconstruction sweeps, where every row/band poses the same
    sized problem.
    """
    cfg = cfg or SolveConfig()
    op = BatchedOperator(phi, basis)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (op.batch, op.m):
        raise ValueError(f"y shape {y.shape} does not match batch ({op.batch}, {op.m})")
    return _pdhg_batch(op, y, cfg, keep_trace=False)


def solve_omp(apply_a, basis: SparsityBasis | None, y: np.ndarray,
              sparsity_budget: int | None = None, residual_tol: float | None = None) -> SolveResult:
    """Orthogonal matching pursuit baseline.

    Greedy pick of the atom best correlated with the residual (normalized by
    atom norm), then a least-squares refit over the active set.  Stops after
    sparsity_budget atoms or once the residual drops below residual_tol*||y||.

    With a dense sensing matrix the composed dictionary A*Psi is materialized
    (one batched analysis over the rows of A); with a matrix-free operator the
    correlations fall back to unnormalized adjoint applications.
    """
    if sparsity_budget is None and residual_tol is None:
        raise ValueError("need sparsity_budget or residual_tol")
    if sparsity_budget is not None and sparsity_budget < 1:
        raise ValueError("sparsity_budget must be >= 1")
    if residual_tol is not None and residual_tol <= 0:
        raise ValueError("residual_tol must be > 0")

    dense = not isinstance(apply_a, LinearOperator)
    op = _as_operator(apply_a)
    m = op.shape[0]
    n = op.shape[1] if basis is None else basis.size
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != m:
        raise ValueError(f"measurement length {y.shape[0]} does not match operator rows {m}")

    if dense:
        a = np.asarray(apply_a, dtype=np.float64)
        # row k of A*Psi is the analysis transform of row k of A
        dictionary = a if basis is None else transforms.analyze(basis, a)
        norms = np.linalg.norm(dictionary, axis=0)
        norms[norms == 0] = 1.0

        def correlate(r):
            return (dictionary.T @ r) / norms

        def column(j):
            return dictionary[:, j]
    else:
        def correlate(r):
            v = op.rmatvec(r)
            return v if basis is None else transforms.analyze(basis, v)

        def column(j):
            e = np.zeros(n)
            e[j] = 1.0
            v = e if basis is None else transforms.synthesize(basis, e)
            return np.asarray(op.matvec(v), dtype=np.float64).reshape(-1)

    budget = sparsity_budget if sparsity_budget is not None else m
    rtol = residual_tol if residual_tol is not None else 0.0
    ynorm = np.linalg.norm(y)

    support: list[int] = []
    cols = np.empty((m, 0))
    coef = np.empty(0)
    resid = y.copy()
    trace = []
    it = 0
    while len(support) < budget and np.linalg.norm(resid) > rtol * max(ynorm, 1e-300):
        it += 1
        c = correlate(resid)
        c[support] = 0.0
        j = int(np.argmax(np.abs(c)))
        if c[j] == 0.0:
            break
        support.append(j)
        cols = np.hstack([cols, column(j)[:, None]])
        coef, *_ = np.linalg.lstsq(cols, y, rcond=None)
        resid = y - cols @ coef
        trace.append((it, float(np.abs(coef).sum()), float(np.linalg.norm(resid))))

    theta = np.zeros(n)
    theta[support] = coef
    rnorm = float(np.linalg.norm(resid))
    converged = rnorm <= max(rtol, 1e-10) * max(ynorm, 1e-300) or (
        sparsity_budget is not None and len(support) == sparsity_budget
    )
    return SolveResult(theta, rnorm, float(np.abs(theta).sum()), it, converged, trace)


def solve_l0_bruteforce(a: np.ndarray, y: np.ndarray, k: int) -> SolveResult:
    """Exhaustive minimum-residual search over all supports of size <= k.

    NP-hard by nature, so guarded to tiny instances (n <= 20, k <= 3); exists
    purely as an oracle for the other solvers.
    """
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    m, n = a.shape
    if y.shape[0] != m:
        raise ValueError(f"measurement length {y.shape[0]} does not match matrix rows {m}")
    if n > 20 or k > 3:
        raise ValueError(f"instance too large for brute force (n={n}, k={k}; need n<=20, k<=3)")
    if k < 0:
        raise ValueError("k must be >= 0")

    best_theta = np.zeros(n)
    best_res = float(np.linalg.norm(y))
    for size in range(1, k + 1):
        for support in itertools.combinations(range(n), size):
            sub = a[:, support]
            coef, *_ = np.linalg.lstsq(sub, y, rcond=None)
            r = float(np.linalg.norm(y - sub @ coef))
            if r < best_res - 1e-15:
                best_res = r
                best_theta = np.zeros(n)
                best_theta[list(support)] = coef
    return SolveResult(
        theta_hat=best_theta,
        residual_l2=best_res,
        l1_objective=float(np.abs(best_theta).sum()),
        iterations=0,
        converged=True,
        trace=[],
    )
