"""Dense convex quadratic programming by null-space reduction plus a primal
active-set iteration.

    minimize    0.5 x' P x + q' x
    subject to  A x  = b        (equalities)
                G x <= h        (inequalities)

Equalities are eliminated through a null-space basis (either supplied by the
caller, who may know it analytically, or computed from a QR factorization),
then the reduced inequality-constrained problem is solved with a textbook
primal active-set method.  Everything is dense and deterministic: fixed
tie-breaking, no randomization, exact working-set termination.  Problems here
are small (tens of variables), which is the regime this method is good at.

The reduced Hessian must be positive definite on the feasible subspace; a
singular system triggers a deterministic least-squares fallback.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, qr as _qr

_FEAS_TOL = 1e-8
_STEP_TOL = 1e-11
_MULT_TOL = 1e-9
_RATIO_EPS = 1e-12

# Quadratic penalty applied to violation slacks when an infeasible problem is
# re-solved with its relaxable rows softened.
RELAX_PENALTY = 1e6

STATUS_OPTIMAL = "optimal"
STATUS_RELAXED = "infeasible-relaxed"


class QPInfeasibleError(Exception):
    """No point satisfies the constraints (within tolerance)."""


@dataclass
class QProblem:
    """One quadratic program in standard form.

    Optional structural hints speed up repeated solves of problems whose
    equality structure the caller knows analytically:

    * ``null_basis`` / ``particular``: columns spanning the null space of the
      equality matrix and one particular solution of ``A x = b``.
    * ``coord_rows``: row indices such that reduced coordinates of any
      equality-consistent point z are exactly ``z[coord_rows]``.
    * ``feasible_guess``: a point believed feasible; verified before use.
    * ``relaxable``: boolean mask over inequality rows that may be softened
      with penalized slacks if the problem proves infeasible.
    """

    quadratic: np.ndarray
    linear: np.ndarray
    ineq_matrix: np.ndarray
    ineq_rhs: np.ndarray
    eq_matrix: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    eq_rhs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    relaxable: np.ndarray | None = None
    null_basis: np.ndarray | None = None
    particular: np.ndarray | None = None
    coord_rows: np.ndarray | None = None
    feasible_guess: np.ndarray | None = None
    reduced_cache: tuple | None = None
    prefer_dense: bool = False

    def __post_init__(self) -> None:
        self.quadratic = np.asarray(self.quadratic, dtype=float)
        self.linear = np.asarray(self.linear, dtype=float)
        self.ineq_matrix = np.asarray(self.ineq_matrix, dtype=float)
        self.ineq_rhs = np.asarray(self.ineq_rhs, dtype=float)
        self.eq_matrix = np.asarray(self.eq_matrix, dtype=float)
        self.eq_rhs = np.asarray(self.eq_rhs, dtype=float)
        n = self.linear.size
        if self.quadratic.shape != (n, n):
            raise ValueError("quadratic term shape mismatch")
        if self.ineq_matrix.ndim != 2 or self.ineq_matrix.shape[1] != n:
            raise ValueError("inequality matrix shape mismatch")
        if self.ineq_matrix.shape[0] != self.ineq_rhs.size:
            raise ValueError("inequality rhs length mismatch")
        if self.eq_matrix.size and self.eq_matrix.shape[1] != n:
            raise ValueError("equality matrix shape mismatch")
        # Per-instance vectors are always checked; the large coefficient
        # matrices only when they were not produced by a vetted cached
        # structure (signalled by reduced_cache).
        check = [self.linear, self.ineq_rhs, self.eq_rhs]
        if self.reduced_cache is None:
            check += [self.quadratic, self.ineq_matrix, self.eq_matrix]
        for a in check:
            if a.size and not np.all(np.isfinite(a)):
                raise ValueError("problem data must be finite")

    @property
    def num_variables(self) -> int:
        return self.linear.size


@dataclass
class QPSolution:
    """Solver output: primal point, multipliers and a KKT certificate."""

    x: np.ndarray
    objective: float
    eq_multipliers: np.ndarray
    ineq_multipliers: np.ndarray
    status: str
    iterations: int
    kkt_residual: float


@dataclass(frozen=True)
class KKTResiduals:
    stationarity: float
    primal: float
    complementarity: float
    dual: float

    def max(self) -> float:
        return max(self.stationarity, self.primal,
                   self.complementarity, self.dual)


def kkt_residuals(problem: QProblem, x: np.ndarray, eq_mult: np.ndarray,
                  ineq_mult: np.ndarray) -> KKTResiduals:
    """First-order optimality residuals of a candidate point, infinity norm."""
    grad = problem.quadratic @ x + problem.linear
    if problem.eq_matrix.size:
        grad = grad + problem.eq_matrix.T @ eq_mult
    if problem.ineq_matrix.size:
        grad = grad + problem.ineq_matrix.T @ ineq_mult
    stationarity = float(np.max(np.abs(grad))) if grad.size else 0.0
    primal = 0.0
    slack = np.zeros(0)
    if problem.ineq_matrix.size:
        slack = problem.ineq_matrix @ x - problem.ineq_rhs
        primal = max(primal, float(np.max(slack, initial=0.0)))
    if problem.eq_matrix.size:
        primal = max(primal, float(np.max(np.abs(problem.eq_matrix @ x
                                                 - problem.eq_rhs))))
    complementarity = (float(np.max(np.abs(ineq_mult * slack)))
                       if slack.size else 0.0)
    dual = float(max(0.0, -np.min(ineq_mult, initial=0.0)))
    return KKTResiduals(stationarity, primal, complementarity, dual)


def _solve_kkt(kkt: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(kkt, rhs, rcond=None)[0]


def _active_set(h_mat: np.ndarray, g_vec: np.ndarray, g_ineq: np.ndarray,
                h_ineq: np.ndarray, y: np.ndarray, max_iter: int,
                factor=None) -> tuple[np.ndarray, np.ndarray, int]:
    """Primal active-set loop for min 0.5 y'Hy + g'y  s.t.  G y <= h.

    ``y`` must be feasible on entry.  Returns the optimum, the full
    multiplier vector, and the iteration count.

    With a positive definite H the working-set subproblems are solved in
    range space against a (cachable) Cholesky factor of H; a singular H
    falls back to dense KKT solves.  ``factor`` optionally supplies the
    precomputed pair (cho_factor(H), H^-1 G').
    """
    n = y.size
    m = h_ineq.size
    if factor is None:
        try:
            cho = cho_factor(h_mat, lower=True, check_finite=False)
            hinv_gt = (cho_solve(cho, g_ineq.T, check_finite=False)
                       if m else np.zeros((n, 0)))
            factor = (cho, hinv_gt)
        except np.linalg.LinAlgError:
            factor = ()
    use_range = bool(factor)
    if use_range:
        cho, hinv_gt = factor
    work: list[int] = []
    slack = h_ineq - g_ineq @ y if m else np.zeros(0)
    for it in range(1, max_iter + 1):
        grad = h_mat @ y + g_vec
        k = len(work)
        if use_range:
            base = cho_solve(cho, grad, check_finite=False)
            if k:
                gw = g_ineq[work]
                hg_w = hinv_gt[:, work]
                schur = gw @ hg_w
                rhs = -(gw @ base)
                try:
                    mu_w = np.linalg.solve(schur, rhs)
                except np.linalg.LinAlgError:
                    mu_w = np.linalg.lstsq(schur, rhs, rcond=None)[0]
                p = -base - hg_w @ mu_w
            else:
                p = -base
                mu_w = np.zeros(0)
        elif k:
            gw = g_ineq[work]
            kkt = np.zeros((n + k, n + k))
            kkt[:n, :n] = h_mat
            kkt[:n, n:] = gw.T
            kkt[n:, :n] = gw
            rhs = np.concatenate([-grad, np.zeros(k)])
            sol = _solve_kkt(kkt, rhs)
            p = sol[:n]
            mu_w = sol[n:]
        else:
            p = _solve_kkt(h_mat, -grad)
            mu_w = np.zeros(0)
        # The achievable step accuracy degrades with the multiplier scale
        # (roundoff floor of the subproblem solve), so the zero-step test
        # must too.
        mu_scale = float(np.abs(mu_w).max()) if k else 0.0
        step_tol = (_STEP_TOL * (1.0 + float(np.abs(y).max()))
                    + 1e-15 * mu_scale)
        if float(np.abs(p).max()) <= step_tol:
            if k == 0 or float(mu_w.min()) >= -_MULT_TOL * (1.0 + mu_scale):
                mu = np.zeros(m)
                if k:
                    mu[work] = np.maximum(mu_w, 0.0)
                return y, mu, it
            work.pop(int(np.argmin(mu_w)))
            continue
        # Ratio test over rows not in the working set with ascent along p.
        alpha = 1.0
        block = -1
        if m:
            gp = g_ineq @ p
            mask = gp > _RATIO_EPS
            if k:
                mask[work] = False
            idx = np.nonzero(mask)[0]
            if idx.size:
                ratios = np.maximum(slack[idx], 0.0) / gp[idx]
                j = int(np.argmin(ratios))
                if ratios[j] < alpha:
                    alpha = float(ratios[j])
                    block = int(idx[j])
            slack = slack - alpha * gp
        y = y + alpha * p
        if block >= 0:
            work.append(block)
    raise RuntimeError("active-set iteration limit exceeded")


def _phase_one(g_ineq: np.ndarray, h_ineq: np.ndarray,
               y0: np.ndarray, max_iter: int) -> tuple[np.ndarray, int]:
    """Find a feasible point by minimizing squared violation slacks.

    The anchoring term that keeps the auxiliary Hessian positive definite
    leaves violations of its own (anchor-weight) order, so the solve is
    repeated re-anchored at the previous point; each round shrinks the
    residual violation geometrically.  Raises QPInfeasibleError when the
    constraints admit no point.
    """
    n = y0.size
    anchor = 1e-8
    y = y0
    total = 0
    for _ in range(3):
        viol = g_ineq @ y - h_ineq
        bad = np.nonzero(viol > 0.0)[0]
        if bad.size == 0:
            return y, total
        nb = bad.size
        h_mat = np.zeros((n + nb, n + nb))
        h_mat[:n, :n] = anchor * np.eye(n)
        h_mat[n:, n:] = np.eye(nb)
        g_vec = np.concatenate([-anchor * y, np.zeros(nb)])
        g_aug = np.zeros((h_ineq.size + nb, n + nb))
        g_aug[:h_ineq.size, :n] = g_ineq
        g_aug[bad, n + np.arange(nb)] = -1.0
        g_aug[h_ineq.size:, n:] = -np.eye(nb)
        h_aug = np.concatenate([h_ineq, np.zeros(nb)])
        start = np.concatenate([y, viol[bad] + 1.0])
        # Dense KKT path: the anchored Hessian is too ill-conditioned for
        # the range-space shortcut.
        y1, _, iters = _active_set(h_mat, g_vec, g_aug, h_aug, start,
                                   max_iter, factor=())
        y = y1[:n]
        total += iters
    if np.max(g_ineq @ y - h_ineq, initial=0.0) > _FEAS_TOL:
        raise QPInfeasibleError("no feasible point found in phase one")
    return y, total


def _reduce(problem: QProblem):
    """Null-space basis, particular solution and reduced data."""
    n = problem.num_variables
    p_eq = problem.eq_matrix.shape[0] if problem.eq_matrix.size else 0
    if p_eq == 0:
        z_basis = np.eye(n)
        z_part = np.zeros(n)
        return z_basis, z_part
    if problem.null_basis is not None and problem.particular is not None:
        z_basis = problem.null_basis
        z_part = problem.particular
    else:
        # Column-pivoted QR of the transpose: permuting equality rows leaves
        # the null space unchanged and makes rank detection reliable.
        q_full, r_full, piv = _qr(problem.eq_matrix.T, mode="full",
                                  pivoting=True)
        diag = np.abs(np.diag(r_full[:min(n, p_eq), :p_eq]))
        scale = float(np.max(diag)) if diag.size else 0.0
        rank = int(np.sum(diag > max(n, p_eq) * np.finfo(float).eps
                          * max(scale, 1.0)))
        z_basis = q_full[:, rank:]
        if rank:
            b_perm = problem.eq_rhs[piv]
            if rank == p_eq:
                w = np.linalg.solve(r_full[:rank, :rank].T, b_perm)
            else:
                w = np.linalg.lstsq(r_full[:rank].T, b_perm, rcond=None)[0]
            z_part = q_full[:, :rank] @ w
        else:
            z_part = np.zeros(n)
    resid = problem.eq_matrix @ z_part - problem.eq_rhs
    if np.max(np.abs(resid), initial=0.0) > 1e-7 * (
            1.0 + np.max(np.abs(problem.eq_rhs), initial=0.0)):
        raise QPInfeasibleError("inconsistent equality constraints")
    return z_basis, z_part


def _solve_strict(problem: QProblem) -> QPSolution:
    """Solve without relaxation; raises QPInfeasibleError when infeasible."""
    z_basis, z_part = _reduce(problem)
    p_mat = problem.quadratic
    factor = () if problem.prefer_dense else None
    if problem.reduced_cache is not None:
        h_red, g_ineq = problem.reduced_cache[:2]
        if len(problem.reduced_cache) == 4:
            factor = problem.reduced_cache[2:]
    else:
        h_red = z_basis.T @ p_mat @ z_basis
        h_red = 0.5 * (h_red + h_red.T)
        g_ineq = problem.ineq_matrix @ z_basis
    g_red = z_basis.T @ (p_mat @ z_part + problem.linear)
    h_ineq = problem.ineq_rhs - problem.ineq_matrix @ z_part
    m = h_ineq.size
    max_iter = 3 * (m + 8) + 60

    y0 = None
    if problem.feasible_guess is not None:
        guess = np.asarray(problem.feasible_guess, dtype=float)
        if problem.coord_rows is not None:
            cand = guess[problem.coord_rows]
        else:
            cand = np.linalg.lstsq(z_basis, guess - z_part, rcond=None)[0]
        recon = z_part + z_basis @ cand
        if (np.max(np.abs(recon - guess), initial=0.0) <= 1e-6
                and np.max(g_ineq @ cand - h_ineq, initial=0.0) <= _FEAS_TOL):
            y0 = cand
    iters0 = 0
    if y0 is None:
        start = np.zeros(z_basis.shape[1])
        y0, iters0 = _phase_one(g_ineq, h_ineq, start, max_iter)

    y, mu, iters = _active_set(h_red, g_red, g_ineq, h_ineq, y0, max_iter,
                               factor=factor)
    x = z_part + z_basis @ y
    lam = np.zeros(problem.eq_matrix.shape[0] if problem.eq_matrix.size else 0)
    if lam.size:
        resid = p_mat @ x + problem.linear
        if m:
            resid = resid + problem.ineq_matrix.T @ mu
        # Least-squares multipliers via normal equations (equality rows are
        # independent in practice); SVD fallback otherwise.
        a_mat = problem.eq_matrix
        gram = a_mat @ a_mat.T
        try:
            lam = np.linalg.solve(gram, a_mat @ -resid)
        except np.linalg.LinAlgError:
            lam = np.linalg.lstsq(a_mat.T, -resid, rcond=None)[0]
    objective = float(0.5 * x @ p_mat @ x + problem.linear @ x)
    res = kkt_residuals(problem, x, lam, mu)
    return QPSolution(x=x, objective=objective, eq_multipliers=lam,
                      ineq_multipliers=mu, status=STATUS_OPTIMAL,
                      iterations=iters0 + iters, kkt_residual=res.max())


def _relaxed_problem(problem: QProblem) -> QProblem:
    """Soften the relaxable rows with penalized nonnegative slacks."""
    relax_rows = np.nonzero(problem.relaxable)[0]
    nr = relax_rows.size
    n = problem.num_variables
    m = problem.ineq_rhs.size
    p_aug = np.zeros((n + nr, n + nr))
    p_aug[:n, :n] = problem.quadratic
    p_aug[n:, n:] = 2.0 * RELAX_PENALTY * np.eye(nr)
    q_aug = np.concatenate([problem.linear, np.zeros(nr)])
    g_aug = np.zeros((m + nr, n + nr))
    g_aug[:m, :n] = problem.ineq_matrix
    g_aug[relax_rows, n + np.arange(nr)] = -1.0
    g_aug[m:, n:] = -np.eye(nr)
    h_aug = np.concatenate([problem.ineq_rhs, np.zeros(nr)])
    eq_aug = problem.eq_matrix
    if eq_aug.size:
        eq_aug = np.hstack([eq_aug, np.zeros((eq_aug.shape[0], nr))])
    basis = part = coords = guess = None
    if problem.null_basis is not None and problem.particular is not None:
        d = problem.null_basis.shape[1]
        basis = np.zeros((n + nr, d + nr))
        basis[:n, :d] = problem.null_basis
        basis[n:, d:] = np.eye(nr)
        part = np.concatenate([problem.particular, np.zeros(nr)])
        if problem.coord_rows is not None:
            coords = np.concatenate([problem.coord_rows,
                                     n + np.arange(nr)])
    if problem.feasible_guess is not None:
        viol = problem.ineq_matrix @ problem.feasible_guess - problem.ineq_rhs
        slack0 = np.maximum(viol[relax_rows], 0.0)
        guess = np.concatenate([problem.feasible_guess, slack0])
    # Penalty slacks spread the reduced Hessian spectrum too wide for the
    # range-space shortcut; relaxed solves are rare, use dense KKT steps.
    return QProblem(quadratic=p_aug, linear=q_aug, ineq_matrix=g_aug,
                    ineq_rhs=h_aug, eq_matrix=eq_aug, eq_rhs=problem.eq_rhs,
                    null_basis=basis, particular=part, coord_rows=coords,
                    feasible_guess=guess, prefer_dense=True)


def solve(problem: QProblem) -> QPSolution:
    """Solve the program; on infeasibility re-solve with relaxable rows
    softened (status ``infeasible-relaxed``) or raise QPInfeasibleError when
    nothing is relaxable.

    For relaxed solutions the reported multipliers and KKT residual refer to
    the relaxed program restricted to the original rows.
    """
    try:
        return _solve_strict(problem)
    except QPInfeasibleError:
        if problem.relaxable is None or not np.any(problem.relaxable):
            raise
    relaxed = _relaxed_problem(problem)
    sol = _solve_strict(relaxed)
    n = problem.num_variables
    m = problem.ineq_rhs.size
    x = sol.x[:n]
    objective = float(0.5 * x @ problem.quadratic @ x + problem.linear @ x)
    return QPSolution(x=x, objective=objective,
                      eq_multipliers=sol.eq_multipliers,
                      ineq_multipliers=sol.ineq_multipliers[:m],
                      status=STATUS_RELAXED, iterations=sol.iterations,
                      kkt_residual=sol.kkt_residual)
