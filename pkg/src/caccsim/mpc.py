"""Receding-horizon longitudinal controller.

Each step the vehicle builds a finite-horizon quadratic program over its
stacked inputs and predicted error states: quadratic state regulation plus
squared position/velocity coupling to every predecessor it has information
about, subject to the discrete dynamics (equalities), acceleration, input,
input-rate and speed bounds, and a softened positive-gap requirement.  The
optimal objective value doubles as the communication-trigger signal.

The leader runs the same machinery with the coupling sums empty and a
reference-velocity tracking error in place of the velocity error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import dynamics, qp
from .dynamics import VehicleParams, VehicleState

# Soft positive-gap constraint: require gap >= GAP_MARGIN with quadratic
# slack penalty; a hard gap constraint can be infeasible under severe
# forecast error at high packet loss.
GAP_MARGIN = 0.1
GAP_PENALTY = 1e4

# Tiny quadratic input regularization: keeps the reduced Hessian positive
# definite (the terminal input otherwise enters no cost term) without
# measurably changing the optimum.
INPUT_REG = 1e-8


def _default_state_weight() -> np.ndarray:
    return np.diag([20.0, 20.0, 2.0])


@dataclass(frozen=True)
class MPCWeights:
    """Cost weights: state regulation matrix, state reference, and the
    per-predecessor position/velocity coupling coefficients.

    The defaults are calibrated so the shipped trigger-threshold stages
    (200 .. 700) slice through the closed-loop cost distribution: the
    communication rate then falls and the spacing error grows monotonically
    across the sweep while the speed spread stays within a fraction of a
    percent of the time-triggered baseline.
    """

    state_weight: np.ndarray = field(default_factory=_default_state_weight)
    state_reference: np.ndarray = field(default_factory=lambda: np.zeros(3))
    position_coupling: float = 2.0
    velocity_coupling: float = 2.0

    def __post_init__(self) -> None:
        q = np.asarray(self.state_weight, dtype=float)
        r = np.asarray(self.state_reference, dtype=float)
        if q.shape != (3, 3):
            raise ValueError("state_weight must be 3x3")
        if not np.allclose(q, q.T, atol=1e-12):
            raise ValueError("state_weight must be symmetric")
        if np.min(np.linalg.eigvalsh(q)) < -1e-9:
            raise ValueError("state_weight must be positive semidefinite")
        if r.shape != (3,):
            raise ValueError("state_reference must be a 3-vector")
        if self.position_coupling < 0.0 or self.velocity_coupling < 0.0:
            raise ValueError("coupling coefficients must be non-negative")
        q.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "state_weight", q)
        object.__setattr__(self, "state_reference", r)


@dataclass
class NeighborForecast:
    """Predicted positions, velocities and accelerations of one predecessor
    over the horizon (entries k = 0 .. N-1), produced by the estimator."""

    vehicle_index: int
    positions: np.ndarray
    velocities: np.ndarray
    accelerations: np.ndarray

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=float)
        self.velocities = np.asarray(self.velocities, dtype=float)
        self.accelerations = np.asarray(self.accelerations, dtype=float)
        n = self.positions.size
        if self.velocities.size != n or self.accelerations.size != n:
            raise ValueError("forecast fields must have equal length")


@dataclass
class HorizonPlan:
    """Controller output for one step.

    ``inputs`` is the optimal input sequence (the first entry is applied);
    ``predicted_states`` holds the absolute states k = 0 .. N obtained by
    rolling the dynamics under those inputs; ``error_states`` the matching
    error-coordinate trajectory.  ``objective_value`` is the cost re-evaluated
    directly on the returned trajectory and is the trigger signal.
    """

    inputs: np.ndarray
    predicted_states: list[VehicleState]
    error_states: np.ndarray
    objective_value: float
    solve_status: str
    kkt_residual: float

    @property
    def predicted_velocities(self) -> np.ndarray:
        """Velocity forecast for the transmission payload (steps 1 .. N)."""
        return np.array([s.velocity for s in self.predicted_states[1:]])


@dataclass
class _PlanContext:
    params: VehicleParams
    weights: MPCWeights
    current: VehicleState
    forecasts: list[NeighborForecast]
    horizon: int
    dt: float
    s0: np.ndarray
    a_dyn: np.ndarray
    b_dyn: np.ndarray
    w_seq: np.ndarray
    reference: np.ndarray | None
    objective_constant: float


@dataclass
class _Structure:
    """Per-(params, weights, horizon, fan-in) constant QP data."""

    n_z: int
    n_reduced: int
    a_dyn: np.ndarray
    b_dyn: np.ndarray
    vel_w: np.ndarray
    pos_w: np.ndarray
    quadratic: np.ndarray
    q_base: np.ndarray
    eq_matrix: np.ndarray
    g_matrix: np.ndarray
    h_base: np.ndarray
    relaxable: np.ndarray
    null_basis: np.ndarray
    coord_rows: np.ndarray
    reduced_hessian: np.ndarray
    reduced_ineq: np.ndarray
    reduced_cho: tuple
    reduced_hinv_gt: np.ndarray
    coupling_pos_rows: np.ndarray
    coupling_vel_rows: np.ndarray
    idx_rate_hi_anchor: int
    idx_rate_lo_anchor: int
    idx_speed: np.ndarray
    idx_gap: np.ndarray
    pow_s0: np.ndarray
    conv_w: np.ndarray


def _u_col(k: int) -> int:
    return k


def _s_cols(n_horizon: int, k: int) -> slice:
    base = n_horizon + 3 * (k - 1)
    return slice(base, base + 3)


def _a_col(n_horizon: int, k: int) -> int:
    return n_horizon + 3 * (k - 1) + 2


@lru_cache(maxsize=128)
def _structure_cached(params_key, weights_key, horizon: int, fan_in: int,
                      leader: bool, dt: float) -> _Structure:
    params = VehicleParams(*params_key)
    q_mat = np.array(weights_key[0]).reshape(3, 3)
    c_d, c_v = weights_key[2], weights_key[3]
    r_vec = np.array(weights_key[1])
    n = horizon
    f = params.driveline_constant
    ts = dt
    n_slack = 0 if leader else n
    n_z = n + 3 * n + n_slack

    if leader:
        a_dyn = np.array([[1.0, 0.0, 0.0],
                          [0.0, 1.0, -ts],
                          [0.0, 0.0, 1.0 - ts * f]])
    else:
        a_dyn = np.array([[1.0, ts, -ts * params.time_gap],
                          [0.0, 1.0, -ts],
                          [0.0, 0.0, 1.0 - ts * f]])
    b_dyn = np.array([0.0, 0.0, ts * f])

    # Affine coefficient rows of absolute velocity and position per step:
    # v(k) and x(k) as linear functions of the stacked decision vector (the
    # constant parts depend on the current state and are filled per call).
    vel_w = np.zeros((n + 1, n_z))
    pos_w = np.zeros((n + 1, n_z))
    for k in range(1, n + 1):
        vel_w[k] = vel_w[k - 1]
        if k >= 2:
            vel_w[k, _a_col(n, k - 1)] += ts
        pos_w[k] = pos_w[k - 1] + ts * vel_w[k - 1]

    # Equalities: S(k+1) - A S(k) - B u(k) = w(k) for k = 0 .. N-1.
    eq = np.zeros((3 * n, n_z))
    for k in range(n):
        rows = slice(3 * k, 3 * k + 3)
        eq[rows, _s_cols(n, k + 1)] = np.eye(3)
        if k >= 1:
            eq[rows, _s_cols(n, k)] = -a_dyn
        eq[rows, _u_col(k)] = -b_dyn

    # Inequalities.
    rows = []
    rhs = []
    relax = []

    def add(row, h, relaxable=False):
        rows.append(row)
        rhs.append(h)
        relax.append(relaxable)

    for k in range(n):
        row = np.zeros(n_z)
        row[_u_col(k)] = 1.0
        add(row, params.input_max)
    for k in range(n):
        row = np.zeros(n_z)
        row[_u_col(k)] = -1.0
        add(row, -params.input_min)
    idx_rate_hi_anchor = len(rows)
    for k in range(n):
        row = np.zeros(n_z)
        row[_u_col(k)] = 1.0
        if k >= 1:
            row[_u_col(k - 1)] = -1.0
        add(row, ts * params.input_max)  # k = 0 rhs re-anchored per call
    idx_rate_lo_anchor = len(rows)
    for k in range(n):
        row = np.zeros(n_z)
        row[_u_col(k)] = -1.0
        if k >= 1:
            row[_u_col(k - 1)] = 1.0
        add(row, -ts * params.input_min)
    for k in range(1, n + 1):
        row = np.zeros(n_z)
        row[_a_col(n, k)] = 1.0
        add(row, params.accel_max, relaxable=True)
    for k in range(1, n + 1):
        row = np.zeros(n_z)
        row[_a_col(n, k)] = -1.0
        add(row, -params.accel_min, relaxable=True)
    idx_speed = len(rows)
    for k in range(1, n + 1):
        add(vel_w[k].copy(), params.speed_max, relaxable=True)
    idx_gap = len(rows)
    if not leader:
        for k in range(1, n + 1):
            row = -params.time_gap * vel_w[k]
            row[n + 3 * (k - 1)] -= 1.0          # spacing-error entry
            row[4 * n + (k - 1)] = -1.0          # violation slack
            add(row, params.standstill_distance - GAP_MARGIN)
        for k in range(n):
            row = np.zeros(n_z)
            row[4 * n + k] = -1.0
            add(row, 0.0)
    g_matrix = np.array(rows)
    h_base = np.array(rhs)
    relaxable = np.array(relax)

    # Quadratic cost.
    p_mat = np.zeros((n_z, n_z))
    q_base = np.zeros(n_z)
    for k in range(1, n):
        cols = _s_cols(n, k)
        p_mat[cols, cols] += 2.0 * q_mat
        q_base[cols] += -2.0 * (q_mat @ r_vec)
    w_pos = -(pos_w[:n] + params.time_gap * vel_w[:n])
    w_vel = -vel_w[:n]
    if fan_in:
        p_mat += 2.0 * fan_in * c_d * (w_pos.T @ w_pos)
        p_mat += 2.0 * fan_in * c_v * (w_vel.T @ w_vel)
    for k in range(n):
        p_mat[_u_col(k), _u_col(k)] += 2.0 * INPUT_REG
    for j in range(n_slack):
        p_mat[4 * n + j, 4 * n + j] += 2.0 * GAP_PENALTY

    # Null-space basis of the dynamics equalities: states are the rolled
    # impulse responses of the inputs; slacks are free coordinates.
    n_red = n + n_slack
    basis = np.zeros((n_z, n_red))
    a_pows = [np.eye(3)]
    for _ in range(n):
        a_pows.append(a_dyn @ a_pows[-1])
    for j in range(n):
        basis[_u_col(j), j] = 1.0
        for k in range(j + 1, n + 1):
            basis[_s_cols(n, k), j] = a_pows[k - 1 - j] @ b_dyn
    for j in range(n_slack):
        basis[4 * n + j, n + j] = 1.0
    coord_rows = np.concatenate([np.arange(n),
                                 4 * n + np.arange(n_slack)]).astype(int)

    h_red = basis.T @ p_mat @ basis
    h_red = 0.5 * (h_red + h_red.T)
    g_red = g_matrix @ basis
    cho = cho_factor(h_red, lower=True, check_finite=False)
    hinv_gt = cho_solve(cho, g_red.T, check_finite=False)

    # Zero-input state response tensors: S_free(k) = A^k s0 + sum_j
    # A^(k-1-j) w(j), with the disturbance confined to the second component.
    pow_s0 = np.stack([a_pows[k] for k in range(1, n + 1)])
    conv_w = np.zeros((n, n, 3))
    for k in range(1, n + 1):
        for j in range(k):
            conv_w[k - 1, j] = a_pows[k - 1 - j][:, 1]

    return _Structure(
        n_z=n_z, n_reduced=n_red, a_dyn=a_dyn, b_dyn=b_dyn, vel_w=vel_w,
        pos_w=pos_w, quadratic=p_mat, q_base=q_base, eq_matrix=eq,
        g_matrix=g_matrix, h_base=h_base, relaxable=relaxable,
        null_basis=basis, coord_rows=coord_rows, reduced_hessian=h_red,
        reduced_ineq=g_red, reduced_cho=cho, reduced_hinv_gt=hinv_gt,
        coupling_pos_rows=w_pos, coupling_vel_rows=w_vel,
        idx_rate_hi_anchor=idx_rate_hi_anchor,
        idx_rate_lo_anchor=idx_rate_lo_anchor,
        idx_speed=np.arange(idx_speed, idx_speed + n),
        idx_gap=(np.arange(idx_gap, idx_gap + n) if not leader
                 else np.zeros(0, dtype=int)),
        pow_s0=pow_s0,
        conv_w=conv_w,
    )


def _params_key(params: VehicleParams):
    return (params.vehicle_length, params.standstill_distance,
            params.time_gap, params.driveline_constant, params.accel_min,
            params.accel_max, params.input_min, params.input_max,
            params.speed_max)


def _weights_key(weights: MPCWeights):
    return (tuple(weights.state_weight.ravel()),
            tuple(weights.state_reference),
            weights.position_coupling, weights.velocity_coupling)


def _sorted_forecasts(forecasts, horizon: int) -> list[NeighborForecast]:
    ordered = sorted(forecasts, key=lambda fc: -fc.vehicle_index)
    for m, fc in enumerate(ordered):
        if fc.positions.size != horizon:
            raise ValueError("forecast length must equal the horizon")
        if m and fc.vehicle_index != ordered[0].vehicle_index - m:
            raise ValueError("forecasts must cover a contiguous block of "
                             "immediate predecessors")
    return ordered


def _coupling_errors(params: VehicleParams,
                     forecasts: list[NeighborForecast],
                     x_traj: np.ndarray, v_traj: np.ndarray):
    """Position/velocity coupling error terms per predecessor and step.

    The chained desired-spacing offset uses each intermediate vehicle's
    forecast velocity and the ego's own velocity; vehicle parameters are
    assumed homogeneous across the platoon.
    """
    pos_fc = np.array([fc.positions for fc in forecasts])
    vel_fc = np.array([fc.velocities for fc in forecasts])
    link = params.standstill_distance + params.vehicle_length
    inter = np.zeros_like(pos_fc)
    if len(forecasts) > 1:
        inter[1:] = np.cumsum(params.time_gap * vel_fc[:-1] + link, axis=0)
    e_pos = pos_fc - x_traj - params.time_gap * v_traj - inter - link
    e_vel = vel_fc - v_traj
    return e_pos, e_vel


def build_qp(params: VehicleParams, weights: MPCWeights,
             current: VehicleState, previous_input: float,
             forecasts, horizon: int, dt: float = 0.1,
             sensed_gap: float | None = None,
             sensed_velocity_error: float | None = None,
             reference_velocities=None) -> tuple[qp.QProblem, _PlanContext]:
    """Assemble the horizon QP.

    The decision vector stacks the inputs u(0..N-1), the error states
    S(1..N), and (for followers) one gap-violation slack per step.  The
    initial error state comes from the sensed gap and closing speed when
    provided, otherwise from the immediate predecessor's forecast.  Passing
    ``reference_velocities`` (length N+1) selects the leader formulation;
    forecasts must then be empty.
    """
    n = int(horizon)
    if n < 1:
        raise ValueError("horizon must be at least 1")
    leader = reference_velocities is not None
    forecasts = _sorted_forecasts(forecasts, n)
    if leader and forecasts:
        raise ValueError("leader takes no predecessor forecasts")
    if not leader and not forecasts:
        raise ValueError("followers need at least one predecessor forecast")
    ref = None
    if leader:
        ref = np.asarray(reference_velocities, dtype=float)
        if ref.size != n + 1:
            raise ValueError("reference_velocities must have N+1 entries")

    st = _structure_cached(_params_key(params), _weights_key(weights),
                           n, len(forecasts), leader, dt)
    q_mat = weights.state_weight
    r_vec = weights.state_reference
    x0, v0, a0 = current.position, current.velocity, current.acceleration

    if leader:
        s0 = np.array([0.0, ref[0] - v0, a0])
        w_seq = np.zeros((n, 3))
        w_seq[:, 1] = np.diff(ref)
    else:
        if sensed_gap is not None and sensed_velocity_error is not None:
            d0 = sensed_gap
            dv0 = sensed_velocity_error
        else:
            lead_fc = forecasts[0]
            d0 = (lead_fc.positions[0] - x0 - params.vehicle_length)
            dv0 = lead_fc.velocities[0] - v0
        s0 = np.array([d0 - dynamics.desired_spacing(params, max(v0, 0.0)),
                       dv0, a0])
        w_seq = np.zeros((n, 3))
        w_seq[:, 1] = dt * forecasts[0].accelerations

    # Constant parts of the absolute velocity/position expressions.
    vel_c = np.full(n + 1, v0)
    vel_c[1:] += dt * a0
    pos_c = np.empty(n + 1)
    pos_c[0] = x0
    for k in range(n):
        pos_c[k + 1] = pos_c[k] + dt * vel_c[k]

    b_eq = w_seq.copy()
    b_eq[0] += st.a_dyn @ s0
    b_eq = b_eq.ravel()

    q_vec = st.q_base.copy()
    constant = float((s0 - r_vec) @ q_mat @ (s0 - r_vec))
    constant += (n - 1) * float(r_vec @ q_mat @ r_vec)
    if forecasts:
        e_pos, e_vel = _coupling_errors(params, forecasts,
                                        pos_c[:n], vel_c[:n])
        c_d = weights.position_coupling
        c_v = weights.velocity_coupling
        q_vec += 2.0 * c_d * (st.coupling_pos_rows.T @ e_pos.sum(axis=0))
        q_vec += 2.0 * c_v * (st.coupling_vel_rows.T @ e_vel.sum(axis=0))
        constant += c_d * float(np.sum(e_pos * e_pos))
        constant += c_v * float(np.sum(e_vel * e_vel))

    h_vec = st.h_base.copy()
    h_vec[st.idx_rate_hi_anchor] += previous_input
    h_vec[st.idx_rate_lo_anchor] -= previous_input
    h_vec[st.idx_speed] -= vel_c[1:]
    if not leader:
        h_vec[st.idx_gap] += params.time_gap * vel_c[1:]

    # Particular solution: zero inputs, states rolled from s0.
    z_part = np.zeros(st.n_z)
    s_free = (st.pow_s0 @ s0
              + np.einsum("kjc,j->kc", st.conv_w, w_seq[:, 1]))
    z_part[n:4 * n] = s_free.ravel()

    guess = _feasible_guess(params, st, n, previous_input, z_part,
                            vel_c, leader, dt)

    problem = qp.QProblem(
        quadratic=st.quadratic, linear=q_vec, ineq_matrix=st.g_matrix,
        ineq_rhs=h_vec, eq_matrix=st.eq_matrix, eq_rhs=b_eq,
        relaxable=st.relaxable, null_basis=st.null_basis,
        particular=z_part, coord_rows=st.coord_rows, feasible_guess=guess,
        reduced_cache=(st.reduced_hessian, st.reduced_ineq,
                       st.reduced_cho, st.reduced_hinv_gt))
    context = _PlanContext(params=params, weights=weights, current=current,
                           forecasts=forecasts, horizon=n, dt=dt, s0=s0,
                           a_dyn=st.a_dyn, b_dyn=st.b_dyn, w_seq=w_seq,
                           reference=ref, objective_constant=constant)
    return problem, context


def _feasible_guess(params, st, n, previous_input, z_part, vel_c,
                    leader, dt):
    """Rate-feasible input sequence decaying to zero, with matching rolled
    states and gap slacks."""
    shrink = dt * min(params.input_max, -params.input_min)
    u0 = min(max(previous_input, params.input_min), params.input_max)
    mags = np.maximum(0.0, abs(u0) - shrink * np.arange(n))
    u_guess = np.sign(u0) * mags
    z = z_part.copy()
    z[:n] = u_guess
    z[n:4 * n] += st.null_basis[n:4 * n, :n] @ u_guess
    if not leader:
        v_traj = st.vel_w[1:] @ z + vel_c[1:]
        spacing = z[n:4 * n:3]
        need = (GAP_MARGIN - params.standstill_distance
                - spacing - params.time_gap * v_traj)
        z[4 * n:5 * n] = np.maximum(0.0, need)
    return z


def _roll_states(params: VehicleParams, current: VehicleState,
                 inputs: np.ndarray, dt: float) -> list[VehicleState]:
    states = [current]
    for u in inputs:
        states.append(dynamics.step(params, states[-1], float(u), 0.0, dt))
    return states


def _roll_errors(context: _PlanContext, inputs: np.ndarray) -> np.ndarray:
    out = np.empty((context.horizon + 1, 3))
    out[0] = context.s0
    s = context.s0
    for k in range(context.horizon):
        s = context.a_dyn @ s + context.b_dyn * inputs[k] + context.w_seq[k]
        out[k + 1] = s
    return out


def evaluate_cost(context: _PlanContext, error_states: np.ndarray,
                  states: list[VehicleState]) -> float:
    """Objective re-evaluated directly on a trajectory (steps 0 .. N-1)."""
    n = context.horizon
    q_mat = context.weights.state_weight
    r_vec = context.weights.state_reference
    devs = error_states[:n] - r_vec
    cost = float(np.einsum("ki,ij,kj->", devs, q_mat, devs))
    if context.forecasts:
        x_traj = np.array([s.position for s in states[:n]])
        v_traj = np.array([s.velocity for s in states[:n]])
        e_pos, e_vel = _coupling_errors(context.params, context.forecasts,
                                        x_traj, v_traj)
        cost += context.weights.position_coupling * float(np.sum(e_pos ** 2))
        cost += context.weights.velocity_coupling * float(np.sum(e_vel ** 2))
    return cost


def solve_qp(problem: qp.QProblem, context: _PlanContext) -> HorizonPlan:
    """Solve a built horizon QP and assemble the plan.

    Infeasible problems are re-solved with relaxed state-box rows (input and
    input-rate bounds are never relaxed) and flagged ``infeasible-relaxed``.
    """
    sol = qp.solve(problem)
    n = context.horizon
    inputs = sol.x[:n].copy()
    states = _roll_states(context.params, context.current, inputs, context.dt)
    errors = _roll_errors(context, inputs)
    objective = evaluate_cost(context, errors, states)
    return HorizonPlan(inputs=inputs, predicted_states=states,
                       error_states=errors, objective_value=objective,
                       solve_status=sol.status, kkt_residual=sol.kkt_residual)


def plan(params: VehicleParams, weights: MPCWeights, current: VehicleState,
         previous_input: float, forecasts, horizon: int, dt: float = 0.1,
         sensed_gap: float | None = None,
         sensed_velocity_error: float | None = None) -> HorizonPlan:
    """Follower controller: build and solve the horizon QP.

    The first entry of ``plan.inputs`` is the command applied this step;
    ``plan.predicted_velocities`` is the transmission payload.
    """
    problem, context = build_qp(params, weights, current, previous_input,
                                forecasts, horizon, dt=dt,
                                sensed_gap=sensed_gap,
                                sensed_velocity_error=sensed_velocity_error)
    return solve_qp(problem, context)


def plan_leader(params: VehicleParams, weights: MPCWeights,
                current: VehicleState, previous_input: float,
                reference_velocities, horizon: int,
                dt: float = 0.1) -> HorizonPlan:
    """Leader controller: track a reference velocity profile through the
    same QP with empty coupling sums."""
    problem, context = build_qp(params, weights, current, previous_input,
                                (), horizon, dt=dt,
                                reference_velocities=reference_velocities)
    return solve_qp(problem, context)
