"""Pose-graph fusion of wheel/IMU relative motion with GNSS absolute positions.

Each trajectory state is one graph node (position + orientation in the world
frame).  Consecutive nodes are tied by a relative-pose constraint from the
pre-fused wheel/IMU odometry; a subset of nodes carries an absolute position
constraint from GNSS.  The graph is solved with damped Gauss-Newton; GNSS
residuals get a Huber kernel because urban fixes are outlier-prone.

Residual definitions (whitened):
    odometry translation:  (R_i^T (t_j - t_i) - t_rel) / sigma_t
    odometry rotation:     Log(R_rel^T R_i^T R_j) / sigma_r
    GNSS position:         (t_i - z) / sigma          (Huber, delta = 3)

The state update is t <- t + dt (world frame) and R <- R Exp(dtheta)
(body-local rotation perturbation).
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, GaugeError, OutOfRangeError
from .geometry import (Pose, matrix_to_quat, quat_slerp, so3_exp, so3_hat, so3_log,
                       so3_right_jacobian_inverse)


@dataclass
class StateNode:
    timestamp: float
    pose: Pose


@dataclass
class OdometryFactor:
    """Measured relative motion between consecutive nodes, from -> to."""

    from_index: int
    to_index: int
    relative: Pose
    sigma_t: float
    sigma_r: float

    def __post_init__(self):
        if self.to_index != self.from_index + 1:
            raise ValueError("odometry factors must link consecutive nodes")
        if self.sigma_t <= 0 or self.sigma_r <= 0:
            raise ValueError("sigmas must be positive")


@dataclass
class GnssFactor:
    node_index: int
    position: np.ndarray
    sigma: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass
class FusionConfig:
    max_iterations: int = 100
    relative_tol: float = 1e-9
    absolute_tol: float = 1e-18
    initial_damping: float = 1e-4
    huber_delta: float = 3.0  # in whitened units


@dataclass
class FusedTrajectory:
    nodes: list
    final_cost: float
    iterations: int
    cost_history: list = field(default_factory=list)

    @property
    def timestamps(self):
        return [n.timestamp for n in self.nodes]


def _huber_weight(sq_norm: float, delta: float):
    """Returns (rho(s), sqrt of IRLS weight) for the Huber kernel, s = ||r||^2."""
    if sq_norm <= delta * delta:
        return sq_norm, 1.0
    n = math.sqrt(sq_norm)
    return 2.0 * delta * n - delta * delta, math.sqrt(delta / n)


def _evaluate(ts, Rs, odom, gnss, delta):
    """Total robust cost of the graph at the given state."""
    cost = 0.0
    for f in odom:
        i, j = f.from_index, f.to_index
        Ri_T = Rs[i].T
        rt = (Ri_T @ (ts[j] - ts[i]) - f.relative.t) / f.sigma_t
        rr = so3_log(f.relative.rotation().T @ Ri_T @ Rs[j]) / f.sigma_r
        cost += float(rt @ rt + rr @ rr)
    for g in gnss:
        r = (ts[g.node_index] - g.position) / g.sigma
        rho, _ = _huber_weight(float(r @ r), delta)
        cost += rho
    return cost


def _linearize(ts, Rs, odom, gnss, delta, n_nodes):
    """Build the whitened residual vector and its dense Jacobian."""
    n_res = 6 * len(odom) + 3 * len(gnss)
    r = np.zeros(n_res)
    J = np.zeros((n_res, 6 * n_nodes))
    row = 0
    for f in odom:
        i, j = f.from_index, f.to_index
        Ri_T = Rs[i].T
        dt_world = ts[j] - ts[i]
        rt = (Ri_T @ dt_world - f.relative.t) / f.sigma_t
        r[row:row + 3] = rt
        J[row:row + 3, 6 * i:6 * i + 3] = -Ri_T / f.sigma_t
        J[row:row + 3, 6 * i + 3:6 * i + 6] = so3_hat(Ri_T @ dt_world) / f.sigma_t
        J[row:row + 3, 6 * j:6 * j + 3] = Ri_T / f.sigma_t
        row += 3
        R_err = f.relative.rotation().T @ Ri_T @ Rs[j]
        phi = so3_log(R_err)
        rr = phi / f.sigma_r
        r[row:row + 3] = rr
        Jr_inv = so3_right_jacobian_inverse(phi)
        Q = Rs[i].T @ Rs[j]
        J[row:row + 3, 6 * i + 3:6 * i + 6] = -(Jr_inv @ Q.T) / f.sigma_r
        J[row:row + 3, 6 * j + 3:6 * j + 6] = Jr_inv / f.sigma_r
        row += 3
    for g in gnss:
        i = g.node_index
        rg = (ts[i] - g.position) / g.sigma
        _, w = _huber_weight(float(rg @ rg), delta)
        r[row:row + 3] = w * rg
        J[row:row + 3, 6 * i:6 * i + 3] = (w / g.sigma) * np.eye(3)
        row += 3
    return r, J


def fuse_pose_graph(nodes, odom_factors, gnss_factors, config: FusionConfig | None = None) -> FusedTrajectory:
    """Optimize the pose graph; the input node poses are the initial guess.

    Requires an odometry factor for every consecutive node pair and at least
    two GNSS factors (one position fix leaves yaw and scale-free placement of
    the chain unconstrained).
    """
    cfg = config or FusionConfig()
    nodes = list(nodes)
    n = len(nodes)
    if n < 2:
        raise ValueError("need at least 2 nodes")
    stamps = [nd.timestamp for nd in nodes]
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise ValueError("timestamps must be strictly increasing")
    covered = {(f.from_index, f.to_index) for f in odom_factors}
    for i in range(n - 1):
        if (i, i + 1) not in covered:
            raise ValueError(f"missing odometry factor for nodes ({i},{i + 1})")
    if len(gnss_factors) < 2:
        raise GaugeError("need at least 2 GNSS factors to fix the gauge")

    ts = np.stack([nd.pose.t for nd in nodes]).astype(float)
    Rs = np.stack([nd.pose.rotation() for nd in nodes])

    cost = _evaluate(ts, Rs, odom_factors, gnss_factors, cfg.huber_delta)
    if not np.isfinite(cost):
        raise DivergenceError("initial cost is non-finite")
    costs = [cost]
    lam = cfg.initial_damping
    iterations = 0
    while iterations < cfg.max_iterations and cost > cfg.absolute_tol:
        iterations += 1
        r, J = _linearize(ts, Rs, odom_factors, gnss_factors, cfg.huber_delta, n)
        H = J.T @ J
        g = J.T @ r
        accepted = False
        while lam < 1e12:
            try:
                dx = np.linalg.solve(H + lam * np.eye(H.shape[0]), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            new_ts = ts + dx.reshape(n, 6)[:, :3]
            new_Rs = np.stack([Rs[k] @ so3_exp(dx[6 * k + 3:6 * k + 6]) for k in range(n)])
            new_cost = _evaluate(new_ts, new_Rs, odom_factors, gnss_factors, cfg.huber_delta)
            if np.isfinite(new_cost) and new_cost <= cost:
                rel_change = (cost - new_cost) / max(cost, 1e-300)
                ts, Rs = new_ts, new_Rs
                cost = new_cost
                costs.append(cost)
                lam = max(lam * 0.1, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted or rel_change < cfg.relative_tol:
            break

    out_nodes = [StateNode(stamps[k], Pose(t=ts[k], q=matrix_to_quat(Rs[k]))) for k in range(n)]
    return FusedTrajectory(nodes=out_nodes, final_cost=cost, iterations=iterations,
                           cost_history=costs)


def interpolate_pose(traj, t: float) -> Pose:
    """Pose at time t: linear in position, slerp in orientation.

    Accepts a FusedTrajectory or a plain sequence of StateNode.
    """
    nodes = traj.nodes if isinstance(traj, FusedTrajectory) else list(traj)
    stamps = [nd.timestamp for nd in nodes]
    if not nodes or t < stamps[0] or t > stamps[-1]:
        raise OutOfRangeError(f"t={t} outside trajectory span [{stamps[0] if nodes else '-'}, "
                              f"{stamps[-1] if nodes else '-'}]")
    k = bisect.bisect_right(stamps, t) - 1
    if k >= len(nodes) - 1:
        return nodes[-1].pose.copy()
    a, b = nodes[k], nodes[k + 1]
    if t == a.timestamp:
        return a.pose.copy()
    u = (t - a.timestamp) / (b.timestamp - a.timestamp)
    return Pose(t=(1.0 - u) * a.pose.t + u * b.pose.t,
                q=quat_slerp(a.pose.q, b.pose.q, u))
