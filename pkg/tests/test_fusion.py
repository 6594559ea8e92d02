import math

import numpy as np
import pytest

from drivemap.errors import GaugeError, OutOfRangeError
from drivemap.fusion import (FusionConfig, FusedTrajectory, GnssFactor, OdometryFactor,
                             StateNode, fuse_pose_graph, interpolate_pose)
from drivemap.geometry import Pose, quat_slerp, rotvec_to_quat


def straight_nodes(n, step=1.0):
    return [StateNode(float(i), Pose(t=[i * step, 0, 0])) for i in range(n)]


def exact_odometry(nodes, sigma_t=0.1, sigma_r=0.01):
    out = []
    for i in range(len(nodes) - 1):
        rel = nodes[i].pose.inverse().compose(nodes[i + 1].pose)
        out.append(OdometryFactor(i, i + 1, rel, sigma_t, sigma_r))
    return out


def test_noiseless_fixed_point():
    nodes = straight_nodes(20)
    odom = exact_odometry(nodes)
    gnss = [GnssFactor(i, nodes[i].pose.t, 0.5) for i in (0, 10, 19)]
    fused = fuse_pose_graph(nodes, odom, gnss)
    for got, want in zip(fused.nodes, nodes):
        assert np.linalg.norm(got.pose.t - want.pose.t) < 1e-6
    assert fused.final_cost < 1e-12


def test_single_gnss_raises_gauge_error():
    nodes = straight_nodes(5)
    with pytest.raises(GaugeError):
        fuse_pose_graph(nodes, exact_odometry(nodes), [GnssFactor(0, [0, 0, 0], 1.0)])


def test_missing_odometry_factor_rejected():
    nodes = straight_nodes(4)
    odom = exact_odometry(nodes)[:-1]
    gnss = [GnssFactor(0, [0, 0, 0], 1.0), GnssFactor(3, [3, 0, 0], 1.0)]
    with pytest.raises(ValueError):
        fuse_pose_graph(nodes, odom, gnss)


def dense_1d_oracle(n, meas, gnss_idx, gnss_vals, sigma_t, sigma_g):
    """Linear least squares for the equivalent 1D chain problem."""
    rows = []
    rhs = []
    for i, d in enumerate(meas):
        r = np.zeros(n)
        r[i], r[i + 1] = -1.0 / sigma_t, 1.0 / sigma_t
        rows.append(r)
        rhs.append(d / sigma_t)
    for i, z in zip(gnss_idx, gnss_vals):
        r = np.zeros(n)
        r[i] = 1.0 / sigma_g
        rows.append(r)
        rhs.append(z / sigma_g)
    A = np.stack(rows)
    x, *_ = np.linalg.lstsq(A, np.asarray(rhs), rcond=None)
    return x


def test_drifting_chain_matches_1d_oracle():
    # straight 100-node trajectory, 1%-per-step drift, exact GNSS every 10 nodes
    rng = np.random.default_rng(7)
    n = 100
    sigma_t, sigma_g = 0.05, 0.5
    truth = np.arange(n, dtype=float)  # 1 m steps along x
    meas = 1.0 + 0.01 * rng.standard_normal(n - 1)  # 1%/step drift on the x step
    gnss_idx = list(range(0, n, 10))
    oracle = dense_1d_oracle(n, meas, gnss_idx, truth[gnss_idx], sigma_t, sigma_g)

    # identical problem posed on the full 6-DoF graph: x-only motion, exact rotations
    dead = np.concatenate([[0.0], np.cumsum(meas)])
    nodes = [StateNode(float(i), Pose(t=[dead[i], 0, 0])) for i in range(n)]
    odom = [OdometryFactor(i, i + 1, Pose(t=[meas[i], 0, 0]), sigma_t, 1e-3)
            for i in range(n - 1)]
    gnss = [GnssFactor(i, [truth[i], 0, 0], sigma_g) for i in gnss_idx]
    fused = fuse_pose_graph(nodes, odom, gnss)
    got = np.array([nd.pose.t[0] for nd in fused.nodes])
    assert np.allclose(got, oracle, atol=1e-6)

    dead_end_err = abs(dead[-1] - truth[-1])
    fused_end_err = abs(got[-1] - truth[-1])
    assert fused_end_err < dead_end_err
    assert fused_end_err < 3.0 * sigma_g


def test_cost_non_increasing():
    rng = np.random.default_rng(3)
    nodes = straight_nodes(30)
    odom = []
    for i in range(29):
        rel = Pose(t=[1.0 + 0.05 * rng.standard_normal(), 0.02 * rng.standard_normal(), 0],
                   q=rotvec_to_quat(0.01 * rng.standard_normal(3)))
        odom.append(OdometryFactor(i, i + 1, rel, 0.05, 0.01))
    gnss = [GnssFactor(i, [i, 0, 0] + 0.3 * rng.standard_normal(3), 0.5)
            for i in range(0, 30, 5)]
    fused = fuse_pose_graph(nodes, odom, gnss)
    assert all(b <= a + 1e-12 for a, b in zip(fused.cost_history, fused.cost_history[1:]))


def test_gnss_translation_equivariance():
    rng = np.random.default_rng(11)
    nodes = straight_nodes(15)
    odom = []
    for i in range(14):
        rel = Pose(t=[1.0 + 0.03 * rng.standard_normal(), 0, 0],
                   q=rotvec_to_quat([0, 0, 0.01 * rng.standard_normal()]))
        odom.append(OdometryFactor(i, i + 1, rel, 0.05, 0.01))
    gnss_pos = [np.array([i, 0.0, 0.0]) + 0.2 * rng.standard_normal(3) for i in range(0, 15, 3)]
    gnss_a = [GnssFactor(i, p, 0.5) for i, p in zip(range(0, 15, 3), gnss_pos)]
    shift = np.array([10.0, -4.0, 2.0])
    gnss_b = [GnssFactor(i, p + shift, 0.5) for i, p in zip(range(0, 15, 3), gnss_pos)]
    fused_a = fuse_pose_graph(nodes, odom, gnss_a)
    shifted_nodes = [StateNode(nd.timestamp, Pose(t=nd.pose.t + shift, q=nd.pose.q))
                     for nd in nodes]
    fused_b = fuse_pose_graph(shifted_nodes, odom, gnss_b)
    for a, b in zip(fused_a.nodes, fused_b.nodes):
        assert np.allclose(a.pose.t + shift, b.pose.t, atol=1e-6)


def test_weak_gnss_limit_matches_grid_search_oracle():
    # 5-node straight chain, strong odometry, very weak GNSS: the solution keeps
    # the dead-reckoned shape and translates it to the GNSS-optimal placement.
    meas = np.array([1.0, 1.1, 0.9, 1.05])
    dead = np.concatenate([[0.0], np.cumsum(meas)])
    gnss_idx = [0, 2, 4]
    gnss_pos = np.array([[0.3, 0, 0], [2.2, 0, 0], [4.4, 0, 0]])
    sigma_t, sigma_g = 1e-3, 1e3

    # oracle: grid search over a rigid x-shift of the dead-reckoned chain
    def total_cost(dxs):
        c = np.zeros_like(dxs)
        for k, i in enumerate(gnss_idx):
            c += ((dead[i] + dxs - gnss_pos[k, 0]) / sigma_g) ** 2
        return c
    grid = np.linspace(-2, 2, 8001)
    best = grid[np.argmin(total_cost(grid))]

    nodes = [StateNode(float(i), Pose(t=[dead[i], 0, 0])) for i in range(5)]
    odom = [OdometryFactor(i, i + 1, Pose(t=[meas[i], 0, 0]), sigma_t, 1e-4)
            for i in range(4)]
    gnss = [GnssFactor(i, gnss_pos[k], sigma_g) for k, i in enumerate(gnss_idx)]
    fused = fuse_pose_graph(nodes, odom, gnss, FusionConfig(max_iterations=200))
    got = np.array([nd.pose.t[0] for nd in fused.nodes])
    assert np.allclose(got, dead + best, atol=1e-3)
    # placement anchors at the GNSS centroid offset
    assert best == pytest.approx(np.mean(gnss_pos[:, 0] - dead[gnss_idx]), abs=1e-3)


def make_traj(nodes):
    return FusedTrajectory(nodes=nodes, final_cost=0.0, iterations=0)


def test_interpolate_at_node():
    nodes = straight_nodes(3)
    p = interpolate_pose(make_traj(nodes), 1.0)
    assert np.allclose(p.t, [1, 0, 0])


def test_interpolate_linear_midpoint():
    nodes = [StateNode(0.0, Pose(t=[0, 0, 0])), StateNode(1.0, Pose(t=[2, 0, 0]))]
    p = interpolate_pose(make_traj(nodes), 0.5)
    assert np.allclose(p.t, [1, 0, 0])


def test_interpolate_slerp_midpoint():
    yaw90 = rotvec_to_quat([0, 0, math.pi / 2])
    nodes = [StateNode(0.0, Pose()), StateNode(1.0, Pose(q=yaw90))]
    p = interpolate_pose(make_traj(nodes), 0.5)
    expected = quat_slerp([0, 0, 0, 1], yaw90, 0.5)  # 45 deg yaw closed form
    assert np.allclose(p.q, rotvec_to_quat([0, 0, math.pi / 4]), atol=1e-9)
    assert np.allclose(p.q, expected, atol=1e-12)


def test_interpolate_out_of_range():
    nodes = straight_nodes(3)
    with pytest.raises(OutOfRangeError):
        interpolate_pose(make_traj(nodes), 2.5 + 1.0)
