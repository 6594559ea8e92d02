"""Levenberg-damped Gauss-Newton bundle solver with landmark Schur elimination.

One solver covers both flavours of bundle adjustment used by the pipeline:

- ordinary BA: one pose entity per camera, identity camera-in-entity
  transforms, minimizing  sum_ij || u_ij - proj(P_i, X_j) ||^2,
- rig-constrained BA: one pose entity per rig frame (timestamp) and a fixed
  camera-in-body transform per camera, so the camera pose is derived as
  entity_pose o rel and only 6 parameters per frame are optimized.

Residual model per observation o (entity e, point p, camera-in-entity (Rr, tr)):

    p_body = Re^T (X_p - te)
    p_cam  = Rr^T (p_body - tr)
    r      = [fx x/z + cx, fy y/z + cy] - uv

State update: te <- te + dt (world), Re <- Re Exp(dtheta) (body-local), X <- X + dX.
Analytic Jacobians:

    dp_cam/dte     = -Rr^T Re^T
    dp_cam/dtheta  =  Rr^T hat(p_body)
    dp_cam/dX      =  Rr^T Re^T

The normal equations have block-diagonal entity and point Hessians (each
residual touches one entity and one point), so the point blocks are
eliminated with a Schur complement and only the reduced entity system is
solved densely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError


@dataclass
class SolverConfig:
    max_iterations: int = 50
    relative_tol: float = 1e-10
    absolute_tol: float = 1e-16   # stop below this total cost (pixels^2)
    initial_damping: float = 1e-4
    min_depth: float = 1e-6


def so3_exp_batch(v: np.ndarray) -> np.ndarray:
    """Rodrigues for an (N,3) stack of axis-angle vectors."""
    v = np.asarray(v, dtype=float)
    n = v.shape[0]
    angle = np.linalg.norm(v, axis=1)
    K = np.zeros((n, 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -v[:, 2], v[:, 1]
    K[:, 1, 0], K[:, 1, 2] = v[:, 2], -v[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -v[:, 1], v[:, 0]
    out = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    small = angle < 1e-8
    if np.any(small):
        Ks = K[small]
        out[small] += Ks + 0.5 * (Ks @ Ks)
    big = ~small
    if np.any(big):
        a = angle[big]
        Kn = K[big] / a[:, None, None]
        out[big] += (np.sin(a)[:, None, None] * Kn
                     + (1.0 - np.cos(a))[:, None, None] * (Kn @ Kn))
    return out


def _hat_batch(v: np.ndarray) -> np.ndarray:
    n = v.shape[0]
    K = np.zeros((n, 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -v[:, 2], v[:, 1]
    K[:, 1, 0], K[:, 1, 2] = v[:, 2], -v[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -v[:, 1], v[:, 0]
    return K


def evaluate_residuals(ent_R, ent_t, X, rel_R, rel_t, obs_ent, obs_pt, uv, K,
                       min_depth=1e-6):
    """Reprojection residuals (O,2) and depths (O,); no gating."""
    d = X[obs_pt] - ent_t[obs_ent]
    p_body = np.einsum("oji,oj->oi", ent_R[obs_ent], d)
    p_cam = np.einsum("oji,oj->oi", rel_R, p_body - rel_t)
    z = p_cam[:, 2]
    safe = np.where(np.abs(z) < min_depth, np.sign(z) * min_depth + (z == 0) * min_depth, z)
    u = K[:, 0] * p_cam[:, 0] / safe + K[:, 2]
    v = K[:, 1] * p_cam[:, 1] / safe + K[:, 3]
    r = np.stack([u, v], axis=1) - uv
    return r, z, p_cam, p_body


def reprojection_cost(ent_R, ent_t, X, rel_R, rel_t, obs_ent, obs_pt, uv, K,
                      min_depth=1e-6) -> float:
    """Total squared reprojection error; +inf when any depth is non-positive."""
    r, z, _, _ = evaluate_residuals(ent_R, ent_t, X, rel_R, rel_t, obs_ent, obs_pt, uv, K,
                                    min_depth)
    if np.any(z <= min_depth):
        return float("inf")
    return float(np.sum(r * r))


def linearize_reprojection(ent_R, ent_t, X, rel_R, rel_t, obs_ent, obs_pt, uv, K,
                           min_depth=1e-6):
    """Residuals plus analytic Jacobians.

    Returns (r (O,2), J_ent (O,2,6), J_pt (O,2,3)).  J_ent columns are
    [dt(3), dtheta(3)] of the observing entity.
    """
    r, z, p_cam, p_body = evaluate_residuals(ent_R, ent_t, X, rel_R, rel_t,
                                             obs_ent, obs_pt, uv, K, min_depth)
    zc = np.maximum(z, min_depth)
    O = r.shape[0]
    du = np.zeros((O, 2, 3))
    du[:, 0, 0] = K[:, 0] / zc
    du[:, 0, 2] = -K[:, 0] * p_cam[:, 0] / (zc * zc)
    du[:, 1, 1] = K[:, 1] / zc
    du[:, 1, 2] = -K[:, 1] * p_cam[:, 1] / (zc * zc)

    rel_RT = np.swapaxes(rel_R, 1, 2)
    A = rel_RT @ np.swapaxes(ent_R[obs_ent], 1, 2)  # Rr^T Re^T
    J_pt = du @ A
    J_ent = np.empty((O, 2, 6))
    J_ent[:, :, :3] = -J_pt
    J_ent[:, :, 3:] = du @ (rel_RT @ _hat_batch(p_body))
    return r, J_ent, J_pt


def solve_bundle(ent_R, ent_t, X, rel_R, rel_t, obs_ent, obs_pt, uv, K,
                 fixed_entities, cfg: SolverConfig | None = None):
    """Minimize total squared reprojection error over entity poses and points.

    All arrays are copied; returns (ent_R, ent_t, X, cost_history).  Entities
    listed in ``fixed_entities`` (and entities without observations) are held
    constant; points observed fewer than twice are held constant too.
    """
    cfg = cfg or SolverConfig()
    ent_R = np.array(ent_R, dtype=float)
    ent_t = np.array(ent_t, dtype=float)
    X = np.array(X, dtype=float)
    rel_R = np.asarray(rel_R, dtype=float)
    rel_t = np.asarray(rel_t, dtype=float)
    obs_ent = np.asarray(obs_ent, dtype=int)
    obs_pt = np.asarray(obs_pt, dtype=int)
    uv = np.asarray(uv, dtype=float)
    K = np.asarray(K, dtype=float)
    E, P = ent_R.shape[0], X.shape[0]

    ent_free = np.ones(E, dtype=bool)
    ent_free[list(fixed_entities)] = False
    ent_free &= np.bincount(obs_ent, minlength=E) > 0
    pt_free = np.bincount(obs_pt, minlength=P) >= 2

    # observation rows grouped by free point and bucketed by observation
    # count, so the Schur pair blocks assemble as a few batched einsums
    order = np.argsort(obs_pt, kind="stable")
    sorted_pt = obs_pt[order]
    group_starts = np.searchsorted(sorted_pt, np.arange(P))
    group_ends = np.searchsorted(sorted_pt, np.arange(P), side="right")
    buckets = {}
    for p in np.flatnonzero(pt_free):
        sel = order[group_starts[p]:group_ends[p]]
        if sel.size:
            buckets.setdefault(sel.size, []).append((p, sel))
    bucket_arrays = []
    for n_sz in sorted(buckets):
        entries = buckets[n_sz]
        pts_idx = np.array([p for p, _ in entries], dtype=int)
        sel_mat = np.stack([s for _, s in entries])
        bucket_arrays.append((pts_idx, sel_mat))

    free_rows = np.flatnonzero(ent_free)
    col_index = np.concatenate([np.arange(6 * i, 6 * i + 6) for i in free_rows]) \
        if free_rows.size else np.array([], dtype=int)

    cost = reprojection_cost(ent_R, ent_t, X, rel_R, rel_t, obs_ent, obs_pt, uv, K,
                             cfg.min_depth)
    if not np.isfinite(cost):
        raise DivergenceError("initial reprojection cost is non-finite "
                              "(points at or behind cameras)")
    costs = [cost]
    lam = cfg.initial_damping
    if cost <= cfg.absolute_tol:
        return ent_R, ent_t, X, costs

    for _ in range(cfg.max_iterations):
        r, Jc, Jp = linearize_reprojection(ent_R, ent_t, X, rel_R, rel_t,
                                           obs_ent, obs_pt, uv, K, cfg.min_depth)
        Jp = Jp * pt_free[obs_pt, None, None]  # fixed points: no point derivative
        Hcc = np.zeros((E, 6, 6))
        np.add.at(Hcc, obs_ent, np.einsum("oai,oaj->oij", Jc, Jc))
        bc = np.zeros((E, 6))
        np.add.at(bc, obs_ent, -np.einsum("oai,oa->oi", Jc, r))
        Hpp = np.zeros((P, 3, 3))
        np.add.at(Hpp, obs_pt, np.einsum("oai,oaj->oij", Jp, Jp))
        bp = np.zeros((P, 3))
        np.add.at(bp, obs_pt, -np.einsum("oai,oa->oi", Jp, r))
        W = np.einsum("oai,oaj->oij", Jc, Jp)  # (O,6,3) entity-point coupling

        accepted = False
        while lam < 1e12:
            Hcc_d = Hcc.copy()
            diag_c = np.einsum("eii->ei", Hcc_d)
            diag_c += lam * np.einsum("eii->ei", Hcc) + 1e-12
            Hpp_d = Hpp.copy()
            diag_p = np.einsum("pii->pi", Hpp_d)
            diag_p += lam * np.einsum("pii->pi", Hpp) + 1e-12

            try:
                Hpp_inv = np.linalg.inv(Hpp_d)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            Hpp_inv = Hpp_inv * pt_free[:, None, None]

            S4 = np.zeros((E, E, 6, 6))
            S4[np.arange(E), np.arange(E)] = Hcc_d
            rhs = bc.copy()
            Y = W @ Hpp_inv[obs_pt]
            for pts_idx, sel_mat in bucket_arrays:
                n_sz = sel_mat.shape[1]
                # chunk so the (chunk, n, n, 6, 6) pair-block tensor stays small
                chunk = max(int(4_000_000 // (n_sz * n_sz * 36)), 1)
                for s0 in range(0, len(pts_idx), chunk):
                    pi = pts_idx[s0:s0 + chunk]
                    sm = sel_mat[s0:s0 + chunk]
                    cams = obs_ent[sm]
                    Yg, Wg = Y[sm], W[sm]
                    blk = np.einsum("gaik,gbjk->gabij", Yg, Wg)
                    pa = np.repeat(cams, n_sz, axis=1).reshape(-1)
                    pb = np.tile(cams, (1, n_sz)).reshape(-1)
                    np.subtract.at(S4, (pa, pb), blk.reshape(-1, 6, 6))
                    Yb = np.einsum("gaik,gk->gai", Yg, bp[pi])
                    np.subtract.at(rhs, cams.reshape(-1), Yb.reshape(-1, 6))
            S = S4.transpose(0, 2, 1, 3).reshape(6 * E, 6 * E)

            dc = np.zeros((E, 6))
            if col_index.size:
                try:
                    sol = np.linalg.solve(S[np.ix_(col_index, col_index)],
                                          rhs.reshape(-1)[col_index])
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                dc.reshape(-1)[col_index] = sol

            acc = np.zeros((P, 3))
            np.add.at(acc, obs_pt, np.einsum("oij,oi->oj", W, dc[obs_ent]))
            dp = np.einsum("pij,pj->pi", Hpp_inv, bp - acc)

            new_t = ent_t + dc[:, :3]
            new_R = ent_R @ so3_exp_batch(dc[:, 3:])
            new_X = X + dp
            new_cost = reprojection_cost(new_R, new_t, new_X, rel_R, rel_t,
                                         obs_ent, obs_pt, uv, K, cfg.min_depth)
            if np.isfinite(new_cost) and new_cost <= cost:
                rel_change = (cost - new_cost) / max(cost, 1e-300)
                ent_R, ent_t, X = new_R, new_t, new_X
                cost = new_cost
                costs.append(cost)
                lam = max(lam * 0.1, 1e-14)
                accepted = True
                break
            lam *= 10.0
        if not accepted or rel_change < cfg.relative_tol or cost <= cfg.absolute_tol:
            break
    return ent_R, ent_t, X, costs


def refine_single_pose(R, t, X, uv, K, cfg: SolverConfig | None = None):
    """Re-estimate one 6-DoF pose against fixed points (dense 6x6 LM)."""
    cfg = cfg or SolverConfig()
    R = np.array(R, dtype=float)
    t = np.array(t, dtype=float)
    n = X.shape[0]
    rel_R = np.broadcast_to(np.eye(3), (n, 3, 3))
    rel_t = np.zeros((n, 3))
    obs_ent = np.zeros(n, dtype=int)
    obs_pt = np.arange(n)

    def cost_of(Rc, tc):
        return reprojection_cost(Rc[None], tc[None], X, rel_R, rel_t,
                                 obs_ent, obs_pt, uv, K, cfg.min_depth)

    cost = cost_of(R, t)
    if not np.isfinite(cost) or cost <= cfg.absolute_tol:
        return R, t, cost
    lam = cfg.initial_damping
    for _ in range(cfg.max_iterations):
        r, Jc, _ = linearize_reprojection(R[None], t[None], X, rel_R, rel_t,
                                          obs_ent, obs_pt, uv, K, cfg.min_depth)
        J = Jc.reshape(-1, 6)
        rv = r.reshape(-1)
        H = J.T @ J
        g = J.T @ rv
        accepted = False
        while lam < 1e12:
            try:
                dx = np.linalg.solve(H + lam * (np.diag(np.diag(H)) + 1e-12 * np.eye(6)), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            new_t = t + dx[:3]
            new_R = R @ so3_exp_batch(dx[None, 3:])[0]
            new_cost = cost_of(new_R, new_t)
            if np.isfinite(new_cost) and new_cost <= cost:
                rel_change = (cost - new_cost) / max(cost, 1e-300)
                R, t, cost = new_R, new_t, new_cost
                lam = max(lam * 0.1, 1e-14)
                accepted = True
                break
            lam *= 10.0
        if not accepted or rel_change < cfg.relative_tol or cost <= cfg.absolute_tol:
            break
    return R, t, cost
