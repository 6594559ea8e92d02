"""Binary raster thinning and skeleton path tracing.

Thinning follows the two-subiteration Zhang-Suen neighbourhood rules: a
foreground pixel is deleted when it has 2..6 foreground neighbours, exactly
one 0->1 transition around its 8-neighbourhood, and the directional products
for the current subiteration vanish.  Iterates to a fixed point, leaving a
one-cell-wide, connectivity-preserving skeleton.
"""

from __future__ import annotations

import numpy as np

# clockwise 8-neighbourhood offsets starting north: P2..P9
_OFFSETS = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def _neighbour_stack(img: np.ndarray) -> np.ndarray:
    pad = np.pad(img, 1)
    h, w = img.shape
    return np.stack([pad[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
                     for dr, dc in _OFFSETS]).astype(np.uint8)


def zhang_suen_thin(mask: np.ndarray) -> np.ndarray:
    """Thin a boolean raster to a one-cell-wide skeleton."""
    img = np.asarray(mask).astype(np.uint8)
    while True:
        changed = False
        for step in (0, 1):
            P = _neighbour_stack(img)
            B = P.sum(axis=0)
            ring = np.concatenate([P, P[:1]], axis=0)
            A = ((ring[:-1] == 0) & (ring[1:] == 1)).sum(axis=0)
            # P indices: 0=P2(N) 1=P3 2=P4(E) 3=P5 4=P6(S) 5=P7 6=P8(W) 7=P9
            if step == 0:
                c1 = P[0] * P[2] * P[4] == 0
                c2 = P[2] * P[4] * P[6] == 0
            else:
                c1 = P[0] * P[2] * P[6] == 0
                c2 = P[0] * P[4] * P[6] == 0
            remove = (img == 1) & (B >= 2) & (B <= 6) & (A == 1) & c1 & c2
            if np.any(remove):
                img[remove] = 0
                changed = True
        if not changed:
            return img.astype(bool)


def _neighbours(p, cells):
    """8-neighbours of p, except diagonal links shortcut by an orthogonal cell.

    Two diagonal cells that share an orthogonal neighbour form a triangle in
    the skeleton graph; dropping the diagonal edge keeps connectivity and
    removes the fake junctions it would create (e.g. at right-angle corners).
    """
    out = []
    for dr, dc in _OFFSETS:
        q = (p[0] + dr, p[1] + dc)
        if q not in cells:
            continue
        if dr != 0 and dc != 0:
            if (p[0], q[1]) in cells or (q[0], p[1]) in cells:
                continue
        out.append(q)
    return out


def trace_skeleton_paths(skel: np.ndarray, min_spur_cells: int = 3):
    """Split a skeleton into simple open paths at junction cells.

    Cells with one neighbour are endpoints, cells with three or more are
    junctions; arcs run between them.  Short junction spurs (fewer than
    ``min_spur_cells`` cells) are artifacts of thinning and are dropped.
    Closed loops with no terminal cell are returned as a single path.
    Returns a list of (n, 2) integer arrays of (row, col) cells.
    """
    cells = set(map(tuple, np.argwhere(np.asarray(skel, dtype=bool))))
    if not cells:
        return []
    deg = {p: len(_neighbours(p, cells)) for p in cells}
    terminals = sorted(p for p in cells if deg[p] != 2)
    visited = set()

    def edge(a, b):
        return (a, b) if a <= b else (b, a)

    paths = []
    for start in terminals:
        for nxt in sorted(_neighbours(start, cells)):
            if edge(start, nxt) in visited:
                continue
            path = [start, nxt]
            visited.add(edge(start, nxt))
            while deg[path[-1]] == 2:
                cand = [q for q in sorted(_neighbours(path[-1], cells))
                        if edge(path[-1], q) not in visited]
                if not cand:
                    break
                visited.add(edge(path[-1], cand[0]))
                path.append(cand[0])
            is_spur = ((deg[path[0]] >= 3 or deg[path[-1]] >= 3)
                       and len(path) < min_spur_cells)
            if len(path) >= 2 and not is_spur:
                paths.append(np.array(path, dtype=int))
    # leftover pure cycles
    remaining = sorted(p for p in cells if deg[p] == 2
                       and any(edge(p, q) not in visited for q in _neighbours(p, cells)))
    for start in remaining:
        cand = [q for q in sorted(_neighbours(start, cells))
                if edge(start, q) not in visited]
        if not cand:
            continue
        path = [start, cand[0]]
        visited.add(edge(start, cand[0]))
        while True:
            cand = [q for q in sorted(_neighbours(path[-1], cells))
                    if edge(path[-1], q) not in visited]
            if not cand:
                break
            visited.add(edge(path[-1], cand[0]))
            path.append(cand[0])
        if len(path) >= 2:
            paths.append(np.array(path, dtype=int))
    return paths


def douglas_peucker(points: np.ndarray, eps: float) -> np.ndarray:
    """Classic recursive polyline simplification; eps <= 0 keeps every vertex."""
    points = np.asarray(points, dtype=float)
    if eps <= 0.0 or len(points) <= 2:
        return points.copy()
    keep = np.zeros(len(points), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(points) - 1)]
    while stack:
        a, b = stack.pop()
        if b - a < 2:
            continue
        seg = points[b] - points[a]
        norm = np.linalg.norm(seg)
        mid = points[a + 1:b]
        if norm < 1e-12:
            dist = np.linalg.norm(mid - points[a], axis=1)
        else:
            cross = (seg[0] * (mid[:, 1] - points[a, 1])
                     - seg[1] * (mid[:, 0] - points[a, 0]))
            dist = np.abs(cross) / norm
        worst = int(np.argmax(dist))
        if dist[worst] > eps:
            k = a + 1 + worst
            keep[k] = True
            stack.append((a, k))
            stack.append((k, b))
    return points[keep]
