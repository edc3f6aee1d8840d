"""Shared geometry fixtures and brute-force oracles for penetration tests.

Everything here is deliberately slow and independent of the package
internals: ray-parity inside tests via Moller-Trumbore, geodesic balls via a
hand-rolled heapq Dijkstra.
"""

import heapq

import numpy as np


def icosahedron():
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return verts, faces


def icosphere(subdiv=2, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Subdivided icosahedron projected back to the sphere; closed, oriented
    outward (positive signed volume, asserted)."""
    verts, faces = icosahedron()
    verts = list(verts)
    for _ in range(subdiv):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(m)
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces)
    verts = np.array(verts) * radius + np.asarray(center, dtype=float)
    assert signed_volume(verts, faces) > 0
    return verts, faces


def signed_volume(verts, faces):
    tri = verts[faces]
    return float(np.einsum("fi,fi->f", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def bumpy_sphere(rng, subdiv=2, radius=1.0, center=(0.0, 0.0, 0.0), amp=0.25):
    """Closed star-shaped deformation of the icosphere: radius scaled by a
    smooth positive field, so the surface never self-intersects."""
    verts, faces = icosphere(subdiv=subdiv, radius=1.0)
    k = rng.normal(size=(3, 3))
    phase = rng.uniform(0, 2 * np.pi, size=3)
    field = np.ones(len(verts))
    for i in range(3):
        field += (amp / 3.0) * np.sin(verts @ k[i] * 2.0 + phase[i])
    assert field.min() > 0.2
    verts = verts * field[:, None] * radius + np.asarray(center, dtype=float)
    assert signed_volume(verts, faces) > 0
    return verts, faces


def _ray_hits(origin, direction, tri):
    """Number of ray/triangle crossings (Moller-Trumbore, t > 0)."""
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    p = np.cross(direction, e2)
    det = np.einsum("fi,fi->f", e1, p)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origin - tri[:, 0]
    u = np.einsum("fi,fi->f", s, p) * inv
    q = np.cross(s, e1)
    v = np.einsum("fi,i->f", q, direction) * inv
    t = np.einsum("fi,fi->f", e2, q) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return int(hit.sum())


def ray_parity_inside(verts, faces, queries, rng, n_rays=3):
    """Majority vote over n_rays random directions of crossing-count parity."""
    tri = verts[faces]
    queries = np.atleast_2d(queries)
    votes = np.zeros(len(queries), dtype=int)
    for _ in range(n_rays):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        for i, q in enumerate(queries):
            votes[i] += _ray_hits(q, d, tri) % 2
    return votes * 2 > n_rays


def dijkstra_ball(verts, faces, source, radius):
    """Vertices within geodesic distance radius of source (edge-graph metric)."""
    adj = {}
    for a, b, c in faces:
        for i, j in ((a, b), (b, c), (c, a)):
            w = float(np.linalg.norm(verts[i] - verts[j]))
            adj.setdefault(int(i), {})[int(j)] = w
            adj.setdefault(int(j), {})[int(i)] = w
    dist = {int(source): 0.0}
    heap = [(0.0, int(source))]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist.get(u, np.inf) or d > radius:
            continue
        for v, w in adj.get(u, {}).items():
            nd = d + w
            if nd <= radius and nd < dist.get(v, np.inf):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return {u for u, d in dist.items() if d <= radius}
