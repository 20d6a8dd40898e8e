"""Compiled inner loops shared by the equilibrium solvers.

Everything here works on flat arrays: the graph in CSR-by-tail form
(``indptr``, ``heads``, ``links``), the congestion polynomial as a raw
coefficient array, and OD pairs grouped by origin.  The Python-level
modules own validation and reporting; these kernels only crunch.  All
workspace buffers are caller-provided so the hot loops allocate nothing.
"""
from __future__ import annotations

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_MAX_ITER = 1
STATUS_BAD_COST = -2


@njit(cache=True)
def poly_value(beta, z):
    out = beta[-1]
    for i in range(len(beta) - 2, -1, -1):
        out = out * z + beta[i]
    return out


@njit(cache=True)
def poly_derivative(beta, z):
    n = len(beta) - 1
    if n == 0:
        return 0.0
    out = n * beta[n]
    for i in range(n - 1, 0, -1):
        out = out * z + i * beta[i]
    return out


@njit(cache=True)
def poly_integral(beta, z):
    # int_0^z of the polynomial
    n = len(beta) - 1
    out = beta[n] / (n + 1)
    for i in range(n - 1, -1, -1):
        out = out * z + beta[i] / (i + 1)
    return out * z


@njit(cache=True)
def link_costs(t0, m, beta, x, out):
    for a in range(len(t0)):
        out[a] = t0[a] * poly_value(beta, x[a] / m[a])


@njit(cache=True)
def link_cost_slopes(t0, m, beta, x, out):
    for a in range(len(t0)):
        out[a] = t0[a] * poly_derivative(beta, x[a] / m[a]) / m[a]


@njit(cache=True)
def beckmann_total(t0, m, beta, x):
    total = 0.0
    for a in range(len(t0)):
        total += t0[a] * m[a] * poly_integral(beta, x[a] / m[a])
    return total


@njit(cache=True)
def dijkstra_csr(indptr, heads, links, cost, source, dist, pred_link, hkey, hnode):
    """Single-origin shortest paths; fills ``dist`` and the entering ``pred_link``.

    Heap buffers must hold ``n_links + 2`` entries: every link relaxes at
    most once, so the lazy-deletion heap never grows past that.
    """
    n = len(dist)
    for v in range(n):
        dist[v] = np.inf
        pred_link[v] = -1
    done = np.zeros(n, dtype=np.uint8)
    dist[source] = 0.0
    hkey[0] = 0.0
    hnode[0] = source
    size = 1
    while size > 0:
        key = hkey[0]
        u = hnode[0]
        size -= 1
        hkey[0] = hkey[size]
        hnode[0] = hnode[size]
        i = 0
        while True:
            l = 2 * i + 1
            r = l + 1
            smallest = i
            if l < size and hkey[l] < hkey[smallest]:
                smallest = l
            if r < size and hkey[r] < hkey[smallest]:
                smallest = r
            if smallest == i:
                break
            hkey[i], hkey[smallest] = hkey[smallest], hkey[i]
            hnode[i], hnode[smallest] = hnode[smallest], hnode[i]
            i = smallest
        if done[u] or key > dist[u]:
            continue
        done[u] = 1
        for e in range(indptr[u], indptr[u + 1]):
            v = heads[e]
            if done[v]:
                continue
            nd = dist[u] + cost[links[e]]
            if nd < dist[v]:
                dist[v] = nd
                pred_link[v] = links[e]
                j = size
                hkey[j] = nd
                hnode[j] = v
                size += 1
                while j > 0:
                    p = (j - 1) // 2
                    if hkey[p] <= hkey[j]:
                        break
                    hkey[p], hkey[j] = hkey[j], hkey[p]
                    hnode[p], hnode[j] = hnode[j], hnode[p]
                    j = p


@njit(cache=True)
def aon_into(indptr, heads, links, link_tails, cost,
             orig_nodes, orig_ptr, dests, dems,
             y, dist, pred_link, hkey, hnode):
    """All-or-nothing loading of grouped OD demands on current shortest routes.

    Zeroes and fills ``y``; returns the total demand-weighted shortest-route
    cost (the lower-bound term of the relative gap).
    """
    for a in range(len(y)):
        y[a] = 0.0
    sptt = 0.0
    for k in range(len(orig_nodes)):
        dijkstra_csr(indptr, heads, links, cost, orig_nodes[k], dist, pred_link, hkey, hnode)
        for j in range(orig_ptr[k], orig_ptr[k + 1]):
            t = dests[j]
            g = dems[j]
            sptt += g * dist[t]
            if g > 0.0:
                v = t
                while v != orig_nodes[k]:
                    a = pred_link[v]
                    y[a] += g
                    v = link_tails[a]
    return sptt


@njit(cache=True)
def aon_by_od_into(indptr, heads, links, link_tails, cost,
                   orig_nodes, orig_ptr, dests, dems,
                   y, by_od, dist, pred_link, hkey, hnode):
    """As :func:`aon_into` but also writes per-pair route flows into ``by_od``.

    ``by_od`` rows follow the grouped (origin-sorted) OD order.
    """
    for a in range(len(y)):
        y[a] = 0.0
    by_od[:, :] = 0.0
    sptt = 0.0
    row = 0
    for k in range(len(orig_nodes)):
        dijkstra_csr(indptr, heads, links, cost, orig_nodes[k], dist, pred_link, hkey, hnode)
        for j in range(orig_ptr[k], orig_ptr[k + 1]):
            t = dests[j]
            g = dems[j]
            sptt += g * dist[t]
            if g > 0.0:
                v = t
                while v != orig_nodes[k]:
                    a = pred_link[v]
                    y[a] += g
                    by_od[row, a] += g
                    v = link_tails[a]
            row += 1
    return sptt


@njit(cache=True)
def msa_loop(indptr, heads, links, link_tails, t0, m, beta,
             orig_nodes, orig_ptr, dests, dems, eps, max_iter):
    """Successive-averages loop: step ``1/iter`` toward the all-or-nothing flow.

    Stops when the relative gap ``|x_l - x_{l-1}| / |x_l|`` drops below
    ``eps``.  Returns (flows, rg trace, objective trace, iterations, status).
    """
    n_links = len(t0)
    n_nodes = len(indptr) - 1
    x = np.zeros(n_links)
    cost = np.empty(n_links)
    y = np.empty(n_links)
    dist = np.empty(n_nodes)
    pred_link = np.empty(n_nodes, dtype=np.int64)
    hkey = np.empty(n_links + 2, dtype=np.float64)
    hnode = np.empty(n_links + 2, dtype=np.int64)
    rg_trace = np.empty(max_iter)
    obj_trace = np.empty(max_iter)
    status = STATUS_MAX_ITER
    it = 0
    for ell in range(1, max_iter + 1):
        link_costs(t0, m, beta, x, cost)
        for a in range(n_links):
            if cost[a] <= 0.0:
                return x, rg_trace[:it], obj_trace[:it], it, STATUS_BAD_COST
        aon_into(indptr, heads, links, link_tails, cost,
                 orig_nodes, orig_ptr, dests, dems, y, dist, pred_link, hkey, hnode)
        lam = 1.0 / ell
        diff2 = 0.0
        norm2 = 0.0
        for a in range(n_links):
            step = lam * (y[a] - x[a])
            x[a] += step
            diff2 += step * step
            norm2 += x[a] * x[a]
        rg = 0.0 if norm2 == 0.0 else np.sqrt(diff2 / norm2)
        rg_trace[ell - 1] = rg
        obj_trace[ell - 1] = beckmann_total(t0, m, beta, x)
        it = ell
        if rg < eps:
            status = STATUS_OK
            break
    return x, rg_trace[:it], obj_trace[:it], it, status


@njit(cache=True)
def exact_line_search(t0, m, beta, x, d, width=1e-12):
    """Minimize the Beckmann potential along ``x + theta d`` for ``theta in [0, 1]``.

    Bisection on the scalar derivative ``sum_a t_a(x + theta d) d_a``,
    which is monotone for nondecreasing latencies.
    """
    g0 = 0.0
    g1 = 0.0
    for a in range(len(t0)):
        g0 += t0[a] * poly_value(beta, x[a] / m[a]) * d[a]
        g1 += t0[a] * poly_value(beta, (x[a] + d[a]) / m[a]) * d[a]
    if g0 >= 0.0:
        return 0.0
    if g1 <= 0.0:
        return 1.0
    lo = 0.0
    hi = 1.0
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        gm = 0.0
        for a in range(len(t0)):
            gm += t0[a] * poly_value(beta, (x[a] + mid * d[a]) / m[a]) * d[a]
        if gm > 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def build_csr(network):
    """CSR-by-tail adjacency arrays ``(indptr, heads, links)`` for the kernels."""
    order = np.argsort(network.tail, kind="stable")
    heads = network.head[order].astype(np.int64)
    links = order.astype(np.int64)
    indptr = np.zeros(network.n_nodes + 1, dtype=np.int64)
    np.add.at(indptr, network.tail + 1, 1)
    indptr = np.cumsum(indptr)
    return indptr, heads, links


def group_by_origin(od_pairs, demand):
    """Sort OD pairs by origin for the kernels.

    Returns (orig_nodes, orig_ptr, dests, dems, perm) where ``perm`` maps
    grouped row order back to the original OD order.
    """
    od_pairs = np.asarray(od_pairs, dtype=np.int64).reshape(-1, 2)
    perm = np.argsort(od_pairs[:, 0], kind="stable")
    origins = od_pairs[perm, 0]
    dests = od_pairs[perm, 1].astype(np.int64)
    dems = np.asarray(demand, dtype=float)[perm]
    orig_nodes, starts = np.unique(origins, return_index=True)
    orig_ptr = np.append(starts, len(origins)).astype(np.int64)
    return orig_nodes.astype(np.int64), orig_ptr, dests, dems, perm
