"""Numba kernels for histogram split search and tree routing.

Rows are always visited in the order given by ``rows`` and features in
ascending index order, so every sum is reduced in a fixed order and the
chosen split does not depend on anything but the inputs.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def node_sums(rows, g, h):
    G = 0.0
    H = 0.0
    for i in range(rows.shape[0]):
        r = rows[i]
        G += g[r]
        H += h[r]
    return G, H


@njit(cache=True)
def best_split(codes, rows, g, h, n_bins, bin_lo, bin_hi, lam, gamma, min_leaf):
    """Scan every feature's histogram and return the best (gain, feature, threshold, n_left).

    A candidate sits between two consecutive non-empty bins of the node; its
    threshold is the midpoint of the largest value in the lower bin and the
    smallest value in the upper bin. Ties keep the earliest candidate, i.e.
    lowest feature index, then lowest threshold. ``feature == -1`` means no
    candidate had positive gain.
    """
    n = rows.shape[0]
    d = codes.shape[1]
    G, H = node_sums(rows, g, h)
    parent = G * G / (H + lam)
    best_gain = 0.0
    best_feat = -1
    best_thr = 0.0
    best_nleft = 0
    max_bins = bin_lo.shape[1]
    hg = np.empty(max_bins)
    hh = np.empty(max_bins)
    hc = np.empty(max_bins, dtype=np.int64)
    for f in range(d):
        nb = n_bins[f]
        if nb < 2:
            continue
        for b in range(nb):
            hg[b] = 0.0
            hh[b] = 0.0
            hc[b] = 0
        for i in range(n):
            r = rows[i]
            b = codes[r, f]
            hg[b] += g[r]
            hh[b] += h[r]
            hc[b] += 1
        GL = 0.0
        HL = 0.0
        cL = 0
        prev = -1
        for b in range(nb):
            if hc[b] == 0:
                continue
            if prev >= 0 and cL >= min_leaf and n - cL >= min_leaf:
                GR = G - GL
                HR = H - HL
                gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent) - gamma
                if gain > best_gain:
                    best_gain = gain
                    best_feat = f
                    best_thr = 0.5 * (bin_hi[f, prev] + bin_lo[f, b])
                    if best_thr >= bin_lo[f, b]:
                        best_thr = bin_hi[f, prev]
                    best_nleft = cL
            GL += hg[b]
            HL += hh[b]
            cL += hc[b]
            prev = b
    return best_gain, best_feat, best_thr, best_nleft


@njit(cache=True)
def route(X, feature, threshold, left, right, value):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@njit(cache=True)
def apply(X, feature, threshold, left, right):
    out = np.empty(X.shape[0], dtype=np.int64)
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out
