"""Compiled loops for the memory-bound depthwise temporal filter.

Numpy needs one full pass per tap plus temporaries; a single fused loop
reads the input once. Accumulation is in float64 regardless of dtype.
"""
import numba
import numpy as np


@numba.njit(cache=True)
def dw_forward(x, w, stride, out):
    N, C, T, V = x.shape
    K = w.shape[1]
    pad = K // 2
    T_out = out.shape[2]
    acc = np.empty(V, dtype=np.float64)
    for n in range(N):
        for c in range(C):
            for t in range(T_out):
                acc[:] = 0.0
                for k in range(K):
                    ti = stride * t + k - pad
                    if 0 <= ti < T:
                        wk = w[c, k]
                        for v in range(V):
                            acc[v] += wk * x[n, c, ti, v]
                for v in range(V):
                    out[n, c, t, v] = acc[v]


@numba.njit(cache=True)
def dw_backward_input(g, w, stride, gx):
    # gx is zero on entry
    N, C, T, V = gx.shape
    K = w.shape[1]
    pad = K // 2
    T_out = g.shape[2]
    for n in range(N):
        for c in range(C):
            for t in range(T_out):
                for k in range(K):
                    ti = stride * t + k - pad
                    if 0 <= ti < T:
                        wk = w[c, k]
                        for v in range(V):
                            gx[n, c, ti, v] += wk * g[n, c, t, v]


@numba.njit(cache=True)
def dw_backward_weight(g, x, stride, gw):
    # per-joint partial sums keep the inner loop vectorisable
    N, C, T, V = x.shape
    K = gw.shape[1]
    pad = K // 2
    T_out = g.shape[2]
    acc = np.empty(V, dtype=np.float64)
    for c in range(C):
        for k in range(K):
            acc[:] = 0.0
            for n in range(N):
                for t in range(T_out):
                    ti = stride * t + k - pad
                    if 0 <= ti < T:
                        for v in range(V):
                            acc[v] += g[n, c, t, v] * x[n, c, ti, v]
            gw[c, k] = acc.sum()


@numba.njit(cache=True)
def affine_add_relu(x, scale, shift, r, out):
    # out = max(x * scale + shift + r, 0); r is (N, C, T, 1) or (N, C, T, V)
    N, C, T, V = x.shape
    rv = r.shape[3]
    for n in range(N):
        for c in range(C):
            s = scale[c]
            b = shift[c]
            for t in range(T):
                for v in range(V):
                    y = x[n, c, t, v] * s + b + r[n, c, t, v if rv > 1 else 0]
                    out[n, c, t, v] = y if y > 0 else 0


@numba.njit(cache=True)
def channel_mean_var(x, mean, var):
    # biased per-channel statistics over (N, T, V), two passes in float64
    N, C, T, V = x.shape
    count = N * T * V
    acc = np.empty(V, dtype=np.float64)
    for c in range(C):
        acc[:] = 0.0
        for n in range(N):
            for t in range(T):
                for v in range(V):
                    acc[v] += x[n, c, t, v]
        m = acc.sum() / count
        acc[:] = 0.0
        for n in range(N):
            for t in range(T):
                for v in range(V):
                    d = x[n, c, t, v] - m
                    acc[v] += d * d
        mean[c] = m
        var[c] = acc.sum() / count


@numba.njit(cache=True)
def bn_add_relu_backward(g, out, x, mean, inv, gamma, dx, dgamma, dbeta, dr):
    # Gradients of out = max(gamma * (x - mean) * inv + beta + r, 0) with
    # batch statistics. dx first holds the relu-masked upstream gradient;
    # dr is (N, C, T, 1) or (N, C, T, V).
    N, C, T, V = x.shape
    count = N * T * V
    full_residual = dr.shape[3] > 1
    gacc = np.empty(V, dtype=np.float64)
    xacc = np.empty(V, dtype=np.float64)
    for c in range(C):
        gacc[:] = 0.0
        xacc[:] = 0.0
        m = mean[c]
        for n in range(N):
            for t in range(T):
                for v in range(V):
                    gm = g[n, c, t, v] * (out[n, c, t, v] > 0)
                    dx[n, c, t, v] = gm
                    gacc[v] += gm
                    xacc[v] += gm * (x[n, c, t, v] - m)
                if full_residual:
                    for v in range(V):
                        dr[n, c, t, v] = dx[n, c, t, v]
                else:
                    racc = 0.0
                    for v in range(V):
                        racc += dx[n, c, t, v]
                    dr[n, c, t, 0] = racc
        iv = inv[c]
        gsum = gacc.sum()
        gxsum = xacc.sum() * iv
        dgamma[c] = gxsum
        dbeta[c] = gsum
        k = gamma[c] * iv
        a = gsum / count
        b = gxsum / count * iv
        for n in range(N):
            for t in range(T):
                for v in range(V):
                    dx[n, c, t, v] = k * (dx[n, c, t, v] - a - (x[n, c, t, v] - m) * b)


@numba.njit(cache=True)
def spatial_max(x, out, winner):
    # max over joints; winner holds the first maximal joint index
    N, C, T, V = x.shape
    for n in range(N):
        for c in range(C):
            for t in range(T):
                best = x[n, c, t, 0]
                arg = 0
                for v in range(1, V):
                    if x[n, c, t, v] > best:
                        best = x[n, c, t, v]
                        arg = v
                out[n, c, t, 0] = best
                winner[n, c, t] = arg


@numba.njit(cache=True)
def spatial_max_backward(g, winner, gx):
    N, C, T, V = gx.shape
    for n in range(N):
        for c in range(C):
            for t in range(T):
                for v in range(V):
                    gx[n, c, t, v] = 0
                gx[n, c, t, winner[n, c, t]] = g[n, c, t, 0]


@numba.njit(cache=True)
def temporal_max(x, stride, out, winner):
    # non-overlapping windows of `stride` frames; a short last window is allowed
    N, C, T, V = x.shape
    T_out = out.shape[2]
    for n in range(N):
        for c in range(C):
            for t in range(T_out):
                t0 = t * stride
                for v in range(V):
                    out[n, c, t, v] = x[n, c, t0, v]
                    winner[n, c, t, v] = 0
                for k in range(1, stride):
                    if t0 + k < T:
                        for v in range(V):
                            if x[n, c, t0 + k, v] > out[n, c, t, v]:
                                out[n, c, t, v] = x[n, c, t0 + k, v]
                                winner[n, c, t, v] = k


@numba.njit(cache=True)
def temporal_max_backward(g, winner, stride, gx):
    N, C, T, V = gx.shape
    T_out = g.shape[2]
    for n in range(N):
        for c in range(C):
            for t in range(T_out):
                for k in range(stride):
                    if t * stride + k < T:
                        for v in range(V):
                            gx[n, c, t * stride + k, v] = g[n, c, t, v] * (winner[n, c, t, v] == k)


@numba.njit(cache=True)
def projected_max_backward_input(g, winner, w, gxt):
    # gxt is (N, T, V, Ci) and zero on entry; each output channel sends its
    # gradient through the projection row to the joint that won the max.
    N, Co, T = winner.shape
    Ci = w.shape[1]
    for n in range(N):
        for t in range(T):
            for c in range(Co):
                v = winner[n, c, t]
                gv = g[n, c, t, 0]
                for i in range(Ci):
                    gxt[n, t, v, i] += w[c, i] * gv


@numba.njit(cache=True)
def projected_max_backward_weight(g, winner, xt, gw):
    # gw[c, i] = sum_{n,t} g[n, c, t] * x[n, i, t, winner[n, c, t]] with x
    # given channels-last as xt (N, T, V, Ci); gw is float64 and zero on entry
    N, Co, T = winner.shape
    Ci = xt.shape[3]
    for n in range(N):
        for t in range(T):
            for c in range(Co):
                v = winner[n, c, t]
                gv = np.float64(g[n, c, t, 0])
                for i in range(Ci):
                    gw[c, i] += gv * xt[n, t, v, i]


@numba.njit(cache=True)
def scale_by_sample_mask(x, mask, out):
    # out[n, c, t, v] = x[n, c, t, v] * mask[n, t, v]
    N, C, T, V = x.shape
    for n in range(N):
        for c in range(C):
            for t in range(T):
                for v in range(V):
                    out[n, c, t, v] = x[n, c, t, v] * mask[n, t, v]
