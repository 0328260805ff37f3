"""Compiled loops for multi-scale bilinear sampling.

Coordinates are normalised with pixel centre ``i`` at ``(i + 0.5) / n``;
samples outside a level read zeros.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def ms_sample_forward(value, shapes, starts, vidx, loc, attn):
    # value (Bv, Lv, H, D); loc (B, Q, H, L, K, 2); attn (B, Q, H, L, K)
    B, Q, H, L, K = attn.shape
    D = value.shape[3]
    out = np.zeros((B, Q, H, D), dtype=value.dtype)
    for b in range(B):
        vb = vidx[b]
        for q in range(Q):
            for h in range(H):
                for lv in range(L):
                    hl = shapes[lv, 0]
                    wl = shapes[lv, 1]
                    s = starts[lv]
                    for k in range(K):
                        a = attn[b, q, h, lv, k]
                        px = loc[b, q, h, lv, k, 0] * wl - 0.5
                        py = loc[b, q, h, lv, k, 1] * hl - 0.5
                        x0 = math.floor(px)
                        y0 = math.floor(py)
                        fx = px - x0
                        fy = py - y0
                        for dy in range(2):
                            yi = int(y0) + dy
                            if yi < 0 or yi >= hl:
                                continue
                            wy = fy if dy == 1 else 1.0 - fy
                            for dx in range(2):
                                xi = int(x0) + dx
                                if xi < 0 or xi >= wl:
                                    continue
                                wx = fx if dx == 1 else 1.0 - fx
                                c = a * wx * wy
                                idx = s + yi * wl + xi
                                for d in range(D):
                                    out[b, q, h, d] += c * value[vb, idx, h, d]
    return out


@njit(cache=True)
def ms_sample_backward(grad_out, value, shapes, starts, vidx, loc, attn):
    B, Q, H, L, K = attn.shape
    D = value.shape[3]
    g_value = np.zeros_like(value)
    g_loc = np.zeros_like(loc)
    g_attn = np.zeros_like(attn)
    for b in range(B):
        vb = vidx[b]
        for q in range(Q):
            for h in range(H):
                for lv in range(L):
                    hl = shapes[lv, 0]
                    wl = shapes[lv, 1]
                    s = starts[lv]
                    for k in range(K):
                        a = attn[b, q, h, lv, k]
                        px = loc[b, q, h, lv, k, 0] * wl - 0.5
                        py = loc[b, q, h, lv, k, 1] * hl - 0.5
                        x0 = math.floor(px)
                        y0 = math.floor(py)
                        fx = px - x0
                        fy = py - y0
                        ga = 0.0
                        gpx = 0.0
                        gpy = 0.0
                        for dy in range(2):
                            yi = int(y0) + dy
                            if yi < 0 or yi >= hl:
                                continue
                            wy = fy if dy == 1 else 1.0 - fy
                            sy = 1.0 if dy == 1 else -1.0
                            for dx in range(2):
                                xi = int(x0) + dx
                                if xi < 0 or xi >= wl:
                                    continue
                                wx = fx if dx == 1 else 1.0 - fx
                                sx = 1.0 if dx == 1 else -1.0
                                idx = s + yi * wl + xi
                                dot = 0.0
                                c = a * wx * wy
                                for d in range(D):
                                    g = grad_out[b, q, h, d]
                                    dot += g * value[vb, idx, h, d]
                                    g_value[vb, idx, h, d] += c * g
                                ga += wx * wy * dot
                                gpx += sx * wy * dot
                                gpy += sy * wx * dot
                        g_attn[b, q, h, lv, k] = ga
                        g_loc[b, q, h, lv, k, 0] = a * gpx * wl
                        g_loc[b, q, h, lv, k, 1] = a * gpy * hl
    return g_value, g_loc, g_attn

