"""JIT-compiled per-tile compositing loops (forward and backward).

Each pixel walks its tile's depth-ordered splat list front to back and
stops once transmittance drops below the threshold, so saturated pixels
skip the tail entirely.  Loops are sequential per pixel and tiles never
share outputs, which keeps renders bit-identical for any thread count.
The pure-numpy reference path in ``raster`` stays as the independent
oracle for these kernels.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def tile_forward(px, py, mean2, p2, og, bx, colors, bg, tau_sq, clamp, t_min,
                 rgb, asum, tstop, hit_clamp):
    """Composite one tile.  Returns the number of splat-pixel visits."""
    k = mean2.shape[0]
    p = px.shape[0]
    visits = 0
    for j in range(p):
        t = 1.0
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        wsum = 0.0
        for i in range(k):
            if t < t_min:
                break
            visits += 1
            dx = px[j] - mean2[i, 0]
            dy = py[j] - mean2[i, 1]
            m = p2[i, 0, 0] * dx * dx + 2.0 * p2[i, 0, 1] * dx * dy + p2[i, 1, 1] * dy * dy
            if m >= tau_sq:
                continue
            a = og[i] * math.exp(bx[i] * math.log1p(-m / tau_sq))
            if a > clamp:
                a = clamp
                hit_clamp[i] = True
            w = a * t
            acc0 += w * colors[i, 0]
            acc1 += w * colors[i, 1]
            acc2 += w * colors[i, 2]
            wsum += w
            t *= 1.0 - a
        rgb[j, 0] = acc0 + t * bg[0]
        rgb[j, 1] = acc1 + t * bg[1]
        rgb[j, 2] = acc2 + t * bg[2]
        asum[j] = wsum
        tstop[j] = t
    return visits


@njit(cache=True, nogil=True)
def tile_backward(px, py, mean2, p2, og, bx, colors, bg, tau_sq, clamp, t_min,
                  g_out, pg_mean2, pg_p2, pg_og, pg_bx, pg_color,
                  alpha_buf, m_buf, t_buf):
    """Adjoint of ``tile_forward``: gradients for the tile's splat list.

    d(out)/d(alpha_i) = (g . c_i) T_i - S_i / (1 - alpha_i) with S_i the
    contribution of everything behind i (including the background term);
    S is rebuilt back to front so nothing per-pixel is stored beyond the
    three scratch buffers.
    """
    k = mean2.shape[0]
    p = px.shape[0]
    for j in range(p):
        t = 1.0
        kstop = 0
        for i in range(k):
            if t < t_min:
                break
            kstop = i + 1
            dx = px[j] - mean2[i, 0]
            dy = py[j] - mean2[i, 1]
            m = p2[i, 0, 0] * dx * dx + 2.0 * p2[i, 0, 1] * dx * dy + p2[i, 1, 1] * dy * dy
            t_buf[i] = t
            m_buf[i] = m
            if m >= tau_sq:
                alpha_buf[i] = 0.0
                continue
            a = og[i] * math.exp(bx[i] * math.log1p(-m / tau_sq))
            if a > clamp:
                a = clamp
            alpha_buf[i] = a
            t *= 1.0 - a

        g0 = g_out[j, 0]
        g1 = g_out[j, 1]
        g2 = g_out[j, 2]
        suffix = (g0 * bg[0] + g1 * bg[1] + g2 * bg[2]) * t
        for i in range(kstop - 1, -1, -1):
            a = alpha_buf[i]
            if a == 0.0:
                continue
            ti = t_buf[i]
            w = a * ti
            pg_color[i, 0] += w * g0
            pg_color[i, 1] += w * g1
            pg_color[i, 2] += w * g2
            gdotc = g0 * colors[i, 0] + g1 * colors[i, 1] + g2 * colors[i, 2]
            g_a = gdotc * ti - suffix / (1.0 - a)
            suffix += gdotc * w
            if a >= clamp:
                continue  # clamp active: zero gradient into the splat
            kv = a / og[i]
            m = m_buf[i]
            x = m / tau_sq
            g_kv = g_a * og[i]
            pg_og[i] += g_a * kv
            pg_bx[i] += g_kv * kv * math.log1p(-x)
            g_m = g_kv * kv * (-bx[i] / (1.0 - x)) / tau_sq
            dx = px[j] - mean2[i, 0]
            dy = py[j] - mean2[i, 1]
            pd0 = p2[i, 0, 0] * dx + p2[i, 0, 1] * dy
            pd1 = p2[i, 0, 1] * dx + p2[i, 1, 1] * dy
            pg_mean2[i, 0] -= 2.0 * g_m * pd0
            pg_mean2[i, 1] -= 2.0 * g_m * pd1
            pg_p2[i, 0, 0] += g_m * dx * dx
            pg_p2[i, 0, 1] += g_m * dx * dy
            pg_p2[i, 1, 0] += g_m * dx * dy
            pg_p2[i, 1, 1] += g_m * dy * dy
