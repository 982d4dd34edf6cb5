"""Numba kernels for projection and tile compositing.

Determinism contract: projection writes per-splat slots independently; every
compositing tile writes a disjoint pixel region and a disjoint slice of the
per-entry contribution buffer, and processes its splats in the globally sorted
order. Results are therefore bit-identical for any thread count.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True, fastmath=False)
def project_kernel(
    means,        # (n, 3) f8 world means
    log_scales,   # (n, 3) f8
    quats,        # (n, 4) f8 (w, x, y, z), normalized inside
    cam_rot,      # (3, 3) f8 world-to-camera
    cam_pos,      # (3,) f8
    focal, tan_x, tan_y, near,
    width, height, dilation, det_eps,
    mean2d,       # (n, 2) f8 out
    cov2d,        # (n, 3) f8 out, packed (a, b, c) with dilation
    conic,        # (n, 3) f8 out
    depth,        # (n,) f8 out
    radius,       # (n,) f8 out
    valid,        # (n,) u1 out
    skipped,      # (1,) i8 out: in front but dropped for conditioning
):
    n = means.shape[0]
    lim_x = 1.3 * tan_x
    lim_y = 1.3 * tan_y
    n_skipped = 0
    for i in prange(n):
        tx = (cam_rot[0, 0] * (means[i, 0] - cam_pos[0])
              + cam_rot[0, 1] * (means[i, 1] - cam_pos[1])
              + cam_rot[0, 2] * (means[i, 2] - cam_pos[2]))
        ty = (cam_rot[1, 0] * (means[i, 0] - cam_pos[0])
              + cam_rot[1, 1] * (means[i, 1] - cam_pos[1])
              + cam_rot[1, 2] * (means[i, 2] - cam_pos[2]))
        tz = (cam_rot[2, 0] * (means[i, 0] - cam_pos[0])
              + cam_rot[2, 1] * (means[i, 1] - cam_pos[1])
              + cam_rot[2, 2] * (means[i, 2] - cam_pos[2]))
        depth[i] = tz
        valid[i] = 0
        if tz <= near:
            mean2d[i, 0] = 0.0
            mean2d[i, 1] = 0.0
            cov2d[i, 0] = dilation
            cov2d[i, 1] = 0.0
            cov2d[i, 2] = dilation
            conic[i, 0] = 0.0
            conic[i, 1] = 0.0
            conic[i, 2] = 0.0
            radius[i] = 0.0
            continue

        txz = tx / tz
        tyz = ty / tz
        ctxz = min(max(txz, -lim_x), lim_x)
        ctyz = min(max(tyz, -lim_y), lim_y)

        # rows of J @ W (J = perspective Jacobian at the mean, W = cam_rot)
        fz = focal / tz
        m00 = fz * cam_rot[0, 0] - fz * ctxz * cam_rot[2, 0]
        m01 = fz * cam_rot[0, 1] - fz * ctxz * cam_rot[2, 1]
        m02 = fz * cam_rot[0, 2] - fz * ctxz * cam_rot[2, 2]
        m10 = fz * cam_rot[1, 0] - fz * ctyz * cam_rot[2, 0]
        m11 = fz * cam_rot[1, 1] - fz * ctyz * cam_rot[2, 1]
        m12 = fz * cam_rot[1, 2] - fz * ctyz * cam_rot[2, 2]

        qn = np.sqrt(quats[i, 0] ** 2 + quats[i, 1] ** 2
                     + quats[i, 2] ** 2 + quats[i, 3] ** 2)
        w = quats[i, 0] / qn
        x = quats[i, 1] / qn
        y = quats[i, 2] / qn
        z = quats[i, 3] / qn
        r00 = 1.0 - 2.0 * (y * y + z * z)
        r01 = 2.0 * (x * y - w * z)
        r02 = 2.0 * (x * z + w * y)
        r10 = 2.0 * (x * y + w * z)
        r11 = 1.0 - 2.0 * (x * x + z * z)
        r12 = 2.0 * (y * z - w * x)
        r20 = 2.0 * (x * z - w * y)
        r21 = 2.0 * (y * z + w * x)
        r22 = 1.0 - 2.0 * (x * x + y * y)

        s0 = np.exp(2.0 * log_scales[i, 0])
        s1 = np.exp(2.0 * log_scales[i, 1])
        s2 = np.exp(2.0 * log_scales[i, 2])

        # sigma = R diag(s) R^T
        g00 = r00 * r00 * s0 + r01 * r01 * s1 + r02 * r02 * s2
        g01 = r00 * r10 * s0 + r01 * r11 * s1 + r02 * r12 * s2
        g02 = r00 * r20 * s0 + r01 * r21 * s1 + r02 * r22 * s2
        g11 = r10 * r10 * s0 + r11 * r11 * s1 + r12 * r12 * s2
        g12 = r10 * r20 * s0 + r11 * r21 * s1 + r12 * r22 * s2
        g22 = r20 * r20 * s0 + r21 * r21 * s1 + r22 * r22 * s2

        # cov2d = M sigma M^T
        u0 = m00 * g00 + m01 * g01 + m02 * g02
        u1 = m00 * g01 + m01 * g11 + m02 * g12
        u2 = m00 * g02 + m01 * g12 + m02 * g22
        v0 = m10 * g00 + m11 * g01 + m12 * g02
        v1 = m10 * g01 + m11 * g11 + m12 * g12
        v2 = m10 * g02 + m11 * g12 + m12 * g22
        a = u0 * m00 + u1 * m01 + u2 * m02 + dilation
        b = u0 * m10 + u1 * m11 + u2 * m12
        c = v0 * m10 + v1 * m11 + v2 * m12 + dilation

        mean2d[i, 0] = focal * txz + (width - 1) / 2.0
        mean2d[i, 1] = focal * tyz + (height - 1) / 2.0
        cov2d[i, 0] = a
        cov2d[i, 1] = b
        cov2d[i, 2] = c

        det = a * c - b * b
        if det <= det_eps:
            conic[i, 0] = 0.0
            conic[i, 1] = 0.0
            conic[i, 2] = 0.0
            radius[i] = 0.0
            n_skipped += 1
            continue
        conic[i, 0] = c / det
        conic[i, 1] = -b / det
        conic[i, 2] = a / det
        mid = 0.5 * (a + c)
        lam = mid + np.sqrt(max(mid * mid - det, 0.0))
        r3 = np.ceil(3.0 * np.sqrt(lam))
        radius[i] = r3
        if r3 > 0.0:
            valid[i] = 1
    skipped[0] = n_skipped


@njit(cache=True)
def bin_tiles(order_idx, tx0, tx1, ty0, ty1, n_tiles_x, n_tiles):
    """Counting-sort splats into per-tile entry segments.

    ``order_idx`` must already be sorted by (depth, splat index); scattering in
    that order leaves every tile segment depth-sorted. Returns the flat entry
    array and the (n_tiles + 1) segment offsets.
    """
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    m = order_idx.shape[0]
    for k in range(m):
        i = order_idx[k]
        for tyy in range(ty0[i], ty1[i]):
            base = tyy * n_tiles_x
            for txx in range(tx0[i], tx1[i]):
                counts[base + txx + 1] += 1
    for t in range(n_tiles):
        counts[t + 1] += counts[t]
    entry_idx = np.empty(counts[n_tiles], dtype=np.int64)
    cursors = counts[:n_tiles].copy()
    for k in range(m):
        i = order_idx[k]
        for tyy in range(ty0[i], ty1[i]):
            base = tyy * n_tiles_x
            for txx in range(tx0[i], tx1[i]):
                t = base + txx
                entry_idx[cursors[t]] = i
                cursors[t] += 1
    return entry_idx, counts


@njit(cache=True, parallel=True, fastmath=False)
def composite_tiles(
    active_tiles,   # (n_active,) i8 tile ids with at least one entry
    tile_start,     # (n_active,) i8 start into sorted entry arrays
    tile_end,       # (n_active,) i8 end
    entry_idx,      # (n_entries,) i8 splat index per sorted entry
    mean2d,         # (n, 2) f8
    conic,          # (n, 3) f8 inverse 2D covariance (a, b, c)
    opacity,        # (n,) f8 base opacity (sigmoid already applied)
    log_opacity,    # (n,) f8
    color,          # (n, 3) f8
    radius,         # (n,) f8 pixel-space 3-sigma radius
    height, width, tile_size, n_tiles_x,
    stop_t,         # early-out transmittance threshold
    min_alpha,      # splats below this alpha at a pixel are skipped
    log_min_alpha,
    record,         # bool: fill entry_contrib / contrib_sum
    image,          # (H, W, 3) f8, accumulates premultiplied color
    trans,          # (H, W) f8, final transmittance
    contrib_sum,    # (H, W) f8, per-pixel sum of recorded contributions
    entry_contrib,  # (n_entries,) f8, per-entry max contribution over pixels
):
    for ti in prange(active_tiles.shape[0]):
        tile = active_tiles[ti]
        ty = tile // n_tiles_x
        tx = tile - ty * n_tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        th = min(tile_size, height - y0)
        tw = min(tile_size, width - x0)

        t_loc = np.ones((th, tw), dtype=np.float64)
        # live pixels as a swap-remove list; per-pixel state is independent and
        # the per-entry max is order-free, so iteration order does not matter
        live_x = np.empty(th * tw, dtype=np.int64)
        live_y = np.empty(th * tw, dtype=np.int64)
        k = 0
        for ly in range(th):
            for lx in range(tw):
                live_y[k] = ly
                live_x[k] = lx
                k += 1
        n_live = th * tw

        for e in range(tile_start[ti], tile_end[ti]):
            if n_live == 0:
                break
            g = entry_idx[e]
            op = opacity[g]
            if op < min_alpha:
                continue
            # alpha >= min_alpha requires power >= p_min; avoids exp on fringes
            p_min = log_min_alpha - log_opacity[g]
            mx = mean2d[g, 0]
            my = mean2d[g, 1]
            r = radius[g]
            lya = max(0, int(np.floor(my - r)) - y0)
            lyb = min(th - 1, int(np.floor(my + r)) + 1 - y0)
            lxa = max(0, int(np.floor(mx - r)) - x0)
            lxb = min(tw - 1, int(np.floor(mx + r)) + 1 - x0)
            half_a = 0.5 * conic[g, 0]
            b = conic[g, 1]
            half_c = 0.5 * conic[g, 2]
            cr = color[g, 0]
            cg = color[g, 1]
            cb = color[g, 2]
            cmax = 0.0
            j = 0
            while j < n_live:
                ly = live_y[j]
                lx = live_x[j]
                if ly < lya or ly > lyb or lx < lxa or lx > lxb:
                    j += 1
                    continue
                dx = x0 + lx - mx
                dy = y0 + ly - my
                power = -(half_a * dx * dx + half_c * dy * dy) - b * dx * dy
                if power > 0.0 or power < p_min:
                    j += 1
                    continue
                alpha = op * np.exp(power)
                if alpha > 0.99:
                    alpha = 0.99
                t_cur = t_loc[ly, lx]
                contrib = alpha * t_cur
                py = y0 + ly
                px = x0 + lx
                image[py, px, 0] += contrib * cr
                image[py, px, 1] += contrib * cg
                image[py, px, 2] += contrib * cb
                if record:
                    contrib_sum[py, px] += contrib
                    if contrib > cmax:
                        cmax = contrib
                t_new = t_cur * (1.0 - alpha)
                t_loc[ly, lx] = t_new
                if t_new < stop_t:
                    n_live -= 1
                    live_y[j] = live_y[n_live]
                    live_x[j] = live_x[n_live]
                else:
                    j += 1
            if record:
                entry_contrib[e] = cmax

        for ly in range(th):
            for lx in range(tw):
                trans[y0 + ly, x0 + lx] = t_loc[ly, lx]
