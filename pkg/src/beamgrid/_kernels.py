"""Hot numeric kernels: grid visibility marching and multipath tracing.

The kernels are plain loop code so the identical functions run either
JIT-compiled through numba (default) or as ordinary Python when the
environment variable BEAMGRID_BACKEND=numpy is set or numba is missing.
BEAMGRID_THREADS caps the numba worker count for the parallel kernels;
results are bit-identical for any thread count because every pixel writes
only its own output slice.
"""

import math
import os

import numpy as np

BACKEND = os.environ.get("BEAMGRID_BACKEND", "numba").strip().lower()
USE_NUMBA = BACKEND != "numpy"

if USE_NUMBA:
    try:
        import numba
        from numba import njit, prange
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False

if USE_NUMBA:
    _threads = os.environ.get("BEAMGRID_THREADS")
    if _threads:
        try:
            n = max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS))
            numba.set_num_threads(n)
        except ValueError:
            pass
else:
    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(func):
            return func

        return wrap

    prange = range

TWO_PI = 2.0 * math.pi


@njit(cache=True)
def march(building, vegetation, x0, y0, z0, x1, y1, z1, res):
    """Walk the 2D cell grid under the 3D segment (x0,y0,z0)->(x1,y1,z1).

    Returns (clear, vegetated_length_m). A cell blocks when its building
    height rises above the segment anywhere inside the cell; the two
    endpoint cells never block (antennas sit on or next to structures).
    Vegetated length integrates the 3D length spent below the canopy height
    and counts every cell, endpoints included; it is only meaningful when
    the segment is clear. Endpoints are put in canonical order first, so
    the result is exactly symmetric under swapping them.
    """
    if (x0 > x1) or (x0 == x1 and (y0 > y1 or (y0 == y1 and z0 > z1))):
        tx_, ty_, tz_ = x0, y0, z0
        x0, y0, z0 = x1, y1, z1
        x1, y1, z1 = tx_, ty_, tz_
    rows, cols = building.shape
    dx = x1 - x0
    dy = y1 - y0
    dz = z1 - z0
    seg_len = math.sqrt(dx * dx + dy * dy + dz * dz)
    c0 = int(math.floor(x0 / res))
    r0 = int(math.floor(y0 / res))
    c1 = int(math.floor(x1 / res))
    r1 = int(math.floor(y1 / res))
    c = c0
    r = r0
    if dx > 0.0:
        step_c = 1
        t_mx = ((c0 + 1) * res - x0) / dx
        t_dx = res / dx
    elif dx < 0.0:
        step_c = -1
        t_mx = (c0 * res - x0) / dx
        t_dx = -res / dx
    else:
        step_c = 0
        t_mx = math.inf
        t_dx = math.inf
    if dy > 0.0:
        step_r = 1
        t_my = ((r0 + 1) * res - y0) / dy
        t_dy = res / dy
    elif dy < 0.0:
        step_r = -1
        t_my = (r0 * res - y0) / dy
        t_dy = -res / dy
    else:
        step_r = 0
        t_my = math.inf
        t_dy = math.inf

    veg_len = 0.0
    t_prev = 0.0
    while True:
        t_next = t_mx if t_mx < t_my else t_my
        if t_next > 1.0:
            t_next = 1.0
        if t_next > t_prev and 0 <= r < rows and 0 <= c < cols:
            za = z0 + dz * t_prev
            zb = z0 + dz * t_next
            zmin = za if za < zb else zb
            endpoint = (r == r0 and c == c0) or (r == r1 and c == c1)
            if (not endpoint) and building[r, c] > zmin:
                return False, veg_len
            v = vegetation[r, c]
            if v > 0.0:
                if dz == 0.0:
                    if z0 < v:
                        veg_len += (t_next - t_prev) * seg_len
                else:
                    tc = (v - z0) / dz
                    if dz > 0.0:
                        lo = t_prev
                        hi = tc if tc < t_next else t_next
                    else:
                        lo = tc if tc > t_prev else t_prev
                        hi = t_next
                    if hi > lo:
                        veg_len += (hi - lo) * seg_len
        if t_next >= 1.0:
            break
        adv_x = t_mx <= t_my
        adv_y = t_my <= t_mx
        t_prev = t_next
        if adv_x:
            c += step_c
            t_mx += t_dx
        if adv_y:
            r += step_r
            t_my += t_dy
    return True, veg_len


@njit(cache=True)
def mirror_hit(wall, tx_x, tx_y, tx_z, rx_x, rx_y, rx_z):
    """Specular reflection point on a vertical wall rectangle via mirroring.

    wall = (axis, plane, lo, hi, height, normal); axis 0 means the wall lies
    in a plane of constant x, axis 1 constant y. Returns
    (ok, hx, hy, hz, path_len) where path_len is the unfolded
    source-image-to-receiver distance. ok is False when either endpoint is
    not strictly on the wall's outward side or the specular point leaves
    the wall rectangle.
    """
    plane = wall[1]
    lo = wall[2]
    hi = wall[3]
    height = wall[4]
    nrm = wall[5]
    if wall[0] == 0.0:
        if (tx_x - plane) * nrm <= 0.0 or (rx_x - plane) * nrm <= 0.0:
            return False, 0.0, 0.0, 0.0, 0.0
        ix = 2.0 * plane - tx_x
        iy = tx_y
        iz = tx_z
        t = (plane - ix) / (rx_x - ix)
        hx = plane
        hy = iy + t * (rx_y - iy)
        hz = iz + t * (rx_z - iz)
        if hy < lo or hy > hi or hz < 0.0 or hz > height:
            return False, 0.0, 0.0, 0.0, 0.0
    else:
        if (tx_y - plane) * nrm <= 0.0 or (rx_y - plane) * nrm <= 0.0:
            return False, 0.0, 0.0, 0.0, 0.0
        ix = tx_x
        iy = 2.0 * plane - tx_y
        iz = tx_z
        t = (plane - iy) / (rx_y - iy)
        hx = ix + t * (rx_x - ix)
        hy = plane
        hz = iz + t * (rx_z - iz)
        if hx < lo or hx > hi or hz < 0.0 or hz > height:
            return False, 0.0, 0.0, 0.0, 0.0
    ddx = rx_x - ix
    ddy = rx_y - iy
    ddz = rx_z - iz
    return True, hx, hy, hz, math.sqrt(ddx * ddx + ddy * ddy + ddz * ddz)


@njit(cache=True)
def _bearing(dx, dy_row):
    """Azimuth with east = 0, counter-clockwise; grid rows grow southward."""
    a = math.atan2(-dy_row, dx)
    if a < 0.0:
        a += TWO_PI
    return a


@njit(cache=True, parallel=True)
def trace_count(building, vegetation, walls, tx_x, tx_y, tx_z, rx_z, res, max_refl):
    """Number of valid paths per pixel (direct + first-order reflections)."""
    rows, cols = building.shape
    counts = np.zeros(rows * cols, dtype=np.int64)
    eps = 1e-6 * res
    for idx in prange(rows * cols):
        r = idx // cols
        c = idx % cols
        if building[r, c] > 0.0:
            continue
        rx_x = (c + 0.5) * res
        rx_y = (r + 0.5) * res
        n = 0
        d2 = (rx_x - tx_x) ** 2 + (rx_y - tx_y) ** 2 + (rx_z - tx_z) ** 2
        if d2 > 0.0:
            clear, _ = march(building, vegetation, tx_x, tx_y, tx_z, rx_x, rx_y, rx_z, res)
            if clear:
                n += 1
        if max_refl > 0:
            for w in range(walls.shape[0]):
                ok, hx, hy, hz, _ = mirror_hit(walls[w], tx_x, tx_y, tx_z, rx_x, rx_y, rx_z)
                if not ok:
                    continue
                if walls[w, 0] == 0.0:
                    hx += eps * walls[w, 5]
                else:
                    hy += eps * walls[w, 5]
                ok1, _ = march(building, vegetation, tx_x, tx_y, tx_z, hx, hy, hz, res)
                if not ok1:
                    continue
                ok2, _ = march(building, vegetation, hx, hy, hz, rx_x, rx_y, rx_z, res)
                if ok2:
                    n += 1
        counts[idx] = n
    return counts


@njit(cache=True, parallel=True)
def trace_fill(building, vegetation, walls, offsets,
               tx_x, tx_y, tx_z, rx_z, res, lam, refl_amp, veg_db_per_m, max_refl,
               amp_out, psi_out, aod_az_out, aod_el_out, aoa_az_out,
               direct_flag, direct_veg_db):
    """Fill per-path arrays; pixel layout given by the prefix-sum offsets.

    The direct path, when present, occupies the first slot of its pixel.
    Amplitudes follow the free-space law lam/(4*pi*d); the direct path is
    further attenuated by the vegetated length, reflections by the fixed
    per-bounce loss. The phase is the carrier phase of the path length.
    """
    rows, cols = building.shape
    eps = 1e-6 * res
    four_pi = 4.0 * math.pi
    for idx in prange(rows * cols):
        r = idx // cols
        c = idx % cols
        if building[r, c] > 0.0:
            continue
        rx_x = (c + 0.5) * res
        rx_y = (r + 0.5) * res
        k = offsets[idx]
        d2 = (rx_x - tx_x) ** 2 + (rx_y - tx_y) ** 2 + (rx_z - tx_z) ** 2
        if d2 > 0.0:
            clear, veg_len = march(building, vegetation, tx_x, tx_y, tx_z,
                                   rx_x, rx_y, rx_z, res)
            if clear:
                d = math.sqrt(d2)
                att_db = veg_db_per_m * veg_len
                amp_out[k] = lam / (four_pi * d) * 10.0 ** (-att_db / 20.0)
                psi_out[k] = (-TWO_PI * d / lam) % TWO_PI
                dxh = rx_x - tx_x
                dyh = rx_y - tx_y
                aod_az_out[k] = _bearing(dxh, dyh)
                aod_el_out[k] = math.atan2(rx_z - tx_z, math.hypot(dxh, dyh))
                aoa_az_out[k] = _bearing(-dxh, -dyh)
                direct_flag[idx] = 1
                direct_veg_db[idx] = att_db
                k += 1
        if max_refl > 0:
            for w in range(walls.shape[0]):
                ok, hx, hy, hz, plen = mirror_hit(walls[w], tx_x, tx_y, tx_z,
                                                  rx_x, rx_y, rx_z)
                if not ok:
                    continue
                if walls[w, 0] == 0.0:
                    hx += eps * walls[w, 5]
                else:
                    hy += eps * walls[w, 5]
                ok1, _ = march(building, vegetation, tx_x, tx_y, tx_z, hx, hy, hz, res)
                if not ok1:
                    continue
                ok2, _ = march(building, vegetation, hx, hy, hz, rx_x, rx_y, rx_z, res)
                if not ok2:
                    continue
                amp_out[k] = lam / (four_pi * plen) * refl_amp
                psi_out[k] = (-TWO_PI * plen / lam) % TWO_PI
                dxh = hx - tx_x
                dyh = hy - tx_y
                aod_az_out[k] = _bearing(dxh, dyh)
                aod_el_out[k] = math.atan2(hz - tx_z, math.hypot(dxh, dyh))
                aoa_az_out[k] = _bearing(hx - rx_x, hy - rx_y)
                k += 1


@njit(cache=True)
def accumulate_tensors(pixel_ids, sectors, c2, g_az, g_el, out):
    """Sum per-path rank-1 contributions into per-pixel beam tensors.

    out has shape (n_pixels, Na, Ne, Nr); paths are grouped arbitrarily but
    the summation order is the array order, so results are deterministic.
    """
    na = g_az.shape[1]
    ne = g_el.shape[1]
    for p in range(pixel_ids.size):
        pix = pixel_ids[p]
        s = sectors[p]
        w = c2[p]
        for ia in range(na):
            ga = w * g_az[p, ia]
            for ie in range(ne):
                out[pix, ia, ie, s] += ga * g_el[p, ie]
