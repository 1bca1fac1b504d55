"""Independent reference implementations the tests check against.

Everything here is deliberately naive (per-voxel loops, scipy dense
filtering) and shares no code with the library paths it validates.
"""

import numpy as np
from scipy.ndimage import correlate as ndi_correlate


def fd_gradient(f, x, h=1e-3):
    """Central finite-difference gradient of scalar f wrt array x (in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def resize1d_oracle(src, n_out):
    """Half-pixel linear interpolation along a 1D array, per output sample."""
    n_in = len(src)
    out = np.zeros(n_out, dtype=np.float64)
    for o in range(n_out):
        pos = (o + 0.5) * n_in / n_out - 0.5
        pos = min(max(pos, 0.0), n_in - 1.0)
        i0 = min(int(np.floor(pos)), n_in - 2) if n_in > 1 else 0
        t = pos - i0
        out[o] = src[i0] * (1 - t) + src[min(i0 + 1, n_in - 1)] * t
    return out


def trilinear_resize_oracle(a, target):
    """Separable application of resize1d_oracle along each axis."""
    out = a.astype(np.float64)
    for axis in range(3):
        moved = np.moveaxis(out, axis, -1)
        shape = moved.shape[:-1] + (target[axis],)
        res = np.zeros(shape, dtype=np.float64)
        for idx in np.ndindex(moved.shape[:-1]):
            res[idx] = resize1d_oracle(moved[idx], target[axis])
        out = np.moveaxis(res, -1, axis)
    return out


def warp_oracle(vol, disp):
    """Per-voxel trilinear backward warp with clamp-to-edge sampling."""
    D, H, W = vol.shape
    out = np.zeros_like(vol, dtype=np.float64)
    for d in range(D):
        for h in range(H):
            for w in range(W):
                p = np.array([d, h, w], dtype=np.float64) + disp[:, d, h, w]
                p = np.clip(p, 0, [D - 1, H - 1, W - 1])
                i0 = np.minimum(np.floor(p).astype(int), [D - 2, H - 2, W - 2])
                i0 = np.maximum(i0, 0)
                t = p - i0
                acc = 0.0
                for a in (0, 1):
                    for b in (0, 1):
                        for c in (0, 1):
                            wgt = ((t[0] if a else 1 - t[0])
                                   * (t[1] if b else 1 - t[1])
                                   * (t[2] if c else 1 - t[2]))
                            acc += wgt * vol[min(i0[0] + a, D - 1),
                                             min(i0[1] + b, H - 1),
                                             min(i0[2] + c, W - 1)]
                out[d, h, w] = acc
    return out


def diffusion_oracle(u):
    """Pooled mean of squared forward differences by explicit enumeration."""
    total = 0.0
    count = 0
    for comp in range(3):
        for axis in range(3):
            d = np.diff(u[comp], axis=axis)
            total += float((d.astype(np.float64) ** 2).sum())
            count += d.size
    return total / count


def lncc_oracle(a, b, window, eps=1e-5):
    """LNCC via dense 3D Gaussian correlation (scipy), zero-padded."""
    r = (window - 1) // 2
    sigma = window / 4.0
    t = np.arange(-r, r + 1, dtype=np.float64)
    k1 = np.exp(-(t * t) / (2 * sigma * sigma))
    k1 /= k1.sum()
    k3 = k1[:, None, None] * k1[None, :, None] * k1[None, None, :]

    def g(x):
        return ndi_correlate(x.astype(np.float64), k3, mode="constant")

    mu_a, mu_b = g(a), g(b)
    var_a = g(a * a) - mu_a ** 2
    var_b = g(b * b) - mu_b ** 2
    cov = g(a * b) - mu_a * mu_b
    m = cov / np.sqrt((var_a + eps) * (var_b + eps))
    return float(m.mean()), m


def conv3d_oracle(x, k, stride=1, padding=0):
    """Direct looped cross-correlation over a rank-5 input."""
    N, Ci, D, H, W = x.shape
    Co = k.shape[0]
    kk = k.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3).astype(np.float64)
    Do = (D + 2 * padding - kk) // stride + 1
    Ho = (H + 2 * padding - kk) // stride + 1
    Wo = (W + 2 * padding - kk) // stride + 1
    out = np.zeros((N, Co, Do, Ho, Wo), dtype=np.float64)
    for n in range(N):
        for co in range(Co):
            for d in range(Do):
                for h in range(Ho):
                    for w in range(Wo):
                        patch = xp[n, :, d * stride:d * stride + kk,
                                   h * stride:h * stride + kk,
                                   w * stride:w * stride + kk]
                        out[n, co, d, h, w] = float((patch * k[co]).sum())
    return out


def endpoint_error(field_data, truth_data):
    d = field_data.astype(np.float64) - truth_data.astype(np.float64)
    return float(np.sqrt((d ** 2).sum(axis=0)).mean())
