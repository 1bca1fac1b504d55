"""Displacement-field algebra.

A field u assigns every voxel a 3-vector offset in voxel units of its own
grid; the transform is phi(x) = x + u(x) and warping is backward:
output(x) = input(x + u(x)) with trilinear interpolation and clamp-to-edge
sampling. Composition follows that convention: applying residual r after
prev p gives u_out(x) = u_r(x) + u_p(x + u_r(x)), so warping once by the
composed field matches re-warping the previous result.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor

_GRIDS = {}


def _grid(dims, dtype):
    key = (dims, np.dtype(dtype).str)
    g = _GRIDS.get(key)
    if g is None:
        g = np.indices(dims).astype(dtype)
        _GRIDS[key] = g
    return g


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement (3, D, H, W); the zero field is the identity."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 4 or a.shape[0] != 3:
            raise ValueError(f"field must be (3, D, H, W), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("field contains non-finite values")
        object.__setattr__(self, "data", np.ascontiguousarray(a))

    @property
    def dims(self):
        return self.data.shape[1:]

    @classmethod
    def zero(cls, dims):
        return cls(np.zeros((3,) + tuple(dims), dtype=np.float32))


# ---------------------------------------------------------------------------
# trilinear sampling core (shared by the plain and differentiable paths)


def _sample_prep(dims, disp):
    """Clamped sample positions -> integer base, fractional weights, masks."""
    dt = disp.dtype
    pos = _grid(dims, dt) + disp
    i0, t, inb = [], [], []
    for a, s in enumerate(dims):
        p = pos[a]
        inb.append((p >= 0) & (p <= s - 1))
        p = np.clip(p, 0.0, s - 1.0)
        base = np.clip(np.floor(p).astype(np.int64), 0, max(s - 2, 0))
        i0.append(base)
        t.append((p - base).astype(dt))
    return i0, t, inb


def _corner_flats(i0, dims):
    D, H, W = dims
    f0 = (i0[0] * H + i0[1]) * W + i0[2]
    off_d = H * W if D > 1 else 0
    off_h = W if H > 1 else 0
    off_w = 1 if W > 1 else 0
    return f0, (off_d, off_h, off_w)


def _trilinear_gather(vol_flat, f0, offs, t):
    """vol_flat: (C, D*H*W); returns (C, D, H, W) interpolated values."""
    td, th, tw = t
    od, oh, ow = offs
    sd, sh, sw = 1.0 - td, 1.0 - th, 1.0 - tw
    out = None
    for a, wd in ((0, sd), (1, td)):
        for b, wh in ((0, sh), (1, th)):
            for c, ww in ((0, sw), (1, tw)):
                idx = f0 + a * od + b * oh + c * ow
                w = wd * wh * ww
                v = vol_flat[:, idx.ravel()].reshape((vol_flat.shape[0],) + idx.shape)
                out = v * w if out is None else out + v * w
    return out


def _warp_array(vol, disp):
    """vol: (C, D, H, W); disp: (3, D, H, W) on the same grid."""
    dims = vol.shape[1:]
    i0, t, _ = _sample_prep(dims, disp)
    f0, offs = _corner_flats(i0, dims)
    return _trilinear_gather(vol.reshape(vol.shape[0], -1), f0, offs, t)


def warp_tensor(v, u):
    """Differentiable warp: v (N, C, D, H, W) sampled at x + u, u (N, 3, D, H, W)."""
    if not isinstance(v, DiffTensor):
        v = DiffTensor(v)
    if not isinstance(u, DiffTensor):
        u = DiffTensor(u)
    if v.shape[0] != 1 or u.shape[0] != 1 or u.shape[1] != 3:
        raise ValueError("warp_tensor expects batch 1 and a 3-channel field")
    dims = v.shape[2:]
    if u.shape[2:] != dims:
        raise ValueError(f"warp: dims mismatch {v.shape[2:]} vs {u.shape[2:]}")
    C = v.shape[1]
    i0, t, inb = _sample_prep(dims, u.data[0])
    f0, offs = _corner_flats(i0, dims)
    vol_flat = v.data[0].reshape(C, -1)
    out = _trilinear_gather(vol_flat, f0, offs, t)[None]

    def bwd(g):
        g0 = g[0]  # (C, D, H, W)
        td, th, tw = t
        sd, sh, sw = 1.0 - td, 1.0 - th, 1.0 - tw
        corners = {}
        for a in (0, 1):
            for b in (0, 1):
                for c in (0, 1):
                    idx = (f0 + a * offs[0] + b * offs[1] + c * offs[2]).ravel()
                    corners[(a, b, c)] = vol_flat[:, idx].reshape((C,) + dims)
        if u.requires_grad:
            wd = (sd, td)
            wh = (sh, th)
            ww = (sw, tw)
            dd = np.zeros(dims, dtype=g0.dtype)
            dh = np.zeros_like(dd)
            dw = np.zeros_like(dd)
            for b in (0, 1):
                for c in (0, 1):
                    diff = ((corners[(1, b, c)] - corners[(0, b, c)]) * g0).sum(axis=0)
                    dd += wh[b] * ww[c] * diff
            for a in (0, 1):
                for c in (0, 1):
                    diff = ((corners[(a, 1, c)] - corners[(a, 0, c)]) * g0).sum(axis=0)
                    dh += wd[a] * ww[c] * diff
            for a in (0, 1):
                for b in (0, 1):
                    diff = ((corners[(a, b, 1)] - corners[(a, b, 0)]) * g0).sum(axis=0)
                    dw += wd[a] * wh[b] * diff
            gu = np.stack([dd * inb[0], dh * inb[1], dw * inb[2]])[None]
            u.accumulate_grad(gu.astype(u.dtype, copy=False))
        if v.requires_grad:
            n = vol_flat.shape[1]
            gv = np.zeros((C, n), dtype=v.dtype)
            td_, th_, tw_ = t
            for a, wda in ((0, sd), (1, td_)):
                for b, wha in ((0, sh), (1, th_)):
                    for c, wwa in ((0, sw), (1, tw_)):
                        idx = (f0 + a * offs[0] + b * offs[1] + c * offs[2]).ravel()
                        w = (wda * wha * wwa).ravel()
                        for ch in range(C):
                            gv[ch] += np.bincount(idx, weights=w * g0[ch].ravel(), minlength=n)
            v.accumulate_grad(gv.reshape((1, C) + dims).astype(v.dtype, copy=False))

    return ad._result(out, (v, u), bwd, "warp")


def warp(v, u):
    """Backward-warp a volume (or field treated as channels) by field u.

    Accepts Volume3D / DisplacementField / ndarray / DiffTensor inputs and
    returns the same kind as v. Zero field returns v values bit-exactly.
    """
    if isinstance(v, DiffTensor) or isinstance(u, DiffTensor):
        vt = v if isinstance(v, DiffTensor) else DiffTensor(_tensorize_vol(v))
        ut = u if isinstance(u, DiffTensor) else DiffTensor(_tensorize_field(u))
        return warp_tensor(vt, ut)
    ua = u.data if isinstance(u, DisplacementField) else np.asarray(u)
    if hasattr(v, "spacing"):  # Volume3D-like
        if v.data.shape != ua.shape[1:]:
            raise ValueError(f"warp: dims mismatch {v.data.shape} vs {ua.shape[1:]}")
        out = _warp_array(v.data[None], ua)[0]
        return dataclasses.replace(v, data=out)
    va = np.asarray(v)
    vol = va[None] if va.ndim == 3 else va
    if vol.shape[1:] != ua.shape[1:]:
        raise ValueError(f"warp: dims mismatch {vol.shape[1:]} vs {ua.shape[1:]}")
    out = _warp_array(vol, ua)
    return out[0] if va.ndim == 3 else out


def _tensorize_vol(v):
    a = v.data if hasattr(v, "spacing") else np.asarray(v)
    return a[None, None] if a.ndim == 3 else a


def _tensorize_field(u):
    a = u.data if isinstance(u, DisplacementField) else np.asarray(u)
    return a[None] if a.ndim == 4 else a


# ---------------------------------------------------------------------------
# composition and resampling


def compose(prev, resid):
    """Chain two same-grid fields: u_out(x) = u_r(x) + u_p(x + u_r(x)).

    warp(v, compose(prev, resid)) approximates warp(warp(v, prev), resid)
    and both sides agree exactly for constant fields.
    """
    if isinstance(prev, DiffTensor) or isinstance(resid, DiffTensor):
        pt = prev if isinstance(prev, DiffTensor) else DiffTensor(_tensorize_field(prev))
        rt = resid if isinstance(resid, DiffTensor) else DiffTensor(_tensorize_field(resid))
        if pt.shape != rt.shape:
            raise ValueError(f"compose: dims mismatch {pt.shape} vs {rt.shape}")
        return ad.add(rt, warp_tensor(pt, rt))
    pa = prev.data if isinstance(prev, DisplacementField) else np.asarray(prev)
    ra = resid.data if isinstance(resid, DisplacementField) else np.asarray(resid)
    if pa.shape != ra.shape:
        raise ValueError(f"compose: dims mismatch {pa.shape} vs {ra.shape}")
    out = ra + _warp_array(pa, ra)
    if isinstance(prev, DisplacementField) or isinstance(resid, DisplacementField):
        return DisplacementField(out)
    return out


def upsample_field(u, factor=None, target=None):
    """Trilinear resize of each component plus per-axis unit conversion.

    Coarse-grid voxel units become fine-grid voxel units: component c is
    multiplied by target_c / source_c.
    """
    if isinstance(u, DiffTensor):
        dims = u.shape[2:]
        if target is None:
            target = ad.resize_target_dims(dims, float(factor))
        target = tuple(int(x) for x in target)
        resized = ad.trilinear_resize(u, target=target)
        ratios = tuple(t / s for t, s in zip(target, dims))
        return ad.scale_channels(resized, ratios)
    ua = u.data if isinstance(u, DisplacementField) else np.asarray(u)
    dims = ua.shape[1:]
    if target is None:
        target = ad.resize_target_dims(dims, float(factor))
    target = tuple(int(x) for x in target)
    out = ad.resize_array(ua, target)
    for c in range(3):
        out[c] *= np.float32(target[c] / dims[c])
    if isinstance(u, DisplacementField):
        return DisplacementField(out)
    return out


def scale_field(u, s):
    """Multiply every component by the scalar s."""
    if isinstance(u, DiffTensor):
        return ad.scale(u, s)
    ua = u.data if isinstance(u, DisplacementField) else np.asarray(u)
    out = ua * np.float32(s)
    return DisplacementField(out) if isinstance(u, DisplacementField) else out


# ---------------------------------------------------------------------------
# Jacobian analysis


def jacobian_det(u):
    """Per-voxel det(I + grad u), central differences inside, one-sided at edges."""
    ua = u.data if isinstance(u, DisplacementField) else np.asarray(u)
    if min(ua.shape[1:]) < 2:
        raise ValueError("jacobian_det needs at least 2 voxels per axis")
    J = [[None] * 3 for _ in range(3)]
    for comp in range(3):
        grads = np.gradient(ua[comp].astype(np.float64), axis=(0, 1, 2))
        for axis in range(3):
            J[comp][axis] = grads[axis] + (1.0 if comp == axis else 0.0)
    det = (
        J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1])
        - J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0])
        + J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0])
    )
    from .volume_io import Volume3D

    return Volume3D(dims=det.shape, spacing=(1.0, 1.0, 1.0), data=det.astype(np.float32))


def ndv(u):
    """Percentage of voxels whose Jacobian determinant is <= 0."""
    det = jacobian_det(u).data
    return 100.0 * float(np.count_nonzero(det <= 0.0)) / det.size


# ---------------------------------------------------------------------------
# point/label sampling helpers used by metrics and the synthetic generator


def sample_field_at_points(u, pts_vox):
    """Trilinearly sample the field at (N, 3) voxel coordinates."""
    ua = u.data if isinstance(u, DisplacementField) else np.asarray(u)
    dims = ua.shape[1:]
    pts = np.asarray(pts_vox, dtype=np.float64)
    out = np.zeros_like(pts)
    idx0, frac = [], []
    for a, s in enumerate(dims):
        p = np.clip(pts[:, a], 0.0, s - 1.0)
        base = np.clip(np.floor(p).astype(np.int64), 0, max(s - 2, 0))
        idx0.append(base)
        frac.append(p - base)
    for a_ in (0, 1):
        for b_ in (0, 1):
            for c_ in (0, 1):
                w = (
                    (frac[0] if a_ else 1 - frac[0])
                    * (frac[1] if b_ else 1 - frac[1])
                    * (frac[2] if c_ else 1 - frac[2])
                )
                vals = ua[:, np.minimum(idx0[0] + a_, dims[0] - 1),
                          np.minimum(idx0[1] + b_, dims[1] - 1),
                          np.minimum(idx0[2] + c_, dims[2] - 1)]
                out += w[:, None] * vals.T
    return out


def warp_labels_array(labels, u):
    """Nearest-neighbor label warp: out(x) = labels(round(x + u(x))), clamped."""
    ua = u.data if isinstance(u, DisplacementField) else np.asarray(u)
    dims = labels.shape
    if tuple(ua.shape[1:]) != tuple(dims):
        raise ValueError(f"warp_labels: dims mismatch {dims} vs {ua.shape[1:]}")
    pos = _grid(dims, np.float32) + ua
    idx = [np.clip(np.rint(pos[a]).astype(np.int64), 0, dims[a] - 1) for a in range(3)]
    return labels[idx[0], idx[1], idx[2]]
