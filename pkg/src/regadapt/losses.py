"""Similarity and regularization losses plus the modality gate.

LNCC is local normalized cross-correlation: means, variances, and the
covariance are Gaussian-weighted local statistics (separable filtering,
radius (window-1)/2, sigma window/4), the per-voxel correlation is
cov / sqrt((var_a + eps)(var_b + eps)) with eps = 1e-5, and the scalar is
the mean over voxels. The minimization convention is L_sim = -LNCC; raw
LNCC values are always exposed alongside.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor

LNCC_EPS = 1e-5


def _vol_array(x):
    if isinstance(x, np.ndarray):
        return x
    if hasattr(x, "spacing") or isinstance(x, DiffTensor):
        return x.data
    return np.asarray(x)


# ---------------------------------------------------------------------------
# LNCC


def _lncc_map_arrays(a, b, window):
    k = ad.gaussian_kernel1d(window)
    mu_a = ad.filter_separable(a, k)
    mu_b = ad.filter_separable(b, k)
    var_a = ad.filter_separable(a * a, k) - mu_a * mu_a
    var_b = ad.filter_separable(b * b, k) - mu_b * mu_b
    cov = ad.filter_separable(a * b, k) - mu_a * mu_b
    return cov / np.sqrt((var_a + LNCC_EPS) * (var_b + LNCC_EPS))


def _lncc_graph(a, b, window):
    ga = ad.gaussian_filter(a, window)
    gb = ad.gaussian_filter(b, window)
    var_a = ad.sub(ad.gaussian_filter(ad.mul(a, a), window), ad.mul(ga, ga))
    var_b = ad.sub(ad.gaussian_filter(ad.mul(b, b), window), ad.mul(gb, gb))
    cov = ad.sub(ad.gaussian_filter(ad.mul(a, b), window), ad.mul(ga, gb))
    den = ad.sqrt(ad.mul(ad.add_scalar(var_a, LNCC_EPS), ad.add_scalar(var_b, LNCC_EPS)))
    return ad.div(cov, den)


def lncc(a, b, window=9, return_map=False):
    """Mean local normalized cross-correlation, signed, in [-1, 1].

    Accepts Volume3D/ndarray pairs (returns floats) or DiffTensor pairs
    (returns graph nodes, differentiable wrt both inputs).
    """
    if window % 2 != 1:
        raise ValueError(f"lncc window must be odd, got {window}")
    if isinstance(a, DiffTensor) or isinstance(b, DiffTensor):
        if a.shape != b.shape:
            raise ValueError(f"lncc: shape mismatch {a.shape} vs {b.shape}")
        m = _lncc_graph(a, b, window)
        s = ad.reduce_mean(m)
        return (s, m) if return_map else s
    aa = _vol_array(a).astype(np.float32)
    bb = _vol_array(b).astype(np.float32)
    if aa.shape != bb.shape:
        raise ValueError(f"lncc: shape mismatch {aa.shape} vs {bb.shape}")
    m = _lncc_map_arrays(aa, bb, window)
    s = float(m.mean(dtype=np.float64))
    return (s, m) if return_map else s


# ---------------------------------------------------------------------------
# modality gate


def pool_array(a, factor):
    """Non-differentiable average pooling of the last three axes (ragged ok)."""
    out = np.asarray(a, dtype=np.float32)
    for axis in range(out.ndim - 3, out.ndim):
        out, _ = ad._pool_axis(out, factor, axis)
    return out


def gate_lncc(a, b, window=11, down=4):
    """Low-resolution LNCC the gate thresholds on."""
    aa = pool_array(_vol_array(a), down)
    bb = pool_array(_vol_array(b), down)
    return lncc(aa, bb, window)


def modality_gate(a, b, window=11, tau=0.4, down=4):
    """True when the pair looks cross-contrast and should be style-transferred."""
    aa = _vol_array(a)
    bb = _vol_array(b)
    if aa.shape != bb.shape:
        raise ValueError(f"modality_gate: shape mismatch {aa.shape} vs {bb.shape}")
    return bool(gate_lncc(a, b, window=window, down=down) < tau)


# ---------------------------------------------------------------------------
# diffusion regularizer


def _diffusion_counts(dims):
    D, H, W = dims
    return 3 * ((D - 1) * H * W + D * (H - 1) * W + D * H * (W - 1))


def diffusion_reg(u):
    """Mean squared forward difference of the field over axes and components.

    Boundary differences are omitted; the mean pools every difference term
    from all three axes and all three components.
    """
    if isinstance(u, DiffTensor):
        dims = u.shape[2:]
        total = None
        for axis in range(3):
            crops_hi = [(0, 0)] * 3
            crops_lo = [(0, 0)] * 3
            crops_hi[axis] = (1, 0)
            crops_lo[axis] = (0, 1)
            d = ad.sub(ad.crop_spatial(u, tuple(crops_hi)), ad.crop_spatial(u, tuple(crops_lo)))
            ss = ad.reduce_sum(ad.square(d))
            total = ss if total is None else ad.add(total, ss)
        return ad.scale(total, 1.0 / _diffusion_counts(dims))
    ua = u.data if hasattr(u, "dims") else np.asarray(u)
    dims = ua.shape[1:]
    acc = 0.0
    for axis in range(1, 4):
        d = np.diff(ua, axis=axis)
        acc += float(np.sum(d.astype(np.float64) ** 2))
    return acc / _diffusion_counts(dims)


# ---------------------------------------------------------------------------
# total multi-stage loss


@dataclass
class LossReport:
    """Per-stage raw LNCC, final-field regularizer, and the assembled total."""

    sim: list
    reg: float
    lam: float
    total: float

    def recompute_total(self):
        return float(sum(-s for s in self.sim) + self.lam * self.reg)

    def to_dict(self):
        return {"sim": list(self.sim), "reg": self.reg, "lam": self.lam, "total": self.total}


def total_loss_graph(stage_warps, target, phi_T, lam=0.1, window=9):
    """Graph form: returns (scalar loss node, LossReport of its float parts)."""
    if not stage_warps:
        raise ValueError("total_loss: need at least one stage warp")
    sims = []
    loss = None
    for w in stage_warps:
        s = lncc(w, target, window)
        sims.append(s)
        term = ad.neg(s)
        loss = term if loss is None else ad.add(loss, term)
    reg = diffusion_reg(phi_T)
    loss = ad.add(loss, ad.scale(reg, lam))
    report = LossReport(
        sim=[s.item() for s in sims],
        reg=reg.item(),
        lam=float(lam),
        total=loss.item(),
    )
    return loss, report


def total_loss(stage_warps, target, phi_T, lam=0.1, window=9):
    """Multi-stage loss: sum_t -LNCC(I_A o phi_t, I_B) + lam * diffusion(phi_T)."""
    if stage_warps and isinstance(stage_warps[0], DiffTensor):
        _, report = total_loss_graph(stage_warps, target, phi_T, lam=lam, window=window)
        return report
    if not stage_warps:
        raise ValueError("total_loss: need at least one stage warp")
    sims = [lncc(w, target, window) for w in stage_warps]
    reg = diffusion_reg(phi_T)
    total = float(sum(-s for s in sims) + lam * reg)
    return LossReport(sim=sims, reg=float(reg), lam=float(lam), total=total)
