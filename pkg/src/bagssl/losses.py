"""Training objectives and the two exact verifiers.

The central objects: the spectral contrastive loss on batches of paired
projections, the co-occurrence modeling loss on a discrete token
distribution, a verifier showing the two are the same objective up to a
constant and a factor 2w, and the trace identity relating sample-Gram and
feature-Gram regularization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class DiscreteCooc:
    """Finite joint distribution over token pairs with its marginals."""

    joint: np.ndarray
    p1: np.ndarray
    p2: np.ndarray

    @classmethod
    def from_joint(cls, joint: np.ndarray) -> "DiscreteCooc":
        joint = np.asarray(joint, dtype=np.float64)
        return cls(joint, joint.sum(axis=1), joint.sum(axis=0))

    @property
    def k(self) -> int:
        return self.joint.shape[0]

    def validate(self, tol: float = 1e-9):
        j = self.joint
        if j.ndim != 2 or j.shape[0] != j.shape[1]:
            raise ValueError(f"joint must be square, got {j.shape}")
        if not np.all(np.isfinite(j)) or np.any(j < 0):
            raise ValueError("joint entries must be finite and >= 0")
        if abs(j.sum() - 1.0) > tol:
            raise ValueError(f"joint must sum to 1, got {j.sum()!r}")
        if np.abs(j.sum(axis=1) - self.p1).max() > tol or np.abs(j.sum(axis=0) - self.p2).max() > tol:
            raise ValueError("marginals inconsistent with joint")


@dataclass
class LossValue:
    """Scalar objective with its named components; ``total`` is always the
    sum of ``components`` values (weights folded in)."""

    total: float
    components: dict[str, float] = field(default_factory=dict)


def _check_pair(z1, z2):
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape or z1.ndim != 2:
        raise ValueError(f"projection batches must share a (B,d) shape, got {z1.shape}, {z2.shape}")
    if z1.shape[0] < 2:
        raise ValueError("batch size must be >= 2 (no negative pairs otherwise)")
    return z1, z2


def spectral_loss(z1, z2, lam: float = 1.0):
    """Attract matched-pair inner products, penalize squared inner products
    of the B(B-1) cross pairs.

    positive    = -(1/B) sum_i z1_i . z2_i
    regularizer = lam/(B(B-1)) sum_{i != j} (z1_i . z2_j)^2
    Returns (LossValue, dL/dZ1, dL/dZ2).
    """
    z1, z2 = _check_pair(z1, z2)
    b = z1.shape[0]
    gram = z1 @ z2.T
    diag = np.diagonal(gram)
    positive = -diag.sum() / b
    off = gram.copy()
    np.fill_diagonal(off, 0.0)
    reg_scale = lam / (b * (b - 1))
    regularizer = reg_scale * (off * off).sum()
    total = positive + regularizer
    dz1 = -z2 / b + 2.0 * reg_scale * (off @ z2)
    dz2 = -z1 / b + 2.0 * reg_scale * (off.T @ z1)
    return LossValue(total, {"positive": positive, "regularizer": regularizer}), dz1, dz2


def _ratio_and_weight(dc: DiscreteCooc):
    weight = np.outer(dc.p1, dc.p2)
    mask = weight > 0
    ratio = np.zeros_like(weight)
    ratio[mask] = dc.joint[mask] / weight[mask]
    return weight, ratio, mask


def cooc_loss(e, dc: DiscreteCooc, w: float):
    """Weighted factorization residual over the token vocabulary:

    L = sum_ij p1(i) p2(j) [w e_i . e_j - joint(i,j)/(p1(i)p2(j))]^2

    Pairs with zero marginal product contribute nothing (their ratio is
    undefined and their weight is zero). Returns (LossValue, dL/dE).
    """
    if w <= 0:
        raise ValueError(f"w must be positive, got {w}")
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] != dc.k:
        raise ValueError(f"embedding table must be ({dc.k}, d), got {e.shape}")
    weight, ratio, mask = _ratio_and_weight(dc)
    diff = np.where(mask, w * (e @ e.T) - ratio, 0.0)
    wd = weight * diff
    total = float((wd * diff).sum())
    grad = 2.0 * w * (wd @ e + wd.T @ e)
    return LossValue(total, {"weighted_residual": total}), grad


def _enumerated_spectral(e, dc: DiscreteCooc, w: float):
    """Population spectral loss and gradient by explicit double loops over
    the vocabulary (the slow, independent route prop1_verify checks
    against): L_S = -E_joint[s] + (w/2) E_p1p2[s^2], s = e_i . e_j."""
    k, d = e.shape
    lam = w / 2.0
    total = 0.0
    grad = np.zeros_like(e)
    for i in range(k):
        for j in range(k):
            s = float(np.dot(e[i], e[j]))
            total += -dc.joint[i, j] * s + lam * dc.p1[i] * dc.p2[j] * s * s
            coeff = -dc.joint[i, j] + 2.0 * lam * dc.p1[i] * dc.p2[j] * s
            grad[i] += coeff * e[j]
            grad[j] += coeff * e[i]
    return total, grad


def prop1_verify(dc: DiscreteCooc, w: float, d: int, trials: int, rng: np.random.Generator) -> dict:
    """Check the loss equivalence on random embedding tables: the gap
    L_C - 2w L_S must be a constant independent of E, and the gradients
    must satisfy grad L_C = 2w grad L_S entrywise.

    L_S is evaluated by full enumeration over the vocabulary; only exact
    small instances are accepted (K <= 32, d <= 8).
    """
    dc.validate()
    if dc.k > 32 or d > 8:
        raise ValueError(f"enumeration regime is K <= 32, d <= 8; got K={dc.k}, d={d}")
    if trials < 1:
        raise ValueError("need at least one trial")
    gaps = []
    max_grad_dev = 0.0
    for _ in range(trials):
        e = rng.normal(size=(dc.k, d))
        lc, grad_c = cooc_loss(e, dc, w)
        ls, grad_s = _enumerated_spectral(e, dc, w)
        gaps.append(lc.total - 2.0 * w * ls)
        max_grad_dev = max(max_grad_dev, float(np.abs(grad_c - 2.0 * w * grad_s).max()))
    med = float(np.median(gaps))
    max_gap_dev = max(abs(g - med) for g in gaps)
    return {
        "w": w,
        "lambda": w / 2.0,
        "k": dc.k,
        "d": d,
        "trials": trials,
        "gaps": gaps,
        "median_gap": med,
        "max_gap_deviation": max_gap_dev,
        "max_grad_deviation": max_grad_dev,
    }


def vicreg_loss(z1, z2, c_var: float = 25.0, c_inv: float = 25.0, c_cov: float = 1.0):
    """Invariance / variance-hinge / covariance objective.

    invariance = mean squared distance between paired rows; variance =
    per-branch mean over dims of max(0, 1 - std) with eps 1e-4 inside the
    square root (unbiased variance); covariance = per-branch sum of squared
    off-diagonal covariance entries divided by d. Branch terms are summed.
    Returns (LossValue, dL/dZ1, dL/dZ2).
    """
    z1, z2 = _check_pair(z1, z2)
    b, d = z1.shape
    eps = 1e-4

    inv = float(((z1 - z2) ** 2).sum() / b)
    dinv_z1 = 2.0 * (z1 - z2) / b

    def branch(z):
        zc = z - z.mean(axis=0)
        var = (zc * zc).sum(axis=0) / (b - 1)
        std = np.sqrt(var + eps)
        hinge = np.maximum(0.0, 1.0 - std)
        v = float(hinge.mean())
        active = (hinge > 0.0).astype(np.float64)
        dv = -active / (d * (b - 1) * std) * zc
        cov = (zc.T @ zc) / (b - 1)
        offdiag = cov.copy()
        np.fill_diagonal(offdiag, 0.0)
        c = float((offdiag * offdiag).sum() / d)
        dc_ = 4.0 / (d * (b - 1)) * (zc @ offdiag)
        return v, dv, c, dc_

    v1, dv1, c1, dc1 = branch(z1)
    v2, dv2, c2, dc2 = branch(z2)
    var_term = v1 + v2
    cov_term = c1 + c2
    total = c_inv * inv + c_var * var_term + c_cov * cov_term
    dz1 = c_inv * dinv_z1 + c_var * dv1 + c_cov * dc1
    dz2 = -c_inv * dinv_z1 + c_var * dv2 + c_cov * dc2
    lv = LossValue(
        total,
        {
            "invariance": c_inv * inv,
            "variance": c_var * var_term,
            "covariance": c_cov * cov_term,
        },
    )
    return lv, dz1, dz2


def info_nce(z1, z2, temperature: float = 0.1):
    """Symmetric cross-entropy over cosine-similarity logits. Rows are
    L2-normalized internally; positives sit on the diagonal, negatives are
    all other rows of the opposite branch. Returns (LossValue, dZ1, dZ2).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z1, z2 = _check_pair(z1, z2)
    b = z1.shape[0]
    n1 = np.maximum(np.sqrt((z1 * z1).sum(axis=1, keepdims=True)), 1e-300)
    n2 = np.maximum(np.sqrt((z2 * z2).sum(axis=1, keepdims=True)), 1e-300)
    u = z1 / n1
    v = z2 / n2
    logits = (u @ v.T) / temperature

    def ce_rows(lg):
        m = lg.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(lg - m).sum(axis=1))
        loss = float((lse - np.diagonal(lg)).mean())
        probs = np.exp(lg - m)
        probs /= probs.sum(axis=1, keepdims=True)
        dl = (probs - np.eye(b)) / b
        return loss, dl

    loss_fwd, dl_fwd = ce_rows(logits)
    loss_rev, dl_rev = ce_rows(logits.T)
    total = 0.5 * (loss_fwd + loss_rev)
    dlogits = 0.5 * (dl_fwd + dl_rev.T)
    du = (dlogits @ v) / temperature
    dv = (dlogits.T @ u) / temperature
    dz1 = (du - u * (du * u).sum(axis=1, keepdims=True)) / n1
    dz2 = (dv - v * (dv * v).sum(axis=1, keepdims=True)) / n2
    lv = LossValue(total, {"ce_forward": 0.5 * loss_fwd, "ce_reverse": 0.5 * loss_rev})
    return lv, dz1, dz2


def duality_check(z) -> dict:
    """Trace identity linking the two Gram regularizers: for any real
    N x d matrix, ||Z^T Z - I_d||_F^2 - ||Z Z^T - I_N||_F^2 = d - N.

    Both Frobenius norms are evaluated from their own Gram matrix so the
    identity is genuinely measured rather than rebuilt from shared terms.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {z.shape}")
    n, d = z.shape
    feat = z.T @ z - np.eye(d)
    samp = z @ z.T - np.eye(n)
    lhs = float((feat * feat).sum())
    rhs = float((samp * samp).sum())
    return {"lhs": lhs, "rhs": rhs, "gap": lhs - rhs, "expected_gap": float(d - n)}
