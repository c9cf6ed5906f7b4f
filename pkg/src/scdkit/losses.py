"""Training objectives: region-language alignment, spatial correlation
distillation, refiner alignment, and the ablation correlation losses.

All losses accept either a single region (L, D) or a stacked batch
(R, L, D) and average over regions and rows. Teacher-side inputs must not
carry gradients; gradients flow through the student side only.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class CorrelationMatrix:
    values: Tensor
    normalized: bool = False
    temperature: float = None


@dataclass
class LossWeights:
    lam: float = 0.2
    tau_s: float = 0.2
    tau_t: float = 0.2

    def __post_init__(self):
        if self.lam < 0 or self.tau_s <= 0 or self.tau_t <= 0:
            raise ShapeError("loss_weights", f"invalid weights {self}")


def _as_batched(name, z):
    if z.ndim == 2:
        return tt.reshape(z, (1,) + z.shape)
    if z.ndim == 3:
        return z
    raise ShapeError(name, f"expected (L, D) or (R, L, D), got {z.shape}")


def correlation(z):
    """Raw token-pair similarity C = Z Z^T (per region when batched)."""
    zb = _as_batched("correlation", z)
    c = tt.matmul(zb, tt.transpose(zb, (0, 2, 1)))
    if z.ndim == 2:
        c = c[0]
    return CorrelationMatrix(values=c, normalized=False)


def normalize(corr, tau):
    """Row-softmax of C / tau."""
    if tau <= 0:
        raise ShapeError("normalize", f"temperature {tau} must be positive")
    if corr.normalized:
        raise ShapeError("normalize", "matrix already normalized")
    return CorrelationMatrix(values=tt.softmax(tt.mul(corr.values, 1.0 / tau)),
                             normalized=True, temperature=tau)


def soft_cross_entropy(target_rows, student_log_rows):
    """Mean over rows of -sum(target * log_pred); targets are probabilities."""
    if target_rows.shape != student_log_rows.shape:
        raise ShapeError("soft_cross_entropy",
                         f"shape mismatch {target_rows.shape} vs {student_log_rows.shape}")
    ce = tt.mul(tt.tsum(tt.mul(target_rows, student_log_rows), axis=-1), -1.0)
    return tt.tmean(ce)


def scd_loss(zs, zt, tau_s=0.2, tau_t=0.2):
    """Cross-entropy between softmax-normalized correlation matrices; the
    teacher rows are the soft targets and receive no gradient."""
    if zs.shape != zt.shape:
        raise ShapeError("scd_loss", f"region shapes differ: {zs.shape} vs {zt.shape}")
    if zt.requires_grad:
        raise ShapeError("scd_loss", "teacher features must not require grad")
    zsb = _as_batched("scd_loss", zs)
    ztb = _as_batched("scd_loss", zt)
    cs = tt.matmul(zsb, tt.transpose(zsb, (0, 2, 1)))
    with tt.no_grad():
        ct = tt.matmul(ztb, tt.transpose(ztb, (0, 2, 1)))
        target = tt.softmax(tt.mul(ct, 1.0 / tau_t))
    log_pred = tt.log_softmax(tt.mul(cs, 1.0 / tau_s))
    return soft_cross_entropy(target, log_pred)


def rla_loss(region_feats, supervision, mode="cosine", temp=0.07):
    """Align pooled region vectors (B, D) with supervision vectors (B, D)."""
    if region_feats.shape != supervision.shape or region_feats.ndim != 2:
        raise ShapeError("rla_loss", f"expected matching (B, D), got "
                                     f"{region_feats.shape} vs {supervision.shape}")
    b = region_feats.shape[0]
    if mode == "cosine":
        cos = tt.cosine_similarity(region_feats, supervision)
        return tt.tmean(tt.sub(1.0, cos))
    if mode == "infonce":
        if b < 2:
            raise ShapeError("rla_loss", "infonce needs at least 2 regions")
        rn = tt.l2_normalize(region_feats)
        sn = tt.l2_normalize(supervision)
        logits = tt.mul(tt.matmul(rn, tt.transpose(sn)), 1.0 / temp)
        diag = (np.arange(b), np.arange(b))
        fwd = tt.mul(tt.tmean(tt.log_softmax(logits)[diag]), -1.0)
        bwd = tt.mul(tt.tmean(tt.log_softmax(tt.transpose(logits))[diag]), -1.0)
        return tt.mul(tt.add(fwd, bwd), 0.5)
    raise ShapeError("rla_loss", f"unknown mode {mode}")


def refiner_loss(refined, local, mode="infonce", temp=0.1):
    """Token-wise global-to-local alignment; InfoNCE negatives are the other
    tokens of the same crop."""
    if refined.shape != local.shape:
        raise ShapeError("refiner_loss", f"token shapes differ: {refined.shape} vs {local.shape}")
    zr = _as_batched("refiner_loss", refined)
    zl = _as_batched("refiner_loss", local)
    c, l, _ = zr.shape
    if mode == "cosine":
        cos = tt.cosine_similarity(zr, zl)
        return tt.tmean(tt.sub(1.0, cos))
    if mode == "infonce":
        rn = tt.l2_normalize(zr)
        ln = tt.l2_normalize(zl)
        logits = tt.mul(tt.matmul(rn, tt.transpose(ln, (0, 2, 1))), 1.0 / temp)
        ii = np.repeat(np.arange(c), l)
        jj = np.tile(np.arange(l), c)
        picked = tt.log_softmax(logits)[(ii, jj, jj)]
        return tt.mul(tt.tmean(picked), -1.0)
    raise ShapeError("refiner_loss", f"unknown mode {mode}")


def sc_rla_loss(l_rla, l_scd, lam=0.2):
    """L_RLA + lambda * L_SCD."""
    if lam < 0:
        raise ShapeError("sc_rla_loss", f"lambda {lam} must be >= 0")
    return tt.add(l_rla, tt.mul(l_scd, lam))


# -- ablation losses ----------------------------------------------------------


def frobenius_loss(cs, ct):
    """||Cs - Ct||_F^2 / L^2 (mean over regions when batched)."""
    if cs.shape != ct.shape:
        raise ShapeError("frobenius_loss", f"shape mismatch {cs.shape} vs {ct.shape}")
    if ct.requires_grad:
        raise ShapeError("frobenius_loss", "teacher matrix must not require grad")
    diff = tt.sub(cs, ct)
    return tt.tmean(tt.mul(diff, diff))


def inter_instance_loss(pooled_s, pooled_t, tau_s=0.2, tau_t=0.2):
    """SCD applied to the B x B correlation of pooled region vectors across a
    batch instead of tokens within a region."""
    if pooled_s.ndim != 2:
        raise ShapeError("inter_instance_loss", f"expected (B, D), got {pooled_s.shape}")
    return scd_loss(pooled_s, pooled_t, tau_s, tau_t)


def attention_loss(student_logits, teacher_logits):
    """Cross-entropy between last-block attention maps, teacher as target.
    Inputs are pre-softmax attention logits of identical shape."""
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError("attention_loss",
                         f"shape mismatch {student_logits.shape} vs {teacher_logits.shape}")
    if teacher_logits.requires_grad:
        raise ShapeError("attention_loss", "teacher attention must not require grad")
    with tt.no_grad():
        target = tt.softmax(teacher_logits)
    return soft_cross_entropy(target, tt.log_softmax(student_logits))
