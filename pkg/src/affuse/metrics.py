"""Concordance and Pearson correlation, plus the differentiable CCC loss.

All moments are biased (divide by N).
"""
import numpy as np

from affuse import tensor as T


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least 2 points")
    return x, y


def ccc(x, y):
    """Concordance correlation coefficient.

    Two constant sequences with equal means are perfectly concordant (1.0).
    """
    x, y = _pair(x, y)
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cov = ((x - mx) * (y - my)).mean()
    denom = vx + vy + (mx - my) ** 2
    if denom == 0.0:
        return 1.0
    return float(2.0 * cov / denom)


def pearson(x, y):
    x, y = _pair(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((xc * xc).mean()), np.sqrt((yc * yc).mean())
    if sx == 0.0 or sy == 0.0:
        return 0.0
    return float((xc * yc).mean() / (sx * sy))


def ccc_loss(pred, target):
    """1 - CCC(pred, target) as a scalar tensor on the tape."""
    pred = T.as_tensor(pred)
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    if pred.size < 2:
        raise ValueError("need at least 2 points")
    pred = T.reshape(pred, (pred.size,))
    target = T.reshape(target, (target.size,))
    mp, mt = T.mean(pred), T.mean(target)
    pc, tc = pred - mp, target - mt
    vp, vt = T.mean(T.square(pc)), T.mean(T.square(tc))
    cov = T.mean(pc * tc)
    denom = vp + vt + T.square(mp - mt)
    if denom.data == 0.0:
        return T.mul(T.tsum(pred), 0.0)
    return 1.0 - 2.0 * cov / denom
