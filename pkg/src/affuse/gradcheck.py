"""Central finite-difference checks of tape gradients."""
from dataclasses import dataclass

import numpy as np

from affuse import tensor as T

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-6


def rel_error(a, b):
    """||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - b) / scale)


def _value(loss_fn):
    """Loss value and the ReLU activation pattern that produced it."""
    with T.no_grad(), T.trace_relu_masks() as masks:
        value = float(loss_fn().data)
    return value, masks


def numeric_grad(loss_fn, param, h=DEFAULT_STEP):
    """Elementwise central differences of ``loss_fn()`` w.r.t. ``param``.

    Returns ``(grad, smooth)``; ``smooth[i]`` is False where the +h/-h probes
    changed some ReLU's activation pattern, i.e. straddled a kink.
    """
    _, base = _value(loss_fn)
    grad = np.zeros_like(param.data)
    smooth = np.ones(param.data.shape, dtype=bool)
    flat = param.data.reshape(-1)
    gflat, sflat = grad.reshape(-1), smooth.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up, m_up = _value(loss_fn)
        flat[i] = orig - h
        down, m_down = _value(loss_fn)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
        sflat[i] = m_up == base and m_down == base
    return grad, smooth


def analytic_grads(loss_fn, params):
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = T.backward(loss, params)
    return [grads[p].copy() for p in params]


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    skipped: int = 0  # probes discarded for straddling a ReLU kink

    @property
    def ok(self):
        return self.error < self.tol


def check_elementwise(loss_fn, params, names=None, h=DEFAULT_STEP, tol=DEFAULT_TOL):
    """Full finite-difference gradient of every entry of every parameter.

    Entries whose probes straddle a kink are left out of the comparison and
    counted in ``skipped``.
    """
    names = names or [p.name or f"p{i}" for i, p in enumerate(params)]
    analytic = analytic_grads(loss_fn, params)
    out = []
    for n, p, a in zip(names, params, analytic):
        num, smooth = numeric_grad(loss_fn, p, h)
        out.append(CheckResult(n, rel_error(a[smooth], num[smooth]), tol, int((~smooth).sum())))
    return out


def check_directional(loss_fn, params, names=None, rng=None, h=DEFAULT_STEP, tol=DEFAULT_TOL,
                      directions=2, max_redraws=20):
    """Compare <grad, u> with the central difference along random unit ``u``,
    ``directions`` times per parameter tensor. Cost is independent of size.
    Directions whose probes straddle a kink are redrawn."""
    rng = rng if rng is not None else np.random.default_rng(0)
    names = names or [p.name or f"p{i}" for i, p in enumerate(params)]
    analytic = analytic_grads(loss_fn, params)
    _, base = _value(loss_fn)
    out = []
    for n, p, a in zip(names, params, analytic):
        ana, num, skipped = [], [], 0
        while len(ana) < directions:
            u = rng.standard_normal(p.shape)
            u /= np.linalg.norm(u)
            orig = p.data.copy()
            p.data = orig + h * u
            up, m_up = _value(loss_fn)
            p.data = orig - h * u
            down, m_down = _value(loss_fn)
            p.data = orig
            if (m_up != base or m_down != base) and skipped < max_redraws:
                skipped += 1
                continue
            ana.append(float((a * u).sum()))
            num.append((up - down) / (2 * h))
        out.append(CheckResult(n, rel_error(ana, num), tol, skipped))
    return out


def randomize_parameters(params, rng, gain=1.0):
    """Overwrite ``params`` with a generic point: weights ~ N(0, gain^2/fan_in),
    vectors ~ N(0, 0.01) (plus 1 for names ending in ``gain``).

    The default small-std initialisation leaves many ReLU inputs within a
    finite-difference step of zero; checks run away from such kinks.
    """
    for p in params:
        if p.ndim >= 2:
            fan_in = int(np.prod(p.shape[1:]))
            p.data = rng.normal(0.0, gain / np.sqrt(fan_in), p.shape)
        else:
            base = 1.0 if (p.name or "").endswith("gain") else 0.0
            p.data = base + rng.normal(0.0, 0.1, p.shape)
