"""Numerical verifiers behind the `verify` subcommand: the loss-equivalence
check, the trace-identity check, and finite-difference gradient checks for
every layer kind and every loss."""

from __future__ import annotations

import numpy as np

from . import losses
from .aggregate_eval import _probe_loss_grad
from .nn.layers import Conv2d, Dense, GlobalMeanPool, L2Norm, Relu, Standardize
from .nn.model import Model

PROP1_TOL = 1e-10
DUALITY_TOL = 1e-9
GRADCHECK_TOL = 1e-4


def random_discrete_cooc(k: int, rng: np.random.Generator, zero_token: bool = False):
    """A valid random joint distribution; optionally one token is made
    unreachable (zero row and column) to exercise zero-weight handling."""
    joint = rng.random((k, k)) + 0.05
    joint = 0.5 * (joint + joint.T)
    if zero_token and k > 2:
        t = int(rng.integers(0, k))
        joint[t, :] = 0.0
        joint[:, t] = 0.0
    joint /= joint.sum()
    return losses.DiscreteCooc.from_joint(joint)


def run_prop1(instances: int, trials: int, rng: np.random.Generator,
              ks=(4, 5, 6, 7, 8), ds=(2, 3, 4), ws=(1.0, 2.0, 4.0)) -> tuple[dict, bool]:
    """Loss equivalence over random discrete instances."""
    worst_gap = 0.0
    worst_grad = 0.0
    for i in range(instances):
        k = int(rng.choice(ks))
        d = int(rng.choice(ds))
        w = float(rng.choice(ws))
        dc = random_discrete_cooc(k, rng, zero_token=(i % 4 == 3))
        rep = losses.prop1_verify(dc, w, d, trials, rng)
        worst_gap = max(worst_gap, rep["max_gap_deviation"])
        worst_grad = max(worst_grad, rep["max_grad_deviation"])
    ok = worst_gap < PROP1_TOL and worst_grad < PROP1_TOL
    report = {
        "instances": instances,
        "trials": trials,
        "max_gap_deviation": worst_gap,
        "max_grad_deviation": worst_grad,
        "tolerance": PROP1_TOL,
    }
    return report, ok


def run_duality(count: int, max_side: int, rng: np.random.Generator) -> tuple[dict, bool]:
    """Trace identity over random matrix shapes in [1, max_side]^2."""
    worst = 0.0
    for _ in range(count):
        n = int(rng.integers(1, max_side + 1))
        d = int(rng.integers(1, max_side + 1))
        z = rng.normal(size=(n, d))
        rep = losses.duality_check(z)
        rel = abs(rep["gap"] - rep["expected_gap"]) / max(1.0, rep["lhs"], rep["rhs"])
        worst = max(worst, rel)
    report = {"count": count, "max_side": max_side,
              "max_relative_deviation": worst, "tolerance": DUALITY_TOL}
    return report, worst < DUALITY_TOL


def _fd_grad(fn, x, h=1e-5):
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def _rel_err(analytic, numeric) -> float:
    # 1e-6 floor: exactly-zero gradients (bias feeding a whitening layer)
    # must not divide finite-difference noise by itself.
    na = float(np.linalg.norm(analytic.ravel()))
    nn = float(np.linalg.norm(numeric.ravel()))
    diff = float(np.linalg.norm((analytic - numeric).ravel()))
    return diff / max(na, nn, 1e-6)


def _away_from(x, bad=0.0, margin=1e-3):
    """Nudge entries off a kink so finite differences stay two-sided."""
    shift = np.where(np.abs(x - bad) < margin, np.sign(x - bad + 1e-30) * margin, 0.0)
    return x + shift


def _make_layer(kind: str, rng):
    """Random small instance of a layer kind plus a matching input."""
    if kind == "conv":
        k = int(rng.integers(2, 4))
        stride = int(rng.integers(1, 3))
        c = int(rng.integers(1, 3))
        oc = int(rng.integers(1, 4))
        side = k + int(rng.integers(0, 4))
        layer = Conv2d(c, oc, k, stride, rng)
        x = rng.normal(size=(int(rng.integers(2, 4)), c, side, side))
    elif kind == "dense":
        fin = int(rng.integers(2, 7))
        layer = Dense(fin, int(rng.integers(1, 6)), rng)
        x = rng.normal(size=(int(rng.integers(2, 5)), fin))
    elif kind == "relu":
        layer = Relu()
        x = _away_from(rng.normal(size=(int(rng.integers(2, 5)), int(rng.integers(2, 7)))))
    elif kind == "standardize":
        layer = Standardize()
        x = rng.normal(size=(int(rng.integers(2, 6)), int(rng.integers(2, 7))))
    elif kind == "pool":
        layer = GlobalMeanPool()
        x = rng.normal(size=(int(rng.integers(2, 4)), int(rng.integers(1, 4)), 3, 3))
    elif kind == "l2norm":
        layer = L2Norm()
        x = rng.normal(size=(int(rng.integers(2, 5)), int(rng.integers(2, 6)))) + 0.5
    else:
        raise ValueError(f"unknown layer kind {kind}")
    return layer, x


def _check_layer(kind: str, rng, corrupt: bool = False) -> float:
    """FD check of a single layer: input gradient and every parameter."""
    layer, x = _make_layer(kind, rng)
    y, ctx = layer.forward(x)
    g = rng.normal(size=y.shape)
    for p in layer.params():
        p.zero_grad()
    dx = layer.backward(g, ctx)
    if corrupt:
        if layer.params():
            layer.params()[0].grad += 1e-2
        else:
            dx = dx + 1e-2

    def scalar(xv):
        yv, _ = layer.forward(xv)
        return float((yv * g).sum())

    worst = _rel_err(dx, _fd_grad(scalar, x.copy()))
    for p in layer.params():
        analytic = p.grad.copy()

        def scalar_p(pv, _p=p):
            saved = _p.values.copy()
            _p.values[...] = pv
            yv, _ = layer.forward(x)
            _p.values[...] = saved
            return float((yv * g).sum())

        worst = max(worst, _rel_err(analytic, _fd_grad(scalar_p, p.values.copy())))
    return worst


def _check_model_params(rng) -> float:
    """FD check through a full encoder+projector stack, including the
    optional direct dLoss/dH path."""
    model = Model(
        (2, 7, 7),
        "conv(3,2,4)|standardize|relu|pool|dense(6)",
        "dense(5)|relu|dense(4)|l2norm",
        seed=int(rng.integers(0, 2**31)),
    )
    x = _away_from(rng.normal(size=(3, 2, 7, 7)))
    h, z, tape = model.forward(x)
    gh = rng.normal(size=h.shape)
    gz = rng.normal(size=z.shape)
    model.zero_grads()
    model.backward(tape, gz, gh)
    worst = 0.0
    for p in model.parameters():
        analytic = p.grad.copy()

        def scalar_p(pv, _p=p):
            saved = _p.values.copy()
            _p.values[...] = pv
            hv, zv, _ = model.forward(x)
            _p.values[...] = saved
            return float((hv * gh).sum() + (zv * gz).sum())

        worst = max(worst, _rel_err(analytic, _fd_grad(scalar_p, p.values.copy())))
    return worst


def _check_loss(kind: str, rng) -> float:
    b = int(rng.integers(3, 7))
    d = int(rng.integers(2, 6))
    if kind == "cooc":
        k = int(rng.integers(3, 7))
        dc = random_discrete_cooc(k, rng)
        w = float(rng.choice([1.0, 2.0, 4.0]))
        e = rng.normal(size=(k, d))
        _, grad = losses.cooc_loss(e, dc, w)
        num = _fd_grad(lambda ev: losses.cooc_loss(ev, dc, w)[0].total, e.copy())
        return _rel_err(grad, num)
    if kind == "probe":
        n, f, c = 6, 4, 3
        x = rng.normal(size=(n, f))
        y1h = np.eye(c)[rng.integers(0, c, size=n)]
        w = rng.normal(size=(f, c))
        bias = rng.normal(size=c)
        _, gw, gb = _probe_loss_grad(w, bias, x, y1h, 1e-3)
        worst = _rel_err(gw, _fd_grad(lambda wv: _probe_loss_grad(wv, bias, x, y1h, 1e-3)[0], w.copy()))
        worst = max(
            worst, _rel_err(gb, _fd_grad(lambda bv: _probe_loss_grad(w, bv, x, y1h, 1e-3)[0], bias.copy()))
        )
        return worst
    scale = float(rng.choice([0.5, 2.0]))  # keep variance hinges off their kink
    z1 = rng.normal(size=(b, d)) * scale
    z2 = rng.normal(size=(b, d)) * scale
    if kind == "spectral":
        fn = lambda a, c: losses.spectral_loss(a, c, lam=1.0)
    elif kind == "vicreg":
        fn = lambda a, c: losses.vicreg_loss(a, c)
    elif kind == "infonce":
        fn = lambda a, c: losses.info_nce(a, c, temperature=0.2)
    else:
        raise ValueError(f"unknown loss kind {kind}")
    _, dz1, dz2 = fn(z1, z2)
    worst = _rel_err(dz1, _fd_grad(lambda a: fn(a, z2)[0].total, z1.copy()))
    worst = max(worst, _rel_err(dz2, _fd_grad(lambda c: fn(z1, c)[0].total, z2.copy())))
    return worst


LAYER_KINDS = ("conv", "dense", "relu", "standardize", "pool", "l2norm")
LOSS_KINDS = ("spectral", "cooc", "vicreg", "infonce", "probe")


def run_gradcheck(trials: int, rng: np.random.Generator, corrupt: str | None = None):
    """Round-robin randomized finite-difference checks across every layer
    kind, the full model stack, and every loss. ``corrupt`` names a layer
    kind whose gradient gets deliberately damaged (negative-control hook).
    """
    roster = [("layer", k) for k in LAYER_KINDS] + [("model", "stack")] + [
        ("loss", k) for k in LOSS_KINDS
    ]
    worst: dict[str, float] = {}
    for t in range(trials):
        group, kind = roster[t % len(roster)]
        if group == "layer":
            err = _check_layer(kind, rng, corrupt=(corrupt == kind))
        elif group == "model":
            err = _check_model_params(rng)
        else:
            err = _check_loss(kind, rng)
        name = f"{group}.{kind}"
        worst[name] = max(worst.get(name, 0.0), err)
    failures = sorted(name for name, err in worst.items() if err >= GRADCHECK_TOL)
    report = {"trials": trials, "tolerance": GRADCHECK_TOL, "worst": worst, "failures": failures}
    return report, not failures
