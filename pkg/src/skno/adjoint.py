"""Reverse-mode differentiation for :mod:`skno.model`.

``backward`` walks the tape recorded by ``forward(..., record=True)`` in
reverse and applies the adjoint of each block. Complex spectral weights are
stored as real pairs, so the returned gradients are real arrays keyed exactly
like ``model.params``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blocks
from .exceptions import NumericError, UsageError


@dataclass
class Tape:
    """Per-call forward record: input, per-block caches, dropout masks, output."""

    a: np.ndarray
    training: bool = False
    entries: list = field(default_factory=list)
    masks: dict = field(default_factory=dict)
    output: np.ndarray | None = None

    def push(self, name, cache):
        self.entries.append((name, cache))


class GradientSet(dict):
    """Gradients keyed like ``SknoModel.params``."""

    @classmethod
    def zeros_like(cls, params) -> "GradientSet":
        return cls({k: np.zeros_like(v) for k, v in params.items()})

    def add(self, name, value):
        self[name] = self[name] + value

    def global_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.values())))

    def scale(self, c) -> "GradientSet":
        return GradientSet({k: v * c for k, v in self.items()})


def _layer_backward(model, prefix, cache, g, grads):
    arch, p = model.arch, model.params
    _, dact = blocks.ACTIVATIONS[arch.activation]
    if "mlp" in cache:
        gx, pg = blocks.mlp_backward(cache["mlp"], g, p, prefix + "mlp.")
        for k, v in pg.items():
            grads.add(k, v)
        g = g + gx
    gh = g * dact(cache["h"], cache["act_aux"])
    v = cache["v"]
    gv = np.zeros_like(gh)
    if "res" in cache:
        gx, pg = blocks.mlp_backward(cache["res"], gh, p, prefix + "res.")
        for k, val in pg.items():
            grads.add(k, val)
        gv += gh + gx
    if "local" in cache:
        gx, gs, gmix = blocks.local_backward(cache["local"], gh, p["local.mix"])
        grads.add("local.stencil", gs)
        grads.add("local.mix", gmix)
        gv += gx
    if "spectral" in cache:
        gx, gre, gim = blocks.spectral_backward(cache["spectral"], gh)
        grads.add(prefix + "a_re", gre)
        grads.add(prefix + "a_im", gim)
        gv += gx
    if prefix + "b" in p:
        grads.add(prefix + "b", blocks._sum_outer(v, gh))
        gv += gh @ p[prefix + "b"].T
    return gv


def backward(model, tape: Tape | None, upstream) -> tuple[GradientSet, np.ndarray]:
    """Gradients of a scalar loss given ``upstream = dL/d(output)``.

    Returns ``(grads, grad_input)``.
    """
    if tape is None or tape.output is None:
        raise UsageError("backward needs the tape from forward(..., record=True)")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != tape.output.shape:
        raise UsageError(f"upstream shape {g.shape} != output shape {tape.output.shape}")
    arch, p = model.arch, model.params
    grads = GradientSet.zeros_like(p)
    entries = list(tape.entries)
    if arch.out_scale != 1.0:
        g = g * arch.out_scale

    name, cache = entries.pop()
    assert name == "recover"
    kind = arch.recover_kind
    if kind == "linear":
        grads.add("recover.chi", blocks._sum_outer(cache, g))
        g = g @ p["recover.chi"].T
    elif kind in ("delta", "step", "mean"):
        g = g @ model.fixed_chi().T
    else:
        g, pg = blocks.mlp_backward(cache, g, p, "recover.")
        for k, v in pg.items():
            grads.add(k, v)

    while len(entries) > 1:
        name, cache = entries.pop()
        g = _layer_backward(model, name + ".", cache, g, grads)

    name, cache = entries.pop()
    assert name == "lift"
    if arch.lift_kind == "linear":
        grads.add("lift.w", blocks._sum_outer(cache, g))
        gx = g @ p["lift.w"].T
    elif arch.lift_kind == "constant":
        gx = g @ model.constant_lift().T
    else:
        gx, pg = blocks.mlp_backward(cache, g, p, "lift.")
        for k, v in pg.items():
            grads.add(k, v)
    ga = gx[..., : model.in_channels] / arch.in_scale

    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite gradient for parameter {k}")
    return grads, ga


# --- loss ------------------------------------------------------------------

def _check_loss_shapes(pred, target):
    if pred.shape != target.shape:
        raise UsageError(f"prediction shape {pred.shape} != target shape {target.shape}")


def rel_l2_per_sample(pred, target) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_loss_shapes(pred, target)
    b = target.shape[0]
    tn = np.linalg.norm(target.reshape(b, -1), axis=1)
    if np.any(tn == 0):
        raise UsageError("relative L2 undefined for a zero-norm target")
    return np.linalg.norm((pred - target).reshape(b, -1), axis=1) / tn


def rel_l2_loss(pred, target) -> float:
    """Mean over the batch of per-sample ``||pred - target|| / ||target||``."""
    return float(np.mean(rel_l2_per_sample(pred, target)))


def rel_l2_loss_grad(pred, target) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_loss_shapes(pred, target)
    b = target.shape[0]
    diff = pred - target
    flat = diff.reshape(b, -1)
    dn = np.linalg.norm(flat, axis=1)
    tn = np.linalg.norm(target.reshape(b, -1), axis=1)
    if np.any(tn == 0):
        raise UsageError("relative L2 undefined for a zero-norm target")
    safe = np.where(dn > 0, dn, 1.0)
    coef = np.where(dn > 0, 1.0 / (b * safe * tn), 0.0)
    grad = diff * coef.reshape((b,) + (1,) * (diff.ndim - 1))
    return float(np.mean(dn / tn)), grad


def loss_and_grads(model, a, u, training=False, masks=None):
    from .model import forward

    pred, tape = forward(model, a, training=training, record=True, masks=masks)
    loss, g = rel_l2_loss_grad(pred, u)
    grads, _ = backward(model, tape, g)
    return loss, grads, tape


# --- verification ----------------------------------------------------------

@dataclass
class GradCheckRow:
    tensor: str
    analytic_norm: float
    fd_norm: float
    max_rel_error: float
    passed: bool


def grad_check(model, a, u, eps: float = 1e-5, tolerance: float = 1e-6,
               training: bool = False, corrupt: str | None = None) -> list[GradCheckRow]:
    """Compare analytic gradients with central differences for every tensor.

    The relative error of a tensor is ``max|analytic - fd| / max(|fd|_inf,
    |analytic|_inf)``. ``corrupt`` names a tensor whose analytic gradient is
    deliberately perturbed (a negative control for tests). In training mode
    the dropout masks of the first pass are replayed for every perturbation.
    """
    from .model import forward

    if not 1e-7 <= eps <= 1e-3:
        raise UsageError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    loss, grads, tape = loss_and_grads(model, a, u, training=training)
    masks = dict(tape.masks) if training else None

    def f():
        return rel_l2_loss(forward(model, a, training=training, masks=masks), u)

    rows = []
    for name, theta in model.params.items():
        analytic = grads[name].copy()
        if name == corrupt:
            analytic = analytic + 1e-3 * (1.0 + np.abs(analytic).max())
        fd = np.zeros_like(theta)
        flat, fdf = theta.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = f()
            flat[i] = old - eps
            lm = f()
            flat[i] = old
            fdf[i] = (lp - lm) / (2 * eps)
        if name == "local.stencil":
            # the stencil is re-centred, so only zero-sum directions are meaningful
            fd = blocks.centered_stencil(fd)
        scale = max(np.abs(fd).max(), np.abs(analytic).max(), 1e-8)
        err = float(np.abs(analytic - fd).max() / scale)
        rows.append(GradCheckRow(name, float(np.linalg.norm(analytic)), float(np.linalg.norm(fd)),
                                 err, err < tolerance))
    return rows


def write_grad_check_csv(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tensor", "analytic_norm", "fd_norm", "max_rel_error", "passed"])
        for r in rows:
            w.writerow([r.tensor, f"{r.analytic_norm:.12e}", f"{r.fd_norm:.12e}",
                        f"{r.max_rel_error:.6e}", int(r.passed)])
    return path


def adjoint_identity_check(model, draws: int = 100, n: int = 64, seed: int = 0) -> dict:
    """Check the inner-product identities of the linear lift and recovery maps.

    ``<Q v, r>_x = <v, Q* r>_{x,p}`` with ``Q* r = chi (x) r``, and the
    analogue for a linear lift. Returns the worst relative discrepancy of each.
    """
    arch = model.arch
    if arch.recover_kind not in ("linear", "delta", "step", "mean"):
        raise UsageError("adjoint identity needs a linear recovery kind")
    rng = np.random.default_rng(seed)
    chi = model.params["recover.chi"] if arch.recover_kind == "linear" else model.fixed_chi()
    w = None
    if arch.lift_kind == "linear":
        w = model.params["lift.w"]
    elif arch.lift_kind == "constant":
        w = model.constant_lift()
    worst_q, worst_p = 0.0, 0.0
    dx = 1.0 / n
    for _ in range(draws):
        v = rng.standard_normal((n, arch.n_p))
        r = rng.standard_normal((n, chi.shape[1]))
        lhs = np.sum((v @ chi) * r) * dx
        q_star = np.einsum("pu,xu->xp", chi, r)
        rhs = np.sum(v * q_star) * dx
        worst_q = max(worst_q, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
        if w is not None:
            a = rng.standard_normal((n, w.shape[0]))
            s = rng.standard_normal((n, arch.n_p))
            lhs = np.sum((a @ w) * s) * dx
            p_star = np.einsum("cp,xp->xc", w, s)
            rhs = np.sum(a * p_star) * dx
            worst_p = max(worst_p, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    return {"recover_max_rel": worst_q, "lift_max_rel": worst_p if w is not None else None,
            "draws": draws, "passed": worst_q < 1e-12 and (w is None or worst_p < 1e-12)}
