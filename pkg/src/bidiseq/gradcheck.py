"""Finite-difference validation of analytic gradients.

Central differences at step ``h`` are compared against the backward
pass for every parameter tensor twice over: once along a random
direction of the full tensor (which touches every coordinate), and once
coordinate-wise on a seeded sample (all coordinates for small tensors).
The reported relative error uses a noise floor proportional to the loss
magnitude, because a central difference of a loss ``L`` in float64
cannot resolve derivatives below about ``eps * |L| / h`` no matter how
correct the gradient is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import Model
from .training import batch_loss


@dataclass
class GradCheckReport:
    objective: str
    max_rel_err: float
    worst: str
    n_coord_checks: int
    n_direction_checks: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err <= tol


def _loss_value(model, batch, objective, rng_seed) -> float:
    with ad.no_grad():
        loss, _ = batch_loss(
            model, batch, objective, rng=np.random.default_rng(rng_seed), train=False
        )
    return float(loss.data)


def gradient_check(model: Model, batch, objective: str, h: float = 1e-5,
                   coords_per_tensor: int = 8, seed: int = 0,
                   exhaustive: bool = False) -> GradCheckReport:
    """Compare backward-pass gradients with central finite differences.

    The model must be float64 with dropout 0 (the loss has to be a
    deterministic, smooth function of the parameters). ``exhaustive``
    checks every coordinate of every tensor instead of a sample.
    """
    if model.dtype != np.float64:
        raise ValueError("gradient checking requires a float64 model")
    if model.config.dropout != 0.0:
        raise ValueError("gradient checking requires dropout 0")

    rng_seed = seed + 1
    for p in model.params.values():
        p.grad = None
    loss, _ = batch_loss(
        model, batch, objective, rng=np.random.default_rng(rng_seed), train=False
    )
    loss.backward()
    base = float(loss.data)
    analytic = {
        k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for k, p in model.params.items()
    }
    # Resolution floor of a float64 central difference of this loss.
    floor = max(1.0, abs(base)) * 1e-5

    def rel(fd, an):
        return abs(fd - an) / max(abs(fd), abs(an), floor)

    rng = np.random.default_rng(seed)
    worst = (0.0, "")
    n_coord = n_dir = 0
    for name, p in model.params.items():
        flat = p.data.reshape(-1)
        gflat = analytic[name].reshape(-1)

        direction = rng.normal(size=flat.shape)
        direction /= np.linalg.norm(direction)
        saved = flat.copy()
        flat += h * direction
        hi = _loss_value(model, batch, objective, rng_seed)
        flat[:] = saved - h * direction
        lo = _loss_value(model, batch, objective, rng_seed)
        flat[:] = saved
        fd_dir = (hi - lo) / (2 * h)
        an_dir = float(gflat @ direction)
        n_dir += 1
        r = rel(fd_dir, an_dir)
        if r > worst[0]:
            worst = (r, f"{name} (direction) fd={fd_dir:.6e} an={an_dir:.6e}")

        if exhaustive or flat.size <= coords_per_tensor:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, size=coords_per_tensor, replace=False)
        for k in idxs:
            orig = flat[k]
            flat[k] = orig + h
            hi = _loss_value(model, batch, objective, rng_seed)
            flat[k] = orig - h
            lo = _loss_value(model, batch, objective, rng_seed)
            flat[k] = orig
            fd = (hi - lo) / (2 * h)
            n_coord += 1
            r = rel(fd, gflat[k])
            if r > worst[0]:
                worst = (r, f"{name}[{k}] fd={fd:.6e} an={gflat[k]:.6e}")

    return GradCheckReport(
        objective=objective,
        max_rel_err=worst[0],
        worst=worst[1],
        n_coord_checks=n_coord,
        n_direction_checks=n_dir,
    )
