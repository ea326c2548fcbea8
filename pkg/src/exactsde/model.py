"""SDE coefficient bundles and the drift conversions between Itô and
Stratonovich form, plus the change of variables under a diffeomorphism."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np

from .errors import ExactSdeError, SingularJacobian
from .numerics import (
    DEFAULT_JACOBIAN,
    Box,
    Field,
    JacobianSpec,
    all_finite,
    by_time,
    jacobian,
    sample_interior,
    time_derivative,
)

if TYPE_CHECKING:
    from .diffeo import Diffeomorphism

RANK_RTOL = 1e-8


@dataclass(frozen=True)
class SdeModel:
    """``dX = b(X,t) dt + sigma(X,t) dW`` on an open box.

    ``sigma`` maps ``(..., p)`` to ``(..., p, d)``; ``b`` maps to ``(..., p)``.
    ``sigma_jac`` (optional) returns ``(..., p, d, p)`` with the
    differentiation index last. ``region`` narrows the box for models whose
    admissible set is not a box (e.g. images under a diffeomorphism);
    ``region(x, t)`` is batched over ``x`` with a scalar ``t``. ``clip`` is applied to the state before coefficient evaluation in the
    time-stepping baselines (full truncation for square-root diffusions).
    ``h_strat`` is an optional closed form of the Stratonovich drift; when
    absent it is derived from ``b`` on demand.
    """

    name: str
    p: int
    d: int
    r: int
    box: Box
    sigma: Field
    b: Field
    T: float = 1.0
    time_homogeneous: bool = True
    sigma_jac: Optional[Field] = None
    b_jac: Optional[Field] = None
    region: Optional[Callable] = None
    clip: Optional[Callable] = None
    h_strat: Optional[Field] = None
    check_rank: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        if self.box.dim != self.p:
            raise ValueError(f"box has dimension {self.box.dim}, expected p={self.p}")
        if not (1 <= self.r <= min(self.p, self.d)):
            raise ValueError(f"rank r={self.r} must lie in [1, min(p, d)]")
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        if self.check_rank:
            self.verify_rank()

    @property
    def jac_spec(self) -> JacobianSpec:
        return JacobianSpec("analytic") if self.sigma_jac is not None else DEFAULT_JACOBIAN

    def contains(self, x, t=0.0) -> np.ndarray:
        inside = self.box.contains(x)
        if self.region is not None:
            x = np.asarray(x, dtype=float)
            if x.ndim == 1:
                return bool(inside) and bool(np.asarray(self.region(x[None], t))[0])
            flat = x.reshape(-1, x.shape[-1])
            extra = np.asarray(self.region(flat, t), dtype=bool).reshape(x.shape[:-1])
            return inside & extra
        return inside

    def sample(self, n: int, seed: int = 0, margin: float = 0.01):
        t_range = None if self.time_homogeneous else (0.0, self.T)
        return sample_interior(self.box, n, seed=seed, t_range=t_range, margin=margin, region=self.region)

    def dsigma(self, x, t, box: Optional[Box] = None) -> np.ndarray:
        """Spatial derivatives ``[..., i, j, k] = d sigma_ij / d x_k``."""
        return jacobian(self.sigma, x, t, self.jac_spec, box=box, analytic=self.sigma_jac)

    def dsigma_dt(self, x, t) -> np.ndarray:
        if self.time_homogeneous:
            return np.zeros(np.shape(x)[:-1] + (self.p, self.d))
        return time_derivative(self.sigma, x, t)

    def verify_rank(self, n: int = 100, seed: int = 0) -> None:
        x, t = self.sample(n, seed=seed)
        S = np.stack([self.sigma(xi, ti) for xi, ti in zip(x, t)]) if not self.time_homogeneous else self.sigma(x, 0.0)
        sv = np.linalg.svd(np.asarray(S, dtype=float), compute_uv=False)
        ranks = np.sum(sv > RANK_RTOL * sv[:, :1], axis=1)
        if np.any(ranks != self.r):
            k = int(np.argmax(ranks != self.r))
            raise ValueError(
                f"model {self.name!r}: sigma has numerical rank {ranks[k]} at {x[k]}, declared r={self.r}"
            )


@dataclass(frozen=True)
class StratonovichDrift:
    h: Field

    def __call__(self, x, t):
        return self.h(x, t)


def ito_correction(model: SdeModel, x, t, box: Optional[Box] = None) -> np.ndarray:
    """``0.5 * sum_j (grad sigma_j) sigma_j`` evaluated on a batch."""
    S = np.asarray(model.sigma(x, t), dtype=float)
    dS = model.dsigma(x, t, box=box)
    return 0.5 * np.einsum("...ijk,...kj->...i", dS, S)


def ito_to_stratonovich(model: SdeModel) -> StratonovichDrift:
    if model.h_strat is not None:
        return StratonovichDrift(model.h_strat)

    def h(x, t):
        return np.asarray(model.b(x, t), dtype=float) - ito_correction(model, x, t)

    return StratonovichDrift(h)


def stratonovich_to_ito(model: SdeModel, h: Field) -> Field:
    """Itô drift ``b = h + 0.5 sum_j (grad sigma_j) sigma_j``.

    Only ``model.sigma`` (and its Jacobian) is used; ``model.b`` is ignored.
    """

    def b(x, t):
        return np.asarray(h(x, t), dtype=float) + ito_correction(model, x, t)

    return b


def from_stratonovich(name, p, d, r, box, sigma, h, **kwargs) -> SdeModel:
    """Build a model whose drift is specified in Stratonovich form."""
    proto = SdeModel(name, p, d, r, box, sigma, lambda x, t: np.zeros(np.shape(x)), check_rank=False, **kwargs)
    b = stratonovich_to_ito(proto, h)
    return SdeModel(name, p, d, r, box, sigma, b, h_strat=h, **kwargs)


def try_inverse(diffeo, z, t):
    """Batched inverse that flags failures instead of raising."""
    fn = getattr(diffeo, "try_inverse", None)
    if fn is not None:
        return fn(z, t)
    try:
        x = np.asarray(diffeo.inverse(z, t), dtype=float)
    except ExactSdeError:
        x = np.full(np.shape(z), np.nan)
    ok = all_finite(x)
    in_image = getattr(diffeo, "in_image", None)
    if in_image is not None:
        ok = ok & np.asarray(in_image(z, t), dtype=bool)
    return x, ok


def _hessian(diffeo: "Diffeomorphism", x, t) -> np.ndarray:
    if getattr(diffeo, "hessian", None) is not None:
        return np.asarray(diffeo.hessian(x, t), dtype=float)
    return jacobian(diffeo.jac, x, t)  # [..., m, i, k]


def transform_sde(
    model: SdeModel,
    diffeo: "Diffeomorphism",
    n_check: int = 100,
    seed: int = 0,
    name: Optional[str] = None,
) -> SdeModel:
    """Push the SDE forward through ``Lambda_t``.

    The new coefficients live on image coordinates ``z = Lambda_t(x)``::

        sigma_hat = (grad Lambda) sigma pi
        h_hat     = (grad Lambda) h + d_t Lambda
        b_hat     = (grad Lambda) b + d_t Lambda + 0.5 sum_j sum_ik (d_i d_k Lambda) sigma_ij sigma_kj

    all composed with the inverse map. The image region is the set of ``z``
    whose preimage lies in both the model box and the diffeomorphism's
    valid box; the returned box is its sampled bounding box.
    """
    perm = np.asarray(diffeo.perm)
    src_box = _intersect(model.box, diffeo.valid_box)
    t_range = None if (model.time_homogeneous and not diffeo.time_dependent) else (0.0, model.T)
    xs, ts = sample_interior(src_box, n_check, seed=seed, t_range=t_range, margin=0.0)
    J = by_time(diffeo.jac, xs, ts)
    det = np.abs(np.linalg.det(J))
    if np.any(det < 1e-12):
        k = int(np.argmin(det))
        raise SingularJacobian(f"|det grad Lambda| = {det[k]:.3g}", point=(xs[k], ts[k]))

    corners = _box_corners(src_box)
    probe_t = np.linspace(0.0, model.T, 5, endpoint=False) if t_range else [0.0]
    images = []
    for tt in probe_t:
        images.append(diffeo.forward(xs, tt))
        images.append(diffeo.forward(corners, tt))
    images = np.concatenate(images)
    images = images[np.all(np.isfinite(images), axis=1)]
    lo, hi = images.min(axis=0), images.max(axis=0)
    pad = 0.05 * np.maximum(hi - lo, 1e-3)
    out_box = Box(lo - pad, hi + pad)

    h = ito_to_stratonovich(model).h

    def sigma_hat(z, t):
        x = diffeo.inverse(z, t)
        return np.einsum("...ik,...kj->...ij", diffeo.jac(x, t), np.asarray(model.sigma(x, t))[..., perm])

    def h_hat(z, t):
        x = diffeo.inverse(z, t)
        return np.einsum("...ik,...k->...i", diffeo.jac(x, t), h(x, t)) + diffeo.dt(x, t)

    def b_hat(z, t):
        x = diffeo.inverse(z, t)
        S = np.asarray(model.sigma(x, t))
        H = _hessian(diffeo, x, t)
        second = 0.5 * np.einsum("...mik,...ij,...kj->...m", H, S, S)
        return np.einsum("...ik,...k->...i", diffeo.jac(x, t), model.b(x, t)) + diffeo.dt(x, t) + second

    def region(z, t):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        x, ok = try_inverse(diffeo, z, t)
        ok = ok & np.all(np.isfinite(x), axis=-1)
        if np.any(ok):
            ok[ok] = model.contains(x[ok], t) & diffeo.valid_box.contains(x[ok])
        return ok

    out = SdeModel(
        name or f"{model.name}@chart",
        model.p,
        model.d,
        model.r,
        out_box,
        sigma_hat,
        b_hat,
        T=model.T,
        time_homogeneous=t_range is None,
        region=region,
        h_strat=h_hat,
        check_rank=False,
    )
    return out


def _intersect(a: Box, b: Box) -> Box:
    return Box(np.maximum(a.lower, b.lower), np.minimum(a.upper, b.upper))


def _box_corners(box: Box, shrink: float = 0.01) -> np.ndarray:
    inner = box.shrink(shrink)
    p = box.dim
    bits = (np.arange(2**p)[:, None] >> np.arange(p)) & 1
    return np.where(bits == 1, inner.upper, inner.lower)
