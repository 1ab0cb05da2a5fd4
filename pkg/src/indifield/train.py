"""Loss assembly and the optimisation loop.

Modes
-----
``indicator``            gradient + surface + empty-space terms (zero-centered: -0.5 out, +0.5 in)
``indicator_no_empty``   gradient + surface terms only
``sdf``                  distance-field ablation: surface, Eikonal and normal-alignment terms
``sdf_high_offsurface``  ``sdf`` plus a penalty pushing off-surface values away from zero

The SDF modes fit the *negated* signed distance (positive inside) so that the
gradient aligns with the inward normals and extracted meshes wind the same way
as in the indicator modes.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericalError
from .prep import VectorFieldEstimator
from .siren import AdamState, SirenField, adam_step

log = logging.getLogger(__name__)

MODES = ("indicator", "indicator_no_empty", "sdf", "sdf_high_offsurface")
SDF_MODES = ("sdf", "sdf_high_offsurface")


@dataclass
class LossWeights:
    grad: float = 1.0
    surface: float = 100.0
    empty: float = 100.0
    normal: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise InvalidArgument(f"loss weight {k} must be finite and non-negative")


@dataclass
class TrainConfig:
    mode: str = "indicator"
    epochs: int = 40
    batch_size: int = 100_000
    lr: float = 1e-4
    seed: int = 0
    near_surface_radius: float = 0.05
    weights: LossWeights = field(default_factory=LossWeights)
    centered: bool = True
    jitter: bool = True
    hidden: int = 256
    layers: int = 5
    omega0: float = 30.0
    sdf_alpha: float = 100.0
    sdf_literal_sign: bool = False
    compute_dtype: str = "float32"
    chunk: int = 8192

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.mode not in MODES:
            raise InvalidArgument(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidArgument("batch size and epochs must be >= 1")

    @property
    def uses_empty(self) -> bool:
        return self.mode in ("indicator", "sdf_high_offsurface")

    @property
    def surface_level(self) -> float:
        return 0.0 if self.centered or self.mode in SDF_MODES else 0.5

    @property
    def empty_level(self) -> float:
        return -0.5 if self.centered else 0.0


@dataclass
class LossReport:
    epoch: int
    grad: float
    surface: float
    empty: float
    total: float
    wall_time: float
    steps: int = 0
    normal: float = 0.0


# pointwise loss pieces ------------------------------------------------------
# each returns (mean loss, cotangent w.r.t. the per-point output) for batch size n

def _sq_to_target(v, target, n):
    r = v - target
    return float(np.sum(r * r, dtype=np.float64)) / n, 2.0 * r / n


def _grad_match(g, targets, n):
    r = g - targets
    return float(np.sum(r * r, dtype=np.float64)) / n, 2.0 * r / n


def _eikonal(g, n):
    norm = np.linalg.norm(g, axis=1)
    r = norm - 1.0
    safe = np.where(norm > 0, norm, 1.0)
    return float(np.sum(r * r, dtype=np.float64)) / n, (2.0 * r / safe)[:, None] * g / n


def _alignment(g, targets, n):
    dots = np.sum(g * targets, axis=1)
    return float(np.sum(1.0 - dots, dtype=np.float64)) / n, -targets / n


def _offsurface(v, alpha, literal, n):
    sign = 1.0 if literal else -1.0
    e = np.exp(sign * alpha * np.abs(v))
    return float(np.sum(e, dtype=np.float64)) / n, sign * alpha * np.sign(v) * e / n


# per-term operations ----------------------------------------------------------

def loss_gradient_term(field_: SirenField, points, targets, dtype=np.float64):
    """Mean ``||grad chi(p) - V(p)||^2``; returns ``(value, (None, dL_dgrad))``."""
    targets = np.asarray(targets, np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(targets)) or len(targets) != len(np.asarray(points).reshape(-1, 3)):
        raise InvalidArgument("gradient targets must be defined for every point")
    _, g, _ = field_.evaluate(points, with_grad=True, dtype=dtype)
    val, dg = _grad_match(g.astype(np.float64), targets, len(targets))
    return val, (None, dg)


def loss_surface_term(field_: SirenField, points, centered: bool = True, dtype=np.float64):
    """Mean ``(chi(p) - c)^2`` with ``c = 0`` (centered) or ``0.5``."""
    v, _, _ = field_.evaluate(points, dtype=dtype)
    val, dv = _sq_to_target(v.astype(np.float64), 0.0 if centered else 0.5, len(v))
    return val, (dv, None)


def loss_empty_term(field_: SirenField, points, centered: bool = True, dtype=np.float64):
    """Mean ``(chi(q) - e)^2`` with ``e = -0.5`` (centered) or ``0``."""
    v, _, _ = field_.evaluate(points, dtype=dtype)
    val, dv = _sq_to_target(v.astype(np.float64), -0.5 if centered else 0.0, len(v))
    return val, (dv, None)


def loss_sdf_terms(field_: SirenField, surface, targets, offsurface=None, mode: str = "sdf",
                   weights: LossWeights | None = None, alpha: float = 100.0,
                   literal_sign: bool = False, dtype=np.float64):
    """SDF ablation loss.

    Returns ``(value, (surface_cotangents, offsurface_cotangents))`` where the
    first pair is ``(dL_dvalue, dL_dgrad)`` on ``surface`` and the second is
    ``(dL_dvalue, None)`` on ``offsurface`` (``None`` in plain ``sdf`` mode).
    """
    if mode not in SDF_MODES:
        raise InvalidArgument(f"loss_sdf_terms needs an SDF mode, got {mode!r}")
    w = weights or LossWeights()
    targets = np.asarray(targets, np.float64).reshape(-1, 3)
    v, g, _ = field_.evaluate(surface, with_grad=True, dtype=dtype)
    v, g = v.astype(np.float64), g.astype(np.float64)
    n = len(v)
    ls, dv = _sq_to_target(v, 0.0, n)
    le, dg_e = _eikonal(g, n)
    ln, dg_n = _alignment(g, targets, n)
    total = w.surface * ls + w.grad * le + w.normal * ln
    surf = (w.surface * dv, w.grad * dg_e + w.normal * dg_n)
    off = None
    if mode == "sdf_high_offsurface":
        if offsurface is None or len(offsurface) == 0:
            raise InvalidArgument("sdf_high_offsurface needs off-surface points")
        vo, _, _ = field_.evaluate(offsurface, dtype=dtype)
        lo, dvo = _offsurface(vo.astype(np.float64), alpha, literal_sign, len(vo))
        total += w.empty * lo
        off = (w.empty * dvo, None)
    return total, (surf, off)


# fused step -------------------------------------------------------------------

@dataclass
class StepBatch:
    """One optimisation step's inputs (normalized coordinates).

    ``grad_points``/``grad_targets`` carry the gradient-constraint set; its first
    ``n_surface`` rows are the surface batch itself.
    """

    grad_points: np.ndarray
    grad_targets: np.ndarray
    n_surface: int
    empty_points: np.ndarray


def fused_loss_and_gradient(field_: SirenField, batch: StepBatch, config: TrainConfig,
                            dtype=None):
    """Total loss, per-term values and one fused parameter gradient."""
    dtype = np.dtype(dtype or config.compute_dtype)
    w = config.weights
    sdf = config.mode in SDF_MODES
    ng = len(batch.grad_points)
    ns = batch.n_surface
    ne = len(batch.empty_points)
    if ns < 1 or ng < ns:
        raise InvalidArgument("batch needs surface points")
    sums = {"grad": 0.0, "surface": 0.0, "empty": 0.0}
    targets = batch.grad_targets

    def dual_cot(sl, v, g):
        v = v.astype(np.float64)
        g = g.astype(np.float64)
        t = targets[sl]
        rows = np.arange(sl.start, sl.stop)
        surf = rows < ns
        dv = np.zeros(len(v))
        lv, d = _sq_to_target(v[surf], config.surface_level, ns)
        sums["surface"] += lv * ns
        dv[surf] = w.surface * d
        if sdf:
            le, dge = _eikonal(g, ng)
            ln, dgn = _alignment(g, t, ng)
            sums["grad"] += le * ng
            sums["normal"] = sums.get("normal", 0.0) + ln * ng
            dg = w.grad * dge + w.normal * dgn
        else:
            lg, d = _grad_match(g, t, ng)
            sums["grad"] += lg * ng
            dg = w.grad * d
        return dv, dg

    _, _, theta_grad = field_.evaluate(batch.grad_points, with_grad=True, cotangents=dual_cot,
                                       chunk=config.chunk, dtype=dtype)
    terms = {"grad": sums["grad"] / ng, "surface": sums["surface"] / ns, "empty": 0.0}
    total = w.grad * terms["grad"] + w.surface * terms["surface"]
    if sdf:
        terms["normal"] = sums["normal"] / ng
        total += w.normal * terms["normal"]

    if config.uses_empty and ne:
        def empty_cot(sl, v, g):
            v = v.astype(np.float64)
            if sdf:
                l, d = _offsurface(v, config.sdf_alpha, config.sdf_literal_sign, ne)
            else:
                l, d = _sq_to_target(v, config.empty_level, ne)
            sums["empty"] += l * ne
            return w.empty * d, None

        _, _, eg = field_.evaluate(batch.empty_points, cotangents=empty_cot,
                                   chunk=config.chunk, dtype=dtype)
        theta_grad += eg
        terms["empty"] = sums["empty"] / ne
        total += w.empty * terms["empty"]
    return total, terms, theta_grad


def _ball_offsets(rng, n, radius):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * (radius * rng.random(n) ** (1.0 / 3.0))[:, None]


def _cycled(perm, step, size):
    return perm[np.arange(step * size, (step + 1) * size) % len(perm)]


def train(cloud, sensors, empties, estimator: VectorFieldEstimator, config: TrainConfig,
          field_: SirenField | None = None, callback=None):
    """Optimise a field on normalized inputs.

    Each epoch shuffles both streams with an epoch-seeded generator and makes
    one pass over the larger stream, cycling the smaller.  Returns
    ``(field, reports)``; raises :class:`NumericalError` (with ``field`` and
    ``reports`` attributes holding the last good state) on a non-finite loss.
    """
    surface = np.asarray(cloud.points, np.float64)
    if len(surface) == 0:
        raise InvalidArgument("training needs surface points")
    empty = np.zeros((0, 3)) if empties is None else np.asarray(
        getattr(empties, "points", empties), np.float64).reshape(-1, 3)
    if config.uses_empty and len(empty) == 0:
        raise InvalidArgument(f"mode {config.mode!r} needs empty-space samples")
    if not config.uses_empty:
        empty = np.zeros((0, 3))

    surf_targets, ok = estimator.query(surface)
    if not ok.all():
        raise InvalidArgument("gradient field undefined at some surface points")

    if field_ is None:
        field_ = SirenField.init(config.seed, config.hidden, config.layers, omega0=config.omega0)
    theta = field_.parameters()
    adam = AdamState.zeros(field_.n_params, config.lr)
    B = config.batch_size
    bs, be = min(B, len(surface)), min(B, len(empty)) if len(empty) else 0
    steps = int(np.ceil(max(len(surface), len(empty)) / B))
    reports = []
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        perm_s = rng.permutation(len(surface))
        perm_e = rng.permutation(len(empty)) if len(empty) else None
        acc = np.zeros(5)
        for step in range(steps):
            si = _cycled(perm_s, step, bs)
            sp, st = surface[si], surf_targets[si]
            gp, gt = sp, st
            if config.jitter:
                jp = sp + _ball_offsets(rng, len(sp), config.near_surface_radius)
                jt, jok = estimator.query(jp)
                gp = np.concatenate([sp, jp[jok]])
                gt = np.concatenate([st, jt[jok]])
            ep = empty[_cycled(perm_e, step, be)] if be else np.zeros((0, 3))
            batch = StepBatch(gp, gt, len(sp), ep)
            total, terms, grad = fused_loss_and_gradient(field_, batch, config)
            if not (np.isfinite(total) and np.all(np.isfinite(grad))):
                field_.set_parameters(theta)
                err = NumericalError(f"non-finite loss at epoch {epoch} step {step}")
                err.field, err.reports = field_, reports
                raise err
            theta = adam_step(adam, theta, grad)
            field_.set_parameters(theta)
            acc += [terms["grad"], terms["surface"], terms["empty"], terms.get("normal", 0.0), total]
        acc /= steps
        rep = LossReport(epoch=epoch, grad=acc[0], surface=acc[1], empty=acc[2], normal=acc[3],
                         total=acc[4], wall_time=time.perf_counter() - t0, steps=steps)
        reports.append(rep)
        log.info("epoch=%d Lg=%.6g Ls=%.6g Le=%.6g L=%.6g t=%.1f", epoch, rep.grad,
                 rep.surface, rep.empty, rep.total, rep.wall_time)
        if callback is not None:
            callback(rep, field_)
    return field_, reports
