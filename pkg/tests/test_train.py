import numpy as np
import pytest

from indifield.errors import InvalidArgument, NumericalError
from indifield.geom import OrientedPointCloud
from indifield.prep import VectorFieldEstimator
from indifield.siren import SirenField
from indifield.train import (LossWeights, StepBatch, TrainConfig, fused_loss_and_gradient,
                             loss_empty_term, loss_gradient_term, loss_sdf_terms,
                             loss_surface_term, train)
from oracles import fd_theta, rel_err


def tiny(seed=0):
    return SirenField.init(seed, hidden=8, n_layers=3)


def unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class ConstantField:
    """Stand-in with prescribed value and input gradient everywhere."""

    def __init__(self, value, grad):
        self.value, self.grad = value, np.asarray(grad, float)

    def evaluate(self, x, with_grad=False, cotangents=None, chunk=0, dtype=np.float64):
        n = len(np.asarray(x).reshape(-1, 3))
        g = np.tile(self.grad, (n, 1)) if with_grad else None
        return np.full(n, float(self.value)), g, None


def sphere_cloud(n=400, r=0.5, seed=0):
    p = np.random.default_rng(seed).normal(size=(n, 3))
    p = r * p / np.linalg.norm(p, axis=1, keepdims=True)
    return OrientedPointCloud(p, -p / r, np.zeros(n, int))


def shell_empties(n=400, seed=1):
    q = np.random.default_rng(seed).normal(size=(n, 3))
    return 0.75 * q / np.linalg.norm(q, axis=1, keepdims=True)


# individual terms

def test_gradient_term_zero_when_matching():
    f = tiny(1)
    x = np.random.default_rng(1).uniform(-1, 1, (16, 3))
    val, (_, dg) = loss_gradient_term(f, x, f.eval_dual(x).grad)
    assert val == 0 and np.all(dg == 0)
    # the parameter gradient through the dL_dgrad channel vanishes as well
    assert np.all(f.backward_batch(x, None, dg) == 0)


def test_gradient_term_zero_network_unit_targets():
    f = tiny()
    f.set_parameters(np.zeros(f.n_params))
    t = unit(np.random.default_rng(2), 16)
    val, _ = loss_gradient_term(f, np.zeros((16, 3)), t)
    assert val == pytest.approx(1.0, abs=1e-15)


def test_gradient_term_rejects_undefined_targets():
    with pytest.raises(InvalidArgument):
        loss_gradient_term(tiny(), np.zeros((2, 3)), [[0, 0, 1.0], [np.nan, 0, 0]])


def test_gradient_term_fd_16_points():
    f = tiny(3)
    rng = np.random.default_rng(3)
    x, t = rng.uniform(-1, 1, (16, 3)), unit(rng, 16)
    _, (_, dg) = loss_gradient_term(f, x, t)
    got = f.backward_batch(x, None, dg)
    ref = fd_theta(f, lambda m: loss_gradient_term(m, x, t)[0])
    assert rel_err(got, ref) < 1e-4


def test_surface_term_values():
    f = tiny()
    f.set_parameters(np.zeros(f.n_params))
    x = np.random.default_rng(4).uniform(-1, 1, (10, 3))
    assert loss_surface_term(f, x)[0] == 0
    assert loss_surface_term(f, x, centered=False)[0] == 0.25


def test_empty_term_values():
    f = tiny()
    theta = np.zeros(f.n_params)
    f.set_parameters(theta)
    x = np.random.default_rng(5).uniform(-1, 1, (10, 3))
    assert loss_empty_term(f, x)[0] == 0.25
    assert loss_empty_term(f, x, centered=False)[0] == 0
    theta[-1] = -0.5  # output bias: chi == -0.5 everywhere
    f.set_parameters(theta)
    assert loss_empty_term(f, x)[0] == 0


@pytest.mark.parametrize("term", [loss_surface_term, loss_empty_term])
@pytest.mark.parametrize("centered", [True, False])
def test_value_terms_fd(term, centered):
    f = tiny(6)
    x = np.random.default_rng(6).uniform(-1, 1, (16, 3))
    _, (dv, _) = term(f, x, centered)
    got = f.backward_batch(x, dv)
    ref = fd_theta(f, lambda m: term(m, x, centered)[0])
    assert rel_err(got, ref) < 1e-4


# SDF ablation terms

def test_sdf_term_isolation():
    rng = np.random.default_rng(7)
    t = unit(rng, 20)
    g = np.array([0.0, 0.6, 0.8])
    w = LossWeights()
    val, _ = loss_sdf_terms(ConstantField(0.0, g), np.zeros((20, 3)), t, weights=w)
    assert val == pytest.approx(w.normal * np.mean(1 - t @ g), rel=1e-12)


def test_high_offsurface_endpoints():
    w = LossWeights(grad=0, surface=0, normal=0, empty=1)
    t = np.tile([0.0, 0.6, 0.8], (4, 1))
    pts = np.zeros((4, 3))
    at_zero, _ = loss_sdf_terms(ConstantField(0.0, t[0]), pts, t, pts, "sdf_high_offsurface", w)
    assert at_zero == 1.0
    far, _ = loss_sdf_terms(ConstantField(1e3, t[0]), pts, t, pts, "sdf_high_offsurface", w)
    assert far == 0.0
    lit, _ = loss_sdf_terms(ConstantField(0.01, t[0]), pts, t, pts, "sdf_high_offsurface", w,
                            literal_sign=True)
    assert lit == pytest.approx(np.e, rel=1e-12)


def test_sdf_terms_validation():
    with pytest.raises(InvalidArgument):
        loss_sdf_terms(tiny(), np.zeros((2, 3)), np.zeros((2, 3)), mode="indicator")
    with pytest.raises(InvalidArgument):
        loss_sdf_terms(tiny(), np.zeros((2, 3)), np.zeros((2, 3)), mode="sdf_high_offsurface")


@pytest.mark.parametrize("mode", ["sdf", "sdf_high_offsurface"])
def test_sdf_full_gradient_fd(mode):
    f = tiny(8)
    rng = np.random.default_rng(8)
    s, t, q = rng.uniform(-1, 1, (12, 3)), unit(rng, 12), rng.uniform(-1, 1, (10, 3))
    # alpha kept moderate so the exponential is resolved by the finite-difference step
    kw = dict(offsurface=q, mode=mode, alpha=5.0)
    _, (surf, off) = loss_sdf_terms(f, s, t, **kw)
    got = f.backward_batch(s, *surf)
    if off is not None:
        got = got + f.backward_batch(q, *off)
    ref = fd_theta(f, lambda m: loss_sdf_terms(m, s, t, **kw)[0])
    assert rel_err(got, ref) < 1e-4


# fused step

def make_batch(rng, ns=12, nj=9, ne=15):
    s = rng.uniform(-1, 1, (ns, 3))
    j = s[:nj] + 0.05 * rng.uniform(-1, 1, (nj, 3))
    gp = np.concatenate([s, j])
    return StepBatch(gp, unit(rng, len(gp)), ns, rng.uniform(-1, 1, (ne, 3)))


@pytest.mark.parametrize("mode", ["indicator", "indicator_no_empty", "sdf",
                                  "sdf_high_offsurface"])
def test_fused_total_equals_weighted_sum(mode):
    f = tiny(9)
    rng = np.random.default_rng(9)
    cfg = TrainConfig(mode=mode, weights=LossWeights(1.0, 100.0, 100.0), sdf_alpha=5.0, chunk=5)
    b = make_batch(rng)
    total, terms, _ = fused_loss_and_gradient(f, b, cfg, dtype=np.float64)
    w = cfg.weights
    expect = w.grad * terms["grad"] + w.surface * terms["surface"] + w.empty * terms["empty"]
    expect += w.normal * terms.get("normal", 0.0)
    assert total == pytest.approx(expect, rel=1e-9)
    if mode == "indicator_no_empty":
        assert terms["empty"] == 0.0


def test_fused_gradient_equals_sum_of_separate_terms():
    f = tiny(10)
    rng = np.random.default_rng(10)
    b = make_batch(rng)
    cfg = TrainConfig(chunk=4)
    w = cfg.weights
    total, terms, got = fused_loss_and_gradient(f, b, cfg, dtype=np.float64)
    lg, (_, dg) = loss_gradient_term(f, b.grad_points, b.grad_targets)
    ls, (dvs, _) = loss_surface_term(f, b.grad_points[:b.n_surface])
    le, (dve, _) = loss_empty_term(f, b.empty_points)
    assert terms["grad"] == pytest.approx(lg, rel=1e-12)
    assert terms["surface"] == pytest.approx(ls, rel=1e-12)
    assert terms["empty"] == pytest.approx(le, rel=1e-12)
    ref = (w.grad * f.backward_batch(b.grad_points, None, dg)
           + w.surface * f.backward_batch(b.grad_points[:b.n_surface], dvs)
           + w.empty * f.backward_batch(b.empty_points, dve))
    assert rel_err(got, ref) < 1e-6


def test_fused_gradient_fd():
    f = tiny(11)
    rng = np.random.default_rng(11)
    b = make_batch(rng)
    cfg = TrainConfig()
    _, _, got = fused_loss_and_gradient(f, b, cfg, dtype=np.float64)
    ref = fd_theta(f, lambda m: fused_loss_and_gradient(m, b, cfg, dtype=np.float64)[0])
    assert rel_err(got, ref) < 1e-4


def test_fused_rejects_missing_surface():
    b = StepBatch(np.zeros((0, 3)), np.zeros((0, 3)), 0, np.zeros((1, 3)))
    with pytest.raises(InvalidArgument):
        fused_loss_and_gradient(tiny(), b, TrainConfig())


# training loop

def small_config(**kw):
    base = dict(epochs=3, batch_size=128, hidden=16, layers=3, lr=1e-3, seed=4)
    base.update(kw)
    return TrainConfig(**base)


def test_train_deterministic():
    cloud = sphere_cloud()
    est = VectorFieldEstimator.from_cloud(cloud, k=8)
    empt = shell_empties()
    f1, r1 = train(cloud, None, empt, est, small_config())
    f2, r2 = train(cloud, None, empt, est, small_config())
    assert f1.parameters().tobytes() == f2.parameters().tobytes()
    assert [(r.grad, r.surface, r.empty, r.total) for r in r1] == \
        [(r.grad, r.surface, r.empty, r.total) for r in r2]
    assert len(r1) == 3 and r1[0].steps == 4
    f3, _ = train(cloud, None, empt, est, small_config(seed=5))
    assert not np.array_equal(f1.parameters(), f3.parameters())


def test_reports_totals_are_weighted_sums():
    cloud = sphere_cloud()
    est = VectorFieldEstimator.from_cloud(cloud, k=8)
    _, reps = train(cloud, None, shell_empties(), est, small_config())
    for r in reps:
        assert r.total == pytest.approx(r.grad + 100 * r.surface + 100 * r.empty, rel=1e-9)


def test_no_empty_mode_ignores_empties_and_weight():
    cloud = sphere_cloud()
    est = VectorFieldEstimator.from_cloud(cloud, k=8)
    cfg = small_config(mode="indicator_no_empty")
    fa, ra = train(cloud, None, shell_empties(), est, cfg)
    cfg_b = small_config(mode="indicator_no_empty", weights=LossWeights(empty=7.0))
    fb, rb = train(cloud, None, None, est, cfg_b)
    assert fa.parameters().tobytes() == fb.parameters().tobytes()
    assert all(r.empty == 0 for r in ra + rb)


def test_indicator_mode_requires_empties():
    cloud = sphere_cloud()
    est = VectorFieldEstimator.from_cloud(cloud, k=8)
    with pytest.raises(InvalidArgument):
        train(cloud, None, None, est, small_config())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_last_good_state():
    cloud = sphere_cloud()
    est = VectorFieldEstimator.from_cloud(cloud, k=8)
    start = SirenField.init(0, 16, 3)
    theta0 = start.parameters()
    cfg = small_config(weights=LossWeights(surface=1e308, empty=1e308))
    with pytest.raises(NumericalError) as exc:
        train(cloud, None, shell_empties(), est, cfg, field_=start)
    assert exc.value.reports == []
    assert np.array_equal(exc.value.field.parameters(), theta0)


def test_callback_sees_every_epoch():
    cloud = sphere_cloud()
    est = VectorFieldEstimator.from_cloud(cloud, k=8)
    seen = []
    train(cloud, None, shell_empties(), est, small_config(),
          callback=lambda rep, fld: seen.append((rep.epoch, fld.n_params)))
    assert [e for e, _ in seen] == [0, 1, 2]


def test_config_validation():
    with pytest.raises(InvalidArgument):
        TrainConfig(mode="poisson")
    with pytest.raises(InvalidArgument):
        TrainConfig(batch_size=0)
    with pytest.raises(InvalidArgument):
        LossWeights(grad=-1)
    assert TrainConfig(weights={"empty": 50.0}).weights.empty == 50.0
