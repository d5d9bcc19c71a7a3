import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pagoda import nd
from pagoda.cfg import (
    CAPTION_PRIOR,
    RECAPTION_PRIOR,
    EstimatorConfig,
    GaussianCFG,
    OmegaEstimator,
    OmegaPrior,
    PosteriorEstimator,
    TabularCFG,
    bayes_identity_gap,
    cfg_adv_loss,
    guided_ddim_sampler,
    guided_gaussian,
    guided_invert,
    guided_score,
    omega_posterior,
    tabular_least_squares,
    train_omega_estimator,
)
from pagoda.diffusion import AnalyticScore, ForwardProcess, GaussianData, TimeGrid, ddim_invert
from pagoda.distill import Discriminator, Generator, adv_loss

VE = ForwardProcess("VE", math.sqrt(3.0))


def _tab(prior="discrete:1,2,3"):
    return TabularCFG([-1.5, -0.5, 0.5, 1.5], [[0.1, 0.2, 0.3, 0.4], [0.4, 0.3, 0.2, 0.1]], OmegaPrior.parse(prior))


def _teacher():
    return AnalyticScore(VE, GaussianData(0.0, 1.0), classes={0: GaussianData(1.0, 1.0), 1: GaussianData(-1.0, 1.0)})


# -- guided targets -------------------------------------------------------------------
def test_guided_gaussian_examples():
    assert guided_gaussian((1.0, 1.0), (0.0, 1.0), 2.0) == (2.0, 1.0)
    assert guided_gaussian((1.5, 0.3), (-2.0, 4.0), 1.0) == pytest.approx((1.5, 0.3), abs=0)
    assert guided_gaussian((1.5, 0.3), (-2.0, 4.0), 0.0) == pytest.approx((-2.0, 4.0), abs=0)
    with pytest.raises(ValueError, match="normalizable"):
        guided_gaussian((0.0, 4.0), (0.0, 1.0), 2.0)


@settings(max_examples=50, deadline=None)
@given(
    st.floats(-3, 3), st.floats(0.2, 3), st.floats(-3, 3), st.floats(0.2, 3), st.floats(0, 1)
)
def test_guided_gaussian_is_normalized_product(mc, vc, m0, v0, w):
    # the product of powers has log-density quadratic with the returned mean/var
    m, v = guided_gaussian((mc, vc), (m0, v0), w)
    xs = np.array([-1.0, 0.0, 1.0])
    logp = w * (-0.5 * (xs - mc) ** 2 / vc) + (1 - w) * (-0.5 * (xs - m0) ** 2 / v0)
    ref = -0.5 * (xs - m) ** 2 / v
    d = logp - ref
    assert np.allclose(d, d[0], atol=1e-9)


def test_guided_score_endpoints_and_linearity():
    T = _teacher()
    x = np.linspace(-2, 2, 5)[:, None]
    c = np.zeros(5, int)
    np.testing.assert_array_equal(guided_score(T, T, 1.0, x, c, 0.7), T(x, 0.7, c))
    np.testing.assert_array_equal(guided_score(T, T, 0.0, x, c, 0.7), T(x, 0.7, None))
    s = [guided_score(T, T, w, x, c, 0.7) for w in (0.5, 2.0, 3.5)]
    np.testing.assert_allclose(s[2] - s[1], s[1] - s[0], atol=1e-12)


def test_guided_invert_two_path_oracle():
    g = TimeGrid.for_process(VE, 80)
    x = np.linspace(-2, 4, 9)[:, None]
    z1 = guided_invert(_teacher(), x, np.zeros(9, int), 2.0, g)
    m, v = guided_gaussian((1.0, 1.0), (0.0, 1.0), 2.0)
    z2 = ddim_invert(AnalyticScore(VE, GaussianData(m, v)), x, g)
    assert np.max(np.abs(z1 - z2)) <= 2e-3


def test_guided_invert_endpoints():
    T, g = _teacher(), TimeGrid.for_process(VE, 20)
    x = np.linspace(-1, 1, 4)[:, None]
    c = np.array([0, 1, 0, 1])
    np.testing.assert_array_equal(guided_invert(T, x, c, 1.0, g), ddim_invert(T, x, g, c))
    np.testing.assert_array_equal(guided_invert(T, x, c, 0.0, g), ddim_invert(T, x, g))


# -- posterior ------------------------------------------------------------------------------
def test_posterior_examples():
    inst = GaussianCFG({0: (1.0, 1.0)}, (0.0, 1.0), OmegaPrior.parse("discrete:1,2"))
    np.testing.assert_allclose(omega_posterior(inst, 2.0, 0), [0.3775, 0.6225], atol=1e-4)
    point = GaussianCFG({0: (1.0, 1.0)}, (0.0, 1.0), OmegaPrior("point", (1.0,)))
    np.testing.assert_array_equal(omega_posterior(point, 0.3, 0), [1.0])
    # cond == marg: every omega gives the same guided density
    sym = GaussianCFG({0: (0.5, 1.0)}, (0.5, 1.0), OmegaPrior.parse("discrete:1,3"))
    np.testing.assert_allclose(omega_posterior(sym, -0.7, 0), [0.5, 0.5], atol=1e-15)


def test_posterior_rejects_zero_likelihood():
    inst = TabularCFG([0.0, 1.0], [[1.0, 0.0], [1.0, 0.0]], OmegaPrior.parse("discrete:0.5,1"))
    with pytest.raises(ValueError, match="vanishes"):
        omega_posterior(inst, 1.0, 0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.05, 1.0), min_size=6, max_size=6), st.lists(st.floats(0.1, 1.0), min_size=3, max_size=3))
def test_bayes_identity_and_normalization(table, pw):
    prior = OmegaPrior("discrete", (0.5, 1.5, 4.0, *pw))
    inst = TabularCFG([0.0, 1.0, 2.0], [table[:3], table[3:]], prior)
    assert bayes_identity_gap(inst) <= 1e-12
    for c in range(2):
        for x in inst.xs:
            assert abs(omega_posterior(inst, x, c).sum() - 1.0) <= 1e-12


def test_tabular_least_squares_is_posterior_mean():
    inst = _tab()
    np.testing.assert_allclose(tabular_least_squares(inst), inst.posterior_mean_table(), atol=1e-12)


def test_tabular_sampler_frequencies():
    inst = _tab()
    rng = np.random.default_rng(0)
    x = inst.sample(np.ones(40000, int), np.full(40000, 2.0), rng)[:, 0]
    freq = np.array([np.mean(x == v) for v in inst.xs])
    np.testing.assert_allclose(freq, inst.guided[1, 1], atol=0.01)


# -- priors ---------------------------------------------------------------------------------
def test_prior_parsing_and_support():
    assert OmegaPrior.parse("uniform:2,10") == CAPTION_PRIOR
    assert OmegaPrior.parse("truncnorm:2,3,1,10") == RECAPTION_PRIOR
    assert OmegaPrior.parse("point:2").values.tolist() == [2.0]
    rng = np.random.default_rng(0)
    s = RECAPTION_PRIOR.sample(5000, rng)
    assert s.min() >= 1.0 and s.max() <= 10.0
    assert abs(s.mean() - RECAPTION_PRIOR.mean()) < 0.1
    with pytest.raises(ValueError):
        OmegaPrior.parse("uniform:2")
    with pytest.raises(ValueError):
        OmegaPrior.parse("uniform:-1,2")
    with pytest.raises(ValueError):
        OmegaPrior.parse("cauchy:1")
    assert OmegaPrior.parse(CAPTION_PRIOR.to_str()) == CAPTION_PRIOR


# -- estimator ------------------------------------------------------------------------------
def _cells(est, inst):
    return np.array([[est.predict(np.array([[x]]), np.array([c]))[0] for x in inst.xs] for c in range(inst.n_classes)])


def test_estimator_matches_tabular_posterior_mean():
    inst = _tab()
    est, trace = train_omega_estimator(
        inst.sample, inst.prior, lambda n, r: r.integers(2, size=n), EstimatorConfig(steps=2000, batch=512, lr=3e-3),
        np.random.default_rng(0), d=1, n_classes=2, hidden=(32, 32),
    )
    assert np.max(np.abs(_cells(est, inst) - inst.posterior_mean_table())) <= 0.05
    J = inst.joint()
    bayes_risk = float(np.sum(J * (inst.prior.values[:, None, None] - inst.posterior_mean_table()[None]) ** 2))
    assert abs(trace[-1][1] - bayes_risk) < 0.1


def test_estimator_map_mode():
    inst = _tab()
    exact = PosteriorEstimator(inst, "map")
    est, _ = train_omega_estimator(
        inst.sample, inst.prior, lambda n, r: r.integers(2, size=n), EstimatorConfig(steps=1500, batch=512, lr=3e-3),
        np.random.default_rng(0), d=1, n_classes=2, hidden=(32, 32), mode="map",
    )
    ref = np.array([[exact.predict(np.array([x]), c)[0] for x in inst.xs] for c in range(2)])
    post = inst.posterior_table()
    margin = np.sort(post, axis=0)[-1] - np.sort(post, axis=0)[-2]
    clear = margin > 0.05  # cells whose MAP is well separated
    assert np.array_equal(_cells(est, inst)[clear], ref[clear])


def test_estimator_point_prior_with_guided_ddim():
    prior = OmegaPrior("point", (3.0,))
    sampler = guided_ddim_sampler(_teacher(), _teacher(), TimeGrid.for_process(VE, 10))
    est, _ = train_omega_estimator(
        sampler, prior, lambda n, r: r.integers(2, size=n), EstimatorConfig(steps=300, batch=128, lr=3e-3),
        np.random.default_rng(0), d=1, n_classes=2, hidden=(16,),
    )
    rng = np.random.default_rng(9)
    c = rng.integers(2, size=200)
    x = sampler(c, np.full(200, 3.0), rng)
    assert np.max(np.abs(est.predict(x, c) - 3.0)) <= 0.05


def test_estimator_zero_steps_is_untrained():
    inst = _tab()
    ref = OmegaEstimator(1, inst.prior, n_classes=2, rng=np.random.default_rng(5))
    before = ref.params.digest()
    est, trace = train_omega_estimator(inst.sample, inst.prior, None, EstimatorConfig(steps=0), np.random.default_rng(0), est=ref)
    assert est is ref and est.params.digest() == before and trace == []


# -- guided adversarial loss --------------------------------------------------------------
class _ZeroD(nd.Module):
    d = 1

    def forward(self, x, c=None, omega=None):
        return nd.ops.tsum(x * 0.0, axis=1)


def test_cfg_adv_zero_logits():
    inst = _tab()
    G = Generator(1, (8,), n_classes=2, omega_input=True, rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for est in (PosteriorEstimator(inst), PosteriorEstimator(inst, "map")):
        val = cfg_adv_loss(G, _ZeroD(), np.ones((6, 1)), np.zeros(6, int), est, rng.standard_normal((6, 1)), inst.prior, rng)
        assert float(val.data) == pytest.approx(2 * math.log(0.5), abs=1e-12)


def test_cfg_adv_collapses_to_plain_adv_loss():
    point = OmegaPrior("point", (2.0,))
    inst = GaussianCFG({0: (1.0, 1.0)}, (0.0, 1.0), point)
    rng = np.random.default_rng(0)
    G = Generator(1, (8,), n_classes=1, omega_input=True, rng=rng)
    D = Discriminator(1, (8,), n_classes=1, omega_input=True, rng=rng)
    x, z = rng.standard_normal((16, 1)), rng.standard_normal((16, 1))
    c = np.zeros(16, int)
    val = cfg_adv_loss(G, D, x, c, PosteriorEstimator(inst), z, point, rng)
    ref = adv_loss(G, D, x, z, c, c, 2.0)
    assert abs(float(val.data) - float(ref.data)) <= 1e-12


class _IdentityG(nd.Module):
    def forward(self, z, c=None, omega=None):
        return z if isinstance(z, nd.Tensor) else nd.Tensor(z)


class _TableD(nd.Module):
    d = 1

    def __init__(self, logits):
        super().__init__()
        self.logits = logits

    def forward(self, x, c=None, omega=None):
        x = x.data if isinstance(x, nd.Tensor) else x
        return nd.Tensor(np.array([self.logits[(float(a), int(b), round(float(w), 12))] for a, b, w in zip(x[:, 0], c, omega)]))


@pytest.mark.parametrize("mode", ["mean", "map"])
def test_cfg_adv_tabular_brute_force(mode):
    inst = _tab()
    est = PosteriorEstimator(inst, mode)
    C, K = inst.n_classes, len(inst.xs)
    # real triples (x, c, omega_hat(x, c)) weighted by p(x, c)
    pxc = inst.data_joint()
    xr = np.repeat(inst.xs, C)[:, None]
    cr = np.tile(np.arange(C), K)
    wr = np.array([pxc[c, k] for k in range(K) for c in range(C)])
    oh = est.predict(xr, cr)
    # fake triples (x, c, omega) weighted by p(c) pi(omega) p(x|c,omega); G is the identity on z = x
    J = inst.joint()
    idx = [(i, c, k) for i in range(len(inst.prior.values)) for c in range(C) for k in range(K)]
    zf = np.array([[inst.xs[k]] for i, c, k in idx])
    cf = np.array([c for i, c, k in idx])
    of = np.array([inst.prior.values[i] for i, c, k in idx])
    wf = np.array([J[i, c, k] for i, c, k in idx])
    r, q = {}, {}
    for x, c, w, p in zip(xr[:, 0], cr, oh, wr):
        key = (float(x), int(c), round(float(w), 12))
        r[key] = r.get(key, 0.0) + p
    for x, c, w, p in zip(zf[:, 0], cf, of, wf):
        key = (float(x), int(c), round(float(w), 12))
        q[key] = q.get(key, 0.0) + p
    keys = set(r) | set(q)
    logits = {k: float(np.clip(np.log(r.get(k, 0.0) + 1e-300) - np.log(q.get(k, 0.0) + 1e-300), -40, 40)) for k in keys}
    val = cfg_adv_loss(_IdentityG(), _TableD(logits), xr, cr, est, zf, c_fake=cf, omega_fake=of, weights_real=wr, weights_fake=wf)
    # brute-force optimum of the JS-style objective: -2 log 2 + 2 JS(r, q)
    js = 0.0
    for k in keys:
        a, b = r.get(k, 0.0), q.get(k, 0.0)
        m = 0.5 * (a + b)
        js += 0.5 * (a * math.log(a / m) if a > 0 else 0.0) + 0.5 * (b * math.log(b / m) if b > 0 else 0.0)
    assert float(val.data) == pytest.approx(-2 * math.log(2) + 2 * js, abs=1e-12)


def test_cfg_adv_rejects_empty_and_bad_dims():
    inst = _tab()
    rng = np.random.default_rng(0)
    G = Generator(1, (8,), n_classes=2, omega_input=True, rng=rng)
    with pytest.raises(ValueError):
        cfg_adv_loss(G, _ZeroD(), np.ones((0, 1)), np.zeros(0, int), PosteriorEstimator(inst), np.ones((3, 1)), inst.prior, rng)
    with pytest.raises(ValueError):
        cfg_adv_loss(G, _ZeroD(), np.ones((3, 2)), np.zeros(3, int), PosteriorEstimator(inst), np.ones((3, 1)), inst.prior, rng)
