import json

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from meshgan.evaluation import (
    GaussianFit,
    Generator,
    MetricReport,
    compose_identity_expression,
    fid_score,
    frechet_distance,
    generalisation,
    invert_latent,
    mesh_features,
    mix_latent,
    path_lipschitz,
    specificity,
    taubin_smooth,
)
from meshgan.laplacian import eigendecomposition, spectral_operator, uniform_laplacian
from meshgan.models import ModelConfig, ModelParams, SignalCoder, init_params
from meshgan.synthdata import SynthConfig, generate_dataset
from meshgan.training import TrainConfig, train_autoencoder

from conftest import grid_mesh

CFG = ModelConfig(widths=(4, 4, 6), K=3, latent_dim=4)
seeds = st.integers(0, 2**31 - 1)


@pytest.fixture(scope="module")
def data():
    ds = generate_dataset(SynthConfig(template_level=2, n_identities=60, seed=1))
    return ds.template, *ds.split("identity")


@pytest.fixture(scope="module")
def random_generator(small_hierarchy, data):
    template, train, _ = data
    p = init_params(CFG, small_hierarchy, seed=4, parts=("decoder",))
    return Generator(p, small_hierarchy, SignalCoder.fit(train))


@pytest.fixture(scope="module")
def basis(small_hierarchy):
    op = small_hierarchy.spectral_ops[0]
    return eigendecomposition(op.W, op.mass, k=16)


def random_fit(rng, d):
    M = rng.standard_normal((d, d))
    return GaussianFit(rng.standard_normal(d), M @ M.T / d)


# ---- Frechet distance


def test_frechet_closed_forms():
    d = np.array([1.0, -2.0, 0.5])
    a = GaussianFit(np.zeros(3), np.eye(3))
    assert frechet_distance(a, a) <= 1e-8
    assert frechet_distance(a, GaussianFit(d, np.eye(3))) == pytest.approx(d @ d, abs=1e-8)
    four = GaussianFit(np.zeros(2), 4 * np.eye(2))
    assert frechet_distance(four, GaussianFit(np.zeros(2), np.eye(2))) == pytest.approx(2.0, abs=1e-8)


def test_frechet_against_scipy_sqrtm():
    from scipy.linalg import sqrtm

    rng = np.random.default_rng(0)
    a, b = random_fit(rng, 5), random_fit(rng, 5)
    ref = np.sum((a.mu - b.mu) ** 2) + np.trace(a.sigma + b.sigma - 2 * sqrtm(a.sigma @ b.sigma).real)
    assert frechet_distance(a, b) == pytest.approx(ref, rel=1e-8)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 6))
def test_frechet_symmetric_non_negative(seed, d):
    rng = np.random.default_rng(seed)
    a, b = random_fit(rng, d), random_fit(rng, d)
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= 0.0
    assert ab == pytest.approx(ba, rel=1e-7, abs=1e-9)
    assert frechet_distance(a, a) <= 1e-8 * (1 + np.trace(a.sigma))


def test_frechet_precise_for_rank_deficient_covariance():
    # six-dimensional data in 48 features at a large scale; the cross term must cancel to rounding level
    rng = np.random.default_rng(0)
    X = rng.standard_normal((300, 6)) @ rng.standard_normal((6, 48)) * 300.0
    fit = GaussianFit.fit(X)
    assert frechet_distance(fit, fit) <= 1e-12 * np.trace(fit.sigma)
    shifted = GaussianFit(fit.mu + 1.0, fit.sigma)
    assert frechet_distance(fit, shifted) == pytest.approx(48.0, rel=1e-6)


def test_frechet_dimension_mismatch():
    with pytest.raises(ValueError):
        frechet_distance(GaussianFit(np.zeros(2), np.eye(2)), GaussianFit(np.zeros(3), np.eye(3)))


def test_gaussian_fit_loading_and_symmetry():
    fit = GaussianFit.fit(np.random.default_rng(0).standard_normal((3, 5)))
    assert np.allclose(fit.sigma, fit.sigma.T, atol=1e-10)
    assert np.linalg.eigvalsh(fit.sigma).min() >= 1e-7
    single = GaussianFit.fit(np.ones((1, 4)))
    np.testing.assert_allclose(single.sigma, 1e-6 * np.eye(4))
    samples = GaussianFit(np.array([1.0, 2.0]), np.diag([4.0, 0.25])).sample(np.random.default_rng(0), 20000)
    np.testing.assert_allclose(samples.std(axis=0), [2.0, 0.5], rtol=0.03)


# ---- spectral features and FID


@settings(max_examples=10, deadline=None)
@given(seeds)
def test_self_fid_is_zero(seed):
    from meshgan.synthdata import make_template

    t = make_template(2)
    op = spectral_operator(t)
    b = eigendecomposition(op.W, op.mass, k=16)
    x = t.vertices + np.random.default_rng(seed).normal(0, 2.0, (40, 162, 3))
    assert fid_score(x, x, b, t) <= 1e-8


def test_features_zero_linear_and_localized(data, basis):
    template, train, _ = data
    assert not mesh_features(template.vertices, basis, template).any()
    rng = np.random.default_rng(0)
    d1, d2 = rng.standard_normal((2, 162, 3))
    t = template.vertices
    f = lambda d: mesh_features(t + d, basis, template)  # noqa: E731
    np.testing.assert_allclose(f(2 * d1 - 3 * d2), 2 * f(d1) - 3 * f(d2), atol=1e-9)
    assert f(d1).shape == (48,)
    assert mesh_features(train[:5], basis, template).shape == (5, 48)
    # a single smooth bump along the normal around one vertex
    dist = np.linalg.norm(t - t[0], axis=1)
    bump = np.exp(-((dist / 15.0) ** 2))[:, None] * t / np.linalg.norm(t, axis=1, keepdims=True)
    assert np.linalg.norm(f(bump)) > 0
    with pytest.raises(ValueError):
        mesh_features(t, basis, template, m=17)


def test_fid_of_translated_set(data, basis):
    # a rigid shift only moves the constant mode, whose area-normalized coefficient is the shift itself
    template, train, _ = data
    t = np.array([3.0, -1.0, 0.5])
    assert fid_score(train, train + t, basis, template) == pytest.approx(t @ t, rel=1e-6)


# ---- latent tools


def test_mix_latent_cases():
    z1, z2 = np.array([1.0, -1.0, 0.5]), np.array([0.0, 2.0, -0.5])
    assert np.array_equal(mix_latent(z1, z2, 0.0), z1)
    assert np.array_equal(mix_latent(z1, z2, 1.0), z2)
    np.testing.assert_allclose(mix_latent(z1, z2, 0.5), (z1 + z2) / 2)
    np.testing.assert_array_equal(mix_latent(np.zeros(3), z2, 2.0), 2 * z2)
    with pytest.raises(ValueError):
        mix_latent(z1, np.zeros(2), 0.5)


@settings(max_examples=50)
@given(seeds, st.floats(-2, 3))
def test_mix_latent_swap_symmetry(seed, f):
    z1, z2 = np.random.default_rng(seed).uniform(-1, 1, (2, 6))
    np.testing.assert_allclose(mix_latent(z1, z2, f), mix_latent(z2, z1, 1 - f), atol=1e-12)


def test_compose_identity_expression(data):
    template, train, _ = data
    rng = np.random.default_rng(0)
    t = template.vertices
    ident, expr = train[0], t + rng.normal(0, 1.0, t.shape)
    np.testing.assert_allclose(compose_identity_expression(ident, t, t), ident, atol=1e-12)
    np.testing.assert_allclose(compose_identity_expression(t, expr, t), expr, atol=1e-12)
    doubled = compose_identity_expression(ident, t + 2 * (expr - t), t)
    np.testing.assert_allclose(doubled - ident, 2 * (compose_identity_expression(ident, expr, t) - ident),
                               atol=1e-12)
    as_mesh = compose_identity_expression(template.with_vertices(ident), expr, template)
    np.testing.assert_allclose(as_mesh.vertices, ident + expr - t)
    with pytest.raises(ValueError):
        compose_identity_expression(ident, expr[:10], t)


def test_taubin_planar_interior_fixed():
    # boundary motion travels one ring per half-step, so look beyond 20 rings
    m = grid_mesh(50, size=50.0)
    out = taubin_smooth(m.vertices, m)
    interior = (np.abs(m.vertices[:, :2] - 25.0) < 4.5).all(axis=1)
    assert interior.sum() == 81
    np.testing.assert_allclose(out[interior], m.vertices[interior], atol=1e-12)
    np.testing.assert_array_equal(taubin_smooth(m.vertices, m, iterations=0), m.vertices)


def test_taubin_reduces_noise(data):
    template, _, _ = data
    op = spectral_operator(template)
    noisy = template.vertices + np.random.default_rng(0).normal(0, 1.0, template.vertices.shape)
    energy = lambda x: np.linalg.norm(op.apply_rescaled(x) + x)  # noqa: E731  Laplacian term of the rescaled operator
    smoothed = taubin_smooth(noisy, template)
    assert energy(smoothed) < energy(noisy)
    batched = taubin_smooth(np.stack([noisy, noisy]), uniform_laplacian(template))
    np.testing.assert_allclose(batched[1], smoothed, atol=1e-12)


def test_metric_report_consistency():
    r = MetricReport.from_samples([1.0, 2.0, 4.0], metric="x", seed=3)
    assert r.mean == pytest.approx(7 / 3, abs=1e-9) and r.std == pytest.approx(np.std([1, 2, 4]), abs=1e-9)
    assert json.loads(r.to_json())["metadata"] == {"metric": "x", "seed": 3}
    assert MetricReport.from_samples([5.0]).std == 0.0
    with pytest.raises(ValueError):
        MetricReport.from_samples([])


# ---- inversion and metrics on a small generator


def test_self_inversion_and_box(random_generator):
    rng = np.random.default_rng(3)
    z0 = rng.uniform(-1, 1, (3, 4))
    x = random_generator.decode(z0)
    inv = invert_latent(x, random_generator, restarts=3, iterations=300)
    assert np.all(np.abs(inv.z) <= 1.0)
    assert inv.residual.max() <= 0.05
    single = invert_latent(x[0], random_generator, restarts=3, iterations=300)
    assert single.z.shape == (4,) and single.residual == pytest.approx(inv.residual[0], abs=1e-9)


def test_box_projection_holds_for_out_of_range_target(random_generator):
    far = random_generator.decode(np.full((1, 4), 3.0))
    inv = invert_latent(far, random_generator, restarts=2, iterations=50)
    assert np.all(np.abs(inv.z) <= 1.0)
    free = invert_latent(far, random_generator, restarts=2, iterations=50, project=False)
    assert free.residual[0] <= inv.residual[0] + 1e-9


def test_restarts_monotone(random_generator, data):
    _, _, test = data
    one = invert_latent(test[:4], random_generator, restarts=1, iterations=40, seed=5)
    five = invert_latent(test[:4], random_generator, restarts=5, iterations=40, seed=5)
    assert np.all(five.residual <= one.residual + 1e-12)


def test_generalisation_order_invariant(random_generator, data):
    _, _, test = data
    perm = np.random.default_rng(0).permutation(len(test))
    a = generalisation(test, random_generator, restarts=2, iterations=30)
    b = generalisation(test[perm], random_generator, restarts=2, iterations=30)
    np.testing.assert_allclose(np.array(b.per_sample), np.array(a.per_sample)[perm], rtol=1e-9)
    assert a.mean == pytest.approx(b.mean, rel=1e-9)
    assert generalisation(test[:1], random_generator, restarts=1, iterations=5).std == 0.0


def test_specificity_order_invariant_and_untrained_scale(random_generator, data):
    _, _, test = data
    perm = np.random.default_rng(0).permutation(len(test))
    a = specificity(random_generator, test, n_samples=200)
    b = specificity(random_generator, test[perm], n_samples=200)
    assert a.per_sample == b.per_sample
    assert a.metadata["n_samples"] == 200
    with pytest.raises(ValueError):
        specificity(random_generator, test[:0])


def test_constant_generator_at_test_mesh_has_zero_specificity(small_hierarchy, data):
    _, _, test = data
    p = init_params(CFG, small_hierarchy, seed=0, parts=("decoder",))
    zero = ModelParams(CFG, {k: np.zeros_like(v) for k, v in p.tensors.items()})
    g = Generator(zero, small_hierarchy, SignalCoder(test[3], 1.0))
    assert specificity(g, test, n_samples=50).mean == 0.0


def test_autoencoder_metrics(small_hierarchy, data):
    template, train, test = data
    cfg = TrainConfig(widths=(4, 4, 6), K=3, latent_dim=4, batch_size=8, epochs=20)
    res = train_autoencoder(train, cfg, small_hierarchy)
    g = Generator(res.models["AE"], small_hierarchy, res.coder, mode="ae", encoder=res.models["AE"])
    with pytest.raises(ValueError, match="fit"):
        specificity(g, test, n_samples=10)
    fit = g.fit_latent_distribution(train)
    assert fit.dim == 4 and g.encode(train[0]).shape == (1, 4)
    rng = np.random.default_rng(0)
    assert g.sample_latents(rng, 5).shape == (5, 4)
    seen = generalisation(train[:6], g, restarts=2, iterations=150)
    unseen = generalisation(test[:6], g, restarts=2, iterations=150)
    assert seen.metadata["mode"] == "ae"
    assert np.isfinite(seen.mean) and np.isfinite(unseen.mean)
    assert specificity(g, test, n_samples=50).mean > 0


def test_interpolation_path_is_continuous(random_generator):
    z1, z2 = np.random.default_rng(1).uniform(-1, 1, (2, 4))
    fine = path_lipschitz(random_generator, z1, z2, np.linspace(0, 1, 101))
    coarse = path_lipschitz(random_generator, z1, z2, np.linspace(0, 1, 11))
    assert np.isfinite(fine) and fine > 0
    # each coarse step is a sum of fine steps, so its slope cannot exceed the fine maximum
    assert fine >= coarse * (1 - 1e-9)
