"""Feature similarity, Fréchet distance, and the noise-difference pipeline."""

import numpy as np
import pytest

from adapterlab import adapter as A
from adapterlab import diffusion as D
from adapterlab import metrics as M
from adapterlab import tensor as T
from adapterlab import unet as U
from adapterlab.errors import DimensionError

TINY = U.UNetConfig(
    image_size=8,
    in_channels=3,
    base_channels=8,
    channel_mults=(1, 2),
    cond_dim=6,
    time_dim=16,
    ffn_mult=2,
    norm_groups=4,
)


@pytest.fixture(autouse=True)
def clean_tape():
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(99)


class StubExtractor:
    """Duck-typed extractor returning pre-assigned feature rows."""

    def __init__(self, mapping):
        self.mapping = mapping  # id(image) -> feature

    def batch_features(self, images):
        return np.stack([self.mapping[id(img)] for img in images])


# --- extractor ------------------------------------------------------------------------


def test_extractor_deterministic(rng):
    img = rng.normal(size=(3, 16, 16))
    f1 = M.FeatureExtractor(seed=4).features(img)
    f2 = M.FeatureExtractor(seed=4).features(img)
    assert np.array_equal(f1, f2)
    assert f1.shape == (64,)
    f3 = M.FeatureExtractor(seed=5).features(img)
    assert not np.array_equal(f1, f3)


def test_extractor_separates_colors(rng):
    ex = M.FeatureExtractor(seed=0)
    red = np.zeros((3, 16, 16))
    red[0] = 0.8
    green = np.zeros((3, 16, 16))
    green[1] = 0.8
    f_red, f_green = ex.features(red), ex.features(green)
    cos = f_red @ f_green / (np.linalg.norm(f_red) * np.linalg.norm(f_green))
    assert cos < 0.999


# --- cosine similarity -------------------------------------------------------------------


def test_similarity_identical_single_image(rng):
    img = rng.normal(size=(3, 16, 16))
    assert M.clip_similarity([img], [img], M.FeatureExtractor(0)) == pytest.approx(1.0)


def test_similarity_orthogonal_features(rng):
    a, b = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    stub = StubExtractor({id(a): np.array([1.0, 0.0]), id(b): np.array([0.0, 1.0])})
    assert M.clip_similarity([a], [b], stub) == pytest.approx(0.0)


def test_similarity_hand_computed_table(rng):
    imgs = [rng.normal(size=(3, 4, 4)) for _ in range(4)]
    feats = [np.array([1.0, 0.0]), np.array([1.0, 1.0]), np.array([0.0, 1.0]), np.array([-1.0, 0.0])]
    stub = StubExtractor({id(i): f for i, f in zip(imgs, feats)})
    # hand cosine table over the 2x2 cross pairs
    s = np.sqrt(2.0) / 2.0
    expected = np.mean([0.0, -1.0, s, -s])
    got = M.clip_similarity(imgs[:2], imgs[2:], stub)
    assert got == pytest.approx(expected, abs=1e-12)


def test_similarity_scale_invariant_and_bounded(rng):
    ex = M.FeatureExtractor(seed=1)
    gen = [rng.normal(size=(3, 16, 16)) for _ in range(3)]
    ref = [rng.normal(size=(3, 16, 16)) for _ in range(2)]
    v = M.clip_similarity(gen, ref, ex)
    assert -1.0 <= v <= 1.0
    feats = ex.batch_features(gen + ref)
    stub_plain = StubExtractor({id(i): f for i, f in zip(gen + ref, feats)})
    stub_scaled = StubExtractor({id(i): 7.5 * f for i, f in zip(gen + ref, feats)})
    assert M.clip_similarity(gen, ref, stub_plain) == pytest.approx(
        M.clip_similarity(gen, ref, stub_scaled)
    )


def test_similarity_rejects_empty_and_degenerate(rng):
    ex = M.FeatureExtractor(0)
    img = rng.normal(size=(3, 16, 16))
    with pytest.raises(ValueError):
        M.clip_similarity([], [img], ex)
    stub = StubExtractor({id(img): np.zeros(4)})
    with pytest.raises(ValueError, match="zero-norm"):
        M.clip_similarity([img], [img], stub)


# --- Fréchet distance ---------------------------------------------------------------------


def test_frechet_identical_stats(rng):
    feats = rng.normal(size=(50, 6))
    s = M.GaussianStats.from_features(feats)
    assert M.frechet_distance(s, s) <= 1e-8


def test_frechet_1d_closed_form(rng):
    # oracle: (mu_a - mu_b)^2 + (sigma_a - sigma_b)^2
    for _ in range(100):
        mu_a, mu_b = rng.normal(size=2)
        sd_a, sd_b = rng.uniform(0.1, 3.0, size=2)
        a = M.GaussianStats(np.array([mu_a]), np.array([[sd_a**2]]), 10)
        b = M.GaussianStats(np.array([mu_b]), np.array([[sd_b**2]]), 10)
        expected = (mu_a - mu_b) ** 2 + (sd_a - sd_b) ** 2
        assert M.frechet_distance(a, b) == pytest.approx(expected, abs=1e-8)


def test_frechet_isotropic_cancels_covariance(rng):
    dim = 5
    cov = 0.7 * np.eye(dim)
    mu_a, mu_b = rng.normal(size=dim), rng.normal(size=dim)
    a = M.GaussianStats(mu_a, cov, 10)
    b = M.GaussianStats(mu_b, cov.copy(), 10)
    assert M.frechet_distance(a, b) == pytest.approx(((mu_a - mu_b) ** 2).sum(), abs=1e-10)


def test_frechet_symmetric_nonnegative(rng):
    fa = rng.normal(size=(40, 5))
    fb = rng.normal(size=(40, 5)) + 0.3
    a, b = M.GaussianStats.from_features(fa), M.GaussianStats.from_features(fb)
    d_ab, d_ba = M.frechet_distance(a, b), M.frechet_distance(b, a)
    assert abs(d_ab - d_ba) <= 1e-8
    assert d_ab >= 0.0


def test_frechet_dimension_mismatch(rng):
    a = M.GaussianStats(np.zeros(3), np.eye(3), 5)
    b = M.GaussianStats(np.zeros(4), np.eye(4), 5)
    with pytest.raises(DimensionError):
        M.frechet_distance(a, b)


def test_frechet_rejects_non_psd():
    bad = M.GaussianStats(np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]), 5)
    good = M.GaussianStats(np.zeros(2), np.eye(2), 5)
    with pytest.raises(ValueError, match="PSD"):
        M.frechet_distance(bad, good)


def test_gaussian_stats_warns_when_underdetermined(rng):
    with pytest.warns(UserWarning, match="ill-conditioned"):
        M.GaussianStats.from_features(rng.normal(size=(3, 6)))


# --- noise-difference pipeline ----------------------------------------------------------------


@pytest.fixture
def model():
    return U.UNet(TINY, seed=21)


@pytest.fixture
def schedule():
    return D.linear_schedule()


def test_diff_map_same_prompt_is_zero(rng, model, schedule):
    img = rng.uniform(-1, 1, size=(3, 8, 8))
    c = rng.normal(size=(4, TINY.cond_dim))
    heat = M.noise_diff_map(model, None, img, 500, c, c, seed=0, schedule=schedule)
    assert np.all(heat == 0.0)
    assert heat.shape == (8, 8)


def test_diff_map_deterministic_and_nonnegative(rng, model, schedule):
    img = rng.uniform(-1, 1, size=(3, 8, 8))
    ca = rng.normal(size=(4, TINY.cond_dim))
    cb = rng.normal(size=(4, TINY.cond_dim))
    h1 = M.noise_diff_map(model, None, img, 400, ca, cb, seed=3, schedule=schedule)
    h2 = M.noise_diff_map(model, None, img, 400, ca, cb, seed=3, schedule=schedule)
    assert np.array_equal(h1, h2)
    assert h1.min() >= 0.0 and h1.max() > 0.0
    h3 = M.noise_diff_map(model, None, img, 400, ca, cb, seed=4, schedule=schedule)
    assert not np.array_equal(h1, h3)


def test_diff_score_zero_init_bank_matches_baseline(rng, model, schedule):
    images = [rng.uniform(-1, 1, size=(3, 8, 8)) for _ in range(2)]
    ca = rng.normal(size=(4, TINY.cond_dim))
    cb = rng.normal(size=(4, TINY.cond_dim))
    dp = A.DesignPoint("CA_out", A.nearest_output_class("CA_out"), "identity", 1.0, 2)
    bank = A.inject(model, dp, seed=1)
    kw = dict(t_set=(300, 700), seeds=(0, 1), max_images=2)
    base = M.diff_score(model, None, images, ca, cb, schedule, **kw)
    injected = M.diff_score(model, bank, images, ca, cb, schedule, **kw)
    assert injected == base
    assert base >= 0.0
    model.set_trainable(True)


def test_diff_score_more_seeds_reduce_variance(rng, model, schedule):
    images = [rng.uniform(-1, 1, size=(3, 8, 8))]
    ca = rng.normal(size=(4, TINY.cond_dim))
    cb = rng.normal(size=(4, TINY.cond_dim))

    def score(seeds):
        return M.diff_score(model, None, images, ca, cb, schedule, t_set=(500,), seeds=seeds)

    few = [score((b, b + 1)) for b in range(0, 60, 10)]
    many = [score(tuple(range(b, b + 10))) for b in range(0, 60, 10)]
    assert np.var(many) < np.var(few)
