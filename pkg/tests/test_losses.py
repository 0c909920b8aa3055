import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sssle import losses, tfagg
from sssle.autograd import Tensor
from sssle.losses import LossConfig, MarginClip

from fdcheck import central_difference, rel_error
from oracles import LinearProbe, baseline_weak_loss, random_fixture

MEL = tfagg.mel_filterbank(16, 4, 8000)
LIN = tfagg.linear_filterbank(16)  # F = 9
ALL = tfagg.build_set(tfagg.AGGREGATION_NAMES, MEL, LIN)


def baseline_cfg(f_bins=6, **kw):
    lin = tfagg.linear_filterbank(2 * (f_bins - 1))
    return LossConfig(tfagg.build_set(["tf-linear"], lin, lin), beta=0, **kw)


# -- salience ----------------------------------------------------------------------

def test_salience_drops_quiet_frame():
    x = np.array([[10.0, np.sqrt(0.5)]])
    mask, n = losses.salience_mask(x)
    np.testing.assert_array_equal(mask, [[1.0, 0.0]])
    assert n == 1


def test_salience_equal_frames_all_kept():
    mask, n = losses.salience_mask(np.ones((4, 6)))
    assert n == 6 and mask.all()


def test_salience_exact_threshold_is_kept():
    x = np.array([[10.0, 1.0]])  # energies 100 and 1, ratio exactly 0.01
    _, n = losses.salience_mask(x, 0.01)
    assert n == 2


def test_salience_all_zero_errors():
    with pytest.raises(ValueError, match="no salient frames"):
        losses.salience_mask(np.zeros((3, 3)))


# -- norms -------------------------------------------------------------------------

def test_asym_zero_margin_is_l1():
    e = np.array([[-1.0, 4.0], [2.0, -0.5]])
    assert losses.asym_l1(e, 0.0, 4).item() == pytest.approx(7.5)


def test_asym_margin_absorbs_overshoot():
    assert losses.asym_l1(np.array([[2.0, 3.0]]), 3.0, 2).item() == 0.0


def test_asym_mixed_signs():
    assert losses.asym_l1(np.array([[-1.0, 4.0]]), 1.0, 2).item() == pytest.approx(3.0)


small_mats = st.integers(0, 2**31).map(lambda s: np.random.default_rng(s).normal(0, 2, (3, 4)))


@settings(max_examples=100, deadline=None)
@given(e=small_mats, eps=st.floats(0, 5), d=st.floats(0, 5))
def test_asym_bounded_by_l1_and_nonincreasing(e, eps, d):
    full = np.abs(e).sum()
    a = losses.asym_l1(e, eps, 12).item()
    assert a <= full + 1e-12
    assert losses.asym_l1(e, eps + d, 12).item() <= a + 1e-12


@settings(max_examples=100, deadline=None)
@given(e1=small_mats, e2=small_mats, lam=st.floats(0, 1), eps=st.floats(0, 2))
def test_asym_convex_in_error(e1, e2, lam, eps):
    mid = losses.asym_l1(lam * e1 + (1 - lam) * e2, eps, 12).item()
    ends = lam * losses.asym_l1(e1, eps, 12).item() + (1 - lam) * losses.asym_l1(e2, eps, 12).item()
    assert mid <= ends + 1e-9


# -- errors ------------------------------------------------------------------------

def test_errors_vanish_for_partition_of_unity():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (9, 4))
    m = rng.uniform(0, 1, (3, 9, 4))
    m[2] = 0.0
    m[1] = 1.0 - m[0]
    y = np.array([1.0, 1.0, 0.0])
    assert np.abs(losses.active_error(x, m, y).data).max() < 1e-15
    assert not losses.inactive_error(x, m, y).data.any()


def test_active_error_with_zero_mask_is_mixture():
    x = np.random.default_rng(1).uniform(0, 1, (9, 4))
    np.testing.assert_array_equal(losses.active_error(x, np.zeros((1, 9, 4)), [1.0]).data[0], x)


def test_inactive_error_with_no_active_class():
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 1, (9, 4))
    m = rng.uniform(0, 1, (2, 9, 4))
    np.testing.assert_allclose(losses.inactive_error(x, m, [0.0, 0.0]).data[0], m.sum(0) * x)
    np.testing.assert_array_equal(losses.active_error(x, m, [0.0, 0.0]).data[0], x)


def test_bad_labels_rejected():
    with pytest.raises(ValueError, match="0 or 1"):
        losses.active_error(np.ones((2, 2)), np.ones((1, 2, 2)), [0.5])


# -- mixture consistency -------------------------------------------------------------

def disjoint_oracle(rng, n_cls=3, f_bins=9, t_frames=6):
    owner = rng.integers(0, n_cls, (f_bins, t_frames))
    x = rng.uniform(0.5, 1.5, (f_bins, t_frames))
    masks = np.stack([(owner == i).astype(float) for i in range(n_cls)])
    y = masks.reshape(n_cls, -1).any(axis=1).astype(float)
    return x, masks, y


@pytest.mark.parametrize("names", [("tf-linear",), ("global",), tuple(tfagg.AGGREGATION_NAMES)])
def test_oracle_masks_zero_loss(names):
    x, m, y = disjoint_oracle(np.random.default_rng(3))
    cfg = LossConfig(tfagg.build_set(names, MEL, LIN))
    assert losses.mix_loss_sssle(x, m, y, cfg).item() < 1e-12


def test_baseline_matches_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(10):
        x, m, y, clf = random_fixture(rng)
        got = losses.total_loss(x, m, y, clf, baseline_cfg()).item()
        assert got == pytest.approx(baseline_weak_loss(x, m, y, clf, 100.0), abs=1e-12)


def test_margin_covers_constant_background():
    rng = np.random.default_rng(5)
    x, m, y = disjoint_oracle(rng)
    bg = 0.25
    xb = x + bg
    oracle = m * x / xb  # recovers each source exactly
    for spec in ALL:
        h = tfagg.apply_aggregation(spec, np.full_like(x, bg))
        n = losses.n_bins(spec, x.shape[1])
        eps = np.abs(h).sum() / n * (1 + 1e-12)
        cfg = LossConfig(tfagg.AggregationSet((spec,)), epsilon={spec.name: eps})
        assert losses.mix_loss_sssle(xb, oracle, y, cfg).item() == 0.0
        cfg = LossConfig(tfagg.AggregationSet((spec,)), epsilon={spec.name: eps * 0.99})
        assert losses.mix_loss_sssle(xb, oracle, y, cfg).item() > 0.0


def test_divisor_conventions():
    tf, spec_mel, glob = (tfagg.make_spec(n, MEL, LIN) for n in ("tf-mel", "spectrum-mel", "global"))
    assert losses.n_bins(tf, 7) == 4 * 7
    assert losses.n_bins(spec_mel, 7) == 4
    assert losses.n_bins(glob, 7) == 1
    assert losses.n_bins(spec_mel, 7, "original") == 4 * 7
    assert losses.n_bins(glob, 7, "original") == 9 * 7


def test_batch_loss_is_mean_of_clips():
    rng = np.random.default_rng(6)
    x, m, y, clf = random_fixture(rng, batch=3)
    cfg = LossConfig(tfagg.build_set(["tf-linear", "global"], *(tfagg.linear_filterbank(10),) * 2))
    whole = losses.mix_loss_sssle(x, m, y, cfg).item()
    parts = [losses.mix_loss_sssle(x[i], m[i], y[i], cfg).item() for i in range(3)]
    assert whole == pytest.approx(np.mean(parts), abs=1e-12)


# -- residual ------------------------------------------------------------------------

def test_residual_cases():
    x = np.random.default_rng(7).uniform(0, 1, (9, 4))
    assert not losses.residual_spectrogram(x, np.full((2, 9, 4), 0.6)).data.any()
    np.testing.assert_array_equal(losses.residual_spectrogram(x, np.zeros((2, 9, 4))).data[0], x)
    np.testing.assert_allclose(losses.residual_spectrogram(x, np.full((2, 9, 4), 0.2)).data[0], 0.6 * x)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_residual_plus_sources_covers_mixture(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 2, (9, 4))
    m = rng.uniform(0, 0.5, (2, 9, 4))
    total = losses.residual_spectrogram(x, m).data[0] + losses.source_estimates(x, m).data[0].sum(0)
    over = m.sum(0) > 1
    np.testing.assert_allclose(total[~over], x[~over], atol=1e-12)
    assert np.all(total[over] >= x[over] - 1e-12)


# -- classification -----------------------------------------------------------------

def test_bce_values():
    assert losses.bce(1, 1.0) == 0.0
    assert losses.bce(0, 0.5) == pytest.approx(0.6931, abs=1e-4)
    assert losses.bce(1, 0.1) == pytest.approx(2.3026, abs=1e-4)
    with pytest.raises(ValueError):
        losses.bce(0.3, 0.5)


def test_bce_logits_stable():
    z = np.array([-50.0, -1.0, 0.0, 1.0, 50.0])
    for t in (0.0, 1.0):
        out = losses.bce_with_logits(np.full(5, t), z).data
        assert np.all(np.isfinite(out))
        p = 1 / (1 + np.exp(-z[1:4]))
        np.testing.assert_allclose(out[1:4], losses.bce(np.full(3, t), p))


class Fixed:
    """Classifier that returns preset logits for every input."""

    def __init__(self, logits):
        self.z = np.asarray(logits, dtype=np.float64)

    def logits(self, mag):
        return Tensor(np.broadcast_to(self.z, (mag.shape[0], self.z.size)).copy())


def test_background_term_matches_bce_algebra():
    x = np.ones((9, 4))
    z = np.array([-1.0, 2.0])
    p = 1 / (1 + np.exp(-z))
    y = np.array([1.0, 0.0])
    s = losses.source_estimates(x, np.zeros((2, 9, 4)))
    r = losses.residual_spectrogram(x, np.zeros((2, 9, 4)))
    with_b = losses.cls_loss_sssle(Fixed(z), x, s, r, y, beta=1).item()
    without = losses.cls_loss_sssle(Fixed(z), x, s, r, y, beta=0).item()
    assert with_b - without == pytest.approx(-np.log1p(-p).sum(), abs=1e-12)


def test_perfect_classifier_on_oracle_sources():
    x, m, y = disjoint_oracle(np.random.default_rng(8), n_cls=2)
    y = np.array([1.0, 1.0])

    class ByIndex:
        def logits(self, mag):
            # rows are [mixture, source 1, source 2]
            return Tensor(np.array([[60.0, 60.0], [60.0, -60.0], [-60.0, 60.0]]))

    s = losses.source_estimates(x, m)
    r = losses.residual_spectrogram(x, m)
    assert losses.cls_loss_sssle(ByIndex(), x, s, r, y, beta=0).item() < 1e-20


def test_classifier_width_checked():
    x = np.ones((9, 4))
    s = losses.source_estimates(x, np.zeros((2, 9, 4)))
    r = losses.residual_spectrogram(x, np.zeros((2, 9, 4)))
    with pytest.raises(ValueError, match="classifier emits"):
        losses.cls_loss_sssle(Fixed([0.0, 0.0, 0.0]), x, s, r, [1.0, 0.0])


# -- total loss -----------------------------------------------------------------------

def test_alpha_scales_mix_component():
    x, m, y, clf = random_fixture(np.random.default_rng(9))
    c1 = losses.total_loss(x, m, y, clf, baseline_cfg(alpha=1.0)).item()
    c2 = losses.total_loss(x, m, y, clf, baseline_cfg(alpha=2.0)).item()
    c0 = losses.total_loss(x, m, y, clf, baseline_cfg(alpha=0.0)).item()
    assert c2 - c0 == pytest.approx(2 * (c1 - c0), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31), kind=st.sampled_from(["zero", "one", "random"]))
def test_total_loss_finite(seed, kind):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 3, (2, 9, 5))
    m = {"zero": np.zeros, "one": np.ones}.get(kind, lambda s: rng.uniform(0, 1, s))((2, 2, 9, 5))
    y = rng.integers(0, 2, (2, 2)).astype(float)
    clf = LinearProbe(rng.normal(0, 5, (9, 2)), rng.normal(0, 5, 2))
    cfg = LossConfig(ALL, epsilon={n: 0.1 for n in ALL.names})
    val = losses.total_loss(x, m, y, clf, cfg).item()
    assert np.isfinite(val) and val >= 0


def test_mask_gradient_matches_finite_differences():
    rng = np.random.default_rng(10)
    x = rng.uniform(0.2, 2, (2, 9, 5))
    m = rng.uniform(0.05, 0.95, (2, 3, 9, 5))
    y = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    clf = LinearProbe(rng.normal(0, 0.3, (9, 3)), rng.normal(0, 0.3, 3))
    cfg = LossConfig(ALL, epsilon={"tf-mel": 0.05, "global": 0.3})
    mt = Tensor(m.copy(), requires_grad=True)
    losses.total_loss(x, mt, y, clf, cfg).backward()
    flat = m.reshape(-1)
    for i in rng.choice(flat.size, 64, replace=False):
        num = central_difference(lambda: losses.total_loss(x, m, y, clf, cfg).item(), flat, i)
        assert rel_error(mt.grad.reshape(-1)[i], num) < 1e-5


# -- epsilon ------------------------------------------------------------------------------

def stems_fixture(rng, n=5, background=0.0):
    clips = []
    for _ in range(n):
        stems = rng.uniform(0, 1, (2, 9, 6))
        y = np.array([1.0, 1.0])
        clips.append(MarginClip(stems.sum(0) + background, y, stems=stems))
    return clips


def test_epsilon_zero_without_background():
    clips = stems_fixture(np.random.default_rng(11))
    eps = losses.estimate_epsilons(clips, ALL)
    assert max(eps.values()) < 1e-10


def test_epsilon_recovers_constant_background():
    bg = 0.3
    clips = stems_fixture(np.random.default_rng(12), background=bg)
    for spec in ALL:
        want = np.abs(tfagg.apply_aggregation(spec, np.full((9, 6), bg))).sum() / losses.n_bins(spec, 6)
        assert losses.estimate_epsilon(clips, spec) == pytest.approx(want, rel=0.01)


def test_epsilon_from_background_references():
    bg = np.full((9, 6), 0.3)
    clips = [MarginClip(np.ones((9, 6)), np.array([1.0]), background=bg),
             MarginClip(np.ones((9, 6)), np.array([1.0]), background=np.zeros((9, 6)))]
    spec = tfagg.make_spec("tf-linear", MEL, LIN)
    assert losses.estimate_epsilon(clips, spec) == pytest.approx(0.15)


def test_epsilon_needs_a_source():
    with pytest.raises(losses.MarginSourceError, match="--epsilon"):
        losses.estimate_epsilon([MarginClip(np.ones((9, 2)), np.array([1.0]))], ALL.specs[0])


# -- config and grid ----------------------------------------------------------------------

@pytest.mark.parametrize("kw", [{"alpha": -1}, {"beta": 2}, {"salience_threshold": 1.0},
                                {"epsilon": {"tf-mel": -0.1}}, {"epsilon": {"nope": 0.1}},
                                {"divisor": "mean"}])
def test_loss_config_validation(kw):
    with pytest.raises(ValueError):
        LossConfig(ALL, **kw)


def test_ablation_grid_contents():
    base = LossConfig(tfagg.standard_set(MEL, LIN))
    grid = losses.ablation_grid(MEL, LIN, base, {"tf-mel": 0.1, "spectrum-mel": 1.0, "global": 2.0})
    level = [k for k in grid if k.startswith("level:")]
    bg = [k for k in grid if k.startswith("background:")]
    assert len(level) == 13 and len(bg) == 4
    assert all(grid[k].beta == 0 and not grid[k].epsilon for k in level)
    full = grid["background:margin=1,residual=1"]
    assert full.beta == 1 and full.epsilon["global"] == 2.0
    assert not grid["background:margin=0,residual=1"].epsilon
