import numpy as np
import pytest

from covmon import attacks as A, cams, nn
from conftest import small_net


@pytest.fixture(scope="module")
def toy():
    """small_net trained on four quadrant-brightness patterns."""
    rng = np.random.default_rng(0)
    y = rng.integers(0, 4, 400)
    x = rng.random((400, 28, 28), dtype=np.float32) * 0.3
    for i, c in enumerate(y):
        r, k = divmod(int(c), 2)
        x[i, r * 14:(r + 1) * 14, k * 14:(k + 1) * 14] += 0.6
    model = nn.train(small_net(seed=1), x, y, nn.TrainConfig(epochs=6, batch_size=20, seed=0))
    return model, x[:60], y[:60]


@pytest.fixture
def fixed_grad(monkeypatch):
    def use(g):
        monkeypatch.setattr(A, "_ce_grad", lambda model, x, y: np.broadcast_to(g, np.shape(x)).astype(np.float32))
    return use


# ------------------------------------------------------------------- FGSM

def test_fgsm_examples(fixed_grad, tiny_model):
    x = np.array([[[0.5, 0.95, 0.3]]], np.float32)
    fixed_grad(np.array([1.0, 1.0, 0.0]))
    np.testing.assert_allclose(A.fgsm(tiny_model, x, [0], 0.1), [[[0.6, 1.0, 0.3]]], atol=1e-7)
    fixed_grad(np.zeros(3))
    assert np.array_equal(A.fgsm(tiny_model, x, [0], 0.1), x)


def test_fgsm_bounds(toy):
    model, x, y = toy
    adv = A.fgsm(model, x, y, 0.1)
    assert np.abs(adv - x).max() <= 0.1 + 1e-6
    assert adv.min() >= 0 and adv.max() <= 1


# ---------------------------------------------------------------- PGD/BIM

def test_pgd_k0_identity(toy):
    model, x, y = toy
    assert np.array_equal(A.pgd(model, x, y, 0.1, 0.01, 0), x)
    assert np.array_equal(A.bim(model, x, y, 0.1, 0.01, 0), x)


def test_pgd_bound_after_every_step(toy, monkeypatch):
    model, x, y = toy
    seen = []
    orig = A._project

    def spy(adv, src, eps):
        out = orig(adv, src, eps)
        seen.append(np.abs(out - src).max())
        return out
    monkeypatch.setattr(A, "_project", spy)
    A.pgd(model, x, y, 0.05, 0.02, 7)
    assert len(seen) == 7 and max(seen) <= 0.05 + 1e-6


def test_bim_equals_pgd_step_trace(toy):
    model, x, y = toy
    for k in range(4):
        assert np.array_equal(A.bim(model, x, y, 0.08, 0.03, k), A.pgd(model, x, y, 0.08, 0.03, k))


def test_pgd_manual_trace(toy):
    model, x, y = toy
    adv = x.copy()
    for _ in range(3):
        g = nn.input_gradient(model, adv, nn.CrossEntropyLoss(y))
        adv = np.clip(np.clip(adv + np.float32(0.02) * np.sign(g), x - np.float32(0.05), x + np.float32(0.05)), 0, 1)
    assert np.array_equal(A.pgd(model, x, y, 0.05, 0.02, 3), adv.astype(np.float32))


def test_pgd_random_start_is_seeded(toy, caplog):
    model, x, y = toy
    a = A.pgd(model, x[:5], y[:5], 0.05, 0.1, 2, random_start=True, seed=3)
    b = A.pgd(model, x[:5], y[:5], 0.05, 0.1, 2, random_start=True, seed=3)
    assert np.array_equal(a, b)
    assert "exceeds" in caplog.text


def test_attack_config_validation():
    with pytest.raises(ValueError):
        A.AttackConfig("nope")
    with pytest.raises(ValueError):
        A.AttackConfig("pgd", eps=0.1, k=3)
    with pytest.raises(ValueError):
        A.AttackConfig("signature", eps=0.1, alpha=0.01, k=3, gamma=1.5)
    with pytest.raises(ValueError):
        A.AttackConfig("fgsm", eps=-1)
    assert A.AttackConfig("fgsm", eps=0.1).digest() != A.AttackConfig("fgsm", eps=0.2).digest()


# --------------------------------------------------------------------- CW

def test_cw_already_misclassified(toy):
    model, x, y = toy
    pred, score = nn.predict(model, x)
    wrong = (pred + 1) % 4  # every sample is "misclassified" under these labels
    hi = score > 0.8
    adv, found = A.cw(model, x[hi], wrong[hi], k=3, c=1.0)
    assert found.all() and np.array_equal(adv, x[hi])


def test_cw_success_has_nonnegative_margin_and_beats_fgsm(toy):
    model, x, y = toy
    adv, found = A.cw(model, x, y, k=150, c=10.0, lr=0.05, accept_score=0.5)
    assert found.sum() >= 10
    logits = nn.forward(model, adv[found]).logits
    yy = y[found]
    other = np.where(np.eye(4, dtype=bool)[yy], -np.inf, logits).max(axis=1)
    assert np.all(other - logits[np.arange(len(yy)), yy] >= 0)

    fg = A.fgsm(model, x, y, 0.2)
    pred_fg, score_fg = nn.predict(model, fg)
    both = found & (pred_fg != y)
    d_cw = np.linalg.norm((adv - x)[both].reshape(both.sum(), -1), axis=1)
    d_fg = np.linalg.norm((fg - x)[both].reshape(both.sum(), -1), axis=1)
    assert both.sum() >= 5 and np.mean(d_cw < d_fg) >= 0.9


def test_cw_failure_is_a_marker_not_an_exception(toy):
    model, x, y = toy
    adv, found = A.cw(model, x[:4], y[:4], k=2, c=1e-6)
    assert not found.any() and adv.shape == x[:4].shape


# -------------------------------------------------------------------- OOD

def test_ood_step_sizes(fixed_grad, tiny_model, monkeypatch):
    x = np.full((1, 28, 28), 0.5, np.float32)
    fixed_grad(np.full((28, 28), -1.0))  # descending the loss moves pixels up
    never = nn.ForwardResult(np.zeros((1, 4)), np.full((1, 4), 0.25), np.zeros(1, np.int64), np.full(1, 0.25), {})
    monkeypatch.setattr(A.nn, "forward", lambda *a, **k: never)
    traces = []
    for k in range(1, 5):
        adv, reached = A.ood_targeted(tiny_model, x, 1, 0.1, k)
        traces.append(float(adv[0, 0, 0]) - 0.5)
        assert not reached.any()
    steps = np.diff([0.0] + traces)
    np.testing.assert_allclose(steps, [0.1, 0.1 / 4, 0.1 / 9, 0.1 / 16], atol=1e-6)


def test_ood_success_means_target_with_high_score(toy):
    model, x, y = toy
    target = (y + 1) % 4
    adv, reached = A.ood_targeted(model, x, target, 1.0, 40)
    assert reached.sum() > 0
    pred, score = nn.predict(model, adv[reached])
    assert np.all(pred == target[reached]) and np.all(score >= 0.99)
    assert adv.min() >= 0 and adv.max() <= 1


def test_ood_generate_targets_differ_from_label(toy):
    model, x, y = toy
    res = A.generate(model, A.AttackConfig("ood", eps=1.0, k=5, wrong_score=0.99), x, y)
    t = np.array(res.meta["targets"])
    assert np.all(t != y) and t.min() >= 0 and t.max() < 4


# ------------------------------------------------------------------ patch

def test_patch_mask_bounds():
    m = A.patch_mask()
    assert m.sum() == 64 and m[:8, :8].all()
    with pytest.raises(ValueError):
        A.patch_mask(patch=(22, 0, 8, 8))


def test_patch_leaves_other_pixels_identical(toy):
    model, x, y = toy
    adv = A.patch_attack(model, x, y, 0.05, 10)
    outside = ~A.patch_mask().astype(bool)
    assert np.array_equal(adv[:, outside], x[:, outside])
    assert not np.array_equal(adv[:, :8, :8], x[:, :8, :8])


# ------------------------------------------------------- signature attack

def test_signature_loss_examples():
    t = (nn.TapInfo(1, 3, 1),)
    sig = cams.SrcSignature(t, 1, {1: np.zeros((1, 3), np.float32)}, {1: np.ones((1, 3), np.float32)}, np.array([1]))
    loss = A.signature_loss({1: np.array([[1.2, 0.5, -0.3]])}, sig, [0])
    np.testing.assert_allclose(loss, [0.5])
    assert A.signature_loss({1: np.array([[0.1, 0.5, 1.0]])}, sig, [0])[0] == 0


def test_gamma_zero_matches_pgd(toy):
    model, x, y = toy
    pred, _ = nn.predict(model, x)
    sig = cams.aggregate_src(x, pred, model, [1, 2])
    a = A.signature_attack(model, sig, x, pred, 0.1, 0.004, 5, 0.0)
    b = A.pgd(model, x, pred, 0.1, 0.004, 5)
    assert np.array_equal(a, b)


def test_gamma_half_lowers_signature_loss(toy):
    model, x, y = toy
    pred, _ = nn.predict(model, x)
    sig = cams.aggregate_src(x[:30], pred[:30], model, [1, 2])
    q, qp = x[30:], pred[30:]
    losses = []
    for g in (0.0, 0.5):
        adv = A.signature_attack(model, sig, q, qp, 0.1, 0.004, 20, g)
        losses.append(A.signature_loss(nn.forward(model, adv, {1, 2}).taps, sig, qp).mean())
    assert losses[1] < losses[0]


def test_unit_handles_zero_norm():
    g = np.zeros((2, 3, 3))
    g[1, 0, 0] = 4.0
    u, ok = A._unit(g)
    assert ok.tolist() == [False, True]
    assert np.all(u[0] == 0) and u[1, 0, 0] == 1.0


def test_signature_attack_requires_signature(toy):
    model, x, y = toy
    with pytest.raises(ValueError):
        A.generate(model, A.AttackConfig("signature", eps=0.1, alpha=0.01, k=1), x, y)


# -------------------------------------------------------------- baselines

def test_bit_depth_examples():
    np.testing.assert_array_equal(A.bit_depth_reduce(np.array([0.3, 0.6, 0.0, 1.0]), 1), [0, 1, 0, 1])
    binary = (np.random.default_rng(0).random((5, 28, 28)) > 0.5).astype(np.float32)
    assert np.array_equal(A.bit_depth_reduce(binary, 1), binary)


def test_median_smooth_matches_loop(rng):
    x = rng.random((2, 9, 7), dtype=np.float32)
    for w in (2, 3):
        got = A.median_smooth(x, w)
        lead, tail = (w - 1) // 2, w // 2
        p = np.pad(x, ((0, 0), (lead, tail), (lead, tail)), mode="edge")
        want = np.array([[[np.median(p[n, i:i + w, j:j + w]) for j in range(7)] for i in range(9)] for n in range(2)])
        np.testing.assert_allclose(got, want, atol=1e-7)
    assert np.array_equal(A.median_smooth(np.full((4, 4), 0.25), 2), np.full((4, 4), 0.25))


def test_jpeg_quality_and_constant_blocks(rng):
    x = rng.random((3, 28, 28), dtype=np.float32)
    assert np.abs(A.jpeg_like_compress(x, 100) - x).max() < 0.02
    assert np.abs(A.jpeg_like_compress(x, 10) - x).mean() > np.abs(A.jpeg_like_compress(x, 90) - x).mean()
    flat = np.full((16, 16), 128 / 255, np.float32)
    np.testing.assert_allclose(A.jpeg_like_compress(flat), flat, atol=1e-6)
    assert A.jpeg_like_compress(x[0]).shape == (28, 28)
    with pytest.raises(ValueError):
        A.quant_table(0)


def test_dct_is_orthonormal():
    d = A._dct_matrix()
    np.testing.assert_allclose(d @ d.T, np.eye(8), atol=1e-12)


def test_kl_toy_values():
    p, q = np.log([0.7, 0.2, 0.1]), np.log([0.6, 0.3, 0.1])
    pq = 0.7 * np.log(0.7 / 0.6) + 0.2 * np.log(0.2 / 0.3)
    qp = 0.6 * np.log(0.6 / 0.7) + 0.3 * np.log(0.3 / 0.2)
    assert abs(A.kl_divergence(p, q) - pq) < 1e-12 and abs(A.kl_divergence(q, p) - qp) < 1e-12
    assert A.kl_divergence(p, p) == 0
    assert min(pq, qp) == pq  # the VisionGuard score takes the smaller direction


def test_baseline_scores_zero_for_identity_squeezers(toy, monkeypatch):
    model, x, y = toy
    monkeypatch.setattr(A, "jpeg_like_compress", lambda a, q=50: a)
    assert np.all(A.vision_guard_score(model, x) == 0)
    monkeypatch.setattr(A, "bit_depth_reduce", lambda a, b: a)
    monkeypatch.setattr(A, "median_smooth", lambda a, w=2: a)
    assert np.all(A.feature_squeezing_score(model, x) == 0)
    assert not A.baseline_unsafe(np.zeros(3), 1e-9).any()


def test_feature_squeezing_is_max_l1(toy):
    model, x, y = toy
    p = nn.forward(model, x).probabilities.astype(np.float64)
    l1 = [np.abs(p - nn.forward(model, s).probabilities).sum(1) for s in (A.bit_depth_reduce(x, 1), A.median_smooth(x, 2))]
    np.testing.assert_allclose(A.feature_squeezing_score(model, x), np.maximum(*l1), atol=1e-5)


# ------------------------------------------------------------ record file

def test_adversarial_record_round_trip(toy, tmp_path):
    model, x, y = toy
    cfg = A.AttackConfig("fgsm", eps=0.2)
    res = A.generate(model, cfg, x, y, np.arange(100, 160))
    A.write_adversarial(res, tmp_path / "a.cvsg", cfg)
    back = A.read_adversarial(tmp_path / "a.cvsg")
    for f in ("images", "source_index", "source_label", "predicted", "score"):
        assert np.array_equal(getattr(back, f), getattr(res, f))
    assert (back.method, back.config_hash) == ("fgsm", cfg.digest())
    s = back.sample(0, np.zeros((200, 28, 28)))
    assert s.source_label == y[0] and s.method == "fgsm"


def test_accepted_filter(toy):
    model, x, y = toy
    res = A.generate(model, A.AttackConfig("fgsm", eps=0.3), x, y)
    idx = res.accepted(0.8)
    assert np.all(res.predicted[idx] != y[idx]) and np.all(res.score[idx] > 0.8)
    rest = np.setdiff1d(np.arange(len(res)), idx)
    assert np.all((res.predicted[rest] == y[rest]) | (res.score[rest] <= 0.8))


def test_generate_is_batch_invariant(toy):
    model, x, y = toy
    cfg = A.AttackConfig("pgd", eps=0.1, alpha=0.02, k=3)
    a = A.generate(model, cfg, x, y, batch_size=60)
    b = A.generate(model, cfg, x, y, batch_size=7)
    assert np.array_equal(a.images, b.images)
