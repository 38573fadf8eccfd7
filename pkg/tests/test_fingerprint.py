import math

import numpy as np
import pytest
import torch

from conftest import autograd_grad, finite_diff_grad, rel_err
from forgeloc.errors import DimensionError, LabelingError
from forgeloc.fingerprint import (FingerprintConfig, FingerprintNet, batch_residuals, contrastive_loss,
                                  extract_fingerprint, pairwise_sq_distances, positive_mask,
                                  train_fingerprint_phase1)
from forgeloc.histories import EditingHistory, apply_history


def _brute_infonce(d: np.ndarray, pos: np.ndarray) -> float:
    total = 0.0
    n = len(d)
    for i in range(n):
        num = sum(math.exp(-d[i, j]) for j in range(n) if pos[i, j])
        den = sum(math.exp(-d[i, j]) for j in range(n) if j != i)
        total -= math.log(num / den)
    return total


def test_output_shape():
    m = FingerprintNet(4, 8)
    out = extract_fingerprint(m, np.random.default_rng(0).uniform(size=(64, 64, 3)).astype(np.float32))
    assert out.shape == (64, 64, 1)


def test_arbitrary_sizes_preserved():
    m = FingerprintNet(3, 4)
    for h, w in [(16, 16), (37, 50), (80, 33)]:
        out = extract_fingerprint(m, np.zeros((h, w, 3), dtype=np.float32))
        assert out.shape == (h, w, 1)


def test_undersized_input_rejected():
    with pytest.raises(DimensionError):
        extract_fingerprint(FingerprintNet(3, 4), np.zeros((15, 40, 3), dtype=np.float32))


def test_zero_final_layer_gives_zero_fingerprint():
    m = FingerprintNet(5, 8)
    with torch.no_grad():
        m.final.weight.zero_()
        m.final.bias.zero_()
    out = extract_fingerprint(m, np.random.default_rng(1).uniform(size=(32, 32, 3)).astype(np.float32))
    assert torch.count_nonzero(out) == 0


def test_fingerprint_is_differentiable():
    m = FingerprintNet(3, 4)
    out = extract_fingerprint(m, np.random.default_rng(1).uniform(size=(20, 20, 3)).astype(np.float32))
    out.sum().backward()
    assert all(p.grad is not None for p in m.parameters())


def test_interior_translation_covariance():
    torch.manual_seed(0)
    m = FingerprintNet(5, 8).double()
    img = np.random.default_rng(2).uniform(size=(64, 64, 3))
    full = extract_fingerprint(m, img)
    crop = extract_fingerprint(m, img[10:50, 12:60])
    rad = m.receptive_radius
    a = full[10 + rad:50 - rad, 12 + rad:60 - rad]
    b = crop[rad:-rad, rad:-rad]
    assert torch.allclose(a, b, atol=1e-12)


def test_pairwise_distance_examples():
    r = torch.tensor([[0.0, 0.0], [3.0, 4.0]], dtype=torch.float64)
    assert pairwise_sq_distances(r)[0, 1].item() == pytest.approx(25.0)
    same = torch.tensor([[1.0, 2.0], [1.0, 2.0]], dtype=torch.float64)
    assert pairwise_sq_distances(same)[0, 1].item() == 0.0


def test_pairwise_distance_matches_double_loop():
    r = torch.from_numpy(np.random.default_rng(3).normal(size=(5, 7)))
    d = pairwise_sq_distances(r)
    brute = np.array([[float(((r[i] - r[j]) ** 2).sum()) for j in range(5)] for i in range(5)])
    np.testing.assert_allclose(d.numpy(), brute, rtol=1e-12, atol=1e-12)
    assert torch.equal(d, d.T)
    assert (torch.diagonal(d) == 0).all() and (d >= 0).all()


def test_two_mutual_positives_give_zero_loss():
    for s in (0.0, 0.3, 17.0):
        d = torch.tensor([[0.0, s], [s, 0.0]], dtype=torch.float64)
        loss = contrastive_loss(d, np.array([[1, 0, 5], [1, 0, 5]]))
        assert loss.item() == 0.0


def test_three_equal_distances_one_positive_each():
    d = torch.full((3, 3), 2.5, dtype=torch.float64).fill_diagonal_(0.0)
    pos = torch.tensor([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=torch.bool)
    loss = contrastive_loss(d, pos)
    assert loss.item() == pytest.approx(3 * math.log(2), abs=1e-12)
    assert loss.item() == pytest.approx(_brute_infonce(d.numpy(), pos.numpy()), abs=1e-12)


def test_loss_matches_direct_formula_on_labels():
    rng = np.random.default_rng(4)
    labels = np.array([[0, 0, 1], [0, 0, 1], [1, 0, 1], [1, 0, 1], [1, 0, 1], [0, 1, 2], [0, 1, 2]])
    r = torch.from_numpy(rng.normal(size=(7, 6)))
    d = pairwise_sq_distances(r)
    pos = positive_mask(labels).numpy()
    assert contrastive_loss(d, labels).item() == pytest.approx(_brute_infonce(d.numpy(), pos), rel=1e-12)


def test_empty_positive_set_fails_loudly():
    d = torch.ones(3, 3, dtype=torch.float64).fill_diagonal_(0)
    with pytest.raises(LabelingError):
        contrastive_loss(d, np.array([[0, 0, 0], [0, 0, 0], [1, 0, 0]]))


def test_loss_nonnegative_random():
    rng = np.random.default_rng(5)
    labels = np.repeat(np.arange(4), 3)[:, None]
    for _ in range(20):
        d = pairwise_sq_distances(torch.from_numpy(rng.normal(size=(12, 4)) * rng.uniform(0.1, 3)))
        assert contrastive_loss(d, labels).item() >= 0


def test_loss_gradient_wrt_distances():
    rng = np.random.default_rng(6)
    labels = np.repeat(np.arange(3), 2)[:, None]
    d0 = pairwise_sq_distances(torch.from_numpy(rng.normal(size=(6, 3))))
    f = lambda d: contrastive_loss(d, labels)
    assert rel_err(autograd_grad(f, d0), finite_diff_grad(f, d0)) < 1e-5


def test_loss_gradient_wrt_residuals():
    rng = np.random.default_rng(7)
    labels = np.repeat(np.arange(3), 2)[:, None]
    r0 = torch.from_numpy(rng.normal(size=(6, 4)) * 0.5)
    f = lambda r: contrastive_loss(pairwise_sq_distances(r), labels)
    assert rel_err(autograd_grad(f, r0), finite_diff_grad(f, r0)) < 1e-5


def test_scaling_residuals_scales_distances_quadratically():
    rng = np.random.default_rng(8)
    labels = np.repeat(np.arange(4), 2)[:, None]
    r = torch.from_numpy(rng.normal(size=(8, 5)))
    alpha = 1.7
    d = pairwise_sq_distances(r)
    d_scaled = pairwise_sq_distances(alpha * r)
    torch.testing.assert_close(d_scaled, alpha ** 2 * d, rtol=1e-12, atol=1e-12)
    torch.testing.assert_close(contrastive_loss(d_scaled, labels), contrastive_loss(alpha ** 2 * d, labels),
                               rtol=1e-12, atol=1e-12)


def _tiny_cfg(**kw):
    return FingerprintConfig(**{"layers": 3, "width": 8, "steps": 5, "log_every": 0, **kw})


def test_zero_learning_rate_leaves_parameters(toy_cameras):
    torch.manual_seed(0)
    m = FingerprintNet(3, 8)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    trained, hist = train_fingerprint_phase1(_tiny_cfg(lr=0.0, steps=3), toy_cameras, 0, model=m)
    assert len(hist) == 3
    for k, v in trained.state_dict().items():
        assert torch.equal(v, before[k])


def test_training_is_deterministic(toy_cameras):
    _, h1 = train_fingerprint_phase1(_tiny_cfg(), toy_cameras, seed=3)
    _, h2 = train_fingerprint_phase1(_tiny_cfg(), toy_cameras, seed=3)
    assert h1 == h2


@pytest.fixture(scope="module")
def trained_tiny(toy_cameras):
    return train_fingerprint_phase1(_tiny_cfg(layers=4, width=16, steps=200, lr=3e-3), toy_cameras, seed=1)


def test_moving_average_loss_decreases(trained_tiny):
    _, hist = trained_tiny
    losses = np.array([l for _, l in hist])
    ma = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert ma[-1] < ma[0]
    # the 10-step average trends down (least-squares slope) and ends below every early value
    slope = np.polyfit(np.arange(len(ma)), ma, 1)[0]
    assert slope < 0
    assert ma[-1] < ma[: len(ma) // 4].min()
    assert losses[-1] <= losses[0]


def test_same_history_pairs_closer_than_cross_history(trained_tiny, toy_cameras):
    """Two crops of one pristine image vs one crop each of two differently compressed versions."""
    model, _ = trained_tiny

    def res(img, y, x):
        return batch_residuals(model, img[None, y:y + 64, x:x + 64].astype(np.float32)).detach()

    for cam in range(5):
        img = toy_cameras.by_camera[cam][0].load()
        a = apply_history(img, EditingHistory(jpeg_quality=42))
        b = apply_history(img, EditingHistory(jpeg_quality=88))
        intra = float(((res(img, 0, 0) - res(img, 64, 64)) ** 2).sum())
        inter = float(((res(a, 0, 0) - res(b, 64, 64)) ** 2).sum())
        assert intra < inter, (cam, intra, inter)
