import numpy as np
import pytest
import torch

from internet.errors import ShapeMismatch
from internet.estimator import (
    EstimatorConfig, FeatureExtractor, HomographyEstimator, MotionHead, correlation_volume,
    cube_to_displacement, estimate, feature_homography, sample_correlation,
)
from internet.geometry import image_corners, solve_dlt


def brute_correlation(f_a, f_b):
    B, D, H, W = f_a.shape
    out = np.zeros((B, H, W, H, W))
    a, b = f_a.numpy(), f_b.numpy()
    for n in range(B):
        for i in range(H):
            for j in range(W):
                for k in range(H):
                    for l in range(W):
                        out[n, i, j, k, l] = max(0.0, float(np.dot(a[n, :, i, j], b[n, :, k, l])))
    return out


def brute_lookup(corr, target, radius):
    """Bilinear read of corr[n, i, j] around target[n, i, j] with zero padding."""
    B, H, W = corr.shape[:3]
    K = 2 * radius + 1
    out = np.zeros((B, K * K, H, W))
    for n in range(B):
        for i in range(H):
            for j in range(W):
                plane = corr[n, i, j]
                for dy in range(-radius, radius + 1):
                    for dx in range(-radius, radius + 1):
                        u, v = target[n, i, j, 0] + dx, target[n, i, j, 1] + dy
                        x0, y0 = int(np.floor(u)), int(np.floor(v))
                        a, b = u - x0, v - y0
                        val = 0.0
                        for xx, yy, w in ((x0, y0, (1 - a) * (1 - b)), (x0 + 1, y0, a * (1 - b)),
                                          (x0, y0 + 1, (1 - a) * b), (x0 + 1, y0 + 1, a * b)):
                            if 0 <= xx < W and 0 <= yy < H:
                                val += w * plane[yy, xx]
                        out[n, (dy + radius) * K + dx + radius, i, j] = val
    return out


def test_correlation_matches_brute_force(rng):
    f_a = torch.from_numpy(rng.standard_normal((2, 16, 8, 8)))
    f_b = torch.from_numpy(rng.standard_normal((2, 16, 8, 8)))
    # einsum and np.dot may sum in different orders: exact up to the last ulp
    assert np.allclose(correlation_volume(f_a, f_b).numpy(), brute_correlation(f_a, f_b), rtol=1e-15, atol=1e-14)


def test_correlation_exact_on_integer_features(rng):
    # integer-valued features make every summation order exact
    f_a = torch.from_numpy(rng.integers(-3, 4, size=(2, 16, 8, 8)).astype(np.float64))
    f_b = torch.from_numpy(rng.integers(-3, 4, size=(2, 16, 8, 8)).astype(np.float64))
    assert np.array_equal(correlation_volume(f_a, f_b).numpy(), brute_correlation(f_a, f_b))
    assert np.array_equal(correlation_volume(f_a.float(), f_b.float()).numpy(), brute_correlation(f_a, f_b))


def test_correlation_one_hot_is_identity():
    f = torch.eye(64).reshape(64, 8, 8).unsqueeze(0)
    c = correlation_volume(f, f).reshape(64, 64)
    assert torch.equal(c, torch.eye(64))


def test_correlation_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        correlation_volume(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 8, 4))


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_sampling_integer_offsets_exact(rng, dtype):
    corr = correlation_volume(*(torch.from_numpy(rng.standard_normal((1, 16, 8, 8))).to(dtype) for _ in range(2)))
    t = torch.tensor([[1, 0, 2], [0, 1, -1], [0, 0, 1]], dtype=dtype)[None]
    out = sample_correlation(corr, t, 4)
    assert out.shape == (1, 81, 8, 8)
    grid = np.stack(np.meshgrid(np.arange(8), np.arange(8), indexing="xy"), -1)[None] + np.array([2, -1])
    ref = brute_lookup(corr.double().numpy(), grid, 4)
    assert np.array_equal(out.double().numpy(), ref)


def test_sampling_identity_centre_channel(rng):
    corr = correlation_volume(*(torch.from_numpy(rng.standard_normal((1, 16, 8, 8))) for _ in range(2)))
    out = sample_correlation(corr, torch.eye(3, dtype=torch.float64)[None], 4)
    diag = torch.diagonal(corr.reshape(64, 64)).reshape(8, 8)
    assert torch.equal(out[0, 40], diag)


@pytest.mark.parametrize("dtype", [torch.float64, torch.float32])
def test_sampling_fractional_offsets(rng, dtype):
    from internet.geometry import pixel_grid, project_points

    corr = correlation_volume(*(torch.from_numpy(rng.standard_normal((2, 16, 8, 8))).to(dtype) for _ in range(2)))
    d = torch.from_numpy(rng.uniform(-4, 4, size=(2, 4, 2)))
    h = solve_dlt(image_corners(8, 8, dtype=torch.float64), d).to(dtype)
    target = project_points(h, pixel_grid(8, 8, dtype=dtype)[None].expand(2, -1, -1, -1))
    out = sample_correlation(corr, h, 4).double().numpy()
    ref = brute_lookup(corr.double().numpy(), target.double().numpy(), 4)
    # float32 rounding scales with the magnitude of the volume
    tol = 1e-5 if dtype == torch.float64 else 1e-6 * corr.abs().max().item()
    assert np.abs(out - ref).max() < tol


def test_feature_homography_scales_translation():
    t = torch.tensor([[1, 0, 8.0], [0, 1, -4.0], [0, 0, 1]])
    f = feature_homography(t)
    assert torch.allclose(f, torch.tensor([[1, 0, 2.0], [0, 1, -1.0], [0, 0, 1]]))


def test_cube_layout():
    cube = torch.arange(8.0).reshape(1, 2, 2, 2)
    d = cube_to_displacement(cube)[0]
    # P(0,0,0)=du1, P(1,0,0)=dv1, P(0,0,1)=du2 ...
    assert d.tolist() == [[0, 4], [1, 5], [2, 6], [3, 7]]


def test_feature_extractor_shapes():
    fx = FeatureExtractor(widths=(8, 12), out_dim=16)
    assert fx(torch.zeros(2, 3, 32, 48)).shape == (2, 16, 8, 12)
    with pytest.raises(ShapeMismatch):
        fx(torch.zeros(1, 3, 30, 32))


def test_motion_head_reduces_to_cube():
    head = MotionHead(81, 16, hidden=8, groups=4)
    n_pool = sum(isinstance(m, torch.nn.MaxPool2d) for m in head.blocks)
    assert n_pool == 3
    assert head(torch.randn(2, 81, 16, 16)).shape == (2, 4, 2)


def small_estimator(size=32, **kw):
    return HomographyEstimator(EstimatorConfig(image_size=size, widths=(8, 8), feature_dim=8, head_hidden=8,
                                               head_groups=2, **kw))


def test_history_length_and_zero_init():
    torch.manual_seed(0)
    m = small_estimator()
    a = torch.rand(2, 3, 32, 32)
    hist = m(a, a, n_iters=4)
    assert len(hist) == 4
    # zero-initialised output layer: untrained model predicts exactly nothing
    assert all(torch.equal(h, torch.zeros(2, 4, 2)) for h in hist)
    final, hist2 = estimate(m, a, a)
    assert len(hist2) == 6


def test_iterations_accumulate():
    torch.manual_seed(0)
    m = small_estimator()
    torch.nn.init.normal_(m.motion_head.out.weight, std=1e-3)
    a, b = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
    state = m(a, b, n_iters=3, return_state=True)
    deltas = [state.history[0]] + [state.history[i] - state.history[i - 1] for i in (1, 2)]
    assert not torch.equal(deltas[1], deltas[2])
    assert torch.allclose(solve_dlt(image_corners(32, 32), state.displacement), state.h)


def test_shape_mismatch_on_wrong_size():
    with pytest.raises(ShapeMismatch):
        small_estimator()(torch.zeros(1, 3, 64, 64), torch.zeros(1, 3, 64, 64))


def test_gradients_reach_all_parameters():
    torch.manual_seed(0)
    m = small_estimator()
    a, b = torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
    sum(h.sum() for h in m(a, b)).backward()
    assert m.motion_head.out.weight.grad.abs().sum() > 0
    torch.nn.init.normal_(m.motion_head.out.weight, std=1e-2)
    m.zero_grad()
    sum(h.sum() for h in m(a, b)).backward()
    assert all(p.grad is not None and p.grad.abs().sum() > 0 for p in m.feature_extractor.parameters() if p.dim() > 1)
