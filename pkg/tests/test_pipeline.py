import math

import numpy as np
import pytest
import torch

from ctbound import foj, losses, models, noise, pipeline, render, training
from ctbound.exceptions import ConfigurationError, InputError, TrainingError
from ctbound.foj import JunctionParams, ParamsGrid, PatchGridSpec
from ctbound.nn import positional_encoding_grid


@pytest.fixture(scope="module")
def tiny_init():
    torch.manual_seed(0)
    return models.InitNet(1, 21, 81, width=0.1).eval()


@pytest.fixture(scope="module")
def tiny_refine():
    torch.manual_seed(1)
    net = models.RefineNet(1, 21, d=16, layers=2, heads=2, d_ff=32)
    with torch.no_grad():
        for p in net.head.parameters():
            p.normal_(0, 0.05)
    return net.eval()


# --- patch extraction -------------------------------------------------------------

@pytest.mark.parametrize("stride,count", [(21, 49), (1, 127 * 127)])
def test_patch_counts(stride, count):
    grid = PatchGridSpec(147, 147, 21, stride)
    assert grid.n_patches == count


def test_non_overlapping_patches_reassemble_the_image():
    img = np.random.default_rng(0).poisson(3.0, (147, 147, 1)).astype(float)
    grid = PatchGridSpec.for_image(img, 21, 21)
    patches, idx = pipeline.extract_patches(img, grid)
    out = np.zeros_like(img)
    for p, (m, n) in zip(patches, idx):
        out[21 * m:21 * m + 21, 21 * n:21 * n + 21] = p
    np.testing.assert_array_equal(out, img)


def test_image_smaller_than_patch_is_rejected(tiny_init):
    with pytest.raises(InputError):
        PatchGridSpec.for_image(np.zeros((10, 30)), 21, 1)
    with pytest.raises(InputError):
        pipeline.as_counts(np.zeros((2, 2, 2, 2)))


# --- initialization stage ---------------------------------------------------------

def test_init_forward_returns_canonical_angles(tiny_init):
    rng = np.random.default_rng(1)
    patches = rng.poisson(rng.uniform(0.5, 10), (1000, 21, 21, 1)).astype(float)
    geo = pipeline.init_geometry(tiny_init, patches, 5.0)
    a = geo[:, 2:]
    assert np.all((a >= 0) & (a < 2 * np.pi)) and np.all(np.diff(a, axis=1) >= 0)


def test_constant_patch_colors_ignore_geometry(tiny_init):
    p = pipeline.init_forward(tiny_init, np.full((21, 21), 4.0))
    np.testing.assert_allclose(p.colors, 4.0)


def _tensor(p):
    return (torch.tensor(p.vertex[None]), torch.tensor(p.angles[None]),
            torch.tensor(p.colors[None]))


def test_loss_init_zero_at_truth_and_ignores_empty_wedge_color():
    truth = JunctionParams([-30.0, 0.0], [0.0, 3.0, 3.3], [[0.9], [0.1], [0.4]])
    v, a, c = _tensor(truth)
    assert losses.loss_init(v, a, c, v, a, c, 21).item() == 0.0
    # the vertex lies far left, so wedges 2 and 3 never reach a pixel at eps -> 0
    c2 = c.clone()
    c2[0, 1] = 0.5
    assert losses.loss_init(v, a, c2, v, a, c, 21, eps_delta=1e-9).item() < 1e-12


def test_loss_init_matches_independent_renderer():
    rng = np.random.default_rng(2)
    eps_delta = 0.05
    pred = [JunctionParams(rng.uniform(-5, 5, 2), rng.uniform(0, 6.28, 3), rng.uniform(size=(3, 1)))
            for _ in range(3)]
    true = [JunctionParams(rng.uniform(-5, 5, 2), rng.uniform(0, 6.28, 3), rng.uniform(size=(3, 1)))
            for _ in range(3)]
    x, y = foj.patch_coordinates(21)
    pts = np.stack([x, y], -1)
    want = np.mean([(np.einsum("hwj,jk->hwk", foj.smooth_wedge_weights(pts, p, eps_delta), p.colors)
                     - np.einsum("hwj,jk->hwk", foj.smooth_wedge_weights(pts, t, eps_delta),
                                 t.colors)) ** 2 for p, t in zip(pred, true)])
    stack = lambda ps: [torch.tensor(np.stack(v)) for v in
                        zip(*[(p.vertex, p.angles, p.colors) for p in ps])]
    got = losses.loss_init(*stack(pred), *stack(true), 21, eps_delta).item()
    assert got == pytest.approx(want, rel=1e-9)


def test_torch_weights_agree_with_numpy():
    rng = np.random.default_rng(3)
    x, y = foj.patch_coordinates(21)
    pts = np.stack([x, y], -1)
    for _ in range(20):
        p = JunctionParams(rng.uniform(-8, 8, 2), rng.uniform(0, 6.28, 3))
        w = render.wedge_weights(torch.tensor(p.vertex[None]), torch.tensor(p.angles[None]),
                                 21, 0.3)[0].permute(1, 2, 0).numpy()
        np.testing.assert_allclose(w, foj.smooth_wedge_weights(pts, p, 0.3), atol=1e-5)


# --- refinement stage -------------------------------------------------------------

def _params_grid(grid, seed=4):
    rng = np.random.default_rng(seed)
    M, N = grid.shape
    return ParamsGrid(rng.uniform(-5, 5, (M, N, 2)), rng.uniform(0, 6.28, (M, N, 3)),
                      rng.uniform(0, 5, (M, N, 3, 1)))


@pytest.mark.parametrize("H,W,s", [(21, 21, 1), (30, 47, 3), (40, 25, 5)])
def test_refine_forward_keeps_grid_shape(tiny_refine, H, W, s):
    img = np.random.default_rng(5).poisson(3.0, (H, W)).astype(float)
    grid = PatchGridSpec.for_image(img, 21, s)
    out = pipeline.refine_forward(tiny_refine, _params_grid(grid), img, grid, 3.0)
    assert out.shape == grid.shape
    assert np.all(np.diff(out.angles, axis=-1) >= 0) and np.all(out.angles < 2 * np.pi)


def test_refine_is_equivariant_to_patch_order(tiny_refine):
    T = 12
    torch.manual_seed(6)
    geo, col = torch.randn(1, T, 5), torch.rand(1, T, 3, 1)
    pos = torch.as_tensor(positional_encoding_grid(np.arange(T) // 4, np.arange(T) % 4, 16),
                          dtype=torch.float32)
    perm = torch.randperm(T)
    with torch.no_grad():
        a = tiny_refine(geo, col, pos)[:, perm]
        b = tiny_refine(geo[:, perm], col[:, perm], pos[perm])
    np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-5)


def test_refine_only_sees_parameters(tiny_refine):
    grid = PatchGridSpec(27, 27, 21, 3)
    params = _params_grid(grid)
    a = pipeline.refine_geometry(tiny_refine, params, grid, 3.0)
    # the geometry pass has no image argument; colors are the only appearance input
    b = pipeline.refine_geometry(tiny_refine, params.copy(), grid, 3.0)
    np.testing.assert_array_equal(a, b)


def test_zeroed_encoder_gives_per_patch_outputs():
    torch.manual_seed(7)
    net = models.RefineNet(1, 21, d=16, layers=2, heads=2, d_ff=32)
    with torch.no_grad():
        for layer in net.encoder.layers:
            for p in layer.parameters():
                p.zero_()
        net.head.weight.normal_(0, 0.1)
    geo, col = torch.randn(1, 6, 5), torch.rand(1, 6, 3, 1)
    pos = torch.zeros(6, 16)
    with torch.no_grad():
        full = net(geo, col, pos)
        for t in range(6):
            alone = net(geo[:, t:t + 1], col[:, t:t + 1], pos[t:t + 1])
            np.testing.assert_allclose(full[:, t].numpy(), alone[:, 0].numpy(), atol=1e-6)


# --- refinement losses ------------------------------------------------------------

def test_loss_ref1_examples():
    truth = torch.tensor([[1.0, 2.0, 0.5, 2.0, 4.0]], dtype=torch.float64)
    assert losses.loss_ref1(truth, truth).item() == 0.0
    shifted = truth.clone()
    shifted[0, 2:] += 2 * math.pi
    assert losses.loss_ref1(shifted, truth).item() == pytest.approx(0.0, abs=1e-20)
    moved = truth.clone()
    moved[0, 0] += 1.0
    assert losses.loss_ref1(moved, truth).item() == pytest.approx(1.0)


def test_wrap_angle_range():
    d = torch.linspace(-20, 20, 1001, dtype=torch.float64)
    w = losses.wrap_angle(d)
    assert torch.all(w > -math.pi) and torch.all(w <= math.pi)
    np.testing.assert_allclose(torch.cos(w).numpy(), torch.cos(d).numpy(), atol=1e-9)
    np.testing.assert_allclose(torch.sin(w).numpy(), torch.sin(d).numpy(), atol=1e-9)


def test_loss_ref2_single_patch_has_no_consistency_terms():
    img = torch.rand(21, 21, 1, dtype=torch.float64)
    grid = PatchGridSpec(21, 21, 21, 1)
    v = torch.tensor([[1.0, -2.0]], dtype=torch.float64)
    a = torch.tensor([[0.3, 2.0, 4.0]], dtype=torch.float64)
    _, terms = losses.loss_ref2(v, a, img, grid, return_terms=True)
    assert terms["l_b"].item() == pytest.approx(0.0, abs=1e-12)
    # with soft wedges l_c is a per-pixel weighted color variance; it vanishes
    # in the hard-wedge limit
    _, hard = losses.loss_ref2(v, a, img, grid, eps_delta=1e-9, return_terms=True)
    assert hard["l_c"].item() < 1e-6 < terms["l_c"].item()


def test_loss_ref2_patch_term_vanishes_on_exact_noiseless_image():
    sample = noise.gen_composite_images(1, H=45, W=45, seed=3, max_shapes=1)[0]
    grid = PatchGridSpec(45, 45, 21, 6)
    truth = noise.composite_truth(sample, grid)
    truth_geo = truth.geometry().reshape(-1, 5)
    # keep only patches whose hard render matches the clean image exactly
    patches = foj.extract_patch_array(sample.clean, grid)
    exact = np.all(np.abs(foj.render_grid_colors(truth, 21) - patches) < 1e-12, axis=(2, 3, 4))
    assert exact.any()
    img = torch.tensor(sample.clean)
    g = torch.tensor(truth_geo)
    _, terms = losses.loss_ref2(g[:, :2], g[:, 2:], img, grid, eps_delta=1e-9, return_terms=True)
    w = render.wedge_weights(g[:, :2], render.canonicalize_angles(g[:, 2:]), 21, 1e-9)
    colors = render.wedge_colors(render.unfold_patches(img, grid), w)
    per_patch = ((colors[:, :, None, None, :] - render.unfold_patches(img, grid)[:, None]) ** 2
                 ).sum(-1).mul(w).sum((1, 2, 3)).reshape(grid.shape).numpy()
    np.testing.assert_allclose(per_patch[exact], 0.0, atol=1e-6)


def test_loss_ref2_boundary_term_matches_two_pass_oracle():
    rng = np.random.default_rng(8)
    grid = PatchGridSpec(33, 30, 21, 3)
    M, N = grid.shape
    v = torch.tensor(rng.uniform(-6, 6, (M * N, 2)))
    a = torch.tensor(np.sort(rng.uniform(0, 6.28, (M * N, 3)), axis=1))
    img = torch.rand(33, 30, 1, dtype=torch.float64)
    _, terms = losses.loss_ref2(v, a, img, grid, eps=0.75, return_terms=True)
    pg = ParamsGrid(v.numpy().reshape(M, N, 2), a.numpy().reshape(M, N, 3), np.zeros((M, N, 3, 1)))
    maps = foj.render_grid_boundaries(pg, 21, 0.75)
    glob = foj.aggregate_boundary(maps, grid)
    oracle = sum(((glob[m * 3:m * 3 + 21, n * 3:n * 3 + 21] - maps[m, n]) ** 2).sum()
                 for m in range(M) for n in range(N))
    assert terms["l_b"].item() == pytest.approx(oracle, rel=1e-6, abs=1e-9)


def test_loss_ref2_without_consistency_equals_patch_term():
    rng = np.random.default_rng(9)
    grid = PatchGridSpec(27, 27, 21, 3)
    P = grid.n_patches
    v = torch.tensor(rng.uniform(-4, 4, (P, 2)))
    a = torch.tensor(np.sort(rng.uniform(0, 6.28, (P, 3)), axis=1))
    img = torch.tensor(rng.uniform(size=(27, 27, 1)))
    total = losses.loss_ref2(v, a, img, grid, lambda_b=0.0, lambda_c=0.0).item()
    # independent evaluator: NumPy soft weights, weighted-mean colors, weighted squared error
    x, y = foj.patch_coordinates(21)
    pts = np.stack([x, y], -1)
    patches = foj.extract_patch_array(img.numpy(), grid).reshape(P, 21, 21, 1)
    lp = 0.0
    for i in range(P):
        w = foj.smooth_wedge_weights(pts, JunctionParams(v[i].numpy(), a[i].numpy()), 0.05)
        mass = w.sum((0, 1))
        c = np.einsum("hwj,hwk->jk", w, patches[i]) / np.maximum(mass, 1e-3)[:, None]
        lp += np.sum(w * ((c[None, None] - patches[i][:, :, None]) ** 2).sum(-1))
    assert total == pytest.approx(lp, rel=1e-6)


# --- schedules and training -------------------------------------------------------

def test_step_decay_schedule():
    cfg = training.InitTrainConfig()
    assert [cfg.lr_at(e) for e in (0, 79, 80, 160)] == pytest.approx([2e-4, 2e-4, 1e-4, 5e-5])


def test_triangular_schedule():
    cfg = training.RefineTrainConfig()
    assert cfg.lr_at("ref2", 0) == pytest.approx(1.75e-4)
    assert cfg.lr_at("ref2", 10) == pytest.approx(3.5e-4)
    assert cfg.lr_at("ref2", 20) == pytest.approx(1.75e-4)
    assert cfg.lr_at("ref2", 5) == pytest.approx((1.75e-4 + 3.5e-4) / 2)
    assert cfg.lr_at("ref1", 3) == 5e-5
    with pytest.raises(ConfigurationError):
        training.RefineTrainConfig(lr_low=1.0, lr_high=0.5)


def test_init_training_is_deterministic_and_logs(tmp_path):
    samples = noise.gen_patch_dataset(24, seed=1)
    runs = []
    for _ in range(2):
        torch.manual_seed(0)
        net = models.InitNet(1, 21, 81, width=0.05)
        rows = training.train_init(net, samples, training.InitTrainConfig(
            epochs=2, batch_size=8, lr=1e-3, decay_every=1), checkpoint_dir=tmp_path)
        runs.append((net, rows))
    for (k, a), (_, b) in zip(runs[0][0].state_dict().items(), runs[1][0].state_dict().items()):
        assert torch.equal(a, b), k
    assert [r[2] for r in runs[0][1]] == pytest.approx([1e-3, 5e-4])
    assert (tmp_path / "init_epoch0001.ckpt").exists()
    training.write_log(tmp_path / "log.csv", runs[0][1])
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "epoch,phase,lr,loss,wall_ms"


def test_init_training_aborts_on_divergence():
    samples = noise.gen_patch_dataset(8, seed=2)
    torch.manual_seed(0)
    net = models.InitNet(1, 21, 81, width=0.05)
    with torch.no_grad():
        net.head.bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="diverged"):
        training.train_init(net, samples, training.InitTrainConfig(epochs=1, batch_size=8))
    assert torch.isnan(net.head.bias).all()   # restored to the last good (initial) weights


def test_refine_training_runs_both_phases():
    torch.manual_seed(0)
    init = models.InitNet(1, 21, 81, width=0.05).eval()
    grid = PatchGridSpec(33, 33, 21, 3)
    items = []
    for s in noise.gen_composite_images(2, H=33, W=33, seed=5):
        items.append(training.prepare_refine_item(init, s.noisy.counts, s.noisy.alpha, grid,
                                                  noise.composite_truth(s, grid)))
    net = models.RefineNet(1, 21, d=16, layers=1, heads=2, d_ff=16)
    cfg = training.RefineTrainConfig(phase1_epochs=2, phase2_epochs=2, batch_size=2,
                                     crop_tokens=3, cycle_epochs=2.0)
    rows = training.train_refine(net, items, cfg)
    assert [r[1] for r in rows] == ["ref1", "ref1", "ref2", "ref2"]
    assert all(np.isfinite(r[3]) for r in rows)


# --- end-to-end inference ---------------------------------------------------------

def test_infer_shapes_and_evaluation_counts(tiny_init, tiny_refine):
    img = np.random.default_rng(10).poisson(4.0, (45, 39, 1)).astype(float)
    grid = PatchGridSpec.for_image(img, 21, 3)
    res = pipeline.infer(img, grid, tiny_init, tiny_refine, alpha=4.0)
    assert res.boundary.shape == (45, 39) and res.color.shape == (45, 39, 1)
    assert res.evaluations == {"init_patches": grid.n_patches, "encoder_passes": 1}
    assert set(res.timings_ms) == {"extract", "init", "refine", "aggregate"}
    assert res.timing_line().startswith("timing_ms ")
    with pytest.raises(InputError):
        pipeline.infer(img[:30], grid, tiny_init)


def test_params_file_round_trip(tmp_path, tiny_init):
    img = np.random.default_rng(11).poisson(4.0, (30, 30, 1)).astype(float)
    grid = PatchGridSpec.for_image(img, 21, 3)
    res = pipeline.infer(img, grid, tiny_init, alpha=4.0)
    pipeline.write_params_grid(tmp_path / "p.txt", res.params, grid, 4.0)
    params, grid2, alpha = pipeline.read_params_grid(tmp_path / "p.txt")
    assert grid2 == grid and alpha == 4.0
    np.testing.assert_array_equal(params.geometry(), res.params.geometry())
    np.testing.assert_array_equal(params.colors, res.params.colors)
