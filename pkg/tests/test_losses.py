import math

import numpy as np
import pytest
import torch

from deformhead.losses import (PSNR_IDENTICAL, DegenerateSimilarityError, LossWeights, PerceptualProxy, c2f_loss,
                               dssim_loss, geo_loss, l1_loss, nc_loss_adapt, nc_loss_pretrain, perceptual_loss, psnr,
                               sc_loss, ssim)
from oracles import geo_bruteforce, l1_loops, sc_direct, ssim_bruteforce

# frozen from a plain-float evaluation: -log(e / (e + 1)) and 20 log10(255)
SC_WORKED_CASE = 0.31326168751822286
PSNR_ONE_LEVEL = 48.1308036086791


def _img(seed, h=24, w=20):
    return torch.rand(h, w, 3, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_l1():
    a = _img(0)
    assert l1_loss(a, a).item() == 0.0
    assert abs(l1_loss(torch.zeros(4, 4, 3), torch.full((4, 4, 3), 0.5)).item() - 0.5) < 1e-12
    b = _img(1)
    assert abs(l1_loss(a, b).item() - l1_loops(a.numpy(), b.numpy())) <= 1e-12
    with pytest.raises(ValueError):
        l1_loss(a, b[:-1])


def test_ssim_matches_bruteforce():
    for seed in range(3):
        a, b = _img(seed), _img(seed + 10)
        b = 0.6 * a + 0.4 * b  # correlated pair
        ref = ssim_bruteforce(a.numpy(), b.numpy())
        assert abs(ssim(a, b).item() - ref) <= 1e-9
        assert abs(dssim_loss(a, b).item() - (1 - ref) / 2) <= 1e-9


def test_ssim_examples():
    a = _img(0)
    assert abs(ssim(a, a).item() - 1) < 1e-12 and abs(dssim_loss(a, a).item()) < 1e-12
    assert ssim(a, 1 - a).item() < 1
    with pytest.raises(ValueError):
        ssim(torch.zeros(8, 20, 3), torch.zeros(8, 20, 3))


def test_psnr_closed_forms():
    a = torch.full((8, 8, 3), 0.5, dtype=torch.float64)
    assert psnr(a, a) == PSNR_IDENTICAL == math.inf
    assert abs(psnr(a, a + 1 / 255) - 48.13) <= 0.01
    assert abs(psnr(a, a + 1 / 255) - PSNR_ONE_LEVEL) <= 1e-9
    assert abs(psnr(a, a + 0.1) - 20.00) <= 0.01


def test_sc_worked_case():
    g = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    inds = [g.clone(), torch.tensor([0.0, 2.0, 0.0], dtype=torch.float64)]
    assert abs(sc_loss(g, inds, 0, 1.0).item() - SC_WORKED_CASE) <= 1e-9


def test_sc_matches_direct_evaluation():
    rng = np.random.default_rng(0)
    for n in range(1, 9):
        for _ in range(5):
            g = rng.normal(size=12)
            inds = [rng.normal(size=12) for _ in range(n)]
            k, tau = int(rng.integers(n)), float(rng.uniform(0.05, 2.0))
            got = sc_loss(torch.tensor(g), [torch.tensor(v) for v in inds], k, tau).item()
            assert abs(got - sc_direct(g, inds, k, tau)) <= 1e-12
            if n == 1:
                assert got == 0.0


def test_sc_scale_invariance():
    rng = np.random.default_rng(1)
    for n in range(2, 9):
        g = torch.tensor(rng.normal(size=9))
        inds = [torch.tensor(rng.normal(size=9)) for _ in range(n)]
        base = sc_loss(g, inds, 0, 0.07).item()
        scaled = sc_loss(g * rng.uniform(0.01, 100), [v * rng.uniform(0.01, 100) for v in inds], 0, 0.07).item()
        assert abs(base - scaled) <= 1e-12


def test_sc_errors():
    g = torch.ones(3, dtype=torch.float64)
    with pytest.raises(DegenerateSimilarityError):
        sc_loss(g, [torch.zeros(3, dtype=torch.float64)], 0, 0.07)
    with pytest.raises(IndexError):
        sc_loss(g, [g], 1, 0.07)
    with pytest.raises(ValueError):
        LossWeights(tau=0.0)


def test_nc_variants():
    x = torch.tensor([1.0, 0, 0], dtype=torch.float64)
    y = torch.tensor([0, 3.0, 0], dtype=torch.float64)
    assert nc_loss_pretrain([x, y], 0).item() == 0.0
    assert abs(nc_loss_pretrain([x, x * 2], 1).item() - 1) < 1e-15
    assert nc_loss_adapt(x, y).item() == 0.0
    rng = np.random.default_rng(2)
    for _ in range(20):
        vs = [rng.normal(size=7) for _ in range(4)]

        def cos(a, b):
            return a @ b / (np.linalg.norm(a) * np.linalg.norm(b))

        ref = np.mean([max(0.0, cos(vs[1], vs[i])) for i in (0, 2, 3)])
        assert abs(nc_loss_pretrain([torch.tensor(v) for v in vs], 1).item() - ref) <= 1e-12
        assert abs(nc_loss_adapt(torch.tensor(vs[0]), torch.tensor(vs[1])).item() - max(0.0, cos(vs[0], vs[1]))) <= 1e-12
    with pytest.raises(DegenerateSimilarityError):
        nc_loss_adapt(x, torch.zeros(3, dtype=torch.float64))


def test_perceptual_proxy():
    a, b = _img(0, 16, 16), _img(1, 16, 16)
    proxy = PerceptualProxy()
    assert proxy(a, a).item() == 0.0
    assert abs(proxy(a, b).item() - proxy(b, a).item()) < 1e-15
    assert torch.equal(PerceptualProxy(7).w0, PerceptualProxy(7).w0)
    assert abs(perceptual_loss(a, b).item() - proxy(a, b).item()) < 1e-15
    assert abs(c2f_loss(a, b, 0.1, proxy).item() - (l1_loss(a, b) + 0.1 * proxy(a, b)).item()) < 1e-15


def test_geo_matches_bruteforce():
    gen = torch.Generator().manual_seed(0)
    for _ in range(5):
        depth = 3 + torch.rand(12, 14, generator=gen, dtype=torch.float64)
        trans = torch.rand(12, 14, generator=gen, dtype=torch.float64)
        ref = geo_bruteforce(depth.numpy(), trans.numpy())
        assert abs(geo_loss(depth, trans).item() - ref) <= 1e-10


def test_geo_examples():
    fg = torch.zeros(10, 10, dtype=torch.float64)
    const = torch.full((10, 10), 2.5, dtype=torch.float64)
    assert geo_loss(const, fg).item() == 0.0
    r = torch.arange(10, dtype=torch.float64)
    ys, xs = torch.meshgrid(r, r, indexing="ij")
    ramp = 0.25 * xs - 0.5 * ys + 4  # dyadic slopes keep the differences exact
    assert geo_bruteforce(ramp.numpy(), fg.numpy()) == pytest.approx(geo_loss(ramp, fg).item(), abs=1e-12)
    tv_only = (0.25 * 90 + 0.5 * 90) / 180
    assert abs(geo_loss(ramp, fg).item() - tv_only) < 1e-12  # normal term vanishes on a plane
    assert geo_loss(ramp, torch.ones(10, 10, dtype=torch.float64)).item() == 0.0
