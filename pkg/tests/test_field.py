import math

import numpy as np
import pytest
import torch

from deformhead.field import (FACE, MOUTH, CameraPose, DegenerateQuaternionError, activate, covariance3d,
                              init_field, orbit_camera)
from helpers import random_raw
from oracles import quat_rot


def test_activation_examples():
    g = activate(torch.zeros(1, 3), torch.zeros(1, 3), torch.tensor([[1.0, 0, 0, 0]]), torch.zeros(1),
                 torch.zeros(1, 3))
    assert torch.equal(g.quat, torch.tensor([[1.0, 0, 0, 0]]))
    assert g.opacity.item() == 0.5
    assert torch.equal(g.scale, torch.ones(1, 3))
    assert torch.equal(g.color, torch.full((1, 3), 0.5))


def test_activation_invariants_random():
    for seed in range(20):
        mu, s, q, o, c = random_raw(seed, 50)
        g = activate(mu * 10, s * 5, q, o * 10, c * 10)
        assert torch.equal(g.mu, mu * 10)
        assert (g.scale > 0).all()
        assert torch.allclose(g.quat.norm(dim=-1), torch.ones(50, dtype=torch.float64), atol=1e-12)
        assert ((g.opacity >= 0) & (g.opacity <= 1)).all()
        assert ((g.color >= 0) & (g.color <= 1)).all()


def test_degenerate_quaternion():
    with pytest.raises(DegenerateQuaternionError):
        activate(torch.zeros(1, 3), torch.zeros(1, 3), torch.zeros(1, 4), torch.zeros(1), torch.zeros(1, 3))


def test_covariance_examples():
    ident = torch.tensor([[1.0, 0, 0, 0]], dtype=torch.float64)
    assert torch.allclose(covariance3d(torch.ones(1, 3, dtype=torch.float64), ident)[0], torch.eye(3, dtype=torch.float64))
    s = torch.tensor([[2.0, 1, 1]], dtype=torch.float64)
    assert torch.allclose(covariance3d(s, ident)[0], torch.diag(torch.tensor([4.0, 1, 1], dtype=torch.float64)))
    h = math.sqrt(0.5)
    rz = torch.tensor([[h, 0, 0, h]], dtype=torch.float64)
    expect = torch.diag(torch.tensor([1.0, 4.0, 1.0], dtype=torch.float64))
    assert (covariance3d(s, rz)[0] - expect).abs().max() < 1e-12


def test_covariance_matches_rotation_oracle_and_is_pd():
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = np.exp(rng.uniform(math.log(1e-4), math.log(1e2), 3))
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        cov = covariance3d(torch.tensor(s), torch.tensor(q)).numpy()
        rot = quat_rot(q)
        ref = rot @ np.diag(s**2) @ rot.T
        assert np.abs(cov - cov.T).max() <= 1e-12 * max(1.0, np.abs(cov).max())
        assert np.allclose(cov, ref, rtol=1e-10, atol=1e-18)
        np.linalg.cholesky(cov + 0.0)


def test_init_field_examples():
    a = init_field(100, 20, [[0, 0, 0], [1, 1, 1]], seed=42)
    b = init_field(100, 20, [[0, 0, 0], [1, 1, 1]], seed=42)
    for x, y in zip(a.raw(), b.raw()):
        assert torch.equal(x, y)
    assert a.count == 120
    assert int((a.region == FACE).sum()) == 100 and int((a.region == MOUTH).sum()) == 20
    assert a.inside_bounds()
    assert ((a.mu >= 0) & (a.mu <= 1)).all()
    assert torch.allclose(torch.sigmoid(a.opacity_raw), torch.full((120,), 0.1))


def test_init_scale_matches_nearest_neighbour_spacing():
    f = init_field(50, 10, [[-1, -1, -1], [1, 1, 1]], seed=3, dtype=torch.float64)
    mu = f.mu.detach().numpy()
    d = np.linalg.norm(mu[:, None] - mu[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    nn_mean = d.min(axis=1).mean()
    assert np.allclose(3 * np.exp(f.scale_raw.detach().numpy()), nn_mean, rtol=1e-12)


def test_init_field_errors():
    with pytest.raises(ValueError):
        init_field(10, 2, [[0, 0, 0], [1, 0, 1]], seed=0)
    with pytest.raises(ValueError):
        init_field(0, 2, [[0, 0, 0], [1, 1, 1]], seed=0)
    with pytest.raises(ValueError):
        init_field(10, 2, [[0, 0, 0], [1, 1, 1]], seed=0, mouth_bounds=[[0, 0, 0], [2, 1, 1]])


def test_camera_validation_and_list_form():
    cam = orbit_camera(0.1, -0.05, 3.0, 70.4, 64)
    again = CameraPose.from_json(cam.to_list(), 64, 64)
    assert np.array_equal(again.R, cam.R) and np.array_equal(again.t, cam.t)
    assert CameraPose.from_json(cam.to_json()).fx == cam.fx
    with pytest.raises(ValueError):
        CameraPose(R=np.eye(3) * 1.01, t=np.zeros(3), fx=1, fy=1, cx=0, cy=0, width=16, height=16)
    with pytest.raises(ValueError):
        CameraPose(R=np.eye(3), t=np.zeros(3), fx=1, fy=1, cx=0, cy=0, width=4, height=16)
