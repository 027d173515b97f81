import numpy as np
import pytest
import torch

from deformhead.encoders import MLP, TriPlaneEncoder, grad_check, hash_index, level_resolutions, mlp_forward
from deformhead.gradcheck import check_encoder, check_mlp

# frozen from plain integer arithmetic: (3 ^ (7 * 2654435761)) % 4096
HASH_3_7 = 980

BOUNDS = torch.tensor([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], dtype=torch.float64)


def _encoder(**kw):
    return TriPlaneEncoder(BOUNDS, generator=torch.Generator().manual_seed(0), init_range=1.0, **kw).double()


def test_hash_examples():
    assert hash_index(0, 0, 4096) == 0
    assert hash_index(1, 0, 4096) == 1
    assert hash_index(3, 7, 4096) == HASH_3_7
    t = hash_index(torch.tensor([3, 0, 1]), torch.tensor([7, 0, 0]), 4096)
    assert t.tolist() == [HASH_3_7, 0, 1]


def test_level_resolutions():
    r = level_resolutions(8, 8, 128)
    assert r[0] == 8 and r[-1] == 128 and len(r) == 8 and r == sorted(r)


def test_corner_and_centre_lookups():
    enc = _encoder(n_levels=1, n_min=4, n_max=4)
    table = enc.tables[0, 0]
    corner = torch.tensor([[0.5, 0.25]], dtype=torch.float64)  # grid point (2, 1)
    assert torch.equal(enc.encode_plane(0, corner)[0], table[hash_index(2, 1, enc.table_size)])
    centre = torch.tensor([[0.625, 0.375]], dtype=torch.float64)
    idx = [hash_index(x, y, enc.table_size) for x, y in ((2, 1), (3, 1), (2, 2), (3, 2))]
    assert torch.allclose(enc.encode_plane(0, centre)[0], table[idx].mean(0), atol=1e-15)


def test_triplane_decomposition_and_dims():
    for levels, feats in ((8, 2), (4, 3), (1, 1)):
        enc = _encoder(n_levels=levels, n_features=feats)
        mu = torch.rand(10, 3, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        out = enc(mu)
        assert out.shape == (10, 3 * levels * feats)
        parts = [enc.encode_plane(0, mu[:, [0, 1]]), enc.encode_plane(1, mu[:, [1, 2]]), enc.encode_plane(2, mu[:, [0, 2]])]
        assert torch.equal(out, torch.cat(parts, -1))
        assert torch.equal(out, enc(mu))
    zero = _encoder()
    with torch.no_grad():
        zero.tables.zero_()
    assert torch.equal(zero(torch.rand(5, 3, dtype=torch.float64)), torch.zeros(5, 48, dtype=torch.float64))


def test_continuity_across_cell_boundaries():
    enc = _encoder()
    for res in enc.resolutions:
        edge = torch.tensor([[3 / res, 0.37]], dtype=torch.float64)
        for d in (1e-7, 1e-9):
            left = enc.encode_plane(0, edge - torch.tensor([[d, 0.0]], dtype=torch.float64))
            right = enc.encode_plane(0, edge + torch.tensor([[d, 0.0]], dtype=torch.float64))
            assert (left - right).abs().max() < 1e4 * d


def test_out_of_bounds_is_clamped_and_counted():
    enc = _encoder()
    p = torch.tensor([[1.5, -0.2], [0.5, 0.5]], dtype=torch.float64)
    out = enc.encode_plane(0, p)
    assert enc.clamp_count == 1
    assert torch.equal(out[0], enc.encode_plane(0, torch.tensor([[1.0, 0.0]], dtype=torch.float64))[0])


def test_mlp_examples():
    w = torch.zeros(4, 3, dtype=torch.float64)
    b = torch.tensor([1.0, -2.0, 0.5, 3.0], dtype=torch.float64)
    assert torch.equal(mlp_forward([(w, b)], torch.randn(5, 3, dtype=torch.float64)), b.expand(5, 4))
    rng = np.random.default_rng(0)
    W, B, X = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=(6, 3))
    got = mlp_forward([(torch.tensor(W), torch.tensor(B))], torch.tensor(X)).numpy()
    assert np.abs(got - (X @ W.T + B)).max() < 1e-12
    with pytest.raises(ValueError):
        mlp_forward([(torch.tensor(W), torch.tensor(B))], torch.zeros(2, 5, dtype=torch.float64))
    m = MLP([3, 8, 2]).double()
    x = torch.tensor(X)
    assert torch.equal(m(x), mlp_forward([(l.weight, l.bias) for l in m.layers], x))
    with pytest.raises(ValueError):
        m(torch.zeros(2, 4, dtype=torch.float64))
    z = MLP([3, 8, 2], zero_last=True)
    assert torch.equal(z(torch.randn(4, 3)), torch.zeros(4, 2))


def test_grad_check_helper():
    x = torch.randn(7, dtype=torch.float64)
    assert grad_check(lambda v: 0.5 * (v * v).sum(), x) <= 1e-8
    params = [(torch.randn(5, 3, dtype=torch.float64), torch.randn(5, dtype=torch.float64)),
              (torch.randn(2, 5, dtype=torch.float64), torch.randn(2, dtype=torch.float64))]
    inp = torch.randn(4, 3, dtype=torch.float64)
    assert grad_check(lambda v: (mlp_forward(params, v.view(4, 3)) ** 2).sum() / 2, inp) <= 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_encoder_and_mlp_gradients(seed):
    for check in (check_encoder, check_mlp):
        stats = check(seed)
        assert stats.checked > 0 and stats.worst <= 1e-4
