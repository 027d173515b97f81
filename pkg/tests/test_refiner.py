import pytest
import torch

from deformhead import storage
from deformhead.gradcheck import check_refiner
from deformhead.losses import PerceptualProxy, c2f_loss
from deformhead.refiner import IndivisibleSizeError, Refiner, RefinerTrainConfig, refine, train_refiner
from deformhead.synthetic import blur_pairs, gaussian_blur


def _img(seed, size=64):
    return torch.rand(size, size, 3, generator=torch.Generator().manual_seed(seed))


def test_identity_at_init_and_shapes():
    r = Refiner(0)
    for size in (64, 128):
        x = _img(size, size)
        y = r(x)
        assert y.shape == x.shape and torch.equal(y, x)
    batch = torch.stack([_img(1), _img(2)])
    assert torch.equal(r(batch), batch)
    assert torch.equal(refine(None, batch[0]), batch[0])
    with pytest.raises(IndivisibleSizeError):
        r(torch.zeros(20, 20, 3))


def test_output_range():
    r = Refiner(0)
    with torch.no_grad():
        for p in r.parameters():
            p.normal_(0, 0.5)
    y = r(_img(3))
    assert (y >= 0).all() and (y <= 1).all()


def test_identical_pairs_keep_zero_loss():
    pairs = [(_img(i, 32), _img(i, 32)) for i in range(3)]
    _, hist = train_refiner(pairs, RefinerTrainConfig(steps=5, log_every=0))
    assert hist[0] == 0.0 and max(hist) < 1e-6


def test_warm_start_reproduces_saved_loss(tmp_path):
    pairs = blur_pairs(4, 0, size=32)
    ref, _ = train_refiner(pairs, RefinerTrainConfig(steps=20, log_every=0, batch=4))
    storage.write_checkpoint(tmp_path / "r.ckpt", storage.module_arrays("refiner", ref))
    loaded = storage.load_module(Refiner(5), storage.read_checkpoint(tmp_path / "r.ckpt"), "refiner")
    proxy = PerceptualProxy()
    with torch.no_grad():
        expect = sum(c2f_loss(f, t, 0.1, proxy) for f, t in zip(ref(torch.stack([p[0] for p in pairs])),
                                                               [p[1] for p in pairs])) / 4
    _, hist = train_refiner(pairs, RefinerTrainConfig(steps=1, log_every=0, batch=4), refiner=loaded, proxy=proxy)
    assert hist[0] == pytest.approx(expect.item(), abs=1e-7)


def test_empty_dataset():
    with pytest.raises(ValueError):
        train_refiner([])


def test_blur_helper():
    x = _img(0, 32).double()
    assert torch.allclose(gaussian_blur(torch.full((16, 16, 3), 0.3, dtype=torch.float64), 1.0),
                          torch.full((16, 16, 3), 0.3, dtype=torch.float64), atol=1e-15)
    assert gaussian_blur(x, 1.0).shape == x.shape
    assert (gaussian_blur(x, 1.0) - x).abs().mean() > 0.05


@pytest.mark.parametrize("seed", range(2))
def test_refiner_gradients(seed):
    stats = check_refiner(seed)
    assert stats.checked > 0 and stats.worst <= 1e-4
