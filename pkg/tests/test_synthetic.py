import math

import numpy as np
import pytest
import torch

from deformhead import storage
from deformhead.raster import render
from deformhead.synthetic import (MOUTH_LINE, DataError, drive_track, gen_identity, gen_synthetic, general_motion,
                                  identity_rng, jaw_weight, load_clip, load_dataset)

FLIP = np.diag([1.0, -1.0, -1.0])


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_same_seed_gives_identical_bytes(tmp_path):
    a = gen_synthetic(2, 6, 11, tmp_path / "a", size=32)
    b = gen_synthetic(2, 6, 11, tmp_path / "b", size=32)
    c = gen_synthetic(2, 6, 12, tmp_path / "c", size=32)
    fa, fb, fc = _files(a), _files(b), _files(c)
    assert fa == fb
    assert fa["id_000/frames.bin"] != fc["id_000/frames.bin"]


def test_zero_drive_renders_the_static_field():
    ident = gen_identity(3, 0, 5, 32, drive=np.zeros(5))
    static = ident["field"].activate()
    with torch.no_grad():
        for img, cam in zip(ident["frames"], ident["cameras"]):
            assert np.array_equal(img, render(static, cam).rgb.numpy().astype(np.float32))


def test_motion_shared_and_audio_identity_specific():
    drive = drive_track(np.random.default_rng(0), 8)
    x = gen_identity(0, 0, 8, 32, drive=drive)
    y = gen_identity(0, 1, 8, 32, drive=drive)
    assert np.array_equal(x["motion"], y["motion"])
    assert not np.allclose(x["audio"], y["audio"], atol=0.1)
    assert not np.array_equal(x["frames"], y["frames"])
    assert x["audio"].shape == (8, 16, 29) and x["motion"].shape == (8, 3, 32, 32)


def test_general_motion_is_a_jaw_drop():
    mu = np.random.default_rng(1).uniform(-1, 1, (200, 3))
    for a in (0.0, 0.4, 1.0):
        d = general_motion(mu, a)
        assert np.array_equal(d[:, [0, 2]], np.zeros((200, 2)))
        assert np.allclose(d[:, 1], -0.18 * a * jaw_weight(mu), atol=1e-15)
    assert np.all(jaw_weight(mu)[mu[:, 1] < MOUTH_LINE - 0.06] == 1.0)
    assert np.all(jaw_weight(mu)[mu[:, 1] > MOUTH_LINE + 0.02] == 0.0)


def test_drive_range_and_head_turn():
    for k in range(4):
        d = drive_track(identity_rng(5, k), 300)
        assert d.min() > 0 and d.max() < 1
    ident = gen_identity(5, 1, 300, 32)
    for cam in ident["cameras"]:
        head = FLIP @ cam.R
        yaw = math.atan2(head[0, 2], head[2, 2])
        pitch = math.asin(-head[1, 2])
        assert abs(yaw) <= math.radians(10) + 1e-12 and abs(pitch) <= math.radians(10) + 1e-12


def test_load_round_trip(tmp_path):
    root = gen_synthetic(2, 5, 4, tmp_path / "d", size=32)
    clips = load_dataset(root)
    ident = gen_identity(4, 1, 5, 32)
    c = clips[1]
    assert len(c) == 5 and np.array_equal(c.frames, ident["frames"]) and np.array_equal(c.audio, ident["audio"])
    assert np.allclose(c.cameras[2].R, ident["cameras"][2].R, atol=1e-12)
    part = c.slice(1, 4)
    assert len(part) == 3 and np.array_equal(part.motion, c.motion[1:4])


def test_invalid_inputs(tmp_path):
    with pytest.raises(ValueError):
        gen_synthetic(0, 10, 0, tmp_path / "x")
    with pytest.raises(ValueError):
        gen_synthetic(1, 4, 0, tmp_path / "x")
    with pytest.raises(DataError):
        load_clip(tmp_path)
    with pytest.raises(DataError):
        load_dataset(tmp_path)
    root = gen_synthetic(1, 5, 0, tmp_path / "d", size=32)
    storage.write_tensor(root / "id_000" / "motion.bin", np.zeros((4, 3, 32, 32), np.float32))
    with pytest.raises(DataError):
        load_clip(root / "id_000")
