import json
import logging

import pytest
import torch

from deformhead.config import ABLATIONS, ConfigError, OptimConfig, TrainConfig, config_from_dict, load_config
from deformhead.optim import GuardedAdam


def _adam(params, **kw):
    o = OptimConfig()
    return GuardedAdam([{"params": params, "lr": kw.get("lr", o.lr_mlp)}], betas=o.betas, eps=o.eps)


@pytest.mark.parametrize("field", ["lr_hash", "lr_mlp", "lr_mu", "lr_scale", "lr_quat", "lr_opacity", "lr_color"])
def test_scalar_quadratic_converges_within_500_steps(field):
    # Adam travels about lr per step, so the start sits within reach of the smallest rate
    x = torch.tensor([0.1], dtype=torch.float64, requires_grad=True)
    opt = _adam([x], lr=getattr(OptimConfig(), field))
    for _ in range(500):
        opt.zero_grad()
        (0.5 * x**2).sum().backward()
        opt.step()
    assert abs(x.item()) <= 1e-6


def test_zero_gradient_leaves_parameters_unchanged():
    x = torch.tensor([0.3, -1.2], dtype=torch.float64, requires_grad=True)
    before = x.detach().clone()
    opt = _adam([x])
    for _ in range(10):
        opt.zero_grad()
        (x * 0).sum().backward()
        opt.step()
    assert torch.equal(x.detach(), before)


def test_non_finite_gradient_skipped(caplog):
    x = torch.tensor([1.0], requires_grad=True)
    opt = _adam([x])
    opt.zero_grad()
    (x * float("nan")).sum().backward()
    with caplog.at_level(logging.WARNING):
        applied = opt.step()
    assert not applied and opt.skipped == 1 and x.item() == 1.0
    assert "skipped" in caplog.text


def test_deterministic():
    def run():
        torch.manual_seed(0)
        x = torch.randn(5, dtype=torch.float64, requires_grad=True)
        opt = _adam([x])
        for _ in range(50):
            opt.zero_grad()
            (x**4).sum().backward()
            opt.step()
        return x.detach()

    assert torch.equal(run(), run())


def test_config_round_trip_and_unknown_keys(tmp_path):
    cfg = TrainConfig()
    again = config_from_dict(json.loads(cfg.dumps()))
    assert again == cfg
    with pytest.raises(ConfigError):
        config_from_dict({"sedd": 1})
    with pytest.raises(ConfigError):
        config_from_dict({"loss": {"tau": 0.07, "sc_weight": 1}})
    with pytest.raises(ConfigError):
        config_from_dict({"ablation": {"routing": "sideways"}})
    with pytest.raises(ConfigError):
        config_from_dict({"image_size": 30})
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    (tmp_path / "ok.json").write_text(json.dumps({"seed": 4, "loss": {"sc": 0.0}, "pretrain": {"steps": 10}}))
    cfg = load_config(tmp_path / "ok.json")
    assert cfg.seed == 4 and cfg.loss.sc == 0.0 and cfg.pretrain.steps == 10 and cfg.pretrain.warm_steps == 600


def test_ablation_presets_cover_every_row():
    rows = {"wo_fm", "wo_sc", "wo_c2f", "audio_only", "motion_only", "general_only", "individual_only",
            "nc_only", "sc_only", "no_contrast", "attrs_mu", "attrs_all", "attrs_mu_rot_scale", "full"}
    assert rows <= set(ABLATIONS)
    for name in ABLATIONS:
        TrainConfig().with_ablation(name)
    assert TrainConfig().with_ablation("wo_sc").ablation.nc_loss is True
    with pytest.raises(ConfigError):
        TrainConfig().with_ablation("nope")
