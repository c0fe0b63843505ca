import json
import struct

import numpy as np
import pytest
import torch

from jmvr.checkpoint import MAGIC, check_compatible, load_checkpoint, save_checkpoint
from jmvr.config import RunConfig
from jmvr.data import DatasetManifest
from jmvr.errors import ConfigError, DataError
from jmvr.model import JMVR
from jmvr.train import (
    checkpoint_header, load_model, load_split, make_optimizer, probe_loss, save_model, smoothed, train,
)

from conftest import tiny_config

CAPS = ["a red circle and a blue square", "a green triangle"]


def model_and_eeg(**kw):
    cfg = tiny_config(**kw)
    torch.manual_seed(0)
    return JMVR(cfg), torch.randn(2, cfg.C, cfg.T, generator=torch.Generator().manual_seed(1)), cfg


class TestConditions:
    def test_shapes(self):
        model, eeg, cfg = model_and_eeg()
        c = model.encode_conditions(eeg, CAPS)
        assert c.eeg_tokens.shape == (2, cfg.n_eeg_tokens, cfg.D)
        assert c.cognition.tokens.shape == (2, cfg.n_txt_tokens + cfg.n_eeg_tokens, cfg.D)
        assert c.channel_weights.shape == (2, cfg.C)

    def test_text_mask_one_equals_text_null(self):
        model, eeg, _ = model_and_eeg()
        a = model.encode_conditions(eeg, CAPS, text_mask=1.0)
        b = model.encode_conditions(eeg, CAPS, text_null=True)
        assert torch.equal(a.cognition.tokens, b.cognition.tokens)
        assert torch.equal(a.coarse, b.coarse)

    def test_eeg_mask_reaches_both_pathways(self):
        model, eeg, _ = model_and_eeg()
        a = model.encode_conditions(eeg, CAPS)
        b = model.encode_conditions(eeg, CAPS, eeg_mask=1.0)
        assert torch.equal(b.eeg_tokens, model.eeg_null.expand_as(b.eeg_tokens))
        assert torch.equal(b.cognition.eeg, b.eeg_tokens)
        assert not torch.equal(a.eeg_tokens, b.eeg_tokens)

    def test_eeg_only_mode(self):
        model, eeg, cfg = model_and_eeg(text_on=False)
        c = model.encode_conditions(eeg, CAPS)
        assert c.cognition.boundary == cfg.n_eeg_tokens
        out = model.denoise(torch.randn(2, model.n_img_tokens, cfg.D), torch.tensor([3, 9]), c)
        assert out.shape == (2, model.n_img_tokens, cfg.D)

    def test_ablations_compose(self):
        model, eeg, cfg = model_and_eeg(gating_on=False, multiscale_on=False, augmentation_on=False)
        assert model.autoencoder.n_views == 1
        c = model.encode_conditions(eeg, CAPS)
        x = torch.randn(2, model.n_img_tokens, cfg.D, requires_grad=True)
        model.denoise(x, torch.tensor([1, 1000]), c).sum().backward()

    def test_inspect_records(self):
        model, eeg, cfg = model_and_eeg()
        c = model.encode_conditions(eeg, CAPS)
        _, rec = model.denoise(torch.randn(2, model.n_img_tokens, cfg.D), torch.tensor([3, 9]), c, inspect=True)
        assert len(rec) == cfg.n_blocks and "attention" in rec[0]

    def test_identity_stack_at_init(self):
        model, eeg, cfg = model_and_eeg(n_blocks=4)
        c = model.encode_conditions(eeg, CAPS)
        hs = tuple(torch.randn(2, L, cfg.D) for L in (model.n_img_tokens, cfg.n_txt_tokens, cfg.n_eeg_tokens))
        cv = model.conditioner.condition_vector(torch.tensor([10, 20]), c.coarse, c.eeg_tokens)
        out = hs
        for block in model.blocks:
            out = block(out, cv.c, torch.ones(2, 3))
        for a, b in zip(out, hs):
            assert torch.equal(a, b)


class TestCheckpoint:
    def test_roundtrip_and_deterministic_bytes(self, tmp_path):
        state = {"b": torch.arange(3, dtype=torch.int64), "a": torch.randn(2, 3)}
        save_checkpoint(tmp_path / "x", state, {"model_hash": "h", "step": 2})
        save_checkpoint(tmp_path / "y", dict(reversed(list(state.items()))), {"step": 2, "model_hash": "h"})
        assert (tmp_path / "x").read_bytes() == (tmp_path / "y").read_bytes()
        back, header = load_checkpoint(tmp_path / "x")
        assert header["step"] == 2 and [t["name"] for t in header["tensors"]] == ["a", "b"]
        assert all(torch.equal(back[k], state[k]) for k in state)

    def test_layout(self, tmp_path):
        save_checkpoint(tmp_path / "x", {"w": torch.ones(2)}, {})
        raw = (tmp_path / "x").read_bytes()
        assert raw[:8] == MAGIC
        version, hlen = struct.unpack("<IQ", raw[8:20])
        header = json.loads(raw[20:20 + hlen])
        assert version == 1 and header["tensors"][0]["dtype"] == "<f8"
        assert np.frombuffer(raw[20 + hlen:], "<f8").tolist() == [1.0, 1.0]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOTACKPT" + bytes(20))
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "x")

    def test_incompatible_hash(self):
        with pytest.raises(ConfigError):
            check_compatible({"model_hash": "abc"}, "def")


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"bogus": 1})

    def test_hashes(self):
        a = RunConfig(dataset="d")
        assert a.config_hash() == a.replace(out_dir="elsewhere").config_hash()
        assert a.config_hash() != a.replace(seed=1).config_hash()
        assert a.model_hash() == a.replace(seed=1, lr=1e-3).model_hash()
        assert a.model_hash() != a.replace(gating_on=False).model_hash()

    @pytest.mark.parametrize("kw", [dict(T=100), dict(D=30, n_heads=4), dict(temporal_kernel=4),
                                    dict(mask_ratios=[1.5]), dict(patch=7)])
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            RunConfig(**kw).validate()

    def test_save_load(self, tmp_path):
        cfg = RunConfig(dataset="x", seed=4)
        cfg.save(tmp_path / "c.json")
        assert RunConfig.load(tmp_path / "c.json") == cfg

    def test_unreadable(self, tmp_path):
        (tmp_path / "c.json").write_text("{nope")
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "c.json")


class TestTraining:
    def test_lr_schedule(self):
        model, _, cfg = model_and_eeg(steps=100, warmup_steps=10, lr=1e-3)
        _, lr_at = make_optimizer(model, cfg)
        assert lr_at(0) == pytest.approx(1e-4)
        assert lr_at(9) == pytest.approx(1e-3)
        assert lr_at(99) == pytest.approx(1e-4, rel=1e-2)

    def test_train_reproducible_and_loadable(self, tiny_cfg, tmp_path):
        data = load_split(tiny_cfg, DatasetManifest.load(tiny_cfg.dataset), "train")
        a = train(tiny_cfg, data)
        b = train(tiny_cfg, data)
        assert a.losses == b.losses and all(np.isfinite(a.losses))
        assert a.probe_initial == pytest.approx(1.0, abs=0.2)
        save_model(tmp_path / "a.jmvr", a.model, tiny_cfg, tiny_cfg.steps)
        save_model(tmp_path / "b.jmvr", b.model, tiny_cfg, tiny_cfg.steps)
        assert (tmp_path / "a.jmvr").read_bytes() == (tmp_path / "b.jmvr").read_bytes()
        model, header = load_model(tmp_path / "a.jmvr")
        assert header["config_hash"] == tiny_cfg.config_hash()
        x0 = model.image_latent(data.views)
        assert probe_loss(model, data, x0, model_schedule(tiny_cfg)) == pytest.approx(a.probe_final)

    def test_load_with_mismatched_config(self, tiny_cfg, tmp_path):
        data = load_split(tiny_cfg, DatasetManifest.load(tiny_cfg.dataset), "train")
        res = train(tiny_cfg.replace(steps=1, ae_steps=1), data)
        save_model(tmp_path / "m.jmvr", res.model, tiny_cfg, 1)
        with pytest.raises(ConfigError):
            load_model(tmp_path / "m.jmvr", tiny_cfg.replace(D=32))

    def test_dataset_validation_before_training(self, tiny_cfg):
        m = DatasetManifest.load(tiny_cfg.dataset)
        with pytest.raises(DataError):
            load_split(tiny_cfg.replace(C=5), m, "train")
        with pytest.raises(DataError):
            load_split(tiny_cfg.replace(T=64), m, "train")
        with pytest.raises(DataError):
            load_split(tiny_cfg.replace(image_size=32), m, "train")

    def test_header(self):
        cfg = RunConfig(dataset="d")
        h = checkpoint_header(cfg, 7)
        assert h["step"] == 7 and h["schedule"]["t_max"] == 1000
        assert h["config"]["out_dir"] is None

    def test_smoothed(self):
        assert np.allclose(smoothed([4.0, 2.0, 0.0], window=2), [4.0, 3.0, 1.0])
        assert smoothed([]).size == 0


def model_schedule(cfg):
    from jmvr.diffusion import NoiseSchedule

    return NoiseSchedule(cfg.t_max, cfg.beta_1, cfg.beta_T)
