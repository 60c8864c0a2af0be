import dataclasses
from pathlib import Path

import pytest
import torch

from attnsr.checkpoint import CheckpointIntegrityError, CheckpointKindError
from attnsr.config import ConfigError
from attnsr.discriminator import UNetDiscriminatorConfig
from attnsr.generator import GeneratorConfig, expected_parameter_names
from attnsr.losses import FeatureExtractor
from attnsr.training import (
    METRIC_COLUMNS,
    PatchSampler,
    TrainConfig,
    TrainState,
    TrainingDivergedError,
    checkpoint_path,
    discriminator_step,
    export_generator,
    gan_train_step,
    generator_step,
    load_checkpoint,
    load_discriminator,
    load_generator,
    pretrain_step,
    read_metrics,
    save_checkpoint,
    train,
)

ROOT = Path(__file__).resolve().parents[1]


def toy_config(tmp_path, **overrides) -> TrainConfig:
    base = TrainConfig(
        mode="multi", total_iterations=6, pretrain_iterations=2, batch_size=2, hr_patch_size=32,
        checkpoint_interval=3, data_dir=str(ROOT / "data" / "mini_hr"), output_dir=str(tmp_path / "run"),
        generator=GeneratorConfig(num_rrdb_blocks=1, base_channels=8, growth_channels=4),
        discriminator=UNetDiscriminatorConfig(first_conv_channels=4),
    )
    return dataclasses.replace(base, **overrides)


def snapshot(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def same(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def params_equal(a: torch.nn.Module, b: dict) -> bool:
    return all(torch.equal(p, b[n]) for n, p in a.named_parameters())


@pytest.fixture
def toy(tmp_path):
    cfg = toy_config(tmp_path)
    return cfg, TrainState.initial(cfg), PatchSampler.from_config(cfg)


# pretraining

def test_pretrain_step_changes_generator_only(toy):
    cfg, state, sampler = toy
    g0, d0 = snapshot(state.generator), snapshot(state.discriminator)
    state, record = pretrain_step(sampler.batch(0), state)
    assert not same(snapshot(state.generator), g0)
    assert same(snapshot(state.discriminator), d0)
    assert record["iter"] == 1 and record["l_d1"] is None and record["l_l1"] > 0


def test_pretrain_zero_lr_is_noop(tmp_path):
    cfg = toy_config(tmp_path, pretrain_learning_rate=0.0)
    state = TrainState.initial(cfg)
    g0 = snapshot(state.generator)
    pretrain_step(PatchSampler.from_config(cfg).batch(0), state)
    assert same(snapshot(state.generator), g0)


def test_pretrain_rejects_bad_batch(toy):
    _, state, _ = toy
    with pytest.raises(Exception, match="inconsistent batch"):
        pretrain_step((torch.rand(1, 3, 8, 8), torch.rand(1, 3, 16, 16)), state)


def test_pretrain_overfits_fixed_pair(tmp_path):
    cfg = TrainConfig(data_dir=str(ROOT / "data" / "mini_hr"), output_dir=str(tmp_path), batch_size=1)
    state = TrainState.initial(cfg)
    batch = PatchSampler.from_config(cfg).batch(0)
    _, first = pretrain_step(batch, state)
    for _ in range(199):
        _, last = pretrain_step(batch, state)
    assert last["l_l1"] < 0.25 * first["l_l1"]


# GAN steps

@pytest.mark.parametrize("mode", ["single", "multi"])
def test_mode_controls_updated_discriminators(tmp_path, mode):
    cfg = toy_config(tmp_path, mode=mode)
    state = TrainState.initial(cfg)
    d1 = snapshot(state.discriminator.d1)
    d2 = snapshot(state.discriminator.d2) if state.discriminator.d2 is not None else None
    state, record = gan_train_step(PatchSampler.from_config(cfg).batch(0), state, FeatureExtractor.random_pyramid())
    assert not params_equal(state.discriminator.d1, d1)
    if mode == "single":
        assert state.discriminator.d2 is None and record["l_d2"] is None and len(state.opt_d) == 1
    else:
        assert not params_equal(state.discriminator.d2, d2)
    assert set(record) == set(METRIC_COLUMNS)


def test_discriminator_step_freezes_generator(toy):
    _, state, sampler = toy
    g0 = snapshot(state.generator)
    discriminator_step(sampler.batch(0), state)
    assert same(snapshot(state.generator), g0)


def test_generator_step_freezes_discriminators(toy):
    _, state, sampler = toy
    d0 = snapshot(state.discriminator)
    g0 = snapshot(state.generator)
    generator_step(sampler.batch(0), state, FeatureExtractor.random_pyramid())
    assert same(snapshot(state.discriminator), d0)
    assert not same(snapshot(state.generator), g0)


def test_extractor_untouched_by_training(toy):
    _, state, sampler = toy
    ext = FeatureExtractor.random_pyramid(seed=3)
    e0 = snapshot(ext)
    gan_train_step(sampler.batch(0), state, ext)
    assert same(snapshot(ext), e0)


def test_nan_loss_names_term(toy):
    _, state, sampler = toy
    with torch.no_grad():
        state.generator.conv_last.bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError, match="l_d1"):
        gan_train_step(sampler.batch(0), state, FeatureExtractor.random_pyramid())
    with pytest.raises(TrainingDivergedError, match="l_l1"):
        pretrain_step(sampler.batch(0), state)


# data

def test_sampler_deterministic_and_shaped(toy):
    _, _, sampler = toy
    lr, hr = sampler.batch(5)
    lr2, hr2 = sampler.batch(5)
    assert lr.shape == (2, 3, 8, 8) and hr.shape == (2, 3, 32, 32)
    assert torch.equal(lr, lr2) and torch.equal(hr, hr2)
    assert not torch.equal(hr, sampler.batch(6)[1])


def test_empty_dataset_is_config_error(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ConfigError):
        train(toy_config(tmp_path, data_dir=str(tmp_path / "empty")))


# loop, logging, checkpoints

def test_train_writes_log_and_checkpoints(tmp_path):
    cfg = toy_config(tmp_path, total_iterations=10, checkpoint_interval=10)
    train(cfg)
    out = Path(cfg.output_dir)
    assert sorted(p.name for p in out.glob("*.pt")) == ["ckpt_0000010.pt"]
    rows = read_metrics(out / "metrics.csv")
    assert [r["iter"] for r in rows] == list(range(1, 11))
    assert (out / "metrics.csv").read_text().splitlines()[0] == ",".join(METRIC_COLUMNS)
    assert rows[0]["l_d1"] is None and rows[-1]["l_d2"] is not None


def test_training_is_deterministic(tmp_path):
    a = train(toy_config(tmp_path, total_iterations=20, pretrain_iterations=5, output_dir=str(tmp_path / "a")))
    b = train(toy_config(tmp_path, total_iterations=20, pretrain_iterations=5, output_dir=str(tmp_path / "b")))
    assert same(snapshot(a.generator), snapshot(b.generator))
    assert same(snapshot(a.discriminator), snapshot(b.discriminator))


def test_resume_matches_uninterrupted(tmp_path):
    full = train(toy_config(tmp_path, output_dir=str(tmp_path / "full")))
    part_cfg = toy_config(tmp_path, total_iterations=3, output_dir=str(tmp_path / "part"))
    train(part_cfg)
    resumed = train(toy_config(tmp_path, output_dir=str(tmp_path / "part")),
                    resume=checkpoint_path(part_cfg.output_dir, 3))
    assert resumed.iteration == full.iteration == 6
    assert same(snapshot(full.generator), snapshot(resumed.generator))
    assert same(snapshot(full.discriminator), snapshot(resumed.discriminator))
    assert same(full.opt_g.state_dict()["state"][0], resumed.opt_g.state_dict()["state"][0])
    rows = read_metrics(Path(tmp_path / "part" / "metrics.csv"))
    assert [r["iter"] for r in rows] == list(range(1, 7))


def test_resume_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        train(toy_config(tmp_path), resume=tmp_path / "nope.pt")


def test_checkpoint_round_trip(toy, tmp_path):
    cfg, state, sampler = toy
    pretrain_step(sampler.batch(0), state)
    gan_train_step(sampler.batch(1), state, FeatureExtractor.random_pyramid())
    save_checkpoint(state, tmp_path / "c.pt")
    back = load_checkpoint(tmp_path / "c.pt")
    assert back.iteration == state.iteration and back.config == state.config
    assert same(snapshot(back.generator), snapshot(state.generator))
    assert same(snapshot(back.discriminator), snapshot(state.discriminator))
    for o1, o2 in [(back.opt_g, state.opt_g)] + list(zip(back.opt_d, state.opt_d)):
        s1, s2 = o1.state_dict(), o2.state_dict()
        assert s1["param_groups"] == s2["param_groups"]
        for k in s2["state"]:
            assert same(s1["state"][k], s2["state"][k])


def test_checkpoint_byte_flip_detected(toy, tmp_path):
    _, state, _ = toy
    path = tmp_path / "c.pt"
    save_checkpoint(state, path)
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(path)


def test_desk_checkpoint_tensor_names(tmp_path):
    cfg = TrainConfig(mode="single", output_dir=str(tmp_path))
    state = TrainState.initial(cfg)
    save_checkpoint(state, tmp_path / "c.pt")
    from attnsr.checkpoint import read_payload
    payload = read_payload(tmp_path / "c.pt")
    assert set(payload["generator"]) == expected_parameter_names(GeneratorConfig())
    assert "d2" not in payload and "opt_d2" not in payload


def test_generator_export(toy, tmp_path):
    _, state, _ = toy
    export_generator(state, tmp_path / "g.pt")
    gen = load_generator(tmp_path / "g.pt")
    assert same(snapshot(gen), snapshot(state.generator))
    with pytest.raises(CheckpointKindError):
        load_discriminator(tmp_path / "g.pt")
    with pytest.raises(CheckpointKindError):
        load_checkpoint(tmp_path / "g.pt")


# config

def test_full_scale_config_file_values():
    cfg = TrainConfig.load(ROOT / "configs" / "full.cfg")
    assert (cfg.learning_rate, cfg.batch_size, cfg.hr_patch_size) == (1e-4, 48, 256)
    assert cfg == TrainConfig.full_scale()


def test_desk_config_file_values():
    cfg = TrainConfig.load(ROOT / "configs" / "desk.cfg")
    assert cfg.generator.num_rrdb_blocks == 6 and cfg.discriminator.first_conv_channels == 16
    assert (cfg.batch_size, cfg.hr_patch_size) == (4, 64)


def test_config_file_round_trip(tmp_path):
    cfg = toy_config(tmp_path, mode="single", lambda2=0.5)
    cfg.save(tmp_path / "t.cfg")
    assert TrainConfig.load(tmp_path / "t.cfg") == cfg


def test_config_rejects_bad_patch_and_unknown_key(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(hr_patch_size=40)
    (tmp_path / "bad.cfg").write_text("learning_rat = 0.1\n")
    with pytest.raises(ConfigError, match="learning_rat"):
        TrainConfig.load(tmp_path / "bad.cfg")
