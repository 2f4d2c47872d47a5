import csv
import json
import math

import numpy as np
import pytest
import torch

from flowsep.audio import AudioClip, save_wav
from flowsep.errors import ConfigError, DatasetError, NumericError
from flowsep.flow import load_model
from flowsep.flow.checkpoint import payload_digest
from flowsep.flow.glow import GlowConfig, GlowModel
from flowsep.spectral import magnitude
from flowsep.training import (
    AdamState,
    TrainConfig,
    adam_step,
    build_dataset,
    nll_loss,
    stack,
    train,
    train_on_tensor,
    training_record,
)

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def tiny_config(**kw):
    base = dict(learning_rate=1e-3, epochs=1000, batch_size=4, max_steps=20, segment_seconds=0.25,
                sample_rate=8000, fft_size=64, hop=16, n_steps=2, hidden=8, depth=2, checkpoint_interval=1000)
    base.update(kw)
    return TrainConfig(**base)


def sinusoid_data(cfg, count=8, seed=0):
    rng = np.random.default_rng(seed)
    n = round(cfg.segment_seconds * cfg.sample_rate)
    t = np.arange(n) / cfg.sample_rate
    clips = [AudioClip(rng.uniform(0.1, 0.5) * np.sin(2 * np.pi * rng.uniform(300, 1500) * t + rng.uniform(0, 6)),
                       cfg.sample_rate) for _ in range(count)]
    return stack([magnitude(c, cfg.stft).trimmed_even() for c in clips])


def test_config_validation():
    for bad in (dict(learning_rate=0), dict(epochs=0), dict(batch_size=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    cfg = TrainConfig()
    assert cfg.learning_rate == 1e-4 and cfg.epochs == 1000 and cfg.segment_seconds == 5.0
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_adam_first_step():
    p = {"w": torch.tensor([1.0], dtype=torch.float64)}
    state = AdamState()
    adam_step(p, {"w": torch.tensor([0.5], dtype=torch.float64)}, state, lr=0.01)
    expected = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8)
    assert float(p["w"]) == pytest.approx(expected, abs=1e-12)
    assert state.step == 1


def test_adam_zero_gradient():
    p = {"w": torch.tensor([2.0, -3.0])}
    adam_step(p, {"w": torch.zeros(2)}, AdamState(), lr=0.1)
    assert torch.equal(p["w"], torch.tensor([2.0, -3.0]))


def test_adam_second_step_reference():
    # hand-expanded moments for g1 = 0.5, g2 = -0.2
    w = 0.0
    m = 0.1 * 0.5
    v = 0.001 * 0.25
    w -= 0.01 * (m / 0.1) / (math.sqrt(v / 0.001) + 1e-8)
    m = 0.9 * m + 0.1 * -0.2
    v = 0.999 * v + 0.001 * 0.04
    w -= 0.01 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    p = {"w": torch.tensor([0.0], dtype=torch.float64)}
    s = AdamState()
    adam_step(p, {"w": torch.tensor([0.5], dtype=torch.float64)}, s, 0.01)
    adam_step(p, {"w": torch.tensor([-0.2], dtype=torch.float64)}, s, 0.01)
    assert float(p["w"]) == pytest.approx(w, abs=1e-12)


def test_adam_deterministic_from_snapshot():
    g = {"w": torch.randn(5, generator=torch.Generator().manual_seed(0))}
    base = AdamState()
    adam_step({"w": torch.zeros(5)}, g, base, 0.01)
    results = []
    for _ in range(2):
        p = {"w": torch.ones(5)}
        adam_step(p, g, base.copy(), 0.01)
        results.append(p["w"])
    assert torch.equal(results[0], results[1])


def test_fresh_model_zero_input_nll():
    model = GlowModel(GlowConfig(channels=33, n_steps=2, hidden=8, depth=2)).double()
    assert nll_loss([np.zeros((33, 8))] * 3, model) == pytest.approx(HALF_LOG_2PI, abs=1e-5)
    assert HALF_LOG_2PI == pytest.approx(0.918939, abs=1e-6)


def test_duplicated_batch_same_loss():
    cfg = tiny_config()
    data = sinusoid_data(cfg, 3)
    model = GlowModel(cfg.glow_config())
    model.data_init(data)
    assert nll_loss(torch.cat([data, data]), model) == pytest.approx(nll_loss(data, model), abs=1e-6)


def test_non_finite_loss_names_batch_item():
    model = GlowModel(GlowConfig(channels=3, n_steps=1, hidden=4, depth=1))
    batch = np.zeros((2, 3, 4))
    batch[1, 0, 0] = np.inf
    with pytest.raises(NumericError):
        nll_loss(list(batch), model)


def test_loss_mostly_monotone_first_50_steps(tmp_path):
    cfg = tiny_config(batch_size=8, max_steps=50)
    path = train_on_tensor(sinusoid_data(cfg, 8), cfg, "sine", tmp_path)
    curve = training_record(path)["loss_curve"]
    assert len(curve) == 50
    assert sum(b > a for a, b in zip(curve, curve[1:])) <= 5


def test_training_reduces_nll(tmp_path):
    cfg = tiny_config(max_steps=200, learning_rate=1e-3)
    path = train_on_tensor(sinusoid_data(cfg, 16), cfg, "sine", tmp_path)
    curve = training_record(path)["loss_curve"]
    assert curve[0] - curve[-1] >= 0.5


def test_outputs_and_checkpoint_interval(tmp_path):
    cfg = tiny_config(batch_size=4, max_steps=None, epochs=3, checkpoint_interval=1)
    train_on_tensor(sinusoid_data(cfg, 8), cfg, "sine", tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["sine.iglw", "sine_epoch0001.iglw", "sine_epoch0002.iglw", "sine_loss.csv"]
    with open(tmp_path / "sine_loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "epoch", "nll"]
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 7))
    assert [int(r[1]) for r in rows[1:]] == [0, 0, 1, 1, 2, 2]
    model, meta, _ = load_model(tmp_path / "sine.iglw")
    assert meta["metadata"]["instrument"] == "sine"
    assert meta["metadata"]["clip_grad_norm"] == 100.0
    assert meta["metadata"]["stft"]["fft_size"] == 64


def test_resume_matches_uninterrupted(tmp_path):
    cfg_full = tiny_config(max_steps=7, batch_size=3)
    data = sinusoid_data(cfg_full, 8)
    full = train_on_tensor(data, cfg_full, "sine", tmp_path / "full")
    half = train_on_tensor(data, tiny_config(max_steps=4, batch_size=3), "sine", tmp_path / "half")
    resumed = train_on_tensor(data, cfg_full, "sine", tmp_path / "res", resume=str(half))
    a, b = training_record(full)["loss_curve"], training_record(resumed)["loss_curve"]
    assert len(a) == len(b) == 7
    assert abs(a[4] - b[4]) < 1e-6
    assert a == b
    assert payload_digest(full) == payload_digest(resumed)


def test_same_seed_bit_identical(tmp_path):
    cfg = tiny_config(max_steps=None, epochs=1)
    data = sinusoid_data(cfg, 8)
    p1 = train_on_tensor(data, cfg, "sine", tmp_path / "a")
    p2 = train_on_tensor(data, cfg, "sine", tmp_path / "b")
    assert training_record(p1)["loss_curve"] == training_record(p2)["loss_curve"]
    assert (tmp_path / "a" / "sine_loss.csv").read_bytes() == (tmp_path / "b" / "sine_loss.csv").read_bytes()
    assert payload_digest(p1) == payload_digest(p2)


def test_checkpoint_reload_identical_loss(tmp_path):
    cfg = tiny_config(max_steps=5)
    data = sinusoid_data(cfg, 8)
    path = train_on_tensor(data, cfg, "sine", tmp_path)
    model, _, _ = load_model(path)
    again, _, _ = load_model(path)
    assert nll_loss(data, model) == nll_loss(data, again)


def test_divergence_keeps_last_checkpoint(tmp_path):
    cfg = tiny_config(max_steps=None, epochs=50, checkpoint_interval=1, batch_size=8, learning_rate=1e-3)
    data = sinusoid_data(cfg, 8)
    data[3, 0, 0] = float("nan")
    # epoch 0 uses a permutation, so the bad item is hit on step 1
    with pytest.raises(NumericError):
        train_on_tensor(data, cfg, "sine", tmp_path)
    assert (tmp_path / "sine_loss.csv").exists()
    assert not (tmp_path / "sine.iglw").exists()


def _write_manifest(tmp_path, files):
    m = tmp_path / "manifest.json"
    m.write_text(json.dumps({"inst": files}))
    return m


def test_build_dataset_counts_and_shapes(tmp_path):
    rng = np.random.default_rng(0)
    save_wav(AudioClip(rng.uniform(-0.5, 0.5, 12 * 22050), 22050), tmp_path / "a.wav", "float32")
    items = build_dataset(_write_manifest(tmp_path, ["a.wav"]), "inst", TrainConfig())
    assert len(items) == 2
    assert all(it.shape == (513, 430) for it in items)


def test_build_dataset_resamples(tmp_path):
    rng = np.random.default_rng(1)
    save_wav(AudioClip(rng.uniform(-0.5, 0.5, 6 * 44100), 44100), tmp_path / "b.wav", "pcm16")
    items = build_dataset(_write_manifest(tmp_path, ["b.wav"]), "inst", TrainConfig())
    assert len(items) == 1 and items[0].shape == (513, 430)


def test_build_dataset_silent_only(tmp_path):
    save_wav(AudioClip(np.zeros(6 * 22050), 22050), tmp_path / "s.wav", "pcm16")
    with pytest.raises(DatasetError):
        build_dataset(_write_manifest(tmp_path, ["s.wav"]), "inst", TrainConfig())


def test_build_dataset_unknown_instrument(tmp_path):
    with pytest.raises(DatasetError):
        build_dataset(_write_manifest(tmp_path, []), "other", TrainConfig())


def test_train_from_manifest(tmp_path):
    cfg = tiny_config(max_steps=3, batch_size=2)
    rng = np.random.default_rng(2)
    save_wav(AudioClip(rng.uniform(-0.5, 0.5, 8000), 8000), tmp_path / "c.wav", "float32")
    path = train(cfg, _write_manifest(tmp_path, ["c.wav"]), "inst", tmp_path / "out")
    assert training_record(path)["step"] == 3
