import math

import numpy as np
import pytest

from conftest import SMALL_GRID
from shacira.codec.bitstream import deserialize_model, serialize_model
from shacira.hashgrid import GridConfig
from shacira.model import ShaciraModel, backward, forward, loss
from shacira.numerics import AdamState, SeededRng, adam_step
from shacira.trainer import (
    MetricsTrace,
    TraceRecord,
    TrainConfig,
    TrainingDivergedError,
    estimated_bytes,
    evaluate,
    init_params,
    psnr,
    sample_batch,
    train,
)

TINY_GRID = GridConfig(levels=2, r_min=2, r_max=4, table_size=16, feature_dim=2, latent_dim=1)


def tiny_image(h=6, w=8, seed=0):
    return np.random.default_rng(seed).uniform(size=(h, w, 3))


# -- init ------------------------------------------------------------------


def test_init_ranges_and_zero_integer_view():
    cfg = TrainConfig(mlp_width=16)
    m = init_params(cfg, SMALL_GRID, SeededRng(0))
    q = m.latents.values
    assert q.min() >= -0.01 and q.max() <= 0.01
    assert np.all(m.integer_latents() == 0)
    assert np.all(m.decoder.bias.values == 0)
    assert abs(float(np.std(m.decoder.weight.values)) - 0.1) < 0.1
    for w, b in m.mlp.layers():
        limit = math.sqrt(6.0 / sum(w.shape))
        assert np.all(np.abs(w.values) <= limit)
        assert np.all(b.values == 0)
    assert m.density is not None and m.density.channels == SMALL_GRID.latent_dim


def test_init_latents_look_uniform():
    grid = GridConfig(levels=2, r_min=64, r_max=128, table_size=2**14)
    q = init_params(TrainConfig(), grid, SeededRng(1)).latents.values.ravel()
    assert q.size > 10_000
    assert abs(q.mean()) < 5e-4
    assert abs(q.std() - 0.02 / math.sqrt(12)) < 2e-4


def test_init_deterministic_under_seed():
    cfg = TrainConfig()
    a = init_params(cfg, SMALL_GRID, SeededRng(5))
    b = init_params(cfg, SMALL_GRID, SeededRng(5))
    c = init_params(cfg, SMALL_GRID, SeededRng(6))
    for pa, pb, pc in zip(a.all_params(), b.all_params(), c.all_params()):
        assert pa.values.tobytes() == pb.values.tobytes()
    assert a.latents.values.tobytes() != c.latents.values.tobytes()
    assert a.mlp.w1.values.tobytes() != c.mlp.w1.values.tobytes()


# -- batching --------------------------------------------------------------


def test_full_grid_batch_on_two_by_two():
    img = tiny_image(2, 2)
    x, y, idx = sample_batch(img, None, SeededRng(0))
    assert x.shape == (4, 2) and y.shape == (4, 3)
    assert idx.tolist() == [0, 1, 2, 3]
    x2, _, _ = sample_batch(img, 10, SeededRng(0))  # larger than the image: clamps to full grid
    np.testing.assert_array_equal(x, x2)


def test_batch_values_and_no_replacement():
    img = tiny_image(10, 10)
    rng = SeededRng(1)
    for _ in range(20):
        x, y, idx = sample_batch(img, 17, rng)
        assert len(set(idx.tolist())) == 17
        assert np.all((y >= 0) & (y <= 1))
        assert np.all((x > 0) & (x < 1))
        np.testing.assert_array_equal(y, img.reshape(-1, 3)[idx])


def test_batches_cover_every_pixel():
    # P(some pixel unseen after k draws of 10 from 100) <= 100 * 0.9**k; k = 200 gives < 1e-7
    img = tiny_image(10, 10)
    rng = SeededRng(2)
    seen = set()
    for _ in range(200):
        seen.update(sample_batch(img, 10, rng)[2].tolist())
    assert len(seen) == 100


# -- optimization ----------------------------------------------------------


def test_single_step_descends():
    cfg = TrainConfig(steps=1, anneal_fraction=0.0, dtype="float64")
    img = tiny_image()
    for seed in range(3):
        m = init_params(cfg, TINY_GRID, SeededRng(seed))
        x, y, _ = sample_batch(img, None, SeededRng(seed))
        noise = np.random.default_rng(seed).uniform(-0.5, 0.5, m.latents.shape)

        def total():
            y_hat, ctx = forward(m, x)
            return loss(y_hat, y, m, noise, cfg.lambda_i, ctx)

        before = total()
        m.zero_grad()
        backward(m, before)
        for p in m.all_params():
            adam_step(p, AdamState.for_param(p), 1e-3)
        assert total().total < before.total


def test_zero_latent_lr_freezes_latents(monkeypatch):
    captured = {}
    original = ShaciraModel.freeze

    def spy(self, *a, **k):
        captured["latents"] = self.latents.values.copy()
        return original(self, *a, **k)

    monkeypatch.setattr(ShaciraModel, "freeze", spy)
    cfg = TrainConfig(steps=30, lr_latents=0.0, seed=4)
    train(tiny_image(), cfg, TINY_GRID)
    init = init_params(cfg, TINY_GRID, SeededRng(4)).latents.values
    assert captured["latents"].tobytes() == init.tobytes()


def test_trace_and_freeze():
    cfg = TrainConfig(steps=40, log_every=7, anneal_fraction=0.5, seed=1)
    model, trace = train(tiny_image(), cfg, TINY_GRID)
    steps = [r.step for r in trace.records]
    assert steps == list(range(0, 40, 7)) + [39]
    n = cfg.schedule().anneal_steps
    for r in trace.records:
        if r.step < n:
            assert r.tau == cfg.tau0 * (cfg.tau_min / cfg.tau0) ** (r.step / n)
        else:
            assert r.tau is None
    assert model.mode == "eval"
    assert model.latents.values.dtype == np.float32
    assert np.array_equal(model.latents.values, np.rint(model.latents.values))
    assert model.pmf_tables is not None and len(model.pmf_tables) == 1
    assert trace.final_rate == pytest.approx(trace.records[-1].rate)
    assert all(r.bpp_estimate > 0 and r.seconds >= 0 for r in trace.records)


def test_bpp_estimate_tracks_rate():
    cfg = TrainConfig(steps=5)
    m = init_params(cfg, SMALL_GRID, SeededRng(0))
    base = estimated_bytes(m, 0.0)
    assert estimated_bytes(m, 2.0) - base == pytest.approx(2.0 * m.total_rows / 8)


def test_identical_seeds_identical_bitstreams():
    cfg = TrainConfig(steps=40, seed=9)
    a, _ = train(tiny_image(), cfg, TINY_GRID)
    b, _ = train(tiny_image(), cfg, TINY_GRID)
    assert serialize_model(a) == serialize_model(b)
    c, _ = train(tiny_image(), TrainConfig(steps=40, seed=10), TINY_GRID)
    assert serialize_model(c) != serialize_model(a)


def test_minibatch_training_runs():
    cfg = TrainConfig(steps=20, batch=10, seed=2)
    model, trace = train(tiny_image(), cfg, TINY_GRID)
    assert model.mode == "eval" and len(trace.records) == 2


def test_divergence_raises_with_trace():
    cfg = TrainConfig(steps=50, lr_mlp=1e30, log_every=1)
    with pytest.raises(TrainingDivergedError) as err:
        train(tiny_image(), cfg, TINY_GRID)
    assert 0 < err.value.step < 50
    assert isinstance(err.value.trace, MetricsTrace)
    assert len(err.value.trace.records) == err.value.step


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_mlp=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(lambda_i=-1e-4)
    with pytest.raises(ValueError):
        train(tiny_image() * 2, TrainConfig(steps=1), TINY_GRID)


def test_trace_monotone_steps():
    t = MetricsTrace()
    t.append(TraceRecord(0, 1.0, 1.0, 1.0, 1.0, 0.0))
    with pytest.raises(ValueError):
        t.append(TraceRecord(0, 1.0, 1.0, 1.0, 1.0, 0.0))


# -- evaluation ------------------------------------------------------------


def test_psnr_examples():
    img = tiny_image()
    assert psnr(img, img) == 100.0
    assert psnr(np.full((4, 4, 3), 0.6), np.full((4, 4, 3), 0.5)) == pytest.approx(20.0, abs=1e-9)
    # the reconstruction is clamped before scoring
    assert psnr(np.full((2, 2, 3), 1.7), np.ones((2, 2, 3))) == 100.0


def test_evaluate_survives_round_trip(small_trained, small_image):
    model = small_trained[0]
    a = evaluate(model, small_image)
    b = evaluate(deserialize_model(serialize_model(model)), small_image)
    assert a == b
    assert len(a.lod_psnr) == model.levels
    assert a.lod_psnr[-1] == a.psnr
    assert a.bpp == 8 * a.nbytes / (small_image.shape[0] * small_image.shape[1])


def test_evaluate_bpp_example_arithmetic():
    assert 8 * 9600 / (512 * 768) == pytest.approx(0.1953125)
