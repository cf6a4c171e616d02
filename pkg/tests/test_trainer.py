import json

import numpy as np
import pytest
import torch

from portraitgen import toyfaces as tf
from portraitgen.checkpoint import CheckpointMismatch
from portraitgen.conditioning import FULL, TEXT_ONLY, UNCONDITIONAL
from portraitgen.denoiser import DESK_GRADCHECK, DenoiserConfig
from portraitgen.losses import LossWeights
from portraitgen.model import load_model
from portraitgen.schedule import forward_noise
from portraitgen.trainer import (STREAMS, Streams, TrainConfig, Trainer, TrainingError, build_model, desk_config,
                                 draw, ema, substream, train)


@pytest.fixture(scope="module")
def samples():
    return tf.generate_samples(12, 21)


def _config(**kw):
    base = dict(steps=6, batch_size=3, learning_rate=1e-3, T=100, beta_start=1e-3, beta_end=0.05,
                loss_weights=LossWeights(R_t=25), denoiser=DenoiserConfig(**DESK_GRADCHECK), seed=4)
    base.update(kw)
    return TrainConfig(**base)


def _snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def test_equal_seeds_give_equal_reports(samples):
    a = Trainer(_config(), samples).run()
    b = Trainer(_config(), samples).run()
    assert a == b
    c = Trainer(_config(seed=5), samples).run()
    assert a != c


def test_zero_learning_rate_keeps_parameters(samples):
    for opt in ("sgd", "adam"):
        tr = Trainer(_config(learning_rate=0.0, optimizer=opt), samples)
        before = _snapshot(tr.model)
        reports = tr.run()
        assert len(reports) == 6 and all(np.isfinite(r.total) for r in reports)
        after = tr.model.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)


def test_noise_only_matches_plain_diffusion_loop(samples):
    cfg = _config(learning_rate=0.0, loss_weights=LossWeights(R_t=25, lambda_id_loc=0.0, mu_expr_loc=0.0,
                                                                identity_weight=0.0))
    tr = Trainer(cfg, samples)
    reports = tr.run()
    # independent plain loop: same substreams, same draw order, plain masked/unmasked MSE
    model = build_model(cfg)
    gens = {name: substream(cfg.seed, name) for name in STREAMS}
    for rep in reports:
        idx = gens["data"].integers(0, len(samples), size=cfg.batch_size)
        t = gens["timestep"].integers(1, cfg.T + 1, size=cfg.batch_size)
        u = gens["dropout"].random(cfg.batch_size)
        region = gens["region"].random(cfg.batch_size) < 0.5
        eps = torch.as_tensor(gens["noise"].standard_normal((cfg.batch_size, 3, 32, 32)), dtype=torch.float32)
        losses = []
        for k, i in enumerate(idx):
            s = samples[int(i)]
            x0 = torch.as_tensor(s.image, dtype=torch.float32).permute(2, 0, 1)
            zt = forward_noise(x0, int(t[k]), eps[k], model.schedule)
            branch = UNCONDITIONAL if u[k] < 0.1 else TEXT_ONLY if u[k] < 0.2 else FULL
            face = model.face_vector(s.reference_face) if branch == FULL else None
            ctx, _, _ = model.context([s.caption], [face], [branch])
            with torch.no_grad():
                pred, _ = model.unet(zt[None], torch.tensor([int(t[k])]), ctx)
            sq = (pred[0] - eps[k]) ** 2
            if region[k]:
                m = torch.as_tensor(s.face_mask >= 0.5).expand_as(sq)
                losses.append(float(sq[m].mean()))
            else:
                losses.append(float(sq.mean()))
        assert abs(rep.noise - float(np.mean(losses))) < 1e-5
        assert rep.identity == 0.0 and rep.localization == 0.0


def test_resume_continues_bit_identically(samples, tmp_path):
    full = Trainer(_config(out_dir=str(tmp_path / "full"), checkpoint_interval=3), samples)
    full.run()
    part = Trainer(_config(out_dir=str(tmp_path / "part"), checkpoint_interval=3, steps=3), samples)
    part.run()
    resumed = Trainer(_config(out_dir=str(tmp_path / "part"), checkpoint_interval=3), samples)
    resumed.resume(tmp_path / "part" / "ckpt_000003.npz")
    resumed.run()
    log_full = (tmp_path / "full" / "train_log.jsonl").read_text()
    log_part = (tmp_path / "part" / "train_log.jsonl").read_text()
    assert log_full == log_part
    a, b = _snapshot(full.model), _snapshot(resumed.model)
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_resume_refuses_mismatched_checkpoint(samples, tmp_path):
    Trainer(_config(out_dir=str(tmp_path), steps=1), samples).run()
    other = Trainer(_config(denoiser=DenoiserConfig(**{**DESK_GRADCHECK, "widths": (4, 8, 12)})), samples)
    with pytest.raises(CheckpointMismatch):
        other.resume(tmp_path / "ckpt_000001.npz")
    other = Trainer(_config(T=50), samples)
    with pytest.raises(CheckpointMismatch):
        other.resume(tmp_path / "ckpt_000001.npz")


def test_checkpoint_loads_as_model(samples, tmp_path):
    tr = Trainer(_config(out_dir=str(tmp_path), steps=2), samples)
    tr.run()
    model, header, _ = load_model(tmp_path / "ckpt_000002.npz")
    assert header["step"] == 2
    a, b = _snapshot(tr.model), _snapshot(model)
    assert all(torch.equal(a[k], b[k]) for k in a)
    with pytest.raises(CheckpointMismatch):
        load_model(tmp_path / "ckpt_000002.npz", expected={"text_dim": 99})


def test_single_step_single_log_line(samples, tmp_path):
    Trainer(_config(out_dir=str(tmp_path), steps=1), samples).run()
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 1
    rec = json.loads(lines[0])
    assert {"step", "t", "branch", "noise", "id", "loc", "total"} <= set(rec)
    assert abs(rec["total"] - (rec["noise"] + rec["id"] + rec["loc"])) < 1e-6


def test_frozen_components_untouched(samples):
    tr = Trainer(_config(steps=4, learning_rate=0.05), samples)
    table = tr.model.encoder.table.tobytes()
    emb = tr.model.embedder.state_bytes()
    before = _snapshot(tr.model)
    tr.run()
    assert tr.model.encoder.table.tobytes() == table
    assert tr.model.embedder.state_bytes() == emb
    after = tr.model.state_dict()
    assert any(not torch.equal(before[k], after[k]) for k in before)


def test_draw_frequencies():
    streams = Streams(0)
    w = LossWeights()
    branches, regions = [], []
    for _ in range(100):
        d = draw(streams, 100, (1, 1, 1), 100, w, torch.float64)
        branches += d.branch
        regions += d.face_region
        assert all(1 <= t <= 100 for t in d.t)
    n = len(branches)
    assert n == 10_000
    assert abs(branches.count(UNCONDITIONAL) / n - 0.1) <= 0.01
    assert abs(branches.count(TEXT_ONLY) / n - 0.1) <= 0.01
    assert abs(branches.count(FULL) / n - 0.8) <= 0.01
    assert abs(np.mean(regions) - 0.5) <= 0.02


def test_gate_bookkeeping(samples, tmp_path):
    Trainer(_config(out_dir=str(tmp_path), steps=30, batch_size=4), samples).run()
    seen_id = 0
    for line in (tmp_path / "train_log.jsonl").read_text().splitlines():
        rec = json.loads(line)
        for t, br, ident, loc in zip(rec["t"], rec["branch"], rec["per_sample"]["id"], rec["per_sample"]["loc"]):
            if ident != 0.0:
                seen_id += 1
                assert t <= 25 and br == FULL
            if br != FULL:
                assert loc == 0.0
    assert seen_id > 0


def test_non_finite_loss_aborts_with_sample_index(samples, tmp_path):
    bad = list(samples)
    broken = tf.TrainingSample(**{**bad[7].__dict__})
    broken.image = np.full_like(broken.image, np.nan)
    bad[7] = broken
    tr = Trainer(_config(out_dir=str(tmp_path), steps=200), bad)
    with pytest.raises(TrainingError, match=r"sample index 7\b"):
        tr.run()
    failure = json.loads((tmp_path / "failure.json").read_text())
    assert 7 in failure["samples"] and failure["step"] == tr.step + 1


def test_config_validation():
    for bad in (dict(steps=0), dict(batch_size=0), dict(learning_rate=-1.0), dict(optimizer="lbfgs"),
                dict(T=10)):
        with pytest.raises(ValueError):
            _config(**bad)


def test_defaults_and_desk_profile():
    d = TrainConfig()
    assert (d.learning_rate, d.batch_size, d.T, d.optimizer, d.grad_clip) == (1e-5, 2, 1000, "sgd", 1.0)
    desk = desk_config()
    assert desk.T == 100 and desk.loss_weights.R_t == 25 and desk.steps == 2000
    assert desk.loss_weights.R_t / desk.T == d.loss_weights.R_t / d.T


def test_train_helper_and_missing_manifest(samples, tmp_path):
    tr = train(_config(steps=2), samples)
    assert tr.step == 2
    with pytest.raises(ValueError):
        Trainer(_config())
    with pytest.raises(FileNotFoundError):
        Trainer(_config(manifest=str(tmp_path / "none.jsonl")))


def test_ema():
    out = ema([1.0, 0.0, 0.0], window=1)
    assert list(out) == [1.0, 0.0, 0.0]
    vals = ema(np.ones(50), window=10)
    assert np.allclose(vals, 1.0)
