"""Trainer tests: Adam, batch scheduling, gradient routing, determinism,
EMA mode, abort handling, resume replay, and evaluation."""

import dataclasses
import json
import math

import numpy as np
import pytest

import vqkit.autodiff as ad
from vqkit.autodiff import Tensor
from vqkit.checkpoint import CheckpointError, load_checkpoint, load_vqvae
from vqkit.data import Dataset
from vqkit.nets import ModelSpec, VqVae
from vqkit.prior import PriorSpec, prior_nll
from vqkit.trainer import (
    Adam,
    TrainAbort,
    TrainConfig,
    TrainerError,
    assert_gradient_routing,
    batch_indices,
    encode_dataset,
    epoch_permutation,
    evaluate,
    train_prior,
    train_vqvae,
)

from corpus import make_grids, make_images

METRIC_KEYS = {"step", "recon_nll", "codebook_loss", "commit_loss",
               "perplexity", "wall_ms"}


def _ds(n=16, size=16, seed=0):
    return Dataset(make_images(n, size=size, seed=seed))


def _spec(size=16, **kw):
    base = dict(in_channels=1, in_h=size, in_w=size, hidden=8,
                downsample=2, res_blocks=1, embed_dim=4, codebook_size=8)
    base.update(kw)
    return ModelSpec(**base)


def _cfg(**kw):
    base = dict(steps=4, batch_size=4, lr=1e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def _read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines() if line]


def _strip_wall(recs):
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in recs]


# ------------------------------------------------------------------ config

def test_config_validation():
    for bad in (dict(steps=-1), dict(batch_size=0), dict(lr=0.0),
                dict(beta1=1.0), dict(beta2=-0.1), dict(eps=0.0),
                dict(eval_interval=-1), dict(checkpoint_interval=-2),
                dict(seed=-1)):
        with pytest.raises(TrainerError):
            TrainConfig(**bad).validate()
    TrainConfig().validate()


# -------------------------------------------------------------------- adam

def test_adam_first_step_size():
    # with a constant unit gradient the bias-corrected step is exactly lr
    p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    opt = Adam([("p", p)], lr=2e-4)
    p.grad = np.ones(3, dtype=np.float32)
    opt.step()
    np.testing.assert_allclose(p.data, -2e-4, rtol=1e-4)
    p.grad = np.ones(3, dtype=np.float32)
    opt.step()
    np.testing.assert_allclose(p.data, -4e-4, rtol=1e-3)


def test_adam_skips_missing_grads():
    p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    q = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    opt = Adam([("p", p), ("q", q)], lr=1e-2)
    q.grad = np.ones(2, dtype=np.float32)
    opt.step()
    assert opt.t == 1
    np.testing.assert_array_equal(p.data, np.ones(2, dtype=np.float32))
    assert (opt.m["p"] == 0).all()
    assert not np.array_equal(q.data, np.ones(2, dtype=np.float32))


def test_adam_zero_grad():
    p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    opt = Adam([("p", p)])
    p.grad = np.ones(2, dtype=np.float32)
    opt.zero_grad()
    assert p.grad is None


def test_adam_duplicate_names_rejected():
    p = Tensor(np.ones(1, dtype=np.float32), requires_grad=True)
    with pytest.raises(TrainerError):
        Adam([("p", p), ("p", p)])


def test_adam_state_roundtrip():
    rng = np.random.default_rng(0)

    def fresh():
        ps = [("a", Tensor(np.zeros(4, dtype=np.float32), requires_grad=True)),
              ("b", Tensor(np.zeros((2, 2), dtype=np.float32),
                           requires_grad=True))]
        return ps, Adam(ps, lr=1e-3)

    ps1, opt1 = fresh()
    for _ in range(3):
        for _, p in ps1:
            p.grad = rng.normal(size=p.data.shape).astype(np.float32)
        opt1.step()
    names = [n for n, _ in opt1.state_arrays()]
    assert names == ["opt.m.a", "opt.v.a", "opt.m.b", "opt.v.b"]

    ps2, opt2 = fresh()
    opt2.load_state(opt1.t, dict(opt1.state_arrays()))
    assert opt2.t == opt1.t
    for n in ("a", "b"):
        np.testing.assert_array_equal(opt2.m[n], opt1.m[n])
        np.testing.assert_array_equal(opt2.v[n], opt1.v[n])

    with pytest.raises(CheckpointError):
        opt2.load_state(1, {"opt.m.a": np.zeros(4, dtype=np.float32)})
    with pytest.raises(CheckpointError):
        opt2.load_state(1, {n: np.zeros(9, dtype=np.float32)
                            for n in names})


# --------------------------------------------------------------- schedules

def test_epoch_permutation_properties():
    perm = epoch_permutation(3, 0, 50)
    assert sorted(perm.tolist()) == list(range(50))
    np.testing.assert_array_equal(perm, epoch_permutation(3, 0, 50))
    assert not np.array_equal(perm, epoch_permutation(3, 1, 50))
    assert not np.array_equal(perm, epoch_permutation(4, 0, 50))


def test_batch_indices_cover_epoch():
    seen = np.concatenate([batch_indices(0, s, 4, 8) for s in (1, 2)])
    assert sorted(seen.tolist()) == list(range(8))
    np.testing.assert_array_equal(batch_indices(0, 3, 4, 8),
                                  epoch_permutation(0, 1, 8)[:4])


def test_batch_indices_drop_partial():
    # n=10, batch=4: two full batches per epoch, the tail pair is unused
    for s in (1, 2, 3, 4):
        idx = batch_indices(7, s, 4, 10)
        assert len(idx) == 4
    e0 = np.concatenate([batch_indices(7, 1, 4, 10), batch_indices(7, 2, 4, 10)])
    assert len(set(e0.tolist())) == 8
    np.testing.assert_array_equal(batch_indices(7, 3, 4, 10),
                                  epoch_permutation(7, 1, 10)[:4])


def test_batch_larger_than_dataset():
    with pytest.raises(TrainerError):
        batch_indices(0, 1, 16, 8)


# ----------------------------------------------------------------- routing

def test_gradient_routing_healthy_model():
    ds = _ds(4)
    model = VqVae.build(_spec(), np.random.default_rng(0))
    assert_gradient_routing(model, ds.images[:2], model.spec)


def test_debug_training_runs():
    ds = _ds(8)
    train_vqvae(ds, _spec(), _cfg(steps=2), "/tmp/vqk_dbg", debug=True,
                render=False)


# ------------------------------------------------------------ vqvae loops

def test_training_is_deterministic(tmp_path):
    ds = _ds(16)
    outs = []
    for name in ("a", "b"):
        model, _, hist = train_vqvae(ds, _spec(), _cfg(steps=5),
                                     tmp_path / name, render=False)
        outs.append((model, hist))
    m1, h1 = outs[0]
    m2, h2 = outs[1]
    for (n1, p1), (n2, p2) in zip(m1.named_parameters(),
                                  m2.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    assert _strip_wall(h1) == _strip_wall(h2)
    assert (tmp_path / "a" / "model.vqvk").read_bytes() == \
        (tmp_path / "b" / "model.vqvk").read_bytes()


def test_metrics_schema(tmp_path):
    ds = _ds(16)
    train_vqvae(ds, _spec(), _cfg(steps=4, eval_interval=2), tmp_path,
                render=False)
    recs = _read_jsonl(tmp_path / "metrics.jsonl")
    assert [r["step"] for r in recs] == [1, 2, 3, 4]
    for r in recs:
        assert set(r) == METRIC_KEYS
        assert isinstance(r["wall_ms"], int)
        assert math.isfinite(r["recon_nll"])
        assert r["perplexity"] >= 1.0
    evals = _read_jsonl(tmp_path / "eval.jsonl")
    assert [r["step"] for r in evals] == [2, 4]
    assert {"recon_mse", "bits_per_dim", "perplexity"} <= set(evals[0])


def test_spec_inference_and_mismatch(tmp_path):
    ds = _ds(8)
    spec = ModelSpec(hidden=8, res_blocks=1, embed_dim=4, codebook_size=8)
    model, _, _ = train_vqvae(ds, spec, _cfg(steps=1), tmp_path / "ok",
                              render=False)
    assert (model.spec.in_channels, model.spec.in_h, model.spec.in_w) == \
        (1, 16, 16)
    with pytest.raises(TrainerError):
        train_vqvae(ds, _spec(size=28), _cfg(steps=1), tmp_path / "bad",
                    render=False)


def test_single_image_memorization(tmp_path):
    # a lone training image should be reconstructed nearly exactly
    ds = _ds(1, seed=3)
    spec = _spec(hidden=16, embed_dim=8, codebook_size=4)
    cfg = _cfg(steps=600, batch_size=1, lr=3e-3)
    model, _, _ = train_vqvae(ds, spec, cfg, tmp_path, render=False)
    rep = evaluate(ds, model)
    assert rep["recon_mse"] < 1e-3


def test_ema_mode(tmp_path):
    ds = _ds(16)
    spec = _spec()
    ref = VqVae.build(dataclasses.replace(spec, ema=True,
                                          in_channels=1, in_h=16, in_w=16),
                      np.random.default_rng(0))
    init = ref.codebook.embeddings.data.copy()
    model, opt, hist = train_vqvae(ds, spec, _cfg(steps=5, ema=True),
                                   tmp_path, render=False)
    assert model.spec.ema is True
    names = [n for n, _ in opt.params]
    assert "codebook.embeddings" not in names
    assert not np.array_equal(model.codebook.embeddings.data, init)
    header, arrays = load_checkpoint(tmp_path / "model.vqvk")
    assert "codebook.ema_counts" in arrays
    assert "codebook.ema_sums" in arrays
    assert all(not n.startswith("opt.") or "embeddings" not in n
               for n in arrays)


def test_nan_abort_writes_checkpoint(tmp_path):
    ds = _ds(8)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainAbort) as info:
            train_vqvae(ds, _spec(), _cfg(steps=50, lr=1e8), tmp_path,
                        render=False)
    assert info.value.step >= 1
    abort = tmp_path / "abort.vqvk"
    assert abort.exists()
    _, _, header, _ = load_vqvae(abort)
    assert header["step"] == info.value.step - 1


def test_resume_replays_uninterrupted_run(tmp_path):
    ds = _ds(16)
    spec = _spec()
    full_dir = tmp_path / "full"
    part_dir = tmp_path / "part"
    train_vqvae(ds, spec, _cfg(steps=6), full_dir, render=False)
    train_vqvae(ds, spec, _cfg(steps=3), part_dir, render=False)
    # stale lines past the checkpoint must be trimmed before appending
    with open(part_dir / "metrics.jsonl", "a") as f:
        f.write(json.dumps({"step": 99, "recon_nll": 0.0, "codebook_loss": 0,
                            "commit_loss": 0, "perplexity": 1,
                            "wall_ms": 0}) + "\n")
    train_vqvae(ds, spec, _cfg(steps=6), part_dir,
                resume=part_dir / "model.vqvk", render=False)
    a = _read_jsonl(full_dir / "metrics.jsonl")
    b = _read_jsonl(part_dir / "metrics.jsonl")
    assert [r["step"] for r in b] == [1, 2, 3, 4, 5, 6]
    assert _strip_wall(a) == _strip_wall(b)
    assert (full_dir / "model.vqvk").read_bytes() == \
        (part_dir / "model.vqvk").read_bytes()


def test_resume_refuses_mismatched_config(tmp_path):
    ds = _ds(16)
    spec = _spec()
    train_vqvae(ds, spec, _cfg(steps=2), tmp_path, render=False)
    with pytest.raises(TrainerError):
        train_vqvae(ds, spec, _cfg(steps=4, batch_size=8), tmp_path,
                    resume=tmp_path / "model.vqvk", render=False)
    with pytest.raises(TrainerError):
        train_vqvae(ds, _spec(codebook_size=16), _cfg(steps=4), tmp_path,
                    resume=tmp_path / "model.vqvk", render=False)


def test_interval_checkpoint_resumable(tmp_path):
    ds = _ds(16)
    spec = _spec()
    train_vqvae(ds, spec, _cfg(steps=5, checkpoint_interval=2),
                tmp_path, render=False)
    _, _, header, _ = load_vqvae(tmp_path / "model.vqvk")
    assert header["step"] == 5
    assert header["opt"]["t"] == 5
    assert header["extra"]["seed"] == 0


# ------------------------------------------------------------ prior loops

def _pspec(**kw):
    base = dict(grid_h=3, grid_w=3, codebook_size=4, layers=2, hidden=8,
                embed_dim=4, first_kernel=3)
    base.update(kw)
    return PriorSpec(**base)


def test_prior_constant_grids_collapse(tmp_path):
    grids = np.full((32, 3, 3), 2, dtype=np.int64)
    cfg = _cfg(steps=150, batch_size=16, lr=1e-2)
    net, _, hist = train_prior(grids, _pspec(), cfg, tmp_path, render=False)
    assert hist[-1]["prior_nll"] < 0.2
    assert prior_nll(grids[:4], net).item() / 4 < 0.2 / 4 * 9


def test_prior_uniform_grids_stay_uniform(tmp_path):
    grids = make_grids(256, 3, 3, 4, seed=1)
    cfg = _cfg(steps=100, batch_size=32, lr=3e-3)
    _, _, hist = train_prior(grids, _pspec(), cfg, tmp_path, render=False)
    tail = np.mean([r["prior_nll"] for r in hist[-10:]])
    assert tail == pytest.approx(9 * math.log(4), rel=0.05)


def test_prior_metrics_and_determinism(tmp_path):
    grids = make_grids(64, 3, 3, 4, seed=2)
    cfg = _cfg(steps=4, batch_size=8)
    _, _, h1 = train_prior(grids, _pspec(), cfg, tmp_path / "a", render=False)
    _, _, h2 = train_prior(grids, _pspec(), cfg, tmp_path / "b", render=False)
    assert _strip_wall(h1) == _strip_wall(h2)
    for r in h1:
        assert set(r) == {"step", "prior_nll", "wall_ms"}
    assert (tmp_path / "a" / "prior.vqvk").read_bytes() == \
        (tmp_path / "b" / "prior.vqvk").read_bytes()


def test_prior_resume_matches_full_run(tmp_path):
    grids = make_grids(64, 3, 3, 4, seed=2)
    train_prior(grids, _pspec(), _cfg(steps=6, batch_size=8),
                tmp_path / "full", render=False)
    train_prior(grids, _pspec(), _cfg(steps=3, batch_size=8),
                tmp_path / "part", render=False)
    train_prior(grids, _pspec(), _cfg(steps=6, batch_size=8),
                tmp_path / "part", resume=tmp_path / "part" / "prior.vqvk",
                render=False)
    a = _read_jsonl(tmp_path / "full" / "metrics.jsonl")
    b = _read_jsonl(tmp_path / "part" / "metrics.jsonl")
    assert _strip_wall(a) == _strip_wall(b)
    assert (tmp_path / "full" / "prior.vqvk").read_bytes() == \
        (tmp_path / "part" / "prior.vqvk").read_bytes()


def test_prior_input_validation(tmp_path):
    with pytest.raises(TrainerError):
        train_prior(np.zeros((8, 2, 2), dtype=np.int64), _pspec(),
                    _cfg(steps=1), tmp_path, render=False)
    with pytest.raises(TrainerError):
        train_prior(np.full((8, 3, 3), 9, dtype=np.int64), _pspec(),
                    _cfg(steps=1), tmp_path, render=False)
    with pytest.raises(TrainerError):
        train_prior(np.zeros((8, 3, 3, 1), dtype=np.int64), _pspec(),
                    _cfg(steps=1), tmp_path, render=False)


# -------------------------------------------------------------- evaluation

def test_encode_dataset_matches_quantize():
    ds = _ds(10)
    model = VqVae.build(_spec(), np.random.default_rng(1))
    grids = encode_dataset(ds, model, batch_size=4)
    assert grids.shape == (10, 4, 4)
    assert grids.dtype == np.int32
    z_e = model.encode(Tensor(ds.images))
    _, ref = model.quantize(z_e)
    np.testing.assert_array_equal(grids, ref.indices)


def test_evaluate_report():
    ds = _ds(12)
    model = VqVae.build(_spec(), np.random.default_rng(1))
    rep = evaluate(ds, model, batch_size=5)
    assert set(rep) == {"recon_mse", "bits_per_dim", "perplexity",
                        "code_usage", "n_images"}
    assert rep["n_images"] == 12
    assert rep["recon_mse"] > 0
    assert rep["perplexity"] >= 1.0
    assert 0 < rep["code_usage"] <= 1.0
    assert evaluate(ds, model, batch_size=5) == rep
    # a different batch split only moves float32 accumulation order
    again = evaluate(ds, model, batch_size=7)
    for k in rep:
        assert rep[k] == pytest.approx(again[k], rel=1e-5)


def test_evaluate_untrained_prior_equals_uniform_bound():
    ds = _ds(8)
    model = VqVae.build(_spec(), np.random.default_rng(1))
    from vqkit.prior import PriorNet
    pnet = PriorNet(_pspec(grid_h=4, grid_w=4, codebook_size=8),
                    np.random.default_rng(0))
    plain = evaluate(ds, model)
    primed = evaluate(ds, model, prior_net=pnet)
    assert primed["bits_per_dim"] == pytest.approx(plain["bits_per_dim"],
                                                   rel=1e-5)


def test_evaluate_empty_dataset():
    model = VqVae.build(_spec(), np.random.default_rng(1))
    with pytest.raises(TrainerError):
        evaluate(Dataset(np.zeros((0, 1, 16, 16), dtype=np.float32)), model)
