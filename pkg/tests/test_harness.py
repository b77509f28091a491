import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmadapter import autodiff as ad
from dmadapter import cli
from dmadapter.config import (BackboneConfig, ConfigError, IntegrityError, MoEConfig, RunConfig,
                              dumps, load, loads, save, to_dict)
from dmadapter.data import generate_dataset
from dmadapter.experiments import ARM_FLAGS, ARMS, arm_config, run_hyperparam_sweep
from dmadapter.heatmap import expert_weights, export_expert_heatmap, load_grid
from dmadapter.model import DMAdapterModel
from dmadapter.train import (METRICS_HEADER, Checkpoint, MetricsRow, TrainingDivergence,
                             append_metrics, evaluate, evaluate_model, load_checkpoint,
                             model_from_checkpoint, read_metrics, save_checkpoint, train)
import dmadapter.train as train_mod


# ---------------------------------------------------------------- config

def test_config_round_trip_default(tmp_path):
    cfg = RunConfig()
    save(cfg, tmp_path / "run.ini")
    assert load(tmp_path / "run.ini") == cfg


@given(seed=st.integers(0, 10**6), n=st.integers(1, 10), alpha=st.floats(0, 5),
       lr=st.floats(1e-6, 1e-1), router=st.sampled_from(["standard", "domain"]),
       tau=st.floats(1e-3, 1.0), precision=st.sampled_from([32, 64]))
@settings(max_examples=40)
def test_config_round_trip_property(seed, n, alpha, lr, router, tau, precision):
    cfg = RunConfig(seed=seed, precision=precision).replace(**{
        "moe.n_experts": n, "moe.top_k": min(2, n), "moe.router_mode": router,
        "loss.alpha": alpha, "loss.tau": tau, "optim.lr": lr})
    back = loads(dumps(cfg))
    assert back == cfg
    assert dumps(back) == dumps(cfg)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        loads("[moe]\nn_expert = 3\n")
    with pytest.raises(ConfigError):
        loads("[mystery]\nx = 1\n")
    with pytest.raises(ConfigError):
        RunConfig().replace(**{"moe.nope": 1})


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig().replace(**{"moe.top_k": 7}).validate()
    with pytest.raises(ConfigError):
        RunConfig(precision=16).validate()
    with pytest.raises(FileNotFoundError):
        load("does/not/exist.ini")


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ckpt = Checkpoint(RunConfig(seed=3), {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)},
                      {"m": {"a": rng.normal(size=(2, 3))}, "v": {"a": rng.random((2, 3))}},
                      step=17, rng_state={"seed": 3}, extra={"adam_t": 17})
    path = save_checkpoint(ckpt, tmp_path / "c.bin")
    assert path.read_bytes()[:8] == b"DMADCKPT"
    back = load_checkpoint(path)
    assert back.config == ckpt.config and back.step == 17 and back.extra == {"adam_t": 17}
    for k in ckpt.parameters:
        np.testing.assert_array_equal(back.parameters[k], ckpt.parameters[k])
    np.testing.assert_array_equal(back.optimizer_state["v"]["a"], ckpt.optimizer_state["v"]["a"])


def test_checkpoint_integrity_errors(tmp_path):
    (tmp_path / "junk.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "junk.bin")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.bin")


def test_shape_mismatch_is_integrity_error(tmp_path):
    result = train(RunConfig(), out_dir=tmp_path, max_steps=0)
    ckpt = load_checkpoint(result.checkpoint_path)
    # same tensor names, different bottleneck width
    wrong = dataclasses.replace(ckpt, config=ckpt.config.replace(**{"moe.reduction": 4}))
    with pytest.raises(IntegrityError):
        evaluate(wrong)
    name = next(iter(ckpt.parameters))
    short = dataclasses.replace(ckpt, parameters={k: v for k, v in ckpt.parameters.items()
                                                  if k != name})
    with pytest.raises(IntegrityError):
        model_from_checkpoint(short)


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = RunConfig()
    full = train(cfg, out_dir=root / "full", max_steps=20)
    again = train(cfg, out_dir=root / "again", max_steps=20)
    first = train(cfg, out_dir=root / "split", max_steps=10)
    resumed = train(cfg, out_dir=root / "split", max_steps=20, resume=first.checkpoint_path)
    return {"full": full, "again": again, "first": first, "resumed": resumed}


def test_resume_equals_uninterrupted_bitwise(runs):
    full, resumed = runs["full"], runs["resumed"]
    assert resumed.checkpoint.step == full.checkpoint.step == 20
    for name, arr in full.checkpoint.parameters.items():
        np.testing.assert_array_equal(resumed.checkpoint.parameters[name], arr)
    for group in ("m", "v"):
        for name, arr in full.checkpoint.optimizer_state[group].items():
            np.testing.assert_array_equal(resumed.checkpoint.optimizer_state[group][name], arr)
    assert resumed.metrics_path.read_bytes() == full.metrics_path.read_bytes()


def test_same_seed_metrics_byte_identical(runs):
    a, b = runs["full"].metrics_path.read_bytes(), runs["again"].metrics_path.read_bytes()
    assert a == b
    assert a.splitlines()[0].decode() == ",".join(METRICS_HEADER)


def test_metrics_rows_and_entropy_range(runs):
    rows = read_metrics(runs["full"].metrics_path)
    assert [r.epoch for r in rows] == [1, 2] and [r.step for r in rows] == [8, 16]
    for r in rows:
        assert 0 <= r.expert_usage_entropy_image <= np.log(6) + 1e-12
        assert 0 <= r.expert_usage_entropy_text <= np.log(6) + 1e-12
        assert 0 <= r.rank1 <= r.rank5 <= r.rank10 <= 1


def test_only_adapters_are_trained(runs):
    ckpt = runs["full"].checkpoint
    assert all(k.startswith("dm_adapter.") for k in ckpt.parameters)
    assert any(np.any(v != 0) for k, v in ckpt.parameters.items() if k.endswith("W_up"))


def test_metrics_file_is_parseable_after_each_append(tmp_path):
    path = tmp_path / "m.csv"
    for i in range(3):
        append_metrics(path, MetricsRow(i + 1, 8 * (i + 1), 1.0, 0.9, 0.3, 0.3,
                                        0.1, 0.2, 0.3, 0.15, 1.2, 1.3))
        assert len(read_metrics(path)) == i + 1


def test_zero_steps_equals_bare_backbone(tmp_path):
    cfg = RunConfig()
    result = train(cfg, out_dir=tmp_path, max_steps=0)
    report = evaluate(result.checkpoint_path)
    bare = DMAdapterModel(cfg.backbone, None)
    ref = evaluate_model(bare, generate_dataset(cfg.data, cfg.backbone), "test", cfg.seed)
    assert report == ref
    with ad.no_grad():
        pixels = generate_dataset(cfg.data, cfg.backbone).test.images[:5]
        np.testing.assert_array_equal(result.model.encode_all(pixels=pixels),
                                      bare.encode_all(pixels=pixels))


def test_evaluate_is_idempotent_and_ordered(runs):
    path = runs["full"].checkpoint_path
    a, b = evaluate(path), evaluate(path)
    assert a == b
    assert a.rank1 <= a.rank5 <= a.rank10
    assert evaluate(path, "train").n_queries == 256


def test_gallery_shuffle_invariance(runs):
    model = runs["full"].model
    cfg = runs["full"].checkpoint.config
    test = generate_dataset(cfg.data, cfg.backbone).test
    gallery = model.encode_all(pixels=test.images)
    queries = model.encode_all(token_ids=test.captions)
    sim = queries @ gallery.T
    assert all(len(np.unique(row)) == row.size for row in sim)
    from dmadapter.metrics import evaluate_similarity
    base = evaluate_similarity(sim, test.caption_ids, test.image_ids)
    perm = np.random.default_rng(0).permutation(len(test.images))
    assert evaluate_similarity(sim[:, perm], test.caption_ids, test.image_ids[perm]) == base


def test_nan_loss_names_first_bad_op(monkeypatch):
    real = train_mod.compute_loss

    def poisoned(model, pixels, captions, ids, cfg):
        total, *rest = real(model, pixels, captions, ids, cfg)
        blown = ad.exp(ad.scale(ad.add(total, ad.Tensor(1000.0)), 1000.0))
        return (ad.add(total, blown), *rest)

    monkeypatch.setattr(train_mod, "compute_loss", poisoned)
    with pytest.raises(TrainingDivergence, match="'exp'"):
        train(RunConfig(), max_steps=1)


# ---------------------------------------------------------------- experiments

def test_arms_differ_only_in_documented_flags():
    base = RunConfig()
    flat = {arm: _flatten(to_dict(arm_config(base, arm, 7))) for arm in ARMS}
    allowed = set(ARM_FLAGS)
    for a in ARMS:
        for b in ARMS:
            changed = {k for k in flat[a] if flat[a][k] != flat[b][k]}
            assert changed <= allowed
    assert flat["mlp_adapter"]["moe.n_experts"] == 1 and flat["mlp_adapter"]["loss.alpha"] == 0
    assert all(f["seed"] == 7 and f["data.seed"] == 7 for f in flat.values())


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def test_sweep_costs():
    n_rows = run_hyperparam_sweep(RunConfig(), "n_experts", [2, 4, 6, 8, 10], [0],
                                  train_runs=False)
    params = [r.trainable_params for r in n_rows]
    assert params == sorted(params) and len(set(params)) == 5
    assert len({r.expert_flops for r in n_rows}) == 1
    # affine in n: constant first differences
    assert len(set(np.diff(params))) == 1
    k_rows = run_hyperparam_sweep(RunConfig(), "top_k", list(range(1, 7)), [0], train_runs=False)
    flops = [r.expert_flops for r in k_rows]
    assert flops == [flops[0] * k for k in range(1, 7)]
    with pytest.raises(ValueError):
        run_hyperparam_sweep(RunConfig(), "top_k", [], [0])


def test_top_one_gate_weights_are_one():
    model = DMAdapterModel(BackboneConfig(), MoEConfig(top_k=1))
    w = expert_weights(model, [1, 2, 3], "text")
    assert np.all(np.sort(w, axis=1)[:, -1] == 1.0)
    assert np.all((w > 0).sum(axis=1) == 1)


# ---------------------------------------------------------------- heatmap

@pytest.mark.parametrize("branch", ["text", "vision"])
def test_heatmap_contract(tmp_path, runs, branch):
    model = runs["full"].model
    cfg = runs["full"].checkpoint.config
    test = generate_dataset(cfg.data, cfg.backbone).test
    inputs = test.captions[0] if branch == "text" else test.images[0]
    txt, svg = export_expert_heatmap(model, inputs, tmp_path, branch)
    assert txt.name == f"heatmap_{branch}_L3.txt" and svg.read_text().lstrip().startswith("<?xml")
    grid = load_grid(txt)
    assert grid.shape == ((10 if branch == "text" else 9), 6)
    np.testing.assert_allclose(grid.sum(axis=1), 1.0, atol=1e-6)
    assert np.all((grid > 0).sum(axis=1) <= 2)


def test_heatmap_rejects_bad_layer(runs):
    with pytest.raises(ValueError):
        expert_weights(runs["full"].model, [1, 2], "text", layer=4)
    with pytest.raises(ValueError):
        expert_weights(runs["full"].model, [1, 2], "audio")


# ---------------------------------------------------------------- cli

def test_cli_exit_codes(tmp_path, capsys, monkeypatch):
    assert cli.main(["count-params", "--preset", "paper-clip-b16"]) == 0
    out = capsys.readouterr().out
    assert "total" in out and "15,684,864" in out

    assert cli.main(["train", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err

    assert cli.main(["train", "--config", str(tmp_path / "missing.cfg")]) == 1
    assert "not found" in capsys.readouterr().err

    assert cli.main(["count-params", "--top-k", "9"]) == 1
    (tmp_path / "bad.ini").write_text("[moe]\nsurprise = 1\n")
    assert cli.main(["count-params", "--config", str(tmp_path / "bad.ini")]) == 1

    def boom(args):
        raise RuntimeError("disk on fire")

    monkeypatch.setitem(cli.COMMANDS, "gen-data", boom)
    assert cli.main(["gen-data"]) == 2
    assert "disk on fire" in capsys.readouterr().err


def test_cli_train_eval_heatmap(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--out", str(out), "--max-steps", "8", "--seed", "1"]) == 0
    assert (out / "metrics.csv").exists() and (out / "config.ini").exists()
    assert load(out / "config.ini").data.seed == 1
    assert cli.main(["eval", "--checkpoint", str(out / "checkpoint.bin")]) == 0
    assert '"rank1"' in capsys.readouterr().out
    assert cli.main(["heatmap", "--checkpoint", str(out / "checkpoint.bin"), "--out",
                     str(tmp_path / "hm"), "--tokens", "1", "9", "17", "--layer", "0"]) == 0
    grid = load_grid(tmp_path / "hm" / "heatmap_text_L0.txt")
    assert grid.shape == (5, 6)
    assert cli.main(["gen-data", "--out", str(tmp_path / "data")]) == 0
    assert (tmp_path / "data" / "manifest.jsonl").exists()
