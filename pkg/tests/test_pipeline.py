import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from qadapt.data import DatasetManifest
from qadapt.errors import CheckpointError, ConfigError, NumericError
from qadapt.pipeline import (Checkpoint, PrefixStore, ablate, ablation_config, evaluate, frozen_hashes, parse_grid,
                             restore_model, state_hash, subsample, sweep, train, trainable_state)
from qadapt.text import LabelSpace


@pytest.fixture(scope="module")
def store():
    return PrefixStore()


@pytest.fixture(scope="module")
def trained(tiny_data, store):
    train_m, val_m = tiny_data
    return train(tiny_config(), train_m, val_m, store=store)


def test_train_leaves_frozen_weights_alone(trained, tiny_data):
    from qadapt.pipeline import build_model

    fresh = build_model(tiny_config())
    assert frozen_hashes(trained.model) == frozen_hashes(fresh) == trained.checkpoint.expert_hashes
    assert state_hash(trainable_state(trained.model)) != state_hash(trainable_state(fresh))


def test_train_log_and_best_epoch(trained, tiny_data, tmp_path, store):
    assert len(trained.val_reports) == 2
    assert trained.best_report.macro_auc == max(r.macro_auc for r in trained.val_reports)
    per_epoch = -(-24 // 8)
    assert len(trained.log) == 2 * per_epoch
    assert [row["step"] for row in trained.log] == list(range(2 * per_epoch))
    assert set(trained.log[0]) >= {"epoch", "batch", "image_loss", "report_loss", "total", "lr"}
    log_path = tmp_path / "log.jsonl"
    train(tiny_config(epochs=1), *tiny_data, store=store, log_path=log_path)
    assert len(log_path.read_text().splitlines()) == per_epoch


def test_training_is_deterministic(trained, tiny_data, store):
    again = train(tiny_config(), *tiny_data, store=store)
    assert state_hash(again.checkpoint.state) == state_hash(trained.checkpoint.state)
    assert again.best_report.same_metrics(trained.best_report)


def test_checkpoint_round_trip(trained, tiny_data, tmp_path, store):
    path = trained.checkpoint.save(tmp_path / "ckpt.npz")
    loaded = Checkpoint.load(path)
    assert loaded.expert_hashes == trained.checkpoint.expert_hashes
    assert state_hash(loaded.state) == state_hash(trained.checkpoint.state)
    a = evaluate(trained.checkpoint, tiny_data[1], store=store)
    b = evaluate(loaded, tiny_data[1], store=PrefixStore())
    assert a.to_text() == b.to_text()
    assert a.same_metrics(trained.best_report)


def test_checkpoint_refuses_other_backbones(trained, tmp_path):
    other = tiny_config(experts=[{**tiny_config().to_dict()["experts"][0], "seed": 99},
                                 tiny_config().to_dict()["experts"][1]])
    with pytest.raises(CheckpointError, match="A"):
        restore_model(trained.checkpoint, other)
    with pytest.raises(CheckpointError, match="shape"):
        restore_model(trained.checkpoint, tiny_config(num_queries=5))
    with pytest.raises(CheckpointError, match="differ .* B"):
        restore_model(trained.checkpoint, tiny_config(experts=tiny_config().to_dict()["experts"][:1]))
    ckpt = trained.checkpoint
    partial = Checkpoint({k: v for k, v in ckpt.state.items() if not k.startswith("gate.")}, ckpt.config,
                         ckpt.expert_hashes, ckpt.class_names)
    with pytest.raises(CheckpointError, match="layout"):
        restore_model(partial)


def test_checkpoint_load_errors(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        Checkpoint.load(tmp_path / "none.npz")
    (tmp_path / "junk.npz").write_bytes(b"junk")
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "junk.npz")


def test_evaluate_computes_no_gradients(trained, tiny_data, store):
    model = restore_model(trained.checkpoint)
    before = state_hash(trainable_state(model))
    evaluate(trained.checkpoint, tiny_data[1], store=store, model=model)
    assert all(p.grad is None for p in model.parameters())
    assert state_hash(trainable_state(model)) == before


def test_evaluate_on_a_new_label_space(trained, tiny_data, store):
    val = tiny_data[1]
    renamed = DatasetManifest(val.path, LabelSpace(["Nodule", "Mass", "Fibrosis"]), val.records)
    report = evaluate(trained.checkpoint, renamed, store=store)
    assert set(report.per_class) | set(report.skipped_classes) == {"Nodule", "Mass", "Fibrosis"}


def test_init_checkpoint_continues(trained, tiny_data, store):
    cont = train(tiny_config(epochs=1), *tiny_data, init_checkpoint=trained.checkpoint, store=store)
    assert cont.checkpoint.expert_hashes == trained.checkpoint.expert_hashes


def test_label_space_mismatch(tiny_data, store):
    val = tiny_data[1]
    other = DatasetManifest(val.path, LabelSpace(["x", "y", "z"]), val.records)
    with pytest.raises(ConfigError):
        train(tiny_config(), tiny_data[0], other, store=store)


def test_non_finite_loss_aborts(tiny_data, store, monkeypatch):
    from qadapt import model as model_mod

    monkeypatch.setattr(model_mod, "multilabel_bce", lambda logits, targets: logits.sum() * float("nan"))
    with pytest.raises(NumericError, match="epoch 0, batch 0"):
        train(tiny_config(), *tiny_data, store=store)


def test_prefix_store_reuses_tokens(trained, tiny_data, store):
    n = len(store)
    train(tiny_config(seed=5, epochs=1), *tiny_data, store=store)
    assert len(store) == n


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 200), f1=st.floats(0.01, 1), f2=st.floats(0.01, 1), seed=st.integers(0, 100))
def test_subsample_is_nested(n, f1, f2, seed):
    records = list(range(n))
    small, large = sorted([f1, f2])
    a, b = subsample(records, small, seed), subsample(records, large, seed)
    assert set(a) <= set(b)
    assert len(b) == max(1, int(np.floor(large * n + 1e-9)))
    assert a == sorted(a)


def test_sweep_uses_nested_subsets(tiny_data, store):
    rows = sweep(tiny_config(epochs=1), [0.5, 1.0], *tiny_data, store=store)
    assert [r.fraction for r in rows] == [0.5, 1.0]
    assert set(rows[0].train_ids) < set(rows[1].train_ids)
    with pytest.raises(ConfigError):
        sweep(tiny_config(), [1.5], *tiny_data, store=store)


def test_parse_grid():
    assert parse_grid("views", "1,3, 5") == [1, 3, 5]
    assert parse_grid("alpha", "0,0.5") == [0.0, 0.5]
    assert parse_grid("experts", "A;A,B") == [["A"], ["A", "B"]]
    for axis, grid in [("views", "x"), ("depth", "1"), ("alpha", "")]:
        with pytest.raises(ConfigError):
            parse_grid(axis, grid)


def test_ablation_config():
    cfg = tiny_config()
    assert ablation_config(cfg, "views", 1).focal.num_views == 1
    assert ablation_config(cfg, "queries", 2).num_queries == 2
    assert [e.expert_id for e in ablation_config(cfg, "experts", ["B"]).experts] == ["B"]
    with pytest.raises(ConfigError):
        ablation_config(cfg, "experts", ["C"])


def test_ablate_runs_each_setting(tiny_data, store):
    rows = ablate(tiny_config(epochs=1), "experts", "A;A,B", *tiny_data, store=store)
    assert [r.setting for r in rows] == ["A", "A,B"]
    assert all(0 <= r.report.macro_auc <= 100 for r in rows)
    rows = ablate(tiny_config(epochs=1), "views", [1, 3], *tiny_data, store=store)
    assert [r.setting for r in rows] == ["1", "3"]


def test_state_hash_sees_every_byte():
    s = {"a": torch.zeros(3), "b": torch.ones(2)}
    t = {"a": torch.zeros(3), "b": torch.tensor([1.0, 1.0 + 1e-7])}
    assert state_hash(s) != state_hash(t)
    assert state_hash(s) == state_hash(dict(reversed(list(s.items()))))
