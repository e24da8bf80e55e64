import json

import numpy as np
import pytest
import torch

from lmsd.backbones import (
    AttentionConfig,
    ConvTokConfig,
    ConvTokMHSA,
    MMKConfig,
    MMKNet,
    TokenizerConfig,
    init_parameters,
    load_checkpoint,
    param_hash,
)
from lmsd.dataio import anomalous_subset
from lmsd.schema import ANOMALOUS, HEALTHY, FlightSample, LabeledDataset, synth_schema
from lmsd.training import (
    EarlyStopper,
    TrainConfig,
    _grouped_split,
    evaluate_split,
    lmsd_timing,
    train_stage,
)


# ---------------------------------------------------------------------------
# Early stopping
# ---------------------------------------------------------------------------

def test_early_stopper_canonical_sequence():
    s = EarlyStopper(patience=3)
    outcomes = [s.update(e, v) for e, v in enumerate([1.0, 0.9, 0.95, 0.96, 0.97], 1)]
    assert outcomes == [False, False, False, False, True]
    assert s.best_epoch == 2
    assert s.best == 0.9


def test_early_stopper_requires_strict_improvement():
    s = EarlyStopper(patience=2)
    assert not s.update(1, 0.5)
    assert s.improved
    assert not s.update(2, 0.5)  # equal is not an improvement
    assert not s.improved
    assert s.update(3, 0.5)
    assert s.best_epoch == 1


def test_early_stopper_resets_counter_on_improvement():
    s = EarlyStopper(patience=2)
    for epoch, v in enumerate([1.0, 1.1, 0.8, 0.9], 1):
        assert not s.update(epoch, v)
    assert s.update(5, 0.85)
    assert s.best_epoch == 3


# ---------------------------------------------------------------------------
# Config validation
# ---------------------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(stage="warmup")
    with pytest.raises(ValueError):
        TrainConfig(stage="ad", augmentation="replication")  # ad never augments
    with pytest.raises(ValueError):
        TrainConfig(stage="fc", augmentation="mixup")
    with pytest.raises(ValueError):
        TrainConfig(stage="fc", internal_split=1.0)
    with pytest.raises(ValueError):
        TrainConfig(stage="fc", early_stop_patience=0)
    TrainConfig(stage="fc", augmentation="replication")  # the valid pairing


# ---------------------------------------------------------------------------
# Grouped internal split
# ---------------------------------------------------------------------------

def _mk(fid, ad, fc=None, src=""):
    return FlightSample(
        flight_id=fid,
        values=np.zeros((8, 3)),
        missing_mask=np.zeros((8, 3), bool),
        ad_label=ad,
        fc_label=fc,
        class_name=None if fc is None else f"c{fc}",
        source_id=src,
    )


def test_grouped_split_keeps_replica_families_together():
    samples = []
    for i in range(6):
        fid = f"f{i}"
        samples.append(_mk(fid, ANOMALOUS, fc=1 + i % 2))
        samples.append(_mk(f"{fid}#r1", ANOMALOUS, fc=1 + i % 2, src=fid))
    train, val = _grouped_split(samples, "fc", split=0.7, seed=0)
    train_srcs = {s.source_id for s in train}
    val_srcs = {s.source_id for s in val}
    assert not train_srcs & val_srcs  # no family straddles the boundary
    assert all(s.flight_id == s.source_id for s in val)  # originals only in val
    assert len(train) + len(val) <= len(samples)  # replicas of val families dropped
    got = {s.flight_id for s in train} | {s.flight_id for s in val}
    assert {s.flight_id for s in samples if s.flight_id == s.source_id} <= got


def test_grouped_split_is_stratified_and_seeded():
    samples = [_mk(f"h{i}", HEALTHY) for i in range(10)]
    samples += [_mk(f"a{i}", ANOMALOUS, fc=1) for i in range(10)]
    train, val = _grouped_split(samples, "ad", split=0.9, seed=4)
    val_h = sum(1 for s in val if s.ad_label == HEALTHY)
    val_a = len(val) - val_h
    assert val_h == 1 and val_a == 1  # one held out per class at 9:1
    t2, v2 = _grouped_split(samples, "ad", split=0.9, seed=4)
    assert [s.flight_id for s in v2] == [s.flight_id for s in val]
    _, v3 = _grouped_split(samples, "ad", split=0.9, seed=5)
    assert [s.flight_id for s in v3] != [s.flight_id for s in val]


def test_grouped_split_guarantees_val_presence_for_small_classes():
    samples = [_mk(f"h{i}", HEALTHY) for i in range(19)] + [_mk("a0", ANOMALOUS, fc=1), _mk("a1", ANOMALOUS, fc=1)]
    train, val = _grouped_split(samples, "ad", split=0.9, seed=0)
    assert any(s.ad_label == ANOMALOUS for s in val)  # int(2*0.1)=0 bumped to 1


def test_grouped_split_rejects_mixed_label_family():
    samples = [_mk("f0", ANOMALOUS, fc=1), _mk("f0#r1", ANOMALOUS, fc=2, src="f0")]
    with pytest.raises(ValueError, match="mixes labels"):
        _grouped_split(samples, "fc", split=0.5, seed=0)


# ---------------------------------------------------------------------------
# Stage label rules enforced by train_stage
# ---------------------------------------------------------------------------

def _tiny_health_model(n_channels):
    return init_parameters(
        ConvTokMHSA(
            ConvTokConfig(
                in_channels=n_channels,
                tokenizer=TokenizerConfig(patch_len=4, token_dim=8),
                attention=AttentionConfig(encoder_layers=1, heads=2, ffn_dim=8),
                head_dim=2,
            )
        ),
        0,
    )


def _tiny_fault_model(n_channels, n_classes):
    return init_parameters(
        MMKNet(MMKConfig(in_channels=n_channels, blocks=2, filters=4, head_dim=n_classes)),
        1,
    )


def test_fault_stage_rejects_healthy_flights(tiny_corpus, tmp_path):
    model = _tiny_fault_model(tiny_corpus.schema.n_channels, tiny_corpus.n_fault_classes)
    with pytest.raises(ValueError, match="anomalous subset"):
        train_stage(model, tiny_corpus, TrainConfig(stage="fc", max_epochs=1), tmp_path)


def test_head_width_checks(tiny_corpus, tmp_path):
    anomalous = anomalous_subset(tiny_corpus)
    wrong = _tiny_fault_model(tiny_corpus.schema.n_channels, tiny_corpus.n_fault_classes + 1)
    with pytest.raises(ValueError, match="head"):
        train_stage(wrong, anomalous, TrainConfig(stage="fc", max_epochs=1), tmp_path)
    three_way = _tiny_fault_model(tiny_corpus.schema.n_channels, 3)
    with pytest.raises(ValueError, match="2-way"):
        train_stage(three_way, tiny_corpus, TrainConfig(stage="ad", max_epochs=1), tmp_path)


# ---------------------------------------------------------------------------
# evaluate_split numerics
# ---------------------------------------------------------------------------

def test_evaluate_split_matches_manual_cross_entropy(rng):
    model = _tiny_fault_model(3, 2)
    x = torch.as_tensor(rng.normal(size=(7, 12, 3)), dtype=torch.float32)
    y = torch.as_tensor([0, 1, 0, 1, 0, 1, 1])
    loss, acc = evaluate_split(model, x, y, batch_size=3)
    model.eval()
    with torch.no_grad():
        logits = model(x)
    manual = torch.nn.functional.cross_entropy(logits, y, reduction="mean")
    np.testing.assert_allclose(loss, float(manual), rtol=1e-6)
    assert acc == pytest.approx(float((logits.argmax(1) == y).float().mean()))


def test_evaluate_split_restores_training_mode(rng):
    model = _tiny_fault_model(3, 2)
    model.train()
    x = torch.zeros(4, 12, 3)
    y = torch.zeros(4, dtype=torch.long)
    evaluate_split(model, x, y, batch_size=2)
    assert model.training


# ---------------------------------------------------------------------------
# Full stage training on the tiny corpus
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ad_run(tmp_path_factory, tiny_corpus):
    out = tmp_path_factory.mktemp("ad_run")
    model = _tiny_health_model(tiny_corpus.schema.n_channels)
    cfg = TrainConfig(stage="ad", lr=1e-3, batch_size=8, max_epochs=3,
                      early_stop_patience=2, seed=11)
    log_path = out / "train_log.jsonl"
    report = train_stage(model, tiny_corpus, cfg, out, log_path=log_path)
    return model, report, out, log_path


def test_train_stage_artifacts_and_report(ad_run, tiny_corpus):
    model, report, out, log_path = ad_run
    assert (out / "best.ckpt").exists() and (out / "last.ckpt").exists()
    assert 1 <= report.epochs_run <= 3
    assert len(report.history) == report.epochs_run
    assert report.best_epoch >= 1
    assert report.total_time == pytest.approx(sum(report.epoch_times))
    # the log file holds one parseable JSON entry per epoch
    lines = [json.loads(l) for l in log_path.read_text().splitlines()]
    assert [e["epoch"] for e in lines] == list(range(1, report.epochs_run + 1))
    # model ends holding exactly the best checkpoint's parameters
    assert param_hash(model) == param_hash(load_checkpoint(out / "best.ckpt"))
    assert not model.training  # left in evaluation mode
    # consumption accounting: every epoch touches every training sample once
    consumed = report.samples_consumed
    assert consumed["healthy"] + consumed["anomalous"] == report.epochs_run * report.train_size


def test_train_stage_is_deterministic(tiny_corpus, tmp_path):
    reports = []
    hashes = []
    for run in range(2):
        model = _tiny_health_model(tiny_corpus.schema.n_channels)
        cfg = TrainConfig(stage="ad", lr=1e-3, batch_size=8, max_epochs=2,
                          early_stop_patience=2, seed=7)
        rep = train_stage(model, tiny_corpus, cfg, tmp_path / f"run{run}")
        reports.append(rep)
        hashes.append(param_hash(model))
    assert hashes[0] == hashes[1]
    a, b = reports
    assert [e["train_loss"] for e in a.history] == [e["train_loss"] for e in b.history]
    assert [e["val_loss"] for e in a.history] == [e["val_loss"] for e in b.history]


def test_fc_stage_with_replication(tiny_corpus, tmp_path):
    anomalous = anomalous_subset(tiny_corpus)
    model = _tiny_fault_model(tiny_corpus.schema.n_channels, tiny_corpus.n_fault_classes)
    cfg = TrainConfig(stage="fc", lr=1e-3, batch_size=8, max_epochs=2,
                      early_stop_patience=2, seed=3, augmentation="replication")
    report = train_stage(model, anomalous, cfg, tmp_path)
    # all classes are size 4 here: replication is a no-op at the cap,
    # but the pipeline must still run and report both split sizes
    assert report.train_size >= 1 and report.val_size >= 1
    assert report.train_size + report.val_size <= len(anomalous) + report.train_size
    assert report.stage == "fc"
    assert not model.training


def test_non_finite_loss_is_reported(tmp_path):
    schema = synth_schema(4)
    samples = [
        _mk_big(f"x{i}", HEALTHY if i % 2 else ANOMALOUS) for i in range(8)
    ]
    ds = LabeledDataset(samples, schema, ())
    model = _tiny_health_model(4)
    with pytest.raises(RuntimeError, match="non-finite"):
        train_stage(model, ds, TrainConfig(stage="ad", lr=1.0, max_epochs=1, batch_size=4), tmp_path)


def _mk_big(fid, ad):
    return FlightSample(
        flight_id=fid,
        values=np.full((8, 4), 1e30),
        missing_mask=np.zeros((8, 4), bool),
        ad_label=ad,
    )


# ---------------------------------------------------------------------------
# Combined timing
# ---------------------------------------------------------------------------

def test_lmsd_timing_combines_stages(ad_run):
    _, report, _, _ = ad_run
    timing = lmsd_timing(report, report)
    assert timing["TTT"] == pytest.approx(2 * report.total_time)
    assert timing["ET"] == pytest.approx(timing["TTT"] / (2 * report.epochs_run))
    with pytest.raises(ValueError):
        lmsd_timing(report, None)
