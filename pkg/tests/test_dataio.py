import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmsd.dataio import (
    anomalous_subset,
    fill_missing,
    fit_norm_stats,
    load_dataset,
    load_flight_csv,
    normalize,
    replicate_augment,
    resample_cubic,
    resample_series,
    stratified_kfold,
    worst_missing_rate,
    write_dataset_csv,
)
from lmsd.schema import ANOMALOUS, HEALTHY, FlightSample, LabeledDataset, synth_schema

from oracles import natural_spline_eval, zscore_reference


# ---------------------------------------------------------------------------
# CSV loading and missing-data handling
# ---------------------------------------------------------------------------

def test_load_flight_csv_accepts_permuted_headers(tmp_path, tiny_schema):
    names = list(tiny_schema.names)
    frame = pd.DataFrame(np.arange(20.0).reshape(4, 5), columns=names[:5])
    frame[names[5]] = [1.0, None, 3.0, 4.0]
    shuffled = frame[names[::-1]]
    path = tmp_path / "f.csv"
    shuffled.to_csv(path, index=False)
    values, mask = load_flight_csv(path, tiny_schema)
    # column order restored to schema order regardless of file order
    assert values.shape == (4, 6)
    np.testing.assert_allclose(values[:, 0], frame[names[0]])
    assert mask[1, 5] and mask.sum() == 1


def test_load_flight_csv_names_missing_channels(tmp_path, tiny_schema):
    frame = pd.DataFrame({"mon0": [1.0, 2.0]})
    path = tmp_path / "g.csv"
    frame.to_csv(path, index=False)
    with pytest.raises(ValueError) as exc:
        load_flight_csv(path, tiny_schema)
    assert "mon1" in str(exc.value)


def test_fill_missing_forward_then_leading_backward():
    values = np.array([[np.nan, 5.0], [1.0, np.nan], [np.nan, 7.0]])
    mask = np.isnan(values)
    out = fill_missing(values, mask)
    np.testing.assert_allclose(out[:, 0], [1.0, 1.0, 1.0])  # leading backfill, then ffill
    np.testing.assert_allclose(out[:, 1], [5.0, 5.0, 7.0])  # interior ffill


def test_fill_missing_fully_missing_channel_becomes_zero():
    values = np.full((4, 2), np.nan)
    values[:, 0] = 2.0
    mask = np.isnan(values)
    out = fill_missing(values, mask)
    np.testing.assert_allclose(out[:, 1], 0.0)


def test_worst_missing_rate_is_max_over_channels():
    mask = np.zeros((10, 3), dtype=bool)
    mask[:3, 1] = True
    assert worst_missing_rate(mask) == pytest.approx(0.3)


def _write_corpus(tmp_path, schema, rows):
    # rows: (fid, ad, cname, n_missing_in_worst_channel)
    L = 20
    for fid, _ad, _c, n_missing in rows:
        frame = pd.DataFrame(
            np.random.default_rng(hash(fid) % 2**32).normal(size=(L, schema.n_channels)),
            columns=list(schema.names),
        )
        if n_missing:
            frame.iloc[:n_missing, 0] = None
        frame.to_csv(tmp_path / f"{fid}.csv", index=False)
    manifest = pd.DataFrame(
        [{"flight_id": fid, "ad_label": ad, "class_name": c} for fid, ad, c, _ in rows]
    )
    mpath = tmp_path / "labels.csv"
    manifest.to_csv(mpath, index=False)
    return mpath


def test_load_dataset_excludes_at_missing_threshold(tmp_path, tiny_schema):
    mpath = _write_corpus(
        tmp_path,
        tiny_schema,
        [
            ("ok", "healthy", "", 1),       # 5% missing -> kept
            ("bad", "healthy", "", 2),      # exactly 10% -> excluded
            ("worse", "healthy", "", 5),    # 25% -> excluded
        ],
    )
    ds = load_dataset(tmp_path, tiny_schema, mpath)
    assert [s.flight_id for s in ds.samples] == ["ok"]
    assert ds.ingest.excluded_missing == 2
    assert ds.ingest.loaded == 1


def test_load_dataset_rejects_contradictory_labels(tmp_path, tiny_schema):
    mpath = _write_corpus(tmp_path, tiny_schema, [("a", "healthy", "plateau", 0)])
    with pytest.raises(ValueError, match="healthy"):
        load_dataset(tmp_path, tiny_schema, mpath)


def test_load_dataset_rejects_unknown_class_when_vocab_given(tmp_path, tiny_schema):
    mpath = _write_corpus(tmp_path, tiny_schema, [("a", "anomalous", "other", 0)])
    with pytest.raises(ValueError, match="other"):
        load_dataset(tmp_path, tiny_schema, mpath, class_names=["plateau"])


def test_load_dataset_tallies_unreadable_files(tmp_path, tiny_schema):
    mpath = _write_corpus(tmp_path, tiny_schema, [("a", "healthy", "", 0)])
    manifest = pd.read_csv(mpath)
    manifest.loc[len(manifest)] = {"flight_id": "ghost", "ad_label": "healthy", "class_name": ""}
    manifest.to_csv(mpath, index=False)
    (tmp_path / "ghost.csv").mkdir()  # unreadable as a file
    ds = load_dataset(tmp_path, tiny_schema, mpath)
    assert ds.ingest.skipped_unreadable == 1
    assert any("ghost" in w for w in ds.ingest.warnings)
    assert [s.flight_id for s in ds.samples] == ["a"]


def test_load_dataset_schema_mismatch_is_a_hard_error(tmp_path, tiny_schema):
    # a parseable CSV with wrong columns is a contract violation, not a skip
    mpath = _write_corpus(tmp_path, tiny_schema, [("a", "healthy", "", 0)])
    manifest = pd.read_csv(mpath)
    manifest.loc[len(manifest)] = {"flight_id": "odd", "ad_label": "healthy", "class_name": ""}
    manifest.to_csv(mpath, index=False)
    (tmp_path / "odd.csv").write_text("not,the,right,columns\n1,2,3,4\n")
    with pytest.raises(ValueError):
        load_dataset(tmp_path, tiny_schema, mpath)


def test_dataset_roundtrip_through_csv(tmp_path, tiny_corpus):
    manifest = write_dataset_csv(tiny_corpus, tmp_path)
    back = load_dataset(tmp_path, tiny_corpus.schema, manifest)
    assert len(back) == len(tiny_corpus)
    orig = tiny_corpus.by_id("syn-h-0000")
    again = back.by_id("syn-h-0000")
    np.testing.assert_allclose(orig.values, again.values, atol=1e-12)


# ---------------------------------------------------------------------------
# Cubic-spline resampling against the tridiagonal oracle
# ---------------------------------------------------------------------------

def test_resample_matches_independent_tridiagonal_solver(rng):
    for _ in range(10):
        L = int(rng.integers(5, 60))
        series = rng.normal(size=(L, 3)).cumsum(axis=0)
        target = int(rng.integers(4, 100))
        ours = resample_series(series, target)
        xs = np.linspace(0.0, L - 1.0, target)
        ref = natural_spline_eval(np.arange(L, dtype=float), series, xs)
        np.testing.assert_allclose(ours, ref, atol=1e-8, rtol=1e-8)


def test_resample_preserves_constants_and_ramps():
    const = np.full((17, 2), 3.25)
    out = resample_series(const, 40)
    np.testing.assert_allclose(out, 3.25, atol=1e-9)
    ramp = np.linspace(0, 5, 23)[:, None] * np.array([[1.0, -2.0]])
    out = resample_series(ramp, 57)
    expect = np.linspace(0, 5, 57)[:, None] * np.array([[1.0, -2.0]])
    np.testing.assert_allclose(out, expect, atol=1e-9)


def test_resample_same_length_is_identity():
    rng = np.random.default_rng(5)
    series = rng.normal(size=(31, 4))
    out = resample_series(series, 31)
    np.testing.assert_allclose(out, series, atol=1e-7)


def test_resample_short_series_degrade_gracefully():
    two = np.array([[0.0], [4.0]])
    out = resample_series(two, 5)
    np.testing.assert_allclose(out[:, 0], [0.0, 1.0, 2.0, 3.0, 4.0])
    three = np.array([[0.0], [1.0], [4.0]])  # t^2 fits exactly
    out3 = resample_series(three, 5)
    np.testing.assert_allclose(out3[:, 0], np.linspace(0, 2, 5) ** 2, atol=1e-12)
    with pytest.raises(ValueError):
        resample_series(np.zeros((1, 2)), 8)


def test_resample_cubic_drops_partial_masks_keeps_dead_channels(tiny_corpus):
    s = tiny_corpus.samples[0]
    withmask = s.with_values(s.values, np.zeros_like(s.missing_mask))
    withmask.missing_mask[:, 2] = True  # entire channel missing
    withmask.missing_mask[0, 0] = True  # partial gap, already filled
    out = resample_cubic(withmask, 50)
    assert out.length == 50
    assert out.missing_mask[:, 2].all()
    assert not out.missing_mask[:, 0].any()


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def test_fit_norm_stats_pools_across_flights(tiny_corpus):
    stats = fit_norm_stats(tiny_corpus.samples[:5])
    stack = np.concatenate([s.values for s in tiny_corpus.samples[:5]], axis=0)
    mean, std = zscore_reference(stack)
    np.testing.assert_allclose(stats.mean, mean, atol=1e-12)
    np.testing.assert_allclose(stats.std, std, atol=1e-12)


def test_normalize_fit_gives_zero_mean_unit_std(tiny_corpus):
    normed, stats = normalize(tiny_corpus, mode="fit")
    stack = np.concatenate([s.values for s in normed.samples], axis=0)
    np.testing.assert_allclose(stack.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(stack.std(axis=0), 1.0, atol=1e-6)  # eps guard shifts std
    # apply mode reuses the provided stats rather than refitting
    reapplied, _ = normalize(tiny_corpus, stats, mode="apply")
    np.testing.assert_allclose(reapplied.samples[0].values, normed.samples[0].values)


def test_normalize_apply_requires_stats(tiny_corpus):
    with pytest.raises(ValueError):
        normalize(tiny_corpus, mode="apply")
    with pytest.raises(ValueError):
        normalize(tiny_corpus, None, mode="nonsense")


# ---------------------------------------------------------------------------
# Fold planning
# ---------------------------------------------------------------------------

def test_kfold_partitions_and_balances(tiny_corpus):
    plan = stratified_kfold(tiny_corpus, k=5, seed=3)
    all_ids = sorted(s.flight_id for s in tiny_corpus.samples)
    seen = sorted(plan.assignments)
    assert seen == all_ids  # every flight in exactly one fold
    # fold sizes within 1 per class
    for label in {s.diagnosis_label for s in tiny_corpus.samples}:
        ids = {s.flight_id for s in tiny_corpus.samples if s.diagnosis_label == label}
        per_fold = [sum(1 for f in ids if plan.assignments[f] == i) for i in range(5)]
        assert max(per_fold) - min(per_fold) <= 1


def test_kfold_is_deterministic_and_seed_sensitive(tiny_corpus):
    a = stratified_kfold(tiny_corpus, k=3, seed=1)
    b = stratified_kfold(tiny_corpus, k=3, seed=1)
    c = stratified_kfold(tiny_corpus, k=3, seed=2)
    assert a.assignments == b.assignments
    assert a.assignments != c.assignments


def test_kfold_rejects_bad_k(tiny_corpus):
    with pytest.raises(ValueError):
        stratified_kfold(tiny_corpus, k=1)
    with pytest.raises(ValueError):
        stratified_kfold(tiny_corpus, k=len(tiny_corpus) + 1)


@settings(max_examples=30, deadline=None)
@given(
    counts=st.lists(st.integers(min_value=0, max_value=23), min_size=1, max_size=4),
    k=st.integers(min_value=2, max_value=6),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
)
def test_kfold_balance_property(counts, k, seed):
    schema = synth_schema(4)
    samples = []
    names = [f"c{j}" for j in range(1, len(counts))]
    for label, n in enumerate(counts):
        for i in range(n):
            fid = f"f{label}_{i}"
            samples.append(
                FlightSample(
                    flight_id=fid,
                    values=np.zeros((4, 4)),
                    missing_mask=np.zeros((4, 4), bool),
                    ad_label=HEALTHY if label == 0 else ANOMALOUS,
                    fc_label=None if label == 0 else label,
                    class_name=None if label == 0 else names[label - 1],
                )
            )
    if len(samples) < k:
        return  # covered by the explicit rejection test
    ds = LabeledDataset(samples, schema, names)
    plan = stratified_kfold(ds, k=k, seed=seed)
    assert sorted(plan.assignments) == sorted(s.flight_id for s in samples)
    for label, n in enumerate(counts):
        ids = [s.flight_id for s in samples if s.diagnosis_label == label]
        per_fold = [sum(1 for f in ids if plan.assignments[f] == i) for i in range(k)]
        assert max(per_fold) - min(per_fold) <= 1, (label, per_fold)


# ---------------------------------------------------------------------------
# Replication augmentation
# ---------------------------------------------------------------------------

def _fault_counts(ds):
    out = {}
    for s in ds.samples:
        if s.ad_label == ANOMALOUS:
            out[s.fc_label] = out.get(s.fc_label, 0) + 1
    return out


def test_replicate_augment_targets_min_rule(tiny_corpus):
    anomalous = anomalous_subset(tiny_corpus)
    before = _fault_counts(anomalous)
    n_cmax = max(before.values())
    augmented = replicate_augment(anomalous, k_da=3)
    after = _fault_counts(augmented)
    for label, n in before.items():
        assert after[label] == min(3 * n, n_cmax)


def test_replicate_augment_exact_sizes_unbalanced():
    schema = synth_schema(4)
    samples = []
    for label, n in ((1, 2), (2, 9)):
        for i in range(n):
            samples.append(
                FlightSample(
                    f"s{label}_{i}",
                    np.random.default_rng(i).normal(size=(6, 4)),
                    np.zeros((6, 4), bool),
                    ANOMALOUS,
                    label,
                    f"c{label}",
                )
            )
    ds = LabeledDataset(samples, schema, ["c1", "c2"])
    out = replicate_augment(ds, k_da=3)
    counts = _fault_counts(out)
    assert counts == {1: min(3 * 2, 9), 2: 9}  # {1: 6, 2: 9}


def test_replicas_point_to_their_source(tiny_corpus):
    anomalous = anomalous_subset(tiny_corpus)
    augmented = replicate_augment(anomalous, k_da=3)
    originals = {s.flight_id for s in anomalous.samples}
    for s in augmented.samples:
        if s.flight_id not in originals:
            assert "#r" in s.flight_id
            assert s.source_id in originals
            src = anomalous.by_id(s.source_id)
            np.testing.assert_array_equal(s.values, src.values)
            assert s.fc_label == src.fc_label


def test_replicate_augment_single_class_is_a_noop(tiny_corpus):
    healthy_only = LabeledDataset(
        [s for s in tiny_corpus.samples if s.ad_label == HEALTHY],
        tiny_corpus.schema,
        tiny_corpus.class_names,
    )
    out = replicate_augment(healthy_only, k_da=5)
    assert len(out) == len(healthy_only)  # already at N_cmax


def test_replicate_augment_rejects_empty_and_bad_k(tiny_corpus):
    empty = LabeledDataset([], tiny_corpus.schema, tiny_corpus.class_names)
    with pytest.raises(ValueError):
        replicate_augment(empty, k_da=2)
    with pytest.raises(ValueError):
        replicate_augment(tiny_corpus, k_da=0)


def test_anomalous_subset_warns_when_empty(tiny_corpus):
    healthy_only = LabeledDataset(
        [s for s in tiny_corpus.samples if s.ad_label == HEALTHY],
        tiny_corpus.schema,
        tiny_corpus.class_names,
    )
    with pytest.warns(UserWarning):
        out = anomalous_subset(healthy_only)
    assert len(out) == 0
