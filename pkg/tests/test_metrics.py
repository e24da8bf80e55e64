import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmsd.metrics import (
    STABILITY_CATEGORIES,
    ConfusionMatrix,
    classification_metrics,
    efficiency_metrics,
    healthy_center_similarity,
    mcwpm,
    stability_analysis,
)

from oracles import (
    fnr_reference,
    macro_f1_reference,
    mcwpm_reference,
    per_class_f1_reference,
)


def _cm(counts, names=None):
    counts = np.asarray(counts)
    if names is None:
        names = tuple(f"k{i}" for i in range(counts.shape[0]))
    return ConfusionMatrix(counts, tuple(names))


# ---------------------------------------------------------------------------
# Confusion matrix container
# ---------------------------------------------------------------------------

def test_confusion_from_predictions_and_csv(tmp_path):
    cm = ConfusionMatrix.from_predictions(
        [0, 0, 1, 2, 2], [0, 1, 1, 2, 0], ["healthy", "a", "b"]
    )
    np.testing.assert_array_equal(cm.counts, [[1, 1, 0], [0, 1, 0], [1, 0, 1]])
    path = cm.to_csv(tmp_path / "cm.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "true\\pred,healthy,a,b"
    assert lines[1] == "healthy,1,1,0"


def test_confusion_validation():
    with pytest.raises(ValueError):
        _cm(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        _cm([[1, -1], [0, 2]])
    with pytest.raises(ValueError):
        ConfusionMatrix(np.zeros((2, 2)), ("only_one",))
    with pytest.raises(ValueError):  # strict zip: length mismatch
        ConfusionMatrix.from_predictions([0, 1], [0], ["a", "b"])


# ---------------------------------------------------------------------------
# The penalized diagnosis score
# ---------------------------------------------------------------------------

def test_mcwpm_hand_case():
    # 4 correct, 1 missed fault, 0 false alarms, 1 cross-fault confusion:
    # 4 / (4 + 2.5*1 + 1.0*0) = 8/13
    counts = [[2, 0, 0], [1, 1, 0], [0, 1, 1]]
    assert mcwpm(_cm(counts)) == pytest.approx(4 / 6.5)
    assert mcwpm(_cm(counts)) == pytest.approx(mcwpm_reference(counts, 2.5, 1.0))


def test_mcwpm_cross_fault_confusions_are_unpenalized():
    # moving mass between two fault columns changes nothing
    a = [[5, 0, 0], [0, 3, 2], [0, 0, 5]]
    b = [[5, 0, 0], [0, 3, 2], [0, 2, 3]]
    assert mcwpm(_cm(a)) == pytest.approx(mcwpm(_cm(b)))


def test_mcwpm_weights_and_empty_denominator():
    counts = [[0, 1], [1, 0]]  # no correct, 1 miss, 1 false alarm
    assert mcwpm(_cm(counts), alpha_p=2.5, beta_p=1.0) == 0.0
    assert mcwpm(_cm([[0, 0], [0, 0]])) == 1.0  # defined as perfect when empty
    assert mcwpm(_cm([[3, 0], [0, 3]])) == 1.0
    with pytest.raises(ValueError):
        mcwpm(_cm(counts), alpha_p=-1.0)


def test_mcwpm_misses_cost_more_than_false_alarms():
    miss = [[10, 0, 0], [1, 4, 0], [0, 0, 5]]
    alarm = [[9, 1, 0], [0, 5, 0], [0, 0, 5]]
    assert mcwpm(_cm(miss)) < mcwpm(_cm(alarm))


@settings(max_examples=60, deadline=None)
@given(
    counts=st.lists(
        st.lists(st.integers(min_value=0, max_value=40), min_size=3, max_size=3),
        min_size=3,
        max_size=3,
    ),
    alpha=st.floats(min_value=0.0, max_value=10.0),
    beta=st.floats(min_value=0.0, max_value=10.0),
)
def test_mcwpm_matches_reference_property(counts, alpha, beta):
    got = mcwpm(_cm(counts), alpha, beta)
    expect = mcwpm_reference(counts, alpha, beta)
    assert got == pytest.approx(expect, abs=1e-12)
    assert 0.0 <= got <= 1.0


# ---------------------------------------------------------------------------
# Classification reports
# ---------------------------------------------------------------------------

def test_report_matches_reference_metrics(rng):
    y_true = rng.integers(0, 4, size=200).tolist()
    y_pred = rng.integers(0, 4, size=200).tolist()
    names = ["healthy", "a", "b", "c"]
    cm = ConfusionMatrix.from_predictions(y_true, y_pred, names)
    rep = classification_metrics(cm, task="diagnosis")
    assert rep.acc == pytest.approx(np.mean(np.array(y_true) == np.array(y_pred)))
    assert rep.macro_f1 == pytest.approx(macro_f1_reference(y_true, y_pred, 4))
    assert rep.fnr == pytest.approx(fnr_reference(y_true, y_pred))
    assert rep.mcwpm == pytest.approx(mcwpm_reference(cm.counts, 2.5, 1.0))
    f1_ref, _ = per_class_f1_reference(y_true, y_pred, 4)
    for i, name in enumerate(names):
        assert rep.per_class[name]["f1"] == pytest.approx(f1_ref[i])


def test_macro_f1_excludes_absent_classes():
    # class "c" has no support and no predictions: excluded from the mean;
    # class "b" has support but is never predicted: included as 0
    y_true = [0, 0, 1, 1, 2]
    y_pred = [0, 0, 1, 1, 1]
    cm = ConfusionMatrix.from_predictions(y_true, y_pred, ["healthy", "a", "b", "c"])
    rep = classification_metrics(cm, task="diagnosis")
    f1_h = 1.0
    f1_a = 2 * (2 / 3) * 1.0 / (2 / 3 + 1.0)
    assert rep.macro_f1 == pytest.approx((f1_h + f1_a + 0.0) / 3)
    assert rep.macro_f1 == pytest.approx(macro_f1_reference(y_true, y_pred, 4))


def test_fnr_plus_anomalous_recall_is_one(rng):
    for _ in range(10):
        y_true = rng.integers(0, 3, size=60).tolist()
        y_pred = rng.integers(0, 3, size=60).tolist()
        if not any(t > 0 for t in y_true):
            continue
        cm = ConfusionMatrix.from_predictions(y_true, y_pred, ["h", "a", "b"])
        rep = classification_metrics(cm, task="diagnosis")
        anom = [i for i, t in enumerate(y_true) if t > 0]
        recall = sum(1 for i in anom if y_pred[i] > 0) / len(anom)
        assert rep.fnr + recall == pytest.approx(1.0)


def test_ad_task_requires_2x2():
    with pytest.raises(ValueError):
        classification_metrics(_cm(np.eye(3, dtype=int)), task="ad")
    rep = classification_metrics(
        ConfusionMatrix(np.array([[8, 2], [1, 9]]), ("healthy", "anomalous")), task="ad"
    )
    assert rep.fnr == pytest.approx(0.1)
    assert rep.mcwpm is None  # detection task carries no diagnosis score


def test_fc_task_has_no_safety_figures():
    rep = classification_metrics(_cm([[5, 1], [0, 6]], names=("a", "b")), task="fc")
    assert rep.fnr is None and rep.mcwpm is None
    with pytest.raises(ValueError):
        classification_metrics(_cm([[1]]), task="screening")
    with pytest.raises(ValueError):
        classification_metrics(_cm([[0]]), task="fc")


# ---------------------------------------------------------------------------
# Stability binning
# ---------------------------------------------------------------------------

def test_stability_buckets_and_edge_cases():
    flags = {
        "all": [True] * 10,
        "none": [False] * 10,
        "nine": [True] * 9 + [False],
        "six": [True] * 6 + [False] * 4,
        "five": [True] * 5 + [False] * 5,  # exactly half -> frequently
        "one": [True] + [False] * 9,
    }
    cats, counts = stability_analysis(flags, rounds=10)
    assert cats["all"] == "always_correct"
    assert cats["none"] == "always_misclassified"
    assert cats["nine"] == "generally_correct"
    assert cats["six"] == "generally_correct"
    assert cats["five"] == "frequently_misclassified"
    assert cats["one"] == "frequently_misclassified"
    assert counts == {
        "always_correct": 1,
        "generally_correct": 2,
        "frequently_misclassified": 2,
        "always_misclassified": 1,
    }
    assert sum(counts.values()) == len(flags)  # partition
    assert set(counts) == set(STABILITY_CATEGORIES)


def test_stability_rejects_wrong_round_count():
    with pytest.raises(ValueError, match="f1"):
        stability_analysis({"f1": [True] * 7}, rounds=10)


# ---------------------------------------------------------------------------
# Efficiency figures
# ---------------------------------------------------------------------------

class _FakeReport:
    def __init__(self, epochs, total):
        self.epochs_run = epochs
        self.total_time = total


def test_efficiency_metrics_aggregation(tmp_path):
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    p1.write_bytes(b"x" * 1000)
    p2.write_bytes(b"y" * 2500)
    calls = {"n": 0}

    def fake_batch():
        calls["n"] += 1

    out = efficiency_metrics(
        [_FakeReport(4, 8.0), None, _FakeReport(6, 2.0)],
        [p1, p2],
        inference_fn=fake_batch,
        warmup_iters=1,
        timed_iters=5,
    )
    assert out["TTT"] == pytest.approx(10.0)
    assert out["ET"] == pytest.approx(1.0)
    assert out["MSize_bytes"] == 3500
    assert out["MSize_MB"] == pytest.approx(0.0035)
    assert calls["n"] == 6  # 1 warmup + 5 timed
    assert out["IT32"] >= 0.0 and "IT32_cov" in out and "hardware" in out


def test_efficiency_metrics_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        efficiency_metrics([_FakeReport(1, 1.0)], [tmp_path / "ghost.ckpt"])
    with pytest.raises(ValueError):
        efficiency_metrics([None], [])
    p = tmp_path / "a.ckpt"
    p.write_bytes(b"z")
    with pytest.raises(ValueError, match="5"):
        efficiency_metrics(
            [_FakeReport(1, 1.0)], [p], inference_fn=lambda: None, timed_iters=3
        )


# ---------------------------------------------------------------------------
# Healthy-centroid geometry
# ---------------------------------------------------------------------------

def test_healthy_center_similarity_groups():
    e = np.eye(3)
    features = {
        "h1": e[0], "h2": e[0],          # healthy, predicted healthy
        "h3": e[1],                       # healthy, predicted fault (false alarm)
        "a1": e[0],                       # fault, predicted healthy (miss)
        "a2": e[2],                       # fault, detected: excluded
    }
    labels = {"h1": 0, "h2": 0, "h3": 0, "a1": 1, "a2": 2}
    preds = {"h1": 0, "h2": 0, "h3": 1, "a1": 0, "a2": 2}
    out = healthy_center_similarity(features, labels, preds, centroid=e[0])
    assert out["true_healthy_correct"]["n"] == 2
    assert out["true_healthy_correct"]["mean"] == pytest.approx(1.0)
    assert out["false_negative"]["n"] == 1
    assert out["false_negative"]["mean"] == pytest.approx(1.0)  # miss looks healthy
    assert out["false_positive"]["mean"] == pytest.approx(0.0)


def test_healthy_center_similarity_default_centroid_and_empty_groups():
    features = {"h1": np.array([1.0, 0.0]), "h2": np.array([0.0, 1.0])}
    labels = {"h1": 0, "h2": 0}
    preds = {"h1": 0, "h2": 0}
    out = healthy_center_similarity(features, labels, preds)
    assert out["false_negative"] is None and out["false_positive"] is None
    # centroid = mean of the two unit vectors; both sit at 45 degrees from it
    assert out["true_healthy_correct"]["mean"] == pytest.approx(np.cos(np.pi / 4))
    with pytest.raises(ValueError):
        healthy_center_similarity({"a": np.ones(2)}, {"a": 1}, {"a": 1})
