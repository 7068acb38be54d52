import csv
import io
import itertools

import numpy as np
import pytest

from cfcl.data import LabeledDataset, gen_synthetic
from cfcl.encoder import EncoderModel
from cfcl.errors import DataError, ProbeInfeasibleError
from cfcl.metrics import (METRIC_COLUMNS, CostModel, Payload, RunLedger, account_event,
                          alignment_matrix, datapoints, embeddings, importance_histogram,
                          linear_probe, model_params, rows_to_csv, separation_ratio,
                          time_to_threshold, write_metrics_csv)


def identity(dim):
    return EncoderModel((dim, dim), np.concatenate([np.eye(dim).ravel(), np.zeros(dim)]))


def sig6(a, b):
    return float(f"{a:.6g}") == float(f"{b:.6g}")


# ---------------------------------------------------------------- accounting --

def test_accounting_constants():
    cost = CostModel()
    assert account_event("pull", datapoints(1, 784, cost), cost) == (784.0, pytest.approx(6.272e-3))
    nbytes, secs = account_event("pull", datapoints(1, 784, cost), cost)
    assert sig6(secs, 6.272e-3)
    nbytes, secs = account_event("push", embeddings(1, 16, cost), cost)
    assert nbytes == 64 and sig6(secs, 5.12e-4)
    nbytes, secs = account_event("upload", model_params(45433, cost), cost)
    assert nbytes == 181732 and sig6(secs, 1.453856)


def test_rates_routed_by_kind():
    cost = CostModel(d2d_rate=2e6, uplink_rate=1e6)
    p = Payload(1, 1000, 8)
    assert account_event("push", p, cost)[1] == 4e-3
    assert account_event("broadcast", p, cost)[1] == 8e-3
    with pytest.raises(ValueError):
        account_event("gossip", p, cost)
    with pytest.raises(ValueError):
        CostModel(d2d_rate=0)


def test_ledger_step_delay_and_monotone():
    cost = CostModel()
    led = RunLedger()
    led.record(0, "push", 0, 1, Payload(1, 1000, 8), cost)
    led.record(0, "push", 0, 2, Payload(1, 1000, 8), cost)
    led.record(0, "push", 1, 0, Payload(1, 1500, 8), cost)
    led.record(0, "upload", 0, -1, Payload(1, 100, 8), cost)
    led.record(0, "upload", 1, -1, Payload(1, 100, 8), cost)
    led.record(0, "broadcast", -1, -1, Payload(1, 100, 8), cost)
    # device 0 sends 16000 bits back to back, device 1 12000 bits
    assert led.step_delay(0) == pytest.approx(0.016 + 0.0008 + 0.0008)
    assert led.cumulative(0)[:2] == (3500.0, 200.0)
    rng = np.random.default_rng(0)
    for t in range(1, 30):
        led.record(t, ["push", "pull", "upload", "broadcast"][t % 4], t % 3, 0,
                   Payload(1, int(rng.integers(1, 500)), 8), cost)
    series = [led.cumulative(t) for t in range(30)]
    for a, b in zip(series, series[1:]):
        assert all(y >= x for x, y in zip(a, b))
    led.add_compute(3, 1.5)
    assert led.cumulative(29, include_compute=True)[2] == pytest.approx(series[-1][2] + 1.5)


def test_time_to_threshold():
    series = [(10, 0.2), (20, 0.55), (30, 0.5), (40, 0.81)]
    assert time_to_threshold(series, 0.0) == 10
    assert time_to_threshold(series, 1.01) is None
    for th in np.linspace(0, 0.9, 19):
        want = next((c for c, a in series if a >= th), None)
        assert time_to_threshold(series, th) == want


# ---------------------------------------------------------------------- probe --

def test_probe_identity_on_separable_blobs():
    rng = np.random.default_rng(0)
    train = LabeledDataset(np.vstack([rng.normal(-3, 0.3, (100, 2)), rng.normal(3, 0.3, (100, 2))]),
                           np.repeat([0, 1], 100), 2)
    test = LabeledDataset(np.vstack([rng.normal(-3, 0.3, (100, 2)), rng.normal(3, 0.3, (100, 2))]),
                          np.repeat([0, 1], 100), 2)
    assert linear_probe(identity(2), train, test) >= 0.99


def test_probe_constant_encoder_majority_rate():
    rng = np.random.default_rng(1)
    labels = np.repeat([0, 1, 2], [140, 40, 20])
    ds = LabeledDataset(rng.normal(size=(200, 2)), labels, 3)
    acc = linear_probe(EncoderModel.zeros([2, 4]), ds, ds)
    assert abs(acc - 0.7) <= 0.02


def test_probe_random_guess_floor():
    accs = []
    for s in range(10):
        rng = np.random.default_rng(s)
        tr = LabeledDataset(rng.normal(size=(200, 2)), rng.integers(0, 4, 200), 4)
        te = LabeledDataset(rng.normal(size=(200, 2)), rng.integers(0, 4, 200), 4)
        model = EncoderModel.initialize([2, 8, 3], rng)
        accs.append(linear_probe(model, tr, te, rng=np.random.default_rng(s)))
    assert np.mean(accs) >= 1 / 4 - 0.05


def test_probe_missing_class_and_determinism():
    ds = gen_synthetic(3, 20, 2, 0.2, np.random.default_rng(0))
    with pytest.raises(ProbeInfeasibleError):
        linear_probe(identity(2), ds.subset(np.flatnonzero(ds.labels < 2)), ds)
    model = EncoderModel.initialize([2, 5, 3], np.random.default_rng(1))
    a = linear_probe(model, ds, ds, rng=np.random.default_rng(4))
    b = linear_probe(model, ds, ds, rng=np.random.default_rng(4))
    assert a == b


# ------------------------------------------------------------------ alignment --

def test_alignment_constant_encoder_is_zero():
    ds = gen_synthetic(3, 5, 2, 0.3, np.random.default_rng(0))
    assert not alignment_matrix(EncoderModel.zeros([2, 3]), ds).any()


def test_alignment_four_points_pair_enumeration():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 3.0], [0.0, 5.0]])
    ds = LabeledDataset(pts, np.array([0, 0, 1, 1]), 2)
    M = alignment_matrix(identity(2), ds)
    want = np.zeros((2, 2))
    for a, b in itertools.product(range(2), repeat=2):
        pairs = [(i, j) for i in range(4) for j in range(4)
                 if ds.labels[i] == a and ds.labels[j] == b and i != j]
        want[a, b] = np.mean([np.linalg.norm(pts[i] - pts[j]) for i, j in pairs])
    np.testing.assert_allclose(M, want, atol=1e-12)
    assert np.array_equal(M, M.T) and (M >= 0).all()


def test_alignment_needs_all_classes():
    ds = LabeledDataset(np.zeros((2, 2)), np.array([0, 0]), 2)
    with pytest.raises(DataError):
        alignment_matrix(identity(2), ds)


def test_separation_ratio():
    assert separation_ratio(np.full((3, 3), 2.0)) == pytest.approx(1.0)
    M = np.full((4, 4), 3.0)
    np.fill_diagonal(M, 1.0)
    assert separation_ratio(M) == pytest.approx(3.0)
    rng = np.random.default_rng(0)
    A = rng.random((5, 5))
    A = A + A.T
    off = [A[i, j] for i in range(5) for j in range(5) if i != j]
    assert separation_ratio(A) == pytest.approx(np.mean(off) / np.mean(np.diag(A)), rel=1e-12)
    with pytest.raises(ZeroDivisionError):
        separation_ratio(np.ones((2, 2)) - np.eye(2))


def test_importance_histogram():
    counts, edges, d = importance_histogram([[1.0, 2.0]], [[1.0, 2.0]])
    assert d.tolist() == [0.0] and counts.sum() == 1 and (counts > 0).sum() == 1
    assert len(counts) == 30
    R, C = np.array([[0.0, 0.0], [3.0, 4.0]]), np.array([[0.0, 0.0], [6.0, 8.0]])
    _, _, d = importance_histogram(R, C, bins=4)
    want = [np.mean([np.linalg.norm(r - c) for c in C]) for r in R]
    np.testing.assert_allclose(d, want)


# ------------------------------------------------------------------------ CSV --

def test_metrics_csv_format(tmp_path):
    rows = [dict(zip(METRIC_COLUMNS, (25, 1, 0.5, 2.0, 10.0, 20.0, 0.125))),
            dict(zip(METRIC_COLUMNS, (50, 2, 0.75, 2.5, 11.0, 40.0, 0.25)))]
    path = tmp_path / "m.csv"
    write_metrics_csv(str(path), rows)
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    got = list(csv.DictReader(io.StringIO(raw.decode("utf-8"))))
    assert tuple(got[0]) == METRIC_COLUMNS
    assert float(got[1]["accuracy"]) == 0.75 and got[0]["t"] == "25"
    assert rows_to_csv([], METRIC_COLUMNS) == ",".join(METRIC_COLUMNS) + "\n"
    assert list(tmp_path.iterdir()) == [path]
