"""Evaluation of learned embeddings and communication-cost bookkeeping."""
from __future__ import annotations

import csv
import io
import os
import tempfile
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, List, NamedTuple, Optional, Sequence

import numpy as np

from .data import LabeledDataset
from .encoder import EncoderModel, forward
from .errors import DataError, ProbeInfeasibleError

METRIC_COLUMNS = ("t", "gamma", "accuracy", "sep_ratio", "d2d_bytes_cum",
                  "uplink_bytes_cum", "delay_seconds_cum")

MODEL_EVENTS = ("upload", "broadcast")
D2D_EVENTS = ("push", "pull")


# ---------------------------------------------------------- linear probe --

def _standardize(train, test):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return (train - mu) / sd, (test - mu) / sd


def linear_probe(encoder: EncoderModel, train: LabeledDataset, test: LabeledDataset,
                 iters: int = 1000, lr: float = 0.1, batch_size: int = 32,
                 rng: Optional[np.random.Generator] = None) -> float:
    """Test accuracy of a softmax-regression layer trained on frozen embeddings.

    Embeddings are standardised with training statistics first, which a linear
    layer could absorb anyway but keeps a fixed step size well conditioned.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    k = max(train.class_count, test.class_count)
    missing = set(np.unique(test.labels)) - set(np.unique(train.labels))
    if missing:
        raise ProbeInfeasibleError(f"classes {sorted(missing)} absent from the probe training split")
    Xtr, Xte = _standardize(forward(encoder, train.points), forward(encoder, test.points))
    W = np.zeros((Xtr.shape[1], k))
    b = np.zeros(k)
    ytr = train.labels
    n = len(Xtr)
    for _ in range(iters):
        idx = rng.integers(n, size=batch_size)
        xb, yb = Xtr[idx], ytr[idx]
        logits = xb @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(yb)), yb] -= 1.0
        W -= lr * xb.T @ p / len(yb)
        b -= lr * p.mean(axis=0)
    pred = np.argmax(Xte @ W + b, axis=1)
    return float(np.mean(pred == test.labels))


# ------------------------------------------------------------- alignment --

def alignment_matrix(encoder: EncoderModel, ds: LabeledDataset) -> np.ndarray:
    """Mean Euclidean distance between embeddings of every pair of classes.

    The diagonal averages over distinct pairs only.
    """
    E = forward(encoder, ds.points)
    k = ds.class_count
    present = np.unique(ds.labels)
    if len(present) != k:
        raise DataError("alignment matrix needs every class present")
    sq = (E * E).sum(1)
    D = np.sqrt(np.maximum(sq[:, None] - 2 * E @ E.T + sq[None, :], 0.0))
    np.fill_diagonal(D, 0.0)
    M = np.zeros((k, k))
    for a in range(k):
        ia = ds.labels == a
        for c in range(a, k):
            ic = ds.labels == c
            block = D[np.ix_(ia, ic)]
            if a == c:
                n = ia.sum()
                M[a, a] = block.sum() / (n * (n - 1)) if n > 1 else 0.0
            else:
                M[a, c] = M[c, a] = block.mean()
    return M


def separation_ratio(M) -> float:
    """Mean off-diagonal over mean diagonal of an alignment matrix."""
    M = np.asarray(M, dtype=np.float64)
    k = len(M)
    diag = np.mean(np.diag(M))
    if diag == 0:
        raise ZeroDivisionError("separation ratio undefined: mean intra-class distance is 0")
    off = (M.sum() - np.trace(M)) / (k * (k - 1))
    return float(off / diag)


def importance_histogram(received, local_centroids, bins: int = 30):
    """Histogram of each received item's mean distance to the local centroids.

    Returns ``(counts, edges, mean_distances)``.
    """
    R = np.atleast_2d(np.asarray(received, dtype=np.float64))
    C = np.atleast_2d(np.asarray(local_centroids, dtype=np.float64))
    d = np.sqrt(((R[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)).mean(axis=1)
    counts, edges = np.histogram(d, bins=bins)
    return counts, edges, d


# ------------------------------------------------------------ accounting --

@dataclass(frozen=True)
class CostModel:
    d2d_rate: float = 1e6
    uplink_rate: float = 1e6
    model_param_bits: int = 32
    datapoint_bits: int = 8
    embedding_value_bits: int = 32

    def __post_init__(self):
        for name in ("d2d_rate", "uplink_rate", "model_param_bits", "datapoint_bits",
                     "embedding_value_bits"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


class Payload(NamedTuple):
    items: int
    elements_per_item: int
    bits_per_element: int

    @property
    def bits(self) -> int:
        return self.items * self.elements_per_item * self.bits_per_element


def datapoints(n: int, dim: int, cost: CostModel) -> Payload:
    return Payload(n, dim, cost.datapoint_bits)


def embeddings(n: int, dim: int, cost: CostModel) -> Payload:
    return Payload(n, dim, cost.embedding_value_bits)


def model_params(n_params: int, cost: CostModel) -> Payload:
    return Payload(1, n_params, cost.model_param_bits)


def account_event(kind: str, payload: Payload, cost: CostModel):
    """``(bytes, seconds)`` of one transmission.

    Model uploads and broadcasts use the uplink rate, pushes and pulls the D2D rate.
    """
    if kind in MODEL_EVENTS:
        rate = cost.uplink_rate
    elif kind in D2D_EVENTS:
        rate = cost.d2d_rate
    else:
        raise ValueError(f"unknown event kind {kind!r}")
    bits = payload.bits
    return bits / 8.0, bits / rate


@dataclass
class LedgerEvent:
    t: int
    kind: str
    device: int
    peer: int
    bytes: float
    seconds: float


@dataclass
class RunLedger:
    """Append-only event log with cumulative byte and delay series.

    Within one time step devices transmit in parallel and each device sends
    its own messages back to back; the step's delay is the slowest device's
    D2D time plus the slowest upload plus the broadcast.
    """
    events: List[LedgerEvent] = field(default_factory=list)
    compute_seconds: dict = field(default_factory=lambda: defaultdict(float))
    _steps: dict = field(default_factory=dict, repr=False)

    def record(self, t, kind, device, peer, payload: Payload, cost: CostModel) -> LedgerEvent:
        nbytes, secs = account_event(kind, payload, cost)
        ev = LedgerEvent(int(t), kind, int(device), int(peer), nbytes, secs)
        self.events.append(ev)
        st = self._steps.setdefault(ev.t, {"d2d": defaultdict(float), "upload": 0.0,
                                           "broadcast": 0.0, "d2d_bytes": 0.0,
                                           "uplink_bytes": 0.0})
        if kind in D2D_EVENTS:
            st["d2d"][ev.device] += secs
            st["d2d_bytes"] += nbytes
        elif kind == "upload":
            st["upload"] = max(st["upload"], secs)
            st["uplink_bytes"] += nbytes
        else:
            st["broadcast"] = max(st["broadcast"], secs)
        return ev

    def add_compute(self, t: int, seconds: float) -> None:
        self.compute_seconds[int(t)] += seconds

    def step_delay(self, t: int) -> float:
        st = self._steps.get(int(t))
        if st is None:
            return 0.0
        return max(st["d2d"].values(), default=0.0) + st["upload"] + st["broadcast"]

    def cumulative(self, t: int, include_compute: bool = False):
        """``(d2d_bytes, uplink_bytes, delay_seconds)`` summed over events at or before ``t``."""
        d2d = up = delay = 0.0
        for s in sorted(self._steps):
            if s > t:
                break
            st = self._steps[s]
            d2d += st["d2d_bytes"]
            up += st["uplink_bytes"]
            delay += self.step_delay(s)
        if include_compute:
            delay += sum(v for s, v in self.compute_seconds.items() if s <= t)
        return d2d, up, delay

    def to_json(self):
        return {
            "events": [ev.__dict__ for ev in self.events],
            "compute_seconds": {str(k): v for k, v in sorted(self.compute_seconds.items())},
        }


def time_to_threshold(series: Iterable, threshold: float):
    """First cumulative cost at which accuracy reaches ``threshold``; ``None`` if never."""
    for cost, acc in series:
        if acc >= threshold:
            return cost
    return None


# ------------------------------------------------------------------ CSV --

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return "unreached"
    return str(v)


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def atomic_write(path: str, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_metrics_csv(path: str, rows: Sequence[dict]) -> None:
    atomic_write(path, rows_to_csv(rows, METRIC_COLUMNS))
