"""Device graph, local training, aggregation and the full push/pull/train loop."""
from __future__ import annotations

import hashlib
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import clustering, explicit, implicit, metrics
from .config import SimConfig
from .data import AugmentationSpec, LabeledDataset, augment, data_dir, gen_synthetic, load_idx, \
    partition_noniid
from .encoder import Adam, EncoderModel, RegularizerState, TripletBatch, forward, loss_gradient, \
    sgd_step
from .errors import CFCLError, DataError, InsufficientDataError, RunError, TopologyError

log = logging.getLogger(__name__)

# fixed positions in the seed-sequence spawn so streams never shift between modes
_STREAMS = ("data", "topology", "init", "participation", "probe", "devices", "exchange")


# ---------------------------------------------------------------- graph --

@dataclass(frozen=True)
class NetworkGraph:
    n: int
    edges: tuple
    positions: np.ndarray
    radius: float

    @property
    def neighbors(self) -> List[List[int]]:
        nb = [[] for _ in range(self.n)]
        for a, b in self.edges:
            nb[a].append(b)
            nb[b].append(a)
        return [sorted(x) for x in nb]

    @property
    def avg_degree(self) -> float:
        return 2.0 * len(self.edges) / self.n if self.n else 0.0

    def is_connected(self) -> bool:
        if self.n <= 1:
            return True
        nb = self.neighbors
        seen = {0}
        stack = [0]
        while stack:
            for v in nb[stack.pop()]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == self.n


def _rgg_at_degree(pos, target):
    """Link the ``round(target * n / 2)`` closest pairs; radius sits between the last kept and first dropped."""
    n = len(pos)
    iu, ju = np.triu_indices(n, k=1)
    d = np.sqrt(((pos[iu] - pos[ju]) ** 2).sum(axis=1))
    order = np.argsort(d, kind="stable")
    m = int(min(max(round(target * n / 2.0), 1), len(d)))
    if m == len(d):
        r = float(d[order[-1]]) + 1e-9
    else:
        r = 0.5 * float(d[order[m - 1]] + d[order[m]])
    edges = tuple(sorted((int(iu[k]), int(ju[k])) for k in order[:m]))
    return edges, r


def build_rgg(n: int, target_avg_degree: float, rng: np.random.Generator,
              max_attempts: int = 100) -> NetworkGraph:
    """Random geometric graph on the unit square with a prescribed mean degree.

    Positions are redrawn until the graph is connected.
    """
    if n < 1:
        raise TopologyError("need at least one node")
    if n == 1:
        return NetworkGraph(1, (), rng.random((1, 2)), 0.0)
    if not 0 < target_avg_degree <= n - 1:
        raise TopologyError(f"target degree {target_avg_degree} outside (0, {n - 1}]")
    for _ in range(max_attempts):
        pos = rng.random((n, 2))
        edges, r = _rgg_at_degree(pos, target_avg_degree)
        g = NetworkGraph(n, edges, pos, r)
        if g.is_connected():
            return g
    raise TopologyError(f"no connected RGG with mean degree {target_avg_degree} "
                        f"after {max_attempts} attempts")


# --------------------------------------------------------------- devices --

@dataclass
class DeviceState:
    id: int
    data: np.ndarray
    model: EncoderModel
    train_rng: np.random.Generator
    exchange_rng: np.random.Generator
    buffer: np.ndarray = None
    buffer_origin: np.ndarray = None   # (n, 2): origin device, origin index
    reg: RegularizerState = field(default_factory=RegularizerState)
    optimizer: Optional[Adam] = None
    size_sum: float = 0.0
    _train_cache: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        dim = self.data.shape[1]
        if self.buffer is None:
            self.buffer = np.zeros((0, dim))
            self.buffer_origin = np.zeros((0, 2), dtype=np.int64)

    @property
    def train_points(self) -> np.ndarray:
        """Local data plus whatever sits in the pull buffer."""
        if self._train_cache is None:
            self._train_cache = (np.vstack([self.data, self.buffer]) if len(self.buffer)
                                 else self.data)
        return self._train_cache

    def replace_buffer(self, points, origin) -> None:
        self.buffer = np.asarray(points, dtype=np.float64).reshape(-1, self.data.shape[1])
        self.buffer_origin = np.asarray(origin, dtype=np.int64).reshape(-1, 2)
        self._train_cache = None


def sample_triplets(points: np.ndarray, batch_size: int, aug: AugmentationSpec,
                    rng: np.random.Generator) -> TripletBatch:
    """Anchors uniform from ``points``, positives by augmentation, negatives from the rest."""
    n = len(points)
    if n < 2:
        raise InsufficientDataError(f"need at least 2 local points, have {n}")
    a = rng.integers(n, size=batch_size)
    neg = rng.integers(n - 1, size=batch_size)
    neg = neg + (neg >= a)
    anchors = points[a]
    return TripletBatch(anchors, augment(anchors, aug, rng), points[neg])


def local_step(device: DeviceState, lr: float, aug: AugmentationSpec, batch_size: int,
               margin: float, use_reg: bool = False) -> DeviceState:
    """One minibatch step on the device's current training set."""
    batch = sample_triplets(device.train_points, batch_size, aug, device.train_rng)
    grad = loss_gradient(device.model, batch, device.reg if use_reg else None, margin)
    if device.optimizer is not None:
        device.model = device.optimizer.step(device.model, grad, lr)
    else:
        device.model = sgd_step(device.model, grad, lr)
    if not np.all(np.isfinite(device.model.weights)):
        raise DataError(f"device {device.id} model diverged (non-finite weights); lower lr")
    return device


def aggregate(models: Sequence[np.ndarray], weights: Sequence[float],
              participants: Optional[Sequence[int]] = None) -> np.ndarray:
    """Weighted mean of the participants' parameter vectors."""
    idx = list(range(len(models))) if participants is None else list(participants)
    if not idx:
        raise ValueError("aggregation needs at least one participant")
    w = np.array([weights[i] for i in idx], dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("aggregation weights must be positive")
    stacked = np.stack([np.asarray(models[i], dtype=np.float64) for i in idx])
    if len(idx) == 1:
        return stacked[0].copy()
    return (w[:, None] * stacked).sum(axis=0) / w.sum()


def digest(weights: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(weights).tobytes()).hexdigest()


# ------------------------------------------------------------------ run --

@dataclass
class RunResult:
    config: SimConfig
    rows: List[dict]
    ledger: metrics.RunLedger
    events: List[dict]
    global_model: EncoderModel
    graph: NetworkGraph
    final_alignment: Optional[np.ndarray] = None

    def metrics_csv(self) -> str:
        return metrics.rows_to_csv(self.rows, metrics.METRIC_COLUMNS)

    def trace_json(self) -> dict:
        return {"graph": {"n": self.graph.n, "edges": [list(e) for e in self.graph.edges],
                          "radius": self.graph.radius},
                "events": self.events, "ledger": self.ledger.to_json()}


def load_datasets(cfg: SimConfig, rng: np.random.Generator):
    """``(train, test)`` labelled datasets for the configured source."""
    if cfg.dataset == "synthetic":
        train = gen_synthetic(cfg.classes, cfg.per_class, cfg.dim, cfg.spread, rng, cfg.radius)
        test = gen_synthetic(cfg.classes, cfg.test_per_class, cfg.dim, cfg.spread, rng, cfg.radius)
        return train, test
    root = data_dir(cfg.data_dir)
    if cfg.dataset in ("fmnist", "usps"):
        root = os.path.join(root, cfg.dataset) if os.path.isdir(os.path.join(root, cfg.dataset)) \
            else root
    train = load_idx(os.path.join(root, cfg.idx_train_images),
                     os.path.join(root, cfg.idx_train_labels), cfg.classes)
    test = load_idx(os.path.join(root, cfg.idx_test_images),
                    os.path.join(root, cfg.idx_test_labels), cfg.classes)
    return train, test


def augmentation_for(cfg: SimConfig, image_shape=None) -> AugmentationSpec:
    if cfg.augmentation == "gaussian_noise":
        return AugmentationSpec("gaussian_noise", sigma=cfg.noise_sigma)
    if cfg.augmentation == "random_scale":
        return AugmentationSpec("random_scale", scale_range=(0.9, 1.1))
    return AugmentationSpec(cfg.augmentation, max_shift=cfg.aug_max_shift,
                            image_shape=image_shape)


def eval_subset(ds: LabeledDataset, per_class: int) -> LabeledDataset:
    idx = np.concatenate([np.flatnonzero(ds.labels == c)[:per_class]
                          for c in range(ds.class_count)])
    return ds.subset(np.sort(idx))


class Simulation:
    """One run of the federated push/pull/train/aggregate loop.

    Step ``t`` trains every device once, aggregates when ``t`` is a multiple of
    ``T_a`` and then pulls when ``t`` is a multiple of ``T_p``, so a pull that
    coincides with an aggregation already sees the fresh global model.
    """

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        ss = np.random.SeedSequence(cfg.seed)
        streams = dict(zip(_STREAMS, ss.spawn(len(_STREAMS))))
        self.rng = {k: np.random.default_rng(v) for k, v in streams.items()
                    if k not in ("devices", "exchange")}
        topo_seed = cfg.topology_seed if cfg.topology_seed is not None else None
        if topo_seed is not None:
            self.rng["topology"] = np.random.default_rng(
                np.random.SeedSequence(topo_seed).spawn(2)[1])

        self.train_ds, self.test_ds = load_datasets(cfg, self.rng["data"])
        parts = partition_noniid(self.train_ds, cfg.devices, cfg.classes_per_device,
                                 self.rng["data"])
        self.eval_ds = eval_subset(self.test_ds, cfg.eval_per_class)
        self.graph = build_rgg(cfg.devices, cfg.avg_degree, self.rng["topology"])
        self.neighbors = self.graph.neighbors
        self.aug = augmentation_for(cfg, self.train_ds.image_shape)
        self.cost = metrics.CostModel(cfg.d2d_rate, cfg.uplink_rate, cfg.model_param_bits,
                                      cfg.datapoint_bits, cfg.embedding_value_bits)
        self.global_model = EncoderModel.initialize(cfg.encoder_dims, self.rng["init"],
                                                    cfg.activation)
        dev_ss = streams["devices"].spawn(cfg.devices)
        ex_ss = streams["exchange"].spawn(cfg.devices)
        self.devices = [
            DeviceState(i, parts[i].points, self.global_model, np.random.default_rng(dev_ss[i]),
                        np.random.default_rng(ex_ss[i]),
                        reg=RegularizerState(base_margin=cfg.margin),
                        optimizer=Adam(self.global_model.n_params) if cfg.optimizer == "adam"
                        else None)
            for i in range(cfg.devices)
        ]
        self.ledger = metrics.RunLedger()
        self.events: List[dict] = []
        self.rows: List[dict] = []
        self.regime = cfg.exchange_regime
        self.reserve: Dict[int, explicit.ReserveData] = {}
        self.reserve_emb: Dict[int, np.ndarray] = {}
        self.overlap = implicit.OverlapParams(cfg.overlap_mu, cfg.overlap_sigma, cfg.k_local,
                                              cfg.k_reserve_clusters)
        self.staleness = implicit.StalenessParams(cfg.reg_scale, cfg.reg_rho, cfg.zeta, cfg.T_a,
                                                  cfg.T)
        self.phase = "setup"
        self.t = 0
        self.device_ctx = None

    # ---------------------------------------------------------- helpers --

    @property
    def needs_reserve(self) -> bool:
        return self.cfg.mode in ("cfcl_explicit", "cfcl_implicit", "bulk")

    @property
    def periodic_pulls(self) -> bool:
        return self.cfg.mode in ("cfcl_explicit", "cfcl_implicit", "uniform", "kmeans")

    def _importance_model(self, j: int) -> EncoderModel:
        if self.cfg.importance_model == "local":
            return self.devices[j].model
        return self.global_model

    def _emb_dim(self) -> int:
        return self.global_model.output_dim

    # ----------------------------------------------------------- phases --

    def select_reserves(self) -> None:
        """Each device picks its reserve once; the same set goes to every neighbour."""
        cfg = self.cfg
        for dev in self.devices:
            self.device_ctx = dev.id
            k = min(cfg.k_reserve, len(dev.data))
            pick = (explicit.select_reserve if cfg.reserve_selection == "kmeans"
                    else explicit.select_reserve_uniform)
            self.reserve[dev.id] = pick(dev.data, k, dev.exchange_rng, owner=dev.id)
        self.device_ctx = None

    def push_reserves(self, t: int) -> None:
        """Send reserve points (explicit) or fresh reserve embeddings (implicit) to neighbours."""
        for dev in self.devices:
            res = self.reserve[dev.id]
            if self.regime == "implicit":
                self.reserve_emb[dev.id] = forward(self.global_model, res.points)
                payload = metrics.embeddings(len(res), self._emb_dim(), self.cost)
            else:
                payload = metrics.datapoints(len(res), res.points.shape[1], self.cost)
            for j in self.neighbors[dev.id]:
                self.ledger.record(t, "push", dev.id, j, payload, self.cost)
        self.events.append({"t": t, "phase": "push", "regime": self.regime})

    def aggregate_and_broadcast(self, t: int) -> None:
        cfg = self.cfg
        participants = list(range(cfg.devices))
        if cfg.participants is not None and cfg.participants < cfg.devices:
            participants = sorted(self.rng["participation"].choice(
                cfg.devices, cfg.participants, replace=False).tolist())
        weights = [d.size_sum / cfg.T_a for d in self.devices]
        new = aggregate([d.model.weights for d in self.devices], weights, participants)
        self.global_model = self.global_model.with_weights(new)
        n_params = self.global_model.n_params
        for i in participants:
            self.ledger.record(t, "upload", i, -1, metrics.model_params(n_params, self.cost),
                               self.cost)
        self.ledger.record(t, "broadcast", -1, -1, metrics.model_params(n_params, self.cost),
                           self.cost)
        for d in self.devices:
            d.model = self.global_model
            d.size_sum = 0.0
            if d.optimizer is not None:
                d.optimizer.reset()
        self.events.append({"t": t, "phase": "aggregate", "participants": participants,
                            "weights": weights, "global": digest(new),
                            "devices": [digest(d.model.weights) for d in self.devices]})

    def _explicit_pulls(self, t: int, budget: int, full: bool) -> None:
        cfg = self.cfg
        snapshots = {}
        for dev in self.devices:
            self.device_ctx = dev.id
            pts = dev.train_points
            origin = np.vstack([np.column_stack([np.full(len(dev.data), dev.id),
                                                 np.arange(len(dev.data))]),
                                dev.buffer_origin])
            if full:
                idx = np.arange(len(pts))
            else:
                _, idx = explicit.approx_local(pts, min(cfg.k_approx, len(pts)), dev.exchange_rng)
            snapshots[dev.id] = (pts[idx], origin[idx])
        incoming = {i: ([], []) for i in range(cfg.devices)}
        log_pulls = []
        for j in range(cfg.devices):
            self.device_ctx = j
            cand, origin = snapshots[j]
            model = self._importance_model(j)
            rng = self.devices[j].exchange_rng
            for i in self.neighbors[j]:
                req = explicit.PullRequest(i, j, budget, t, model)
                src = np.arange(len(cand))
                if cfg.mode in ("cfcl_explicit", "bulk"):
                    plan, _ = explicit.sample_pull(req, self.reserve[i].points, cand, src, rng,
                                                   cfg.k_macro, cfg.margin, cfg.temperature,
                                                   self.aug)
                elif cfg.mode == "uniform":
                    plan = explicit.sample_pull_uniform(req, cand, src, rng)
                else:
                    plan = explicit.sample_pull_kmeans(req, cand, src, budget, rng)
                incoming[i][0].append(plan.payload)
                incoming[i][1].append(origin[plan.source_indices])
                self.ledger.record(t, "pull", j, i,
                                   metrics.datapoints(len(plan), cand.shape[1], self.cost),
                                   self.cost)
                log_pulls.append({"from": j, "to": i, "n": len(plan),
                                  "origin": origin[plan.source_indices].tolist()})
        for i, (pts, org) in incoming.items():
            dim = self.devices[i].data.shape[1]
            self.devices[i].replace_buffer(np.vstack(pts) if pts else np.zeros((0, dim)),
                                           np.vstack(org) if org else np.zeros((0, 2)))
        self.device_ctx = None
        self.events.append({
            "t": t, "phase": "pull", "regime": "explicit", "links": log_pulls,
            "snapshots": {str(j): s[1].tolist() for j, s in snapshots.items()},
            "buffers": {str(d.id): len(d.buffer) for d in self.devices},
        })

    def _implicit_pulls(self, t: int, budget: int, full: bool) -> None:
        cfg = self.cfg
        cands, local_clusters = {}, {}
        for dev in self.devices:
            self.device_ctx = dev.id
            model = self._importance_model(dev.id)
            k = len(dev.data) if full else min(cfg.k_approx, len(dev.data))
            if full:
                idx = np.arange(len(dev.data))
                Z = forward(model, dev.data)
            else:
                Z, idx = implicit.candidate_embeddings(dev.data, model, k, dev.exchange_rng)
            cands[dev.id] = (Z, idx)
            local_clusters[dev.id] = clustering.kmeanspp(Z, min(cfg.k_local, len(Z)),
                                                         dev.exchange_rng)
        incoming = {i: {} for i in range(cfg.devices)}
        log_pulls = []
        for j in range(cfg.devices):
            self.device_ctx = j
            Z, idx = cands[j]
            rng = self.devices[j].exchange_rng
            for i in self.neighbors[j]:
                req = explicit.PullRequest(i, j, budget, t, self._importance_model(j))
                if cfg.mode in ("cfcl_implicit", "bulk"):
                    res = implicit.ReserveEmbeddings(i, j, self.reserve_emb[i], t)
                    plan, _ = implicit.sample_embedding_pull(req, res, Z, idx, self.overlap, rng,
                                                             local_clusters[j])
                    sel = plan.indices
                elif cfg.mode == "uniform":
                    sel = explicit.uniform_subset(len(Z), min(budget, len(Z)), rng)
                else:
                    sel = explicit.kmeans_representatives(Z, budget, budget, rng)
                incoming[i][j] = Z[sel]
                self.ledger.record(t, "pull", j, i,
                                   metrics.embeddings(len(sel), Z.shape[1], self.cost), self.cost)
                log_pulls.append({"from": j, "to": i, "n": int(len(sel))})
        for dev in self.devices:
            dev.reg.replace_received(incoming[dev.id])
            dev.reg.reg_margin = implicit.reg_margin(local_clusters[dev.id], cfg.reg_k)
        self.device_ctx = None
        self.events.append({
            "t": t, "phase": "pull", "regime": "implicit", "links": log_pulls,
            "buffers": {str(d.id): int(sum(len(z) for z in d.reg.received.values()))
                        for d in self.devices},
        })

    def pull(self, t: int, budget: int, full: bool = False) -> None:
        if self.regime == "explicit":
            self._explicit_pulls(t, budget, full)
        else:
            self._implicit_pulls(t, budget, full)

    def evaluate(self, t: int) -> dict:
        cfg = self.cfg
        acc = metrics.linear_probe(self.global_model, self.train_ds, self.test_ds,
                                   cfg.probe_iters, cfg.probe_lr, cfg.probe_batch,
                                   self.rng["probe"])
        M = metrics.alignment_matrix(self.global_model, self.eval_ds)
        try:
            sep = metrics.separation_ratio(M)
        except ZeroDivisionError:
            sep = float("nan")
        self.final_alignment = M
        d2d, up, delay = self.ledger.cumulative(t)
        row = {"t": t, "gamma": t // cfg.T_a, "accuracy": acc, "sep_ratio": sep,
               "d2d_bytes_cum": d2d, "uplink_bytes_cum": up, "delay_seconds_cum": delay}
        self.rows.append(row)
        return row

    # ------------------------------------------------------------- loop --

    def run(self) -> RunResult:
        try:
            return self._run()
        except RunError:
            raise
        except CFCLError as exc:
            raise RunError(self.t, self.device_ctx, self.phase, exc) from exc

    def _run(self) -> RunResult:
        cfg = self.cfg
        self.final_alignment = None
        n_params = self.global_model.n_params
        self.phase = "broadcast"
        self.ledger.record(0, "broadcast", -1, -1, metrics.model_params(n_params, self.cost),
                           self.cost)
        self.events.append({"t": 0, "phase": "broadcast", "global": digest(self.global_model.weights)})
        if self.regime is not None and self.needs_reserve:
            self.phase = "push"
            self.select_reserves()
            self.push_reserves(0)
        if cfg.mode == "bulk":
            self.phase = "pull"
            start = time.perf_counter()
            self.pull(0, cfg.n_per_link * (cfg.T // cfg.T_p), full=True)
            self.ledger.add_compute(0, time.perf_counter() - start)

        use_reg = self.regime == "implicit"
        for t in range(1, cfg.T + 1):
            self.t = t
            self.phase = "train"
            if use_reg:
                w = implicit.reg_weight(t, self.staleness)
            for dev in self.devices:
                self.device_ctx = dev.id
                if use_reg:
                    dev.reg.reg_weight = w
                local_step(dev, cfg.lr, self.aug, cfg.batch_size, cfg.margin, use_reg)
                dev.size_sum += len(dev.train_points)
            self.device_ctx = None
            if t % cfg.T_a == 0:
                self.phase = "aggregate"
                self.aggregate_and_broadcast(t)
                if self.regime == "implicit" and self.needs_reserve:
                    self.phase = "push"
                    self.push_reserves(t)
            if self.periodic_pulls and t % cfg.T_p == 0:
                self.phase = "pull"
                start = time.perf_counter()
                self.pull(t, cfg.n_per_link)
                self.ledger.add_compute(t, time.perf_counter() - start)
            if t % cfg.T_a == 0:
                self.phase = "evaluate"
                self.evaluate(t)
        return RunResult(cfg, self.rows, self.ledger, self.events, self.global_model, self.graph,
                         self.final_alignment)


def run(cfg: SimConfig) -> RunResult:
    return Simulation(cfg).run()
