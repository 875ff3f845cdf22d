"""Synthetic clustered benchmark, run loop, metrics and fast adaptation.

Tasks are Gaussian-mixture classification problems. Each latent cluster owns
a set of class prototypes; a task is a random rotation of its cluster's
prototypes by a fixed angle, so tasks in one cluster are related but not
identical, and tasks in different clusters share nothing beyond
``cluster_overlap``. Every client walks through ``tasks_per_client`` tasks of
its own cluster, which gives the within-client distribution shift.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from . import server as srv
from .adapter import AdapterSet, GateParams, build_adapter_set, load_adapters
from .align import LayerReport, align_all, pick_pivot
from .client import Client, SanitizationSpec, sanitize
from .config import ExperimentConfig
from .model import Batch, FrozenModel, ModelSpec, build_frozen, last_layer_gradient, predict
from .rng import stream, subseed

log = logging.getLogger(__name__)

METHODS = ("sft", "vanilla_equal", "fedmosaic")


# -- scenario --------------------------------------------------------------------


@dataclass(frozen=True)
class TaskDescriptor:
    """One classification task: a rotated copy of its cluster's prototypes.

    ``pool_index`` picks the cluster task (rotation by ``angle``); the client
    instance adds a small extra rotation (``jitter``) on top.
    """

    cluster_id: int
    task_id: str
    pool_index: int
    prototype_seed: int
    rotation_seed: int
    angle: float
    jitter_seed: int
    jitter: float
    label_perm: tuple[int, ...]
    n_classes: int
    classes: tuple[int, ...] = ()

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["label_perm"] = list(self.label_perm)
        d["classes"] = list(self.classes)
        return d


@dataclass
class ClientData:
    client_id: int
    cluster_id: int
    model_type: str
    tasks: list[TaskDescriptor]
    stream: Batch
    stream_task: np.ndarray  # task index of every stream sample
    tests: list[Batch]


@dataclass
class UnseenTask:
    task: TaskDescriptor
    train: Batch
    test: Batch


@dataclass
class Scenario:
    cfg: ExperimentConfig
    clients: list[ClientData]
    unseen: list[UnseenTask]
    public: np.ndarray

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"public": self.public}
        for c in self.clients:
            out[f"c{c.client_id}.x"] = c.stream.inputs
            out[f"c{c.client_id}.y"] = c.stream.labels
            out[f"c{c.client_id}.task"] = c.stream_task
            for t, b in enumerate(c.tests):
                out[f"c{c.client_id}.test{t}.x"] = b.inputs
                out[f"c{c.client_id}.test{t}.y"] = b.labels
        for u, ut in enumerate(self.unseen):
            out[f"u{u}.train.x"], out[f"u{u}.train.y"] = ut.train.inputs, ut.train.labels
            out[f"u{u}.test.x"], out[f"u{u}.test.y"] = ut.test.inputs, ut.test.labels
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.arrays().items()):
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def describe(self) -> dict:
        return {
            "fingerprint": self.fingerprint(),
            "clients": [
                {
                    "client_id": c.client_id,
                    "cluster_id": c.cluster_id,
                    "model_type": c.model_type,
                    "tasks": [t.as_dict() for t in c.tasks],
                    "n_train": len(c.stream),
                }
                for c in self.clients
            ],
            "unseen": [u.task.as_dict() for u in self.unseen],
        }


def _rotation(d: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Random rotation ``expm(angle * K)`` with ``K`` skew-symmetric of unit spectral norm."""
    g = rng.standard_normal((d, d))
    k = g - g.T
    k /= np.linalg.norm(k, 2)
    return expm(angle * k)


def cluster_prototypes(seed: int, cluster_id: int, data) -> np.ndarray:
    """``n_classes x input_dim`` class means of a cluster, norm about ``proto_scale``."""
    d, c = data.input_dim, data.n_classes
    own = stream(seed, "prototypes", cluster_id).standard_normal((c, d))
    shared = stream(seed, "prototypes", "shared").standard_normal((c, d))
    rho = data.cluster_overlap
    base = np.sqrt(rho) * shared + np.sqrt(1.0 - rho) * own
    return base * data.proto_scale / np.sqrt(d)


def task_prototypes(seed: int, task: TaskDescriptor, data) -> np.ndarray:
    base = cluster_prototypes(seed, task.cluster_id, data)
    rot = _rotation(data.input_dim, task.angle, np.random.default_rng(task.rotation_seed))
    jit = _rotation(data.input_dim, task.jitter, np.random.default_rng(task.jitter_seed))
    return (base @ rot.T @ jit.T)[np.asarray(task.label_perm)]


def sample_task(seed: int, task: TaskDescriptor, data, n: int, rng: np.random.Generator) -> Batch:
    """Class-balanced draw of ``n`` samples in random order."""
    protos = task_prototypes(seed, task, data)
    classes = np.asarray(task.classes or range(task.n_classes))
    labels = rng.permutation(classes[np.arange(n) % len(classes)])
    noise = rng.standard_normal((n, data.input_dim)) * data.noise / np.sqrt(data.input_dim)
    return Batch(protos[labels] + noise, labels)


def _describe_task(seed: int, cluster: int, pool: int, task_id: str, data) -> TaskDescriptor:
    n = data.n_classes
    perm = stream(seed, "label_perm", cluster).permutation(n) if cluster else np.arange(n)
    return TaskDescriptor(
        cluster_id=cluster,
        task_id=task_id,
        pool_index=pool,
        prototype_seed=subseed(seed, "prototypes", cluster),
        rotation_seed=subseed(seed, "rotation", cluster, pool),
        angle=data.task_angle,
        jitter_seed=subseed(seed, "jitter", task_id),
        jitter=data.task_jitter,
        label_perm=tuple(int(p) for p in perm),
        n_classes=n,
        classes=_task_classes(pool, data),
    )


def _task_classes(pool: int, data) -> tuple[int, ...]:
    """Label subset of a pool task; all classes unless ``classes_per_task`` is set."""
    k = data.classes_per_task
    if k <= 0 or k >= data.n_classes:
        return ()
    return tuple(sorted((pool * k + j) % data.n_classes for j in range(k)))


def describe_tasks(cfg: ExperimentConfig, seed: int | None = None):
    """Task descriptors: ``(per-client task lists, unseen tasks, public task)``.

    The clients of one cluster share a pool of ``tasks_per_client`` cluster
    tasks and walk through it in rotated order, so at any moment they are
    working on different tasks. Unseen tasks come from pool slots no client
    visits; public data from a cluster no client belongs to.
    """
    seed = cfg.seed if seed is None else seed
    data = cfg.data
    t_count = data.tasks_per_client
    per_client = []
    rank_in_cluster: dict[int, int] = {}
    for i, cluster in enumerate(cfg.cluster_of):
        k = rank_in_cluster.get(cluster, 0)
        rank_in_cluster[cluster] = k + 1
        shift = k if data.staggered else 0
        order = [(shift + t) % t_count for t in range(t_count)]
        per_client.append([_describe_task(seed, cluster, p, f"c{i}.t{t}", data) for t, p in enumerate(order)])
    unseen = [
        _describe_task(seed, u % data.n_clusters, t_count + u // data.n_clusters, f"unseen{u}", data)
        for u in range(data.n_unseen)
    ]
    public = _describe_task(seed, data.n_clusters, 0, "public", data)
    return per_client, unseen, public


def generate_scenario(cfg: ExperimentConfig, seed: int | None = None) -> Scenario:
    """Build client streams, test sets, unseen tasks and public data.

    Deterministic in ``(cfg, seed)``; a given ``seed`` replaces ``cfg.seed``.
    """
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    seed = cfg.seed
    data = cfg.data
    per_client, unseen_tasks, public_task = describe_tasks(cfg, seed)
    clients = []
    for i, (tasks, cluster, mtype) in enumerate(zip(per_client, cfg.cluster_of, cfg.type_of)):
        rng = stream(seed, "data", "client", i)
        parts = [sample_task(seed, t, data, data.train_per_task, rng) for t in tasks]
        tests = [sample_task(seed, t, data, data.test_per_task, rng) for t in tasks]
        x = np.concatenate([p.inputs for p in parts])
        y = np.concatenate([p.labels for p in parts])
        task_idx = np.repeat(np.arange(len(tasks)), data.train_per_task)
        if data.stream == "static":
            order = stream(seed, "data", "static", i).permutation(len(y))
            x, y, task_idx = x[order], y[order], task_idx[order]
        clients.append(ClientData(i, cluster, mtype, tasks, Batch(x, y), task_idx, tests))
    unseen = []
    for u, task in enumerate(unseen_tasks):
        rng = stream(seed, "data", "unseen", u)
        unseen.append(UnseenTask(
            task,
            sample_task(seed, task, data, data.train_per_task, rng),
            sample_task(seed, task, data, data.test_per_task, rng),
        ))
    public = sample_task(seed, public_task, data, data.public_size, stream(seed, "data", "public")).inputs
    return Scenario(cfg, clients, unseen, public)


def save_scenario(scn: Scenario, directory: str | Path) -> str:
    """Write ``config.yaml``, ``data.npz`` and ``scenario.json``; returns the fingerprint."""
    from .config import dump_config

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.yaml").write_text(dump_config(scn.cfg))
    buf = io.BytesIO()
    np.savez(buf, **scn.arrays())
    (d / "data.npz").write_bytes(buf.getvalue())
    info = {"header": header(scn.cfg), **scn.describe()}
    (d / "scenario.json").write_text(json.dumps(info, indent=2) + "\n")
    return info["fingerprint"]


def load_scenario(directory: str | Path) -> Scenario:
    """Inverse of :func:`save_scenario`; task descriptors are rebuilt from the config."""
    from .config import load_config

    d = Path(directory)
    cfg = load_config(d / "config.yaml")
    info = json.loads((d / "scenario.json").read_text())
    per_client, unseen_tasks, _ = describe_tasks(cfg)
    with np.load(d / "data.npz") as z:
        arr = {k: z[k] for k in z.files}
    clients = []
    for i, (tasks, cluster, mtype) in enumerate(zip(per_client, cfg.cluster_of, cfg.type_of)):
        tests = [Batch(arr[f"c{i}.test{t}.x"], arr[f"c{i}.test{t}.y"]) for t in range(len(tasks))]
        clients.append(ClientData(i, cluster, mtype, tasks, Batch(arr[f"c{i}.x"], arr[f"c{i}.y"]),
                                  arr[f"c{i}.task"], tests))
    unseen = [
        UnseenTask(t, Batch(arr[f"u{k}.train.x"], arr[f"u{k}.train.y"]),
                   Batch(arr[f"u{k}.test.x"], arr[f"u{k}.test.y"]))
        for k, t in enumerate(unseen_tasks)
    ]
    scn = Scenario(cfg, clients, unseen, arr["public"])
    if scn.fingerprint() != info["fingerprint"]:
        raise ValueError(f"{d}: data.npz does not match the recorded fingerprint")
    return scn


def header(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.digest(), "seed": cfg.seed}


# -- backbones and adapters -------------------------------------------------------


@dataclass
class Environment:
    """Everything shared by the methods of one run: data, backbones, aligned adapters."""

    scenario: Scenario
    models: dict[str, FrozenModel]
    adapters: dict[str, AdapterSet]
    reports: list[LayerReport] = field(default_factory=list)

    @property
    def cfg(self) -> ExperimentConfig:
        return self.scenario.cfg

    @property
    def pivot(self) -> str:
        return pick_pivot(self.models)

    @property
    def probe(self) -> FrozenModel:
        return self.models[self.pivot]


def build_models(cfg: ExperimentConfig) -> dict[str, FrozenModel]:
    out = {}
    for m in cfg.models:
        spec = ModelSpec.uniform(m.id, m.depth, m.width, cfg.data.input_dim, cfg.data.n_classes)
        out[m.id] = build_frozen(spec, subseed(cfg.seed, "model", m.id), cfg.pretrain)
    return out


def initial_adapters(cfg: ExperimentConfig, models: dict[str, FrozenModel]) -> dict[str, AdapterSet]:
    fed = cfg.federation
    return {
        k: build_adapter_set(list(m.spec.widths), fed.rank, fed.n_blocks, stream(cfg.seed, "init", k))
        for k, m in models.items()
    }


def prepare(scn: Scenario, checkpoints: dict[str, AdapterSet] | None = None) -> Environment:
    """Backbones plus aligned adapters (computed here unless ``checkpoints`` are given)."""
    cfg = scn.cfg
    models = build_models(cfg)
    if checkpoints is not None:
        return Environment(scn, models, checkpoints, [])
    fresh = initial_adapters(cfg, models)
    aligned, reports = align_all(models, fresh, scn.public, cfg.align)
    return Environment(scn, models, aligned, reports)


def load_checkpoints(directory: str | Path, type_ids) -> dict[str, AdapterSet]:
    d = Path(directory)
    return {k: load_adapters(d / f"adapters_{k}.safetensors")[0] for k in type_ids}


# -- evaluation and metrics ----------------------------------------------------------


def evaluate(model, testset: Batch, local=None, global_=None, gates=None, mode: str = "gated_dual") -> float:
    """Fraction of argmax-correct predictions."""
    if len(testset) == 0:
        raise ValueError("empty test set")
    pred = predict(model, testset.inputs, local, global_, gates, mode)
    return float(np.mean(pred == testset.labels))


def metrics(curve) -> tuple[float, float]:
    """``(A_last, A_AUC)`` with A_AUC the mean over checkpoints."""
    c = np.asarray(curve, dtype=float)
    if c.size == 0:
        raise ValueError("empty trace")
    return float(c[-1]), float(c.mean())


@dataclass
class MetricsTrace:
    """``acc[k, i, j]``: client ``i`` evaluated on client ``j``'s tests at checkpoint ``k``."""

    method: str
    rounds: list[int]
    acc: np.ndarray
    weights: list[dict] = field(default_factory=list)

    @property
    def self_curve(self) -> np.ndarray:
        return np.array([np.mean(np.diag(a)) for a in self.acc])

    @property
    def others_curve(self) -> np.ndarray:
        n = self.acc.shape[1]
        if n < 2:
            return np.full(len(self.acc), np.nan)
        off = ~np.eye(n, dtype=bool)
        return np.array([a[off].mean() for a in self.acc])

    def summary(self) -> dict:
        s_last, s_auc = metrics(self.self_curve)
        o_last, o_auc = metrics(self.others_curve)
        return {"self_last": s_last, "self_auc": s_auc, "others_last": o_last, "others_auc": o_auc}

    def to_csv(self, hdr: dict) -> str:
        out = io.StringIO()
        out.write(f"# config_hash={hdr['config_hash']} seed={hdr['seed']} method={self.method}\n")
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["checkpoint", "round", "evaluator", "target", "accuracy"])
        for k, (r, a) in enumerate(zip(self.rounds, self.acc)):
            for i in range(a.shape[0]):
                for j in range(a.shape[1]):
                    w.writerow([k, r, i, j, repr(float(a[i, j]))])
        return out.getvalue()

    def to_json(self, hdr: dict) -> str:
        rec = {"header": hdr, "method": self.method, **self.summary(),
               "rounds": self.rounds, "weight_snapshots": self.weights}
        return json.dumps(rec, indent=2, sort_keys=True) + "\n"


def evaluation_grid(clients: list[Client], scn: Scenario, mode: str) -> np.ndarray:
    """Accuracy of every client on every client's tests, averaged over target tasks."""
    tests = [Batch(np.concatenate([b.inputs for b in c.tests]), np.concatenate([b.labels for b in c.tests]))
             for c in scn.clients]
    x_all = np.concatenate([t.inputs for t in tests])
    y_all = np.concatenate([t.labels for t in tests])
    bounds = np.cumsum([0] + [len(t) for t in tests])
    task_sizes = [[len(b) for b in c.tests] for c in scn.clients]
    n = len(clients)
    acc = np.zeros((n, n))
    for i, c in enumerate(clients):
        ok = predict(c.model, x_all, c.local_adapters, c.global_adapters, c.gates, mode) == y_all
        for j in range(n):
            seg = ok[bounds[j] : bounds[j + 1]]
            # unweighted mean over the target's tasks
            parts = np.split(seg, np.cumsum(task_sizes[j])[:-1])
            acc[i, j] = float(np.mean([p.mean() for p in parts]))
    return acc


# -- run loop -----------------------------------------------------------------------


@dataclass
class RunResult:
    method: str
    trace: MetricsTrace
    rounds: list[srv.RoundRecord]
    clients: list[Client]
    last_grads: list[np.ndarray]
    sanitization: SanitizationSpec

    def client_logs(self) -> list[dict]:
        return [rec for c in self.clients for rec in c.log]

    def mean_weight_gap(self, round_index: int, cluster_of: list[int]) -> float:
        """Mean within-cluster minus mean cross-cluster weight at a round (0-based)."""
        return cluster_weight_gap(self.rounds[round_index].relevance.W, cluster_of)


def cluster_weight_gap(w: np.ndarray, cluster_of: list[int]) -> float:
    c = np.asarray(cluster_of)
    same = c[:, None] == c[None, :]
    off = ~np.eye(len(c), dtype=bool)
    within, cross = w[same & off], w[~same]
    if within.size == 0 or cross.size == 0:
        return float("nan")
    return float(within.mean() - cross.mean())


def make_sanitization(cfg: ExperimentConfig, probe: FrozenModel) -> SanitizationSpec:
    dim = probe.spec.widths[-1][0] * probe.spec.widths[-1][1]
    fed = cfg.federation
    return SanitizationSpec.create(dim, fed.subsample_ratio, fed.mu, stream(cfg.seed, "mask"))


def make_clients(env: Environment, method: str) -> list[Client]:
    mode = "local_only" if method == "sft" else "gated_dual"
    clients = []
    for cd in env.scenario.clients:
        model = env.models[cd.model_type]
        init = env.adapters[cd.model_type]
        c = Client(
            client_id=cd.client_id,
            model_type_id=cd.model_type,
            model=model,
            local_adapters=init.copy(),
            global_adapters=init.copy(),
            gates=GateParams.zeros(model.depth),
            rng=stream(env.cfg.seed, "batch", cd.client_id),
            cfg=env.cfg.train,
            mode=mode,
        )
        c.receive_global(c.global_adapters)
        clients.append(c)
    return clients


def run(env: Environment, method: str, stop_after: int | None = None) -> RunResult:
    """Train every client through its task stream under ``method``.

    ``stop_after`` ends the run early after that many rounds (used by the
    cluster-recovery check, which only needs the first rounds).
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    cfg, scn = env.cfg, env.scenario
    fed = cfg.federation
    clients = make_clients(env, method)
    probe = env.probe if method == "fedmosaic" else None
    spec = make_sanitization(cfg, env.probe)
    noise = [stream(cfg.seed, "noise", c.client_id) for c in clients]
    types = [c.model_type_id for c in clients]
    total = cfg.total_rounds if stop_after is None else min(stop_after, cfg.total_rounds)
    chunks = [np.array_split(np.arange(len(cd.stream)), cfg.total_rounds) for cd in scn.clients]
    mode = clients[0].mode
    checkpoints, grids, weights, records = [], [], [], []
    grads = [np.zeros(spec.dim) for _ in clients]
    for r in range(total):
        for c, cd, ch in zip(clients, scn.clients, chunks):
            c.memory.extend(cd.stream.subset(ch[r]))
            for _ in range(fed.local_steps):
                c.local_step(probe)
            c.finish_round()
        if method != "sft":
            payload = [c.transmit(spec, rng) for c, rng in zip(clients, noise)]
            grads = [p[0] for p in payload]
            dispatch, rec = srv.server_round(r, grads, [p[1] for p in payload], types, fed.tau, method)
            for c, g in zip(clients, dispatch):
                c.receive_global(g)
            records.append(rec)
        if (r + 1) % fed.eval_interval == 0 or r + 1 == total:
            checkpoints.append(r + 1)
            grids.append(evaluation_grid(clients, scn, mode))
            if records:
                weights.append({"round": r + 1, "W": np.round(records[-1].relevance.W, 12).tolist()})
            log.info("%s round %d: self %.3f", method, r + 1, float(np.mean(np.diag(grids[-1]))))
    trace = MetricsTrace(method, checkpoints, np.stack(grids), weights)
    return RunResult(method, trace, records, clients, grads, spec)


# -- fast adaptation -------------------------------------------------------------------


@dataclass
class AdaptationCurve:
    steps: list[int]
    accuracy: list[float]

    def first_reaching(self, target: float) -> int | None:
        for s, a in zip(self.steps, self.accuracy):
            if a >= target:
                return s
        return None


def newcomer_init(
    env: Environment, result: RunResult, task: UnseenTask, model_type: str, probe_batches: int = 4
) -> AdapterSet:
    """Customized global adapters for a client joining after training.

    The newcomer probes its own training data, sanitizes with the run's mask
    and gets RELA weights over the existing clients (no self term).
    """
    cfg = env.cfg
    rng = stream(cfg.seed, "newcomer", task.task.task_id)
    bs = cfg.train.batch_size
    idx = rng.permutation(len(task.train))[: bs * probe_batches]
    batches = [idx[k : k + bs] for k in range(0, len(idx), bs)]
    g = np.mean([last_layer_gradient(env.probe, task.train.subset(b)) for b in batches], axis=0)
    g = sanitize(g, result.sanitization, rng)
    s, deg = srv.relevance_matrix([g, *result.last_grads])
    row = srv.aggregation_weights(s[:1, 1:], cfg.federation.tau, None)[0]
    if deg[0] or np.all(deg[1:]):
        row = np.full(len(result.clients), 1.0 / len(result.clients))
    locals_ = [c.local_adapters for c in result.clients] + [env.adapters[model_type]]
    n = len(locals_)
    w = np.eye(n)
    w[-1] = np.append(row, 0.0)
    types = [c.model_type_id for c in result.clients] + [model_type]
    if model_type not in types[:-1]:
        # no same-type peer: keep the aligned conventional-LoRA init
        w[-1, -1] = 1e-12
    return srv.aggregate(locals_, w, types)[-1]


def fast_adaptation(
    env: Environment,
    init: AdapterSet,
    task: UnseenTask,
    model_type: str,
    steps: int = 200,
    every: int = 10,
    seed_path: str = "adapt",
) -> AdaptationCurve:
    """Fine-tune a fresh client from ``init`` (local and global) on an unseen task."""
    cfg = env.cfg
    model = env.models[model_type]
    c = Client(
        client_id=-1,
        model_type_id=model_type,
        model=model,
        local_adapters=init.copy(),
        global_adapters=init.copy(),
        gates=GateParams.zeros(model.depth),
        rng=stream(cfg.seed, seed_path, task.task.task_id),
        cfg=cfg.train,
    )
    c.receive_global(c.global_adapters)
    c.memory.extend(task.train)
    curve = AdaptationCurve([0], [evaluate(model, task.test, c.local_adapters, c.global_adapters, c.gates)])
    for s in range(1, steps + 1):
        c.local_step()
        if s % every == 0:
            curve.steps.append(s)
            curve.accuracy.append(evaluate(model, task.test, c.local_adapters, c.global_adapters, c.gates))
    return curve
