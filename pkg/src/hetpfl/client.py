"""Client-side state: episodic memory, dual-adapter training and the
relevance probe (decayed, sanitized last-layer gradient)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import AdapterSet, GateParams
from .model import Batch, FrozenModel, last_layer_gradient, loss_and_grads


class EpisodicMemory:
    """Append-only sample store; training batches are drawn only from here."""

    def __init__(self, input_dim: int, capacity: int = 64):
        self._x = np.empty((capacity, input_dim))
        self._y = np.empty(capacity, dtype=np.int64)
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def append(self, x: np.ndarray, y: int) -> None:
        if self._n == self._x.shape[0]:
            self._x = np.concatenate([self._x, np.empty_like(self._x)])
            self._y = np.concatenate([self._y, np.empty_like(self._y)])
        self._x[self._n] = x
        self._y[self._n] = y
        self._n += 1

    def extend(self, batch: Batch) -> None:
        for x, y in zip(batch.inputs, batch.labels):
            self.append(x, y)

    def sample(self, batch_size: int, rng: np.random.Generator) -> tuple[Batch, np.ndarray]:
        """Uniform draw; with replacement only while memory is smaller than the batch."""
        if self._n == 0:
            raise ValueError("episodic memory is empty")
        idx = rng.choice(self._n, size=batch_size, replace=self._n < batch_size)
        return Batch(self._x[idx], self._y[idx]), idx

    def contents(self) -> Batch:
        return Batch(self._x[: self._n].copy(), self._y[: self._n].copy())


@dataclass
class SanitizationSpec:
    """Shared binary mask over gradient dimensions plus the noise scale."""

    mask: np.ndarray
    mu: float
    ratio: float

    @classmethod
    def create(cls, dim: int, ratio: float, mu: float, rng: np.random.Generator) -> "SanitizationSpec":
        if not 0.0 < ratio <= 1.0:
            raise ValueError(f"subsample ratio must be in (0, 1], got {ratio}")
        keep = int(round(ratio * dim))
        mask = np.zeros(dim, dtype=bool)
        mask[rng.choice(dim, size=keep, replace=False)] = True
        return cls(mask, float(mu), float(ratio))

    @property
    def dim(self) -> int:
        return self.mask.shape[0]


def update_ema(g_hat: np.ndarray, g: np.ndarray, alpha: float) -> np.ndarray:
    """``(1 - alpha) * g_hat + alpha * g``."""
    g_hat = np.asarray(g_hat, dtype=float)
    g = np.asarray(g, dtype=float)
    if g_hat.shape != g.shape:
        raise ValueError(f"dimension mismatch: {g_hat.shape} vs {g.shape}")
    return (1.0 - alpha) * g_hat + alpha * g


def sanitize(g_hat: np.ndarray, spec: SanitizationSpec, rng: np.random.Generator) -> np.ndarray:
    """``mask * (g_hat + mu * eps)`` with fresh ``eps ~ N(0, I)``."""
    g_hat = np.asarray(g_hat, dtype=float)
    if g_hat.shape != spec.mask.shape:
        raise ValueError(f"gradient has dim {g_hat.shape[0]}, mask has {spec.dim}")
    eps = rng.standard_normal(g_hat.shape)
    return np.where(spec.mask, g_hat + spec.mu * eps, 0.0)


OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class LocalTrainConfig:
    """Local optimisation settings.

    ``optimizer="sgd"`` is plain gradient descent (heavy-ball when
    ``momentum > 0``); ``"adam"`` uses bias-corrected Adam with ``momentum`` as
    beta1 (0.9 when left at 0) and ``adam_beta2``.
    """

    batch_size: int = 16
    lr_pq: float = 5e-2
    lr_other: float = 2e-2
    momentum: float = 0.0
    probe_every: int = 10
    alpha: float = 0.5
    optimizer: str = "sgd"
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.probe_every < 1:
            raise ValueError(f"probe_every must be >= 1, got {self.probe_every}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")


@dataclass
class Client:
    """One participant: frozen backbone, local adapters L, frozen global adapters G."""

    client_id: int
    model_type_id: str
    model: FrozenModel
    local_adapters: AdapterSet
    global_adapters: AdapterSet
    gates: GateParams
    rng: np.random.Generator
    cfg: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    memory: EpisodicMemory | None = None
    ema_gradient: np.ndarray | None = None
    mode: str = "gated_dual"
    step_count: int = 0
    has_evidence: bool = False
    _round_probes: list = field(default_factory=list)
    _velocity: dict = field(default_factory=dict)
    log: list = field(default_factory=list)

    def __post_init__(self):
        if self.memory is None:
            self.memory = EpisodicMemory(self.model.spec.input_dim)

    def observe(self, x: np.ndarray, y: int) -> None:
        self.memory.append(x, y)

    def _lr(self, name: str) -> float:
        return self.cfg.lr_pq if name[-1] in "PQ" else self.cfg.lr_other

    def _direction(self, name: str, g: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if cfg.optimizer == "adam":
            b1 = cfg.momentum or 0.9
            m, v, t = self._velocity.get(name, (0.0, 0.0, 0))
            t += 1
            m = b1 * m + (1.0 - b1) * g
            v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * g * g
            self._velocity[name] = (m, v, t)
            return (m / (1.0 - b1**t)) / (np.sqrt(v / (1.0 - cfg.adam_beta2**t)) + cfg.adam_eps)
        if cfg.momentum:
            prev = self._velocity.get(name)
            g = g if prev is None else cfg.momentum * prev + g
            self._velocity[name] = g
        return g

    def local_step(self, probe: FrozenModel | None = None) -> tuple[float, np.ndarray | None]:
        """One SGD step on a batch drawn from memory.

        Returns the loss and, every ``probe_every`` steps, the probe model's
        last-layer gradient on the same batch (also queued for the round's EMA
        update). Global adapters and every frozen array are left untouched.
        """
        batch, _ = self.memory.sample(self.cfg.batch_size, self.rng)
        loss, grads = loss_and_grads(
            self.model, batch, self.local_adapters, self.global_adapters, self.gates, self.mode
        )
        for name, g in grads.items():
            param = self.gates.beta if name == "beta" else self.local_adapters.parameter(name)
            lr = self.cfg.lr_other if name == "beta" else self._lr(name)
            param -= lr * self._direction(name, g)
        probe_grad = None
        if probe is not None and self.step_count % self.cfg.probe_every == 0:
            probe_grad = last_layer_gradient(probe, batch)
            self._round_probes.append(probe_grad)
        self.log.append({"client": self.client_id, "step": self.step_count, "loss": loss, "probe": probe_grad is not None})
        self.step_count += 1
        return loss, probe_grad

    def finish_round(self) -> None:
        """Fold this round's probe gradients into the decayed gradient."""
        if not self._round_probes:
            return
        mean = np.mean(self._round_probes, axis=0)
        if self.ema_gradient is None:
            self.ema_gradient = np.zeros_like(mean)
        self.ema_gradient = update_ema(self.ema_gradient, mean, self.cfg.alpha)
        self.has_evidence = True
        self._round_probes = []

    def transmit(self, spec: SanitizationSpec, noise_rng: np.random.Generator) -> tuple[np.ndarray, AdapterSet]:
        """Sanitized gradient and a copy of the local adapters for the server.

        Before the first probe the gradient is all zeros (no evidence) and is
        sent unsanitized so the server can recognise it.
        """
        if not self.has_evidence:
            return np.zeros(spec.dim), self.local_adapters.copy()
        return sanitize(self.ema_gradient, spec, noise_rng), self.local_adapters.copy()

    def receive_global(self, g_new: AdapterSet) -> None:
        if not g_new.compatible_with(self.local_adapters):
            raise ValueError(f"client {self.client_id}: global adapters do not fit model type {self.model_type_id}")
        for _, arr in g_new.named_parameters(trainable_only=False):
            arr.flags.writeable = False
        self.global_adapters = g_new
