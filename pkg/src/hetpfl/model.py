"""Frozen feed-forward backbones with exact forward and backward passes.

A model is a stack of affine layers with a fixed nonlinearity between them
(none after the last layer, which emits logits). Adapters add to each
layer's pre-activation. Four modes control which adapters are active:

``adapters_off``   frozen backbone only
``local_only``     backbone + local adapter
``global_only``    backbone + global adapter
``gated_dual``     backbone + (1 - sigmoid(beta)) local + sigmoid(beta) global
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import AdapterSet, GateParams, sigmoid

MODES = ("adapters_off", "local_only", "global_only", "gated_dual")
ACTIVATIONS = ("tanh", "linear")


@dataclass(frozen=True)
class ModelSpec:
    model_type_id: str
    widths: tuple[tuple[int, int], ...]
    activation: str = "tanh"

    def __post_init__(self):
        widths = tuple((int(a), int(b)) for a, b in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2:
            raise ValueError(f"{self.model_type_id}: depth must be >= 2, got {len(widths)}")
        for l, ((_, d_out), (d_in, _)) in enumerate(zip(widths, widths[1:]), start=1):
            if d_out != d_in:
                raise ValueError(f"{self.model_type_id}: layer {l} outputs {d_out} but layer {l + 1} expects {d_in}")
        if min(min(w) for w in widths) < 1:
            raise ValueError(f"{self.model_type_id}: all dimensions must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def uniform(cls, model_type_id: str, depth: int, width: int, input_dim: int, output_dim: int, activation: str = "tanh"):
        dims = [input_dim] + [width] * (depth - 1) + [output_dim]
        return cls(model_type_id, tuple(zip(dims[:-1], dims[1:])), activation)

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def input_dim(self) -> int:
        return self.widths[0][0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1][1]

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in self.widths)


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx])


@dataclass(frozen=True, eq=False)
class FrozenModel:
    spec: ModelSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    seed: int | None = None

    def __post_init__(self):
        ws, bs = [], []
        for l, ((d_in, d_out), w, b) in enumerate(zip(self.spec.widths, self.weights, self.biases), start=1):
            w = np.array(w, dtype=float).reshape(d_out, d_in)
            b = np.array(b, dtype=float).reshape(d_out)
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l} has non-finite weights")
            w.flags.writeable = False
            b.flags.writeable = False
            ws.append(w)
            bs.append(b)
        if len(ws) != self.spec.depth or len(self.weights) != self.spec.depth:
            raise ValueError(f"expected {self.spec.depth} layers, got {len(self.weights)}")
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    @property
    def depth(self) -> int:
        return self.spec.depth


@dataclass
class ForwardTape:
    """Intermediates of one forward pass, indexed by 0-based layer position.

    ``inputs[l]`` is the layer input, ``frozen_out[l]`` the backbone part of
    the pre-activation (``W h + b``), ``local_out``/``global_out`` the adapter
    outputs and ``local_a``/``global_a`` the r-dim output of each adapter's A.
    """

    mode: str
    inputs: list = field(default_factory=list)
    frozen_out: list = field(default_factory=list)
    local_out: list = field(default_factory=list)
    local_a: list = field(default_factory=list)
    global_out: list = field(default_factory=list)
    global_a: list = field(default_factory=list)
    gates: np.ndarray | None = None


def _check_adapters(model: FrozenModel, adapters: AdapterSet | None, which: str) -> None:
    if adapters is None:
        raise ValueError(f"{which} adapters are required for this mode")
    if adapters.depth != model.depth:
        raise ValueError(f"{which} adapters cover {adapters.depth} layers, model has {model.depth}")
    for l, ((d_in, d_out), ad) in enumerate(zip(model.spec.widths, adapters.layers), start=1):
        if ad.d_in != d_in or ad.d_out != d_out:
            raise ValueError(f"layer {l}: {which} adapter is {ad.d_in}->{ad.d_out}, layer is {d_in}->{d_out}")


def forward(
    model: FrozenModel,
    x: np.ndarray,
    local_adapters: AdapterSet | None = None,
    global_adapters: AdapterSet | None = None,
    gates: GateParams | None = None,
    mode: str = "gated_dual",
) -> tuple[np.ndarray, ForwardTape]:
    """Run the model on ``x`` (``m x input_dim``) and return logits and tape."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    h = np.atleast_2d(np.asarray(x, dtype=float))
    if h.shape[1] != model.spec.input_dim:
        raise ValueError(f"input has {h.shape[1]} columns, model expects {model.spec.input_dim}")
    use_local = mode in ("local_only", "gated_dual")
    use_global = mode in ("global_only", "gated_dual")
    if use_local:
        _check_adapters(model, local_adapters, "local")
    if use_global:
        _check_adapters(model, global_adapters, "global")
    tape = ForwardTape(mode)
    if mode == "gated_dual":
        beta = np.zeros(model.depth) if gates is None else np.asarray(gates.beta, dtype=float)
        if beta.shape != (model.depth,):
            raise ValueError(f"expected {model.depth} gates, got {beta.shape}")
        tape.gates = sigmoid(beta)

    tanh = model.spec.activation == "tanh"
    last = model.depth - 1
    for l in range(model.depth):
        tape.inputs.append(h)
        z = h @ model.weights[l].T + model.biases[l]
        tape.frozen_out.append(z)
        if use_local:
            out, a = local_adapters.layers[l].forward(h)
            tape.local_out.append(out)
            tape.local_a.append(a)
        if use_global:
            out_g, a_g = global_adapters.layers[l].forward(h)
            tape.global_out.append(out_g)
            tape.global_a.append(a_g)
        if mode == "gated_dual":
            g = tape.gates[l]
            z = z + (1.0 - g) * out + g * out_g
        elif mode == "local_only":
            z = z + out
        elif mode == "global_only":
            z = z + out_g
        h = np.tanh(z) if (tanh and l < last) else z
    return h, tape


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    m = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(m), labels].mean())
    d = np.exp(logp)
    d[np.arange(m), labels] -= 1.0
    return loss, d / m


def backward(
    model: FrozenModel,
    tape: ForwardTape,
    dlogits: np.ndarray,
    local_adapters: AdapterSet | None = None,
    global_adapters: AdapterSet | None = None,
    weight_grads: bool = False,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given ``dlogits``.

    Returns entries for the trainable local-adapter parameters (``"003.P"``
    style names), ``"beta"`` in gated mode and, when ``weight_grads`` is set,
    ``"W.003"``/``"b.003"`` for the frozen backbone (used for pretraining and
    the probe gradient only).
    """
    mode = tape.mode
    use_local = mode in ("local_only", "gated_dual")
    use_global = mode in ("global_only", "gated_dual")
    tanh = model.spec.activation == "tanh"
    grads: dict[str, np.ndarray] = {}
    if mode == "gated_dual":
        dbeta = np.zeros(model.depth)
    dz = dlogits
    for l in range(model.depth - 1, -1, -1):
        h = tape.inputs[l]
        name = f"{l + 1:03d}"
        if weight_grads:
            grads[f"W.{name}"] = dz.T @ h
            grads[f"b.{name}"] = dz.sum(axis=0)
        need_dh = l > 0
        dh = dz @ model.weights[l] if need_dh else None
        if mode == "gated_dual":
            g = tape.gates[l]
            dbeta[l] = g * (1.0 - g) * np.sum(dz * (tape.global_out[l] - tape.local_out[l]))
            c_local, c_global = 1.0 - g, g
        else:
            c_local = c_global = 1.0
        if use_local:
            ad = local_adapters.layers[l]
            dh_l, pg = ad.backward(h, tape.local_a[l], c_local * dz)
            for key, val in pg.items():
                grads[f"{name}.{key}"] = val
            if need_dh:
                dh += dh_l
        if use_global and need_dh:
            ad = global_adapters.layers[l]
            dh_g, _ = ad.backward(h, tape.global_a[l], c_global * dz, need_params=False)
            dh += dh_g
        if need_dh:
            dz = dh * (1.0 - h * h) if tanh else dh
    if mode == "gated_dual":
        grads["beta"] = dbeta
    return grads


def loss_and_grads(
    model: FrozenModel,
    batch: Batch,
    local_adapters: AdapterSet | None = None,
    global_adapters: AdapterSet | None = None,
    gates: GateParams | None = None,
    mode: str = "gated_dual",
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over ``batch`` and gradients of trainable parameters.

    Trainable means: P and Q of local PQ-LoRA layers, A and B of local
    conventional LoRA layers, and the gate logits in ``gated_dual`` mode.
    Backbone weights and global adapters never receive gradients.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    logits, tape = forward(model, batch.inputs, local_adapters, global_adapters, gates, mode)
    loss, dlogits = cross_entropy(logits, batch.labels)
    return loss, backward(model, tape, dlogits, local_adapters, global_adapters)


def predict(model, x, local_adapters=None, global_adapters=None, gates=None, mode="gated_dual") -> np.ndarray:
    logits, _ = forward(model, x, local_adapters, global_adapters, gates, mode)
    return logits.argmax(axis=1)


def last_layer_gradient(probe: FrozenModel, batch: Batch) -> np.ndarray:
    """Flattened gradient of the mean batch loss w.r.t. the probe's last weight matrix."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    logits, tape = forward(probe, batch.inputs, mode="adapters_off")
    _, dlogits = cross_entropy(logits, batch.labels)
    return (dlogits.T @ tape.inputs[-1]).ravel()


# -- construction -------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    """Full-batch pretraining on a shared synthetic task before freezing."""

    steps: int = 200
    lr: float = 0.1
    momentum: float = 0.9
    n_samples: int = 1024
    task_seed: int = 7919
    noise: float = 0.6
    modes_per_class: int = 1


def pretraining_task(input_dim: int, n_classes: int, cfg: PretrainConfig) -> Batch:
    """Gaussian-mixture data shared by every backbone's pretraining.

    Each class owns ``modes_per_class`` separate components; more modes force
    the backbone to keep more of the input geometry.
    """
    rng = np.random.default_rng(cfg.task_seed)
    n_modes = n_classes * cfg.modes_per_class
    protos = rng.standard_normal((n_modes, input_dim)) * (2.0 / np.sqrt(input_dim)) * 1.5
    modes = np.arange(cfg.n_samples) % n_modes
    x = protos[modes] + cfg.noise * rng.standard_normal((cfg.n_samples, input_dim)) / np.sqrt(input_dim) * 2.0
    return Batch(x, modes % n_classes)


def build_frozen(spec: ModelSpec, seed: int, pretrain: PretrainConfig | None = PretrainConfig()) -> FrozenModel:
    """Deterministic backbone for ``(spec, seed)``.

    Weights start from N(0, 1/d_in); with ``pretrain`` set they are fitted by
    full-batch momentum gradient descent on :func:`pretraining_task` and then
    frozen.
    """
    rng = np.random.default_rng(seed)
    ws = [rng.standard_normal((d_out, d_in)) / np.sqrt(d_in) for d_in, d_out in spec.widths]
    bs = [np.zeros(d_out) for _, d_out in spec.widths]
    if pretrain is not None and pretrain.steps > 0:
        data = pretraining_task(spec.input_dim, spec.output_dim, pretrain)
        vel_w = [np.zeros_like(w) for w in ws]
        vel_b = [np.zeros_like(b) for b in bs]
        for _ in range(pretrain.steps):
            m = FrozenModel(spec, tuple(ws), tuple(bs), seed)
            logits, tape = forward(m, data.inputs, mode="adapters_off")
            _, dlogits = cross_entropy(logits, data.labels)
            g = backward(m, tape, dlogits, weight_grads=True)
            for l in range(spec.depth):
                name = f"{l + 1:03d}"
                vel_w[l] = pretrain.momentum * vel_w[l] - pretrain.lr * g[f"W.{name}"]
                vel_b[l] = pretrain.momentum * vel_b[l] - pretrain.lr * g[f"b.{name}"]
                ws[l] = ws[l] + vel_w[l]
                bs[l] = bs[l] + vel_b[l]
    return FrozenModel(spec, tuple(ws), tuple(bs), seed)
