"""LoRA and PQ-LoRA adapters, block placement, gating and checkpoint I/O.

Layer numbering is 1-based throughout this module (layer ``depth`` is the
classifier), matching the block attachment rule ``I_k = k * (depth // N_B)``
with the last block pinned to ``depth``.

Batch arrays are row-major: ``h`` is ``m x d_in`` and an adapter returns
``m x d_out``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from . import linalg


def block_indices(depth: int, n_blocks: int) -> list[int]:
    """1-based layer indices that receive a PQ-LoRA adapter."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if not 1 <= n_blocks <= depth:
        raise ValueError(f"n_blocks must be in [1, depth={depth}], got {n_blocks}")
    step = depth // n_blocks
    return [k * step for k in range(1, n_blocks)] + [depth]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass
class LoraAdapter:
    """Conventional LoRA: ``delta(h) = B A h`` with both factors trainable."""

    A: np.ndarray  # r x d_in
    B: np.ndarray  # d_out x r

    kind = "lora"
    trainable = ("A", "B")

    def __post_init__(self):
        self.A = np.array(self.A, dtype=float)
        self.B = np.array(self.B, dtype=float)
        if self.A.shape[0] != self.B.shape[1]:
            raise ValueError(f"rank mismatch: A {self.A.shape}, B {self.B.shape}")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def forward(self, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a = h @ self.A.T
        return a @ self.B.T, a

    def backward(self, h, a, dout, need_params=True):
        da = dout @ self.B
        dh = da @ self.A
        if not need_params:
            return dh, {}
        return dh, {"A": da.T @ h, "B": dout.T @ a}

    def delta_weight(self) -> np.ndarray:
        return self.B @ self.A

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.A.copy(), self.B.copy())


@dataclass
class PqLoraAdapter:
    """PQ-LoRA: ``delta(h) = B (P A h + Q)`` with A, B frozen.

    Only the ``r x r`` matrix P and the length-``r`` vector Q are trained and
    communicated, so they can be shared between models of different widths.
    A and B are stored read-only.
    """

    A: np.ndarray  # r x d_in, frozen
    B: np.ndarray  # d_out x r, frozen
    P: np.ndarray  # r x r
    Q: np.ndarray  # r

    kind = "pq"
    trainable = ("P", "Q")

    def __post_init__(self):
        self.A = _frozen(self.A)
        self.B = _frozen(self.B)
        self.P = np.array(self.P, dtype=float)
        self.Q = np.array(self.Q, dtype=float).reshape(-1)
        r = self.A.shape[0]
        if self.B.shape[1] != r or self.P.shape != (r, r) or self.Q.shape != (r,):
            raise ValueError(
                f"inconsistent PQ-LoRA shapes: A {self.A.shape}, B {self.B.shape}, "
                f"P {self.P.shape}, Q {self.Q.shape}"
            )

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def forward(self, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a = h @ self.A.T
        return (a @ self.P.T + self.Q) @ self.B.T, a

    def backward(self, h, a, dout, need_params=True):
        du = dout @ self.B
        dh = (du @ self.P) @ self.A
        if not need_params:
            return dh, {}
        return dh, {"P": du.T @ a, "Q": du.sum(axis=0)}

    def delta_weight(self) -> np.ndarray:
        return self.B @ self.P @ self.A

    def bias_delta(self) -> np.ndarray:
        return self.B @ self.Q

    def with_factors(self, A=None, B=None) -> "PqLoraAdapter":
        return PqLoraAdapter(
            self.A if A is None else A,
            self.B if B is None else B,
            self.P.copy(),
            self.Q.copy(),
        )

    def copy(self) -> "PqLoraAdapter":
        # A and B are read-only, sharing them is safe.
        return PqLoraAdapter(self.A, self.B, self.P.copy(), self.Q.copy())


Adapter = Union[LoraAdapter, PqLoraAdapter]


def init_orthogonal(r: int, d_in: int, d_out: int, rng: np.random.Generator | int) -> PqLoraAdapter:
    """PQ-LoRA with orthonormal rows of A, orthonormal columns of B, and P = Q = 0."""
    if r > min(d_in, d_out):
        raise ValueError(f"rank {r} exceeds min(d_in={d_in}, d_out={d_out})")
    rng = np.random.default_rng(rng)
    qa, _ = np.linalg.qr(rng.standard_normal((d_in, r)))
    qb, _ = np.linalg.qr(rng.standard_normal((d_out, r)))
    return PqLoraAdapter(qa.T, qb, np.zeros((r, r)), np.zeros(r))


def init_lora(r: int, d_in: int, d_out: int, rng: np.random.Generator | int) -> LoraAdapter:
    """Standard zero-update LoRA init: Gaussian A, zero B."""
    if r > min(d_in, d_out):
        raise ValueError(f"rank {r} exceeds min(d_in={d_in}, d_out={d_out})")
    rng = np.random.default_rng(rng)
    return LoraAdapter(rng.standard_normal((r, d_in)) / np.sqrt(d_in), np.zeros((d_out, r)))


def pq_forward(w_p: np.ndarray, ad: PqLoraAdapter, h: np.ndarray) -> np.ndarray:
    """Single-vector PQ-LoRA layer: ``W_p h + B (P A h + Q)``."""
    w_p = np.atleast_2d(np.asarray(w_p, dtype=float))
    h = np.asarray(h, dtype=float).reshape(-1)
    if w_p.shape != (ad.d_out, ad.d_in) or h.shape[0] != ad.d_in:
        raise ValueError(f"shape mismatch: W_p {w_p.shape}, adapter {ad.d_out}x{ad.d_in}, h {h.shape}")
    return w_p @ h + ad.B @ (ad.P @ (ad.A @ h) + ad.Q)


def delta_weight(ad: Adapter) -> np.ndarray:
    """Weight update implied by an adapter (Q excluded; see ``bias_delta``)."""
    return ad.delta_weight()


def span_dimension(ad: PqLoraAdapter, tol: float = 1e-8) -> int:
    """Dimension of ``span{b_i a_j^T}``, the space of reachable ``B P A``.

    Computed as the numerical rank of the ``(d_out*d_in) x r^2`` matrix whose
    columns are the vectorised outer products of B's columns and A's rows.
    """
    basis = np.einsum("oi,jd->ijod", ad.B, ad.A).reshape(ad.rank * ad.rank, -1).T
    s = np.linalg.svd(basis, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def gated_combine(base, h_local, h_global, beta: float):
    """``base + (1 - sigmoid(beta)) h_local + sigmoid(beta) h_global``."""
    g = sigmoid(beta)
    return np.asarray(base) + (1.0 - g) * np.asarray(h_local) + g * np.asarray(h_global)


@dataclass
class GateParams:
    """One unconstrained gate logit per layer."""

    beta: np.ndarray

    @classmethod
    def zeros(cls, depth: int) -> "GateParams":
        return cls(np.zeros(depth))

    @property
    def beta_tilde(self) -> np.ndarray:
        return sigmoid(self.beta)

    def copy(self) -> "GateParams":
        return GateParams(self.beta.copy())


@dataclass
class AdapterSet:
    """Per-layer adapters for one model; ``layers[l - 1]`` sits on layer ``l``."""

    layers: list[Adapter]
    pq_layers: list[int] = field(default_factory=list)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.pq_layers, self.pq_layers[1:])):
            raise ValueError(f"pq_layers must be strictly increasing: {self.pq_layers}")
        if self.pq_layers and self.pq_layers[-1] != len(self.layers):
            raise ValueError(f"last PQ layer must be the last layer ({len(self.layers)})")
        for i, ad in enumerate(self.layers, start=1):
            is_pq = isinstance(ad, PqLoraAdapter)
            if is_pq != (i in self.pq_layers):
                raise ValueError(f"layer {i}: adapter kind disagrees with pq_layers")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def n_blocks(self) -> int:
        return len(self.pq_layers)

    def __getitem__(self, layer: int) -> Adapter:
        return self.layers[layer - 1]

    def block(self, k: int) -> PqLoraAdapter:
        """The PQ-LoRA adapter of block ``k`` (1-based)."""
        return self.layers[self.pq_layers[k - 1] - 1]

    def copy(self) -> "AdapterSet":
        return AdapterSet([ad.copy() for ad in self.layers], list(self.pq_layers))

    def named_parameters(self, trainable_only: bool = True) -> Iterator[tuple[str, np.ndarray]]:
        """Yield ``("003.P", array)`` pairs in layer order, then A/B/P/Q order."""
        for i, ad in enumerate(self.layers, start=1):
            names = ad.trainable if trainable_only else [n for n in "ABPQ" if hasattr(ad, n)]
            for name in names:
                yield f"{i:03d}.{name}", getattr(ad, name)

    def parameter(self, name: str) -> np.ndarray:
        layer, attr = name.split(".")
        return getattr(self.layers[int(layer) - 1], attr)

    def compatible_with(self, other: "AdapterSet") -> bool:
        if self.pq_layers != other.pq_layers or self.depth != other.depth:
            return False
        return all(
            a.kind == b.kind and a.A.shape == b.A.shape and a.B.shape == b.B.shape
            for a, b in zip(self.layers, other.layers)
        )

    def pq_orthonormality_error(self) -> float:
        """Worst deviation of any PQ layer from ``A A^T = I`` and ``B^T B = I``."""
        errs = [0.0]
        for k in range(1, self.n_blocks + 1):
            ad = self.block(k)
            errs.append(linalg.orthonormality_error(ad.A, "rows"))
            errs.append(linalg.orthonormality_error(ad.B, "columns"))
        return max(errs)


def build_adapter_set(
    layer_dims: list[tuple[int, int]],
    rank: int,
    n_blocks: int,
    rng: np.random.Generator | int,
) -> AdapterSet:
    """Fresh adapters for a model with the given per-layer ``(d_in, d_out)``."""
    rng = np.random.default_rng(rng)
    pq = block_indices(len(layer_dims), n_blocks)
    layers: list[Adapter] = []
    for i, (d_in, d_out) in enumerate(layer_dims, start=1):
        r = min(rank, d_in, d_out)
        if i in pq:
            if r != rank:
                raise ValueError(f"PQ layer {i} ({d_in}->{d_out}) cannot hold rank {rank}")
            layers.append(init_orthogonal(rank, d_in, d_out, rng))
        else:
            layers.append(init_lora(r, d_in, d_out, rng))
    return AdapterSet(layers, pq)


# -- checkpoint container ----------------------------------------------------


def save_adapters(path: str | Path, adapters: AdapterSet, metadata: dict | None = None) -> None:
    """Write a flat named-tensor file (safetensors) with layer kinds in the header."""
    from safetensors.numpy import save_file

    tensors = {name: np.ascontiguousarray(arr) for name, arr in adapters.named_parameters(False)}
    meta = {
        "kinds": json.dumps([ad.kind for ad in adapters.layers]),
        "pq_layers": json.dumps(adapters.pq_layers),
    }
    for key, val in (metadata or {}).items():
        meta[str(key)] = val if isinstance(val, str) else json.dumps(val)
    save_file(tensors, str(path), metadata=meta)


def load_adapters(path: str | Path) -> tuple[AdapterSet, dict]:
    from safetensors import safe_open

    with safe_open(str(path), framework="numpy") as f:
        meta = dict(f.metadata() or {})
        tensors = {k: f.get_tensor(k) for k in f.keys()}
    kinds = json.loads(meta.pop("kinds"))
    pq_layers = json.loads(meta.pop("pq_layers"))
    layers: list[Adapter] = []
    for i, kind in enumerate(kinds, start=1):
        t = {n: tensors[f"{i:03d}.{n}"] for n in ("A", "B", "P", "Q") if f"{i:03d}.{n}" in tensors}
        layers.append(PqLoraAdapter(**t) if kind == "pq" else LoraAdapter(**t))
    return AdapterSet(layers, pq_layers), meta
