"""Server round: relevance matrix, softmax weights and per-client aggregation.

PQ-LoRA blocks share P and Q across every client regardless of model type;
conventional LoRA layers are only averaged inside a model-type cohort, with
the client's weights renormalised over that cohort. Gates never leave the
client.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .adapter import AdapterSet, LoraAdapter, PqLoraAdapter


def relevance_matrix(grads: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise cosine similarity of client gradients.

    Returns ``(S, degenerate)``. A zero gradient carries no evidence: its row
    and column are 0 except for the diagonal, which is always 1.
    """
    g = np.stack([np.asarray(v, dtype=float).ravel() for v in grads])
    if len({np.asarray(v).size for v in grads}) != 1:
        raise ValueError("all gradients must have the same dimension")
    norms = np.linalg.norm(g, axis=1)
    degenerate = norms == 0.0
    unit = np.zeros_like(g)
    unit[~degenerate] = g[~degenerate] / norms[~degenerate, None]
    s = np.clip(unit @ unit.T, -1.0, 1.0)
    s = 0.5 * (s + s.T)
    np.fill_diagonal(s, 1.0)
    return s, degenerate


def aggregation_weights(s: np.ndarray, tau: float, degenerate: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax of ``S / tau``; degenerate clients get a uniform row."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    z = np.asarray(s, dtype=float) / tau
    z = z - z.max(axis=1, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=1, keepdims=True)
    if degenerate is not None and np.any(degenerate):
        w[np.asarray(degenerate)] = 1.0 / w.shape[0]
    return w


def aggregate(locals_: list[AdapterSet], w: np.ndarray, type_map: list[str]) -> list[AdapterSet]:
    """Build each client's customized global adapters ``G_i`` from row ``i`` of ``w``."""
    n = len(locals_)
    w = np.asarray(w, dtype=float)
    if w.shape != (n, n) or len(type_map) != n:
        raise ValueError(f"expected {n}x{n} weights and {n} type labels")
    n_blocks = {ads.n_blocks for ads in locals_}
    if len(n_blocks) != 1:
        raise ValueError(f"clients disagree on the number of PQ blocks: {sorted(n_blocks)}")
    nb = n_blocks.pop()
    # block k -> stacked (n, r, r) and (n, r)
    p_stack = [np.stack([ads.block(k).P for ads in locals_]) for k in range(1, nb + 1)]
    q_stack = [np.stack([ads.block(k).Q for ads in locals_]) for k in range(1, nb + 1)]
    types = np.asarray(type_map)

    dispatch = []
    for i, own in enumerate(locals_):
        cohort = np.flatnonzero(types == types[i])
        w_hat = w[i, cohort] / w[i, cohort].sum()
        layers = []
        for l, ad in enumerate(own.layers, start=1):
            if isinstance(ad, PqLoraAdapter):
                k = own.pq_layers.index(l)
                p = np.tensordot(w[i], p_stack[k], axes=1)
                q = w[i] @ q_stack[k]
                layers.append(PqLoraAdapter(ad.A, ad.B, p, q))
            else:
                a = sum(wj * locals_[j].layers[l - 1].A for wj, j in zip(w_hat, cohort))
                b = sum(wj * locals_[j].layers[l - 1].B for wj, j in zip(w_hat, cohort))
                layers.append(LoraAdapter(a, b))
        dispatch.append(AdapterSet(layers, list(own.pq_layers)))
    return dispatch


def aggregate_equal(locals_: list[AdapterSet], type_map: list[str]) -> list[AdapterSet]:
    """Equal-weight baseline: :func:`aggregate` with uniform rows."""
    n = len(locals_)
    return aggregate(locals_, np.full((n, n), 1.0 / n), type_map)


def checksum(adapters: AdapterSet) -> str:
    h = hashlib.sha256()
    for name, arr in adapters.named_parameters(trainable_only=False):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class RelevanceState:
    S: np.ndarray
    W: np.ndarray
    tau: float
    degenerate: np.ndarray


@dataclass
class RoundRecord:
    round: int
    relevance: RelevanceState | None
    checksums: list[str]

    def as_dict(self) -> dict:
        rec = {"round": self.round, "dispatch_checksums": self.checksums}
        if self.relevance is not None:
            rec["S"] = np.round(self.relevance.S, 12).tolist()
            rec["W"] = np.round(self.relevance.W, 12).tolist()
            rec["degenerate"] = self.relevance.degenerate.astype(int).tolist()
        return rec


def server_round(
    round_index: int,
    grads: list[np.ndarray],
    locals_: list[AdapterSet],
    type_map: list[str],
    tau: float,
    method: str = "fedmosaic",
) -> tuple[list[AdapterSet], RoundRecord]:
    """Synchronous barrier: every client's payload is in hand before aggregation."""
    if method == "fedmosaic":
        s, deg = relevance_matrix(grads)
        w = aggregation_weights(s, tau, deg)
        dispatch = aggregate(locals_, w, type_map)
        rel = RelevanceState(s, w, tau, deg)
    elif method == "vanilla_equal":
        dispatch = aggregate_equal(locals_, type_map)
        n = len(locals_)
        rel = RelevanceState(np.ones((n, n)), np.full((n, n), 1.0 / n), tau, np.zeros(n, dtype=bool))
    else:
        raise ValueError(f"server has no aggregation for method {method!r}")
    return dispatch, RoundRecord(round_index, rel, [checksum(g) for g in dispatch])
