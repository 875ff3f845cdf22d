"""One-shot alignment of PQ-LoRA factors across model types.

Before federation every non-pivot model type gets its PQ-LoRA A and B
matrices matched to the pivot (the smallest model) on public data:

* A by gradient descent on the mean squared gap between the two r-dim
  A-outputs, plus ``lam * ||A A^T - I||_F^2``, then snapped to the nearest
  row-orthonormal matrix;
* B by mapping the pivot's B through CCA projections of the two layers'
  output spaces, ``B_j = pinv(Pi_j)^T Pi_i^T B_i``, then column-orthonormalised.

Features are captured with every adapter contribution scaled to zero, so they
depend on the frozen backbones only. Layers are matched by block ordinal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .adapter import AdapterSet, PqLoraAdapter
from .model import FrozenModel, forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlignmentConfig:
    lam: float = 0.5
    lr: float = 0.05
    epochs: int = 60
    public_batch_size: int = 64
    momentum: float = 0.9
    ridge: float | None = None
    pivot: str = "smallest"
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.pivot != "smallest":
            raise ValueError(f"unsupported pivot rule {self.pivot!r}")


def capture_features(
    model: FrozenModel,
    adapters: AdapterSet,
    x: np.ndarray,
    which: str,
    layer: int,
) -> np.ndarray:
    """Hook-style capture at a PQ-LoRA layer (1-based) with adapters off.

    ``which="A_in"`` returns the layer input seen by A (``m x d_in``),
    ``"A_out"`` the r-dim A output (``m x r``) and ``"B_out"`` the frozen
    layer output that B writes into (``m x d_out``).
    """
    if layer not in adapters.pq_layers:
        raise ValueError(f"layer {layer} is not a PQ-LoRA layer (PQ layers: {adapters.pq_layers})")
    _, tape = forward(model, x, mode="adapters_off")
    if which == "A_in":
        return tape.inputs[layer - 1]
    if which == "A_out":
        return tape.inputs[layer - 1] @ adapters[layer].A.T
    if which == "B_out":
        return tape.frozen_out[layer - 1]
    raise ValueError(f"which must be 'A_in', 'A_out' or 'B_out', got {which!r}")


def a_gap(a_pivot: np.ndarray, h_pivot: np.ndarray, a_other: np.ndarray, h_other: np.ndarray) -> float:
    """Mean squared distance between the two r-dim A-outputs."""
    diff = h_pivot @ a_pivot.T - h_other @ a_other.T
    return float(np.mean(np.sum(diff * diff, axis=1)))


def _a_objective(a_other, target, h_other, lam):
    diff = h_other @ a_other.T - target
    gram = a_other @ a_other.T - np.eye(a_other.shape[0])
    loss = np.mean(np.sum(diff * diff, axis=1)) + lam * np.sum(gram * gram)
    grad = 2.0 * diff.T @ h_other / h_other.shape[0] + 4.0 * lam * gram @ a_other
    return float(loss), grad


def align_A(
    pivot: PqLoraAdapter,
    other: PqLoraAdapter,
    h_pivot: np.ndarray,
    h_other: np.ndarray,
    cfg: AlignmentConfig,
) -> tuple[PqLoraAdapter, list[float]]:
    """Fit ``other.A`` so that ``other.A h_other`` tracks ``pivot.A h_pivot``.

    ``h_pivot`` and ``h_other`` are the two layers' inputs on the same public
    samples. Minibatch gradient descent with momentum; the pivot is read only.
    Returns the updated adapter and the full-data objective after each epoch
    (index 0 is the starting value).
    """
    if pivot.rank != other.rank:
        raise ValueError(f"rank mismatch: pivot {pivot.rank}, other {other.rank}")
    if h_pivot.shape[0] != h_other.shape[0]:
        raise ValueError("pivot and other features must come from the same samples")
    target = h_pivot @ pivot.A.T
    a = np.array(other.A, dtype=float)
    vel = np.zeros_like(a)
    rng = np.random.default_rng(cfg.seed)
    m = h_other.shape[0]
    bs = min(cfg.public_batch_size, m)
    history = [_a_objective(a, target, h_other, cfg.lam)[0]]
    if history[0] <= 1e-24 * max(1.0, float(np.sum(target**2))):
        return other.copy(), history
    for _ in range(cfg.epochs):
        order = rng.permutation(m)
        for start in range(0, m, bs):
            idx = order[start : start + bs]
            _, g = _a_objective(a, target[idx], h_other[idx], cfg.lam)
            vel = cfg.momentum * vel - cfg.lr * g
            a = a + vel
        history.append(_a_objective(a, target, h_other, cfg.lam)[0])
    return other.with_factors(A=a), history


def orthogonalize_A(ad: PqLoraAdapter) -> PqLoraAdapter:
    """Replace A by its nearest row-orthonormal matrix ``U V^T``."""
    return ad.with_factors(A=linalg.nearest_orthogonal(ad.A, "rows"))


def align_B(
    pivot_B: np.ndarray,
    h_pivot: np.ndarray,
    h_other: np.ndarray,
    r: int,
    ridge: float | None = None,
    tol: float = 1e-6,
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Carry the pivot's B into the other model's output space through CCA.

    Returns the new B (columns orthonormalised when they deviate by more than
    ``tol``) and the ``(pi_pivot, pi_other, corrs)`` CCA result.
    """
    pi_i, pi_j, corrs = linalg.cca(h_pivot, h_other, r, ridge)
    b = linalg.pinv(pi_j).T @ pi_i.T @ pivot_B
    if linalg.orthonormality_error(b, "columns") > tol:
        b = linalg.nearest_orthogonal(b, "columns")
    return b, (pi_i, pi_j, corrs)


def b_output_features(ad: PqLoraAdapter, h: np.ndarray) -> np.ndarray:
    """What B emits when the A-features pass through a unit mid-map (P = I, Q = 0)."""
    return (h @ ad.A.T) @ ad.B.T


@dataclass
class LayerReport:
    model_type: str
    block: int
    pivot_layer: int
    other_layer: int
    a_gap_pre: float
    a_gap_post: float
    b_cka_pre: float
    b_cka_post: float
    a_orth_error: float
    b_orth_error: float
    canonical_corrs: list[float] = field(default_factory=list)

    @property
    def a_gap_ratio(self) -> float:
        return self.a_gap_post / self.a_gap_pre if self.a_gap_pre > 0 else 0.0


def pick_pivot(models: dict[str, FrozenModel]) -> str:
    """Smallest model by parameter count; ties go to the first listed."""
    return min(models, key=lambda k: models[k].spec.n_params)


def align_all(
    models: dict[str, FrozenModel],
    adapters: dict[str, AdapterSet],
    x_public: np.ndarray,
    cfg: AlignmentConfig = AlignmentConfig(),
) -> tuple[dict[str, AdapterSet], list[LayerReport]]:
    """Align every model type's PQ-LoRA layers to the pivot type.

    P and Q of each block are copied from the pivot so that all types start
    from the same shareable state. Conventional LoRA layers are untouched.
    """
    if set(models) != set(adapters):
        raise ValueError("models and adapters must cover the same model types")
    out = {k: v.copy() for k, v in adapters.items()}
    if len(models) <= 1:
        return out, []
    pivot_id = pick_pivot(models)
    piv_model, piv_ads = models[pivot_id], adapters[pivot_id]
    _, piv_tape = forward(piv_model, x_public, mode="adapters_off")
    reports: list[LayerReport] = []
    for type_id, model in models.items():
        if type_id == pivot_id:
            continue
        ads = out[type_id]
        if ads.n_blocks != piv_ads.n_blocks:
            raise ValueError(f"{type_id} has {ads.n_blocks} PQ blocks, pivot has {piv_ads.n_blocks}")
        _, tape = forward(model, x_public, mode="adapters_off")
        for k in range(1, piv_ads.n_blocks + 1):
            li, lj = piv_ads.pq_layers[k - 1], ads.pq_layers[k - 1]
            piv, other = piv_ads.block(k), ads.block(k)
            if piv.rank != other.rank:
                raise ValueError(f"block {k}: rank {other.rank} differs from pivot rank {piv.rank}")
            h_i, h_j = piv_tape.inputs[li - 1], tape.inputs[lj - 1]
            gap_pre = a_gap(piv.A, h_i, other.A, h_j)
            aligned, _ = align_A(piv, other, h_i, h_j, cfg)
            aligned = orthogonalize_A(aligned)
            gap_post = a_gap(piv.A, h_i, aligned.A, h_j)

            o_i, o_j = piv_tape.frozen_out[li - 1], tape.frozen_out[lj - 1]
            b_new, (_, _, corrs) = align_B(piv.B, o_i, o_j, piv.rank, cfg.ridge)
            new = PqLoraAdapter(aligned.A, b_new, piv.P.copy(), piv.Q.copy())
            b_piv = b_output_features(piv, h_i)
            cka_pre = linalg.cka(b_piv, b_output_features(other, h_j))
            cka_post = linalg.cka(b_piv, b_output_features(new, h_j))
            ads.layers[lj - 1] = new
            rep = LayerReport(
                model_type=type_id,
                block=k,
                pivot_layer=li,
                other_layer=lj,
                a_gap_pre=gap_pre,
                a_gap_post=gap_post,
                b_cka_pre=cka_pre,
                b_cka_post=cka_post,
                a_orth_error=linalg.orthonormality_error(new.A, "rows"),
                b_orth_error=linalg.orthonormality_error(new.B, "columns"),
                canonical_corrs=[float(c) for c in corrs],
            )
            log.info(
                "aligned %s block %d (layer %d->%d): A gap %.4g -> %.4g, B cka %.3f -> %.3f",
                type_id, k, li, lj, gap_pre, gap_post, cka_pre, cka_post,
            )
            reports.append(rep)
    return out, reports
