"""Self-contained property suites behind ``hetpfl check``.

Every suite uses fixed seeds and returns a list of :class:`PropertyResult`;
a suite passes when all of its properties pass.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import linalg
from .adapter import GateParams, PqLoraAdapter, build_adapter_set, init_orthogonal, span_dimension
from .align import align_all
from .client import SanitizationSpec, sanitize, update_ema
from .model import Batch, ModelSpec, build_frozen, loss_and_grads
from .server import aggregation_weights, relevance_matrix

SUITES = ("theorem1", "theorem2", "gradients", "alignment", "rela")


@dataclass
class PropertyResult:
    suite: str
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def __post_init__(self):
        self.passed, self.value, self.threshold = bool(self.passed), float(self.value), float(self.threshold)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.suite}.{self.name} value={self.value:.3g} threshold={self.threshold:g} {self.detail}".rstrip()

    def as_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# -- theorem 2: frozen shared A/B aggregate exactly ---------------------------------


def aggregation_error(w: np.ndarray, a: np.ndarray, b: np.ndarray, ps: np.ndarray) -> float:
    """``|| sum_j w_j B P_j A - B (sum_j w_j P_j) A ||_F`` for one weight row."""
    ideal = sum(wj * (b @ p @ a) for wj, p in zip(w, ps))
    merged = b @ np.tensordot(w, ps, axes=1) @ a
    return float(np.linalg.norm(ideal - merged))


def theorem2(n_configs: int = 100, seed: int = 0) -> list[PropertyResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        n = int(rng.integers(2, 9))
        r = int(rng.choice([2, 4, 8]))
        d = int(rng.choice([8, 16, 32]))
        ad = init_orthogonal(r, d, d, rng)
        ps = rng.standard_normal((n, r, r))
        w = rng.dirichlet(np.ones(n))
        worst = max(worst, aggregation_error(w, ad.A, ad.B, ps))
    return [PropertyResult("theorem2", "max_aggregation_error", worst <= 1e-10, worst, 1e-10,
                           f"over {n_configs} configurations")]


# -- theorem 1: span dimension ----------------------------------------------------------


def theorem1(n_seeds: int = 50, seed: int = 0) -> list[PropertyResult]:
    rng = np.random.default_rng(seed)
    full_ok = deficient_ok = 0
    for _ in range(n_seeds):
        r = int(rng.choice([2, 3, 4]))
        d_in, d_out = int(rng.integers(r, 17)), int(rng.integers(r, 17))
        ad = init_orthogonal(r, d_in, d_out, rng)
        full_ok += span_dimension(ad, tol=1e-8) == r * r
        a = ad.A.copy()
        a[-1] = a[0]
        bad = PqLoraAdapter(a, ad.B, ad.P, ad.Q)
        deficient_ok += span_dimension(bad, tol=1e-8) < r * r
    return [
        PropertyResult("theorem1", "orthonormal_span_is_r2", full_ok == n_seeds, full_ok, n_seeds,
                       f"{full_ok}/{n_seeds} seeds"),
        PropertyResult("theorem1", "deficient_span_below_r2", deficient_ok == n_seeds, deficient_ok, n_seeds,
                       f"{deficient_ok}/{n_seeds} seeds"),
    ]


# -- gradients: analytic vs central differences ------------------------------------------


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def finite_difference_errors(seed: int, depth: int = 4, width: int = 16, rank: int = 4, eps: float = 1e-6) -> dict[str, float]:
    """Relative error of every analytic gradient at one random parameter point."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec.uniform("fd", depth, width, width, width)
    model = build_frozen(spec, int(rng.integers(2**31)), pretrain=None)
    local = build_adapter_set(list(spec.widths), rank, 2, rng)
    glob = build_adapter_set(list(spec.widths), rank, 2, rng)
    for ads in (local, glob):
        for ad in ads.layers:
            if isinstance(ad, PqLoraAdapter):
                ad.P[...] = rng.standard_normal(ad.P.shape) * 0.5
                ad.Q[...] = rng.standard_normal(ad.Q.shape) * 0.5
            else:
                ad.B[...] = rng.standard_normal(ad.B.shape) * 0.3
    gates = GateParams(rng.standard_normal(depth))
    batch = Batch(rng.standard_normal((8, width)), rng.integers(0, width, 8))
    _, grads = loss_and_grads(model, batch, local, glob, gates, "gated_dual")

    def loss() -> float:
        return loss_and_grads(model, batch, local, glob, gates, "gated_dual")[0]

    errs = {}
    for name, g in grads.items():
        param = gates.beta if name == "beta" else local.parameter(name)
        num = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            old = param[idx]
            param[idx] = old + eps
            up = loss()
            param[idx] = old - eps
            down = loss()
            param[idx] = old
            num[idx] = (up - down) / (2 * eps)
        errs[name] = _rel_err(g, num)
    return errs


def gradients(n_points: int = 20, seed: int = 0) -> list[PropertyResult]:
    worst: dict[str, float] = {}
    for k in range(n_points):
        for name, e in finite_difference_errors(seed + k).items():
            kind = "beta" if name == "beta" else name.split(".")[1]
            worst[kind] = max(worst.get(kind, 0.0), e)
    return [PropertyResult("gradients", f"max_rel_error_{kind}", e <= 1e-4, e, 1e-4, f"{n_points} points")
            for kind, e in sorted(worst.items())]


# -- alignment ------------------------------------------------------------------------------


def default_pair(seed: int = 0):
    """The default two-type toy models, fresh adapters and public inputs."""
    from .bench import build_models, generate_scenario, initial_adapters
    from .config import ExperimentConfig

    cfg = ExperimentConfig(seed=seed)
    scn = generate_scenario(cfg)
    models = build_models(cfg)
    return cfg, models, initial_adapters(cfg, models), scn.public


def cca_sanity(seed: int = 0, m: int = 500, d: int = 8) -> tuple[float, float]:
    """``(min corr for a rotated copy, first corr for independent views)``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((m, d))
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    _, _, rot = linalg.cca(x, x @ q, d)
    _, _, ind = linalg.cca(x, rng.standard_normal((m, d)), d)
    return float(rot.min()), float(ind[0])


def alignment(seed: int = 0) -> list[PropertyResult]:
    cfg, models, fresh, public = default_pair(seed)
    _, reports = align_all(models, fresh, public, cfg.align)
    ratio = max(rep.a_gap_ratio for rep in reports)
    orth = max(rep.a_orth_error for rep in reports)
    rot, ind = cca_sanity(seed)
    return [
        PropertyResult("alignment", "max_a_gap_ratio", ratio <= 0.5, ratio, 0.5, f"{len(reports)} PQ layers"),
        PropertyResult("alignment", "a_orthonormality_error", orth <= 1e-6, orth, 1e-6),
        PropertyResult("alignment", "cca_rotated_min_corr", rot >= 0.999, rot, 0.999),
        PropertyResult("alignment", "cca_independent_first_corr", ind < 0.3, ind, 0.3),
    ]


# -- RELA algebra, EMA order sensitivity, sanitization --------------------------------


def ema_order_fixture(alpha: float = 0.5, rounds: int = 3) -> tuple[float, float]:
    """Two task gradients seen in opposite orders: ``(plain-mean gap, EMA gap)``."""
    g1, g2 = np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0, 0.0])
    seq_a = [g1] * rounds + [g2] * rounds
    seq_b = [g2] * rounds + [g1] * rounds

    def ema(seq):
        h = np.zeros(4)
        for g in seq:
            h = update_ema(h, g, alpha)
        return h

    mean_gap = float(np.abs(np.mean(seq_a, 0) - np.mean(seq_b, 0)).max())
    ema_gap = float(np.linalg.norm(ema(seq_a) - ema(seq_b)))
    return mean_gap, ema_gap


def rela(seed: int = 0, n_rounds: int = 50) -> list[PropertyResult]:
    rng = np.random.default_rng(seed)
    stoch, invariance = 0.0, 0.0
    for _ in range(n_rounds):
        n = int(rng.integers(2, 9))
        grads = list(rng.standard_normal((n, 24)))
        s, deg = relevance_matrix(grads)
        w = aggregation_weights(s, 0.5, deg)
        stoch = max(stoch, float(np.abs(w.sum(axis=1) - 1.0).max()))
        scaled = [g * c for g, c in zip(grads, rng.uniform(0.01, 100.0, n))]
        s2, deg2 = relevance_matrix(scaled)
        invariance = max(invariance, float(np.abs(aggregation_weights(s2, 0.5, deg2) - w).max()))
    w2 = aggregation_weights(np.eye(2), 0.5)
    closed = abs(w2[0, 0] - np.e**2 / (np.e**2 + 1))

    mean_gap, ema_gap = ema_order_fixture()

    mrng = np.random.default_rng(seed + 1)
    spec = SanitizationSpec.create(1000, 0.4, 1e-4, mrng)
    draws = np.stack([sanitize(np.zeros(1000), spec, mrng) for _ in range(250)])
    masked_max = float(np.abs(draws[:, ~spec.mask]).max())
    kept = draws[:, spec.mask].ravel()
    std_err = abs(float(kept.std()) / spec.mu - 1.0)
    return [
        PropertyResult("rela", "row_stochastic_error", stoch <= 1e-9, stoch, 1e-9),
        PropertyResult("rela", "closed_form_two_clients", closed <= 1e-9, closed, 1e-9),
        PropertyResult("rela", "scale_invariance_error", invariance <= 1e-12, invariance, 1e-12),
        PropertyResult("rela", "ema_plain_mean_gap", mean_gap < 1e-12, mean_gap, 1e-12),
        PropertyResult("rela", "ema_order_gap", ema_gap > 0.1, ema_gap, 0.1, "must exceed"),
        PropertyResult("rela", "masked_dims_zero", masked_max == 0.0, masked_max, 0.0),
        PropertyResult("rela", "noise_std_rel_error", std_err <= 0.02, std_err, 0.02, f"{kept.size} draws"),
    ]


def run_suite(name: str, seed: int = 0) -> list[PropertyResult]:
    fns = {"theorem1": theorem1, "theorem2": theorem2, "gradients": gradients, "alignment": alignment, "rela": rela}
    if name not in fns:
        raise ValueError(f"unknown suite {name!r}; expected one of {SUITES}")
    return fns[name](seed=seed)
