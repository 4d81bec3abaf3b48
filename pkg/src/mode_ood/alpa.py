"""Cross-attention contrastive objective over local feature grids.

The training signal aligns the local vectors of every pair of examples
with scaled dot-product cross attention, measures agreement as a mean of
cosine similarities between each example's values and the partner-aligned
values, and feeds those pairwise similarities into a supervised
contrastive loss. A plain supervised contrastive loss on pooled global
vectors is kept as the baseline objective. Gradients are exact
reverse-mode, written by hand (no autodiff framework) and checked against
central finite differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from .errors import ContractError, GradientError, NormalizationError
from .features import FeatureMap, _philox

DEFAULT_TAU = 0.1
DEFAULT_HEAD_DIM = 80


@dataclass
class ProjectionHeads:
    """Three affine maps (key, query, value) from E to a shared dim e."""

    w_k: np.ndarray
    w_q: np.ndarray
    w_v: np.ndarray
    b_k: np.ndarray = None
    b_q: np.ndarray = None
    b_v: np.ndarray = None

    def __post_init__(self):
        self.w_k = np.asarray(self.w_k, dtype=np.float64)
        self.w_q = np.asarray(self.w_q, dtype=np.float64)
        self.w_v = np.asarray(self.w_v, dtype=np.float64)
        if not (self.w_k.shape == self.w_q.shape == self.w_v.shape) or self.w_k.ndim != 2:
            raise ContractError("head weight matrices must share one (E, e) shape")
        e = self.w_k.shape[1]
        for name in ("b_k", "b_q", "b_v"):
            b = getattr(self, name)
            b = np.zeros(e) if b is None else np.asarray(b, dtype=np.float64)
            if b.shape != (e,):
                raise ContractError(f"{name} must have shape ({e},)")
            setattr(self, name, b)
        for name in ("w_k", "w_q", "w_v", "b_k", "b_q", "b_v"):
            if not np.isfinite(getattr(self, name)).all():
                raise ContractError(f"{name} contains non-finite entries")

    @property
    def in_dim(self) -> int:
        return self.w_k.shape[0]

    @property
    def e(self) -> int:
        return self.w_k.shape[1]


def init_heads(in_dim: int, e: int, seed: int) -> ProjectionHeads:
    """Fan-in scaled symmetric-uniform weights, zero biases."""
    rng = _philox(seed)
    scale = 1.0 / np.sqrt(in_dim)
    w = [rng.uniform(-scale, scale, size=(in_dim, e)) for _ in range(3)]
    return ProjectionHeads(*w)


def _as_grid(x) -> np.ndarray:
    """Accept a FeatureMap or an (HW, E) array; return (HW, E) float64."""
    if isinstance(x, FeatureMap):
        return x.positions()
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"expected an (HW, E) array, got shape {arr.shape}")
    return arr


def project(heads: ProjectionHeads, fmap) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise affine K, Q, V projections of the position grid."""
    grid = _as_grid(fmap)
    if grid.shape[1] != heads.in_dim:
        raise ContractError(
            f"feature dim {grid.shape[1]} does not match heads' input dim {heads.in_dim}"
        )
    k = grid @ heads.w_k + heads.b_k
    q = grid @ heads.w_q + heads.b_q
    v = grid @ heads.w_v + heads.b_v
    return k, q, v


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def attention_weights(k_i: np.ndarray, q_j: np.ndarray, e: int) -> np.ndarray:
    """Row-stochastic attention of j's queries over i's keys."""
    if e <= 0:
        raise ContractError("e must be positive")
    return _softmax_rows(q_j @ k_i.T / np.sqrt(e))


def cross_attention_align(k_i, q_j, v_i, e: int) -> np.ndarray:
    """Values of i aligned to j's positions: softmax(Q_j K_i^T / sqrt(e)) V_i."""
    return attention_weights(k_i, q_j, e) @ v_i


def _normalize_rows(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=1)
    if (norms == 0.0).any():
        idx = int(np.argmin(norms))
        raise NormalizationError(f"zero-norm row {idx} in {what}")
    return m / norms[:, None], norms


def _sim_forward(grid_i, grid_j, heads: ProjectionHeads) -> SimpleNamespace:
    """Forward pass of the pairwise similarity; caches intermediates."""
    li, lj = _as_grid(grid_i), _as_grid(grid_j)
    if li.shape != lj.shape:
        raise ContractError(f"pair shapes differ: {li.shape} vs {lj.shape}")
    ki, qi, vi = project(heads, li)
    kj, qj, vj = project(heads, lj)
    scale = 1.0 / np.sqrt(heads.e)
    a_ij = _softmax_rows(qj @ ki.T * scale)   # aligns i's values to j
    a_ji = _softmax_rows(qi @ kj.T * scale)   # aligns j's values to i
    v_ij = a_ij @ vi
    v_ji = a_ji @ vj
    nvi, len_i = _normalize_rows(vi, "V_i")
    nvj, len_j = _normalize_rows(vj, "V_j")
    nvij, len_ij = _normalize_rows(v_ij, "V_{i|j}")
    nvji, len_ji = _normalize_rows(v_ji, "V_{j|i}")
    dots_i = np.einsum("le,le->l", nvi, nvji)
    dots_j = np.einsum("le,le->l", nvj, nvij)
    hw = li.shape[0]
    value = (dots_i.sum() + dots_j.sum()) / hw
    return SimpleNamespace(
        li=li, lj=lj, ki=ki, qi=qi, vi=vi, kj=kj, qj=qj, vj=vj,
        a_ij=a_ij, a_ji=a_ji, scale=scale, hw=hw,
        nvi=nvi, nvj=nvj, nvij=nvij, nvji=nvji,
        len_i=len_i, len_j=len_j, len_ij=len_ij, len_ji=len_ji,
        dots_i=dots_i, dots_j=dots_j, value=value,
    )


def pairwise_sim(map_i, map_j, heads: ProjectionHeads) -> float:
    """Symmetric local similarity in [-2, 2] between two feature grids."""
    return float(_sim_forward(map_i, map_j, heads).value)


def _softmax_backward(a: np.ndarray, da: np.ndarray) -> np.ndarray:
    return a * (da - (da * a).sum(axis=1, keepdims=True))


def _sim_backward(f: SimpleNamespace, coeff: float, heads: ProjectionHeads, acc: dict):
    """Backprop ``coeff * sim`` into head grads (accumulated in ``acc``).

    Returns (dL_i, dL_j), the gradients w.r.t. the two input grids.
    """
    c = coeff / f.hw
    # cosine terms: d(u.w)/dx for u = x/|x| is (w - (u.w) u)/|x|
    d_vi = c * (f.nvji - f.dots_i[:, None] * f.nvi) / f.len_i[:, None]
    d_vji = c * (f.nvi - f.dots_i[:, None] * f.nvji) / f.len_ji[:, None]
    d_vj = c * (f.nvij - f.dots_j[:, None] * f.nvj) / f.len_j[:, None]
    d_vij = c * (f.nvj - f.dots_j[:, None] * f.nvij) / f.len_ij[:, None]
    # v_ji = a_ji @ vj
    d_a_ji = d_vji @ f.vj.T
    d_vj = d_vj + f.a_ji.T @ d_vji
    d_s_ji = _softmax_backward(f.a_ji, d_a_ji)
    d_qi = d_s_ji @ f.kj * f.scale
    d_kj = d_s_ji.T @ f.qi * f.scale
    # v_ij = a_ij @ vi
    d_a_ij = d_vij @ f.vi.T
    d_vi = d_vi + f.a_ij.T @ d_vij
    d_s_ij = _softmax_backward(f.a_ij, d_a_ij)
    d_qj = d_s_ij @ f.ki * f.scale
    d_ki = d_s_ij.T @ f.qj * f.scale
    # affine projections
    acc["w_k"] += f.li.T @ d_ki + f.lj.T @ d_kj
    acc["w_q"] += f.li.T @ d_qi + f.lj.T @ d_qj
    acc["w_v"] += f.li.T @ d_vi + f.lj.T @ d_vj
    acc["b_k"] += d_ki.sum(axis=0) + d_kj.sum(axis=0)
    acc["b_q"] += d_qi.sum(axis=0) + d_qj.sum(axis=0)
    acc["b_v"] += d_vi.sum(axis=0) + d_vj.sum(axis=0)
    d_li = d_ki @ heads.w_k.T + d_qi @ heads.w_q.T + d_vi @ heads.w_v.T
    d_lj = d_kj @ heads.w_k.T + d_qj @ heads.w_q.T + d_vj @ heads.w_v.T
    return d_li, d_lj


@dataclass
class LossValue:
    value: float
    per_pair_terms: np.ndarray | None = None


def _check_batch(labels: np.ndarray) -> None:
    n = len(labels)
    if n % 2 or n < 4:
        raise ContractError(f"batch must hold 2N >= 4 views, got {n}")
    _, counts = np.unique(labels, return_counts=True)
    if (counts < 2).any() or (counts % 2).any():
        raise ContractError("every label needs an even count >= 2 views in the batch")


def _contrastive_terms(sims: np.ndarray, labels: np.ndarray, tau: float, want_grad: bool):
    """Loss (and optionally d loss / d sims) of the shared contrastive form.

    ``sims`` is the full symmetric similarity matrix over the 2N views.
    Each anchor i is weighted by 1/(2 N_{y_i} - 1), where N_{y_i} counts
    original instances (half the view count) of label y_i; the denominator
    runs over all t != i. Computed via log-sum-exp.
    """
    if tau <= 0:
        raise ContractError("tau must be positive")
    labels = np.asarray(labels)
    _check_batch(labels)
    n = len(labels)
    logits = sims / tau
    np.fill_diagonal(logits, -np.inf)
    mx = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - mx)
    lse = mx[:, 0] + np.log(ex.sum(axis=1))
    pos = (labels[:, None] == labels[None, :]) & ~np.eye(n, dtype=bool)
    n_pos = pos.sum(axis=1)            # = 2 N_{y_i} - 1
    weights = 1.0 / n_pos
    ell = np.where(pos, lse[:, None] - logits, 0.0)
    loss = float((weights[:, None] * ell * pos).sum())
    grad = None
    if want_grad:
        softmax = ex / ex.sum(axis=1, keepdims=True)
        grad = (weights / tau)[:, None] * (n_pos[:, None] * softmax - pos)
    return loss, np.where(pos, ell, np.nan), grad


def _pair_sims(feats: np.ndarray, heads: ProjectionHeads, keep_caches: bool):
    n = feats.shape[0]
    sims = np.zeros((n, n))
    caches = {}
    for i in range(n):
        for j in range(i + 1, n):
            f = _sim_forward(feats[i], feats[j], heads)
            sims[i, j] = sims[j, i] = f.value
            if keep_caches:
                caches[(i, j)] = f
    return sims, caches


def alpa_loss(feats, labels, heads: ProjectionHeads, tau: float = DEFAULT_TAU,
              keep_pair_terms: bool = False) -> LossValue:
    """Contrastive loss over cross-attention-aligned local similarities.

    ``feats`` is (2N, HW, E) (or a sequence of FeatureMaps via
    :func:`batch_from_maps`).
    """
    feats = np.asarray(feats, dtype=np.float64)
    sims, _ = _pair_sims(feats, heads, keep_caches=False)
    loss, terms, _ = _contrastive_terms(sims, labels, tau, want_grad=False)
    return LossValue(loss, terms if keep_pair_terms else None)


def supcon_loss(feats, labels, head_h: np.ndarray, tau: float = DEFAULT_TAU,
                keep_pair_terms: bool = False) -> LossValue:
    """Supervised contrastive baseline on pooled global vectors.

    Globals are position means of ``feats`` (2N, HW, E), projected by the
    (E, e) matrix ``head_h``; similarity is cosine.
    """
    feats = np.asarray(feats, dtype=np.float64)
    head_h = np.asarray(head_h, dtype=np.float64)
    proj = feats.mean(axis=1) @ head_h
    unit, _ = _normalize_rows(proj, "projected globals")
    sims = unit @ unit.T
    loss, terms, _ = _contrastive_terms(sims, labels, tau, want_grad=False)
    return LossValue(loss, terms if keep_pair_terms else None)


def combined_loss(mode: str, base: LossValue | None, alpa: LossValue, lam: float) -> float:
    """finetune -> L_alpa; train -> L_base + lam * L_alpa."""
    alpa_v = alpa.value if isinstance(alpa, LossValue) else float(alpa)
    if mode == "finetune":
        return alpa_v
    if mode == "train":
        if base is None:
            raise ContractError("train mode needs a base loss")
        base_v = base.value if isinstance(base, LossValue) else float(base)
        if lam < 0:
            raise ContractError("lam must be non-negative")
        return base_v + lam * alpa_v
    raise ContractError(f"unknown mode {mode!r}")


def batch_from_maps(maps) -> tuple[np.ndarray, np.ndarray]:
    """Stack FeatureMaps into ((2N, HW, E) feats, labels)."""
    feats = np.stack([m.positions() for m in maps])
    labels = np.array([m.label for m in maps], dtype=np.int64)
    return feats, labels


def _zero_head_grads(heads: ProjectionHeads) -> dict:
    return {
        "w_k": np.zeros_like(heads.w_k), "w_q": np.zeros_like(heads.w_q),
        "w_v": np.zeros_like(heads.w_v), "b_k": np.zeros_like(heads.b_k),
        "b_q": np.zeros_like(heads.b_q), "b_v": np.zeros_like(heads.b_v),
    }


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise GradientError(f"non-finite values in gradient tensor {name!r}")


def alpa_loss_and_grads(feats: np.ndarray, labels, heads: ProjectionHeads, tau: float):
    """Loss plus exact gradients w.r.t. head params and the input grids.

    Returns (loss, head_grads dict, d_feats of shape (2N, HW, E)).
    """
    feats = np.asarray(feats, dtype=np.float64)
    sims, caches = _pair_sims(feats, heads, keep_caches=True)
    loss, _, g_sims = _contrastive_terms(sims, labels, tau, want_grad=True)
    acc = _zero_head_grads(heads)
    d_feats = np.zeros_like(feats)
    n = feats.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            coeff = g_sims[i, j] + g_sims[j, i]
            if coeff == 0.0:
                continue
            d_li, d_lj = _sim_backward(caches[(i, j)], coeff, heads, acc)
            d_feats[i] += d_li
            d_feats[j] += d_lj
    for name, arr in acc.items():
        _check_finite(name, arr)
    _check_finite("d_feats", d_feats)
    if not np.isfinite(loss):
        raise GradientError("loss is non-finite")
    return loss, acc, d_feats


def supcon_loss_and_grads(feats: np.ndarray, labels, head_h: np.ndarray, tau: float):
    """Baseline loss plus gradient w.r.t. the input grids (head_h fixed)."""
    feats = np.asarray(feats, dtype=np.float64)
    head_h = np.asarray(head_h, dtype=np.float64)
    globals_ = feats.mean(axis=1)
    proj = globals_ @ head_h
    unit, norms = _normalize_rows(proj, "projected globals")
    sims = unit @ unit.T
    loss, _, g_sims = _contrastive_terms(sims, labels, tau, want_grad=True)
    # s_ij = u_i . u_j; ds/du_i = u_j. Through normalization of proj rows.
    g_unit = (g_sims + g_sims.T) @ unit
    # remove the diagonal's contribution: s_ii gradient is masked out already
    # (g_sims diagonal is zero by construction of pos/softmax masks)
    d_proj = (g_unit - (g_unit * unit).sum(axis=1, keepdims=True) * unit) / norms[:, None]
    d_global = d_proj @ head_h.T
    hw = feats.shape[1]
    d_feats = np.repeat(d_global[:, None, :] / hw, hw, axis=1)
    _check_finite("d_feats", d_feats)
    if not np.isfinite(loss):
        raise GradientError("loss is non-finite")
    return loss, d_feats
