"""Teacher/student distributions, distillation and diversity losses, EMA.

The teacher scores global-view projections against the shared prototypes
and balances the resulting assignment across the batch with Sinkhorn-Knopp
normalization; the student matches it from augmented local views through a
temperature softmax. A diversity term pushes apart the closest embeddings
in the batch. The teacher path is a constant to the optimizer: gradients
exist only for student parameters and the prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .multicrop import CropSet
from .nn import Network, Param, l2_normalize_backward, l2_normalize_rows, zero_grads

CE_PROB_FLOOR = 1e-12
DR_DISTANCE_FLOOR = 1e-4


@dataclass
class Temperatures:
    tau_t: float = 0.04
    tau_s: float = 0.1

    def __post_init__(self):
        if self.tau_t <= 0 or self.tau_s <= 0:
            raise ValueError("temperatures must be positive")
        if self.tau_t > self.tau_s:
            raise ValueError("teacher temperature must not exceed the student's")


@dataclass
class SinkhornConfig:
    n_iters: int = 3
    eps: float = 1e-12

    def __post_init__(self):
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")


@dataclass
class LossBreakdown:
    l_ce: float
    l_dr: float
    mu: float
    total: float


def init_prototypes(n_prototypes: int, dim: int, rng, dtype=np.float32) -> Param:
    """Unit-norm rows; excluded from weight decay, re-normalized after updates."""
    c = rng.standard_normal((n_prototypes, dim))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    return Param("prototypes", c.astype(dtype), decay=False, unit_rows=True)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def teacher_distribution(
    projections: np.ndarray, prototypes: np.ndarray, tau_t: float, sk: SinkhornConfig
) -> np.ndarray:
    """Sinkhorn-balanced assignment of each row to the prototypes.

    Start from exp of the row-max-shifted scaled logits, then alternate
    column scaling (each prototype gets mass 1/K) and row scaling (each
    sample gets mass 1/B); a final factor of B makes every row a probability
    distribution. Computed value-only: nothing here enters the gradient set.
    """
    z = projections @ prototypes.T / tau_t
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite teacher logits")
    b, k = z.shape
    q = np.exp(z - z.max(axis=1, keepdims=True))
    for _ in range(sk.n_iters):
        q /= np.maximum(q.sum(axis=0, keepdims=True) * k, sk.eps)
        q /= np.maximum(q.sum(axis=1, keepdims=True) * b, sk.eps)
    return q * b


def student_distribution(
    projections: np.ndarray, prototypes: np.ndarray, tau_s: float
) -> np.ndarray:
    """Row-wise softmax over scaled prototype scores."""
    z = projections @ prototypes.T / tau_s
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite student logits")
    return softmax_rows(z)


def cross_entropy_loss(p_tea: np.ndarray, p_stu_views: np.ndarray) -> float:
    """Mean over utterances and (global, local) pairs of -sum p_tea * log p_stu.

    p_tea: (B, K); p_stu_views: (V, B, K) with row b of every view aligned
    to teacher row b.
    """
    p_stu_views = np.asarray(p_stu_views)
    if p_stu_views.ndim == 2:
        p_stu_views = p_stu_views[None]
    if p_stu_views.shape[1:] != p_tea.shape:
        raise ValueError(
            f"misaligned distributions: teacher {p_tea.shape}, student views {p_stu_views.shape}"
        )
    logs = np.log(np.maximum(p_stu_views, CE_PROB_FLOOR))
    return float(-(p_tea[None] * logs).sum(axis=2).mean())


@dataclass
class _DiversityCache:
    x: np.ndarray
    x_hat: np.ndarray
    norms: np.ndarray
    nearest: np.ndarray
    distances: np.ndarray
    floor: float
    scale: float


def _diversity_forward(
    x: np.ndarray, floor: float, literal_scale: bool
) -> tuple[float, _DiversityCache]:
    n = x.shape[0]
    if n < 2:
        raise ValueError("diversity regularizer needs at least 2 embeddings")
    x_hat, norms = l2_normalize_rows(x)
    diff = x_hat[:, None, :] - x_hat[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    nearest = dist.argmin(axis=1)  # ties: first index wins
    d_min = dist[np.arange(n), nearest]
    clamped = np.maximum(d_min, floor)
    scale = float(n) if literal_scale else 1.0
    value = float(-scale * np.mean(np.log(clamped)))
    return value, _DiversityCache(x, x_hat, norms, nearest, d_min, floor, scale)


def _diversity_backward(cache: _DiversityCache, upstream: float) -> np.ndarray:
    n = cache.x.shape[0]
    g_hat = np.zeros_like(cache.x_hat)
    coeff = -upstream * cache.scale / n
    for i in range(n):
        d = cache.distances[i]
        if d <= cache.floor:
            continue  # clamped: flat region
        j = cache.nearest[i]
        g = (coeff / (d * d)) * (cache.x_hat[i] - cache.x_hat[j])
        g_hat[i] += g
        g_hat[j] -= g
    return l2_normalize_backward(g_hat, cache.x, cache.norms)


def diversity_loss(
    embeddings: np.ndarray, floor: float = DR_DISTANCE_FLOOR, literal_scale: bool = False
) -> float:
    """-mean_i log(max(min_{j != i} ||x_i - x_j||, floor)) on row-normalized x.

    literal_scale multiplies by n (an inner sum over a j-independent term),
    which only rescales the regularizer.
    """
    value, _ = _diversity_forward(np.asarray(embeddings, dtype=np.float64), floor, literal_scale)
    return value


def total_loss(l_ce: float, l_dr: float, mu: float) -> LossBreakdown:
    for name, v in (("l_ce", l_ce), ("l_dr", l_dr), ("mu", mu)):
        if not np.isfinite(v):
            raise ValueError(f"non-finite {name}: {v}")
    return LossBreakdown(l_ce=l_ce, l_dr=l_dr, mu=mu, total=l_ce + mu * l_dr)


def ema_update(teacher: Network, student: Network, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, in place; BN stats copied."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {m}")
    for t, s in zip(teacher.params(), student.params(), strict=True):
        if t.value.shape != s.value.shape:
            raise ValueError(f"shape mismatch for {t.name}")
        t.value *= m
        t.value += (1.0 - m) * s.value
    teacher.load_state(student.state())


@dataclass
class StepGraph:
    """Everything backward() needs after one sdpn_step_forward call."""

    student: Network
    prototypes: Param
    tau_s: float
    mu: float
    n_utts: int
    n_views: int
    s_emb: np.ndarray
    s_emb_norms: np.ndarray
    s_proj: np.ndarray
    p_stu: np.ndarray
    p_tea: np.ndarray
    dr_cache: _DiversityCache


def _stack_views(crops: list[CropSet]) -> tuple[np.ndarray, np.ndarray, int]:
    """Feature matrices to (B, frames, mels) arrays; locals utterance-major."""
    n_views = len(crops[0].local_views)
    for c in crops:
        if len(c.local_views) != n_views:
            raise ValueError("all crop sets must have the same number of local views")
    g = np.stack([c.global_view for c in crops])
    l = np.stack([v for c in crops for v in c.local_views])
    return g, l, n_views


def _student_objective(
    local_feats: np.ndarray,
    n_utts: int,
    n_views: int,
    student: Network,
    prototypes: Param,
    p_tea: np.ndarray,
    tau_s: float,
    mu: float,
    dr_floor: float,
    dr_literal: bool,
) -> tuple[LossBreakdown, StepGraph]:
    s_emb = student.encoder_forward(local_feats, train=True)
    s_proj = student.head_forward(s_emb, train=True)
    z = s_proj @ prototypes.value.T / tau_s
    p_stu = softmax_rows(z)

    p_tea_rep = np.repeat(p_tea, n_views, axis=0)
    logs = np.log(np.maximum(p_stu, CE_PROB_FLOOR))
    l_ce = float(-(p_tea_rep * logs).sum(axis=1).mean())

    u, u_norms = l2_normalize_rows(s_emb)
    x_means = u.reshape(n_utts, n_views, -1).mean(axis=1)
    l_dr, dr_cache = _diversity_forward(x_means, dr_floor, dr_literal)

    breakdown = total_loss(l_ce, l_dr, mu)
    graph = StepGraph(
        student=student,
        prototypes=prototypes,
        tau_s=tau_s,
        mu=mu,
        n_utts=n_utts,
        n_views=n_views,
        s_emb=s_emb,
        s_emb_norms=u_norms,
        s_proj=s_proj,
        p_stu=p_stu,
        p_tea=p_tea,
        dr_cache=dr_cache,
    )
    return breakdown, graph


def sdpn_step_forward(
    crops: list[CropSet],
    student: Network,
    teacher: Network,
    prototypes: Param,
    temps: Temperatures,
    sk: SinkhornConfig,
    mu: float,
    dr_floor: float = DR_DISTANCE_FLOOR,
    dr_literal: bool = False,
) -> tuple[LossBreakdown, StepGraph]:
    """One training forward pass over a batch of crop sets.

    Globals run through the teacher to Sinkhorn-normalized assignments (a
    constant for gradients); locals run through the student. The diversity
    term sees the per-utterance mean of the normalized student encoder
    embeddings of the local views.
    """
    if len(crops) < 2:
        raise ValueError("batch must contain at least 2 utterances")
    g_feats, l_feats, n_views = _stack_views(crops)
    t_emb = teacher.encoder_forward(g_feats, train=True)
    t_proj = teacher.head_forward(t_emb, train=True)
    p_tea = teacher_distribution(t_proj, prototypes.value, temps.tau_t, sk)
    return _student_objective(
        l_feats,
        len(crops),
        n_views,
        student,
        prototypes,
        p_tea,
        temps.tau_s,
        mu,
        dr_floor,
        dr_literal,
    )


def backward(graph: StepGraph, upstream: float = 1.0) -> dict[str, np.ndarray]:
    """Gradients of the total loss for every student parameter + prototypes.

    Teacher parameters have no entries: the teacher distribution entered the
    forward pass as a constant.
    """
    student = graph.student
    params = student.params() + [graph.prototypes]
    zero_grads(params)

    # distillation term through softmax(s_proj @ C.T / tau_s)
    n_rows = graph.p_stu.shape[0]
    p_tea_rep = np.repeat(graph.p_tea, graph.n_views, axis=0)
    active = graph.p_stu > CE_PROB_FLOOR
    g_p = np.where(
        active, -p_tea_rep / np.maximum(graph.p_stu, CE_PROB_FLOOR), 0.0
    ) * (upstream / n_rows)
    g_z = graph.p_stu * (g_p - (g_p * graph.p_stu).sum(axis=1, keepdims=True))
    g_proj = g_z @ graph.prototypes.value / graph.tau_s
    graph.prototypes.grad += g_z.T @ graph.s_proj / graph.tau_s
    g_emb = student.head_backward(g_proj)

    # diversity term through mean of normalized view embeddings
    g_means = _diversity_backward(graph.dr_cache, upstream * graph.mu)
    g_u = np.repeat(g_means / graph.n_views, graph.n_views, axis=0)
    g_emb += l2_normalize_backward(g_u, graph.s_emb, graph.s_emb_norms)

    student.encoder_backward(g_emb)
    return {p.name: p.grad for p in params}
