"""Bias/variance/CA-MSE analysis of accelerated gradients at a checkpoint.

Per-sample losses are made separable by freezing the key/teacher side as a
bank computed over the whole analysis sample set: sample i's loss depends
only on its own query path (plus, for simclr, its own key path) and the
frozen bank. This makes the estimator laws exact:

* the mean of per-sample gradients equals the full-batch gradient of the
  mean loss (linearity);
* sub-batch mean gradients are grouped means of the same per-sample
  gradients, so K * Var(sub-batch means) is a consistent estimator of the
  per-sample variance, and reduces to the population variance at K = 1.

Variances are population-style (ddof=0) and summed over coordinates, so
the empirical MSE decomposes exactly into bias^2 + variance. All reported
scores are normalized by ||G||^2, the squared norm of the reference
(uncompressed) gradient.

The analysis covers the query/key pair path; dino's extra small crops are
excluded from analysis gradients (they only enter cost accounting).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import graph as g
from . import objectives, vit
from .compression import (CompressionStrategy, identity_strategy, apply_strategy,
                          stack_views, parse_strategy)
from .costmodel import sample_cost
from .data import make_views
from .rngs import stream

STAGE_PCTS = (0, 25, 50, 75, 100)
DROPOUT_GRID = (0.0, 0.25, 0.5, 0.75, 0.9)


@dataclass
class AnalyzerContext:
    """Frozen model state plus the loss configuration under analysis."""
    algorithm: str
    cfg: vit.ViTConfig
    params: dict
    key_params: dict
    center: Optional[np.ndarray] = None
    tau: float = objectives.TAU_INFONCE
    tau_s: float = objectives.TAU_STUDENT
    tau_t: float = objectives.TAU_TEACHER
    seed: int = 0
    dtype: type = np.float32

    @property
    def param_names(self):
        return list(self.params)


@dataclass
class GradStats:
    """Moments of the accelerated gradient for one (checkpoint, strategy)."""
    mean_grad: np.ndarray
    var: float          # sum over coordinates of per-sample variances
    bias_sq: float      # ||G - mean_grad||^2
    ref_norm_sq: float
    n_samples: int
    subbatch: int


def flatten_grads(grads, names):
    return np.concatenate([np.asarray(grads[n], dtype=np.float64).ravel()
                           for n in names])


def analysis_pairs(dataset, n_samples, seed, aug_cfg=None):
    """Materialize a fixed set of augmented (x_q, x_k) pairs.

    The same pairs are reused by every strategy evaluation at a
    checkpoint, so compression-induced error is isolated from
    augmentation noise (common random numbers).
    """
    if n_samples > len(dataset):
        raise ValueError("analysis sample count exceeds dataset size")
    idx = stream(seed, "analysis", "subset").choice(len(dataset), size=n_samples,
                                                    replace=False)
    return [make_views(dataset.images[i], stream(seed, "analysis", "aug", int(i)).integers(2**62), aug_cfg)
            for i in np.sort(idx)]


def _views_for(ctx: AnalyzerContext, strategy, pairs, tag):
    """Per-sample compressed views; fresh dropout masks per sample."""
    qv, kv = [], []
    for i, pair in enumerate(pairs):
        rq = stream(ctx.seed, "mask", tag, strategy.literal(), i, "q")
        rk = stream(ctx.seed, "mask", tag, strategy.literal(), i, "k")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            q, k = apply_strategy(pair.x_q, pair.x_k, strategy, ctx.algorithm,
                                  ctx.cfg.patch, rq, rk)
        qv.append(q)
        kv.append(k)
    return qv, kv


def _key_bank(ctx: AnalyzerContext, k_views):
    """Encoded (and for contrastive losses, normalized) frozen key bank."""
    out = []
    key_params = ctx.key_params if ctx.algorithm in ("moco", "dino") else ctx.params
    for start in range(0, len(k_views), 64):
        batch = stack_views(k_views[start:start + 64], dtype=ctx.dtype)
        out.append(vit.encode(key_params, batch, ctx.cfg, head="proj"))
    return np.concatenate(out, axis=0)


def _subbatch_grads(ctx: AnalyzerContext, q_views, bank, chunk_index):
    """Gradient of the mean per-sample loss over one sub-batch."""
    names = ctx.param_names
    pget = vit.leaf_param_getter(ctx.params)
    batch = stack_views(q_views, dtype=ctx.dtype)
    n_bank = bank.shape[0]
    if ctx.algorithm in ("moco", "simclr"):
        head = "pred" if ctx.algorithm == "moco" else "proj"
        z_q = vit.encode_graph(pget, batch, ctx.cfg, head=head)
        bank_n = bank / np.linalg.norm(bank, axis=1, keepdims=True)
        logits = g.matmul(objectives.l2_normalize(z_q),
                          g.constant(np.ascontiguousarray(bank_n.T))) * (1.0 / ctx.tau)
        m = len(q_views)
        picks = np.arange(m) * n_bank + np.asarray(chunk_index, dtype=np.intp)
        flat = g.reshape(logits, (m * n_bank, 1))
        positives = g.reshape(g.index_rows(flat, picks), (m,))
        loss = g.reduce_mean(objectives.logsumexp_rows(logits) - positives)
    elif ctx.algorithm == "dino":
        z_q = vit.encode_graph(pget, batch, ctx.cfg, head="proj")
        center = ctx.center if ctx.center is not None else np.zeros(ctx.cfg.rep_dim)
        p_t = objectives.teacher_probs(bank[chunk_index], center, ctx.tau_t)
        s_logits = z_q * (1.0 / ctx.tau_s)
        log_p = s_logits - objectives.logsumexp_rows(s_logits, keepdims=True)
        loss = g.reduce_mean(-g.reduce_sum(g.constant(p_t.astype(ctx.dtype)) * log_p,
                                           axis=-1))
    else:
        raise ValueError(f"unknown algorithm '{ctx.algorithm}'")
    _, grads = g.value_and_grad(loss, dict(ctx.params), names)
    return flatten_grads(grads, names)


def per_sample_gradients(ctx: AnalyzerContext, strategy, pairs, tag="stats"):
    """One flattened gradient per sample (the K=1 oracle path)."""
    q_views, k_views = _views_for(ctx, strategy, pairs, tag)
    bank = _key_bank(ctx, k_views)
    return np.stack([
        _subbatch_grads(ctx, [q_views[i]], bank, np.array([i]))
        for i in range(len(pairs))
    ])


def reference_gradient(ctx: AnalyzerContext, pairs, chunk=32):
    """G: mean per-sample uncompressed gradient over the sample set."""
    if not pairs:
        raise ValueError("empty sample set")
    ident = identity_strategy(ctx.cfg.patch)
    q_views, k_views = _views_for(ctx, ident, pairs, "ref")
    bank = _key_bank(ctx, k_views)
    n = len(pairs)
    total = None
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        gsub = _subbatch_grads(ctx, [q_views[i] for i in idx], bank, idx)
        gsub *= len(idx) / n
        total = gsub if total is None else total + gsub
    return total


def strategy_stats(ctx: AnalyzerContext, strategy, pairs, subbatch,
                   ref_grad, tag="stats", n_partitions=1):
    """GradStats for one strategy: sub-batch estimation of mean/variance.

    The sample count must be divisible by the sub-batch size K; the
    per-sample variance is estimated as K * Var(sub-batch means), summed
    over coordinates (ddof=0), with the finite-population factor
    (n-1)/(n-K) so a random partition gives an unbiased estimate. The
    factor is 1 at K=1, where the estimate is exactly the per-sample
    population variance. Chunk assignment is randomized (sequential
    chunks would correlate with dataset class order); ``n_partitions``
    averages over several partitions to shrink partition noise.
    """
    n = len(pairs)
    if subbatch < 1 or subbatch > n:
        raise ValueError("sub-batch size outside [1, n]")
    if n % subbatch != 0:
        raise ValueError("sample count must be divisible by the sub-batch size")
    q_views, k_views = _views_for(ctx, strategy, pairs, tag)
    bank = _key_bank(ctx, k_views)
    fpc = (n - 1) / (n - subbatch) if subbatch < n else 1.0
    reps = 1 if subbatch == 1 else n_partitions
    var_sum = 0.0
    mean_grad = None
    for rep in range(reps):
        if subbatch > 1:
            order = stream(ctx.seed, "chunks", tag, strategy.literal(),
                           rep).permutation(n)
        else:
            order = np.arange(n)
        means = []
        for start in range(0, n, subbatch):
            idx = order[start:start + subbatch]
            means.append(_subbatch_grads(ctx, [q_views[i] for i in idx], bank, idx))
        means = np.stack(means)
        if mean_grad is None:
            mean_grad = means.mean(axis=0)  # partition-invariant
        centered = means - mean_grad
        var_sum += subbatch * fpc * float(np.mean(np.sum(centered * centered, axis=1)))
    var = var_sum / reps
    diff = ref_grad - mean_grad
    bias_sq = float(np.dot(diff, diff))
    ref_norm_sq = float(np.dot(ref_grad, ref_grad))
    return GradStats(mean_grad, var, bias_sq, ref_norm_sq, n, subbatch)


def ca_mse(stats: GradStats, cost_c, budget_const):
    """(bias^2 + (cost/budget) * var) / ||G||^2."""
    if budget_const <= 0:
        raise ValueError("budget_const must be positive")
    return (stats.bias_sq + (cost_c / budget_const) * stats.var) / stats.ref_norm_sq


# ---------------------------------------------------------------------
# the sweep table
# ---------------------------------------------------------------------

@dataclass
class SweepRow:
    stage_pct: int
    strategy: CompressionStrategy
    cost: float
    bias_sq: float              # normalized by ||G||^2
    ca_var: float               # (cost/budget) * var / ||G||^2
    ca_mse: float
    var: Optional[float] = None  # normalized, pre-adjustment; None if loaded


@dataclass
class SweepTable:
    rows: list = field(default_factory=list)
    budget_const: float = 1.0

    def stages(self):
        return sorted({r.stage_pct for r in self.rows})

    def at_stage(self, stage_pct):
        return [r for r in self.rows if r.stage_pct == stage_pct]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage_pct", "q_patch", "k_patch", "dq_keep", "dk_keep",
                        "cost", "bias_sq", "ca_var", "ca_mse"])
            for r in self.rows:
                s = r.strategy
                w.writerow([r.stage_pct, s.q_patch, s.k_patch,
                            "full" if s.q_keep is None else s.q_keep,
                            "full" if s.k_keep is None else s.k_keep,
                            f"{r.cost:.10g}", f"{r.bias_sq:.10g}",
                            f"{r.ca_var:.10g}", f"{r.ca_mse:.10g}"])

    @classmethod
    def read_csv(cls, path, budget_const=1.0):
        table = cls(budget_const=budget_const)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[:2] != ["stage_pct", "q_patch"]:
                raise ValueError(f"{path}: not a sweep CSV (bad header)")
            for lineno, rec in enumerate(reader, start=2):
                try:
                    strat = CompressionStrategy(
                        int(rec[1]), int(rec[2]),
                        None if rec[3] == "full" else int(rec[3]),
                        None if rec[4] == "full" else int(rec[4]))
                    table.rows.append(SweepRow(
                        int(rec[0]), strat, float(rec[5]), float(rec[6]),
                        float(rec[7]), float(rec[8])))
                except (ValueError, IndexError) as exc:
                    raise ValueError(f"{path}: malformed sweep row at line {lineno}") from exc
        return table

    def matrix(self, stage_pct, metric, patch_grid, keep_grid):
        """Heatmap matrix (rows = keep settings, cols = patch sizes)."""
        out = np.full((len(keep_grid), len(patch_grid)), np.nan)
        for r in self.at_stage(stage_pct):
            s = r.strategy
            if s.q_patch in patch_grid and s.q_keep in keep_grid:
                out[keep_grid.index(s.q_keep), patch_grid.index(s.q_patch)] = \
                    getattr(r, metric)
        return out


def desk_strategy_grid(side, base_patch, patch_sizes=None, keep_fracs=None):
    """The default (patch size x keep fraction) grid, symmetric patches,
    dropout on the query side only."""
    patch_sizes = patch_sizes or [base_patch, int(base_patch * 1.5), base_patch * 2]
    keep_fracs = keep_fracs if keep_fracs is not None else [1.0, 0.75, 0.5, 0.25, 0.1]
    grid = []
    for q in patch_sizes:
        tokens = (side // q) * (side // q)
        for frac in keep_fracs:
            keep = None if frac >= 1.0 else max(1, int(frac * tokens))
            grid.append(CompressionStrategy(q, q, keep, None))
    return grid


def sweep(ctx_by_stage, strategy_grid, pairs, subbatch, budget_const,
          algorithm_cost_kwargs=None):
    """Full (stage x strategy) sweep.

    ``ctx_by_stage`` maps stage_pct -> AnalyzerContext (a missing stage is
    skipped with a warning). Returns a SweepTable with normalized scores.
    """
    from .compression import realized_lengths

    table = SweepTable(budget_const=budget_const)
    cost_kwargs = algorithm_cost_kwargs or {}
    for stage in sorted(ctx_by_stage):
        ctx = ctx_by_stage[stage]
        if ctx is None:
            warnings.warn(f"no checkpoint for stage {stage}%; skipped")
            continue
        ref = reference_gradient(ctx, pairs)
        side = ctx.cfg.image_side
        for strategy in strategy_grid:
            stats = strategy_stats(ctx, strategy, pairs, subbatch, ref,
                                   tag=f"stage{stage}")
            l_q, l_k = realized_lengths(strategy, ctx.algorithm, side)
            cost = sample_cost(ctx.algorithm, l_q, l_k, **cost_kwargs)
            var_n = stats.var / stats.ref_norm_sq
            ca_var = (cost / budget_const) * var_n
            table.rows.append(SweepRow(
                stage, strategy, cost,
                stats.bias_sq / stats.ref_norm_sq,
                ca_var, stats.bias_sq / stats.ref_norm_sq + ca_var, var_n))
    return table
