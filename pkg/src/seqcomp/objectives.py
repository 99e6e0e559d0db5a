"""Augmentation-invariance losses and per-algorithm step assembly.

Two loss families:

* ``info_nce``: in-batch-negative contrastive loss on cosine similarities
  (moco, simclr);
* ``distillation_loss``: cross-entropy between tempered softmax outputs,
  with the teacher side detached (dino).

``build_loss`` wires encoders and losses per algorithm: moco uses a
momentum key encoder and a non-symmetric loss (each pair used once) with a
prediction head on the query side; simclr shares one encoder across both
views with gradients flowing through both; dino distills a momentum
teacher into the student over the key/query pair plus K small crops.

Teacher centering for dino (EMA of batch-mean teacher logits) is an
anti-collapse extension, enabled by default and removable via
``center=None`` semantics in the trainer.
"""

from __future__ import annotations

import numpy as np

from . import graph as g
from . import vit

TAU_INFONCE = 0.2
TAU_STUDENT = 0.1
TAU_TEACHER = 0.04
CENTER_RATE = 0.9


def l2_normalize(x):
    n = g.sqrt(g.reduce_sum(x * x, axis=-1, keepdims=True))
    return x / n


def logsumexp_rows(x, keepdims=False):
    """Numerically stable log-sum-exp over the last axis."""
    m = g.reduce_max(x, axis=-1, keepdims=True)
    s = g.reduce_sum(g.exp(x - m), axis=-1, keepdims=True)
    out = m + g.log(s)
    if keepdims:
        return out
    return g.reshape(out, out.shape[:-1])


def info_nce(z_q, z_k, tau=TAU_INFONCE):
    """Mean InfoNCE over the batch; positives are matching rows, negatives
    the other keys in the batch. Gradient flow is structural: pass a
    constant/detached ``z_k`` for momentum algorithms."""
    z_q, z_k = g.as_node(z_q), g.as_node(z_k)
    if len(z_q.shape) != 2 or z_q.shape != z_k.shape:
        raise ValueError("expected matching (B, n) representation batches")
    bsz = z_q.shape[0]
    if bsz < 2:
        raise ValueError("info_nce needs at least one in-batch negative (B >= 2)")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    sims = g.matmul(l2_normalize(z_q), g.transpose(l2_normalize(z_k), (1, 0)))
    logits = sims * (1.0 / tau)
    diag = g.reshape(logits, (bsz * bsz,))[slice(0, bsz * bsz, bsz + 1),]
    return g.reduce_mean(logsumexp_rows(logits) - diag)


def teacher_probs(z_k, center, tau_t=TAU_TEACHER):
    """Detached tempered softmax of (teacher logits - center)."""
    z = np.asarray(z_k, dtype=np.float64)
    t = (z - center) / tau_t
    t -= t.max(axis=-1, keepdims=True)
    e = np.exp(t)
    return e / e.sum(axis=-1, keepdims=True)


def distillation_loss(z_q, z_k, tau_s=TAU_STUDENT, tau_t=TAU_TEACHER, center=None):
    """Cross-entropy from tempered teacher output to student output.

    The teacher side is detached in-graph, so its gradient is exactly
    zero even when ``z_k`` is a differentiable node.
    """
    if tau_s <= 0 or tau_t <= 0:
        raise ValueError("temperatures must be positive")
    z_q, z_k = g.as_node(z_q), g.as_node(z_k)
    if center is None:
        center = np.zeros(z_k.shape[-1], dtype=np.float32)
    t_logits = (g.stop_gradient(z_k) - g.constant(np.asarray(center))) * (1.0 / tau_t)
    p_k = g.softmax(t_logits)
    s_logits = z_q * (1.0 / tau_s)
    log_p_q = s_logits - logsumexp_rows(s_logits, keepdims=True)
    return g.reduce_mean(-g.reduce_sum(p_k * log_p_q, axis=-1))


def update_center(center, teacher_out, rate=CENTER_RATE):
    """EMA of the batch-mean teacher output; applied after the step."""
    return rate * np.asarray(center) + (1.0 - rate) * np.asarray(teacher_out).mean(axis=0)


def build_loss(algorithm, cfg, params, key_params, q_views, k_views,
               small_views=(), center=None,
               tau=TAU_INFONCE, tau_s=TAU_STUDENT, tau_t=TAU_TEACHER):
    """Assemble one training step's loss graph.

    Returns (loss root, leaf env, teacher outputs or None). ``q_views`` /
    ``k_views`` are stacked ``BatchViews``; ``key_params`` provides the
    momentum encoder for moco/dino and is ignored for simclr.
    """
    pget = vit.leaf_param_getter(params)
    env = dict(params)
    if algorithm == "moco":
        z_q = vit.encode_graph(pget, q_views, cfg, head="pred")
        z_k = vit.encode(key_params, k_views, cfg, head="proj")
        return info_nce(z_q, g.constant(z_k), tau), env, z_k
    if algorithm == "simclr":
        z1 = vit.encode_graph(pget, q_views, cfg, head="proj")
        z2 = vit.encode_graph(pget, k_views, cfg, head="proj")
        loss = (info_nce(z1, z2, tau) + info_nce(z2, z1, tau)) * 0.5
        return loss, env, None
    if algorithm == "dino":
        z_t = vit.encode(key_params, k_views, cfg, head="proj")
        if center is None:
            center = np.zeros(cfg.rep_dim)
        p_t = g.constant(teacher_probs(z_t, center, tau_t).astype(z_t.dtype))
        student_views = [q_views, *small_views]
        terms = []
        for views in student_views:
            z_s = vit.encode_graph(pget, views, cfg, head="proj")
            s_logits = z_s * (1.0 / tau_s)
            log_p_q = s_logits - logsumexp_rows(s_logits, keepdims=True)
            terms.append(g.reduce_mean(-g.reduce_sum(p_t * log_p_q, axis=-1)))
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        if len(terms) > 1:
            loss = loss * (1.0 / len(terms))
        return loss, env, z_t
    raise ValueError(f"unknown algorithm '{algorithm}'")
