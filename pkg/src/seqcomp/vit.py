"""Vision Transformer encoder with flexible patch-size embedding.

The encoder is expressed as a graph (``seqcomp.graph``) so that losses
differentiate end to end, including through the patch-scaling path: when
tokens come from a coarser grid (patch q > base p), the embedding weights
are mapped through a fixed least-squares projection and the positional
table is bilinearly resampled, both as linear operators inside the graph.
Gradients therefore always land in the base parameter space regardless of
the compression applied to the input sequence.

Patch vectors are flattened channel-major (C, p, p) -> C*p*p so the
resize operator is block-diagonal over channels.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from . import graph as g


@dataclass(frozen=True)
class ViTConfig:
    image_side: int = 64
    channels: int = 1
    patch: int = 8
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    rep_dim: int = 64
    proj_hidden: int = 256
    pred_hidden: int = 256
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.image_side % self.patch != 0:
            raise ValueError("image_side must be divisible by the base patch")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")

    @property
    def grid(self):
        return self.image_side // self.patch

    @property
    def seq_len(self):
        return self.grid * self.grid + 1

    @property
    def patch_dim(self):
        return self.patch * self.patch * self.channels


def init_params(cfg: ViTConfig, rng, dtype=np.float32):
    """Fresh parameter dict; insertion order fixes the flattening order."""
    d = cfg.embed_dim

    def normal(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(dtype)

    p = {
        "patch_embed.w": normal(cfg.patch_dim, d),
        "patch_embed.b": np.zeros(d, dtype=dtype),
        "pos_embed": normal(cfg.grid * cfg.grid + 1, d),
        "cls_token": normal(d),
    }
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        p[pre + "ln1.g"] = np.ones(d, dtype=dtype)
        p[pre + "ln1.b"] = np.zeros(d, dtype=dtype)
        p[pre + "attn.qkv.w"] = normal(d, 3 * d)
        p[pre + "attn.qkv.b"] = np.zeros(3 * d, dtype=dtype)
        p[pre + "attn.out.w"] = normal(d, d)
        p[pre + "attn.out.b"] = np.zeros(d, dtype=dtype)
        p[pre + "ln2.g"] = np.ones(d, dtype=dtype)
        p[pre + "ln2.b"] = np.zeros(d, dtype=dtype)
        p[pre + "mlp.fc1.w"] = normal(d, cfg.mlp_ratio * d)
        p[pre + "mlp.fc1.b"] = np.zeros(cfg.mlp_ratio * d, dtype=dtype)
        p[pre + "mlp.fc2.w"] = normal(cfg.mlp_ratio * d, d)
        p[pre + "mlp.fc2.b"] = np.zeros(d, dtype=dtype)
    p["norm.g"] = np.ones(d, dtype=dtype)
    p["norm.b"] = np.zeros(d, dtype=dtype)
    p["proj.fc1.w"] = normal(d, cfg.proj_hidden)
    p["proj.fc1.b"] = np.zeros(cfg.proj_hidden, dtype=dtype)
    p["proj.fc2.w"] = normal(cfg.proj_hidden, cfg.rep_dim)
    p["proj.fc2.b"] = np.zeros(cfg.rep_dim, dtype=dtype)
    p["pred.fc1.w"] = normal(cfg.rep_dim, cfg.pred_hidden)
    p["pred.fc1.b"] = np.zeros(cfg.pred_hidden, dtype=dtype)
    p["pred.fc2.w"] = normal(cfg.pred_hidden, cfg.rep_dim)
    p["pred.fc2.b"] = np.zeros(cfg.rep_dim, dtype=dtype)
    return p


def ema_update(key_params, query_params, m):
    """theta_k <- m * theta_k + (1 - m) * theta_q, elementwise."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    out = {}
    for name, kv in key_params.items():
        qv = query_params[name]
        if kv.shape != qv.shape:
            raise ValueError(f"shape mismatch for '{name}'")
        out[name] = m * kv + (1.0 - m) * qv
    return out


# ---------------------------------------------------------------------
# patchify and the resize/projection operators
# ---------------------------------------------------------------------

def patchify(image, patch):
    """Split an (H, W) or (H, W, C) image into flattened patch vectors.

    Patches are row-major; remainder rows/columns are cropped when the
    side is not divisible. Returns (n_patches, patch*patch*C).
    """
    if patch <= 0:
        raise ValueError("patch size must be positive")
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    gh, gw = h // patch, w // patch
    if gh == 0 or gw == 0:
        raise ValueError("patch larger than the image")
    img = img[:gh * patch, :gw * patch]
    blocks = img.reshape(gh, patch, gw, patch, c)
    # (gh, gw, C, py, px) then channel-major flatten per patch
    blocks = blocks.transpose(0, 2, 4, 1, 3)
    return np.ascontiguousarray(blocks.reshape(gh * gw, c * patch * patch))


def _interp1d_matrix(n_in, n_out):
    """1-D bilinear resampling operator with half-pixel alignment."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        w = src - lo
        m[i, lo] += 1.0 - w
        m[i, hi] += w
    return m


def interp2d_matrix(from_grid, to_grid):
    """Operator resampling a row-major from_grid^2 field to to_grid^2."""
    w = _interp1d_matrix(from_grid, to_grid)
    return np.kron(w, w)


@dataclass(frozen=True)
class ResizeProjection:
    """Patch-resize operator B and the matching embedding projection P.

    B linearly maps a flattened p-patch to the bilinearly resized q-patch;
    P = B (B^T B)^-1 maps embedding weights so that <x, w> = <Bx, Pw>
    holds exactly for every patch/weight pair when q >= p.
    """
    source_patch: int
    target_patch: int
    channels: int
    B: np.ndarray = field(repr=False)
    P: np.ndarray = field(repr=False)


def build_resize_matrix(p, q, channels=1):
    """The exact linear operator of per-channel bilinear p->q patch resize."""
    if p < 1 or q < p:
        raise ValueError("requires q >= p >= 1")
    if q == p:
        return np.eye(p * p * channels)
    w = _interp1d_matrix(p, q)
    per_channel = np.kron(w, w)
    if channels == 1:
        return per_channel
    return np.kron(np.eye(channels), per_channel)


@functools.lru_cache(maxsize=None)
def resize_projection(p, q, channels=1):
    if q == p:
        eye = np.eye(p * p * channels)
        return ResizeProjection(p, q, channels, eye, eye)
    w = _interp1d_matrix(p, q)
    bc = np.kron(w, w)
    gram = bc.T @ bc
    try:
        pc = np.linalg.solve(gram, bc.T).T
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"resize operator {p}->{q} is rank deficient") from exc
    if channels > 1:
        eye = np.eye(channels)
        bc, pc = np.kron(eye, bc), np.kron(eye, pc)
    return ResizeProjection(p, q, channels, bc, pc)


def pi_resize_weights(w_patch, proj: ResizeProjection):
    """Map patch-embedding weights to a larger patch size via P."""
    if proj.target_patch == proj.source_patch:
        return np.array(w_patch, copy=True)
    return proj.P @ np.asarray(w_patch)


def adapt_pos_embed(pos_embed, from_grid, to_grid):
    """Resample the grid part of a positional table to a new square grid.

    Row 0 (class token) is copied; grid rows are treated as a 2-D field
    and bilinearly interpolated.
    """
    pos = np.asarray(pos_embed)
    if pos.shape[0] != from_grid * from_grid + 1:
        raise ValueError("positional table does not match from_grid (square grids only)")
    if from_grid == to_grid:
        return np.array(pos, copy=True)
    m = interp2d_matrix(from_grid, to_grid).astype(pos.dtype)
    return np.concatenate([pos[:1], m @ pos[1:]], axis=0)


# ---------------------------------------------------------------------
# the encoder graph
# ---------------------------------------------------------------------

def param_nodes(params):
    """Leaf nodes for every parameter; use for the trained (query) path."""
    return {name: g.leaf(name, arr.shape) for name, arr in params.items()}


def const_param_getter(params):
    """Constant nodes (detached) for momentum/teacher paths."""
    cache = {}

    def pget(name):
        if name not in cache:
            cache[name] = g.constant(params[name])
        return cache[name]

    return pget


def leaf_param_getter(params):
    nodes = param_nodes(params)
    return lambda name: nodes[name]


def encode_graph(pget, views, cfg: ViTConfig, head="backbone"):
    """Build the encoder graph for a batch of (possibly compressed) views.

    ``views`` carries the stacked patch vectors, per-sample positional row
    indices, the patch size used and the scaled grid shape (see
    ``compression.BatchViews``). ``head`` selects the output:
    backbone class-token features, projection output, or prediction output.
    """
    d = cfg.embed_dim
    bsz, n_tok, patch_dim = views.patches.shape
    q = views.patch_size
    expected = q * q * cfg.channels
    if patch_dim != expected:
        raise ValueError(f"patch vectors of length {patch_dim}, expected {expected}")
    if n_tok < 1:
        raise ValueError("empty token sequence")

    dtype = views.patches.dtype
    w = pget("patch_embed.w")
    if q != cfg.patch:
        proj = resize_projection(cfg.patch, q, cfg.channels)
        w = g.matmul(g.constant(proj.P.astype(dtype)), w)
    tok = g.matmul(g.constant(views.patches), w) + pget("patch_embed.b")

    pos = pget("pos_embed")
    gh, gw = views.grid_hw
    if (gh, gw) != (cfg.grid, cfg.grid):
        if gh != gw:
            raise ValueError("non-square scaled grids are not supported")
        m = interp2d_matrix(cfg.grid, gh).astype(dtype)
        table = g.concat([pos[0:1, :], g.matmul(g.constant(m), pos[1:, :])], axis=0)
    else:
        table = pos
    pos_rows = g.index_rows(table, views.pos_index)

    cls = g.broadcast_to(g.reshape(pget("cls_token"), (1, 1, d)), (bsz, 1, d))
    x = g.concat([cls, tok], axis=1) + pos_rows

    t = n_tok + 1
    heads, hd = cfg.heads, d // cfg.heads
    inv_scale = 1.0 / float(np.sqrt(hd))
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        y = g.layer_norm(x, pget(pre + "ln1.g"), pget(pre + "ln1.b"), cfg.ln_eps)
        qkv = g.matmul(y, pget(pre + "attn.qkv.w")) + pget(pre + "attn.qkv.b")

        def split(lo):
            part = qkv[:, :, lo:lo + d]
            return g.transpose(g.reshape(part, (bsz, t, heads, hd)), (0, 2, 1, 3))

        qh, kh, vh = split(0), split(d), split(2 * d)
        scores = g.matmul(qh, g.transpose(kh, (0, 1, 3, 2))) * inv_scale
        attn = g.softmax(scores)
        ctx = g.reshape(g.transpose(g.matmul(attn, vh), (0, 2, 1, 3)), (bsz, t, d))
        x = x + (g.matmul(ctx, pget(pre + "attn.out.w")) + pget(pre + "attn.out.b"))

        y = g.layer_norm(x, pget(pre + "ln2.g"), pget(pre + "ln2.b"), cfg.ln_eps)
        hidden = g.gelu(g.matmul(y, pget(pre + "mlp.fc1.w")) + pget(pre + "mlp.fc1.b"))
        x = x + (g.matmul(hidden, pget(pre + "mlp.fc2.w")) + pget(pre + "mlp.fc2.b"))

    x = g.layer_norm(x, pget("norm.g"), pget("norm.b"), cfg.ln_eps)
    feat = g.reshape(x[:, 0:1, :], (bsz, d))
    if head == "backbone":
        return feat
    z = g.matmul(g.gelu(g.matmul(feat, pget("proj.fc1.w")) + pget("proj.fc1.b")),
                 pget("proj.fc2.w")) + pget("proj.fc2.b")
    if head == "proj":
        return z
    if head == "pred":
        return g.matmul(g.gelu(g.matmul(z, pget("pred.fc1.w")) + pget("pred.fc1.b")),
                        pget("pred.fc2.w")) + pget("pred.fc2.b")
    raise ValueError(f"unknown head '{head}'")


def encode(params, views, cfg: ViTConfig, head="backbone"):
    """Plain forward pass (no gradients) against frozen parameters."""
    root = encode_graph(const_param_getter(params), views, cfg, head=head)
    return g.evaluate(root, {})
