"""Sequence compression operators: randomized token dropout + patch scaling.

A ``CompressionStrategy`` fixes the patch sizes and keep counts for the
query and key views. ``apply_strategy`` composes the two operators (patch
scaling first, then dropout on the resulting grid) and enforces the
per-algorithm asymmetry rules: under dropout the key/target sequence stays
uncompressed for momentum-encoder algorithms (moco, dino), while simclr
drops tokens on both sides; patch scaling follows the strategy fields as
given (symmetric by default).

The class token is never dropped; kept grid tokens retain their original
content and positional rows.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .vit import patchify

MOMENTUM_ALGORITHMS = ("moco", "dino")
ALGORITHMS = ("moco", "simclr", "dino")

# instrumentation: bumped by every compression operation, so callers that
# must stay compression-free (eval probes) can assert they did
calls = 0


def _tick():
    global calls
    calls += 1


def compressed_length(h, w, q, d):
    """Grid tokens left after patch scaling to q and dropout ratio d.

    Excludes the class token; total sequence length is this + 1.
    """
    if q < 1:
        raise ValueError("patch size must be >= 1")
    if not 0.0 <= d < 1.0:
        raise ValueError("dropout ratio must lie in [0, 1)")
    grid = (h // q) * (w // q)
    kept = int((1.0 - d) * grid)
    if kept < 1:
        raise ValueError(f"over-compression: no grid tokens left (grid {grid}, d={d})")
    return kept


@dataclass(frozen=True)
class CompressionStrategy:
    """Patch sizes and kept grid-token counts for the two views.

    ``q_keep``/``k_keep`` of ``None`` mean the full grid. Keep counts are
    the primary parametrization; ratios from the literal syntax are floored
    onto counts via ``compressed_length``.
    """
    q_patch: int
    k_patch: int
    q_keep: Optional[int] = None
    k_keep: Optional[int] = None
    small_crop_policy: str = "keep"

    def is_identity(self, base_patch):
        return (self.q_patch == base_patch and self.k_patch == base_patch
                and self.q_keep is None and self.k_keep is None)

    def literal(self):
        text = f"q{self.q_patch}k{self.k_patch}"
        if self.q_keep is not None:
            text += f":dq{self.q_keep}"
        if self.k_keep is not None:
            text += f":dk{self.k_keep}"
        return text


def identity_strategy(base_patch):
    return CompressionStrategy(base_patch, base_patch, None, None)


def parse_strategy(text, base_patch):
    """Parse a strategy literal: "q16k16:dq49:dk196" or "full"."""
    text = text.strip()
    if text == "full":
        return identity_strategy(base_patch)
    parts = text.split(":")
    head = parts[0]
    if not head.startswith("q") or "k" not in head:
        raise ValueError(f"bad strategy literal {text!r}")
    try:
        q_str, k_str = head[1:].split("k")
        q_patch, k_patch = int(q_str), int(k_str)
    except ValueError as exc:
        raise ValueError(f"bad strategy literal {text!r}") from exc
    q_keep = k_keep = None
    for part in parts[1:]:
        if part.startswith("dq"):
            q_keep = int(part[2:])
        elif part.startswith("dk"):
            k_keep = int(part[2:])
        else:
            raise ValueError(f"bad strategy component {part!r} in {text!r}")
    return CompressionStrategy(q_patch, k_patch, q_keep, k_keep)


@dataclass
class CompressedView:
    """One view's token sequence after compression.

    ``grid_indices`` are row-major positions in the scaled grid; the
    positional row for grid token i is ``grid_indices[i] + 1`` (row 0 is
    the class token, which is always present at encode time).
    """
    patch_size: int
    grid_hw: Tuple[int, int]
    patches: np.ndarray       # (L, patch_size^2 * C)
    grid_indices: np.ndarray  # (L,) strictly increasing

    @property
    def pos_index(self):
        return np.concatenate([[0], self.grid_indices + 1]).astype(np.intp)

    def __len__(self):
        return len(self.grid_indices)


def make_view(image, patch):
    """Patchify an image into an uncompressed view at the given patch size."""
    patches = patchify(image, patch)
    img = np.asarray(image)
    gh, gw = img.shape[0] // patch, img.shape[1] // patch
    return CompressedView(patch, (gh, gw), patches,
                          np.arange(gh * gw, dtype=np.intp))


def patch_scale_view(image, q, base_patch):
    """Tokenize at a coarser patch size q >= base_patch."""
    if q < base_patch:
        raise ValueError("patch scaling only increases the patch size")
    _tick()
    return make_view(image, q)


def token_dropout(view: CompressedView, keep_count, rng):
    """Keep a uniformly random subset of grid tokens, order preserved.

    A fresh subset is drawn on every call from the caller's stream; kept
    tokens are bit-identical to the originals.
    """
    n = len(view.grid_indices)
    if not 1 <= keep_count <= n:
        raise ValueError(f"keep_count {keep_count} outside [1, {n}]")
    _tick()
    if keep_count == n:
        return CompressedView(view.patch_size, view.grid_hw,
                              view.patches, view.grid_indices)
    sel = np.sort(rng.choice(n, size=keep_count, replace=False))
    return CompressedView(view.patch_size, view.grid_hw,
                          view.patches[sel], view.grid_indices[sel])


def apply_strategy(x_q, x_k, strategy: CompressionStrategy, algorithm,
                   base_patch, rng_q, rng_k=None):
    """Compress a (query image, key image) pair per the algorithm's rules.

    Returns (query view, key view). Patch scaling runs first, then token
    dropout on the scaled grid. Key dropout is suppressed (warning, not
    fatal) for momentum-encoder algorithms.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm '{algorithm}'")
    q_view = patch_scale_view(x_q, strategy.q_patch, base_patch)
    k_view = patch_scale_view(x_k, strategy.k_patch, base_patch)
    if strategy.q_keep is not None:
        q_view = token_dropout(q_view, strategy.q_keep, rng_q)
    if strategy.k_keep is not None:
        if algorithm in MOMENTUM_ALGORITHMS:
            warnings.warn(
                f"{algorithm} keeps the key sequence uncompressed under dropout; "
                f"ignoring k_keep={strategy.k_keep}", stacklevel=2)
        else:
            k_view = token_dropout(k_view, strategy.k_keep, rng_k or rng_q)
    return q_view, k_view


def realized_lengths(strategy: CompressionStrategy, algorithm, side):
    """Total sequence lengths (incl. class token) a strategy realizes on
    H = W = ``side`` images, after the per-algorithm dropout rules."""
    gq = (side // strategy.q_patch) ** 2
    gk = (side // strategy.k_patch) ** 2
    l_q = (strategy.q_keep if strategy.q_keep is not None else gq) + 1
    if algorithm in MOMENTUM_ALGORITHMS or strategy.k_keep is None:
        l_k = gk + 1
    else:
        l_k = strategy.k_keep + 1
    return l_q, l_k


@dataclass
class BatchViews:
    """Stacked views with a shared patch size and keep count."""
    patch_size: int
    grid_hw: Tuple[int, int]
    patches: np.ndarray    # (B, L, D)
    pos_index: np.ndarray  # (B, L+1)

    @property
    def seq_len(self):
        return self.patches.shape[1] + 1


def stack_views(views, dtype=np.float32):
    """Stack same-shape CompressedViews into one batch."""
    if not views:
        raise ValueError("empty view list")
    first = views[0]
    for v in views:
        if v.patch_size != first.patch_size or v.grid_hw != first.grid_hw \
                or len(v) != len(first):
            raise ValueError("views in a batch must share patch size and length")
    patches = np.stack([v.patches for v in views]).astype(dtype, copy=False)
    pos = np.stack([v.pos_index for v in views])
    return BatchViews(first.patch_size, first.grid_hw, patches, pos)
