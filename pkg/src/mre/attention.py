"""Entity-aware self-attention with clipped relative-distance biases.

A token pair (i, j) receives a learned key/value offset only when one of the two
tokens sits inside an entity mention. The offset is looked up by the clipped
distance measured from the entity side; when both tokens are entities the row
token wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import matmul, softmax_rows

ZERO, ROW, COL = 0, 1, 2
_CASE_CODES = {ZERO: "Z", ROW: "R", COL: "B"}


class AttentionError(FloatingPointError):
    pass


def clip_distance(i: int, j: int, k: int) -> int:
    if k < 1:
        raise ValueError("clip radius k must be >= 1")
    return min(max(-k, i - j), k)


@dataclass(frozen=True)
class EntityMask:
    """Per-token mention membership for one paragraph."""

    in_mention: np.ndarray  # bool, (N,)
    mention_id: np.ndarray  # int, (N,), -1 outside mentions

    @classmethod
    def from_spans(cls, n: int, spans: Sequence[tuple[int, int]]) -> "EntityMask":
        inside = np.zeros(n, dtype=bool)
        ids = np.full(n, -1, dtype=np.int64)
        starts = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
        for idx, (s, e) in enumerate(spans):
            if not 0 <= s < e <= n:
                raise ValueError(f"mention span ({s}, {e}) outside 0..{n}")
            inside[s:e] = True
            # overlapping spans: earliest start owns the token
            take = np.arange(s, e)[starts[s:e] > s]
            ids[take] = idx
            starts[take] = s
        return cls(inside, ids)

    @classmethod
    def empty(cls, n: int) -> "EntityMask":
        return cls.from_spans(n, [])

    def __len__(self) -> int:
        return len(self.in_mention)

    def grid(self, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(idx, case, onehot) for clip radius ``k``, computed once per mask."""
        cache = self.__dict__.setdefault("_grid_cache", {})
        if k not in cache:
            idx, case = bias_index_grid(self, k)
            onehot = (idx[:, :, None] == np.arange(2 * k + 1)).astype(np.float64)
            cache[k] = (idx, case, onehot)
        return cache[k]


@dataclass
class RelativeBiasTable:
    """Learned offsets; row t of each table stores the vector for distance t - k."""

    k: int
    wK: np.ndarray  # (2k+1, d_h)
    wV: np.ndarray  # (2k+1, d_h)

    def __post_init__(self):
        rows = 2 * self.k + 1
        if self.wK.shape[0] != rows or self.wV.shape[0] != rows:
            raise ValueError(f"bias tables need {rows} rows for k={self.k}")

    @property
    def dim(self) -> int:
        return self.wK.shape[1]


def bias_index_grid(mask: EntityMask, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Table row per cell (-1 for the zero vector) and the case code (ZERO/ROW/COL)."""
    n = len(mask)
    pos = np.arange(n)
    row_d = np.clip(pos[:, None] - pos[None, :], -k, k)  # d(i, j)
    ent = mask.in_mention
    case = np.where(ent[:, None], ROW, np.where(ent[None, :], COL, ZERO))
    idx = np.where(case == ROW, row_d + k, np.where(case == COL, -row_d + k, -1))
    return idx.astype(np.int64), case.astype(np.int8)


class BiasGrids:
    """The a^K / a^V grids of one layer, stored as table indices.

    ``bucket(M)[i, t]`` sums ``M[i, j]`` over the cells of row i that point at
    table row t; it lets the attention math touch the (2k+1)-row tables instead
    of materialized N x N x d_h grids.
    """

    def __init__(self, mask: EntityMask, table: RelativeBiasTable):
        self.k = table.k
        self.table = table
        self.idx, self.case, self.onehot = mask.grid(table.k)

    def bucket(self, m: np.ndarray) -> np.ndarray:
        return np.einsum("ij,ijt->it", m, self.onehot)

    def gather(self, per_row: np.ndarray) -> np.ndarray:
        """Pick ``per_row[i, idx[i, j]]``, zero where the cell has no bias."""
        padded = np.concatenate([per_row, np.zeros((per_row.shape[0], 1))], axis=1)
        return np.take_along_axis(padded, self.idx, axis=1)

    def materialize(self, which: str) -> np.ndarray:
        tab = self.table.wK if which == "K" else self.table.wV
        padded = np.concatenate([tab, np.zeros((1, tab.shape[1]))], axis=0)
        return padded[self.idx]


def build_bias_tensors(
    mask: EntityMask, n: int, table: RelativeBiasTable
) -> tuple[np.ndarray, np.ndarray]:
    """Materialized (aK, aV), each N x N x d_h."""
    if len(mask) != n:
        raise ValueError(f"mask length {len(mask)} does not match N={n}")
    grids = BiasGrids(mask, table)
    return grids.materialize("K"), grids.materialize("V")


def render_bias_grid(mask: EntityMask, k: int, layers: int = 1, heads: int = 1) -> str:
    """Text dump used by inspect-attention: one line per (layer, head, row)."""
    idx, case = bias_index_grid(mask, k)
    lines = []
    rows = []
    for i in range(len(mask)):
        cells = [
            "Z" if c == ZERO else f"{_CASE_CODES[int(c)]}:{int(t)}"
            for c, t in zip(case[i], idx[i])
        ]
        rows.append(" ".join(cells))
    for layer in range(layers):
        for head in range(heads):
            for i, row in enumerate(rows):
                lines.append(f"layer={layer} head={head} i={i} | {row}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------ single head


def head_forward(q, k, v, grids: BiasGrids | None, where: str = ""):
    """Scaled dot-product attention with optional entity biases; q/k/v are N x d_h."""
    d_h = q.shape[1]
    scale = 1.0 / math.sqrt(d_h)
    logits = matmul(q, k.T)
    qa = None
    if grids is not None:
        qa = matmul(q, grids.table.wK.T)  # N x (2k+1)
        logits = logits + grids.gather(qa)
    logits = logits * scale
    if not np.isfinite(logits).all():
        raise AttentionError(f"non-finite attention logits in {where or 'attention head'}")
    probs = softmax_rows(logits)
    z = matmul(probs, v)
    pb = None
    if grids is not None:
        pb = grids.bucket(probs)
        z = z + matmul(pb, grids.table.wV)
    return z, (q, k, v, probs, pb, scale, grids)


def head_backward(dz, cache):
    """Returns (dq, dk, dv, dwK, dwV); table grads are None without biases."""
    q, k, v, probs, pb, scale, grids = cache
    dprobs = matmul(dz, v.T)
    dv = matmul(probs.T, dz)
    dwK = dwV = None
    if grids is not None:
        dwV = matmul(pb.T, dz)
        dprobs = dprobs + grids.gather(matmul(dz, grids.table.wV.T))
    dlogits = probs * (dprobs - (dprobs * probs).sum(axis=1, keepdims=True))
    dlogits = dlogits * scale
    dq = matmul(dlogits, k)
    dk = matmul(dlogits.T, q)
    if grids is not None:
        db = grids.bucket(dlogits)
        dq = dq + matmul(db, grids.table.wK)
        dwK = matmul(db.T, q)
    return dq, dk, dv, dwK, dwV


def attention_head(H, wq, wk, wv, grids: BiasGrids | None = None) -> np.ndarray:
    """One head's output z (N x d_h) from hidden states H (N x d_z)."""
    z, _ = head_forward(matmul(H, wq), matmul(H, wk), matmul(H, wv), grids)
    return z


# ------------------------------------------------------------- multi head


@dataclass
class AttentionLayerParams:
    """Per-head projections stored side by side: head h owns columns h*d_h:(h+1)*d_h."""

    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray
    heads: int
    table: RelativeBiasTable | None = None

    def __post_init__(self):
        d = self.Wq.shape[0]
        if d % self.heads:
            raise ValueError(f"{self.heads} heads do not divide d_z={d}")

    @property
    def d_head(self) -> int:
        return self.Wq.shape[1] // self.heads


def mha_forward(H, lp: AttentionLayerParams, mask: EntityMask | None, where: str = ""):
    grids = BiasGrids(mask, lp.table) if (mask is not None and lp.table is not None) else None
    Q, K, V = matmul(H, lp.Wq), matmul(H, lp.Wk), matmul(H, lp.Wv)
    dh = lp.d_head
    outs, caches = [], []
    for h in range(lp.heads):
        sl = slice(h * dh, (h + 1) * dh)
        z, c = head_forward(Q[:, sl], K[:, sl], V[:, sl], grids, f"{where} head {h}".strip())
        outs.append(z)
        caches.append(c)
    Z = np.concatenate(outs, axis=1)
    out = matmul(Z, lp.Wo) + lp.bo
    return out, (H, Z, caches, grids)


def mha_backward(dout, lp: AttentionLayerParams, cache):
    """Returns dH and a dict of parameter grads (Wq, Wk, Wv, Wo, bo, wK, wV)."""
    H, Z, caches, grids = cache
    g = {"Wo": matmul(Z.T, dout), "bo": dout.sum(axis=0)}
    dZ = matmul(dout, lp.Wo.T)
    dh = lp.d_head
    dQ, dK, dV = np.empty_like(Z), np.empty_like(Z), np.empty_like(Z)
    if grids is not None:
        g["wK"] = np.zeros_like(lp.table.wK)
        g["wV"] = np.zeros_like(lp.table.wV)
    for h, c in enumerate(caches):
        sl = slice(h * dh, (h + 1) * dh)
        dq, dk, dv, dwK, dwV = head_backward(dZ[:, sl], c)
        dQ[:, sl], dK[:, sl], dV[:, sl] = dq, dk, dv
        if grids is not None:
            g["wK"] += dwK
            g["wV"] += dwV
    g["Wq"], g["Wk"], g["Wv"] = matmul(H.T, dQ), matmul(H.T, dK), matmul(H.T, dV)
    dH = matmul(dQ, lp.Wq.T) + matmul(dK, lp.Wk.T) + matmul(dV, lp.Wv.T)
    return dH, g


def multi_head_attention(H, lp: AttentionLayerParams, mask: EntityMask | None) -> np.ndarray:
    out, _ = mha_forward(H, lp, mask)
    return out


def attention_probs(H, lp: AttentionLayerParams, mask: EntityMask | None) -> list[np.ndarray]:
    """Per-head attention weight matrices, for inspection."""
    _, (_, _, caches, _) = mha_forward(H, lp, mask)
    return [c[3] for c in caches]


def vanilla_multi_head_attention(H, Wq, Wk, Wv, Wo, bo, heads: int) -> np.ndarray:
    """Bias-free reference path, kept separate from the entity-aware code."""
    Q, K, V = H @ Wq, H @ Wk, H @ Wv
    dh = Q.shape[1] // heads
    outs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        w = softmax_rows((Q[:, sl] @ K[:, sl].T) / math.sqrt(dh))
        outs.append(w @ V[:, sl])
    return np.concatenate(outs, axis=1) @ Wo + bo
