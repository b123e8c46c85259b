"""Transformer encoder stack, mention pooling, and the model container."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import (
    AttentionLayerParams,
    EntityMask,
    RelativeBiasTable,
    mha_backward,
    mha_forward,
    vanilla_multi_head_attention,
)
from .config import ModelConfig
from .corpus import AnnotatedParagraph
from .tensor import (
    flop_scope,
    gelu,
    gelu_grad,
    layer_norm_backward,
    layer_norm_forward,
    matmul,
    rng_stream,
)

UNK = "[UNK]"
LAYER_TENSORS = (
    "attn.Wq", "attn.Wk", "attn.Wv", "attn.Wo", "attn.bo",
    "ln1.g", "ln1.b", "ffn.W1", "ffn.b1", "ffn.W2", "ffn.b2", "ln2.g", "ln2.b",
)
HEAD_TENSORS = {
    "linear": ("head.W", "head.b"),
    "mlp": ("head.W1", "head.c", "head.V", "head.b"),
    "biaffine": ("head.U", "head.W", "head.b"),
}
# indicator rows: 0 = inside any mention (one-pass), 1 = subject, 2 = object (per-pair)
IND_MENTION, IND_SUBJ, IND_OBJ = 0, 1, 2


class SequenceTooLong(ValueError):
    pass


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every trainable tensor in canonical (checkpoint) order."""
    d, t = cfg.d_model, 2 * cfg.k + 1
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tok": (cfg.vocab_size, d),
        "embed.pos": (cfg.max_len, d),
        "embed.ln.g": (d,),
        "embed.ln.b": (d,),
    }
    if cfg.variant == "indicator-input":
        shapes["embed.indicator"] = (3, d)
    if cfg.variant == "entity-aware" and cfg.share_bias_layers:
        shapes["rel.wK"] = (t, cfg.d_head)
        shapes["rel.wV"] = (t, cfg.d_head)
    for layer in range(cfg.layers):
        p = f"layer{layer}."
        if cfg.variant == "entity-aware" and not cfg.share_bias_layers:
            shapes[p + "rel.wK"] = (t, cfg.d_head)
            shapes[p + "rel.wV"] = (t, cfg.d_head)
        shapes.update({
            p + "attn.Wq": (d, d), p + "attn.Wk": (d, d), p + "attn.Wv": (d, d),
            p + "attn.Wo": (d, d), p + "attn.bo": (d,),
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "ffn.W1": (d, cfg.d_ff), p + "ffn.b1": (cfg.d_ff,),
            p + "ffn.W2": (cfg.d_ff, d), p + "ffn.b2": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
        })
    if cfg.variant == "posemb-final":
        shapes["posemb.subj"] = (t, d)
        shapes["posemb.obj"] = (t, d)
    l = cfg.n_labels
    if cfg.head == "linear":
        shapes.update({"head.W": (2 * d, l), "head.b": (l,)})
    elif cfg.head == "mlp":
        shapes.update({"head.W1": (2 * d, d), "head.c": (d,), "head.V": (d, l), "head.b": (l,)})
    else:
        shapes.update({"head.U": (d, l, d), "head.W": (2 * d, l), "head.b": (l,)})
    return shapes


def _init_tensor(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf in ("b", "bo", "b1", "b2", "c"):
        return np.zeros(shape)
    if name.startswith(("embed.", "rel.", "posemb.")) or ".rel." in name:
        return rng.normal(0.0, 0.5, size=shape)
    if leaf == "U":
        return rng.normal(0.0, 1.0 / shape[0], size=shape)
    return rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    return {
        name: _init_tensor(name, shape, rng_stream(cfg.seed, f"init/{name}"))
        for name, shape in param_shapes(cfg).items()
    }


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]
    vocab: list[str]
    labels: list[str]
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.vocab) != self.config.vocab_size:
            raise ValueError(f"vocab has {len(self.vocab)} entries, config says {self.config.vocab_size}")
        if len(self.labels) != self.config.n_labels:
            raise ValueError(f"{len(self.labels)} labels, config says {self.config.n_labels}")
        expected = param_shapes(self.config)
        if list(self.params) != list(expected) or any(
            self.params[n].shape != s for n, s in expected.items()
        ):
            raise ValueError("parameter names/shapes do not match the config")
        self._index = {tok: i for i, tok in enumerate(self.vocab)}

    @classmethod
    def create(cls, cfg: ModelConfig, tokens: Sequence[str], labels: Sequence[str]) -> "Model":
        vocab = [UNK] + sorted(set(tokens) - {UNK})
        cfg = cfg.replace(vocab_size=len(vocab), n_labels=len(labels))
        return cls(cfg, init_params(cfg), vocab, list(labels))

    def token_ids(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self._index.get(t, 0) for t in tokens], dtype=np.int64)

    def layer_params(self, layer: int) -> AttentionLayerParams:
        p, cfg = self.params, self.config
        pre = f"layer{layer}."
        table = None
        if cfg.variant == "entity-aware":
            tk = "rel." if cfg.share_bias_layers else pre + "rel."
            table = RelativeBiasTable(cfg.k, p[tk + "wK"], p[tk + "wV"])
        return AttentionLayerParams(
            p[pre + "attn.Wq"], p[pre + "attn.Wk"], p[pre + "attn.Wv"],
            p[pre + "attn.Wo"], p[pre + "attn.bo"], cfg.heads, table,
        )

    def bias_names(self, layer: int) -> tuple[str, str]:
        pre = "rel." if self.config.share_bias_layers else f"layer{layer}.rel."
        return pre + "wK", pre + "wV"


def zero_grads(model: Model) -> dict[str, np.ndarray]:
    return {n: np.zeros_like(v) for n, v in model.params.items()}


@dataclass
class EncoderOutput:
    hidden: np.ndarray  # N x d_z, final layer
    layer_states: list[np.ndarray] = field(default_factory=list)  # embeddings, then each layer

    def __post_init__(self):
        if not np.isfinite(self.hidden).all():
            raise FloatingPointError("non-finite encoder output")

    @property
    def n_tokens(self) -> int:
        return self.hidden.shape[0]


# ---------------------------------------------------------------- embeddings


def embed_forward(model: Model, ids: np.ndarray, indicators: np.ndarray | None = None):
    """Token + absolute position (+ optional indicator) embeddings, then layer norm.

    ``indicators`` is an N x 3 0/1 matrix selecting rows of ``embed.indicator``.
    """
    p, cfg = model.params, model.config
    n = len(ids)
    if n > cfg.max_len:
        raise SequenceTooLong(
            f"{n} tokens exceed max_len={cfg.max_len}; shorten the paragraph with window_truncate"
        )
    x = p["embed.tok"][ids] + p["embed.pos"][:n]
    if indicators is not None:
        x = x + matmul(indicators, p["embed.indicator"])
    y, ln = layer_norm_forward(x, p["embed.ln.g"], p["embed.ln.b"], cfg.ln_eps)
    return y, (ids, indicators, ln)


def embed_backward(dy, cache, model: Model, grads) -> None:
    ids, indicators, ln = cache
    dx, dg, db = layer_norm_backward(dy, ln)
    grads["embed.ln.g"] += dg
    grads["embed.ln.b"] += db
    np.add.at(grads["embed.tok"], ids, dx)
    grads["embed.pos"][: len(ids)] += dx
    if indicators is not None:
        grads["embed.indicator"] += matmul(indicators.T, dx)


def embed_input(p: AnnotatedParagraph, model: Model) -> np.ndarray:
    indicators = None
    if model.config.variant == "indicator-input":
        indicators = indicator_matrix(len(p.tokens), p.mentions)
    y, _ = embed_forward(model, model.token_ids(p.tokens), indicators)
    return y


def indicator_matrix(n: int, mentions=(), subj=None, obj=None) -> np.ndarray:
    ind = np.zeros((n, 3))
    for s, e in mentions:
        ind[s:e, IND_MENTION] = 1.0
    if subj is not None:
        ind[subj[0]:subj[1], IND_SUBJ] = 1.0
    if obj is not None:
        ind[obj[0]:obj[1], IND_OBJ] = 1.0
    return ind


# -------------------------------------------------------------------- layers


def layer_forward(model: Model, layer: int, H: np.ndarray, mask: EntityMask | None):
    """Post-norm block: attention -> add & norm -> feed-forward -> add & norm."""
    p, eps = model.params, model.config.ln_eps
    pre = f"layer{layer}."
    lp = model.layer_params(layer)
    a, attn_cache = mha_forward(H, lp, mask, where=f"layer {layer}")
    h1, ln1 = layer_norm_forward(H + a, p[pre + "ln1.g"], p[pre + "ln1.b"], eps)
    u = matmul(h1, p[pre + "ffn.W1"]) + p[pre + "ffn.b1"]
    f = matmul(gelu(u), p[pre + "ffn.W2"]) + p[pre + "ffn.b2"]
    h2, ln2 = layer_norm_forward(h1 + f, p[pre + "ln2.g"], p[pre + "ln2.b"], eps)
    return h2, (lp, attn_cache, ln1, h1, u, ln2)


def layer_backward(dh2, cache, model: Model, layer: int, grads) -> np.ndarray:
    p = model.params
    pre = f"layer{layer}."
    lp, attn_cache, ln1, h1, u, ln2 = cache
    ds, dg, db = layer_norm_backward(dh2, ln2)
    grads[pre + "ln2.g"] += dg
    grads[pre + "ln2.b"] += db
    grads[pre + "ffn.b2"] += ds.sum(axis=0)
    grads[pre + "ffn.W2"] += matmul(gelu(u).T, ds)
    du = matmul(ds, p[pre + "ffn.W2"].T) * gelu_grad(u)
    grads[pre + "ffn.b1"] += du.sum(axis=0)
    grads[pre + "ffn.W1"] += matmul(h1.T, du)
    dh1 = ds + matmul(du, p[pre + "ffn.W1"].T)
    dr, dg, db = layer_norm_backward(dh1, ln1)
    grads[pre + "ln1.g"] += dg
    grads[pre + "ln1.b"] += db
    dH, g = mha_backward(dr, lp, attn_cache)
    for key in ("Wq", "Wk", "Wv", "Wo", "bo"):
        grads[pre + "attn." + key] += g[key]
    if "wK" in g:
        nk, nv = model.bias_names(layer)
        grads[nk] += g["wK"]
        grads[nv] += g["wV"]
    return dr + dH


def run_layers(model: Model, H, mask, layers: range, keep_states=False):
    caches, states = [], []
    for layer in layers:
        H, c = layer_forward(model, layer, H, mask)
        caches.append((layer, c))
        if keep_states:
            states.append(H)
    return H, caches, states


def backprop_layers(dH, caches, model: Model, grads):
    for layer, c in reversed(caches):
        dH = layer_backward(dH, c, model, layer, grads)
    return dH


def encode_tokens(model: Model, ids, mask=None, indicators=None, layers: range | None = None):
    """Forward through embeddings and ``layers``; returns (EncoderOutput, cache)."""
    layers = range(model.config.layers) if layers is None else layers
    with flop_scope("encoder"):
        x, emb_cache = embed_forward(model, ids, indicators)
        h, caches, states = run_layers(model, x, mask, layers, keep_states=True)
    return EncoderOutput(h, [x] + states), (emb_cache, caches)


def encode_backward(dH, cache, model: Model, grads) -> None:
    emb_cache, caches = cache
    with flop_scope("encoder"):
        dx = backprop_layers(dH, caches, model, grads)
        embed_backward(dx, emb_cache, model, grads)


def paragraph_mask(model: Model, p: AnnotatedParagraph) -> EntityMask | None:
    if model.config.variant != "entity-aware":
        return None
    return EntityMask.from_spans(len(p.tokens), p.mentions)


def encode(p: AnnotatedParagraph, model: Model) -> EncoderOutput:
    """One-pass encoding with every mention of ``p`` visible to the bias mechanism."""
    indicators = None
    if model.config.variant == "indicator-input":
        indicators = indicator_matrix(len(p.tokens), p.mentions)
    out, _ = encode_tokens(model, model.token_ids(p.tokens), paragraph_mask(model, p), indicators)
    return out


def reference_encode_vanilla(model: Model, ids) -> list[np.ndarray]:
    """Layer-by-layer states of the same stack with the bias mechanism left out entirely."""
    p, eps = model.params, model.config.ln_eps

    def ln(x, g, b):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps) * g + b

    n = len(ids)
    h = ln(p["embed.tok"][ids] + p["embed.pos"][:n], p["embed.ln.g"], p["embed.ln.b"])
    states = [h]
    for layer in range(model.config.layers):
        pre = f"layer{layer}."
        a = vanilla_multi_head_attention(
            h, p[pre + "attn.Wq"], p[pre + "attn.Wk"], p[pre + "attn.Wv"],
            p[pre + "attn.Wo"], p[pre + "attn.bo"], model.config.heads,
        )
        h1 = ln(h + a, p[pre + "ln1.g"], p[pre + "ln1.b"])
        f = gelu(h1 @ p[pre + "ffn.W1"] + p[pre + "ffn.b1"]) @ p[pre + "ffn.W2"] + p[pre + "ffn.b2"]
        h = ln(h1 + f, p[pre + "ln2.g"], p[pre + "ln2.b"])
        states.append(h)
    return states


# ------------------------------------------------------------------- pooling


def pool_mention(out: EncoderOutput | np.ndarray, span: tuple[int, int]) -> np.ndarray:
    hidden = out.hidden if isinstance(out, EncoderOutput) else out
    s, e = span
    if not 0 <= s < e <= hidden.shape[0]:
        raise ValueError(f"invalid mention span {span} for {hidden.shape[0]} tokens")
    return hidden[s:e].sum(axis=0) / (e - s)


def pool_backward(dH: np.ndarray, span: tuple[int, int], do: np.ndarray) -> None:
    s, e = span
    dH[s:e] += do / (e - s)
