"""The mixture-of-experts next-POI network.

Pipeline for a batch of equal-length POI windows ``ids[B, T]``::

    embed -> linear + GeLU -> + positional -> causal attention fusion
          -> gate (softmax over experts) and every expert (dense mixture)
          -> mixed = sum_i g_i * expert_i -> POI head, category head

The gate sees only the fused sequence (mean over positions concatenated with
the last position), never a familiarity label.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import Parameter, Tensor, load_arrays, no_grad, ops, save_arrays

EXPERT_KINDS = ("transformer", "lstm")


@dataclass
class ModelConfig:
    poi_count: int
    category_count: int = 0
    d_model: int = 128
    max_seq: int = 500
    train_seq_len: int = 50
    tf_layers: int = 4
    tf_heads: int = 8
    tf_ff: int = 128
    lstm_layers: int = 2
    lstm_hidden: int = 64
    expert_kinds: tuple[str, ...] = ("lstm", "transformer")
    use_gate: bool = True
    fusion_layers: int = 1
    head_loss_weights: tuple[float, float] = (1.0, 0.2)
    seed: int = 0

    def __post_init__(self):
        self.expert_kinds = tuple(self.expert_kinds)
        self.head_loss_weights = tuple(float(w) for w in self.head_loss_weights)
        if self.poi_count < 1:
            raise ValueError("poi_count must be positive")
        if self.d_model % self.tf_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by tf_heads={self.tf_heads}")
        if self.n_experts < 1:
            raise ValueError("need at least one expert")
        if any(k not in EXPERT_KINDS for k in self.expert_kinds):
            raise ValueError(f"expert kinds must be from {EXPERT_KINDS}, got {self.expert_kinds}")
        if not self.use_gate and self.n_experts != 1:
            raise ValueError("a gateless model must have exactly one expert")
        if self.train_seq_len > self.max_seq:
            raise ValueError("train_seq_len exceeds max_seq")

    @property
    def n_experts(self) -> int:
        return len(self.expert_kinds)

    # flat key=value text form
    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            kw[key] = _parse_field(key, raw)
        return cls(**kw)


def _parse_field(key: str, raw: str):
    if key == "expert_kinds":
        return tuple(x for x in raw.split(",") if x)
    if key == "head_loss_weights":
        return tuple(float(x) for x in raw.split(","))
    if key == "use_gate":
        if raw not in ("True", "False", "true", "false", "1", "0"):
            raise ValueError(f"use_gate must be a boolean, got {raw!r}")
        return raw in ("True", "true", "1")
    return int(raw)


@dataclass
class GateOutput:
    logits: Tensor   # [B, N]
    weights: Tensor  # [B, N]


@dataclass
class ForwardTrace:
    fused_seq: Tensor
    gate: GateOutput | None
    expert_outs: list[Tensor]
    mixed: Tensor
    poi_logits: Tensor
    cat_logits: Tensor | None = None


# ------------------------------------------------------------------ layers

class ParamStore:
    """Ordered name -> Parameter registry shared by the layers of one model."""

    def __init__(self, seed: int):
        self.params: "OrderedDict[str, Parameter]" = OrderedDict()
        self.rng = np.random.default_rng(seed)

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        p = Parameter(value, name=name)
        self.params[name] = p
        return p

    def uniform(self, name: str, shape: tuple[int, ...], fan_in: int) -> Parameter:
        bound = 1.0 / math.sqrt(fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def normal(self, name: str, shape: tuple[int, ...], std: float = 0.02) -> Parameter:
        return self.add(name, self.rng.normal(0.0, std, size=shape))


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.w = store.uniform(f"{name}.w", (d_in, d_out), d_in)
        self.b = store.uniform(f"{name}.b", (d_out,), d_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int):
        self.gamma = store.add(f"{name}.gamma", np.ones(d))
        self.beta = store.add(f"{name}.beta", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class CausalSelfAttention:
    def __init__(self, store: ParamStore, name: str, d: int, heads: int):
        self.heads = heads
        self.q = Linear(store, f"{name}.q", d, d)
        # a key bias only shifts each query's scores by a constant: softmax ignores it
        self.k = Linear(store, f"{name}.k", d, d, bias=False)
        self.v = Linear(store, f"{name}.v", d, d)
        self.o = Linear(store, f"{name}.o", d, d)

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return ops.transpose(ops.reshape(x, (b, t, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        att = ops.causal_attention(self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x)))
        merged = ops.reshape(ops.transpose(att, (0, 2, 1, 3)), (b, t, d))
        return self.o(merged)


class FeedForward:
    def __init__(self, store: ParamStore, name: str, d: int, hidden: int):
        self.up = Linear(store, f"{name}.up", d, hidden)
        self.down = Linear(store, f"{name}.down", hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ops.gelu(self.up(x)))


class FusionBlock:
    """Post-norm block: ``h = LN(x + Attn(x)); out = LN(h + FF(h))``."""

    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig):
        self.attn = CausalSelfAttention(store, f"{name}.attn", cfg.d_model, cfg.tf_heads)
        self.ln1 = LayerNorm(store, f"{name}.ln1", cfg.d_model)
        self.ff = FeedForward(store, f"{name}.ff", cfg.d_model, cfg.tf_ff)
        self.ln2 = LayerNorm(store, f"{name}.ln2", cfg.d_model)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x + self.attn(x))
        return self.ln2(h + self.ff(h))


class EncoderLayer:
    """Pre-norm Transformer encoder layer with causal self-attention."""

    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig):
        self.ln1 = LayerNorm(store, f"{name}.ln1", cfg.d_model)
        self.attn = CausalSelfAttention(store, f"{name}.attn", cfg.d_model, cfg.tf_heads)
        self.ln2 = LayerNorm(store, f"{name}.ln2", cfg.d_model)
        self.ff = FeedForward(store, f"{name}.ff", cfg.d_model, cfg.tf_ff)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.ff(self.ln2(x))


class TransformerExpert:
    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig):
        self.layers = [EncoderLayer(store, f"{name}.layer{i}", cfg) for i in range(cfg.tf_layers)]
        self.ln = LayerNorm(store, f"{name}.ln_out", cfg.d_model)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.ln(x[:, -1])


class LSTMExpert:
    """Stacked LSTM from a zero state; the last hidden state is projected back to ``d_model``."""

    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig, d_in: int | None = None,
                 project: bool = True):
        h = cfg.lstm_hidden
        d_in = cfg.d_model if d_in is None else d_in
        self.layers = []
        for i in range(cfg.lstm_layers):
            fan = d_in if i == 0 else h
            self.layers.append((
                store.uniform(f"{name}.lstm{i}.w_ih", (fan, 4 * h), fan),
                store.uniform(f"{name}.lstm{i}.w_hh", (h, 4 * h), h),
                store.uniform(f"{name}.lstm{i}.b", (4 * h,), h),
            ))
        self.out = Linear(store, f"{name}.out", h, cfg.d_model) if project else None

    def last_hidden(self, x: Tensor) -> Tensor:
        for w_ih, w_hh, b in self.layers:
            x = ops.lstm_layer(x, w_ih, w_hh, b)
        return x[:, -1]

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(self.last_hidden(x))


class MLPHead:
    """Two-layer decoder head with a GeLU in between."""

    def __init__(self, store: ParamStore, name: str, d: int, hidden: int, n_out: int):
        self.hidden = Linear(store, f"{name}.hidden", d, hidden)
        self.out = Linear(store, f"{name}.out", hidden, n_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(ops.gelu(self.hidden(x)))


# ------------------------------------------------------------------ models

class NextPoiModel:
    """Shared surface for every predictor: heads, loss, checkpointing, inference."""

    cfg: ModelConfig
    store: ParamStore

    def _build_heads(self, d: int) -> None:
        cfg = self.cfg
        self.poi_head = MLPHead(self.store, "head_poi", d, d, cfg.poi_count)
        self.cat_head = None
        if cfg.category_count > 0 and cfg.head_loss_weights[1] > 0:
            self.cat_head = MLPHead(self.store, "head_cat", d, d, cfg.category_count)

    def _decode(self, mixed: Tensor) -> tuple[Tensor, Tensor | None]:
        cat = self.cat_head(mixed) if self.cat_head is not None else None
        return self.poi_head(mixed), cat

    def parameters(self) -> list[Parameter]:
        return list(self.store.params.values())

    def named_parameters(self) -> "OrderedDict[str, Parameter]":
        return self.store.params

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def forward(self, ids, **kw) -> ForwardTrace:
        raise NotImplementedError

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise ValueError(f"expected a [batch, T>=1] array of POI ids, got shape {ids.shape}")
        return ids

    def loss(self, ids, target_poi, target_cat=None, **kw) -> Tensor:
        trace = self.forward(ids, **kw)
        w_poi, w_cat = self.cfg.head_loss_weights
        total = ops.cross_entropy(trace.poi_logits, target_poi) * w_poi
        if trace.cat_logits is not None and target_cat is not None:
            total = total + ops.cross_entropy(trace.cat_logits, target_cat) * w_cat
        return total

    def poi_logits(self, ids) -> np.ndarray:
        with no_grad():
            return self.forward(ids).poi_logits.data

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.store.params.items())

    def load_state_dict(self, state, strict: bool = True) -> None:
        own = self.store.params
        if strict and set(state) != set(own):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"checkpoint mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for k, v in state.items():
            if k in own:
                if own[k].data.shape != np.shape(v):
                    raise ValueError(f"shape mismatch for {k}: {own[k].data.shape} vs {np.shape(v)}")
                own[k].data[...] = v

    def save(self, path) -> None:
        save_arrays(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(load_arrays(path))


class MoETransMov(NextPoiModel):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.store = store = ParamStore(cfg.seed)
        d = cfg.d_model
        self.poi_emb = store.normal("poi_emb", (cfg.poi_count, d))
        self.proj = Linear(store, "proj", d, d)
        self.pos_emb = store.normal("pos_emb", (cfg.max_seq, d))
        self.fusion = [FusionBlock(store, f"fusion{i}", cfg) for i in range(cfg.fusion_layers)]
        self.experts = []
        for i, kind in enumerate(cfg.expert_kinds):
            cls = TransformerExpert if kind == "transformer" else LSTMExpert
            self.experts.append(cls(store, f"expert{i}", cfg))
        if cfg.use_gate:
            self.gate_w = store.uniform("gate.w", (2 * d, cfg.n_experts), 2 * d)
            self.gate_b = store.uniform("gate.b", (cfg.n_experts,), 2 * d)
        self._build_heads(d)

    # individual stages, exposed for probing
    def embed(self, ids) -> Tensor:
        return ops.embedding(ids, self.poi_emb)

    def fuse(self, emb: Tensor) -> Tensor:
        t = emb.shape[1]
        if t > self.cfg.max_seq:
            raise ValueError(f"sequence length {t} exceeds max_seq={self.cfg.max_seq}")
        x = ops.gelu(self.proj(emb)) + self.pos_emb[:t]
        for block in self.fusion:
            x = block(x)
        return x

    def gate(self, fused: Tensor) -> GateOutput:
        summary = ops.concat([ops.mean(fused, axis=1), fused[:, -1]], axis=-1)
        logits = ops.linear(summary, self.gate_w, self.gate_b)
        return GateOutput(logits, ops.softmax(logits, axis=-1))

    def forward(self, ids, gate_weights=None) -> ForwardTrace:
        """Run the full pipeline.

        ``gate_weights`` (shape ``[N]`` or ``[B, N]``) replaces the learned gate,
        e.g. to force a one-hot routing; the gate logits are still reported.
        """
        ids = self._check_ids(ids)
        fused = self.fuse(self.embed(ids))
        outs = [expert(fused) for expert in self.experts]
        gate = None
        if self.cfg.use_gate:
            gate = self.gate(fused)
            g = gate.weights
            if gate_weights is not None:
                g = Tensor(np.broadcast_to(np.asarray(gate_weights, dtype=float), gate.weights.shape))
            mixed = outs[0] * g[:, 0:1]
            for i in range(1, len(outs)):
                mixed = mixed + outs[i] * g[:, i:i + 1]
        else:
            mixed = outs[0]
        poi, cat = self._decode(mixed)
        return ForwardTrace(fused, gate, outs, mixed, poi, cat)


# ------------------------------------------------------------------ ranking

def rank_order(probs: np.ndarray) -> np.ndarray:
    """POI ids by descending probability, ties broken by smaller id."""
    return np.lexsort((np.arange(len(probs)), -probs))


def predict_topk(poi_logits, k: int) -> list[tuple[int, float]]:
    logits = np.asarray(poi_logits.data if isinstance(poi_logits, Tensor) else poi_logits, dtype=float)
    if logits.ndim != 1:
        raise ValueError("predict_topk takes one logit vector")
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if k > len(logits):
        raise ValueError(f"k={k} exceeds the number of POIs ({len(logits)})")
    probs = ops.softmax_np(logits)
    order = rank_order(probs)[:k]
    return [(int(i), float(probs[i])) for i in order]


def build_model(cfg: ModelConfig) -> MoETransMov:
    return MoETransMov(cfg)
