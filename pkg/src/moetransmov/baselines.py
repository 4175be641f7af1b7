"""Reference predictors: Majority Vote, MLP, LSTM-only and Transformer-only."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import ForwardTrace, Linear, LSTMExpert, ModelConfig, MoETransMov, NextPoiModel, ParamStore
from .numerics import ops
from .training import TrainingWindow, variant_config

MLP_HIDDEN = (128, 128)


@dataclass
class MajorityModel:
    """Most-visited POIs per user from training windows, backed by global popularity."""

    poi_count: int
    per_user_counts: dict[int, Counter] = field(default_factory=dict)
    global_counts: Counter = field(default_factory=Counter)

    @classmethod
    def fit(cls, windows: Iterable[TrainingWindow], poi_count: int) -> "MajorityModel":
        per_user: dict[int, Counter] = defaultdict(Counter)
        overall: Counter = Counter()
        for w in windows:
            per_user[w.user][w.target_poi] += 1
            overall[w.target_poi] += 1
        return cls(poi_count, dict(per_user), overall)

    def _global_order(self) -> list[int]:
        if getattr(self, "_order", None) is None:
            self._order = sorted(range(self.poi_count), key=lambda p: (-self.global_counts.get(p, 0), p))
        return self._order

    def ranking(self, user: int) -> list[int]:
        """Full ranking: the user's POIs by count, then the rest by global count; ties to smaller id."""
        own = self.per_user_counts.get(user, Counter())
        head = sorted(own, key=lambda p: (-own[p], p))
        seen = set(head)
        return head + [p for p in self._global_order() if p not in seen]

    def predict(self, user: int, k: int) -> list[int]:
        if k <= 0:
            raise ValueError(f"k must be positive, got {k}")
        return self.ranking(user)[:k]

    def truth_ranks(self, windows: Sequence[TrainingWindow]) -> np.ndarray:
        cache: dict[int, np.ndarray] = {}
        out = np.zeros(len(windows), dtype=np.int64)
        for i, w in enumerate(windows):
            if w.user not in cache:
                pos = np.empty(self.poi_count, dtype=np.int64)
                pos[self.ranking(w.user)] = np.arange(1, self.poi_count + 1)
                cache[w.user] = pos
            out[i] = cache[w.user][w.target_poi]
        return out


    def save(self, path) -> None:
        """``user<TAB>poi<TAB>count`` rows; user ``*`` holds the global counts."""
        rows = [f"#poi_count\t{self.poi_count}\n"]
        for user in sorted(self.per_user_counts):
            c = self.per_user_counts[user]
            rows.extend(f"{user}\t{p}\t{c[p]}\n" for p in sorted(c))
        rows.extend(f"*\t{p}\t{self.global_counts[p]}\n" for p in sorted(self.global_counts))
        Path(path).write_text("".join(rows), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MajorityModel":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        poi_count = int(lines[0].split("\t")[1])
        per_user: dict[int, Counter] = defaultdict(Counter)
        overall: Counter = Counter()
        for line in lines[1:]:
            user, poi, count = line.split("\t")
            target = overall if user == "*" else per_user[int(user)]
            target[int(poi)] = int(count)
        return cls(poi_count, dict(per_user), overall)


def majority_predict(model: MajorityModel, user: int, k: int) -> list[int]:
    return model.predict(user, k)


class MLPModel(NextPoiModel):
    """Mean-pooled POI embeddings through two GeLU layers into the decoder heads."""

    def __init__(self, cfg: ModelConfig, hidden: tuple[int, int] = MLP_HIDDEN):
        self.cfg = cfg
        self.store = store = ParamStore(cfg.seed)
        self.poi_emb = store.normal("poi_emb", (cfg.poi_count, cfg.d_model))
        self.fc1 = Linear(store, "mlp.fc1", cfg.d_model, hidden[0])
        self.fc2 = Linear(store, "mlp.fc2", hidden[0], hidden[1])
        self._build_heads(hidden[1])

    def forward(self, ids, **kw) -> ForwardTrace:
        ids = self._check_ids(ids)
        emb = ops.embedding(ids, self.poi_emb)
        h = ops.gelu(self.fc2(ops.gelu(self.fc1(ops.mean(emb, axis=1)))))
        poi, cat = self._decode(h)
        return ForwardTrace(emb, None, [], h, poi, cat)


class LSTMModel(NextPoiModel):
    """POI embeddings through a stacked LSTM; the last hidden state feeds the heads."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.store = store = ParamStore(cfg.seed)
        self.poi_emb = store.normal("poi_emb", (cfg.poi_count, cfg.d_model))
        self.lstm = LSTMExpert(store, "lstm", cfg, project=False)
        self._build_heads(cfg.lstm_hidden)

    def forward(self, ids, **kw) -> ForwardTrace:
        ids = self._check_ids(ids)
        emb = ops.embedding(ids, self.poi_emb)
        h = self.lstm.last_hidden(emb)
        poi, cat = self._decode(h)
        return ForwardTrace(emb, None, [], h, poi, cat)


def mlp_model(cfg: ModelConfig) -> MLPModel:
    return MLPModel(cfg)


def lstm_model(cfg: ModelConfig) -> LSTMModel:
    return LSTMModel(cfg)


def transformer_model(cfg: ModelConfig) -> MoETransMov:
    """The gateless single-Transformer variant, built through the main model class."""
    return MoETransMov(replace(cfg, **variant_config("no_moe")))


BASELINES = {"mlp": mlp_model, "lstm": lstm_model, "transformer": transformer_model}
