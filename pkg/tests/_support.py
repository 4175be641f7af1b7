"""Shared fixtures-as-functions for the test modules."""

import numpy as np

from moetransmov.model import ModelConfig


def mini_cfg(**kw):
    """The miniature full model: d=8, 1 encoder layer, 2 heads, LSTM hidden 6, C=10."""
    base = dict(poi_count=10, category_count=4, d_model=8, max_seq=16, train_seq_len=8, tf_layers=1,
                tf_heads=2, tf_ff=8, lstm_layers=2, lstm_hidden=6)
    base.update(kw)
    return ModelConfig(**base)


# central-difference step for whole-model checks; at 1e-5 the loss roundoff
# (about one ulp / 2h) swamps coordinates with |g| near 1e-8
FD_STEP = 1e-4


def condition_for_fd(model, rng):
    """Redraw lookup tables at unit scale.

    At the N(0, 0.02^2) init attention is nearly uniform and query/key
    gradients sit near 1e-9, below what h=1e-5 central differences resolve.
    """
    for name, p in model.named_parameters().items():
        if name.endswith("emb"):
            p.data[...] = rng.normal(size=p.data.shape)
