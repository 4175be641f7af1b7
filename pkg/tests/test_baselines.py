from collections import Counter

import numpy as np
import pytest

from moetransmov.baselines import MajorityModel, lstm_model, majority_predict, mlp_model, transformer_model
from moetransmov.numerics import grad_check
from moetransmov.training import TrainingWindow, build_variant

from _support import FD_STEP, condition_for_fd, mini_cfg


def _w(user, target):
    return TrainingWindow((0,), target, 0, "n", user)


# ---------------------------------------------------------------- majority

def test_majority_user_history():
    a, b = 3, 1
    ws = [_w(0, a)] * 5 + [_w(0, b)] * 2
    assert majority_predict(MajorityModel.fit(ws, 6), 0, 2) == [a, b]


def test_majority_unseen_user_uses_global_ranking():
    ws = [_w(0, 4)] * 3 + [_w(1, 2)] * 5 + [_w(1, 4)]
    m = MajorityModel.fit(ws, 6)
    assert majority_predict(m, 99, 3) == [2, 4, 0]


def test_majority_backfills_after_user_pois():
    ws = [_w(0, 5)] + [_w(1, 2)] * 3
    assert MajorityModel.fit(ws, 6).predict(0, 3) == [5, 2, 0]


def test_majority_rejects_nonpositive_k():
    with pytest.raises(ValueError):
        MajorityModel.fit([_w(0, 1)], 3).predict(0, 0)


def test_majority_matches_recount_oracle():
    rng = np.random.default_rng(0)
    ws = [_w(int(rng.integers(100)), int(rng.integers(30))) for _ in range(3000)]
    m = MajorityModel.fit(ws, 30)
    for user in range(100):
        counts = Counter(w.target_poi for w in ws if w.user == user)
        best = max(counts.values())
        expected_top = min(p for p, c in counts.items() if c == best)
        assert m.predict(user, 1) == [expected_top]
        assert sorted(m.ranking(user)) == list(range(30))


def test_majority_ranks_agree_with_ranking():
    rng = np.random.default_rng(1)
    ws = [_w(int(rng.integers(5)), int(rng.integers(12))) for _ in range(200)]
    m = MajorityModel.fit(ws, 12)
    ranks = m.truth_ranks(ws)
    for w, r in zip(ws, ranks):
        assert m.ranking(w.user).index(w.target_poi) + 1 == r


# ---------------------------------------------------------------- neural baselines

def test_transformer_baseline_is_no_moe_variant():
    cfg = mini_cfg(seed=4)
    a, b = transformer_model(cfg), build_variant("no_moe", cfg)
    ids = np.random.default_rng(0).integers(0, 10, size=(3, 5))
    assert np.array_equal(a.poi_logits(ids), b.poi_logits(ids))


def test_mlp_is_permutation_invariant():
    m = mlp_model(mini_cfg())
    ids = np.array([[1, 5, 2, 8, 3]])
    assert np.allclose(m.poi_logits(ids), m.poi_logits(ids[:, ::-1]), atol=1e-14)


def test_lstm_baseline_is_order_sensitive():
    m = lstm_model(mini_cfg())
    m.poi_emb.data *= 50
    ids = np.array([[1, 5, 2, 8, 3]])
    assert not np.allclose(m.poi_logits(ids), m.poi_logits(ids[:, ::-1]))


def test_lstm_baseline_has_no_projection():
    names = list(lstm_model(mini_cfg()).named_parameters())
    assert "lstm.out.w" not in names and "head_poi.hidden.w" in names


@pytest.mark.parametrize("ctor", [mlp_model, lstm_model, transformer_model])
def test_baseline_gradients(ctor):
    rng = np.random.default_rng(0)
    m = ctor(mini_cfg())
    condition_for_fd(m, rng)
    ids = rng.integers(0, 10, size=(2, 6))
    tp, tc = rng.integers(0, 10, size=2), rng.integers(0, 4, size=2)
    assert grad_check(lambda: m.loss(ids, tp, tc), m.parameters(), h=FD_STEP) < 1e-4


def test_majority_save_load(tmp_path):
    rng = np.random.default_rng(2)
    ws = [_w(int(rng.integers(4)), int(rng.integers(9))) for _ in range(50)]
    m = MajorityModel.fit(ws, 9)
    m.save(tmp_path / "maj.tsv")
    back = MajorityModel.load(tmp_path / "maj.tsv")
    assert back.per_user_counts == m.per_user_counts and back.global_counts == m.global_counts
    assert all(back.ranking(u) == m.ranking(u) for u in range(6))
