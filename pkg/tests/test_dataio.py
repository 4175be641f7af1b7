import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moetransmov.dataio import (
    FAMILIAR,
    UNLABELED,
    CheckIn,
    MalformedInputError,
    SynthSpec,
    TrajectorySession,
    filter_dataset,
    parse_foursquare,
    read_id_map,
    read_pois,
    read_sessions,
    sessionize,
    split_dataset,
    synth_corpus,
    write_id_map,
    write_pois,
    write_sessions,
)

ROW = "{u}\t{v}\t4bf58dd8d48988d1{c}\tBar\t{lat}\t{lon}\t-240\t{t}\n"


def _fsq_line(u="470", v="49bbd6c0f964a520f4531fe3", c="27941735", lat="40.719810", lon="-74.002581",
              t="Tue Apr 03 18:00:09 +0000 2012"):
    return ROW.format(u=u, v=v, c=c, lat=lat, lon=lon, t=t)


# ------------------------------------------------------------------ parsing

def test_parse_three_lines_two_venues(tmp_path):
    f = tmp_path / "fsq.tsv"
    f.write_text(
        _fsq_line(v="A", t="Tue Apr 03 18:00:09 +0000 2012")
        + _fsq_line(v="B", t="Tue Apr 03 18:10:09 +0000 2012")
        + _fsq_line(u="9", v="A", t="Tue Apr 03 19:00:09 +0000 2012")
    )
    table = parse_foursquare(f)
    assert len(table.checkins) == 3
    assert table.poi_count == 2
    assert {p.id for p in table.pois} == {0, 1}
    assert [c.poi for c in table.checkins] == [0, 1, 0]
    assert [c.user for c in table.checkins] == [0, 0, 1]
    assert table.checkins[0].timestamp == 1333476009  # 2012-04-03T18:00:09Z
    assert table.pois[0].lat == pytest.approx(40.719810)


def test_parse_empty_file(tmp_path):
    f = tmp_path / "empty.tsv"
    f.write_text("")
    table = parse_foursquare(f)
    assert table.checkins == [] and table.poi_count == 0


def test_parse_skips_bad_latitude(tmp_path):
    f = tmp_path / "fsq.tsv"
    lines = [_fsq_line(v=f"V{i}") for i in range(150)]
    lines[42] = _fsq_line(lat="abc")
    f.write_text("".join(lines))
    table = parse_foursquare(f)
    assert len(table.skipped) == 1
    assert table.skipped[0][0] == 43
    assert len(table.checkins) == 149


def test_parse_aborts_over_one_percent(tmp_path):
    f = tmp_path / "fsq.tsv"
    lines = [_fsq_line() for _ in range(50)]
    lines[3] = "not\tenough\tfields\n"
    f.write_text("".join(lines))
    with pytest.raises(MalformedInputError, match="line 4"):
        parse_foursquare(f)


# --------------------------------------------------------------- sessionize

def _hourly(user, n, start=0, step=3600):
    return [CheckIn(user, i, start + i * step) for i in range(n)]


def test_sessionize_single_run():
    sessions = sessionize(_hourly(0, 5))
    assert [len(s) for s in sessions] == [5]
    assert sessions[0].familiarity_seq == [UNLABELED] * 5


def test_sessionize_splits_on_long_gap():
    cs = _hourly(0, 2) + [CheckIn(0, 9, 3600 + 30 * 3600 + k * 3600) for k in range(3)]
    assert [len(s) for s in sessionize(cs, gap_hours=24)] == [2, 3]


def test_sessionize_gap_equal_to_threshold_does_not_split():
    cs = [CheckIn(0, 0, 0), CheckIn(0, 1, 24 * 3600)]
    assert len(sessionize(cs, gap_hours=24)) == 1


def test_sessionize_random_matches_gap_counter():
    rng = np.random.default_rng(0)
    gaps = rng.exponential(12 * 3600, size=999)
    times = np.concatenate([[0], np.cumsum(gaps)]).astype(int)
    cs = [CheckIn(3, int(rng.integers(50)), int(t)) for t in times]
    # independent single-pass counter
    expected = 1
    for a, b in zip(times[:-1], times[1:]):
        if b - a > 24 * 3600:
            expected += 1
    sessions = sessionize(cs, gap_hours=24)
    assert len(sessions) == expected
    assert sum(len(s) for s in sessions) == 1000


def test_sessionize_empty():
    assert sessionize([]) == []


def test_sessionize_sorts_within_user():
    cs = [CheckIn(1, 5, 200), CheckIn(1, 6, 100), CheckIn(0, 7, 50)]
    sessions = sessionize(cs)
    assert [s.user for s in sessions] == [0, 1]
    assert sessions[1].poi_seq == [6, 5]


# ------------------------------------------------------------------- filter

def _sessions(user, lengths):
    return [TrajectorySession(user, list(range(n)), list(range(n))) for n in lengths]


def test_filter_keeps_qualifying_user():
    s = _sessions(0, [12] * 12)
    assert filter_dataset(s) == s


def test_filter_rule_order():
    # 3 short sessions go first, leaving 9 < 10 sessions, so the user goes too
    s = _sessions(0, [12] * 9 + [9] * 3) + _sessions(1, [10] * 10)
    out = filter_dataset(s)
    assert {x.user for x in out} == {1}
    assert len(out) == 10


def test_filter_empty():
    assert filter_dataset([]) == []


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(1, 15)), max_size=80))
def test_filter_is_idempotent(spec):
    sessions = [TrajectorySession(u, [0] * n, list(range(n))) for u, n in spec]
    once = filter_dataset(sessions)
    assert filter_dataset(once) == once
    assert all(len(s) >= 10 for s in once)
    users = {s.user for s in once}
    assert all(sum(1 for s in once if s.user == u) >= 10 for u in users)


# -------------------------------------------------------------------- split

def _n_sessions(n):
    return [TrajectorySession(i % 7, [i % 13, (i + 1) % 13], [0, 1]) for i in range(n)]


def test_split_eight_two():
    split = split_dataset(_n_sessions(10), 0.8, seed=0)
    assert (len(split.train), len(split.validation)) == (8, 2)


def test_split_floor_on_train_side():
    split = split_dataset(_n_sessions(1003), 0.8, seed=1)
    assert (len(split.train), len(split.validation)) == (802, 201)


def test_split_deterministic():
    s = _n_sessions(50)
    a, b = split_dataset(s, seed=4), split_dataset(s, seed=4)
    assert [id(x) for x in a.train] == [id(x) for x in b.train]
    assert [id(x) for x in split_dataset(s, seed=5).train] != [id(x) for x in a.train]


def test_split_needs_two_sessions():
    with pytest.raises(ValueError):
        split_dataset(_n_sessions(1))


def test_split_counts():
    split = split_dataset(_n_sessions(30))
    assert split.poi_count == 13
    assert split.user_count == 7


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 300), st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_split_partitions_exactly(n, seed, frac):
    s = _n_sessions(n)
    split = split_dataset(s, frac, seed=seed)
    ids = [id(x) for x in split.train + split.validation]
    assert sorted(ids) == sorted(id(x) for x in s)
    assert abs(len(split.train) / n - frac) <= 1.0 / n + 1e-12 or len(split.train) in (1, n - 1)


# --------------------------------------------------------------- file round trips

def test_sessions_round_trip(tmp_path):
    corpus = synth_corpus(SynthSpec(n_users=3, sessions_per_user=4, session_len=25), seed=1)
    sessions = sessionize(corpus.checkins)
    sessions[0].familiarity_seq[0] = FAMILIAR
    path = tmp_path / "sessions.tsv"
    write_sessions(path, sessions)
    back = read_sessions(path)
    assert back == sessions
    write_sessions(tmp_path / "again.tsv", back)
    assert (tmp_path / "again.tsv").read_bytes() == path.read_bytes()


def test_parse_sessionize_reserialization_idempotent(tmp_path):
    f = tmp_path / "fsq.tsv"
    lines = []
    for i in range(30):
        hour = 10 + (i % 10)
        day = 3 + i // 10 * 2
        lines.append(_fsq_line(u=str(i % 2), v=f"V{i % 7}", t=f"Tue Apr {day:02d} {hour}:00:00 +0000 2012"))
    f.write_text("".join(lines))
    table = parse_foursquare(f)
    sessions = sessionize(table.checkins)
    write_sessions(tmp_path / "s.tsv", sessions)
    write_pois(tmp_path / "p.tsv", table.pois)
    write_id_map(tmp_path / "ids.txt", table)
    assert read_sessions(tmp_path / "s.tsv") == sessions
    assert read_pois(tmp_path / "p.tsv") == table.pois
    assert read_id_map(tmp_path / "ids.txt")["venue"] == table.venue_ids


def test_read_sessions_reports_line(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("0\t1,2\t3,4\tn,n\n0\t1,x\t3,4\tn,n\n")
    with pytest.raises(MalformedInputError, match=":2:"):
        read_sessions(path)


# ---------------------------------------------------------------- synthetic

def test_synth_single_region():
    spec = SynthSpec(n_users=1, n_regions=1, pois_per_region=5, sessions_per_user=1, session_len=30,
                     regime="long")
    corpus = synth_corpus(spec, seed=0)
    assert len(corpus.checkins) == 30
    assert {corpus.poi_cell[c.poi] for c in corpus.checkins} == {(0, 0)}


def test_synth_long_regime_is_lag_deterministic():
    spec = SynthSpec(regime="long", n_users=6, sessions_per_user=5, session_len=60)
    corpus = synth_corpus(spec, seed=3)
    succ = {}
    for s in sessionize(corpus.checkins):
        for t in range(20, len(s)):
            prev, cur = s.poi_seq[t - 20], s.poi_seq[t]
            assert succ.setdefault(prev, cur) == cur
    assert len(succ) > 10


def test_synth_short_regime_depends_on_two_steps():
    spec = SynthSpec(regime="short", n_users=6, sessions_per_user=5, session_len=40)
    corpus = synth_corpus(spec, seed=3)
    for user in range(6):
        succ = {}
        for s in sessionize(c for c in corpus.checkins if c.user == user):
            for t in range(2, len(s)):
                key = (s.poi_seq[t - 2], s.poi_seq[t - 1])
                assert succ.setdefault(key, s.poi_seq[t]) == s.poi_seq[t]


def test_synth_seeds_differ_same_shape():
    spec = SynthSpec(n_users=4, sessions_per_user=3)
    a, b = synth_corpus(spec, seed=0), synth_corpus(spec, seed=1)
    assert len(a.checkins) == len(b.checkins)
    assert [c.poi for c in a.checkins] != [c.poi for c in b.checkins]
    again = synth_corpus(spec, seed=0)
    assert a.checkins == again.checkins and a.pois == again.pois


def test_synth_sessions_survive_filter():
    corpus = synth_corpus(SynthSpec(), seed=0)
    sessions = sessionize(corpus.checkins)
    assert len(sessions) == 20 * 12
    assert filter_dataset(sessions) == sessions


@pytest.mark.parametrize("bad", [dict(n_users=0), dict(pois_per_region=0), dict(regime="nope")])
def test_synth_rejects_inconsistent_spec(bad):
    with pytest.raises(ValueError):
        synth_corpus(SynthSpec(**bad))
