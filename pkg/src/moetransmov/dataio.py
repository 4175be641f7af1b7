"""Check-in ingestion, sessionization, filtering, splitting and synthetic corpora."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

FAMILIAR = "f"
UNFAMILIAR = "u"
UNLABELED = "n"
LABELS = (FAMILIAR, UNFAMILIAR, UNLABELED)

FOURSQUARE_TIME_FMT = "%a %b %d %H:%M:%S %z %Y"
MAX_MALFORMED_FRACTION = 0.01


class MalformedInputError(ValueError):
    """Raised when an input file is too damaged to trust."""


@dataclass(frozen=True)
class Poi:
    id: int
    lon: float
    lat: float
    category: int


@dataclass(frozen=True)
class CheckIn:
    user: int
    poi: int
    timestamp: int  # epoch seconds, UTC


@dataclass
class TrajectorySession:
    user: int
    poi_seq: list[int]
    time_seq: list[int]
    familiarity_seq: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.familiarity_seq:
            self.familiarity_seq = [UNLABELED] * len(self.poi_seq)
        if not (len(self.poi_seq) == len(self.time_seq) == len(self.familiarity_seq)):
            raise ValueError("poi_seq, time_seq and familiarity_seq must have equal length")

    def __len__(self) -> int:
        return len(self.poi_seq)


@dataclass
class DatasetSplit:
    train: list[TrajectorySession]
    validation: list[TrajectorySession]
    poi_count: int
    category_count: int
    user_count: int


@dataclass
class CheckinTable:
    """Parsed check-ins plus the dense id maps built while reading them."""

    checkins: list[CheckIn]
    pois: list[Poi]
    user_ids: dict[str, int] = field(default_factory=dict)
    venue_ids: dict[str, int] = field(default_factory=dict)
    category_ids: dict[str, int] = field(default_factory=dict)
    skipped: list[tuple[int, str]] = field(default_factory=list)

    @property
    def poi_count(self) -> int:
        return len(self.pois)


# ------------------------------------------------------------------ parsing

def _dense(table: dict[str, int], key: str) -> int:
    if key not in table:
        table[key] = len(table)
    return table[key]


def parse_foursquare(path) -> CheckinTable:
    """Read an 8-column Foursquare TSV.

    Malformed lines are skipped and recorded as ``(line_number, reason)``; more
    than 1% malformed lines aborts with :class:`MalformedInputError`. The
    timezone-offset column is ignored and times are kept in UTC.
    """
    table = CheckinTable(checkins=[], pois=[])
    venue_info: dict[int, tuple[float, float, int]] = {}
    n_lines = 0
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            n_lines += 1
            parts = line.split("\t")
            if len(parts) != 8:
                table.skipped.append((lineno, f"expected 8 fields, got {len(parts)}"))
                continue
            user, venue, cat_id, _cat_name, lat_s, lon_s, _tz, time_s = parts
            try:
                lat, lon = float(lat_s), float(lon_s)
            except ValueError:
                table.skipped.append((lineno, f"unparseable coordinates {lat_s!r}, {lon_s!r}"))
                continue
            if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0) or math.isnan(lat + lon):
                table.skipped.append((lineno, f"coordinates out of range ({lat}, {lon})"))
                continue
            try:
                ts = int(datetime.strptime(time_s.strip(), FOURSQUARE_TIME_FMT).timestamp())
            except ValueError:
                table.skipped.append((lineno, f"unparseable time {time_s!r}"))
                continue
            u = _dense(table.user_ids, user)
            v = _dense(table.venue_ids, venue)
            c = _dense(table.category_ids, cat_id)
            venue_info.setdefault(v, (lon, lat, c))
            table.checkins.append(CheckIn(user=u, poi=v, timestamp=ts))

    for lineno, reason in table.skipped:
        log.warning("%s:%d: skipped (%s)", path, lineno, reason)
    if n_lines and len(table.skipped) > MAX_MALFORMED_FRACTION * n_lines:
        first = table.skipped[0]
        raise MalformedInputError(
            f"{path}: {len(table.skipped)} of {n_lines} lines malformed "
            f"(first at line {first[0]}: {first[1]})"
        )
    table.pois = [Poi(i, *venue_info[i]) for i in range(len(table.venue_ids))]
    return table


# ---------------------------------------------------------------- sessions

def sessionize(checkins: Iterable[CheckIn], gap_hours: float = 24.0) -> list[TrajectorySession]:
    """Cut each user's time-ordered check-ins wherever the gap exceeds ``gap_hours``."""
    by_user: dict[int, list[CheckIn]] = defaultdict(list)
    for c in checkins:
        by_user[c.user].append(c)
    gap = gap_hours * 3600.0
    sessions = []
    for user in sorted(by_user):
        items = sorted(by_user[user], key=lambda c: c.timestamp)  # stable
        current: list[CheckIn] = []
        for c in items:
            if current and c.timestamp - current[-1].timestamp > gap:
                sessions.append(_to_session(user, current))
                current = []
            current.append(c)
        if current:
            sessions.append(_to_session(user, current))
    return sessions


def _to_session(user: int, items: Sequence[CheckIn]) -> TrajectorySession:
    return TrajectorySession(user, [c.poi for c in items], [c.timestamp for c in items])


def filter_dataset(
    sessions: Sequence[TrajectorySession], min_len: int = 10, min_sessions: int = 10
) -> list[TrajectorySession]:
    """Drop short sessions, then users left with too few sessions (once, in that order)."""
    kept = [s for s in sessions if len(s) >= min_len]
    per_user: dict[int, int] = defaultdict(int)
    for s in kept:
        per_user[s.user] += 1
    return [s for s in kept if per_user[s.user] >= min_sessions]


def split_dataset(
    sessions: Sequence[TrajectorySession],
    train_fraction: float = 0.8,
    seed: int = 0,
    pois: Sequence[Poi] | None = None,
) -> DatasetSplit:
    """Seeded shuffle, then a session-level train/validation cut (floor on the train side)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(sessions)
    if n < 2:
        raise ValueError(f"need at least 2 sessions to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(math.floor(n * train_fraction + 1e-9)), 1), n - 1)
    shuffled = [sessions[i] for i in order]
    poi_count = max(max(s.poi_seq) for s in sessions) + 1
    if pois is not None:
        poi_count = max(poi_count, len(pois))
        category_count = max((p.category for p in pois), default=-1) + 1
    else:
        category_count = 0
    return DatasetSplit(
        train=shuffled[:n_train],
        validation=shuffled[n_train:],
        poi_count=poi_count,
        category_count=category_count,
        user_count=len({s.user for s in sessions}),
    )


# ------------------------------------------------------------ canonical files

def write_sessions(path, sessions: Iterable[TrajectorySession]) -> None:
    """One line per session: ``user<TAB>pois<TAB>times<TAB>labels`` (comma-separated)."""
    lines = []
    for s in sessions:
        lines.append("\t".join([
            str(s.user),
            ",".join(map(str, s.poi_seq)),
            ",".join(map(str, s.time_seq)),
            ",".join(s.familiarity_seq),
        ]))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_sessions(path) -> list[TrajectorySession]:
    sessions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                user, pois, times, labels = line.split("\t")
                labs = labels.split(",")
                if any(lab not in LABELS for lab in labs):
                    raise ValueError(f"unknown familiarity label in {labels!r}")
                sessions.append(TrajectorySession(
                    int(user), [int(p) for p in pois.split(",")], [int(t) for t in times.split(",")], labs,
                ))
            except ValueError as exc:
                raise MalformedInputError(f"{path}:{lineno}: {exc}") from None
    return sessions


def write_pois(path, pois: Iterable[Poi]) -> None:
    """POI table: ``poi_id<TAB>lon<TAB>lat<TAB>category``; floats written with repr for exact round-trip."""
    Path(path).write_text(
        "".join(f"{p.id}\t{float(p.lon)!r}\t{float(p.lat)!r}\t{p.category}\n" for p in pois), encoding="utf-8"
    )


def read_pois(path) -> list[Poi]:
    pois = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                pid, lon, lat, cat = line.rstrip("\n").split("\t")
                pois.append(Poi(int(pid), float(lon), float(lat), int(cat)))
            except ValueError as exc:
                raise MalformedInputError(f"{path}:{lineno}: {exc}") from None
    if [p.id for p in pois] != list(range(len(pois))):
        raise MalformedInputError(f"{path}: POI ids are not contiguous from 0")
    return pois


def write_id_map(path, table: CheckinTable) -> None:
    """Sidecar ``kind<TAB>raw_id<TAB>dense_id`` lines for users, venues and categories."""
    rows = []
    for kind, mapping in (("user", table.user_ids), ("venue", table.venue_ids), ("category", table.category_ids)):
        rows += [f"{kind}\t{raw}\t{dense}\n" for raw, dense in mapping.items()]
    Path(path).write_text("".join(rows), encoding="utf-8")


def read_id_map(path) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = {"user": {}, "venue": {}, "category": {}}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            kind, raw, dense = line.rstrip("\n").split("\t")
            out[kind][raw] = int(dense)
    return out


# --------------------------------------------------------- synthetic corpora

REGIMES = ("long", "short", "mixed", "revisit", "cycle")


@dataclass
class SynthSpec:
    """Shape of a generated corpus.

    Each user draws up to ``len(region_weights)`` distinct regions; the first is
    the home (main activity) region and the first three are the planted
    familiar set. Region visits follow a fixed slot pattern of length ``lag``
    whose per-region counts are ``region_weights`` rescaled to ``lag``.

    Regimes: ``long`` repeats a region-preserving permutation of the item
    ``lag`` steps back; ``short`` walks a slot cycle visiting each POI twice, so
    the next POI is fixed by the previous two; ``mixed`` picks one of those per
    session; ``revisit`` mostly returns to the user's favourite POI of the slot
    region; ``cycle`` follows one global successor map over all POIs.
    """

    n_users: int = 20
    n_regions: int = 10
    pois_per_region: int = 8
    sessions_per_user: int = 12
    session_len: int = 40
    regime: str = "mixed"
    lag: int = 20
    noise: float = 0.0
    revisit_prob: float = 0.9
    region_weights: tuple[int, ...] = (8, 5, 4, 2, 1)
    n_categories: int = 5
    cell_deg: float = 0.01
    origin: tuple[float, float] = (34.9, 135.6)  # (lat0, lon0)
    region_spacing_cells: int = 10
    checkin_gap_hours: float = 2.0
    session_gap_hours: float = 36.0
    start_time: int = 1672531200  # 2023-01-01T00:00:00Z


@dataclass
class UserTruth:
    home_cell: tuple[int, int]
    familiar_cells: set[tuple[int, int]]


@dataclass
class SynthCorpus:
    checkins: list[CheckIn]
    pois: list[Poi]
    truth: dict[int, UserTruth]
    labels: list[str]  # planted familiarity per check-in, aligned with ``checkins``
    session_regimes: list[str]
    poi_cell: list[tuple[int, int]]


def _slot_counts(weights: Sequence[int], total: int) -> list[int]:
    raw = np.asarray(weights, dtype=float) * total / float(sum(weights))
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _slot_pattern(counts: Sequence[int]) -> list[int]:
    # smooth weighted round robin: spreads each region evenly over the pattern
    current = [0] * len(counts)
    total = sum(counts)
    out = []
    for _ in range(total):
        for i, c in enumerate(counts):
            current[i] += c
        best = max(range(len(counts)), key=lambda i: (current[i], -i))
        current[best] -= total
        out.append(best)
    return out


def synth_corpus(spec: SynthSpec, seed: int = 0) -> SynthCorpus:
    """Generate check-ins with planted home regions, familiar sets and sequence regimes."""
    if spec.n_users < 1 or spec.n_regions < 1 or spec.pois_per_region < 1:
        raise ValueError("synthetic corpus needs at least one user, region and POI")
    if spec.sessions_per_user < 1 or spec.session_len < 1 or spec.lag < 1:
        raise ValueError("sessions_per_user, session_len and lag must be positive")
    if spec.regime not in REGIMES:
        raise ValueError(f"unknown regime {spec.regime!r}; expected one of {REGIMES}")
    rng = np.random.default_rng(seed)
    ppr = spec.pois_per_region

    side = int(math.ceil(math.sqrt(spec.n_regions)))
    region_cell = [
        ((r // side) * spec.region_spacing_cells, (r % side) * spec.region_spacing_cells)
        for r in range(spec.n_regions)
    ]
    pois: list[Poi] = []
    poi_cell: list[tuple[int, int]] = []
    lat0, lon0 = spec.origin
    for r in range(spec.n_regions):
        row, col = region_cell[r]
        for _ in range(ppr):
            # keep points well inside the cell so floor() is unambiguous
            fy, fx = rng.uniform(0.2, 0.8, size=2)
            pois.append(Poi(
                id=len(pois),
                lon=float(lon0 + (col + fx) * spec.cell_deg),
                lat=float(lat0 + (row + fy) * spec.cell_deg),
                category=int(rng.integers(spec.n_categories)),
            ))
            poi_cell.append((row, col))
    region_pois = [list(range(r * ppr, (r + 1) * ppr)) for r in range(spec.n_regions)]
    global_succ = rng.permutation(len(pois))
    # region-preserving successor used by the long regime, shared by all users
    perm: dict[int, int] = {}
    for members in region_pois:
        perm.update({a: int(b) for a, b in zip(members, rng.permutation(members))})

    checkins: list[CheckIn] = []
    labels: list[str] = []
    truth: dict[int, UserTruth] = {}
    regimes_out: list[str] = []
    k = min(len(spec.region_weights), spec.n_regions)
    counts = _slot_counts(spec.region_weights[:k], spec.lag)
    pattern = _slot_pattern(counts)
    step = int(spec.checkin_gap_hours * 3600)

    for user in range(spec.n_users):
        pool = [int(r) for r in rng.choice(spec.n_regions, size=k, replace=False)]
        familiar = set(pool[:3])
        truth[user] = UserTruth(region_cell[pool[0]], {region_cell[r] for r in familiar})
        favourite = {r: int(rng.choice(region_pois[r])) for r in pool}
        # slot cycle for the short regime: distinct POIs while the region has enough
        seen: dict[int, int] = defaultdict(int)
        cycle = []
        for slot in pattern:
            r = pool[slot]
            cycle.append(region_pois[r][seen[r] % ppr])
            seen[r] += 1

        t_now = spec.start_time + user * 3600
        for _s in range(spec.sessions_per_user):
            regime = spec.regime
            if regime == "mixed":
                regime = "long" if rng.random() < 0.5 else "short"
            regimes_out.append(regime)
            seq = _generate_session(regime, spec, rng, pool, pattern, perm, favourite, cycle,
                                    region_pois, global_succ)
            for poi in seq:
                checkins.append(CheckIn(user, poi, t_now))
                labels.append(FAMILIAR if poi // ppr in familiar else UNFAMILIAR)
                t_now += step
            t_now += int(spec.session_gap_hours * 3600) - step
    return SynthCorpus(checkins, pois, truth, labels, regimes_out, poi_cell)


def _generate_session(regime, spec, rng, pool, pattern, perm, favourite, cycle, region_pois, global_succ):
    n, lag, noise = spec.session_len, spec.lag, spec.noise
    seq: list[int] = []
    if regime == "long":
        for t in range(n):
            region = pool[pattern[t % lag]]
            if t < lag or rng.random() < noise:
                seq.append(int(rng.choice(region_pois[region])))
            else:
                seq.append(perm[seq[t - lag]])
    elif regime == "short":
        # each slot POI is visited twice in a row before moving on
        start = int(rng.integers(len(cycle)))
        for t in range(n):
            slot = (start + t // 2) % len(cycle)
            poi = cycle[slot]
            if rng.random() < noise:
                poi = int(rng.choice(region_pois[pool[pattern[slot]]]))
            seq.append(poi)
    elif regime == "revisit":
        for t in range(n):
            region = pool[pattern[t % lag]]
            if rng.random() < spec.revisit_prob:
                seq.append(favourite[region])
            else:
                seq.append(int(rng.choice(region_pois[region])))
    else:  # cycle
        poi = int(rng.integers(len(global_succ)))
        for _ in range(n):
            seq.append(poi)
            poi = int(global_succ[poi])
    return seq
