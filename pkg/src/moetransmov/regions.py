"""Main activity regions, per-user region profiles and familiar/unfamiliar labeling."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataio import FAMILIAR, UNFAMILIAR, Poi, TrajectorySession

_OFFSET = 1 << 20
_STRIDE = 1 << 21
DAY = 86400


@dataclass(frozen=True)
class RegionGrid:
    """Uniform lat/lon grid; a region is one cell."""

    cell_deg: float = 0.01
    origin: tuple[float, float] = (-90.0, -180.0)  # (lat0, lon0)

    def __post_init__(self):
        if not self.cell_deg > 0:
            raise ValueError(f"cell_deg must be positive, got {self.cell_deg}")

    def cell(self, lat: float, lon: float) -> tuple[int, int]:
        lat0, lon0 = self.origin
        return math.floor((lat - lat0) / self.cell_deg), math.floor((lon - lon0) / self.cell_deg)


def encode_cell(row: int, col: int) -> int:
    return (row + _OFFSET) * _STRIDE + (col + _OFFSET)


def decode_region(region_id: int) -> tuple[int, int]:
    row, col = divmod(region_id, _STRIDE)
    return row - _OFFSET, col - _OFFSET


def region_of(lat: float, lon: float, grid: RegionGrid) -> int:
    return encode_cell(*grid.cell(lat, lon))


# --------------------------------------------------------------- mean shift

@dataclass(frozen=True)
class MeanShiftParams:
    bandwidth: float = 0.02
    max_iters: int = 300
    tol: float = 1e-7

    def __post_init__(self):
        if not (self.bandwidth > 0 and self.tol > 0 and self.max_iters >= 1):
            raise ValueError(f"invalid mean shift parameters: {self}")


@dataclass
class MeanShiftResult:
    mode: np.ndarray
    basin_size: int
    iterations: int
    n_modes: int


def mean_shift(points, params: MeanShiftParams = MeanShiftParams()) -> MeanShiftResult:
    """Flat-kernel mean shift started from every point; returns the largest-basin mode.

    Each start repeatedly moves to the mean of the input points within
    ``bandwidth`` until the move is below ``tol``. Converged starts closer than
    ``bandwidth / 2`` share a mode. Ties between equally large basins go to the
    basin holding the lowest-index start.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("mean_shift needs a non-empty (n, dim) array of points")
    r2 = params.bandwidth ** 2
    x = pts.copy()
    active = np.ones(len(x), dtype=bool)
    iterations = 0
    while active.any() and iterations < params.max_iters:
        iterations += 1
        xa = x[active]
        d2 = ((xa[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
        inside = d2 <= r2
        counts = inside.sum(axis=1)
        new = np.where(counts[:, None] > 0, (inside @ pts) / np.maximum(counts, 1)[:, None], xa)
        moved = np.sqrt(((new - xa) ** 2).sum(axis=1))
        x[active] = new
        idx = np.flatnonzero(active)
        active[idx[moved < params.tol]] = False

    # group converged starts into modes, in start-index order
    labels = np.full(len(x), -1)
    reps: list[int] = []
    merge2 = (params.bandwidth / 2.0) ** 2
    for i in range(len(x)):
        for m, rep in enumerate(reps):
            if ((x[i] - x[rep]) ** 2).sum() < merge2:
                labels[i] = m
                break
        else:
            labels[i] = len(reps)
            reps.append(i)
    sizes = np.bincount(labels)
    best = int(np.argmax(sizes))  # first max == basin with the earliest representative
    return MeanShiftResult(x[reps[best]].copy(), int(sizes[best]), iterations, len(reps))


# --------------------------------------------------------------- profiles

@dataclass
class RegionProfile:
    user: int
    visit_counts: dict[int, int]
    main_region: int
    familiar_set: set[int] = field(default_factory=set)
    total_checkins: int = 0
    window_fallback: bool = False


def window_points(
    times: Sequence[int], coords: np.ndarray, window_days: float, window_start: int | None = None
) -> np.ndarray:
    """Coordinates within ``window_days`` calendar days (UTC) of the window start.

    The window starts at midnight of the record's first day unless an absolute
    ``window_start`` (epoch seconds, e.g. the dataset start) is given.
    """
    times = np.asarray(times)
    start = int(times.min()) if window_start is None else int(window_start)
    day0 = (start // DAY) * DAY
    return coords[(times >= day0) & (times < day0 + window_days * DAY)]


def main_activity_region(
    times: Sequence[int],
    coords,
    grid: RegionGrid,
    params: MeanShiftParams = MeanShiftParams(),
    window_days: float = 7,
    window_start: int | None = None,
) -> tuple[int, bool]:
    """Region holding the mean-shift mode of the profiling-window check-ins.

    ``coords`` is ``(n, 2)`` as (lat, lon). Returns ``(region_id, fallback)``;
    ``fallback`` is True when the window held no check-ins and the full record
    was used instead.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if len(coords) == 0:
        raise ValueError("main_activity_region needs at least one check-in")
    pts = window_points(times, coords, window_days, window_start)
    fallback = len(pts) == 0
    if fallback:
        pts = coords
    mode = mean_shift(pts, params).mode
    return region_of(mode[0], mode[1], grid), fallback


def familiar_regions(visit_counts: Mapping[int, int], main_region: int, top: int = 3) -> set[int]:
    ranked = sorted(visit_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {r for r, _ in ranked[:top]} | {main_region}


def build_profile(
    user: int,
    times: Sequence[int],
    coords,
    grid: RegionGrid,
    params: MeanShiftParams = MeanShiftParams(),
    window_days: float = 7,
    window_start: int | None = None,
) -> RegionProfile:
    """Visit counts over the whole record; familiar set = top-3 regions plus the main region."""
    coords = np.asarray(coords, dtype=np.float64)
    main, fallback = main_activity_region(times, coords, grid, params, window_days, window_start)
    counts = Counter(region_of(lat, lon, grid) for lat, lon in coords)
    return RegionProfile(
        user=user,
        visit_counts=dict(counts),
        main_region=main,
        familiar_set=familiar_regions(counts, main),
        total_checkins=len(coords),
        window_fallback=fallback,
    )


def build_profiles(
    sessions: Iterable[TrajectorySession],
    pois: Sequence[Poi],
    grid: RegionGrid,
    params: MeanShiftParams = MeanShiftParams(),
    window_days: float = 7,
    window_start: int | None = None,
) -> dict[int, RegionProfile]:
    """One profile per user from the given sessions.

    Pass only training-period sessions here to keep validation check-ins out of
    the profiles; the default pipeline profiles from the full history.
    """
    per_user: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for s in sessions:
        per_user[s.user].extend(zip(s.time_seq, s.poi_seq))
    profiles = {}
    for user in sorted(per_user):
        visits = sorted(per_user[user], key=lambda tp: tp[0])
        times = [t for t, _ in visits]
        coords = np.array([(pois[p].lat, pois[p].lon) for _, p in visits])
        profiles[user] = build_profile(user, times, coords, grid, params, window_days, window_start)
    return profiles


def label_movements(
    sessions: Iterable[TrajectorySession],
    profiles: Mapping[int, RegionProfile],
    pois: Sequence[Poi],
    grid: RegionGrid,
) -> list[TrajectorySession]:
    """Copies of ``sessions`` with every step labeled familiar or unfamiliar."""
    region_cache: dict[int, int] = {}
    out = []
    for s in sessions:
        if s.user not in profiles:
            raise KeyError(f"no region profile for user {s.user}")
        familiar = profiles[s.user].familiar_set
        labels = []
        for p in s.poi_seq:
            if p not in region_cache:
                region_cache[p] = region_of(pois[p].lat, pois[p].lon, grid)
            labels.append(FAMILIAR if region_cache[p] in familiar else UNFAMILIAR)
        out.append(TrajectorySession(s.user, list(s.poi_seq), list(s.time_seq), labels))
    return out


def write_profiles(path, profiles: Mapping[int, RegionProfile]) -> None:
    """``user<TAB>main_region<TAB>familiar_regions<TAB>total_checkins`` per line."""
    rows = []
    for user in sorted(profiles):
        p = profiles[user]
        fam = ",".join(str(r) for r in sorted(p.familiar_set))
        rows.append(f"{user}\t{p.main_region}\t{fam}\t{p.total_checkins}\n")
    Path(path).write_text("".join(rows), encoding="utf-8")


def read_profiles(path) -> dict[int, tuple[int, set[int], int]]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        user, main, fam, total = line.split("\t")
        out[int(user)] = (int(main), {int(r) for r in fam.split(",") if r}, int(total))
    return out
