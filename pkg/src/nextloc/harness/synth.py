"""Synthetic cities: grid locations with POI archetypes and agents on a weekly schedule.

Agents move between home, work and leisure places following a Markov
kernel whose probabilities depend on the day type (weekday/weekend) and the
time slot. ``schedule_noise`` controls both timing jitter and the chance of
an exploratory visit to a uniformly random location; with zero noise and no
leisure candidates the generated sequence is periodic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from ..geo import MercatorPoint
from ..ingest import CityDataset, Location, VisitRecord, assemble_dataset, refit_norm_stats, virtual_coordinates
from ..poi import CITY_CATEGORIES

# index into CITY_CATEGORIES
ENTERTAINMENT, COMMERCIAL, EDUCATION, PUBLIC, RESIDENTIAL = range(5)
ARCHETYPES = ("entertainment", "commercial", "education", "public", "residential")
DEFAULT_MIX = (0.15, 0.25, 0.1, 0.1, 0.4)

HOME, WORK, LEISURE, EXPLORE = "home", "work", "leisure", "explore"
STATES = (HOME, WORK, LEISURE, EXPLORE)

# 2024-01-01 00:00 UTC, a Monday
EPOCH = 1704067200


@dataclass(frozen=True)
class SynthCitySpec:
    grid_rows: int = 10
    grid_cols: int = 10
    cell: float = 500.0
    n_agents: int = 200
    n_days: int = 28
    archetype_mix: tuple = DEFAULT_MIX
    schedule_noise: float = 0.1
    weekday_leisure: float = 0.3
    weekend_outing: float = 0.7
    seed: int = 7
    scale_x: float = 1.0
    scale_y: float = 1.0
    shift_x: float = 0.0
    shift_y: float = 0.0
    M: int = 30
    N: int = 6
    stride: int = 1
    name: str = "toybench"

    def __post_init__(self):
        if min(self.grid_rows, self.grid_cols, self.n_agents, self.n_days) <= 0 or self.cell <= 0:
            raise ValueError("grid, agent and day counts and cell size must be positive")
        if self.scale_x <= 0 or self.scale_y <= 0:
            raise ValueError("transform scales must be positive")
        if not 0 <= self.schedule_noise <= 1:
            raise ValueError("schedule_noise must lie in [0, 1]")
        mix = np.asarray(self.archetype_mix, dtype=float)
        if mix.shape != (5,) or np.any(mix < 0) or mix.sum() <= 0:
            raise ValueError("archetype_mix needs five nonnegative weights")


TOYBENCH = SynthCitySpec()


def transition_kernel(state: str, day_type: str, slot: str, spec: SynthCitySpec, has_leisure: bool = True) -> dict:
    """Next-state probabilities. ``None`` as a state means "stay, no new visit"."""
    eps = spec.schedule_noise
    if state == HOME and slot == "morning":
        if day_type == "weekday":
            return {WORK: 1 - eps, EXPLORE: eps}
        go = spec.weekend_outing if has_leisure else 0.0
        return {LEISURE: go * (1 - eps), None: (1 - go) * (1 - eps), EXPLORE: eps}
    if state == WORK and slot == "evening":
        go = spec.weekday_leisure if has_leisure else 0.0
        return {HOME: (1 - go) * (1 - eps), LEISURE: go * (1 - eps), EXPLORE: eps}
    if state == HOME and slot == "evening" and day_type == "weekend":
        go = 0.3 * spec.weekend_outing if has_leisure else 0.0
        return {LEISURE: go * (1 - eps), None: 1 - go * (1 - eps) - eps, EXPLORE: eps}
    if state in (LEISURE, EXPLORE):
        return {HOME: 1.0}
    return {None: 1.0}


def _draw(rng, probs: dict):
    keys = [k for k, v in probs.items() if v > 0]
    p = np.array([probs[k] for k in keys], dtype=float)
    return keys[rng.choice(len(keys), p=p / p.sum())]


def _poi_profiles(rng, archetype: np.ndarray) -> np.ndarray:
    base = np.full((len(archetype), 5), 2.0)
    base[np.arange(len(archetype)), archetype] = 20.0
    return rng.poisson(base).astype(float)


def _layout(spec: SynthCitySpec, rng):
    grid = virtual_coordinates(spec.grid_rows, spec.grid_cols, spec.cell)
    mix = np.asarray(spec.archetype_mix, dtype=float)
    n = spec.grid_rows * spec.grid_cols
    archetype = rng.choice(5, size=n, p=mix / mix.sum())
    profiles = _poi_profiles(rng, archetype)
    locations = []
    for lid in range(n):
        r, c = divmod(lid, spec.grid_cols)
        x, y = grid[r, c]
        locations.append(
            Location(lid, MercatorPoint(spec.scale_x * x + spec.shift_x, spec.scale_y * y + spec.shift_y), r, c, profiles[lid])
        )
    return locations, archetype


def _agent_places(rng, archetype, centers, n_locations):
    homes = np.flatnonzero(archetype == RESIDENTIAL)
    works = np.flatnonzero(np.isin(archetype, (COMMERCIAL, EDUCATION, PUBLIC)))
    fun = np.flatnonzero(archetype == ENTERTAINMENT)
    everything = np.arange(n_locations)
    home = int(rng.choice(homes if len(homes) else everything))
    pool = works[works != home] if len(works) else everything[everything != home]
    work = int(rng.choice(pool)) if len(pool) else home
    leisure_pool = fun[(fun != home) & (fun != work)]
    if len(leisure_pool):
        # the two entertainment places closest to home
        d = np.hypot(*(centers[leisure_pool] - centers[home]).T)
        leisure = [int(x) for x in leisure_pool[np.argsort(d, kind="stable")[:2]]]
    else:
        leisure = []
    return home, work, leisure


def _simulate_agent(rng, spec: SynthCitySpec, home: int, work: int, leisure: list, n_locations: int):
    """Visit records, per-visit state labels and the log of kernel draws for one agent."""
    jitter = 90.0 * spec.schedule_noise  # minutes
    visits, states, draws = [], [], []
    has_leisure = bool(leisure)

    def step(state, day_type, slot):
        nxt = _draw(rng, transition_kernel(state, day_type, slot, spec, has_leisure))
        draws.append((state, day_type, slot, nxt))
        return nxt

    def t(day, hour_float):
        minutes = hour_float * 60.0 + (rng.normal(0.0, jitter) if jitter > 0 else 0.0)
        return EPOCH + day * 86400 + int(round(minutes)) * 60

    def place(state):
        if state == HOME:
            return home
        if state == WORK:
            return work
        if state == LEISURE:
            return leisure[int(rng.integers(len(leisure)))] if len(leisure) > 1 else leisure[0]
        return int(rng.integers(n_locations))

    events = [(EPOCH, home, HOME)]
    state = HOME
    for day in range(spec.n_days):
        day_type = "weekday" if day % 7 < 5 else "weekend"
        morning = 8.5 if day_type == "weekday" else 11.0
        nxt = step(state, day_type, "morning")
        if nxt is not None:
            events.append((t(day, morning), place(nxt), nxt))
            state = nxt
            if state in (LEISURE, EXPLORE):
                events.append((t(day, morning + 3.0), home, HOME))
                state = HOME
        slot_state = state
        if slot_state == WORK:
            nxt = step(WORK, day_type, "evening")
            events.append((t(day, 18.0), place(nxt), nxt))
            state = nxt
        elif day_type == "weekend":
            nxt = step(HOME, day_type, "evening")
            if nxt is not None:
                events.append((t(day, 19.0), place(nxt), nxt))
                state = nxt
        if state in (LEISURE, EXPLORE):
            events.append((t(day, 20.5), home, HOME))
            state = HOME
    end = EPOCH + spec.n_days * 86400 + 8 * 3600
    events.append((end, home, HOME))
    # consecutive events at the same place merge into one stay
    merged = [events[0]]
    for ev in events[1:]:
        if ev[1] == merged[-1][1] or ev[0] <= merged[-1][0]:
            continue
        merged.append(ev)
    for (ts, loc, st), (ts_next, _, _) in zip(merged[:-1], merged[1:]):
        when = datetime.fromtimestamp(ts, tz=timezone.utc)
        visits.append(VisitRecord(loc, when.weekday(), when.hour, (ts_next - ts) / 60.0, float(ts)))
        states.append(st)
    return visits, states, draws


def synth_generate(spec: SynthCitySpec = TOYBENCH) -> CityDataset:
    """Deterministic synthetic city for a given spec (seed included)."""
    rng = np.random.default_rng(spec.seed)
    locations, archetype = _layout(spec, rng)
    n = len(locations)
    centers = np.array([loc.center for loc in locations])
    visits, labels, draws, places = {}, {}, {}, {}
    width = len(str(spec.n_agents))
    for a in range(spec.n_agents):
        user = f"u{a:0{width}d}"
        home, work, leisure = _agent_places(rng, archetype, centers, n)
        visits[user], labels[user], draws[user] = _simulate_agent(rng, spec, home, work, leisure, n)
        places[user] = (home, work, tuple(leisure))
    ds = assemble_dataset(
        spec.name, visits, locations, spec.M, spec.N, spec.stride, seed=spec.seed,
        categories=CITY_CATEGORIES, virtual=True,
    )
    ds.meta.update({"spec": spec, "states": labels, "draws": draws, "places": places, "archetype": archetype})
    return ds


def clone_city(dataset: CityDataset, scale=(1.0, 1.0), shift=(0.0, 0.0), id_permutation=None, name: str | None = None) -> CityDataset:
    """Same dynamics, affinely moved coordinates and relabelled location ids.

    ``id_permutation`` maps old id -> new id (dict or array indexed by old id).
    Normalization statistics are refit on the clone over the same split.
    """
    if scale[0] <= 0 or scale[1] <= 0:
        raise ValueError("scales must be positive")
    if id_permutation is None:
        remap = {loc.id: loc.id for loc in dataset.locations}
    elif isinstance(id_permutation, dict):
        remap = dict(id_permutation)
    else:
        remap = {loc.id: int(id_permutation[loc.id]) for loc in dataset.locations}
    if sorted(remap.values()) != sorted(remap):
        raise ValueError("id_permutation must be a bijection on the location ids")
    locations = [
        Location(
            remap[loc.id],
            MercatorPoint(scale[0] * loc.center[0] + shift[0], scale[1] * loc.center[1] + shift[1]),
            loc.grid_row,
            loc.grid_col,
            None if loc.poi_profile is None else loc.poi_profile.copy(),
        )
        for loc in dataset.locations
    ]

    def relabel(rec: VisitRecord) -> VisitRecord:
        return replace(rec, location_id=remap[rec.location_id])

    visits = {u: [relabel(r) for r in seq] for u, seq in dataset.visits.items()}
    pairs = [
        replace(p, history=tuple(map(relabel, p.history)), current=tuple(map(relabel, p.current)), target=remap[p.target])
        for p in dataset.pairs
    ]
    clone = CityDataset(
        name=name or f"{dataset.name}-clone",
        locations=sorted(locations, key=lambda loc: loc.id),
        pairs=pairs,
        norm_stats=dataset.norm_stats,
        dur_bounds=dataset.dur_bounds,
        split={k: v.copy() for k, v in dataset.split.items()},
        categories=list(dataset.categories),
        visits=visits,
        target_ts=None if dataset.target_ts is None else dataset.target_ts.copy(),
        virtual=dataset.virtual,
        norm_source=dataset.norm_source,
        meta={k: v for k, v in dataset.meta.items() if k in ("M", "N", "stride")},
    )
    clone.norm_stats = refit_norm_stats(clone, dataset.norm_source)
    return clone
