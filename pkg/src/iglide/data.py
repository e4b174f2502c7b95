"""Dataset ingestion: C-MAPSS / MILL parsing, RUL labelling, healthy selection,
min-max scaling, sensor grouping and a synthetic run-to-failure generator."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


class ParseError(DataError):
    pass


class RejectedUnitError(DataError):
    pass


class EmptyHealthySetError(DataError):
    pass


class GroupSpecError(DataError):
    pass


class UsageError(RuntimeError):
    pass


CMAPSS_SENSORS = [f"s_{i}" for i in range(1, 22)]
CMAPSS_SETTINGS = ["op_1", "op_2", "op_3"]
CMAPSS_N_COLUMNS = 26

# Sensor grouping used for C-MAPSS turbofan subsystems.
CMAPSS_GROUPS = (
    ("Fan", ("s_1", "s_5", "s_8", "s_13", "s_18", "s_19")),
    ("LPC", ("s_2",)),
    ("HPC", ("s_3", "s_7", "s_11")),
    ("Core", ("s_9", "s_14")),
    ("Pressure Turbine", ("s_4", "s_20", "s_21")),
    ("Other", ("s_6", "s_10", "s_12", "s_15", "s_16", "s_17")),
)

MILL_SENSORS = ["smcAC", "smcDC", "vib_table", "vib_spindle", "AE_table", "AE_spindle"]
MILL_GROUPS = (
    ("acoustic", ("AE_table", "AE_spindle")),
    ("vibration", ("vib_table", "vib_spindle")),
    ("current", ("smcAC", "smcDC")),
)

# Wear thresholds for MILL: healthy / moderate / severe / failed.
WEAR_HEALTHY = 0.20
WEAR_MODERATE = 0.50
WEAR_FAILURE = 0.70
MILL_PHASES = {
    "wear_0.00-0.70": (0.0, WEAR_FAILURE),
    "wear_0.20-0.70": (WEAR_HEALTHY, WEAR_FAILURE),
    "wear_0.50-0.70": (WEAR_MODERATE, WEAR_FAILURE),
}


@dataclass
class Trajectory:
    """One unit's time series. ``rul`` is per cycle; for test units it is offset
    from the ground-truth value at the last available cycle."""

    unit_id: int
    cycles: np.ndarray
    op_settings: np.ndarray
    sensors: np.ndarray
    rul: np.ndarray
    wear: np.ndarray | None = None
    flags: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.cycles)

    @property
    def target(self) -> float:
        """RUL at the last available cycle."""
        return float(self.rul[-1])


@dataclass
class TrajectorySet:
    units: list[Trajectory]
    channels: list[str]
    kind: str = "cmapss"
    settings: list[str] = field(default_factory=lambda: list(CMAPSS_SETTINGS))

    def __len__(self) -> int:
        return len(self.units)

    def __iter__(self):
        return iter(self.units)

    def stacked(self) -> np.ndarray:
        return np.concatenate([u.sensors for u in self.units], axis=0)

    def replace_units(self, units: list[Trajectory]) -> "TrajectorySet":
        return dataclasses.replace(self, units=units)


@dataclass(frozen=True)
class GroupSpec:
    """Ordered, disjoint partition of (a subset of) the channels."""

    groups: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self):
        seen: set[str] = set()
        if not self.groups:
            raise GroupSpecError("group spec has no groups")
        for name, chans in self.groups:
            if not chans:
                raise GroupSpecError(f"group {name!r} is empty")
            dup = seen.intersection(chans)
            if dup or len(set(chans)) != len(chans):
                raise GroupSpecError(f"group {name!r} repeats channels {sorted(dup) or list(chans)}")
            seen.update(chans)

    @classmethod
    def from_mapping(cls, mapping) -> "GroupSpec":
        if isinstance(mapping, dict):
            items = mapping.items()
        else:
            items = mapping
        return cls(tuple((str(k), tuple(str(c) for c in v)) for k, v in items))

    @classmethod
    def single(cls, channels: Sequence[str], name: str = "all") -> "GroupSpec":
        return cls(((name, tuple(channels)),))

    @property
    def names(self) -> list[str]:
        return [g[0] for g in self.groups]

    @property
    def widths(self) -> list[int]:
        return [len(g[1]) for g in self.groups]

    @property
    def channels(self) -> list[str]:
        return [c for _, chans in self.groups for c in chans]

    def __len__(self) -> int:
        return len(self.groups)

    def indices(self, schema: Sequence[str]) -> list[list[int]]:
        pos = {c: i for i, c in enumerate(schema)}
        out = []
        for name, chans in self.groups:
            missing = [c for c in chans if c not in pos]
            if missing:
                raise GroupSpecError(f"group {name!r} names unknown channels {missing}")
            out.append([pos[c] for c in chans])
        return out

    def to_dict(self) -> dict[str, list[str]]:
        return {name: list(chans) for name, chans in self.groups}


def default_groups(kind: str) -> GroupSpec:
    if kind == "cmapss":
        return GroupSpec(CMAPSS_GROUPS)
    if kind == "mill":
        return GroupSpec(MILL_GROUPS)
    raise GroupSpecError(f"no default group spec for dataset kind {kind!r}")


@dataclass(frozen=True)
class RulLabelCfg:
    r_early_train: int = 80
    r_early_test: int = 125

    def __post_init__(self):
        if self.r_early_train < 1 or self.r_early_test < 1:
            raise ValueError("RUL caps must be positive")


@dataclass(frozen=True)
class HealthyPolicy:
    """``life_fraction``: cycle / length <= threshold; ``wear``: wear <= threshold."""

    kind: str = "life_fraction"
    threshold: float = 0.20


@dataclass
class NormStats:
    min: np.ndarray
    max: np.ndarray
    fit_population: str = "healthy_train"


# --------------------------------------------------------------------------- C-MAPSS


def parse_cmapss(path, split: str = "train", rul_file=None) -> TrajectorySet:
    path = Path(path)
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    if split == "test" and rul_file is None:
        raise DataError("test split requires a RUL ground-truth file")

    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != CMAPSS_N_COLUMNS:
                raise ParseError(
                    f"{path.name}:{lineno}: expected {CMAPSS_N_COLUMNS} columns, got {len(parts)}"
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ParseError(f"{path.name}:{lineno}: {exc}") from None
    if not rows:
        raise ParseError(f"{path.name}: no data rows")
    arr = np.asarray(rows, dtype=float)

    truth = None
    if split == "test":
        truth = _read_rul_file(rul_file)

    units = []
    unit_ids = arr[:, 0].astype(int)
    order = list(dict.fromkeys(unit_ids.tolist()))
    for idx, uid in enumerate(order):
        block = arr[unit_ids == uid]
        block = block[np.argsort(block[:, 1], kind="stable")]
        cycles = block[:, 1].astype(int)
        if len(cycles) < 2:
            raise RejectedUnitError(f"{path.name}: unit {uid} has fewer than 2 cycles")
        if cycles[0] != 1 or np.any(np.diff(cycles) != 1):
            raise ParseError(f"{path.name}: unit {uid} cycles are not 1..T consecutive")
        if split == "train":
            last_rul = 0.0
        else:
            if idx >= len(truth):
                raise DataError(f"RUL file has no entry for unit {uid} (position {idx + 1})")
            last_rul = float(truth[idx])
        rul = last_rul + (cycles[-1] - cycles).astype(float)
        units.append(
            Trajectory(
                unit_id=int(uid),
                cycles=cycles,
                op_settings=block[:, 2:5].copy(),
                sensors=block[:, 5:].copy(),
                rul=rul,
            )
        )
    if truth is not None and len(truth) != len(units):
        raise DataError(f"RUL file has {len(truth)} entries for {len(units)} units")
    return TrajectorySet(units, list(CMAPSS_SENSORS), "cmapss", list(CMAPSS_SETTINGS))


def _read_rul_file(path) -> list[int]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            try:
                out.append(int(float(s.split()[0])))
            except ValueError:
                raise ParseError(f"{Path(path).name}:{lineno}: bad RUL value {s!r}") from None
    return out


def _fmt(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def write_cmapss(ts: TrajectorySet, path, rul_path=None) -> None:
    """Serialise to the 26-column whitespace format (plus RUL file for test sets)."""
    lines = []
    for u in ts.units:
        for i, c in enumerate(u.cycles):
            vals = [u.unit_id, int(c), *u.op_settings[i], *u.sensors[i]]
            lines.append(" ".join(_fmt(v) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")
    if rul_path is not None:
        Path(rul_path).write_text("\n".join(_fmt(u.rul[-1]) for u in ts.units) + "\n")


# --------------------------------------------------------------------------- MILL


@dataclass(frozen=True)
class MillColumns:
    case: str = "case"
    cycle: str = "run"
    wear: str = "VB"
    conditions: tuple[str, ...] = ("DOC", "feed", "material")
    sensors: tuple[str, ...] = tuple(MILL_SENSORS)
    max_wear: float = 1.0


def wear_phase(w: float) -> str:
    if w <= WEAR_HEALTHY:
        return "healthy"
    if w <= WEAR_MODERATE:
        return "moderate"
    if w <= WEAR_FAILURE:
        return "severe"
    return "failed"


def fill_gaps(values: np.ndarray) -> np.ndarray:
    """Linear interpolation between valid neighbours; nearest value at the edges."""
    v = np.asarray(values, dtype=float).copy()
    bad = ~np.isfinite(v)
    if not bad.any():
        return v
    good = np.flatnonzero(~bad)
    if good.size == 0:
        raise DataError("cannot fill a series with no valid values")
    # np.interp clamps to the end values outside the valid range.
    v[bad] = np.interp(np.flatnonzero(bad), good, v[good])
    return v


def parse_mill(path, columns: MillColumns | None = None, sep: str = ",") -> TrajectorySet:
    """Per-run table (one row per run, sensors already summarised) -> one
    trajectory per case. Wear is kept on ``Trajectory.wear``."""
    cols = columns or MillColumns()
    path = Path(path)
    try:
        df = pd.read_csv(path, sep=sep)
    except pd.errors.EmptyDataError:
        raise ParseError(f"{path.name}: no data rows") from None
    needed = [cols.case, cols.cycle, cols.wear, *cols.sensors]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise ParseError(f"{path.name}: missing columns {missing}")
    conds = [c for c in cols.conditions if c in df.columns]

    units = []
    for case_id, block in df.groupby(cols.case, sort=True):
        block = block.sort_values(cols.cycle, kind="stable")
        if len(block) == 0 or block[list(cols.sensors)].isna().all().all():
            raise RejectedUnitError(f"case {case_id} has no data")
        wear = fill_gaps(block[cols.wear].to_numpy(dtype=float))
        if np.any(wear < 0) or np.any(wear > cols.max_wear):
            raise DataError(f"case {case_id}: wear outside [0, {cols.max_wear}]")
        sensors = np.column_stack(
            [fill_gaps(block[c].to_numpy(dtype=float)) for c in cols.sensors]
        )
        op = (
            block[conds].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
            if conds
            else np.zeros((len(block), 0))
        )
        n = len(block)
        flags = ()
        if wear_phase(wear[0]) in ("severe", "failed"):
            flags = ("severe_phase_only",)
        units.append(
            Trajectory(
                unit_id=int(case_id),
                cycles=np.arange(1, n + 1),
                op_settings=op,
                sensors=sensors,
                rul=np.zeros(n),
                wear=wear,
                flags=flags,
            )
        )
    if not units:
        raise ParseError(f"{path.name}: no cases")
    out = TrajectorySet(units, list(cols.sensors), "mill", conds)
    return out.replace_units([_mill_rul(u) for u in out.units])


def _mill_rul(u: Trajectory) -> Trajectory:
    """RUL proxy: cycles until wear first reaches the failure threshold, with the
    crossing linearly interpolated; extrapolated from the last slope otherwise."""
    w = u.wear
    t = u.cycles.astype(float)
    flags = list(u.flags)
    hit = np.flatnonzero(w >= WEAR_FAILURE)
    if hit.size:
        j = hit[0]
        if j == 0:
            t_fail = t[0]
        else:
            w0, w1 = w[j - 1], w[j]
            t_fail = t[j - 1] + (WEAR_FAILURE - w0) / (w1 - w0) * (t[j] - t[j - 1])
    else:
        slope = (w[-1] - w[-2]) / (t[-1] - t[-2]) if len(w) > 1 else 0.0
        if slope <= 0 and len(w) > 1:
            slope = (w[-1] - w[0]) / (t[-1] - t[0])
        t_fail = t[-1] + (WEAR_FAILURE - w[-1]) / slope if slope > 0 else t[-1]
        flags.append("extrapolated_failure")
    rul = np.maximum(t_fail - t, 0.0)
    return dataclasses.replace(u, rul=rul, flags=tuple(flags))


# --------------------------------------------------------------------------- labelling


def label_rul(ts: TrajectorySet, cfg: RulLabelCfg, split: str) -> TrajectorySet:
    cap = cfg.r_early_train if split == "train" else cfg.r_early_test
    return ts.replace_units(
        [dataclasses.replace(u, rul=np.minimum(u.rul, cap)) for u in ts.units]
    )


def healthy_mask(u: Trajectory, policy: HealthyPolicy) -> np.ndarray:
    if policy.kind == "wear":
        if u.wear is None:
            raise DataError("wear policy requires wear values")
        return u.wear <= policy.threshold
    if policy.kind == "life_fraction":
        return u.cycles <= policy.threshold * len(u) + 1e-9
    raise ValueError(f"unknown healthy policy {policy.kind!r}")


def select_healthy(ts: TrajectorySet, policy: HealthyPolicy) -> np.ndarray:
    rows = [u.sensors[healthy_mask(u, policy)] for u in ts.units]
    out = np.concatenate(rows, axis=0) if rows else np.zeros((0, len(ts.channels)))
    if len(out) == 0:
        raise EmptyHealthySetError(f"policy {policy} selects no samples")
    return out


# --------------------------------------------------------------------------- scaling


def fit_norm(samples: np.ndarray) -> NormStats:
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or len(x) == 0:
        raise DataError("fit_norm needs a non-empty 2-D sample matrix")
    return NormStats(x.min(axis=0), x.max(axis=0))


def apply_norm(stats: NormStats | None, samples: np.ndarray) -> np.ndarray:
    if stats is None:
        raise UsageError("normalisation applied before fit")
    x = np.asarray(samples, dtype=float)
    span = stats.max - stats.min
    safe = np.where(span > 0, span, 1.0)
    # No clipping: out-of-range degradation must stay visible.
    return np.where(span > 0, (x - stats.min) / safe, 0.0)


def normalize_set(ts: TrajectorySet, stats: NormStats) -> TrajectorySet:
    return ts.replace_units(
        [dataclasses.replace(u, sensors=apply_norm(stats, u.sensors)) for u in ts.units]
    )


def partition_groups(samples: np.ndarray, spec: GroupSpec, schema: Sequence[str]) -> list[np.ndarray]:
    x = np.asarray(samples)
    return [x[..., idx] for idx in spec.indices(schema)]


# --------------------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SynthCfg:
    """Synthetic fleet. Degrading groups get an exponential drift after a random
    onset; ``nuisance_groups`` get a large slow excursion unrelated to failure."""

    n_units: int = 20
    n_channels: int = 12
    n_groups: int = 3
    noise: float = 0.02
    min_length: int = 120
    max_length: int = 180
    degraded_groups: tuple[int, ...] | None = None
    nuisance_groups: tuple[int, ...] = ()
    onset_range: tuple[float, float] = (0.3, 0.6)
    rate_range: tuple[float, float] = (3.0, 5.0)
    amplitude: float = 1.0
    nuisance_amplitude: float = 1.0
    truncate: bool = False

    def __post_init__(self):
        if min(self.n_units, self.n_channels, self.n_groups, self.min_length) <= 0:
            raise ValueError("synthetic dimensions must be positive")
        if self.n_groups > self.n_channels:
            raise ValueError("more groups than channels")
        if self.max_length < self.min_length or self.min_length < 2:
            raise ValueError("bad trajectory length range")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")


def synth_channels(cfg: SynthCfg) -> list[str]:
    return [f"c_{i + 1}" for i in range(cfg.n_channels)]


def synth_groups(cfg: SynthCfg) -> GroupSpec:
    chans = synth_channels(cfg)
    parts = np.array_split(np.arange(cfg.n_channels), cfg.n_groups)
    return GroupSpec(tuple((f"g{k + 1}", tuple(chans[i] for i in p)) for k, p in enumerate(parts)))


def degradation_curve(t, onset: float, length: float, rate: float, amplitude: float) -> np.ndarray:
    """Zero before ``onset``, rising exponentially to ``amplitude`` at ``length``."""
    t = np.asarray(t, dtype=float)
    s = np.clip((t - onset) / max(length - onset, 1e-12), 0.0, None)
    return amplitude * np.expm1(rate * s) / np.expm1(rate)


def make_synthetic(cfg: SynthCfg, seed: int, fleet_seed: int | None = None) -> TrajectorySet:
    """``fleet_seed`` fixes the per-channel baselines and gains separately from
    the unit draws, so a train and a test fleet can share one machine type."""
    rng = np.random.default_rng(seed)
    frng = rng if fleet_seed is None else np.random.default_rng(fleet_seed)
    spec = synth_groups(cfg)
    group_idx = spec.indices(synth_channels(cfg))
    degraded = range(cfg.n_groups) if cfg.degraded_groups is None else cfg.degraded_groups
    base = frng.uniform(0.2, 0.8, size=cfg.n_channels)
    # Per-channel sign and gain of the degradation response.
    gain = frng.uniform(0.5, 1.0, size=cfg.n_channels) * frng.choice([-1.0, 1.0], size=cfg.n_channels)
    # Healthy channels within a group are correlated through a shared latent factor.
    mix = frng.uniform(0.5, 1.0, size=cfg.n_channels)

    units = []
    for uid in range(1, cfg.n_units + 1):
        length = int(rng.integers(cfg.min_length, cfg.max_length + 1))
        t = np.arange(1, length + 1, dtype=float)
        factor = rng.normal(0.0, 1.0, size=(length, cfg.n_groups))
        x = base + 0.05 * factor[:, [_group_of(j, group_idx) for j in range(cfg.n_channels)]] * mix
        if cfg.noise == 0:
            x = np.broadcast_to(base, (length, cfg.n_channels)).copy()
        for g in degraded:
            onset = rng.uniform(*cfg.onset_range) * length
            rate = rng.uniform(*cfg.rate_range)
            curve = degradation_curve(t, onset, length, rate, cfg.amplitude)
            for j in group_idx[g]:
                x[:, j] += gain[j] * curve
        for g in cfg.nuisance_groups:
            period = rng.uniform(0.3, 1.0) * length
            phase = rng.uniform(0, 2 * np.pi)
            wave = cfg.nuisance_amplitude * np.sin(2 * np.pi * t / period + phase)
            for j in group_idx[g]:
                x[:, j] += gain[j] * wave
        if cfg.noise > 0:
            x = x + rng.normal(0.0, cfg.noise, size=x.shape)
        rul = (length - t).copy()
        if cfg.truncate:
            cut = int(rng.integers(max(2, length // 4), length + 1))
            x, t, rul = x[:cut], t[:cut], rul[:cut]
        units.append(
            Trajectory(
                unit_id=uid,
                cycles=t.astype(int),
                op_settings=np.zeros((len(t), 0)),
                sensors=x,
                rul=rul,
            )
        )
    return TrajectorySet(units, synth_channels(cfg), "synthetic", [])


def _group_of(j: int, group_idx: list[list[int]]) -> int:
    for g, idx in enumerate(group_idx):
        if j in idx:
            return g
    return 0


# --------------------------------------------------------------------------- tables


def to_frame(ts: TrajectorySet) -> pd.DataFrame:
    """Long table: unit, cycle, channels..., rul[, wear]."""
    frames = []
    for u in ts.units:
        df = pd.DataFrame(u.sensors, columns=ts.channels)
        df.insert(0, "cycle", u.cycles)
        df.insert(0, "unit", u.unit_id)
        df["rul"] = u.rul
        if u.wear is not None:
            df["wear"] = u.wear
        frames.append(df)
    return pd.concat(frames, ignore_index=True)


def from_frame(df: pd.DataFrame, channels: Sequence[str], kind: str) -> TrajectorySet:
    units = []
    for uid, block in df.groupby("unit", sort=False):
        units.append(
            Trajectory(
                unit_id=int(uid),
                cycles=block["cycle"].to_numpy(dtype=int),
                op_settings=np.zeros((len(block), 0)),
                sensors=block[list(channels)].to_numpy(dtype=float),
                rul=block["rul"].to_numpy(dtype=float),
                wear=block["wear"].to_numpy(dtype=float) if "wear" in block else None,
            )
        )
    return TrajectorySet(units, list(channels), kind, [])
