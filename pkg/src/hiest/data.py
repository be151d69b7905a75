"""Readings/distances CSV I/O, chronological windowing, standardization and a synthetic generator."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .graph import SensorGraph, build_adjacency, tarjan_bcc

logger = logging.getLogger(__name__)


class DataFormatError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = ""
        if path:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class DegenerateFeatureError(ValueError):
    """A feature has zero variance on the training split."""


@dataclass
class ReadingsFrame:
    """Sensor readings; missing cells are NaN in ``values``."""

    timestamps: list[str]
    values: np.ndarray  # (T_total, N_o, D_in)
    sensor_ids: list[str]

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    @property
    def num_sensors(self) -> int:
        return self.values.shape[1]

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def missing_rate(self) -> dict[str, float]:
        rate = self.missing[..., 0].mean(axis=0) if self.num_steps else np.zeros(self.num_sensors)
        return {sid: float(r) for sid, r in zip(self.sensor_ids, rate)}


# ---------------------------------------------------------------------------
# CSV formats
# ---------------------------------------------------------------------------
def _parse_time(text: str, line: int, path: str) -> datetime:
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError as exc:
        raise DataFormatError(f"bad timestamp {text!r}", line, path) from exc


def load_readings(path: str | Path) -> ReadingsFrame:
    """Read ``timestamp,<sensor_1>,...`` with one row per step; empty cells are missing."""
    path = str(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError("empty file", 1, path)
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0].lower() != "timestamp":
        raise DataFormatError("header must be 'timestamp,<sensor ids>'", 1, path)
    sensor_ids = header[1:]
    stamps: list[str] = []
    values = np.full((len(rows) - 1, len(sensor_ids)), np.nan)
    times: list[datetime] = []
    for k, row in enumerate(rows[1:]):
        line = k + 2
        if not row:
            raise DataFormatError("blank line", line, path)
        if len(row) != len(header):
            raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", line, path)
        t = _parse_time(row[0], line, path)
        if times:
            if t <= times[-1]:
                raise DataFormatError("timestamps must be strictly increasing", line, path)
            if len(times) >= 2 and t - times[-1] != times[1] - times[0]:
                raise DataFormatError("timestamps must have a uniform interval", line, path)
        times.append(t)
        stamps.append(row[0].strip())
        for j, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell == "":
                continue
            try:
                values[k, j] = float(cell)
            except ValueError as exc:
                raise DataFormatError(f"non-numeric cell {cell!r}", line, path) from exc
    frame = ReadingsFrame(stamps, values[..., None], sensor_ids)
    worst = max(frame.missing_rate().items(), key=lambda kv: kv[1], default=None)
    if worst and worst[1] > 0:
        logger.info("missing data: worst sensor %s at %.1f%%", worst[0], 100 * worst[1])
    return frame


def write_readings(path: str | Path, frame: ReadingsFrame) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *frame.sensor_ids])
        for ts, row in zip(frame.timestamps, frame.values[..., 0]):
            w.writerow([ts, *("" if np.isnan(v) else repr(float(v)) for v in row)])


def load_distances(path: str | Path) -> list[tuple[str, str, float]]:
    """Read ``from_id,to_id,distance`` rows (the last column may be named ``distance_m``)."""
    path = str(path)
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != 3:
            raise DataFormatError("header must be 'from_id,to_id,distance'", 1, path)
        for k, row in enumerate(reader):
            line = k + 2
            if not row:
                continue
            if len(row) != 3:
                raise DataFormatError(f"expected 3 fields, got {len(row)}", line, path)
            try:
                d = float(row[2])
            except ValueError as exc:
                raise DataFormatError(f"non-numeric distance {row[2]!r}", line, path) from exc
            if not np.isfinite(d) or d < 0:
                raise DataFormatError(f"distance must be finite and nonnegative, got {d}", line, path)
            out.append((row[0].strip(), row[1].strip(), d))
    if not out:
        raise DataFormatError("no distance rows", 2, path)
    return out


def write_distances(path: str | Path, rows: Sequence[tuple[str, str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["from_id", "to_id", "distance_m"])
        for i, j, d in rows:
            w.writerow([i, j, repr(float(d))])


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------
@dataclass
class ForecastBatch:
    x: np.ndarray  # (B, H, N, D_in), standardized
    y: np.ndarray  # (B, T, N, D_out), original units
    mask: np.ndarray  # (B, T, N, D_out), 1.0 where the target was observed
    norm_mean: np.ndarray
    norm_std: np.ndarray


@dataclass
class WindowSet:
    """One contiguous split; windows of ``history + horizon`` steps with stride 1."""

    inputs: np.ndarray  # (L, N, D_in)
    targets: np.ndarray  # (L, N, D_out)
    mask: np.ndarray  # (L, N, D_out)
    history: int
    horizon: int
    offset: int = 0  # index of the first step in the full series
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    norm_std: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __len__(self) -> int:
        return max(0, self.inputs.shape[0] - (self.history + self.horizon) + 1)

    def window_steps(self, i: int) -> tuple[int, int]:
        """Absolute first and last step indices used by window ``i``."""
        start = self.offset + i
        return start, start + self.history + self.horizon - 1

    def batch(self, indices) -> ForecastBatch:
        idx = np.asarray(indices, dtype=np.int64)
        h, t = self.history, self.horizon
        xs = idx[:, None] + np.arange(h)[None, :]
        ys = idx[:, None] + h + np.arange(t)[None, :]
        return ForecastBatch(self.inputs[xs], self.targets[ys], self.mask[ys], self.norm_mean, self.norm_std)

    def all(self) -> ForecastBatch:
        return self.batch(np.arange(len(self)))


def _fill_missing(values: np.ndarray) -> np.ndarray:
    """Forward-fill along time, then back-fill any leading gap; all-missing columns become 0."""
    out = values.copy()
    t = out.shape[0]
    flat = out.reshape(t, -1)
    for c in range(flat.shape[1]):
        col = flat[:, c]
        ok = ~np.isnan(col)
        if not ok.any():
            col[:] = 0.0
            continue
        idx = np.where(ok, np.arange(t), 0)
        np.maximum.accumulate(idx, out=idx)
        first = np.argmax(ok)
        idx[:first] = first
        flat[:, c] = col[idx]
    return flat.reshape(out.shape)


def time_of_day(timestamps: Sequence[str]) -> np.ndarray:
    out = np.empty(len(timestamps))
    for k, ts in enumerate(timestamps):
        dt = datetime.fromisoformat(ts)
        out[k] = (dt.hour * 3600 + dt.minute * 60 + dt.second) / 86400.0
    return out


def split_and_window(
    frame: ReadingsFrame,
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    history: int = 12,
    horizon: int = 12,
    add_time_of_day: bool = False,
    null_value: Optional[float] = None,
) -> tuple[WindowSet, WindowSet, WindowSet]:
    """Chronological train/val/test split, each windowed independently.

    Split lengths are ``floor(L * r)`` for train and validation; test takes
    the rest.  No window crosses a split boundary.  Targets that were missing
    (or equal to ``null_value``) get mask 0.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    total = frame.num_steps
    if total < history + horizon:
        raise ValueError(f"series of {total} steps is shorter than one window ({history + horizon})")

    raw = frame.values[..., :1]
    observed = ~np.isnan(raw)
    if null_value is not None:
        observed &= ~np.isclose(np.nan_to_num(raw, nan=np.inf), null_value)
    filled = _fill_missing(frame.values)
    inputs = filled
    if add_time_of_day:
        tod = np.broadcast_to(time_of_day(frame.timestamps)[:, None, None], (total, frame.num_sensors, 1))
        inputs = np.concatenate([filled, tod], axis=-1)
    targets = filled[..., :1]
    mask = observed.astype(np.float64)

    n_train = int(total * ratios[0])
    n_val = int(total * ratios[1])
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, total)]
    sets = []
    for name, (a, b) in zip(("train", "val", "test"), bounds):
        if b - a < history + horizon:
            raise ValueError(f"{name} split has {b - a} steps, fewer than one window ({history + horizon})")
        sets.append(WindowSet(inputs[a:b], targets[a:b], mask[a:b], history, horizon, offset=a))
    return tuple(sets)  # type: ignore[return-value]


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, train: WindowSet) -> "Standardizer":
        x = train.inputs.reshape(-1, train.inputs.shape[-1])
        mean, std = x.mean(axis=0), x.std(axis=0)
        if np.any(std == 0):
            bad = np.flatnonzero(std == 0).tolist()
            raise DegenerateFeatureError(f"features {bad} are constant on the training split")
        return cls(mean, std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, x: np.ndarray, feature: int = 0) -> np.ndarray:
        return x * self.std[feature] + self.mean[feature]


def standardize(sets: Sequence[WindowSet], scaler: Optional[Standardizer] = None):
    """Standardize inputs with statistics from the first (training) set.  Targets stay raw."""
    scaler = scaler or Standardizer.fit(sets[0])
    out = [
        WindowSet(scaler.transform(s.inputs), s.targets, s.mask, s.history, s.horizon, s.offset,
                  scaler.mean, scaler.std)
        for s in sets
    ]
    return out, scaler


# ---------------------------------------------------------------------------
# synthetic hierarchical data
# ---------------------------------------------------------------------------
@dataclass
class SynthDataset:
    graph: SensorGraph
    distances: list[tuple[str, str, float]]
    frame: ReadingsFrame
    truth: dict

    def write(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_readings(d / "readings.csv", self.frame)
        write_distances(d / "distances.csv", self.distances)
        (d / "planted.json").write_text(json.dumps(self.truth, indent=2, sort_keys=True) + "\n")


def synth_hierarchical(
    n_regions: int,
    nodes_per_region: int,
    n_patterns: int,
    num_steps: int,
    seed: int = 0,
    noise: float = 0.25,
    interval_minutes: int = 5,
) -> SynthDataset:
    """Sensor network with planted regions and planted global temporal patterns.

    Each region is a cycle with a random chord (a single edge when it has two
    nodes), so it is biconnected.  Region ``r > 0`` hangs off a random earlier
    region through one node of that region wired to two adjacent nodes of
    ``r``; that node becomes the only cut vertex between them.  Every region
    follows one of ``n_patterns`` periodic archetypes; a cut vertex averages
    the archetypes of all regions it belongs to.
    """
    if n_regions < 2 or nodes_per_region < 2 or num_steps < 2 or n_patterns < 1:
        raise ValueError("need n_regions >= 2, nodes_per_region >= 2, num_steps >= 2, n_patterns >= 1")
    rng = np.random.default_rng(seed)
    n = n_regions * nodes_per_region
    edges: set[tuple[int, int]] = set()

    def link(i, j):
        edges.add((min(i, j), max(i, j)))

    members: list[list[int]] = []
    for r in range(n_regions):
        nodes = list(range(r * nodes_per_region, (r + 1) * nodes_per_region))
        members.append(nodes)
        for a, b in zip(nodes, nodes[1:]):
            link(a, b)
        if len(nodes) >= 3:
            link(nodes[-1], nodes[0])
        if len(nodes) >= 4:
            a = int(rng.integers(0, len(nodes)))
            b = (a + 2 + int(rng.integers(0, len(nodes) - 3))) % len(nodes)
            link(nodes[a], nodes[b])
    cut_vertices = []
    for r in range(1, n_regions):
        parent = int(rng.integers(0, r))
        hub = members[parent][int(rng.integers(0, nodes_per_region))]
        k = int(rng.integers(0, nodes_per_region))
        link(hub, members[r][k])
        link(hub, members[r][(k + 1) % nodes_per_region])
        members[r].append(hub)
        cut_vertices.append(hub)

    patterns = [r % n_patterns for r in range(n_regions)]
    rng.shuffle(patterns)
    periods = np.array([96.0, 144.0, 72.0, 192.0, 120.0, 60.0])
    t = np.arange(num_steps, dtype=np.float64)
    archetypes = []
    for p in range(n_patterns):
        period = periods[p % len(periods)]
        phase, phase2 = rng.uniform(0, 2 * np.pi, size=2)
        weight2 = 0.3 + 0.4 * rng.random()
        archetypes.append(np.sin(2 * np.pi * t / period + phase) + weight2 * np.sin(4 * np.pi * t / period + phase2))
    archetypes = np.array(archetypes)

    membership = np.zeros((n, n_regions))
    for r, nodes in enumerate(members):
        membership[nodes, r] = 1.0
    region_signal = archetypes[patterns]  # (R, T)
    mix = membership / membership.sum(axis=1, keepdims=True)
    series = 55.0 + 10.0 * (mix @ region_signal).T  # (T, N)
    if noise > 0:
        series = series + noise * rng.standard_normal(series.shape)

    ids = [f"s{i:03d}" for i in range(n)]
    distances = []
    for i in range(n):
        for j in range(i + 1, n):
            if (i, j) in edges:
                d = rng.uniform(100.0, 400.0)
            else:
                d = rng.uniform(5000.0, 5200.0)
            distances.append((ids[i], ids[j], float(d)))
    graph = build_adjacency(distances, threshold=0.1, node_ids=ids)
    got = {(i, j) for i, j, _ in graph.edges if i < j}
    if got != edges:
        raise RuntimeError("kernel thresholding did not reproduce the planted topology; use fewer nodes")

    start = datetime(2024, 1, 1)
    stamps = [(start + timedelta(minutes=interval_minutes * k)).isoformat() for k in range(num_steps)]
    frame = ReadingsFrame(stamps, series[..., None], ids)
    own_region = [i // nodes_per_region for i in range(n)]
    truth = {
        "region_labels": own_region,
        "pattern_labels": [int(patterns[r]) for r in own_region],
        "region_patterns": [int(p) for p in patterns],
        "cut_vertices": sorted(ids[c] for c in set(cut_vertices)),
        "num_regions": n_regions,
        "num_patterns": n_patterns,
        "seed": seed,
        "noise": noise,
    }
    decomp = tarjan_bcc(graph)
    if decomp.num_components != n_regions:
        raise RuntimeError(f"planted {n_regions} regions but found {decomp.num_components} components")
    return SynthDataset(graph, distances, frame, truth)
