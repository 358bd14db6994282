"""Canonical spatio-temporal data model, on-disk container and curation steps.

A dataset is a dense ``[N, T, C]`` value array plus a boolean observation mask
of the same shape. Missing entries hold a finite placeholder (0.0) in
``values``; missingness is carried only by the mask.

On-disk layout of a dataset directory::

    descriptor.txt   key = value lines (name, format, N, T, C, dt_minutes, ...)
    values.f32le     little-endian float32, node-major [N][T][C]
    mask.u8          optional, one byte (0/1) per entry, same order
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, EmptyDatasetError, FormatError, ResampleError

logger = logging.getLogger(__name__)

DESCRIPTOR_NAME = "descriptor.txt"
VALUES_NAME = "values.f32le"
MASK_NAME = "mask.u8"

DEFAULT_DT_MINUTES = 5
DEFAULT_STATIC_EPS = 1e-8
DEFAULT_MAX_GAP = 6


@dataclass
class SpatioTemporalTensor:
    """Observation tensor ``values[N, T, C]`` with spatial/temporal metadata.

    ``coords`` is ``[N, 2]``: (latitude, longitude) in degrees for ``sensor``
    data, (idx, idy) lattice indices for ``grid`` data. Grid tensors also carry
    ``grid_shape = (W, H)``; node ``n`` sits at ``idx = n % W, idy = n // W``.
    """

    values: np.ndarray
    format: str = "sensor"
    coords: np.ndarray | None = None
    dt_minutes: int = DEFAULT_DT_MINUTES
    start_epoch_s: int = 0
    name: str = "dataset"
    grid_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise FormatError(f"values must be [N, T, C], got shape {self.values.shape}")
        if self.format == "grid" and self.coords is None and self.grid_shape is not None:
            self.coords = grid_coords(*self.grid_shape)
        if self.coords is None:
            self.coords = np.zeros((self.values.shape[0], 2))
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.validate()

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def validate(self) -> None:
        n, t, c = self.values.shape
        if n < 1 or t < 1 or c < 1:
            raise FormatError(f"empty dimension in shape {self.values.shape}")
        if self.format not in ("sensor", "grid"):
            raise FormatError(f"unknown format {self.format!r}")
        if self.dt_minutes <= 0:
            raise FormatError("dt_minutes must be positive")
        if self.coords.shape != (n, 2):
            raise FormatError(f"coords must be [{n}, 2], got {self.coords.shape}")
        if self.format == "grid":
            if self.grid_shape is None:
                raise FormatError("grid tensor requires grid_shape (W, H)")
            w, h = self.grid_shape
            if w * h != n:
                raise FormatError(f"grid {w}x{h} implies N={w * h}, got N={n}")
            if not np.array_equal(self.coords, grid_coords(w, h)):
                raise FormatError("grid coords must be the row-major lattice")
        if not np.all(np.isfinite(self.values)):
            raise DataError("values contain NaN/Inf; missingness belongs in the mask")

    def with_values(self, values: np.ndarray, **changes) -> "SpatioTemporalTensor":
        return replace(self, values=values, **changes)

    def select_nodes(self, index: Sequence[int]) -> "SpatioTemporalTensor":
        index = np.asarray(index, dtype=np.int64)
        if self.format == "grid" and len(index) != self.n_nodes:
            # a thinned lattice is no longer a lattice
            return SpatioTemporalTensor(
                self.values[index], "sensor", self.coords[index], self.dt_minutes,
                self.start_epoch_s, self.name,
            )
        return replace(self, values=self.values[index], coords=self.coords[index])

    def slice_steps(self, start: int, stop: int) -> "SpatioTemporalTensor":
        return replace(
            self,
            values=self.values[:, start:stop],
            start_epoch_s=self.start_epoch_s + start * self.dt_minutes * 60,
        )


@dataclass
class NodeStats:
    mean: np.ndarray
    variance: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


def grid_coords(width: int, height: int) -> np.ndarray:
    n = np.arange(width * height)
    return np.stack([n % width, n // width], axis=1).astype(np.float64)


def full_mask(x: SpatioTemporalTensor) -> np.ndarray:
    return np.ones(x.shape, dtype=bool)


def check_mask(x: SpatioTemporalTensor, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != x.shape:
        raise FormatError(f"mask shape {mask.shape} != tensor shape {x.shape}")
    if mask.dtype != bool:
        if not np.all((mask == 0) | (mask == 1)):
            raise FormatError("mask entries must be 0 or 1")
        mask = mask.astype(bool)
    return mask


def node_stats(x: SpatioTemporalTensor, mask: np.ndarray | None = None) -> NodeStats:
    """Per node/channel population mean and std over time (observed entries only if masked)."""
    v = x.values
    if mask is None:
        return NodeStats(v.mean(axis=1), v.var(axis=1))
    w = mask.astype(np.float64)
    count = np.maximum(w.sum(axis=1), 1.0)
    mean = (v * w).sum(axis=1) / count
    var = (((v - mean[:, None, :]) ** 2) * w).sum(axis=1) / count
    return NodeStats(mean, var)


# --------------------------------------------------------------------------
# descriptor container


def write_descriptor(path: Path, entries: dict) -> None:
    lines = [f"{key} = {value}" for key, value in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_descriptor(path: Path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def _format_coords(coords: np.ndarray) -> str:
    return "; ".join(f"{a!r} {b!r}" for a, b in coords.tolist())


def _parse_coords(text: str, n: int) -> np.ndarray:
    pairs = [p.split() for p in text.split(";") if p.strip()]
    try:
        coords = np.array([[float(a), float(b)] for a, b in pairs], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"malformed coords entry: {exc}") from None
    if coords.shape != (n, 2):
        raise FormatError(f"coords lists {len(pairs)} nodes, descriptor says N={n}")
    return coords


def _require_int(entries: dict, key: str) -> int:
    try:
        return int(entries[key])
    except KeyError:
        raise FormatError(f"descriptor missing {key!r}") from None
    except ValueError:
        raise FormatError(f"descriptor field {key!r} is not an integer") from None


def save_dataset(path: str | Path, x: SpatioTemporalTensor, mask: np.ndarray | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, t, c = x.shape
    entries = {
        "name": x.name,
        "format": x.format,
        "N": n,
        "T": t,
        "C": c,
        "dt_minutes": x.dt_minutes,
        "start_epoch_s": x.start_epoch_s,
    }
    if x.format == "grid":
        entries["W"], entries["H"] = x.grid_shape
    else:
        entries["coords"] = _format_coords(x.coords)
    write_descriptor(path / DESCRIPTOR_NAME, entries)
    x.values.astype("<f4").tofile(path / VALUES_NAME)
    mask_path = path / MASK_NAME
    if mask is not None:
        check_mask(x, mask).astype(np.uint8).tofile(mask_path)
    elif mask_path.exists():
        mask_path.unlink()
    return path


def load_dataset(path: str | Path) -> tuple[SpatioTemporalTensor, np.ndarray]:
    """Read a dataset directory; returns ``(tensor, mask)``.

    A missing ``mask.u8`` means every entry is observed. Non-finite values are
    tolerated only where the mask marks the entry missing (they are zeroed).
    """
    path = Path(path)
    desc_path = path / DESCRIPTOR_NAME
    if not desc_path.exists():
        raise FormatError(f"no {DESCRIPTOR_NAME} in {path}")
    entries = read_descriptor(desc_path)
    n, t, c = (_require_int(entries, k) for k in ("N", "T", "C"))
    fmt = entries.get("format", "sensor")
    if n < 1 or t < 1 or c < 1:
        raise FormatError(f"non-positive shape N={n} T={t} C={c}")

    raw = np.fromfile(path / VALUES_NAME, dtype="<f4")
    if raw.size != n * t * c:
        raise FormatError(f"values blob holds {raw.size} floats, descriptor implies {n * t * c}")
    values = raw.reshape(n, t, c).astype(np.float64)

    mask_path = path / MASK_NAME
    if mask_path.exists():
        bits = np.fromfile(mask_path, dtype=np.uint8)
        if bits.size != n * t * c:
            raise FormatError(f"mask blob holds {bits.size} bytes, expected {n * t * c}")
        if np.any(bits > 1):
            raise FormatError("mask bytes must be 0 or 1")
        mask = bits.reshape(n, t, c).astype(bool)
    else:
        mask = np.ones((n, t, c), dtype=bool)

    bad = ~np.isfinite(values)
    if np.any(bad & mask):
        raise DataError(f"{int(np.sum(bad & mask))} non-finite entries marked observed")
    values[bad] = 0.0

    grid_shape = None
    coords = None
    if fmt == "grid":
        w, h = _require_int(entries, "W"), _require_int(entries, "H")
        if w * h != n:
            raise FormatError(f"grid {w}x{h} implies N={w * h}, descriptor says N={n}")
        grid_shape = (w, h)
    elif "coords" in entries:
        coords = _parse_coords(entries["coords"], n)

    x = SpatioTemporalTensor(
        values,
        format=fmt,
        coords=coords,
        dt_minutes=_require_int(entries, "dt_minutes") if "dt_minutes" in entries else DEFAULT_DT_MINUTES,
        start_epoch_s=int(entries.get("start_epoch_s", 0)),
        name=entries.get("name", path.name),
        grid_shape=grid_shape,
    )
    return x, mask


# --------------------------------------------------------------------------
# CSV ingestion


def _parse_timestamp(text: str) -> int:
    text = text.strip()
    try:
        return int(float(text))
    except ValueError:
        pass
    try:
        stamp = datetime.fromisoformat(text)
    except ValueError:
        raise FormatError(f"unparseable timestamp {text!r}") from None
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return int(stamp.timestamp())


def _read_channel_csv(path: Path) -> tuple[list[str], list[int], np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise FormatError(f"{path}: need a header row and at least one data row")
    header = [h.strip() for h in rows[0][1:]]
    stamps, values, observed = [], [], []
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != len(header) + 1:
            raise FormatError(f"{path}:{lineno}: expected {len(header) + 1} cells, got {len(row)}")
        stamps.append(_parse_timestamp(row[0]))
        vals, obs = [], []
        for cell in row[1:]:
            cell = cell.strip()
            if cell == "":
                vals.append(0.0)
                obs.append(False)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric cell {cell!r}") from None
            finite = math.isfinite(v)
            vals.append(v if finite else 0.0)
            obs.append(finite)
        values.append(vals)
        observed.append(obs)
    # rows are timestamps, columns are nodes -> [N, T]
    return header, stamps, np.array(values).T, np.array(observed).T


def read_csv_dataset(
    paths: Sequence[str | Path],
    coords: np.ndarray | None = None,
    grid_shape: tuple[int, int] | None = None,
    name: str = "dataset",
) -> tuple[SpatioTemporalTensor, np.ndarray]:
    """Ingest one CSV per channel (rows = timestamps, columns = nodes).

    The first column holds timestamps (epoch seconds or ISO 8601) at a uniform
    interval; empty cells are missing.
    """
    if not paths:
        raise FormatError("no CSV files given")
    channels, masks = [], []
    header0 = stamps0 = None
    for p in paths:
        header, stamps, vals, obs = _read_channel_csv(Path(p))
        if header0 is None:
            header0, stamps0 = header, stamps
        elif header != header0 or stamps != stamps0:
            raise FormatError(f"{p}: node columns or timestamps differ from {paths[0]}")
        channels.append(vals)
        masks.append(obs)
    values = np.stack(channels, axis=-1)
    mask = np.stack(masks, axis=-1)

    if len(stamps0) >= 2:
        steps = np.diff(stamps0)
        if np.any(steps != steps[0]) or steps[0] <= 0 or steps[0] % 60:
            raise FormatError("timestamps must be strictly increasing at a whole-minute interval")
        dt = int(steps[0] // 60)
    else:
        dt = DEFAULT_DT_MINUTES

    fmt = "grid" if grid_shape is not None else "sensor"
    x = SpatioTemporalTensor(
        values, format=fmt, coords=None if fmt == "grid" else coords, dt_minutes=dt,
        start_epoch_s=stamps0[0], name=name, grid_shape=grid_shape,
    )
    return x, mask


def read_coords_csv(path: str | Path) -> np.ndarray:
    """Read ``node,lat,lon`` rows (header optional) in node order."""
    coords = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                coords.append([float(row[-2]), float(row[-1])])
            except ValueError:
                if coords:
                    raise FormatError(f"{path}: malformed coordinate row {row}") from None
    return np.array(coords, dtype=np.float64)


# --------------------------------------------------------------------------
# curation


def resample(
    x: SpatioTemporalTensor,
    target_dt: int,
    agg: str = "mean",
) -> SpatioTemporalTensor:
    """Change the sampling interval by an integer ratio.

    Downsampling aggregates non-overlapping windows (trailing remainder
    dropped); upsampling interpolates linearly between consecutive samples.
    """
    dt = x.dt_minutes
    if target_dt <= 0 or dt <= 0:
        raise ResampleError("sampling intervals must be positive")
    if target_dt == dt:
        return x.with_values(x.values.copy())
    t = x.n_steps
    if target_dt > dt:
        if target_dt % dt:
            raise ResampleError(f"target {target_dt} min is not a multiple of {dt} min")
        k = target_dt // dt
        t_new = t // k
        if t_new < 1:
            raise ResampleError(f"{t} steps cannot fill one {k}-step window")
        windows = x.values[:, : t_new * k].reshape(x.n_nodes, t_new, k, x.n_channels)
        if agg == "mean":
            out = windows.mean(axis=2)
        elif agg == "sum":
            out = windows.sum(axis=2)
        else:
            raise ResampleError(f"unknown aggregation {agg!r}")
    else:
        if dt % target_dt:
            raise ResampleError(f"{dt} min is not a multiple of target {target_dt} min")
        k = dt // target_dt
        t_new = (t - 1) * k + 1
        pos = np.arange(t_new) / k
        lo = np.minimum(np.floor(pos).astype(int), t - 1)
        hi = np.minimum(lo + 1, t - 1)
        frac = (pos - lo)[None, :, None]
        out = x.values[:, lo] * (1 - frac) + x.values[:, hi] * frac
    return x.with_values(out, dt_minutes=target_dt)


def resample_mask(mask: np.ndarray, dt: int, target_dt: int) -> np.ndarray:
    """Companion of :func:`resample` for observation masks.

    A downsampled window is observed only if every member is; an interpolated
    step is observed only if both bracketing samples are.
    """
    if target_dt == dt:
        return mask.copy()
    n, t, c = mask.shape
    if target_dt > dt:
        k = target_dt // dt
        t_new = t // k
        return mask[:, : t_new * k].reshape(n, t_new, k, c).all(axis=2)
    k = dt // target_dt
    t_new = (t - 1) * k + 1
    j = np.arange(t_new)
    lo = j // k
    exact = (j % k) == 0
    hi = np.minimum(lo + 1, t - 1)
    return np.where(exact[None, :, None], mask[:, lo], mask[:, lo] & mask[:, hi])


def remove_static_nodes(
    x: SpatioTemporalTensor,
    eps: float = DEFAULT_STATIC_EPS,
    mask: np.ndarray | None = None,
) -> tuple[SpatioTemporalTensor, list[int]]:
    """Drop nodes whose largest per-channel variance is not strictly above ``eps``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    variance = node_stats(x, mask).variance
    keep = variance.max(axis=1) > eps
    kept = np.flatnonzero(keep).tolist()
    if not kept:
        raise EmptyDatasetError("every node is static")
    if len(kept) == x.n_nodes:
        return x.with_values(x.values.copy()), kept
    return x.select_nodes(kept), kept


def clip_outliers(x: SpatioTemporalTensor, mask: np.ndarray | None = None) -> SpatioTemporalTensor:
    """One-pass 3-sigma clipping with population statistics of the input."""
    stats = node_stats(x, mask)
    lo = (stats.mean - 3 * stats.std)[:, None, :]
    hi = (stats.mean + 3 * stats.std)[:, None, :]
    clipped = np.clip(x.values, lo, hi)
    if mask is not None:
        clipped = np.where(mask, clipped, x.values)
    return x.with_values(clipped)


def _missing_runs(observed: np.ndarray) -> Iterable[tuple[int, int]]:
    """Yield ``(start, stop)`` of each maximal run of False in a 1-D bool array."""
    padded = np.concatenate([[True], observed, [True]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return zip(edges[::2], edges[1::2])


def precomplete(
    x: SpatioTemporalTensor,
    mask: np.ndarray,
    max_gap: int = DEFAULT_MAX_GAP,
) -> tuple[SpatioTemporalTensor, np.ndarray]:
    """Fill short missing runs: linear inside the series, nearest value at the edges.

    Runs longer than ``max_gap`` stay missing. Slices with no observation at
    all are left untouched and reported through :mod:`warnings`.
    """
    if max_gap < 1:
        raise ValueError("max_gap must be >= 1")
    mask = check_mask(x, mask)
    values = x.values.copy()
    out_mask = mask.copy()
    empty = []
    t = x.n_steps
    for n in range(x.n_nodes):
        for c in range(x.n_channels):
            obs = mask[n, :, c]
            if obs.all():
                continue
            if not obs.any():
                empty.append((n, c))
                continue
            series = values[n, :, c]
            for start, stop in _missing_runs(obs):
                if stop - start > max_gap:
                    continue
                if start == 0:
                    series[start:stop] = series[stop]
                elif stop == t:
                    series[start:stop] = series[start - 1]
                else:
                    left, right = series[start - 1], series[stop]
                    frac = np.arange(1, stop - start + 1) / (stop - start + 1)
                    series[start:stop] = left + (right - left) * frac
                out_mask[n, start:stop, c] = True
    if empty:
        warnings.warn(f"precomplete skipped fully missing (node, channel) slices: {empty}", stacklevel=2)
    return x.with_values(values), out_mask


def curate(
    x: SpatioTemporalTensor,
    mask: np.ndarray | None = None,
    target_dt: int = DEFAULT_DT_MINUTES,
    agg: str = "mean",
    eps: float = DEFAULT_STATIC_EPS,
    max_gap: int = DEFAULT_MAX_GAP,
) -> tuple[SpatioTemporalTensor, np.ndarray, list[int]]:
    """Run the full quality pipeline: resample, static-node removal, clipping, pre-completion."""
    mask = full_mask(x) if mask is None else check_mask(x, mask)
    mask = resample_mask(mask, x.dt_minutes, target_dt)
    x = resample(x, target_dt, agg)
    x, kept = remove_static_nodes(x, eps, mask)
    mask = mask[kept]
    x = clip_outliers(x, mask)
    x, mask = precomplete(x, mask, max_gap)
    logger.info("curated %s: kept %d nodes, %.2f%% observed", x.name, len(kept), 100 * mask.mean())
    return x, mask, kept
