"""Gridded spatiotemporal datasets: containers, file format, synthesis, geometry.

On disk a dataset is a directory holding ``manifest.json`` (name, units,
seed, generator settings) and ``data.csv`` with header ``t,x1,x2,y,mask``
in time-major row order. Floats are written with ``repr`` so a
save/load round trip reproduces every value bit-exactly.

Coordinates in files are raw units. Internally, generators and design
code normalize the spatial box to the unit square via
:class:`BoxTransform`; lengthscale settings documented as "normalized"
refer to that square.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError
from .kernels import Kernel, Matern32, Separable, to_state_space
from .markov_gp import StateSpaceModel, sample_prior

__all__ = [
    "GridDataset",
    "GridConfig",
    "BoxTransform",
    "DomainHull",
    "save_grid",
    "load_grid",
    "synth_field",
    "inject_sim_error",
    "convex_hull",
    "hull_project",
]

CSV_HEADER = ("t", "x1", "x2", "y", "mask")
MANIFEST_KEYS = {"name", "units", "seed", "generator"}
TIME_GRID_RTOL = 1e-9
TWO_REGIME_RATIO = 5.0
TWO_REGIME_BAND = 0.1  # transition width, normalized units


@dataclass
class GridDataset:
    """Values of one field on a fixed spatial grid over uniform times.

    values and mask are (n_times, n_locations); mask marks usable entries
    and every masked-true value must be finite.
    """

    spatial_locations: np.ndarray
    times: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.spatial_locations = np.asarray(self.spatial_locations, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.spatial_locations.ndim != 2 or self.spatial_locations.shape[1] != 2:
            raise InputError(
                f"spatial locations must be (n, 2), got {self.spatial_locations.shape}"
            )
        if self.spatial_locations.shape[0] == 0:
            raise InputError("dataset has no spatial locations")
        if not np.all(np.isfinite(self.spatial_locations)):
            raise InputError("spatial locations contain non-finite values")
        if self.times.ndim != 1 or self.times.size == 0:
            raise InputError("times must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.times)):
            raise InputError("times contain non-finite values")
        expect = (self.times.size, self.spatial_locations.shape[0])
        if self.values.shape != expect:
            raise InputError(f"values shape {self.values.shape}, expected {expect}")
        if self.mask.shape != expect:
            raise InputError(f"mask shape {self.mask.shape}, expected {expect}")
        if self.times.size > 1:
            diffs = np.diff(self.times)
            if np.any(diffs <= 0.0):
                raise InputError("times must be strictly increasing")
            spread = float(diffs.max() - diffs.min())
            if spread > TIME_GRID_RTOL * float(diffs.mean()):
                raise InputError("times must be uniformly spaced (1e-9 relative)")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise InputError("masked-true values must be finite")

    @property
    def n_times(self) -> int:
        return self.times.size

    @property
    def n_locations(self) -> int:
        return self.spatial_locations.shape[0]

    @property
    def dt(self) -> float:
        if self.times.size < 2:
            return 1.0
        return float(np.mean(np.diff(self.times)))

    def window(self, start: int, stop: int) -> "GridDataset":
        """Contiguous time slice [start, stop)."""
        if not (0 <= start < stop <= self.n_times):
            raise InputError(
                f"window [{start}, {stop}) out of range for {self.n_times} steps"
            )
        return GridDataset(
            self.spatial_locations.copy(),
            self.times[start:stop].copy(),
            self.values[start:stop].copy(),
            self.mask[start:stop].copy(),
            dict(self.metadata),
        )


@dataclass(frozen=True)
class GridConfig:
    """Regular nx-by-ny spatial grid with a uniform time axis."""

    nx: int
    ny: int
    n_times: int
    dt: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)
    size: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or self.n_times < 1:
            raise InputError("grid needs nx, ny, n_times >= 1")
        if self.dt <= 0.0:
            raise InputError("dt must be positive")
        if self.size[0] <= 0.0 or self.size[1] <= 0.0:
            raise InputError("grid size must be positive")

    def locations(self) -> np.ndarray:
        xs = np.linspace(self.origin[0], self.origin[0] + self.size[0], self.nx)
        ys = np.linspace(self.origin[1], self.origin[1] + self.size[1], self.ny)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])

    def times(self) -> np.ndarray:
        return np.arange(self.n_times, dtype=float) * self.dt


@dataclass(frozen=True)
class BoxTransform:
    """Affine map between a raw bounding box and the unit square."""

    lo: np.ndarray
    scale: np.ndarray

    @classmethod
    def from_points(cls, points: np.ndarray) -> "BoxTransform":
        points = np.asarray(points, dtype=float)
        lo = points.min(axis=0)
        span = points.max(axis=0) - lo
        # Degenerate axes map through unchanged.
        scale = np.where(span > 0.0, span, 1.0)
        return cls(lo, scale)

    def to_unit(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.lo) / self.scale

    def from_unit(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) * self.scale + self.lo


# -- file format --


def _format_float(x: float) -> str:
    return repr(float(x))


def save_grid(dataset: GridDataset, path: str | Path) -> None:
    """Write ``manifest.json`` and ``data.csv`` into the directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {k: dataset.metadata[k] for k in MANIFEST_KEYS if k in dataset.metadata}
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    with (path / "data.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for ti, t in enumerate(dataset.times):
            tstr = _format_float(t)
            for li, (x1, x2) in enumerate(dataset.spatial_locations):
                writer.writerow(
                    [
                        tstr,
                        _format_float(x1),
                        _format_float(x2),
                        _format_float(dataset.values[ti, li]),
                        "1" if dataset.mask[ti, li] else "0",
                    ]
                )


def load_grid(path: str | Path) -> GridDataset:
    """Read a dataset directory written by :func:`save_grid`."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    csv_path = path / "data.csv"
    if not manifest_path.is_file():
        raise ParseError("missing manifest.json", path=str(path))
    if not csv_path.is_file():
        raise ParseError("missing data.csv", path=str(path))
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as err:
        raise ParseError(f"invalid JSON: {err}", path=str(manifest_path)) from err
    if not isinstance(manifest, dict):
        raise ParseError("manifest must be a JSON object", path=str(manifest_path))
    unknown = set(manifest) - MANIFEST_KEYS
    if unknown:
        raise ParseError(
            f"unknown manifest key {sorted(unknown)[0]!r}", path=str(manifest_path)
        )

    times: list[float] = []
    locations: list[tuple[float, float]] = []
    values: list[list[float]] = []
    masks: list[list[bool]] = []
    first_block = True
    with csv_path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file", path=str(csv_path), line=1)
        for col in header:
            if col not in CSV_HEADER:
                raise ParseError(f"unknown column {col!r}", path=str(csv_path), line=1)
        if tuple(header) != CSV_HEADER:
            raise ParseError(
                f"header must be {','.join(CSV_HEADER)}", path=str(csv_path), line=1
            )
        block_i = 0
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise ParseError(f"expected 5 fields, got {len(row)}", path=str(csv_path), line=lineno)
            try:
                t, x1, x2, y = (float(row[0]), float(row[1]), float(row[2]), float(row[3]))
            except ValueError as err:
                raise ParseError(f"bad number: {err}", path=str(csv_path), line=lineno) from err
            if row[4] not in ("0", "1"):
                raise ParseError(f"mask must be 0 or 1, got {row[4]!r}", path=str(csv_path), line=lineno)
            observed = row[4] == "1"
            if not times or t != times[-1]:
                if times and block_i != len(locations):
                    raise ParseError(
                        f"time block for t={times[-1]!r} has {block_i} rows, expected {len(locations)}",
                        path=str(csv_path),
                        line=lineno,
                    )
                if times:
                    first_block = False
                times.append(t)
                values.append([])
                masks.append([])
                block_i = 0
            if first_block:
                locations.append((x1, x2))
            else:
                if block_i >= len(locations) or locations[block_i] != (x1, x2):
                    raise ParseError(
                        "locations differ between time blocks", path=str(csv_path), line=lineno
                    )
            values[-1].append(y)
            masks[-1].append(observed)
            block_i += 1
    if not times:
        raise ParseError("no data rows", path=str(csv_path), line=2)
    if block_i != len(locations):
        raise ParseError(
            f"last time block has {block_i} rows, expected {len(locations)}",
            path=str(csv_path),
        )
    try:
        return GridDataset(
            np.array(locations, dtype=float),
            np.array(times, dtype=float),
            np.array(values, dtype=float),
            np.array(masks, dtype=bool),
            dict(manifest),
        )
    except InputError as err:
        raise ParseError(str(err), path=str(csv_path)) from err


# -- synthesis --


def _separable_chain(
    kernel: Separable, locations: np.ndarray, dt: float
) -> StateSpaceModel:
    """Exact state-space chain of a separable field over fixed locations."""
    sde, a_t, q_t = to_state_space(kernel.temporal, dt)
    kss = kernel.spatial.matrix(locations)
    n = locations.shape[0]
    return StateSpaceModel(
        A=np.kron(np.eye(n), a_t),
        Q=np.kron(kss, q_t),
        H=np.kron(np.eye(n), sde.H),
        P0=np.kron(kss, sde.Pinf),
        obs_noise=1.0,  # unused by sampling
    )


def _require_separable(kernel: Kernel) -> Separable:
    if not isinstance(kernel, Separable):
        raise InputError("field synthesis needs a Separable(spatial, temporal) kernel")
    return kernel


def _sample_field(kernel: Separable, locations: np.ndarray, config: GridConfig, seed: int) -> np.ndarray:
    model = _separable_chain(kernel, locations, config.dt)
    _, emitted = sample_prior(model, config.n_times, seed)
    return emitted


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def synth_field(
    kind: str,
    config: GridConfig,
    kernel: Kernel,
    seed: int,
    *,
    obs_noise: float = 0.0,
) -> GridDataset:
    """Draw one synthetic field on the configured grid.

    kind "separable_gp": exact draw from the separable kernel.
    kind "two_regime": blend of two separable draws whose spatial
    lengthscales differ by a factor of 5, switching across the vertical
    midline over a transition band of width 0.1 in normalized units. The
    supplied kernel provides the short-lengthscale half.
    """
    kernel = _require_separable(kernel)
    if obs_noise < 0.0 or not math.isfinite(obs_noise):
        raise InputError(f"obs_noise must be a finite non-negative value, got {obs_noise}")
    locations = config.locations()
    times = config.times()
    seeds = np.random.SeedSequence(seed).generate_state(4)
    rng = np.random.default_rng(int(seeds[3]))

    if kind == "separable_gp":
        field_values = _sample_field(kernel, locations, config, int(seeds[0]))
    elif kind == "two_regime":
        short = _sample_field(kernel, locations, config, int(seeds[0]))
        spatial = kernel.spatial
        if not isinstance(spatial, Matern32):
            raise InputError("two_regime expects a Matern32 spatial kernel")
        long_kernel = Separable(
            Matern32(spatial.variance, spatial.lengthscales * TWO_REGIME_RATIO),
            kernel.temporal,
        )
        long = _sample_field(long_kernel, locations, config, int(seeds[1]))
        x1_unit = BoxTransform.from_points(locations).to_unit(locations)[:, 0]
        w = _smoothstep((x1_unit - 0.5 + TWO_REGIME_BAND / 2.0) / TWO_REGIME_BAND)
        field_values = (1.0 - w) * short + w * long
    else:
        raise InputError(f"unknown field kind {kind!r}; expected separable_gp or two_regime")

    noisy = field_values + obs_noise * rng.standard_normal(field_values.shape)
    metadata = {
        "name": f"synth-{kind}",
        "units": {"t": "steps", "x": "raw", "y": "value"},
        "seed": int(seed),
        "generator": {
            "kind": kind,
            "obs_noise": float(obs_noise),
            "grid": {
                "nx": config.nx,
                "ny": config.ny,
                "n_times": config.n_times,
                "dt": config.dt,
                "origin": list(config.origin),
                "size": list(config.size),
            },
            "kernel": kernel.to_dict(),
        },
    }
    mask = np.ones(noisy.shape, dtype=bool)
    return GridDataset(locations, times, noisy, mask, metadata)


def inject_sim_error(
    dataset: GridDataset, ell_s: float, ell_t: float, var: float, seed: int
) -> GridDataset:
    """Add one draw of a separable Matern-3/2 x Matern-3/2 error field.

    ``ell_s`` is in normalized spatial units (unit square), ``ell_t`` in
    raw time units, ``var`` is the marginal variance of the injected
    error. ``var == 0`` returns the dataset unchanged.
    """
    if var < 0.0 or not math.isfinite(var):
        raise InputError(f"var must be a finite non-negative value, got {var}")
    if var == 0.0:
        return replace(
            dataset,
            spatial_locations=dataset.spatial_locations.copy(),
            times=dataset.times.copy(),
            values=dataset.values.copy(),
            mask=dataset.mask.copy(),
            metadata=dict(dataset.metadata),
        )
    transform = BoxTransform.from_points(dataset.spatial_locations)
    unit_locations = transform.to_unit(dataset.spatial_locations)
    error_kernel = Separable(
        Matern32(var, [ell_s, ell_s]),
        Matern32(1.0, [ell_t]),
    )
    model = _separable_chain(error_kernel, unit_locations, dataset.dt)
    _, draw = sample_prior(model, dataset.n_times, seed)
    metadata = dict(dataset.metadata)
    metadata.setdefault("generator", {})
    if isinstance(metadata.get("generator"), dict):
        metadata["generator"] = dict(metadata["generator"])
        metadata["generator"]["injected_error"] = {
            "ell_s": float(ell_s),
            "ell_t": float(ell_t),
            "var": float(var),
            "seed": int(seed),
        }
    return replace(
        dataset,
        spatial_locations=dataset.spatial_locations.copy(),
        times=dataset.times.copy(),
        values=dataset.values + draw,
        mask=dataset.mask.copy(),
        metadata=metadata,
    )


# -- geometry --


@dataclass(frozen=True)
class DomainHull:
    """Convex polygon, vertices in counterclockwise order, no collinear triples."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise InputError(f"hull needs at least 3 vertices of dimension 2, got {v.shape}")
        object.__setattr__(self, "vertices", v)

    def contains(self, point: np.ndarray, tol: float = 1e-12) -> bool:
        p = np.asarray(point, dtype=float).reshape(2)
        v = self.vertices
        nxt = np.roll(v, -1, axis=0)
        cross = (nxt[:, 0] - v[:, 0]) * (p[1] - v[:, 1]) - (nxt[:, 1] - v[:, 1]) * (p[0] - v[:, 0])
        scale = max(1.0, float(np.abs(v).max()))
        return bool(np.all(cross >= -tol * scale))

    def project(self, point: np.ndarray) -> np.ndarray:
        """Closest point of the hull (Euclidean); identity inside."""
        p = np.asarray(point, dtype=float).reshape(2)
        if self.contains(p):
            return p.copy()
        v = self.vertices
        nxt = np.roll(v, -1, axis=0)
        edge = nxt - v
        rel = p[None, :] - v
        denom = np.sum(edge * edge, axis=1)
        frac = np.clip(np.sum(rel * edge, axis=1) / denom, 0.0, 1.0)
        candidates = v + frac[:, None] * edge
        dist2 = np.sum((candidates - p[None, :]) ** 2, axis=1)
        return candidates[int(np.argmin(dist2))].copy()


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points: np.ndarray) -> DomainHull:
    """Andrew monotone chain; collinear boundary points are dropped."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InputError(f"points must be (n, 2), got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InputError("points contain non-finite values")
    uniq = sorted({(float(x), float(y)) for x, y in pts})
    if len(uniq) < 3:
        raise InputError("degenerate geometry: fewer than 3 distinct points")

    def half(seq):
        chain: list[tuple[float, float]] = []
        for p in seq:
            while len(chain) >= 2 and _cross(chain[-2], chain[-1], p) <= 0.0:
                chain.pop()
            chain.append(p)
        return chain

    lower = half(uniq)
    upper = half(reversed(uniq))
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise InputError("degenerate geometry: points are collinear")
    return DomainHull(np.array(hull, dtype=float))


def hull_project(hull: DomainHull, point: np.ndarray) -> np.ndarray:
    return hull.project(point)
