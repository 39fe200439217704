"""Two-lane road segments described by geometric indicators.

A segment stores its extreme lane width and signed curvature plus a
discretized centerline of the current lane.  Segments are either loaded
from CSV or synthesized over the operating-domain indicator ranges.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Indicator sampling ranges of the operating domain (per-segment extremes).
W_MIN_RANGE = (2.78, 3.44)      # m
W_MAX_RANGE = (2.89, 3.84)      # m
K_MIN_RANGE = (-5.4e-4, 0.0)    # 1/m
K_MAX_RANGE = (0.0, 1.9e-4)     # 1/m
LENGTH_RANGE = (45.0, 250.0)    # m, synthetic segments only
MIN_SEGMENT_LENGTH = 45.0       # m, admission threshold for experiments

CENTERLINE_STEP = 1.0           # m, arc-length discretization
CURVATURE_TOL = 1e-6            # 1/m, slack for polyline-derived curvature

SEGMENT_CSV_HEADER = ["id", "length_m", "w_min_m", "w_max_m", "k_min_per_m", "k_max_per_m"]
CENTERLINE_CSV_HEADER = ["s_m", "x_m", "y_m"]


class SegmentValidationError(ValueError):
    """A segment record violates the geometric invariants."""


@dataclass(eq=False)
class RoadSegment:
    """Two-lane road segment with indicator extremes and a centerline polyline."""

    id: str
    length: float
    w_min: float
    w_max: float
    k_min: float
    k_max: float
    centerline: np.ndarray                      # (N, 2) current-lane center, m
    _arc: np.ndarray = field(init=False, repr=False)
    _kappa: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=float)
        self._arc, self._kappa = _polyline_curvature(self.centerline)

    def curvature_at(self, s):
        """Signed centerline curvature at arc position ``s`` (clamped to the segment)."""
        return np.interp(s, self._arc, self._kappa)

    def width_at(self, s):
        """Lane width at arc position ``s``; linear between the stored extremes."""
        frac = np.clip(np.asarray(s, dtype=float) / self.length, 0.0, 1.0)
        return self.w_min + (self.w_max - self.w_min) * frac

    def curvature_knots(self):
        """Arc grid and curvature samples derived from the centerline."""
        return self._arc, self._kappa


def _polyline_curvature(points):
    """Arc positions and signed curvature estimated from a centerline polyline."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 3 or points.shape[1] != 2:
        raise SegmentValidationError("centerline needs at least 3 (x, y) points")
    deltas = np.diff(points, axis=0)
    ds = np.hypot(deltas[:, 0], deltas[:, 1])
    if np.any(ds <= 0.0):
        raise SegmentValidationError("centerline arc length must be strictly increasing")
    headings = np.unwrap(np.arctan2(deltas[:, 1], deltas[:, 0]))
    # Curvature at interior vertices: heading change per mid-span arc length.
    dtheta = np.diff(headings)
    mid_ds = 0.5 * (ds[:-1] + ds[1:])
    kappa_interior = dtheta / mid_ds
    arc = np.concatenate(([0.0], np.cumsum(ds)))
    arc_interior = arc[1:-1]
    kappa = np.concatenate(([kappa_interior[0]], kappa_interior, [kappa_interior[-1]]))
    s_nodes = np.concatenate(([0.0], arc_interior, [arc[-1]]))
    return s_nodes, kappa


def _validate_segment(seg: RoadSegment, where: str):
    if not seg.id:
        raise SegmentValidationError(f"{where}: empty segment id")
    if not (seg.w_min <= seg.w_max):
        raise SegmentValidationError(f"{where}: w_min {seg.w_min} > w_max {seg.w_max}")
    if not (seg.k_min <= 0.0 <= seg.k_max):
        raise SegmentValidationError(f"{where}: curvature extremes must bracket 0, got [{seg.k_min}, {seg.k_max}]")
    if not (seg.length >= MIN_SEGMENT_LENGTH):
        raise SegmentValidationError(f"{where}: length {seg.length} m below minimum {MIN_SEGMENT_LENGTH} m")
    if not all(map(math.isfinite, (seg.length, seg.w_min, seg.w_max, seg.k_min, seg.k_max))):
        raise SegmentValidationError(f"{where}: non-finite indicator value")
    arc, kappa = seg.curvature_knots()
    if abs(arc[-1] - seg.length) > 2.0:
        raise SegmentValidationError(
            f"{where}: centerline arc length {arc[-1]:.2f} m disagrees with stated length {seg.length:.2f} m")
    if np.any(kappa < seg.k_min - CURVATURE_TOL) or np.any(kappa > seg.k_max + CURVATURE_TOL):
        raise SegmentValidationError(f"{where}: polyline curvature leaves [{seg.k_min}, {seg.k_max}]")


def generate_segments(count: int, seed: int, *, w_min_range=W_MIN_RANGE,
                      w_max_range=W_MAX_RANGE, k_min_range=K_MIN_RANGE,
                      k_max_range=K_MAX_RANGE, length_range=LENGTH_RANGE) -> list[RoadSegment]:
    """Synthesize ``count`` segments with indicators uniform over the given ranges.

    Deterministic in ``seed``.  The curvature profile of each segment is a
    piecewise-linear function of arc length that attains both indicator
    extremes; lane width varies linearly between ``w_min`` and ``w_max``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    segments = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 1, i)))
        length = rng.uniform(*length_range)
        while True:
            w_min = rng.uniform(*w_min_range)
            w_max = rng.uniform(*w_max_range)
            if w_min <= w_max:
                break
        k_min = rng.uniform(*k_min_range)
        k_max = rng.uniform(*k_max_range)
        centerline = _synthesize_centerline(rng, length, k_min, k_max)
        seg = RoadSegment(id=f"seg{i:04d}", length=length, w_min=w_min, w_max=w_max,
                          k_min=k_min, k_max=k_max, centerline=centerline)
        _validate_segment(seg, f"generated segment {i}")
        segments.append(seg)
    return segments


def _synthesize_centerline(rng, length, k_min, k_max):
    """Integrate a piecewise-linear curvature profile into an (x, y) polyline."""
    n_knots = 7
    values = np.empty(n_knots)
    values[0] = rng.uniform(k_min, k_max)
    values[-1] = rng.uniform(k_min, k_max)
    interior = rng.permutation(n_knots - 2)
    vals = [k_min, k_max] + [rng.uniform(k_min, k_max) for _ in range(n_knots - 4)]
    for slot, v in zip(interior, vals):
        values[1 + slot] = v
    knot_s = np.linspace(0.0, length, n_knots)
    s = np.arange(0.0, length, CENTERLINE_STEP)
    if s[-1] < length:
        s = np.append(s, length)
    kappa = np.interp(s, knot_s, values)
    theta = np.concatenate(([0.0], np.cumsum(0.5 * (kappa[1:] + kappa[:-1]) * np.diff(s))))
    x = np.concatenate(([0.0], np.cumsum(0.5 * (np.cos(theta[1:]) + np.cos(theta[:-1])) * np.diff(s))))
    y = np.concatenate(([0.0], np.cumsum(0.5 * (np.sin(theta[1:]) + np.sin(theta[:-1])) * np.diff(s))))
    return np.column_stack([x, y])


def filter_min_length(segments, min_len: float):
    """Order-preserving subset of segments at least ``min_len`` meters long."""
    if min_len <= 0.0:
        raise ValueError("min_len must be positive")
    return [seg for seg in segments if seg.length >= min_len]


def save_segments(segments, path):
    """Write the indicator CSV plus one centerline CSV per segment next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SEGMENT_CSV_HEADER)
        for seg in segments:
            writer.writerow([seg.id, repr(seg.length), repr(seg.w_min), repr(seg.w_max),
                             repr(seg.k_min), repr(seg.k_max)])
    for seg in segments:
        cl_path = path.parent / f"{seg.id}.centerline.csv"
        arc = np.concatenate(([0.0], np.cumsum(np.hypot(*np.diff(seg.centerline, axis=0).T))))
        with open(cl_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CENTERLINE_CSV_HEADER)
            for s_i, (x_i, y_i) in zip(arc, seg.centerline):
                writer.writerow([repr(float(s_i)), repr(float(x_i)), repr(float(y_i))])


def load_segments(path) -> list[RoadSegment]:
    """Load segments from the indicator CSV; sibling centerline files are required.

    Raises ``SegmentValidationError`` listing every offending row if any record
    violates the segment invariants, and ``FileNotFoundError`` for missing files.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"segment file not found: {path}")
    segments = []
    problems = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SEGMENT_CSV_HEADER:
            raise SegmentValidationError(f"unexpected header {header!r}, want {SEGMENT_CSV_HEADER!r}")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                seg = _parse_segment_row(row, path.parent)
                _validate_segment(seg, f"row {row_no}")
                segments.append(seg)
            except (SegmentValidationError, ValueError) as exc:
                problems.append(f"row {row_no}: {exc}")
    if problems:
        raise SegmentValidationError("; ".join(problems))
    return segments


def _parse_segment_row(row, directory):
    if len(row) != len(SEGMENT_CSV_HEADER):
        raise ValueError(f"expected {len(SEGMENT_CSV_HEADER)} columns, got {len(row)}")
    seg_id = row[0]
    length, w_min, w_max, k_min, k_max = map(float, row[1:])
    cl_path = directory / f"{seg_id}.centerline.csv"
    if not cl_path.exists():
        raise ValueError(f"missing centerline file {cl_path.name}")
    data = np.genfromtxt(cl_path, delimiter=",", skip_header=1)
    if data.ndim != 2 or data.shape[1] != 3:
        raise ValueError(f"malformed centerline file {cl_path.name}")
    return RoadSegment(id=seg_id, length=length, w_min=w_min, w_max=w_max,
                       k_min=k_min, k_max=k_max, centerline=data[:, 1:3])
