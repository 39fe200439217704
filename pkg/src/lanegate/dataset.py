"""Factorial simulation campaign and supervised dataset assembly.

For every sampled road segment and maneuver-parameter set, one reference
trajectory is generated and tracked in closed loop under a batch of
degradation sets; the maximum lateral deviation of each run becomes the
regression label.  The resulting table has 19 features per row:

    [w_min, w_max, k_min, k_max, v_init, v_end, a_max,
     steer-angle factors FL FR RL RR, steer-rate factors FL FR RL RR,
     torque factors FL FR RL RR]

Splits are disjoint by provenance key, and the standard scaler is fitted on
the training portion only.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controller import ControllerConfig, max_deviation, track_trajectories
from .maneuvers import (
    A_MAX_RANGE,
    V_END_RANGE,
    V_INIT_RANGE,
    InfeasibleManeuver,
    generate_lane_change,
    sample_maneuver_params,
)
from .plant import DegradationSet, PlantConfig
from .roads import K_MAX_RANGE, K_MIN_RANGE, W_MAX_RANGE, W_MIN_RANGE

FEATURE_NAMES = (
    "w_min", "w_max", "k_min", "k_max", "v_init", "v_end", "a_max",
    "dsf_fl", "dsf_fr", "dsf_rl", "dsf_rr",
    "drf_fl", "drf_fr", "drf_rl", "drf_rr",
    "trf_fl", "trf_fr", "trf_rl", "trf_rr",
)
N_FEATURES = 19

FEATURE_RANGES = np.array(
    [W_MIN_RANGE, W_MAX_RANGE, K_MIN_RANGE, K_MAX_RANGE,
     V_INIT_RANGE, V_END_RANGE, A_MAX_RANGE] + [(0.0, 1.0)] * 12)

DATASET_SCHEMA_VERSION = 1
DATASET_CSV_HEADER = (["schema_version", "seg_id", "man_idx", "deg_idx"]
                      + list(FEATURE_NAMES) + ["eps_lat_max", "flag"])

FLAG_OK = ""
FLAG_INFEASIBLE = "infeasible"
FLAG_DIVERGED = "diverged"

MAX_PARAM_RETRIES = 10

# Seed-stream domain tags; entropy tuples make every stream order-independent.
_DOMAIN_MANEUVER = 2
_DOMAIN_DEGRADATION = 3
_DOMAIN_SPLIT = 4


class DatasetError(RuntimeError):
    """Campaign-level failure (e.g. too many flagged samples)."""


def substream(seed: int, *key) -> np.random.Generator:
    """Deterministic, order-independent random stream for a keyed job."""
    return np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), *key)))


@dataclass
class Sample:
    """One simulated (segment, maneuver, degradation) cell."""

    features: np.ndarray
    label: float
    seg_id: str
    man_idx: int
    deg_idx: int
    flag: str = FLAG_OK

    @property
    def key(self):
        return (self.seg_id, self.man_idx, self.deg_idx)

    @property
    def usable(self):
        return self.flag == FLAG_OK


def sample_degradations(count: int, rng: np.random.Generator) -> list[DegradationSet]:
    """``count`` degradation sets; element 0 is always the nominal all-ones set."""
    if count < 1:
        raise ValueError("count must be >= 1")
    sets = [DegradationSet.nominal()]
    for _ in range(count - 1):
        factors = rng.uniform(0.0, 1.0, 12)
        sets.append(DegradationSet.from_features(factors))
    return sets


@dataclass
class GenerationStats:
    n_samples: int = 0
    n_infeasible: int = 0
    n_diverged: int = 0
    max_torque_excess: float = -math.inf
    max_rate_excess: float = -math.inf


def generate_dataset(segments, n_m: int, n_d: int, seed: int,
                     plant_cfg: PlantConfig | None = None,
                     ctrl_cfg: ControllerConfig | None = None,
                     batch_size: int = 500,
                     max_flagged_frac: float = 0.2,
                     maneuver_ranges: dict | None = None):
    """Run the full (segments x maneuvers x degradations) campaign.

    Returns (samples, stats) with exactly ``len(segments) * n_m * n_d``
    samples ordered by (segment, maneuver, degradation) index.  Maneuver
    parameters are redrawn up to a retry budget when the reference generator
    reports infeasibility; cells that stay infeasible or whose simulation
    diverges are flagged and excluded from learning downstream.
    """
    if n_m < 1 or n_d < 1:
        raise ValueError("n_m and n_d must be >= 1")
    ids = [seg.id for seg in segments]
    if len(set(ids)) != len(ids):
        raise ValueError("segment ids must be unique within a campaign")
    plant_cfg = plant_cfg or PlantConfig()
    ctrl_cfg = ctrl_cfg or ControllerConfig()
    stats = GenerationStats()

    jobs = []      # (seg, man_idx, ref | None, params | None)
    for si, seg in enumerate(segments):
        for mi in range(n_m):
            rng = substream(seed, _DOMAIN_MANEUVER, si, mi)
            ref = params = None
            for _ in range(MAX_PARAM_RETRIES):
                cand = sample_maneuver_params(rng)
                try:
                    ref = generate_lane_change(seg, cand)
                    params = cand
                    break
                except InfeasibleManeuver:
                    params = cand
            jobs.append((si, seg, mi, ref, params))

    samples: list[Sample] = []
    pending_refs, pending_degs, pending_meta = [], [], []

    def flush():
        if not pending_refs:
            return
        traces, tstats = track_trajectories(pending_refs, pending_degs, plant_cfg, ctrl_cfg)
        stats.max_torque_excess = max(stats.max_torque_excess, tstats.max_torque_excess)
        stats.max_rate_excess = max(stats.max_rate_excess, tstats.max_rate_excess)
        for trace, meta in zip(traces, pending_meta):
            sample = meta
            if trace.diverged:
                sample.flag = FLAG_DIVERGED
                sample.label = 0.0
                stats.n_diverged += 1
            else:
                sample.label = max_deviation(trace)[1]
            samples.append(sample)
        pending_refs.clear()
        pending_degs.clear()
        pending_meta.clear()

    for si, seg, mi, ref, params in jobs:
        deg_rng = substream(seed, _DOMAIN_DEGRADATION, si, mi)
        degs = sample_degradations(n_d, deg_rng)
        for di, deg in enumerate(degs):
            features = build_features(seg, params, deg)
            sample = Sample(features=features, label=0.0, seg_id=seg.id,
                            man_idx=mi, deg_idx=di)
            if ref is None:
                sample.flag = FLAG_INFEASIBLE
                stats.n_infeasible += 1
                samples.append(sample)
                continue
            pending_refs.append(ref)
            pending_degs.append(deg)
            pending_meta.append(sample)
            if len(pending_refs) >= batch_size:
                flush()
    flush()

    seg_order = {seg.id: i for i, seg in enumerate(segments)}
    samples.sort(key=lambda s: (seg_order[s.seg_id], s.man_idx, s.deg_idx))
    stats.n_samples = len(samples)
    flagged = stats.n_infeasible + stats.n_diverged
    if flagged > max_flagged_frac * len(samples):
        raise DatasetError(
            f"{flagged} of {len(samples)} samples flagged; plant/controller misconfigured?")
    return samples, stats


def build_features(segment, params, deg: DegradationSet) -> np.ndarray:
    """Assemble the 19-entry feature vector in frozen order."""
    out = np.empty(N_FEATURES)
    out[0] = segment.w_min
    out[1] = segment.w_max
    out[2] = segment.k_min
    out[3] = segment.k_max
    out[4] = params.v_init
    out[5] = params.v_end
    out[6] = params.a_max
    out[7:19] = deg.as_features()
    return out


def validate_features(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (N_FEATURES,):
        raise ValueError(f"feature vector must have {N_FEATURES} entries")
    return x


def features_outside_ranges(x):
    """Names of features outside the sampled value ranges (extrapolation)."""
    x = validate_features(x)
    bad = (x < FEATURE_RANGES[:, 0]) | (x > FEATURE_RANGES[:, 1])
    return [FEATURE_NAMES[i] for i in np.nonzero(bad)[0]]


@dataclass
class StandardScaler:
    """Per-feature standardization fitted on the training split only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x):
        x = np.asarray(x, dtype=float)
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        dead = std <= 1e-12 * (np.abs(mean) + 1.0)
        if np.any(dead):
            names = [FEATURE_NAMES[i] for i in np.nonzero(dead)[0]]
            raise ValueError(f"constant feature column(s): {', '.join(names)}")
        return cls(mean=mean, std=std)

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std


@dataclass
class DatasetSplits:
    """Disjoint train/calibration/test splits plus the train-fitted scaler."""

    train: list[Sample]
    calibration: list[Sample]
    test: list[Sample]
    scaler: StandardScaler

    def matrices(self, which: str):
        part = getattr(self, which)
        x = np.stack([s.features for s in part])
        y = np.array([s.label for s in part])
        return self.scaler.transform(x), y

    def keys(self, which: str):
        return [s.key for s in getattr(self, which)]


def split_and_scale(samples, train_frac: float, cal_count: int, seed: int) -> DatasetSplits:
    """Shuffle usable samples, split train/held-out, carve calibration from held-out."""
    usable = [s for s in samples if s.usable]
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie in (0, 1)")
    rng = substream(seed, _DOMAIN_SPLIT)
    order = rng.permutation(len(usable))
    n_train = round(train_frac * len(usable))
    held = order[n_train:]
    if cal_count >= len(held):
        raise ValueError(
            f"cal_count {cal_count} must stay below the held-out size {len(held)}")
    train = [usable[i] for i in order[:n_train]]
    calibration = [usable[i] for i in held[:cal_count]]
    test = [usable[i] for i in held[cal_count:]]
    scaler = StandardScaler.fit(np.stack([s.features for s in train]))
    return DatasetSplits(train=train, calibration=calibration, test=test, scaler=scaler)


def write_dataset_csv(samples, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DATASET_CSV_HEADER)
        for s in samples:
            row = [DATASET_SCHEMA_VERSION, s.seg_id, s.man_idx, s.deg_idx]
            row += [repr(float(v)) for v in s.features]
            row += [repr(float(s.label)), s.flag]
            writer.writerow(row)


def read_dataset_csv(path) -> list[Sample]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DATASET_CSV_HEADER:
            raise DatasetError("unexpected dataset header")
        for row in reader:
            if not row:
                continue
            if int(row[0]) != DATASET_SCHEMA_VERSION:
                raise DatasetError(f"unsupported dataset schema version {row[0]}")
            features = np.array([float(v) for v in row[4:4 + N_FEATURES]])
            samples.append(Sample(features=features, label=float(row[4 + N_FEATURES]),
                                  seg_id=row[1], man_idx=int(row[2]), deg_idx=int(row[3]),
                                  flag=row[5 + N_FEATURES]))
    return samples


def dataset_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_split_manifest(splits: DatasetSplits, path):
    """Split manifest: sample keys per split plus the scaler statistics."""
    payload = {
        "schema_version": DATASET_SCHEMA_VERSION,
        "scaler": {"mean": splits.scaler.mean.tolist(),
                   "std": splits.scaler.std.tolist()},
        "splits": {name: [list(k) for k in splits.keys(name)]
                   for name in ("train", "calibration", "test")},
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_splits(samples, manifest_path) -> DatasetSplits:
    """Rebuild splits from a manifest against the loaded sample table."""
    payload = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    by_key = {s.key: s for s in samples}
    parts = {}
    for name in ("train", "calibration", "test"):
        try:
            parts[name] = [by_key[tuple(k)] for k in payload["splits"][name]]
        except KeyError as exc:
            raise DatasetError(f"split manifest references unknown sample {exc}") from exc
    scaler = StandardScaler(mean=np.array(payload["scaler"]["mean"]),
                            std=np.array(payload["scaler"]["std"]))
    return DatasetSplits(train=parts["train"], calibration=parts["calibration"],
                         test=parts["test"], scaler=scaler)
