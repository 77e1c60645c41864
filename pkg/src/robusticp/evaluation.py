"""Benchmark protocol: perturbations, pose-error metrics, sweeps, aggregation.

A benchmark is the full factorial of cloud pairs x filter parameterizations x
seeded initial perturbations. Perturbation k of a pair derives from
(master seed, pair id, k) only, so every filter faces the identical set of
initial offsets and per-seed comparisons are paired. Failures are recorded,
never fatal.
"""

from __future__ import annotations

import csv
import hashlib
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .cloud import PointCloud, load_cloud
from .errors import MissingBaseline, NoParameter, RobustIcpError
from .icp import IcpConfig, register
from .robust import FilterKind, FilterSpec, K_KINDS, with_parameter
from .se3 import RigidTransform, axis_angle, compose, inverse, load_transform, rotation_angle


# ---------------------------------------------------------------------------
# Initial-pose perturbations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PerturbationSpec:
    """Random initial-offset model: translation uniform over a solid ball,
    rotation by a uniform angle about a uniformly random axis."""

    max_translation: float = 1.0            # meters (ball radius)
    max_angle: float = float(np.deg2rad(25.0))  # radians
    count: int = 128                          # perturbations per benchmark cell
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_translation < 0 or self.max_angle < 0 or self.count < 1:
            raise ValueError("perturbation bounds must be non-negative and count >= 1")


def _random_unit(rng: np.random.Generator) -> NDArray[np.float64]:
    while True:
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


def sample_perturbation(spec: PerturbationSpec, rng: np.random.Generator) -> RigidTransform:
    """One random offset transform; identity when both bounds are zero."""
    direction = _random_unit(rng)
    radius = spec.max_translation * rng.random() ** (1.0 / 3.0)
    t = direction * radius
    axis = _random_unit(rng)
    angle = rng.random() * spec.max_angle
    return RigidTransform(axis_angle(axis, angle), t)


def transform_error(T_gt: RigidTransform, T_final: RigidTransform) -> tuple[float, float]:
    """(translation error in meters, rotation angle in radians) of the
    relative transform between ground truth and estimate."""
    delta = compose(inverse(T_gt), T_final)
    return float(np.linalg.norm(delta.translation)), rotation_angle(delta.rotation)


# ---------------------------------------------------------------------------
# Parameter sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepPlan:
    kind: FilterKind
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ValueError("sweep values must be strictly increasing")


# Log-sampled zones for the dimensionless tuning parameter: Z1 probes the
# near-zero asymptote, Z2 brackets where the best accuracy typically lives.
_Z1 = tuple(float(v) for v in np.geomspace(1e-6, 0.1, num=20, endpoint=False))
_Z2 = tuple(float(v) for v in np.geomspace(0.1, 100.0, num=30))


def build_sweep(kind: FilterKind) -> SweepPlan:
    """The canonical parameter grid for a filter kind.

    M-estimators and student: 20 log-spaced values in [1e-6, 0.1) plus 30 in
    [0.1, 100]. maxdist: 20 linear in [0.1, 2] meters. trimmed: overlap f,
    20 linear in [1e-6, 1]. vartrimmed: exponent lambda, 20 linear in
    [0.8, 5].
    """
    kind = FilterKind(kind)
    if kind in K_KINDS and kind is not FilterKind.MAX_DISTANCE:
        return SweepPlan(kind, _Z1 + _Z2)
    if kind is FilterKind.MAX_DISTANCE:
        return SweepPlan(kind, tuple(float(v) for v in np.linspace(0.1, 2.0, 20)))
    if kind is FilterKind.TRIMMED:
        return SweepPlan(kind, tuple(float(v) for v in np.linspace(1e-6, 1.0, 20)))
    if kind is FilterKind.VAR_TRIMMED:
        return SweepPlan(kind, tuple(float(v) for v in np.linspace(0.8, 5.0, 20)))
    raise NoParameter(f"{kind.value} has no tunable parameter")


def expand_sweep(template: FilterSpec) -> list[FilterSpec]:
    """All parameterizations of ``template`` along its kind's sweep grid."""
    plan = build_sweep(template.kind)
    return [with_parameter(template, v) for v in plan.values]


# ---------------------------------------------------------------------------
# Benchmark records
# ---------------------------------------------------------------------------

RECORD_FIELDS = (
    "pair_id",
    "filter",
    "param",
    "scale_mode",
    "perturb_idx",
    "trans_err_m",
    "rot_err_rad",
    "iters",
    "stop_reason",
)


@dataclass(frozen=True)
class BenchmarkRecord:
    pair_id: str
    filter: str                # filter kind, canonical name
    param: float | None        # primary tuning parameter, None if parameterless
    scale_mode: str            # canonical scale string
    perturb_idx: int
    trans_err: float           # meters
    rot_err: float             # radians
    iters: int
    stop_reason: str

    def row(self) -> list[str]:
        return [
            self.pair_id,
            self.filter,
            "" if self.param is None else format(self.param, ".17g"),
            self.scale_mode,
            str(self.perturb_idx),
            format(self.trans_err, ".17g"),
            format(self.rot_err, ".17g"),
            str(self.iters),
            self.stop_reason,
        ]


def write_records_csv(records, out) -> None:
    """Write records to a path or text file object, header included."""
    if isinstance(out, (str, Path)):
        with open(out, "w", newline="", encoding="utf-8") as f:
            write_records_csv(records, f)
        return
    writer = csv.writer(out)
    writer.writerow(RECORD_FIELDS)
    for rec in records:
        writer.writerow(rec.row())


def read_records_csv(path_or_file) -> list[BenchmarkRecord]:
    if isinstance(path_or_file, (str, Path)):
        with open(path_or_file, newline="", encoding="utf-8") as f:
            return read_records_csv(f)
    reader = csv.reader(path_or_file)
    header = next(reader, None)
    if header is None or tuple(header) != RECORD_FIELDS:
        raise RobustIcpError(f"bad records header: {header}")
    records = []
    for row in reader:
        if not row:
            continue
        records.append(
            BenchmarkRecord(
                pair_id=row[0],
                filter=row[1],
                param=None if row[2] == "" else float(row[2]),
                scale_mode=row[3],
                perturb_idx=int(row[4]),
                trans_err=float(row[5]),
                rot_err=float(row[6]),
                iters=int(row[7]),
                stop_reason=row[8],
            )
        )
    return records


# ---------------------------------------------------------------------------
# The benchmark runner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegistrationPair:
    pair_id: str
    reading: PointCloud
    reference: PointCloud
    t_gt: RigidTransform


def _pair_entropy(pair_id: str) -> int:
    digest = hashlib.sha256(pair_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def perturbation_streams(master_seed: int, pair_id: str, perturb_idx: int):
    """(rng for the perturbation, integer seed for the registration).

    Keyed on (master seed, pair, index) only: every filter cell replays the
    same perturbations and the same data-filter subsampling.
    """
    seq = np.random.SeedSequence((master_seed, _pair_entropy(pair_id), perturb_idx))
    pert_seq, icp_seq = seq.spawn(2)
    rng = np.random.default_rng(pert_seq)
    icp_seed = int(icp_seq.generate_state(1, dtype=np.uint64)[0])
    return rng, icp_seed


def _run_cell(
    pair: RegistrationPair,
    spec: FilterSpec,
    perturbation: PerturbationSpec,
    config: IcpConfig,
) -> list[BenchmarkRecord]:
    records = []
    for k in range(perturbation.count):
        rng, icp_seed = perturbation_streams(perturbation.seed, pair.pair_id, k)
        offset = sample_perturbation(perturbation, rng)
        t0 = compose(pair.t_gt, offset)
        cfg = replace(config, filter=spec, seed=icp_seed)
        try:
            result = register(pair.reading, pair.reference, t0, cfg)
            final = result.final_transform
            iters = result.iterations
            stop = result.stop_reason.value
        except RobustIcpError:
            final, iters, stop = t0, 0, "failed"
        trans_err, rot_err = transform_error(pair.t_gt, final)
        records.append(
            BenchmarkRecord(
                pair_id=pair.pair_id,
                filter=spec.kind.value,
                param=spec.parameter(),
                scale_mode=spec.scale.canonical(),
                perturb_idx=k,
                trans_err=trans_err,
                rot_err=rot_err,
                iters=iters,
                stop_reason=stop,
            )
        )
    return records


def run_benchmark(
    pairs: list[RegistrationPair],
    filters,
    perturbation: PerturbationSpec,
    config: IcpConfig | None = None,
    jobs: int = 1,
    on_record=None,
) -> list[BenchmarkRecord]:
    """Full factorial pairs x filters x perturbations.

    ``filters`` items are FilterSpec instances or SweepPlan objects (expanded
    with default scale). ``on_record`` is called for each record as it is
    produced (serialized across workers). Record order is unspecified when
    jobs > 1; every record carries its full key.
    """
    if not pairs or not filters:
        raise ValueError("need at least one pair and one filter")
    config = config or IcpConfig()

    specs: list[FilterSpec] = []
    for item in filters:
        if isinstance(item, SweepPlan):
            base = FilterSpec(item.kind, k=1.0, f=0.5, lam=2.0)
            specs.extend(with_parameter(base, v) for v in item.values)
        else:
            specs.append(item)

    cells = [(pair, spec) for pair in pairs for spec in specs]
    lock = threading.Lock()
    all_records: list[BenchmarkRecord] = []

    def finish(cell_records: list[BenchmarkRecord]) -> None:
        with lock:
            all_records.extend(cell_records)
            if on_record is not None:
                for rec in cell_records:
                    on_record(rec)

    if jobs <= 1:
        for pair, spec in cells:
            finish(_run_cell(pair, spec, perturbation, config))
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_run_cell, pair, spec, perturbation, config)
                for pair, spec in cells
            ]
            for fut in futures:
                finish(fut.result())
    return all_records


# ---------------------------------------------------------------------------
# Aggregation and the flat-valley robustness metric
# ---------------------------------------------------------------------------

def _median_low(values) -> float:
    """Median that is always a member of the sample (lower middle when even)."""
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def aggregate_median(
    records: list[BenchmarkRecord],
    group_by: tuple[str, ...] = ("filter", "scale_mode", "param"),
) -> list[dict]:
    """Per-group median translation/rotation error (permutation-invariant).

    Returns one dict per group with the key fields, ``n``, ``median_trans_err``
    and ``median_rot_err``, sorted by group key.
    """
    groups: dict[tuple, list[BenchmarkRecord]] = {}
    for rec in records:
        key = tuple(getattr(rec, name) for name in group_by)
        groups.setdefault(key, []).append(rec)

    rows = []
    none_last = lambda k: tuple((v is None, v) for v in k)
    for key in sorted(groups, key=none_last):
        recs = groups[key]
        row = dict(zip(group_by, key))
        row["n"] = len(recs)
        row["median_trans_err"] = _median_low(r.trans_err for r in recs)
        row["median_rot_err"] = _median_low(r.rot_err for r in recs)
        rows.append(row)
    return rows


def flat_valley(
    records: list[BenchmarkRecord],
    kind: FilterKind | str,
    scale_mode: str | None = None,
) -> tuple[float, float] | None:
    """Widest contiguous run of sweep parameters whose median translation
    error strictly beats the L1 baseline median; None when no parameter wins.
    """
    kind_value = FilterKind(kind).value
    l1 = [r.trans_err for r in records if r.filter == FilterKind.L1.value]
    if not l1:
        raise MissingBaseline("valley analysis needs l1 records")
    baseline = _median_low(l1)

    per_param: dict[float, list[float]] = {}
    for rec in records:
        if rec.filter != kind_value or rec.param is None:
            continue
        if scale_mode is not None and rec.scale_mode != scale_mode:
            continue
        per_param.setdefault(rec.param, []).append(rec.trans_err)
    params = sorted(per_param)
    wins = [_median_low(per_param[p]) < baseline for p in params]

    best: tuple[int, int] | None = None
    start = None
    for i, won in enumerate([*wins, False]):
        if won and start is None:
            start = i
        elif not won and start is not None:
            if best is None or (i - start) > (best[1] - best[0]):
                best = (start, i)
            start = None
    if best is None:
        return None
    return params[best[0]], params[best[1] - 1]


# ---------------------------------------------------------------------------
# Pair manifests
# ---------------------------------------------------------------------------

MANIFEST_FIELDS = ("reading_path", "reference_path", "gt_path", "pair_id", "overlap")


@dataclass(frozen=True)
class ManifestEntry:
    reading_path: Path
    reference_path: Path
    gt_path: Path
    pair_id: str
    overlap: float | None


def load_pair_manifest(path: str | Path) -> list[ManifestEntry]:
    """Read a pair-manifest CSV; relative paths resolve against the manifest."""
    path = Path(path)
    base = path.parent
    entries = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise RobustIcpError(f"{path}: manifest missing columns {sorted(missing)}")
        for row in reader:
            entries.append(
                ManifestEntry(
                    reading_path=base / row["reading_path"],
                    reference_path=base / row["reference_path"],
                    gt_path=base / row["gt_path"],
                    pair_id=row["pair_id"],
                    overlap=float(row["overlap"]) if row["overlap"] else None,
                )
            )
    if not entries:
        raise RobustIcpError(f"{path}: manifest has no pairs")
    return entries


def load_pairs(entries: list[ManifestEntry]) -> list[RegistrationPair]:
    return [
        RegistrationPair(
            pair_id=e.pair_id,
            reading=load_cloud(e.reading_path),
            reference=load_cloud(e.reference_path),
            t_gt=load_transform(e.gt_path),
        )
        for e in entries
    ]
