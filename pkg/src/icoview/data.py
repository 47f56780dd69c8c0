"""Dataset plumbing: manifest ingestion, age binning, inverse-frequency
class weights, train-time input augmentation, and a synthetic dataset
generator for desk-scale end-to-end runs.

A dataset is a CSV manifest whose rows point at per-subject mesh (OBJ) and
per-vertex feature (CSV) files. Warnings (range clamps, empty classes) go to
standard error, one line each, prefixed ``WARN:``.
"""

from __future__ import annotations

import csv
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import TriangleMesh, attach_features, icosphere, read_features_csv, read_obj, write_features_csv, write_obj

SPACES = ("native", "template")
SPLITS = ("train", "validation", "test")
MANIFEST_COLUMNS = ("subject_id", "space", "mesh_path", "features_path", "ga_weeks", "split")

DEFAULT_BIN_EDGES = (23.0, 27.0, 32.0, 36.0, 40.0, 44.0)

SYNTH_CHANNELS = 4
SYNTH_GA_LO = 23.0
SYNTH_GA_HI = 44.0
SYNTH_WAVE_AMPLITUDE = 0.05


def _warn(message: str) -> None:
    print(f"WARN: {message}", file=sys.stderr)


@dataclass(frozen=True)
class SubjectRecord:
    """One manifest row: a subject's files, label and split assignment.

    ``mesh_path`` and ``features_path`` are absolute (resolved against the
    manifest's directory at load time). ``space`` tags the coordinate framing
    of the surface data; both spaces train the same model, the tag is never a
    model input.
    """

    subject_id: str
    space: str
    mesh_path: Path
    features_path: Path
    ga_weeks: float
    split: str

    def __post_init__(self):
        if not self.subject_id:
            raise ValueError("subject_id must be non-empty")
        if self.space not in SPACES:
            raise ValueError(f"space must be one of {SPACES}, got {self.space!r}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not (np.isfinite(self.ga_weeks) and self.ga_weeks > 0):
            raise ValueError(f"ga_weeks must be finite and > 0, got {self.ga_weeks}")
        if not str(self.mesh_path) or not str(self.features_path):
            raise ValueError("mesh_path and features_path must be non-empty")
        object.__setattr__(self, "mesh_path", Path(self.mesh_path))
        object.__setattr__(self, "features_path", Path(self.features_path))
        object.__setattr__(self, "ga_weeks", float(self.ga_weeks))


@dataclass(frozen=True)
class BinningScheme:
    """Age bins over weeks-valued labels.

    ``edges`` are strictly ascending; bin i is the half-open interval
    [edges[i], edges[i+1]) except the last bin, which is closed on the right.
    """

    edges: tuple[float, ...] = DEFAULT_BIN_EDGES

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        if len(edges) < 3:
            raise ValueError("need at least 3 edges (2 classes)")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError(f"bin edges must be strictly ascending, got {edges}")
        if not np.isfinite(edges).all():
            raise ValueError("bin edges must be finite")
        object.__setattr__(self, "edges", edges)

    @property
    def class_count(self) -> int:
        return len(self.edges) - 1

    def label(self, index: int) -> str:
        """Human-readable interval label for bin ``index``."""
        lo, hi = self.edges[index], self.edges[index + 1]
        closer = "]" if index == self.class_count - 1 else ")"
        return f"[{lo:g},{hi:g}{closer}"


def assign_bin(ga_weeks: float, scheme: BinningScheme = BinningScheme()) -> int:
    """Class index of ``ga_weeks`` under ``scheme``.

    Values outside [edges[0], edges[-1]] clamp to the first or last class and
    emit a ``WARN:`` line on standard error; the mapping is total and monotone
    non-decreasing over finite inputs.
    """
    ga = float(ga_weeks)
    if not np.isfinite(ga):
        raise ValueError(f"ga_weeks must be finite, got {ga}")
    edges = scheme.edges
    if ga < edges[0]:
        _warn(f"ga_weeks {ga:g} below bin range [{edges[0]:g}, {edges[-1]:g}], clamped to class 0")
        return 0
    if ga > edges[-1]:
        _warn(
            f"ga_weeks {ga:g} above bin range [{edges[0]:g}, {edges[-1]:g}], "
            f"clamped to class {scheme.class_count - 1}"
        )
        return scheme.class_count - 1
    if ga == edges[-1]:  # last bin is closed on the right
        return scheme.class_count - 1
    return int(np.searchsorted(edges, ga, side="right")) - 1


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights, normalized to mean 1.

    ``empty_classes`` lists classes whose observed count was zero; their
    weight is computed with a count of 1 so it stays finite.
    """

    weights: np.ndarray
    empty_classes: tuple[int, ...] = ()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or len(w) < 2:
            raise ValueError(f"weights must be a 1-D vector of >= 2 classes, got shape {w.shape}")
        if not ((w > 0).all() and np.isfinite(w).all()):
            raise ValueError("class weights must be positive and finite")
        if abs(w.mean() - 1.0) > 1e-9:
            raise ValueError(f"class weights must have mean 1, got {w.mean()!r}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "empty_classes", tuple(int(i) for i in self.empty_classes))


def class_weights(counts) -> ClassWeights:
    """Inverse-frequency class weights from per-class sample counts.

    w_i = N / (K * max(c_i, 1)) for N total samples over K classes, rescaled
    so the mean weight is exactly 1. Zero-count classes are flagged (and
    warned about) but still get a finite weight.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or len(counts) < 2:
        raise ValueError(f"counts must be a 1-D vector of >= 2 classes, got shape {counts.shape}")
    if (counts < 0).any():
        raise ValueError("counts must be non-negative")
    total = int(counts.sum())
    if total == 0:
        raise ValueError("all class counts are zero")
    empty = tuple(int(i) for i in np.flatnonzero(counts == 0))
    if empty:
        _warn(f"empty class(es) {list(empty)}: weight computed with count 1")
    raw = total / (len(counts) * np.maximum(counts, 1).astype(np.float64))
    return ClassWeights(weights=raw / raw.mean(), empty_classes=empty)


@dataclass(frozen=True)
class AugmentConfig:
    """Train-time input augmentation: inverted dropout plus Gaussian noise.

    ``input_dropout_p`` zeroes each input element independently (survivors
    rescaled by 1/(1-p), preserving expectations); ``noise_sigma`` is the
    standard deviation of i.i.d. noise added to elements that are non-zero
    after dropout — zeros (background included) stay exactly zero.
    """

    input_dropout_p: float = 0.2
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.input_dropout_p < 1.0:
            raise ValueError(f"input_dropout_p must be in [0, 1), got {self.input_dropout_p}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    @property
    def is_identity(self) -> bool:
        return self.input_dropout_p == 0.0 and self.noise_sigma == 0.0


def augment(stack, cfg: AugmentConfig, sample_index: int, epoch: int = 0):
    """Apply the augmentation of ``cfg`` to a ViewStack.

    The random stream is a pure function of (cfg.seed, sample_index, epoch),
    so any single sample's augmentation is reproducible in isolation and
    changes every epoch. Returns a new ViewStack; the input is not modified.
    """
    from .render import ViewStack

    if cfg.is_identity:
        return stack
    rng = np.random.default_rng([int(cfg.seed), int(sample_index), int(epoch)])
    data = stack.data.astype(np.float64)
    keep = rng.random(size=data.shape) >= cfg.input_dropout_p
    out = np.where(keep, data / (1.0 - cfg.input_dropout_p), 0.0)
    if cfg.noise_sigma > 0.0:
        noise = rng.normal(0.0, cfg.noise_sigma, size=data.shape)
        out = np.where(out != 0.0, out + noise, out)
    return ViewStack(out.astype(np.float32))


def load_manifest(path: str | Path, scheme: BinningScheme = BinningScheme()) -> list[SubjectRecord]:
    """Read and validate a dataset manifest CSV.

    Columns (exact header): ``subject_id,space,mesh_path,features_path,
    ga_weeks,split``. Paths are interpreted relative to the manifest's
    directory. Duplicate (subject_id, space) pairs are rejected; GA values
    outside the binning range produce a ``WARN:`` line but are kept.
    Referenced files are checked only when the subject is actually loaded.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    records: list[SubjectRecord] = []
    seen: set[tuple[str, str]] = set()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty manifest") from None
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(MANIFEST_COLUMNS)!r}, got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns, got {len(row)}")
            subject_id, space, mesh_rel, feat_rel, ga_text, split = (c.strip() for c in row)
            try:
                ga = float(ga_text)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: ga_weeks is not a number: {ga_text!r}") from None
            try:
                record = SubjectRecord(
                    subject_id=subject_id,
                    space=space,
                    mesh_path=base / mesh_rel,
                    features_path=base / feat_rel,
                    ga_weeks=ga,
                    split=split,
                )
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            key = (record.subject_id, record.space)
            if key in seen:
                raise ValueError(f"{path}:{lineno}: duplicate subject_id+space {key!r}")
            seen.add(key)
            if not scheme.edges[0] <= record.ga_weeks <= scheme.edges[-1]:
                _warn(
                    f"{path}:{lineno}: ga_weeks {record.ga_weeks:g} outside bin range "
                    f"[{scheme.edges[0]:g}, {scheme.edges[-1]:g}]; will clamp"
                )
            records.append(record)
    if not records:
        raise ValueError(f"{path}: manifest has no data rows")
    return records


def load_bundle(record: SubjectRecord) -> TriangleMesh:
    """Load one subject's mesh and attach its per-vertex features."""
    if not record.mesh_path.is_file():
        raise FileNotFoundError(f"{record.subject_id}: mesh file not found: {record.mesh_path}")
    if not record.features_path.is_file():
        raise FileNotFoundError(f"{record.subject_id}: features file not found: {record.features_path}")
    mesh = read_obj(record.mesh_path)
    features = read_features_csv(record.features_path)
    try:
        return attach_features(mesh, features)
    except ValueError as exc:
        raise ValueError(f"{record.subject_id}: {exc}") from None


def synth_ga_to_level(ga_weeks: float) -> float:
    """The synthetic channel-0 encoding: GA mapped affinely onto [0, 1]."""
    return (float(ga_weeks) - SYNTH_GA_LO) / (SYNTH_GA_HI - SYNTH_GA_LO)


def synth_features(mesh: TriangleMesh, ga_weeks: float, rng: np.random.Generator) -> np.ndarray:
    """Per-vertex features for one synthetic subject.

    Channel 0 is constant ``(ga - 23) / 21`` (the label is exactly
    recoverable from it); channels 1..3 carry small spatial sinusoids with
    per-subject random frequency and phase, so images are not trivially
    constant.
    """
    n = mesh.num_vertices
    feats = np.empty((n, SYNTH_CHANNELS))
    feats[:, 0] = synth_ga_to_level(ga_weeks)
    freqs = rng.uniform(1.0, 3.0, size=SYNTH_CHANNELS - 1)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=SYNTH_CHANNELS - 1)
    for k in range(SYNTH_CHANNELS - 1):
        axis = mesh.vertices[:, k % 3]
        feats[:, k + 1] = SYNTH_WAVE_AMPLITUDE * np.sin(2.0 * np.pi * freqs[k] * axis + phases[k])
    return feats


def synth_dataset(out_dir: str | Path, n_subjects: int, icosphere_level: int = 3, seed: int = 0) -> Path:
    """Generate a synthetic dataset and return the manifest path.

    Each subject is an icosphere whose channel-0 feature equals
    ``(ga - 23) / 21`` with GA drawn uniformly from [23, 44]. Subjects
    alternate native/template space; the last ``max(1, round(0.2 n))``
    subjects form the validation split, the rest train. Output is
    byte-identical for identical arguments.
    """
    n_subjects = int(n_subjects)
    if n_subjects < 2:
        raise ValueError(f"need at least 2 subjects (train + validation), got {n_subjects}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mesh = icosphere(icosphere_level)
    n_val = max(1, int(round(0.2 * n_subjects)))
    rows = []
    for i in range(n_subjects):
        rng = np.random.default_rng([int(seed), i])
        ga = rng.uniform(SYNTH_GA_LO, SYNTH_GA_HI)
        feats = synth_features(mesh, ga, rng)
        sid = f"synth{i:03d}"
        mesh_name = f"{sid}.obj"
        feat_name = f"{sid}.csv"
        write_obj(out_dir / mesh_name, mesh)
        write_features_csv(out_dir / feat_name, feats)
        space = SPACES[i % 2]
        split = "validation" if i >= n_subjects - n_val else "train"
        rows.append(f"{sid},{space},{mesh_name},{feat_name},{ga:.17g},{split}")
    manifest = out_dir / "manifest.csv"
    manifest.write_text(",".join(MANIFEST_COLUMNS) + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    return manifest
