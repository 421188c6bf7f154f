"""Trial ingestion: label masking, feature alignment, padding, normalization,
windowing, and the AFSQ feature container."""
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

SENTINEL = -5.0
AFSQ_MAGIC = b"AFSQ"
AFSQ_VERSION = 1
AFSQ_HEADER = struct.Struct("<4sIIII")
STD_FLOOR = 1e-8
DIMENSIONS = ("valence", "arousal")


class FeatureFileError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class FeatureSequence:
    values: np.ndarray  # (T, D)
    rate_hz: float
    modality: str = ""


@dataclass
class LabelSequence:
    values: np.ndarray  # (N, k) retained rows
    positions: np.ndarray  # original row index of each retained row
    empty: bool = False


@dataclass(frozen=True)
class WindowSpec:
    length: int = 300
    hop: int = 200

    def __post_init__(self):
        if not 0 < self.hop <= self.length:
            raise ValueError(f"need 0 < hop <= length, got hop={self.hop}, length={self.length}")

    @property
    def overlap(self):
        return (self.length - self.hop) / self.length


# ---------------------------------------------------------------------------
# AFSQ container: 20-byte header (magic, version, T, D, rate in mHz) then
# T*D little-endian float64, row-major.


def write_feature_file(path, seq):
    values = np.ascontiguousarray(seq.values, dtype="<f8")
    if values.ndim != 2:
        raise FeatureFileError(f"features must be 2-D, got shape {values.shape}")
    t, d = values.shape
    rate_mhz = int(round(seq.rate_hz * 1000))
    with open(path, "wb") as fh:
        fh.write(AFSQ_HEADER.pack(AFSQ_MAGIC, AFSQ_VERSION, t, d, rate_mhz))
        fh.write(values.tobytes())


def read_feature_file(path, modality=""):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < AFSQ_HEADER.size:
        raise FeatureFileError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, t, d, rate_mhz = AFSQ_HEADER.unpack_from(blob)
    if magic != AFSQ_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    if version != AFSQ_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    payload = len(blob) - AFSQ_HEADER.size
    if payload != t * d * 8:
        raise FeatureFileError(f"{path}: header says {t}x{d} floats ({t * d * 8} bytes), payload has {payload}")
    values = np.frombuffer(blob, dtype="<f8", offset=AFSQ_HEADER.size).reshape(t, d).astype(np.float64)
    return FeatureSequence(values, rate_mhz / 1000.0, modality)


# ---------------------------------------------------------------------------
# labels


def read_label_csv(path):
    with open(path, encoding="utf-8") as fh:
        rows = [line.strip() for line in fh]
    return np.array([float(r.split(",")[0]) for r in rows if r], dtype=np.float64)


def write_label_csv(path, values):
    with open(path, "w", encoding="utf-8") as fh:
        for v in np.asarray(values, dtype=np.float64).ravel():
            fh.write(f"{float(v)!r}\n")


def mask_invalid_rows(raw):
    """Drop every row holding the -5 sentinel in any column."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 1:
        raw = raw[:, None]
    keep = ~np.any(raw == SENTINEL, axis=1)
    positions = np.flatnonzero(keep)
    values = raw[positions]
    if values.size and (values.min() < -1.0 or values.max() > 1.0):
        raise ValueError("label values outside [-1, 1]")
    empty = positions.size == 0
    if empty:
        log.warning("every label row is invalid")
    return LabelSequence(values, positions, empty)


# ---------------------------------------------------------------------------
# alignment and assembly


def nearest_indices(label_rate_hz, feature_rate_hz, num_labels):
    """Unclamped nearest feature index per label point; ties go to the later index."""
    if label_rate_hz <= 0 or feature_rate_hz <= 0:
        raise ValueError("rates must be positive")
    ratio = feature_rate_hz / label_rate_hz
    i = np.arange(num_labels, dtype=np.float64)
    # the small guard keeps exact halves (like 1.5) from rounding down after float error
    return np.floor(i * ratio + 0.5 + 1e-9).astype(np.int64)


def align_indices(label_rate_hz, feature_rate_hz, num_labels, num_features):
    if num_labels <= 0 or num_features <= 0:
        raise ValueError("counts must be positive")
    return np.minimum(nearest_indices(label_rate_hz, feature_rate_hz, num_labels), num_features - 1)


def pad_repeat_last(features, target_len):
    features = np.asarray(features)
    if features.shape[0] == 0:
        raise ValueError("cannot pad an empty feature matrix")
    if target_len < features.shape[0]:
        raise ValueError(f"target length {target_len} shorter than input {features.shape[0]}")
    extra = target_len - features.shape[0]
    if extra == 0:
        return features.copy()
    tail = np.repeat(features[-1:], extra, axis=0)
    return np.concatenate([features, tail], axis=0)


def assemble_dense(present, n, d):
    """Zero matrix of n rows with row i replaced by ``present[i]`` when given."""
    out = np.zeros((n, d))
    for i, vec in present.items():
        if not 0 <= i < n:
            raise IndexError(f"frame {i} outside [0, {n})")
        out[i] = vec
    return out


def align_modality(feat, label_rate_hz, n_raw, positions, frames=None):
    """Feature rows paired with each retained label row.

    ``frames`` (optional) names the raw label row of each feature row; rows
    without a feature stay zero. Otherwise rows are matched by nearest
    timestamp, and a feature stream that ends early is padded with its last row.
    """
    values = feat.values
    if frames is not None:
        if len(frames) != values.shape[0]:
            raise ManifestError(f"{len(frames)} frame indices for {values.shape[0]} feature rows")
        dense = assemble_dense({int(f): values[j] for j, f in enumerate(frames)}, n_raw, values.shape[1])
        return dense[positions]
    if values.shape[0] == 0:
        raise ManifestError("empty feature stream")
    if positions.size == 0:
        return np.zeros((0, values.shape[1]))
    idx = nearest_indices(label_rate_hz, feat.rate_hz, n_raw)[positions]
    inside = idx[idx < values.shape[0]]
    if inside.size == 0:
        return pad_repeat_last(values[-1:], positions.size)
    return pad_repeat_last(values[inside], positions.size)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormalizationStats:
    mean: dict = field(default_factory=dict)  # modality -> (D,)
    std: dict = field(default_factory=dict)

    @classmethod
    def compute(cls, per_modality):
        """``per_modality``: modality -> list of (T, D) training matrices."""
        stats = cls()
        for m, mats in per_modality.items():
            stacked = np.concatenate(mats, axis=0)
            stats.mean[m] = stacked.mean(axis=0)
            stats.std[m] = np.maximum(stacked.std(axis=0), STD_FLOOR)
        return stats

    def to_json(self):
        return {m: {"mean": self.mean[m].tolist(), "std": self.std[m].tolist()} for m in sorted(self.mean)}

    @classmethod
    def from_json(cls, d):
        stats = cls()
        for m, v in d.items():
            stats.mean[m] = np.asarray(v["mean"], dtype=np.float64)
            stats.std[m] = np.asarray(v["std"], dtype=np.float64)
        return stats


def normalize(features, mean, std):
    return (np.asarray(features) - mean) / np.maximum(std, STD_FLOOR)


# ---------------------------------------------------------------------------
# windows


def window_starts(t, spec=WindowSpec()):
    if t <= 0:
        return []
    if t < spec.length:
        return [0]
    starts = list(range(0, t - spec.length + 1, spec.hop))
    if starts[-1] + spec.length < t:
        starts.append(t - spec.length)
    return starts


@dataclass
class Window:
    trial_id: str
    start: int
    valid: int  # frames before zero padding
    features: dict  # modality -> (D, length)
    labels: np.ndarray  # (length,)


def cut_window(trial_id, features, labels, start, length):
    """Slice [start, start+length), zero-padding past the end of the trial."""
    t = labels.shape[0]
    valid = min(length, t - start)
    feats = {}
    for m, x in features.items():
        w = np.zeros((x.shape[1], length))
        w[:, :valid] = x[start:start + valid].T
        feats[m] = w
    lab = np.zeros(length)
    lab[:valid] = labels[start:start + valid]
    return Window(trial_id, start, valid, feats, lab)


def make_windows(trials, spec=WindowSpec()):
    """``trials``: iterable of (trial_id, {modality: (T, D)}, labels (T,))."""
    out = []
    for trial_id, feats, labels in trials:
        for s in window_starts(labels.shape[0], spec):
            out.append(cut_window(trial_id, feats, labels, s, spec.length))
    return out


# ---------------------------------------------------------------------------
# manifests


@dataclass
class TrialManifest:
    trial_id: str
    subject_id: str
    partition: str
    label_rate: float
    labels: dict  # dimension -> path
    features: dict  # modality -> {"path", "rate"?, "frames"?}


def load_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    trials = []
    seen = set()
    for entry in doc.get("trials", []):
        try:
            tid = entry["trial_id"]
            labels = {k: os.path.join(base, v) for k, v in entry["labels"].items()}
            feats = {}
            for m, spec in entry["features"].items():
                spec = dict(spec)
                spec["path"] = os.path.join(base, spec["path"])
                if "frames" in spec:
                    spec["frames"] = os.path.join(base, spec["frames"])
                feats[m] = spec
            trial = TrialManifest(tid, str(entry["subject_id"]), entry.get("partition", "train"),
                                  float(entry["label_rate"]), labels, feats)
        except KeyError as exc:
            raise ManifestError(f"trial entry missing key {exc}") from None
        if tid in seen:
            raise ManifestError(f"duplicate trial id {tid}")
        seen.add(tid)
        trials.append(trial)
    return trials


def load_trial_raw(trial):
    """Masked labels and aligned (un-normalized) features for one trial."""
    missing = [p for p in list(trial.labels.values()) + [s["path"] for s in trial.features.values()]
               if not os.path.exists(p)]
    if missing:
        raise FileNotFoundError(f"trial {trial.trial_id}: missing {missing}")
    dims = [d for d in DIMENSIONS if d in trial.labels]
    cols = [read_label_csv(trial.labels[d]) for d in dims]
    if len({c.size for c in cols}) != 1:
        raise ManifestError(f"trial {trial.trial_id}: label files differ in length")
    raw = np.stack(cols, axis=1)
    seq = mask_invalid_rows(raw)
    feats = {}
    for m, spec in trial.features.items():
        fs = read_feature_file(spec["path"], m)
        if "rate" in spec and not math.isclose(float(spec["rate"]), fs.rate_hz, rel_tol=0, abs_tol=1e-3):
            raise ManifestError(f"trial {trial.trial_id}/{m}: manifest rate {spec['rate']} "
                                f"!= file rate {fs.rate_hz}")
        frames = None
        if "frames" in spec:
            frames = read_label_csv(spec["frames"]).astype(np.int64)
        feats[m] = align_modality(fs, trial.label_rate, raw.shape[0], seq.positions, frames)
    labels = {d: seq.values[:, i] for i, d in enumerate(dims)}
    return feats, labels, seq


def prepare(manifest_path, out_dir):
    """Align, mask, pad and normalize every trial; write AFSQ/CSV artifacts.

    Normalization moments come from trials tagged ``train`` (all trials if
    there are none). Returns the prepared-manifest dict.
    """
    trials = load_manifest(manifest_path)
    loaded = [(t, *load_trial_raw(t)) for t in trials]
    train = [x for x in loaded if x[0].partition == "train"] or loaded
    modalities = sorted({m for _, f, _, _ in loaded for m in f})
    stats = NormalizationStats.compute({m: [f[m] for _, f, _, _ in train if m in f and len(f[m])]
                                        for m in modalities})
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    entries = []
    for trial, feats, labels, seq in loaded:
        if seq.empty:
            log.warning("trial %s has no valid label rows; skipped", trial.trial_id)
            continue
        entry = {"trial_id": trial.trial_id, "subject_id": trial.subject_id,
                 "partition": trial.partition, "length": int(seq.positions.size),
                 "features": {}, "labels": {}}
        for m, x in feats.items():
            rel = os.path.join("features", f"{trial.trial_id}.{m}.afsq")
            rate = trial.label_rate
            write_feature_file(os.path.join(out_dir, rel),
                               FeatureSequence(normalize(x, stats.mean[m], stats.std[m]), rate, m))
            entry["features"][m] = rel
        for d, y in labels.items():
            rel = os.path.join("labels", f"{trial.trial_id}.{d}.csv")
            write_label_csv(os.path.join(out_dir, rel), y)
            entry["labels"][d] = rel
        entries.append(entry)
    doc = {"trials": entries}
    _write_json(os.path.join(out_dir, "prepared.json"), doc)
    _write_json(os.path.join(out_dir, "stats.json"), stats.to_json())
    return doc


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class PreparedTrial:
    trial_id: str
    subject_id: str
    partition: str
    features: dict  # modality -> (T, D)
    labels: dict  # dimension -> (T,)

    @property
    def length(self):
        return next(iter(self.labels.values())).shape[0]


def load_prepared(prepared_dir, modalities=None):
    with open(os.path.join(prepared_dir, "prepared.json"), encoding="utf-8") as fh:
        doc = json.load(fh)
    out = []
    for e in doc["trials"]:
        mods = sorted(e["features"]) if modalities is None else modalities
        feats = {}
        for m in mods:
            if m not in e["features"]:
                raise ManifestError(f"trial {e['trial_id']} has no {m} features")
            feats[m] = read_feature_file(os.path.join(prepared_dir, e["features"][m]), m).values
        labels = {d: read_label_csv(os.path.join(prepared_dir, p)) for d, p in e["labels"].items()}
        out.append(PreparedTrial(e["trial_id"], e["subject_id"], e["partition"], feats, labels))
    return out
