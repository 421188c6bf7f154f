"""Synthetic trials with learnable, causal targets.

Targets are a squashed exponential moving average of a fixed random linear
read-out of the three feature streams, so a causal model can fit them.
"""
import json
import os

import numpy as np

from affuse.data import FeatureSequence, write_feature_file, write_label_csv

FEATURE_DIMS = {"visual": 512, "mfcc": 39, "vggish": 128}


def _readouts(rng, dims):
    return {m: rng.standard_normal(d) / np.sqrt(d) for m, d in dims.items()}


def causal_target(features, readouts, decay=0.9, gain=2.0):
    weights = {"visual": 1.0, "mfcc": 0.5, "vggish": 0.5}
    drive = sum(weights.get(m, 0.5) * (features[m] @ readouts[m]) for m in readouts)
    y = np.zeros(drive.shape[0])
    acc = 0.0
    for t, d in enumerate(drive):
        acc = decay * acc + (1.0 - decay) * d
        y[t] = acc
    return np.tanh(gain * y)


def make_trials(n_trials, length, seed=0, dims=None):
    """[(trial_id, {modality: (T, D)}, target (T,))] at a shared frame rate."""
    dims = dims or FEATURE_DIMS
    rng = np.random.default_rng(seed)
    readouts = _readouts(rng, dims)
    out = []
    for i in range(n_trials):
        t = length if np.isscalar(length) else length[i]
        feats = {m: rng.standard_normal((t, d)) for m, d in dims.items()}
        out.append((f"trial{i:03d}", feats, causal_target(feats, readouts)))
    return out


def write_raw_dataset(root, n_subjects=6, trials_per_subject=1, length=120, label_rate=30.0,
                      audio_rate=100.0, val_subjects=1, test_subjects=0, sentinel_rows=3, seed=0,
                      dims=None):
    """Write a raw manifest with AFSQ features and label CSVs under ``root``.

    Visual features are at the label rate; aural streams at ``audio_rate``
    and slightly short so repeat padding is exercised. A few label rows per
    trial are set to the -5 sentinel. Returns the manifest path.
    """
    dims = dims or FEATURE_DIMS
    rng = np.random.default_rng(seed)
    readouts = _readouts(rng, dims)
    os.makedirs(os.path.join(root, "raw"), exist_ok=True)
    trials = []
    for s in range(n_subjects):
        if s < val_subjects:
            part = "val"
        elif s < val_subjects + test_subjects:
            part = "test"
        else:
            part = "train"
        for k in range(trials_per_subject):
            tid = f"s{s:02d}_t{k}"
            visual = rng.standard_normal((length, dims["visual"]))
            n_audio = int(np.floor((length - 1) * audio_rate / label_rate)) - 2
            audio = {m: rng.standard_normal((n_audio, dims[m])) for m in ("mfcc", "vggish")}
            idx = np.minimum(np.floor(np.arange(length) * audio_rate / label_rate + 0.5).astype(int),
                             n_audio - 1)
            aligned = {"visual": visual, **{m: a[idx] for m, a in audio.items()}}
            valence = causal_target(aligned, readouts)
            arousal = causal_target(aligned, readouts, decay=0.8, gain=1.5)
            bad = rng.choice(length, size=min(sentinel_rows, length - 2), replace=False)
            valence[bad] = -5.0
            entry = {"trial_id": tid, "subject_id": f"subj{s:02d}", "partition": part,
                     "label_rate": label_rate, "labels": {}, "features": {}}
            for dim, vals in (("valence", valence), ("arousal", arousal)):
                rel = os.path.join("raw", f"{tid}.{dim}.csv")
                write_label_csv(os.path.join(root, rel), vals)
                entry["labels"][dim] = rel
            for m, x, rate in (("visual", visual, label_rate), ("mfcc", audio["mfcc"], audio_rate),
                               ("vggish", audio["vggish"], audio_rate)):
                rel = os.path.join("raw", f"{tid}.{m}.afsq")
                write_feature_file(os.path.join(root, rel), FeatureSequence(x, rate, m))
                entry["features"][m] = {"path": rel, "rate": rate}
            trials.append(entry)
    path = os.path.join(root, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"trials": trials}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
