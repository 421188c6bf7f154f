"""Subject-independent cross-validation folds.

Fold 0 keeps the original train/validation partition. The original training
subjects are split into ``k - 1`` groups; fold i validates on group i and
trains on the other groups plus the original validation trials.
"""
import json
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class FoldSplit:
    fold_id: int
    train: list
    val: list


def _subject_trials(trials, partition):
    subjects = {}
    for t in trials:
        if t["partition"] == partition:
            subjects.setdefault(t["subject_id"], []).append(t["trial_id"])
    return subjects


def make_folds(trials, k=6, seed=0):
    """``trials``: dicts with trial_id, subject_id and partition (train/val).

    Test-partition trials are ignored.
    """
    train_subj = _subject_trials(trials, "train")
    val_subj = _subject_trials(trials, "val")
    shared = set(train_subj) & set(val_subj)
    if shared:
        raise ValueError(f"subjects in both train and val partitions: {sorted(shared)}")
    groups_n = k - 1
    if len(train_subj) < groups_n:
        raise ValueError(f"{len(train_subj)} training subjects cannot fill {groups_n} folds")

    rng = np.random.default_rng(seed)
    order = sorted(train_subj)
    order = [order[i] for i in rng.permutation(len(order))]
    # largest subjects first; stable sort keeps the seeded order among ties
    order.sort(key=lambda s: -len(train_subj[s]))
    groups = [[] for _ in range(groups_n)]
    load = [(0, 0)] * groups_n  # (trial count, subject count)
    for s in order:
        g = min(range(groups_n), key=lambda i: (load[i], i))
        groups[g].append(s)
        load[g] = (load[g][0] + len(train_subj[s]), load[g][1] + 1)

    orig_train = [tid for s in sorted(train_subj) for tid in train_subj[s]]
    orig_val = [tid for s in sorted(val_subj) for tid in val_subj[s]]
    folds = [FoldSplit(0, sorted(orig_train), sorted(orig_val))]
    for i, grp in enumerate(groups, start=1):
        val = sorted(tid for s in grp for tid in train_subj[s])
        rest = set(orig_train) - set(val)
        folds.append(FoldSplit(i, sorted(rest | set(orig_val)), val))
    return folds


def write_folds(path, folds):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"folds": [asdict(f) for f in folds]}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_folds(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return [FoldSplit(f["fold_id"], list(f["train"]), list(f["val"])) for f in doc["folds"]]
