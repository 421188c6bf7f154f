"""Command line: prepare -> folds -> train -> predict -> merge -> eval, plus gradcheck."""
import csv
import functools
import json
import logging
import os
import sys
from dataclasses import replace

import click
import numpy as np
from threadpoolctl import threadpool_limits

from affuse import _kernels
from affuse.config import ConfigError, load_config
from affuse.data import DIMENSIONS, WindowSpec, load_prepared, make_windows, prepare
from affuse.ensemble import MergePolicy, merge_dirs, read_trace, write_trace
from affuse.folds import make_folds, read_folds, write_folds
from affuse.metrics import ccc
from affuse.model import ModelBundle, load_checkpoint, save_checkpoint
from affuse.trainer import fit, predict_trial, write_history

log = logging.getLogger("affuse")


def _threads():
    _kernels.configure_threads()
    raw = os.environ.get("AFFUSE_THREADS")
    if raw:
        threadpool_limits(int(raw))


def structured_errors(fn):
    """Report failures as one JSON line on stderr and exit 1."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.exceptions.Exit:
            raise
        except (ValueError, OSError, KeyError, ConfigError) as exc:
            click.echo(json.dumps({"error": type(exc).__name__, "message": str(exc)}), err=True)
            sys.exit(1)

    return wrapper


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch progress.")
def main(verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _threads()


def _config(path, seed):
    cfg = load_config(path)
    if seed is not None:
        cfg.seed = seed
    cfg.trainer = replace(cfg.trainer, seed=cfg.seed)
    return cfg


@main.command("prepare")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False))
@structured_errors
def cmd_prepare(manifest, config_path, out_dir):
    """Align, mask, pad and normalize raw trials into AFSQ/CSV artifacts."""
    cfg = load_config(config_path)
    manifest = manifest or cfg.paths.manifest
    out_dir = out_dir or cfg.paths.prepared
    if not manifest or not out_dir:
        raise ConfigError("prepare needs --manifest and --out (or config paths)")
    doc = prepare(manifest, out_dir)
    click.echo(f"prepared {len(doc['trials'])} trials into {out_dir}")


@main.command("folds")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False),
              help="Raw manifest or prepared.json.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int)
@click.option("--out", "out_path", type=click.Path(dir_okay=False))
@structured_errors
def cmd_folds(manifest, config_path, seed, out_path):
    """Write the subject-independent fold split as JSON."""
    cfg = _config(config_path, seed)
    manifest = manifest or cfg.paths.manifest
    out_path = out_path or cfg.paths.folds
    if not manifest or not out_path:
        raise ConfigError("folds needs --manifest and --out (or config paths)")
    with open(manifest, encoding="utf-8") as fh:
        entries = json.load(fh)["trials"]
    trials = [{"trial_id": e["trial_id"], "subject_id": str(e["subject_id"]),
               "partition": e.get("partition", "train")} for e in entries]
    folds = make_folds(trials, cfg.num_folds, cfg.seed)
    write_folds(out_path, folds)
    click.echo(f"wrote {len(folds)} folds to {out_path}")


def _windows(trials, ids, dimension, window):
    by_id = {t.trial_id: t for t in trials}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ValueError(f"fold references unknown trials: {missing[:5]}")
    for i in ids:
        if dimension not in by_id[i].labels:
            raise ValueError(f"trial {i} has no {dimension} labels")
    return make_windows(((i, by_id[i].features, by_id[i].labels[dimension]) for i in ids), window)


def run_training(cfg, fold_id, dimension, out_dir):
    trials = load_prepared(cfg.paths.prepared, list(cfg.model.modalities))
    fold = {f.fold_id: f for f in read_folds(cfg.paths.folds)}.get(fold_id)
    if fold is None:
        raise ValueError(f"no fold {fold_id} in {cfg.paths.folds}")
    train_w = _windows(trials, fold.train, dimension, cfg.window)
    val_w = _windows(trials, fold.val, dimension, cfg.window)
    model = ModelBundle(cfg.model, seed=cfg.seed)
    result = fit(model, train_w, val_w, cfg.trainer)
    os.makedirs(out_dir, exist_ok=True)
    meta = {"dimension": dimension, "fold": fold_id, "seed": cfg.seed,
            "window": {"length": cfg.window.length, "hop": cfg.window.hop},
            "best_val_ccc": result.state.best_val_ccc, "best_epoch": result.state.best_epoch}
    save_checkpoint(os.path.join(out_dir, "model.afmd"), model, meta)
    write_history(os.path.join(out_dir, "history.csv"), result.history)
    return result


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--fold", "fold_id", type=int, default=0, show_default=True)
@click.option("--dimension", type=click.Choice(DIMENSIONS + ("both",)))
@click.option("--seed", type=int)
@click.option("--out", "out_dir", type=click.Path(file_okay=False))
@structured_errors
def cmd_train(config_path, fold_id, dimension, seed, out_dir):
    """Train one fold; writes model.afmd and history.csv under OUT/<dimension>/fold<N>."""
    cfg = _config(config_path, seed)
    dims = DIMENSIONS if dimension == "both" else (dimension or cfg.dimension,)
    out_dir = out_dir or cfg.paths.out
    for dim in dims:
        target = os.path.join(out_dir, dim, f"fold{fold_id}")
        result = run_training(cfg, fold_id, dim, target)
        click.echo(f"{dim} fold {fold_id}: best val CCC {result.state.best_val_ccc:.4f} "
                   f"after {len(result.history)} epochs -> {target}")


@main.command("predict")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--prepared", "prepared_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--partition", default=None, help="Only trials with this partition tag.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@structured_errors
def cmd_predict(checkpoint, prepared_dir, partition, out_dir):
    """Write one frame_index,value trace CSV per trial."""
    model, meta = load_checkpoint(checkpoint)
    window = meta.get("window", {})
    spec = WindowSpec(window.get("length", 300), window.get("hop", 200))
    trials = load_prepared(prepared_dir, list(model.config.modalities))
    os.makedirs(out_dir, exist_ok=True)
    n = 0
    for t in trials:
        if partition and t.partition != partition:
            continue
        write_trace(os.path.join(out_dir, f"{t.trial_id}.csv"), predict_trial(model, t.features, spec))
        n += 1
    click.echo(f"wrote {n} traces to {out_dir}")


@main.command("merge")
@click.argument("trace_dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--policy", type=click.Choice(["early", "late"]), default="late", show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@structured_errors
def cmd_merge(trace_dirs, policy, out_dir):
    """CCC-center and clip per-fold traces into one trace per trial."""
    ids = merge_dirs(list(trace_dirs), out_dir, MergePolicy(f"{policy}_clip"))
    click.echo(f"merged {len(ids)} traces from {len(trace_dirs)} sets into {out_dir}")


def evaluate_traces(traces_dir, prepared_dir, dimension):
    """[(scope, n_frames, ccc)] per trial plus the pooled ``ALL`` row."""
    rows, preds, targets = [], [], []
    for t in load_prepared(prepared_dir, []):
        path = os.path.join(traces_dir, f"{t.trial_id}.csv")
        if not os.path.exists(path):
            continue
        if dimension not in t.labels:
            raise ValueError(f"trial {t.trial_id} has no {dimension} labels")
        pred, target = read_trace(path), t.labels[dimension]
        if pred.size != target.size:
            raise ValueError(f"trial {t.trial_id}: trace has {pred.size} frames, labels {target.size}")
        rows.append((t.trial_id, pred.size, ccc(pred, target)))
        preds.append(pred)
        targets.append(target)
    if not preds:
        raise ValueError(f"no traces in {traces_dir} match trials in {prepared_dir}")
    pooled_p, pooled_t = np.concatenate(preds), np.concatenate(targets)
    rows.append(("ALL", pooled_p.size, ccc(pooled_p, pooled_t)))
    return rows


@main.command("eval")
@click.option("--traces", "traces_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--prepared", "prepared_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--dimension", type=click.Choice(DIMENSIONS), default="valence", show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False))
@structured_errors
def cmd_eval(traces_dir, prepared_dir, dimension, out_path):
    """CCC of traces against prepared labels: per trial and pooled."""
    rows = evaluate_traces(traces_dir, prepared_dir, dimension)
    fh = open(out_path, "w", newline="", encoding="utf-8") if out_path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("dimension", "scope", "frames", "ccc"))
        for scope, n, value in rows:
            w.writerow((dimension, scope, n, repr(value)))
    finally:
        if out_path:
            fh.close()


@main.command("gradcheck")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int)
@click.option("--length", type=int, default=12, show_default=True)
@structured_errors
def cmd_gradcheck(config_path, seed, length):
    """Directional finite-difference check of every parameter of the configured model."""
    from affuse import gradcheck
    from affuse.metrics import ccc_loss

    cfg = _config(config_path, seed)
    rng = np.random.default_rng(cfg.seed)
    model = ModelBundle(cfg.model, seed=cfg.seed)
    gradcheck.randomize_parameters(model.parameters(), rng)
    inputs = {m: rng.standard_normal((d, length)) for m, d in cfg.model.input_dims.items()}
    target = rng.uniform(-1, 1, length)
    names = [n for n, _ in model.named_parameters()]
    results = gradcheck.check_directional(lambda: ccc_loss(model(inputs), target), model.parameters(),
                                          names, rng=rng)
    for r in results:
        click.echo(f"{'PASS' if r.ok else 'FAIL'} {r.name} rel_err={r.error:.3e}")
    failed = sum(not r.ok for r in results)
    click.echo(f"{len(results) - failed}/{len(results)} parameter tensors pass (tol {gradcheck.DEFAULT_TOL:g})")
    if failed:
        sys.exit(1)


if __name__ == "__main__":
    main()
