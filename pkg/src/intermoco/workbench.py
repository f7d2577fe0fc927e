"""Command implementations behind the CLI.

Every command writes one run directory under the output root, named after the
command and a digest of the resolved config plus its input files. The directory
holds ``config.yaml`` (resolved config), ``bundle.json`` (command, digest, code
version) and the command's results.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .analysis import cka_rbf, extract_block_features, ks_distance, probe_features
from .config import RunConfig, encoder_config_diff
from .data import Dataset, load_dataset
from .encoder import Encoder, EncoderConfig
from .engine import Checkpoint, read_logs, run_pretraining
from .errors import ConfigError, DataError
from .evaluation import (
    FineTuneMode, fine_tune, metric_fn, metric_report, predict_logits, scores_from_logits,
    stratified_subsample, task_kind,
)
from .tensor import save_tensor

log = logging.getLogger(__name__)

COMMANDS = ("pretrain", "finetune", "probe", "analyze-cka", "analyze-ks", "report")
SUPERVISED = "Supervised"


# ---------------------------------------------------------------------------
# run-directory plumbing
# ---------------------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _clean(obj):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2) + "\n")


def write_csv(path, rows: list[dict], fieldnames: list[str] | None = None) -> None:
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def prepare_run_dir(cfg: RunConfig, command: str, inputs: dict) -> Path:
    run = cfg.run_dir(command, inputs)
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.yaml").write_text(yaml.safe_dump(cfg.resolved(), sort_keys=False))
    write_json(run / "bundle.json", {
        "command": command,
        "config_hash": cfg.config_hash(command, inputs),
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "inputs": inputs,
    })
    log.info("writing %s outputs to %s", command, run)
    return run


def _pct(fraction: float) -> str:
    return f"{100 * fraction:g}%"


def _tag(fraction: float) -> str:
    return f"{100 * fraction:g}pct".replace(".", "p")


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------

def _dataset(cfg: RunConfig, enc_cfg: EncoderConfig) -> Dataset:
    if cfg.dataset.manifest is None:
        raise ConfigError("dataset.manifest is required")
    size = tuple(enc_cfg.input_size)
    return load_dataset(cfg.dataset.manifest, cfg.dataset.root, size, enc_cfg.in_channels)


def _check_dataset_section(cfg: RunConfig, enc_cfg: EncoderConfig, source: str) -> list[str]:
    diffs = []
    if cfg.dataset.input_size is not None and tuple(cfg.dataset.input_size) != tuple(enc_cfg.input_size):
        diffs.append(f"input_size: dataset={list(cfg.dataset.input_size)} {source}={list(enc_cfg.input_size)}")
    if cfg.dataset.channels is not None and cfg.dataset.channels != enc_cfg.in_channels:
        diffs.append(f"channels: dataset={cfg.dataset.channels} {source}={enc_cfg.in_channels}")
    return diffs


def check_compatibility(cfg: RunConfig, ckpt_cfg: EncoderConfig) -> None:
    """Reject a checkpoint whose architecture disagrees with the config, listing every mismatch."""
    diffs = encoder_config_diff(cfg.encoder, ckpt_cfg) if "encoder" in cfg.explicit else []
    diffs += _check_dataset_section(cfg, ckpt_cfg, "checkpoint")
    if diffs:
        raise ConfigError("checkpoint is incompatible with the config:\n  " + "\n  ".join(diffs))


def load_checkpoint_encoder(cfg: RunConfig, path) -> tuple[Encoder, str]:
    if path is None:
        raise ConfigError("a pretraining checkpoint is required (set 'checkpoint' or pass --checkpoint)")
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    state = Checkpoint.load(path)
    check_compatibility(cfg, state.encoder_config)
    return state.pair.query.eval(), file_digest(path)


def _encoder_or_random(cfg: RunConfig, path) -> tuple[Encoder, str]:
    if path is None:
        diffs = _check_dataset_section(cfg, cfg.encoder, "encoder")
        if diffs:
            raise ConfigError("dataset section disagrees with the encoder config:\n  " + "\n  ".join(diffs))
        return Encoder(cfg.encoder, seed=cfg.seed), "random-init"
    return load_checkpoint_encoder(cfg, path)


def _splits(ds: Dataset):
    train, val, test = ds.split("train"), ds.split("val"), ds.split("test")
    for name, (x, _) in zip(("train", "val", "test"), (train, val, test)):
        if len(x) == 0:
            raise DataError(f"dataset has no '{name}' rows")
    return train, val, test


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain(cfg: RunConfig, resume: bool = False) -> Path:
    diffs = _check_dataset_section(cfg, cfg.encoder, "encoder")
    if diffs:
        raise ConfigError("dataset section disagrees with the encoder config:\n  " + "\n  ".join(diffs))
    ds = _dataset(cfg, cfg.encoder)
    run = prepare_run_dir(cfg, "pretrain", {"manifest": file_digest(cfg.dataset.manifest)})
    train_x, val_x = ds.split("train")[0], ds.split("val")[0]
    state, prior_rows, prior_curves = None, None, None
    if resume and (run / "last.ckpt").exists():
        state = Checkpoint.load(run / "last.ckpt")
        prior_rows, prior_curves = read_logs(run, state.epoch)
        log.info("resuming from epoch %d", state.epoch)
    t0 = time.perf_counter()
    result = run_pretraining(cfg.train, cfg.encoder, train_x, val_x, out_dir=run, resume=state,
                             prior_curves=prior_curves, prior_rows=prior_rows)
    last = result.curves[-1] if result.curves else {}
    write_json(run / "metrics.json", {
        "mode": cfg.train.mode,
        "epochs": result.checkpoint.epoch,
        "steps": result.checkpoint.step,
        "final_train_contrastive": last.get("train_contrastive"),
        "final_train_total": last.get("train_total"),
        "final_val_infonce": last.get("val_infonce"),
        "best_epoch": result.best_epoch,
        "best_val_infonce": result.best_val,
        "wall_time": time.perf_counter() - t0,
    })
    return run


def _finetune_one(encoder, mode, fraction, train, val, cfg: RunConfig, random_init=None):
    idx = stratified_subsample(train[1], fraction, seed=cfg.seed)
    tune = cfg.finetune.tune_config(cfg.seed)
    if random_init is not None:
        tune.random_init = random_init
    return fine_tune(encoder, mode, (train[0][idx], train[1][idx]), val, tune), idx


def _replicates_csv(path, replicates: np.ndarray, metric: str) -> None:
    write_csv(path, [{"replicate": i, metric: float(v)} for i, v in enumerate(replicates)], ["replicate", metric])


def cmd_finetune(cfg: RunConfig) -> Path:
    encoder, digest = _encoder_or_random(cfg, cfg.checkpoint)
    ds = _dataset(cfg, encoder.config)
    run = prepare_run_dir(cfg, "finetune", {"manifest": file_digest(cfg.dataset.manifest), "checkpoint": digest})
    train, val, test = _splits(ds)
    metric = cfg.finetune.metric
    rows, results = [], []
    for mode in cfg.finetune.modes:
        for fraction in cfg.finetune.fractions:
            res, idx = _finetune_one(encoder, FineTuneMode(mode), fraction, train, val, cfg)
            logits = predict_logits(res.model, test[0])
            report = metric_report(metric, logits, test[1], cfg.bootstrap.replicates, cfg.seed,
                                   cfg.bootstrap.method, ds.label_names)
            sub = run / f"{mode}_{_tag(fraction)}"
            sub.mkdir(exist_ok=True)
            entry = {"mode": mode, "fraction": fraction, "n_train": len(idx), "best_epoch": res.best_epoch,
                     **report.to_json()}
            write_json(sub / "report.json", entry)
            write_csv(sub / "history.csv", res.history)
            _replicates_csv(sub / "bootstrap_replicates.csv", report.bootstrap.replicates, metric)
            save_tensor(sub / "test_logits.tensor", logits)
            results.append(entry)
            rows.append({k: entry[k] for k in ("mode", "fraction", "n_train", "metric", "point", "mu",
                                               "sigma", "ci_low", "ci_high")})
            log.info("%s %s: %s %.4f", mode, _pct(fraction), metric, report.bootstrap.point)
    write_json(run / "metrics.json", {"metric": metric, "results": results})
    write_csv(run / "metrics.csv", rows)
    return run


def _interval(point: float, lo: float, hi: float) -> str:
    return f"{100 * point:.1f} ({100 * lo:.1f}-{100 * hi:.1f})"


def cmd_probe(cfg: RunConfig) -> Path:
    encoder, digest = _encoder_or_random(cfg, cfg.checkpoint)
    ds = _dataset(cfg, encoder.config)
    run = prepare_run_dir(cfg, "probe", {"manifest": file_digest(cfg.dataset.manifest), "checkpoint": digest})
    splits = dict(zip(("train", "val", "test"), _splits(ds)))
    nb = encoder.config.num_blocks
    blocks = cfg.probe.blocks or list(range(1, nb + 1))
    tune = cfg.finetune.tune_config(cfg.seed)
    (run / "features").mkdir(exist_ok=True)
    rows, table = [], {}
    for b in blocks:
        feats = {}
        for name, (x, _) in splits.items():
            feats[name] = extract_block_features(encoder, x, b)
            save_tensor(run / "features" / f"block{b}_{name}.tensor", feats[name])
        pr = probe_features(*((feats[n], splits[n][1]) for n in ("train", "val", "test")), tune,
                            cfg.bootstrap.replicates, cfg.bootstrap.method, ds.label_names, block=b)
        rows.append(pr.to_json())
        bs = pr.report.bootstrap
        table[f"Block {b}"] = _interval(bs.point, bs.ci_low, bs.ci_high)
        _replicates_csv(run / f"block{b}_bootstrap_replicates.csv", bs.replicates, tune.metric)
        log.info("block %d: %s %.4f", b, tune.metric, bs.point)
    write_json(run / "probe.json", {"metric": tune.metric, "rows": rows, "table": table})
    write_csv(run / "probe.csv", [{k: r[k] for k in ("block", "metric", "point", "mu", "sigma", "ci_low", "ci_high")}
                                  for r in rows])
    (run / "probe.txt").write_text(
        " | ".join(table) + "\n" + " | ".join(table.values()) + "\n")
    return run


def _methods(cfg: RunConfig) -> dict[str, str | None]:
    if cfg.analysis.checkpoints:
        return dict(cfg.analysis.checkpoints)
    if cfg.checkpoint is not None:
        return {"model": cfg.checkpoint}
    raise ConfigError("analysis.checkpoints (or checkpoint) must name at least one pretraining checkpoint")


def _load_methods(cfg: RunConfig) -> tuple[dict[str, Encoder], dict[str, str]]:
    encoders, digests = {}, {}
    for name, path in _methods(cfg).items():
        encoders[name], digests[name] = _encoder_or_random(cfg, path)
    configs = {n: e.config.to_dict() for n, e in encoders.items()}
    first = next(iter(configs))
    for name, c in configs.items():
        keys = [k for k in c if k not in ("bt_projectors",) and c[k] != configs[first][k]]
        if keys:
            raise ConfigError(f"checkpoints {first!r} and {name!r} differ in encoder fields {keys}")
    return encoders, digests


def render_grid(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[f"{v:.3f}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_analyze_cka(cfg: RunConfig) -> Path:
    """Feature reuse: per-block CKA between each pretrained encoder and its E2E-fine-tuned copy."""
    encoders, digests = _load_methods(cfg)
    ds = _dataset(cfg, next(iter(encoders.values())).config)
    run = prepare_run_dir(cfg, "analyze-cka", {"manifest": file_digest(cfg.dataset.manifest), **digests})
    train, val, test = _splits(ds)
    images = test[0] if cfg.cka.max_samples is None else test[0][: cfg.cka.max_samples]
    metric = cfg.finetune.metric
    (run / "features").mkdir(exist_ok=True)
    grid, flat = [], []
    block_cols = None
    for name, enc in encoders.items():
        nb = enc.config.num_blocks
        block_cols = [f"Block {b}" for b in range(1, nb + 1)]
        row = {"method": name}
        for fraction in cfg.analysis.fractions:
            res, _ = _finetune_one(enc, FineTuneMode.E2E, fraction, train, val, cfg)
            perf = metric_fn(metric)(_probabilities(res.model, test[0], test[1]), test[1])
            cell = {}
            for b in range(1, nb + 1):
                pre = extract_block_features(enc, images, b)
                post = extract_block_features(res.model.encoder, images, b)
                save_tensor(run / "features" / f"{name}_{_tag(fraction)}_block{b}_pretrained.tensor", pre)
                save_tensor(run / "features" / f"{name}_{_tag(fraction)}_block{b}_finetuned.tensor", post)
                cell[f"Block {b}"] = cka_rbf(pre, post, cfg.cka)
            cell["Performance"] = perf
            row[_pct(fraction)] = cell
            flat.append({"method": name, "fraction": fraction, **cell})
            log.info("%s %s: CKA %s", name, _pct(fraction), [round(float(cell[c]), 3) for c in block_cols])
        grid.append(row)
    columns = [*block_cols, "Performance"]
    write_json(run / "cka_grid.json", {"metric": metric, "fractions": [_pct(f) for f in cfg.analysis.fractions],
                                       "columns": columns, "rows": grid})
    write_csv(run / "cka_grid.csv", flat, ["method", "fraction", *columns])
    header = ["Method"] + [f"{_pct(f)} {c}" for f in cfg.analysis.fractions for c in columns]
    body = [[r["method"]] + [r[_pct(f)][c] for f in cfg.analysis.fractions for c in columns] for r in grid]
    (run / "cka_grid.txt").write_text(render_grid(header, body))
    return run


def _probabilities(model, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    logits = predict_logits(model, images)
    return scores_from_logits(logits, task_kind(labels.reshape(len(labels), -1)))


def cmd_analyze_ks(cfg: RunConfig) -> Path:
    """KS distance between test logits of low-label models and the designated 100% model."""
    encoders, digests = _load_methods(cfg)
    reference = cfg.analysis.reference
    if reference is None:
        if len(encoders) != 1:
            raise ConfigError("analysis.reference must name the best-model checkpoint when several are given")
        reference = next(iter(encoders))
    ds = _dataset(cfg, encoders[reference].config)
    run = prepare_run_dir(cfg, "analyze-ks", {"manifest": file_digest(cfg.dataset.manifest), **digests})
    train, val, test = _splits(ds)
    (run / "logits").mkdir(exist_ok=True)

    ref_res, _ = _finetune_one(encoders[reference], FineTuneMode.E2E, cfg.analysis.reference_fraction,
                               train, val, cfg)
    # test-set logits, flattened over samples and labels
    ref_z = predict_logits(ref_res.model, test[0])
    save_tensor(run / "logits" / f"reference_{reference}_{_tag(cfg.analysis.reference_fraction)}.tensor", ref_z)

    methods = dict(encoders)
    if cfg.analysis.include_supervised:
        methods[SUPERVISED] = encoders[reference]
    grid = {_pct(f): {} for f in cfg.analysis.fractions}
    for name, enc in methods.items():
        for fraction in cfg.analysis.fractions:
            res, _ = _finetune_one(enc, FineTuneMode.E2E, fraction, train, val, cfg,
                                   random_init=True if name == SUPERVISED else None)
            z = predict_logits(res.model, test[0])
            save_tensor(run / "logits" / f"{name}_{_tag(fraction)}.tensor", z)
            grid[_pct(fraction)][name] = ks_distance(z.ravel(), ref_z.ravel(), cfg.ks)
            log.info("%s %s: KS %.4f", name, _pct(fraction), grid[_pct(fraction)][name])
    columns = list(methods)
    rows = [{"fraction": f, **vals} for f, vals in grid.items()]
    write_json(run / "ks_grid.json", {
        "reference": {"method": reference, "fraction": _pct(cfg.analysis.reference_fraction)},
        "columns": columns, "rows": rows,
    })
    write_csv(run / "ks_grid.csv", rows, ["fraction", *columns])
    (run / "ks_grid.txt").write_text(
        f"reference: {reference} fine-tuned on {_pct(cfg.analysis.reference_fraction)}\n"
        + render_grid(["Label fraction", *columns], [[r["fraction"], *(r[c] for c in columns)] for r in rows]))
    return run


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

RESULT_FILES = ("metrics.json", "probe.json", "cka_grid.json", "ks_grid.json")


def _flatten(prefix: str, obj, out: list) -> None:
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, out)
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _flatten(f"{prefix}[{i}]", v, out)
    elif isinstance(obj, (int, float)) and not isinstance(obj, bool):
        out.append((prefix, obj))


def _drop_wall_time(obj):
    if isinstance(obj, dict):
        return {k: _drop_wall_time(v) for k, v in obj.items() if k != "wall_time"}
    if isinstance(obj, list):
        return [_drop_wall_time(v) for v in obj]
    return obj


def _find_runs(root: Path) -> list[Path]:
    if not root.exists():
        return []
    return sorted(p for p in root.iterdir()
                  if (p / "bundle.json").exists() and not p.name.startswith("report-"))


def cmd_report(cfg: RunConfig, runs: list[str] | None = None) -> Path:
    paths = [Path(r) for r in (runs or cfg.report.runs)] or _find_runs(cfg.output_root())
    if not paths:
        raise ConfigError("report needs run directories (report.runs or positional arguments)")
    entries, digests = [], {}
    for path in paths:
        bundle_path = path / "bundle.json"
        if not bundle_path.exists():
            raise DataError(f"{path} is not a run directory (no bundle.json)")
        bundle = json.loads(bundle_path.read_text())
        results = {f: json.loads((path / f).read_text()) for f in RESULT_FILES if (path / f).exists()}
        stable = json.dumps(_drop_wall_time(results), sort_keys=True).encode()
        digests[str(path)] = hashlib.sha256(stable).hexdigest()[:16]
        entries.append({"path": str(path), "command": bundle["command"], "config_hash": bundle["config_hash"],
                        "results": results})
    run = prepare_run_dir(cfg, "report", digests)
    write_json(run / "report.json", {"runs": entries})
    rows = []
    for e in entries:
        flat: list = []
        _flatten("", e["results"], flat)
        rows += [{"run": e["path"], "command": e["command"], "key": k, "value": v}
                 for k, v in flat if not k.endswith("wall_time")]
    write_csv(run / "report.csv", rows, ["run", "command", "key", "value"])
    if cfg.report.plots:
        _plots(run, entries)
    return run


def _plots(run: Path, entries: list[dict]) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not available; skipping plots")
        return
    meta = {"Software": None}
    for i, e in enumerate(entries):
        path = Path(e["path"])
        if e["command"] == "pretrain" and (path / "loss_curves.csv").exists():
            with open(path / "loss_curves.csv", newline="") as fh:
                curves = list(csv.DictReader(fh))
            fig, ax = plt.subplots(figsize=(5, 3.5))
            epochs = [int(c["epoch"]) for c in curves]
            for key in ("train_contrastive", "train_total", "val_infonce"):
                ax.plot(epochs, [float(c[key]) for c in curves], label=key)
            ax.set_xlabel("epoch")
            ax.set_ylabel("loss")
            ax.legend()
            fig.tight_layout()
            fig.savefig(run / f"loss_curves_{i}.png", metadata=meta)
            plt.close(fig)
        grid = e["results"].get("cka_grid.json")
        if grid:
            blocks = [c for c in grid["columns"] if c.startswith("Block")]
            labels = [f"{r['method']} {f}" for r in grid["rows"] for f in grid["fractions"]]
            values = np.array([[r[f][b] for b in blocks] for r in grid["rows"] for f in grid["fractions"]])
            fig, ax = plt.subplots(figsize=(1.2 * len(blocks) + 2, 0.5 * len(labels) + 1.5))
            im = ax.imshow(values, vmin=0, vmax=1, cmap="viridis")
            ax.set_xticks(range(len(blocks)), blocks)
            ax.set_yticks(range(len(labels)), labels)
            fig.colorbar(im, ax=ax, label="CKA")
            fig.tight_layout()
            fig.savefig(run / f"cka_heatmap_{i}.png", metadata=meta)
            plt.close(fig)
