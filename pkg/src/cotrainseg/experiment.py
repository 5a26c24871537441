"""End-to-end experiment runner and ablation harness: for each axis value
and seed, run gen-data -> embed -> train -> predict -> eval, then aggregate
per-cell metrics into deterministic CSV tables and static plots."""

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .config import TrainConfig, config_from_dict
from .dataio import (DatasetSplit, generate_synthetic_dataset, read_dataset,
                     read_volume, split_dataset, write_dataset, write_volume)
from .inference import SlidingWindowSpec, labels_from_probs, sliding_window_predict
from .metrics import evaluate_many, write_report_csv
from .textknow import (embed_descriptions, get_provider, load_descriptions,
                       pool_embeddings, write_embeddings)
from .trainer import make_model_forward, train

AXES = ("none", "beta_text", "unsup_mode", "sup_mode", "usl_thresholds")
DEFAULT_GRIDS = {
    "none": (None,),
    "beta_text": (0.0, 0.1, 1.0, 2.0),
    "unsup_mode": ("mse_only", "nll_only", "usl"),
    "sup_mode": ("ce", "dice", "ce+dice"),
    "usl_thresholds": ((0.8, 0.2), (0.9, 0.1), (0.95, 0.05)),
}
METRICS = ("dice", "jaccard", "hd95", "asd")
HIGHER_IS_BETTER = {"dice": True, "jaccard": True, "hd95": False, "asd": False}


@dataclass
class ExperimentSpec:
    name: str = "experiment"
    axis: str = "none"
    axis_values: tuple = ()
    seeds: tuple = (1, 2, 3)
    n_volumes: int = 24
    shape: tuple = (32, 32, 32)
    difficulty: float = 0.5
    labeled_ratio: float = 0.1
    n_val: int = 8
    val_seed: int = 9001
    provider: str = "test"
    provider_dim: int = 768
    embeddings_file: str | None = None
    descriptions: str | None = None
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown ablation axis {self.axis!r}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ValueError("seeds must be nonempty and distinct")
        self.shape = tuple(int(s) for s in self.shape)
        if not self.axis_values:
            self.axis_values = DEFAULT_GRIDS[self.axis]
        self.axis_values = tuple(
            tuple(v) if isinstance(v, list) else v for v in self.axis_values)


def read_spec(path) -> ExperimentSpec:
    with open(path) as f:
        return ExperimentSpec(**json.load(f))


def default_descriptions_path() -> Path:
    return Path(resources.files("cotrainseg").joinpath("data/descriptions_synthetic.txt"))


def axis_overrides(axis, value) -> dict:
    if axis == "none":
        return {}
    if axis == "usl_thresholds":
        return {"usl_t1": float(value[0]), "usl_t2": float(value[1])}
    return {axis: value}


def _value_tag(axis, value):
    if axis == "none":
        return "base"
    if axis == "usl_thresholds":
        return f"t{value[0]}-{value[1]}".replace(".", "p")
    return str(value).replace(".", "p")


def cell_config(spec: ExperimentSpec, value, seed) -> TrainConfig:
    values = dict(spec.overrides)
    values.update(axis_overrides(spec.axis, value))
    values["seed"] = seed
    return config_from_dict(values)


def _config_key(spec: ExperimentSpec, cfg: TrainConfig, seed) -> str:
    payload = {
        "dataset": [spec.n_volumes, list(spec.shape), spec.difficulty,
                    spec.labeled_ratio, spec.n_val, spec.val_seed],
        "provider": [spec.provider, spec.provider_dim, spec.embeddings_file],
        "config": cfg.to_dict(),
        "seed": seed,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _ensure_dataset(spec: ExperimentSpec, seed, data_root: Path) -> Path:
    d = data_root / f"seed{seed}"
    manifest = d / "manifest.json"
    if not manifest.exists():
        samples = generate_synthetic_dataset(seed, spec.n_volumes, spec.shape,
                                             spec.difficulty)
        split = split_dataset(samples, spec.labeled_ratio, seed)
        write_dataset(split, d)
    return manifest


def _ensure_val(spec: ExperimentSpec, data_root: Path) -> Path:
    d = data_root / "val"
    manifest = d / "manifest.json"
    if not manifest.exists():
        samples = generate_synthetic_dataset(spec.val_seed, spec.n_val, spec.shape,
                                             spec.difficulty)
        write_dataset(DatasetSplit(labeled=samples, unlabeled=[], seed=spec.val_seed), d)
    return manifest


def _ensure_embeddings(spec: ExperimentSpec, out_dir: Path):
    desc_path = spec.descriptions or default_descriptions_path()
    ds = load_descriptions(desc_path)
    provider = get_provider(spec.provider, dim=spec.provider_dim,
                            path=spec.embeddings_file)
    matrix = embed_descriptions(provider, ds)
    write_embeddings(matrix, out_dir / "embeddings.emb1")
    return pool_embeddings(matrix)


def predict_volumes(ckpt_path, manifest_path, pred_dir, stride=None, select="a"):
    """Sliding-window predict every volume in a manifest; writes VOL1 labels."""
    from .trainer import load_state  # local import to keep module load light

    state, cfg = load_state(ckpt_path)
    z = None
    if cfg.beta_text > 0:
        import torch
        with torch.no_grad():
            z = state.projector(state.pooled).numpy()
    fwd = make_model_forward(state.model_a if select != "b" else state.model_b,
                             z, cfg.beta_text)
    spec = SlidingWindowSpec(
        patch_size=cfg.patch_size,
        stride=stride or tuple(max(1, p // 2) for p in cfg.patch_size))
    pred_dir = Path(pred_dir)
    pred_dir.mkdir(parents=True, exist_ok=True)
    split = read_dataset(manifest_path)
    out = []
    for s in split.labeled + split.unlabeled:
        probs = sliding_window_predict(fwd, s.image, spec)
        pred = labels_from_probs(probs)
        path = pred_dir / f"{s.id}.vol1"
        write_volume(pred, path)
        out.append((s.id, path))
    return out


def run_cell(spec: ExperimentSpec, value, seed, cell_dir: Path, train_manifest,
             val_manifest, pooled) -> dict:
    """One (axis value, seed) pipeline cell; returns its results row."""
    cfg = cell_config(spec, value, seed)
    key = _config_key(spec, cfg, seed)
    row = {"axis": spec.axis, "value": _value_tag(spec.axis, value), "seed": seed,
           "status": "ok", "dice": "", "jaccard": "", "hd95": "", "asd": "",
           "n_empty": "", "checkpoint": "", "report": ""}
    done_marker = cell_dir / "cell.json"
    if done_marker.exists():
        with open(done_marker) as f:
            meta = json.load(f)
        if meta.get("key") == key and meta.get("status") == "ok":
            row.update({k: meta[k] for k in
                        ("dice", "jaccard", "hd95", "asd", "n_empty",
                         "checkpoint", "report")})
            return row

    cell_dir.mkdir(parents=True, exist_ok=True)
    stage = "train"
    try:
        split = read_dataset(train_manifest)
        val_split = read_dataset(val_manifest)
        train(cfg, split, pooled, cell_dir, val_samples=val_split.labeled)
        ckpt = cell_dir / "final.ckpt"

        stage = "predict"
        pred_dir = cell_dir / "pred"
        predictions = predict_volumes(ckpt, val_manifest, pred_dir)

        stage = "eval"
        pairs = []
        for vid, pred_path in predictions:
            gt = read_volume(Path(val_manifest).parent / f"{vid}.label.vol1")
            pairs.append((vid, read_volume(pred_path), gt))
        report = evaluate_many(pairs)
        report_path = cell_dir / "report.csv"
        write_report_csv(report, report_path)

        row.update({
            "dice": f"{report.mean_dice:.6f}",
            "jaccard": f"{report.mean_jaccard:.6f}",
            "hd95": f"{report.mean_hd95:.6f}",
            "asd": f"{report.mean_asd:.6f}",
            "n_empty": str(sum(r.empty_flag for r in report.rows)),
            "checkpoint": str(ckpt.relative_to(cell_dir.parent.parent)),
            "report": str(report_path.relative_to(cell_dir.parent.parent)),
        })
    except Exception as e:  # cell failures are recorded, the grid continues
        row["status"] = f"failed:{stage}:{type(e).__name__}"
    with open(done_marker, "w") as f:
        json.dump({"key": key, **row}, f, indent=2, sort_keys=True)
        f.write("\n")
    return row


def run_experiment(spec: ExperimentSpec, out_dir, force=False) -> Path:
    """Run the full grid; returns the path of the aggregated results CSV.

    Finished cells (matching config hash) are reused unless ``force``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if force:
        for marker in out_dir.glob("cells/*/cell.json"):
            marker.unlink()
    with open(out_dir / "spec.json", "w") as f:
        json.dump(asdict(spec), f, indent=2, sort_keys=True, default=list)
        f.write("\n")

    pooled = _ensure_embeddings(spec, out_dir)
    data_root = out_dir / "data"
    val_manifest = _ensure_val(spec, data_root)

    rows = []
    for value in spec.axis_values:
        for seed in spec.seeds:
            train_manifest = _ensure_dataset(spec, seed, data_root)
            cell_dir = out_dir / "cells" / f"{_value_tag(spec.axis, value)}_seed{seed}"
            rows.append(run_cell(spec, value, seed, cell_dir, train_manifest,
                                 val_manifest, pooled))

    results_path = out_dir / "results.csv"
    with open(results_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    _write_summary(rows, out_dir / "summary.csv")
    _write_plots(rows, out_dir)
    return results_path


def _group_rows(rows):
    groups = {}
    for r in rows:
        if r["status"] != "ok":
            continue
        groups.setdefault(r["value"], []).append(r)
    return groups


def _write_summary(rows, path) -> None:
    """Median plus mean +/- std per metric across seeds, one row per value."""
    fieldnames = ["axis", "value", "n_seeds"]
    for m in METRICS:
        fieldnames += [f"{m}_median", f"{m}_mean", f"{m}_std"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        for value, group in _group_rows(rows).items():
            out = {"axis": group[0]["axis"], "value": value, "n_seeds": len(group)}
            for m in METRICS:
                vals = np.array([float(r[m]) for r in group])
                out[f"{m}_median"] = f"{np.median(vals):.6f}"
                out[f"{m}_mean"] = f"{vals.mean():.6f}"
                out[f"{m}_std"] = f"{vals.std():.6f}"
            w.writerow(out)


def _write_plots(rows, out_dir: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = _group_rows(rows)
    if not groups:
        return
    labels = list(groups)
    for m in METRICS:
        medians = [float(np.median([float(r[m]) for r in groups[v]])) for v in labels]
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.bar(range(len(labels)), medians, color="#4878a8")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=20, ha="right")
        arrow = "higher" if HIGHER_IS_BETTER[m] else "lower"
        ax.set_ylabel(f"{m} (median, {arrow} is better)")
        ax.set_title(rows[0]["axis"])
        fig.tight_layout()
        fig.savefig(out_dir / f"plot_{m}.png", metadata={"Software": None})
        plt.close(fig)


def read_results(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def report_compare(baseline_csv, method_csv, out_csv) -> None:
    """Per-metric delta table between two results/summary CSVs; direction
    flags follow the metric's sign convention."""
    base_rows = read_results(baseline_csv)
    meth_rows = read_results(method_csv)
    if not base_rows or not meth_rows:
        raise ValueError("empty results CSV")

    def shared_metric_columns():
        cols = []
        for name in base_rows[0]:
            if name not in meth_rows[0]:
                continue
            stem = name.split("_")[0]
            if stem in METRICS:
                cols.append((name, stem))
        if not cols:
            raise ValueError("no shared metric columns between inputs")
        return cols

    def col_mean(rows, name):
        vals = [float(r[name]) for r in rows if r[name] != ""]
        if not vals:
            raise ValueError(f"column {name} has no values")
        return float(np.mean(vals))

    with open(out_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "baseline", "method", "delta", "direction", "improved"])
        for name, stem in shared_metric_columns():
            b = col_mean(base_rows, name)
            m = col_mean(meth_rows, name)
            delta = m - b
            up = HIGHER_IS_BETTER[stem]
            w.writerow([name, f"{b:.6f}", f"{m:.6f}", f"{delta:+.6f}",
                        "up" if up else "down",
                        int(delta > 0 if up else delta < 0)])
