"""End-to-end experiment stages: prepare -> train -> extract -> fit-rul -> evaluate.

Every stage reads and writes files under the experiment's output directory,
so stages can be run one at a time from the CLI or composed by ``run_all``.

Layout::

    bundle/meta.json, bundle/train.csv, bundle/test.csv
    models/<kind>_s<seed>.ckpt, models/<kind>_s<seed>_loss.csv
    hi/<kind>_<set>_s<seed>_<split>.csv (+ .json sidecar)
    forest/<kind>_<set>_s<seed>.ckpt
    reports/<kind>_<set>.json, reports/comparison.{csv,txt,svg}, reports/timings.json
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import data as D
from . import forest as F
from . import models as M
from . import rapp, serialize
from .config import ExperimentConfig, digest

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage


class HashMismatchError(StageError):
    pass


# --------------------------------------------------------------------------- paths


@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def bundle(self) -> Path:
        return self.root / "bundle"

    def model(self, kind, seed) -> Path:
        return self.root / "models" / f"{kind}_s{seed}.ckpt"

    def loss(self, kind, seed) -> Path:
        return self.root / "models" / f"{kind}_s{seed}_loss.csv"

    def hi(self, kind, hi_set, seed, split) -> Path:
        return self.root / "hi" / f"{kind}_{hi_set}_s{seed}_{split}.csv"

    def forest(self, kind, hi_set, seed) -> Path:
        return self.root / "forest" / f"{kind}_{hi_set}_s{seed}.ckpt"

    def report(self, kind, hi_set) -> Path:
        return self.root / "reports" / f"{kind}_{hi_set}.json"

    @property
    def reports(self) -> Path:
        return self.root / "reports"


def layout(cfg: ExperimentConfig) -> Layout:
    return Layout(Path(cfg.out))


def _csv_text(df: pd.DataFrame) -> str:
    buf = io.StringIO()
    df.to_csv(buf, index=False, lineterminator="\n")
    return buf.getvalue()


def write_csv(path, df: pd.DataFrame) -> None:
    serialize.atomic_write_text(path, _csv_text(df))


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


# --------------------------------------------------------------------------- prepare


def _load_raw(cfg: ExperimentConfig):
    ds = cfg.dataset
    if ds.kind == "cmapss":
        train = D.parse_cmapss(cfg.resolve(ds.train_path), "train")
        test = D.parse_cmapss(cfg.resolve(ds.test_path), "test", cfg.resolve(ds.rul_path))
        return train, test
    if ds.kind == "mill":
        full = D.parse_mill(cfg.resolve(ds.mill_path), ds.mill_columns)
        rng = np.random.default_rng(ds.split_seed)
        perm = rng.permutation(len(full.units))
        n_test = int(round(ds.mill_test_fraction * len(perm)))
        test_ids = set(perm[:n_test].tolist())
        train_u = [u for i, u in enumerate(full.units) if i not in test_ids]
        test_u = [u for i, u in enumerate(full.units) if i in test_ids]
        return full.replace_units(train_u), full.replace_units(test_u)
    if ds.kind == "synthetic":
        train = D.make_synthetic(ds.synth, ds.synth_seed)
        test_cfg = ds.synth_test or dataclasses.replace(ds.synth, truncate=True)
        test = D.make_synthetic(test_cfg, ds.synth_seed + 1, fleet_seed=ds.synth_seed)
        return train, test
    raise StageError("prepare", f"unknown dataset kind {ds.kind!r}")


def _with_settings(ts: D.TrajectorySet) -> D.TrajectorySet:
    units = [dataclasses.replace(u, sensors=np.hstack([u.sensors, u.op_settings])) for u in ts.units]
    return D.TrajectorySet(units, ts.channels + ts.settings, ts.kind, ts.settings)


def cmd_prepare(cfg: ExperimentConfig) -> dict:
    """Parse, label, normalise and persist the dataset; returns the bundle meta."""
    try:
        train, test = _load_raw(cfg)
    except D.DataError as exc:
        raise StageError("prepare", str(exc)) from exc
    if cfg.dataset.include_op_settings:
        train, test = _with_settings(train), _with_settings(test)
    spec = cfg.group_spec()
    try:
        spec.indices(train.channels)
    except D.GroupSpecError as exc:
        raise StageError("prepare", str(exc)) from exc

    train = D.label_rul(train, cfg.rul, "train")
    test = D.label_rul(test, cfg.rul, "test")
    try:
        healthy = D.select_healthy(train, cfg.healthy)
    except D.DataError as exc:
        raise StageError("prepare", str(exc)) from exc
    stats = D.fit_norm(healthy)
    train_n = D.normalize_set(train, stats)
    test_n = D.normalize_set(test, stats)

    tr_df = D.to_frame(train_n)
    tr_df["healthy"] = np.concatenate([D.healthy_mask(u, cfg.healthy) for u in train.units]).astype(int)
    te_df = D.to_frame(test_n)

    lay = layout(cfg)
    write_csv(lay.bundle / "train.csv", tr_df)
    write_csv(lay.bundle / "test.csv", te_df)
    meta = {
        "kind": cfg.dataset.kind,
        "subset": cfg.dataset.subset,
        "channels": train.channels,
        "groups": spec.to_dict(),
        "norm": {"min": stats.min.tolist(), "max": stats.max.tolist(), "fit_population": stats.fit_population},
        "n_train_units": len(train),
        "n_test_units": len(test),
        "n_train_rows": int(len(tr_df)),
        "n_test_rows": int(len(te_df)),
        "n_healthy_rows": int(len(healthy)),
        "flags": {str(u.unit_id): list(u.flags) for u in [*train.units, *test.units] if u.flags},
        "views": list(D.MILL_PHASES) if cfg.dataset.kind == "mill" else ["last_cycle"],
        "hash": bundle_hash(cfg),
    }
    serialize.atomic_write_text(lay.bundle / "meta.json", serialize.dump_json(meta))
    return meta


def bundle_hash(cfg: ExperimentConfig) -> str:
    return cfg.stage_hash("dataset", "groups", "rul", "healthy")


def load_bundle(cfg: ExperimentConfig, stage: str = "train"):
    lay = layout(cfg)
    try:
        meta = json.loads((lay.bundle / "meta.json").read_text())
    except FileNotFoundError:
        raise StageError(stage, f"no prepared bundle in {lay.bundle}; run 'prepare' first") from None
    if meta["hash"] != bundle_hash(cfg):
        raise HashMismatchError(stage, "prepared bundle does not match the current config; rerun 'prepare'")
    train = pd.read_csv(lay.bundle / "train.csv")
    test = pd.read_csv(lay.bundle / "test.csv")
    return meta, train, test


# --------------------------------------------------------------------------- train


def model_hash(cfg: ExperimentConfig, kind: str, seed: int) -> str:
    return digest({"bundle": bundle_hash(cfg), "model": dataclasses.asdict(cfg.model), "kind": kind, "seed": seed})


def _nap_arrays(naps: rapp.NapSet) -> dict:
    out = {}
    for name, nm in [*((f"g{i}", n) for i, n in enumerate(naps.groups)), ("latent", naps.latent)]:
        out[f"nap_{name}_mean"] = nm.mean
        out[f"nap_{name}_components"] = nm.components
        out[f"nap_{name}_sv"] = nm.singular_values
    return out


def _nap_from_arrays(arrays: dict, n_groups: int) -> rapp.NapSet:
    def one(name):
        return rapp.NapModel(arrays[f"nap_{name}_mean"], arrays[f"nap_{name}_components"], arrays[f"nap_{name}_sv"])

    return rapp.NapSet([one(f"g{i}") for i in range(n_groups)], one("latent"))


def save_model(path, model: M.GroupedAutoencoder, naps: rapp.NapSet, meta: dict, norm: dict | None = None) -> None:
    meta = {"kind": "autoencoder", "model": model.descriptor(), "norm": norm, **meta}
    serialize.save(path, meta, {"params": model.params, **_nap_arrays(naps)})


def load_model(path):
    meta, arrays = serialize.load(path)
    if meta.get("kind") != "autoencoder":
        raise serialize.CheckpointError(f"{path} is not an autoencoder checkpoint")
    model = M.GroupedAutoencoder.from_descriptor(meta["model"], arrays["params"])
    return model, _nap_from_arrays(arrays, model.n_groups), meta


def train_one(cfg: ExperimentConfig, kind: str, seed: int, force: bool = False) -> Path:
    lay = layout(cfg)
    path = lay.model(kind, seed)
    h = model_hash(cfg, kind, seed)
    if not force and path.exists():
        try:
            meta, _ = serialize.load(path)
            if meta.get("config_hash") == h:
                log.info("train %s seed %s: cached", kind, seed)
                return path
        except (serialize.CheckpointError, ValueError):
            pass
    meta, train_df, _ = load_bundle(cfg)
    channels = meta["channels"]
    healthy = train_df.loc[train_df["healthy"] == 1, channels].to_numpy(dtype=float)
    rng = np.random.default_rng(seed)
    spec = D.GroupSpec.from_mapping(meta["groups"])
    model = M.build(kind, channels, cfg.model, rng, spec if M.MODEL_KINDS[kind][0] else None)
    try:
        history = M.train(model, healthy, cfg.model, rng)
    except M.DivergenceError as exc:
        raise StageError("train", f"{kind} seed {seed}: {exc}") from exc
    naps = rapp.fit_nap(model, healthy)
    write_csv(lay.loss(kind, seed), pd.DataFrame(history, columns=["epoch", "train_loss", "val_loss", "kl_term"]))
    save_model(path, model, naps, {"config_hash": h, "seed": seed, "model_kind": kind}, meta["norm"])
    return path


def cmd_train(cfg: ExperimentConfig, kinds=None, force: bool = False) -> list[Path]:
    kinds = kinds or _kinds(cfg)
    cells = [(k, s, force) for k in kinds for s in cfg.seeds]
    return _map(cfg, train_one, cells)


def _kinds(cfg: ExperimentConfig) -> list[str]:
    return list(dict.fromkeys(k for k, _ in cfg.methods))


# --------------------------------------------------------------------------- extract


def _uq_rng(seed: int, split: str) -> np.random.Generator:
    return np.random.default_rng([seed, 1 if split == "train" else 2])


def extract_one(cfg: ExperimentConfig, kind: str, hi_set: str, seed: int) -> list[Path]:
    lay = layout(cfg)
    meta, train_df, test_df = load_bundle(cfg, "extract")
    try:
        model, naps, mmeta = load_model(lay.model(kind, seed))
    except FileNotFoundError:
        raise StageError("extract", f"no checkpoint for {kind} seed {seed}; run 'train' first") from None
    if mmeta["config_hash"] != model_hash(cfg, kind, seed):
        raise HashMismatchError("extract", f"checkpoint {kind} seed {seed} does not match the current config")
    channels = meta["channels"]
    paths = []
    for split, df in (("train", train_df), ("test", test_df)):
        if split == "test" and meta["kind"] != "mill":
            # prediction target is the last available cycle of each unit
            df = df.groupby("unit", sort=False).tail(1)
        X = df[channels].to_numpy(dtype=float)
        try:
            names, H = rapp.compute_hi(model, naps, X, hi_set, cfg.uq, _uq_rng(seed, split))
        except rapp.HiAssemblyError as exc:
            raise StageError("extract", f"{kind}/{hi_set} seed {seed} {split}: {exc}") from exc
        out = pd.DataFrame(H, columns=names)
        out.insert(0, "cycle", df["cycle"].to_numpy())
        out.insert(0, "unit", df["unit"].to_numpy())
        out["rul_true"] = df["rul"].to_numpy()
        if "wear" in df:
            out["wear"] = df["wear"].to_numpy()
        path = lay.hi(kind, hi_set, seed, split)
        write_csv(path, out)
        side = {
            "model_kind": kind,
            "hi_set": hi_set,
            "seed": seed,
            "split": split,
            "features": names,
            "source_hash": mmeta["config_hash"],
            "uq": dataclasses.asdict(cfg.uq),
        }
        serialize.atomic_write_text(_sidecar(path), serialize.dump_json(side))
        paths.append(path)
    return paths


def cmd_extract(cfg: ExperimentConfig, methods=None) -> list:
    methods = methods or cfg.methods
    return _map(cfg, extract_one, [(k, h, s) for k, h in methods for s in cfg.seeds])


def read_hi(path):
    path = Path(path)
    side = json.loads(_sidecar(path).read_text())
    df = pd.read_csv(path)
    return df, side


# --------------------------------------------------------------------------- fit-rul


def fit_rul_one(cfg: ExperimentConfig, kind: str, hi_set: str, seed: int) -> Path:
    lay = layout(cfg)
    try:
        df, side = read_hi(lay.hi(kind, hi_set, seed, "train"))
    except FileNotFoundError:
        raise StageError("fit-rul", f"no train HIs for {kind}/{hi_set} seed {seed}; run 'extract' first") from None
    names = side["features"]
    try:
        forest = F.fit_forest(df[names].to_numpy(dtype=float), df["rul_true"].to_numpy(dtype=float),
                              cfg.forest, names)
    except F.ForestError as exc:
        raise StageError("fit-rul", str(exc)) from exc
    forest.meta.update({"source_hash": side["source_hash"], "hi_set": hi_set, "model_kind": kind, "seed": seed})
    path = lay.forest(kind, hi_set, seed)
    F.save_forest(forest, path)
    return path


def cmd_fit_rul(cfg: ExperimentConfig, methods=None) -> list:
    methods = methods or cfg.methods
    return _map(cfg, fit_rul_one, [(k, h, s) for k, h in methods for s in cfg.seeds])


# --------------------------------------------------------------------------- evaluate


def evaluate_one(cfg: ExperimentConfig, kind: str, hi_set: str, seed: int) -> dict[str, float]:
    """RMSE per evaluation view for one seed."""
    lay = layout(cfg)
    df, side = read_hi(lay.hi(kind, hi_set, seed, "test"))
    try:
        forest = F.load_forest(lay.forest(kind, hi_set, seed), expected_features=side["features"])
    except FileNotFoundError:
        raise StageError("evaluate", f"no forest for {kind}/{hi_set} seed {seed}; run 'fit-rul' first") from None
    except F.ForestError as exc:
        raise StageError("evaluate", str(exc)) from exc
    if forest.meta.get("source_hash") != side["source_hash"]:
        raise HashMismatchError("evaluate", f"forest and test HIs come from different models ({kind} seed {seed})")
    if len(df) == 0:
        raise StageError("evaluate", "empty test set")
    pred = forest.predict(df[side["features"]].to_numpy(dtype=float))
    target = df["rul_true"].to_numpy(dtype=float)
    if "wear" in df:
        out = {}
        w = df["wear"].to_numpy(dtype=float)
        for view, (lo, hi) in D.MILL_PHASES.items():
            sel = (w <= hi) & ((w > lo) if lo > 0 else (w >= 0))
            out[view] = F.rmse(pred[sel], target[sel]) if sel.any() else float("nan")
        return out
    return {"last_cycle": F.rmse(pred, target)}


def _std(vals) -> float | None:
    return float(np.std(vals, ddof=1)) if len(vals) > 1 else None


def cmd_evaluate(cfg: ExperimentConfig, methods=None) -> list[dict]:
    """Aggregate per-seed RMSE into one RunReport per method."""
    methods = methods or cfg.methods
    lay = layout(cfg)
    per_cell = _map(cfg, evaluate_one, [(k, h, s) for k, h in methods for s in cfg.seeds])
    reports = []
    it = iter(per_cell)
    for kind, hi_set in methods:
        per_seed = [next(it) for _ in cfg.seeds]
        views = list(per_seed[0])
        summary = {}
        for v in views:
            vals = [r[v] for r in per_seed]
            summary[v] = {
                "per_seed": {str(s): r for s, r in zip(cfg.seeds, vals)},
                "mean": float(np.mean(vals)),
                "std": _std(vals),
                "best": float(np.min(vals)),
            }
        report = {
            "model_kind": kind,
            "hi_set": hi_set,
            "dataset": {"kind": cfg.dataset.kind, "subset": cfg.dataset.subset},
            "seeds": list(cfg.seeds),
            "rmse": summary,
            "config_hash": cfg.hash(),
            "artifacts": {
                "models": [str(lay.model(kind, s).relative_to(lay.root)) for s in cfg.seeds],
                "hi_test": [str(lay.hi(kind, hi_set, s, "test").relative_to(lay.root)) for s in cfg.seeds],
                "forests": [str(lay.forest(kind, hi_set, s).relative_to(lay.root)) for s in cfg.seeds],
            },
        }
        serialize.atomic_write_text(lay.report(kind, hi_set), serialize.dump_json(report))
        reports.append(report)
    write_comparison(cfg, reports)
    return reports


# --------------------------------------------------------------------------- tables


METHOD_LABELS = {
    ("ae", "gonzalez"): "AE, HI_Gonzalez",
    ("ae", "mono"): "AE, HI_mono",
    ("iglide_ae", "groups"): "I-GLIDE_AE, HI_groups",
    ("vae", "gonzalez"): "VAE, HI_Gonzalez",
    ("vae", "mono"): "VAE, HI_mono",
    ("iglide_vae", "groups"): "I-GLIDE_VAE, HI_groups",
}


def comparison_frame(reports: list[dict]) -> pd.DataFrame:
    rows = []
    for r in reports:
        for view, s in r["rmse"].items():
            rows.append({
                "method": METHOD_LABELS.get((r["model_kind"], r["hi_set"]), f"{r['model_kind']}, {r['hi_set']}"),
                "model_kind": r["model_kind"],
                "hi_set": r["hi_set"],
                "dataset": r["dataset"]["subset"],
                "view": view,
                "mean": s["mean"],
                "std": s["std"],
                "best": s["best"],
                "n_seeds": len(s["per_seed"]),
            })
    return pd.DataFrame(rows)


def render_table(frame: pd.DataFrame) -> str:
    """Aligned text: one row per method, one 'mean ± std (best)' cell per view."""
    views = list(dict.fromkeys(frame["view"]))
    header = ["Model, HI set"] + [f"{frame['dataset'].iloc[0]} {v}" for v in views]
    body = []
    for method, block in frame.groupby("method", sort=False):
        cells = [method]
        for v in views:
            r = block[block["view"] == v].iloc[0]
            std = "n/a" if r["std"] is None or (isinstance(r["std"], float) and math.isnan(r["std"])) else f"{r['std']:.2f}"
            cells.append(f"{r['mean']:.2f} ± {std} (best {r['best']:.2f})")
        body.append(cells)
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    fmt = lambda row: "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
    lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


def write_comparison(cfg: ExperimentConfig, reports: list[dict]) -> pd.DataFrame:
    from .plotting import plot_comparison

    lay = layout(cfg)
    frame = comparison_frame(reports)
    write_csv(lay.reports / "comparison.csv", frame)
    serialize.atomic_write_text(lay.reports / "comparison.txt", render_table(frame))
    plot_comparison(frame, lay.reports / "comparison.svg")
    return frame


# --------------------------------------------------------------------------- orchestration


def _call(args):
    fn, cfg, cell = args
    return fn(cfg, *cell)


def _map(cfg: ExperimentConfig, fn, cells):
    """Run independent cells, in parallel when ``cfg.jobs > 1``; results keep
    cell order either way."""
    if cfg.jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(cfg.jobs) as ex:
            return list(ex.map(_call, [(fn, cfg, c) for c in cells]))
    return [fn(cfg, *c) for c in cells]


def cmd_run_all(cfg: ExperimentConfig) -> list[dict]:
    """Every stage for every (method, seed); fails fast with the stage name.
    Wall-clock per stage goes to reports/timings.json, not into the reports."""
    timings = {}

    def timed(name, fn, *a):
        t0 = time.perf_counter()
        out = fn(*a)
        timings[name] = round(time.perf_counter() - t0, 3)
        log.info("%s done in %.1fs", name, timings[name])
        return out

    timed("prepare", cmd_prepare, cfg)
    timed("train", cmd_train, cfg)
    timed("extract", cmd_extract, cfg)
    timed("fit-rul", cmd_fit_rul, cfg)
    reports = timed("evaluate", cmd_evaluate, cfg)
    timings["total"] = round(sum(timings.values()), 3)
    serialize.atomic_write_text(layout(cfg).reports / "timings.json", serialize.dump_json(timings))
    return reports
