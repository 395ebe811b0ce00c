"""Command-line pipeline: gen-data, preprocess, train, eval, probe, attn, report.

Usage::

    jema VERB [--config cfg.yaml] [--run-dir DIR] [section.key=value ...]

Every invocation works inside a run directory (``$JEMA_RUN_ROOT`` or
``./runs``, named ``{timestamp}_seed{seed}``) holding ``config.snapshot``,
``metrics/``, ``checkpoints/`` and ``figures/``. Pass ``--run-dir`` to chain
verbs in one directory. On failure a single JSON line goes to stderr and the
exit code is 1; argparse handles unknown verbs with exit 2.
"""
import argparse
import copy
import csv
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import analysis, meltpool_vision, synth, trainer
from .model import load_checkpoint

log = logging.getLogger("jema")

VERBS = ("gen-data", "preprocess", "train", "eval", "probe", "attn", "report")
RUN_ROOT_ENV = "JEMA_RUN_ROOT"
SUBDIRS = ("metrics", "checkpoints", "figures")

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "data": {
        "manifest": None,  # default: run_dir/preprocessed or run_dir/data
        "frames_per_cell": 40,
        "powers": list(synth.DoeGrid().powers),
        "velocities": list(synth.DoeGrid().velocities),
        "noise": 0.02,
        "label_noise": 0.03,
        "outlier_fraction": 0.02,
        "jitter": 0.0,
    },
    "preprocess": {
        "threshold_c": meltpool_vision.DEFAULT_THRESHOLD_C,
        "median_kernel": meltpool_vision.DEFAULT_MEDIAN_KERNEL,
        "sigma": 3.0,
    },
    "train": {k: v for k, v in trainer.TrainConfig().to_dict().items() if k != "seed"},
    "eval": {"checkpoint": None, "split": "test", "baseline_mse": None},
    "probe": {"checkpoint": None, "perplexity": 30.0},
    "attn": {"checkpoint": None, "split": "test", "n_images": 4, "layer": -1, "modalities": ["on_axis", "off_axis"]},
    "report": {"table_csv": None, "source_dir": None},
}


class ConfigError(ValueError):
    pass


def _merge(base, update, prefix=""):
    for key, value in update.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {name!r} must be a mapping")
            _merge(base[key], value, name + ".")
        else:
            base[key] = value


def parse_override(text):
    """``a.b=value`` -> (["a", "b"], parsed value). Values are parsed as YAML scalars."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from None
    return key.split("."), value


def resolve_config(path=None, overrides=()):
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ConfigError(f"config {path} must be a mapping")
            _merge(cfg, loaded)
    for text in overrides:
        keys, value = parse_override(text)
        node = cfg
        for i, k in enumerate(keys):
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"override key {'.'.join(keys[: i + 1])!r} does not exist")
            if i == len(keys) - 1:
                if isinstance(node[k], dict):
                    raise ConfigError(f"override key {'.'.join(keys)!r} is a section")
                node[k] = value
            else:
                node = node[k]
    return cfg


def make_run_dir(seed, run_dir=None):
    if run_dir is not None:
        out = Path(run_dir)
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        out = root / f"{stamp}_seed{seed}"
        n = 1
        while out.exists():
            out = root / f"{stamp}_seed{seed}-{n}"
            n += 1
    for sub in SUBDIRS:
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def write_snapshot(run_dir, verb, cfg):
    """Resolved configs, keyed by verb, accumulated across verbs in one run directory."""
    path = run_dir / "config.snapshot"
    snap = {}
    if path.exists():
        snap = yaml.safe_load(path.read_text()) or {}
    snap[verb] = cfg
    path.write_text(yaml.safe_dump(snap, sort_keys=True))


def _manifest(cfg, run_dir):
    if cfg["data"]["manifest"]:
        path = Path(cfg["data"]["manifest"])
    else:
        path = run_dir / "preprocessed" / "manifest.csv"
        if not path.exists():
            path = run_dir / "data" / "manifest.csv"
    if not path.exists():
        raise ConfigError(f"manifest {path} not found (set data.manifest)")
    return path


def _checkpoint(section, run_dir):
    path = Path(section["checkpoint"]) if section["checkpoint"] else run_dir / "checkpoints" / "model.pt"
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found")
    return path


def _train_config(cfg):
    try:
        return trainer.TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_gen_data(cfg, run_dir):
    d = cfg["data"]
    try:
        grid = synth.DoeGrid(tuple(d["velocities"]), tuple(d["powers"]))
        settings = synth.GeneratorSettings(
            noise=float(d["noise"]), label_noise=float(d["label_noise"]),
            outlier_fraction=float(d["outlier_fraction"]), jitter=float(d["jitter"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    manifest = synth.generate_dataset(grid, int(d["frames_per_cell"]), run_dir / "data", cfg["seed"], settings)
    n = len(synth.read_manifest(manifest)[0])
    return {"manifest": str(manifest), "frames": n}


def cmd_preprocess(cfg, run_dir):
    p = cfg["preprocess"]
    source = Path(cfg["data"]["manifest"] or run_dir / "data" / "manifest.csv")
    if not source.exists():
        raise ConfigError(f"manifest {source} not found (set data.manifest)")
    manifest, rows = meltpool_vision.preprocess_manifest(
        source, run_dir / "preprocessed", float(p["threshold_c"]), int(p["median_kernel"]), float(p["sigma"]),
    )
    meltpool_vision.write_aggregate_csv(run_dir / "metrics" / "doe_aggregate.csv", rows)
    return {"manifest": str(manifest), "removed": sum(r.n_removed for r in rows)}


def cmd_train(cfg, run_dir):
    tc = _train_config(cfg)
    manifest = _manifest(cfg, run_dir)
    ckpt = trainer.train(tc, manifest, run_dir / "checkpoints" / "model.pt", run_dir / "metrics")
    return {
        "checkpoint": str(run_dir / "checkpoints" / "model.pt"),
        "initial_objective": ckpt.meta["initial_objective"].get("total"),
        "final_objective": ckpt.meta["final_objective"].get("total"),
    }


EVAL_COLUMNS = ("loss", "mse_multi", "mse_uni", "variation_multi_pct", "variation_uni_pct",
                "mse_multi_length", "mse_multi_height", "mse_uni_length", "mse_uni_height", "n_samples")


def cmd_eval(cfg, run_dir):
    e = cfg["eval"]
    ckpt = load_checkpoint(_checkpoint(e, run_dir))
    manifest = _manifest(cfg, run_dir)
    rep = trainer.evaluate(ckpt, manifest, e["baseline_mse"], e["split"])
    pt = rep.per_target
    _write_rows(run_dir / "metrics" / "eval.csv", EVAL_COLUMNS, [[
        ckpt.meta.get("loss_kind", ""), f"{rep.mse_multi:.8g}", f"{rep.mse_uni:.8g}",
        f"{rep.variation_multi_pct:.4f}", f"{rep.variation_uni_pct:.4f}",
        f"{pt['multimodal'][0]:.8g}", f"{pt['multimodal'][1]:.8g}",
        f"{pt['unimodal_on_axis'][0]:.8g}", f"{pt['unimodal_on_axis'][1]:.8g}", rep.n_samples,
    ]])
    for setting in trainer.SETTINGS:
        sc = trainer.predict_scatter(ckpt, manifest, setting, e["split"])
        cols = ("frame_id", "length_true", "length_pred", "height_true", "height_pred")
        rows = [[sc["frame_id"][i]] + [f"{sc[c][i]:.6f}" for c in cols[1:]] for i in range(len(sc["frame_id"]))]
        _write_rows(run_dir / "metrics" / f"scatter_{setting}.csv", cols, rows)
    return {"mse_multi": rep.mse_multi, "mse_uni": rep.mse_uni}


def cmd_probe(cfg, run_dir):
    p = cfg["probe"]
    ckpt = load_checkpoint(_checkpoint(p, run_dir))
    manifest = _manifest(cfg, run_dir)
    size, seed = ckpt.model.cfg.image_size, ckpt.meta.get("split_seed", 0)
    model = ckpt.model.eval()
    tr, _ = trainer.load_frames(manifest, "train", image_size=size, seed=seed, norm=ckpt.norm)
    te, te_recs = trainer.load_frames(manifest, "test", image_size=size, seed=seed, norm=ckpt.norm)
    rows = analysis.run_probes(model, tr, te)
    analysis.write_probe_csv(run_dir / "metrics" / "probes.csv", rows)

    importances, pca_rows, tsne_rows = {}, [], []
    for modality in ("on_axis", "off_axis"):
        emb_tr = analysis.collect_embeddings(model, tr, modality)["fused"]
        emb_te = analysis.collect_embeddings(model, te, modality)["fused"]
        pca = analysis.pca_fit(emb_tr, mode="variance_95")
        targets = {
            "P": tr.metadata[:, 0].double().numpy(), "v": tr.metadata[:, 1].double().numpy(),
            "L": tr.targets[:, 0].double().numpy(), "H": tr.targets[:, 1].double().numpy(),
        }
        importances[modality] = analysis.component_importance(pca.transform(emb_tr), targets)
        z2 = analysis.pca_fit(emb_tr, mode="two_components").transform(emb_te)
        t2 = analysis.tsne_embed(emb_te, seed=cfg["seed"], perplexity=float(p["perplexity"]))
        for i, r in enumerate(te_recs):
            meta = [f"{r.power_w:g}", f"{r.velocity_mm_s:g}", f"{r.length_px:.4f}", f"{r.height_px:.4f}"]
            pca_rows.append([r.frame_id, modality, f"{z2[i, 0]:.6f}", f"{z2[i, 1]:.6f}"] + meta)
            tsne_rows.append([r.frame_id, modality, f"{t2[i, 0]:.6f}", f"{t2[i, 1]:.6f}"] + meta)
    analysis.write_importance_csv(run_dir / "metrics" / "importance.csv", importances)
    tail = ["power_w", "velocity_mm_s", "length_px", "height_px"]
    _write_rows(run_dir / "metrics" / "pca_2d.csv", ["frame_id", "modality", "pc1", "pc2"] + tail, pca_rows)
    _write_rows(run_dir / "metrics" / "tsne_2d.csv", ["frame_id", "modality", "dim1", "dim2"] + tail, tsne_rows)
    return {r["target"] + "/" + r["modality"]: round(r["r2_heldout"], 4) for r in rows}


def cmd_attn(cfg, run_dir):
    a = cfg["attn"]
    ckpt = load_checkpoint(_checkpoint(a, run_dir))
    manifest = _manifest(cfg, run_dir)
    model = ckpt.model.eval()
    modalities = list(a["modalities"])
    data, recs = trainer.load_frames(manifest, a["split"], modalities, model.cfg.image_size,
                                     seed=ckpt.meta.get("split_seed", 0), norm=ckpt.norm)
    n = min(int(a["n_images"]), len(recs))
    if n < 1:
        raise ConfigError("attn.n_images must be >= 1")
    _, root = synth.read_manifest(manifest)
    out = run_dir / "figures" / "attention"
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    with torch.no_grad():
        for modality in modalities:
            imgs = getattr(data, modality)[:n].to(model.predict_head.weight.dtype)
            attn = model.extract_attention(imgs, modality, layer=int(a["layer"]))
            for i in range(n):
                full = synth.read_png(root / recs[i].path(modality))
                _, overlay = analysis.attention_overlay(full, attn[i])
                synth.write_png(out / f"{recs[i].frame_id}_{modality}.png", overlay)
                written += 1
    return {"heatmaps": written}


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


_LABEL_TO_KIND = {v.lower(): k for k, v in trainer.TABLE_LABELS.items()}


def _table_inputs(paths):
    """``{loss_kind: (mse_multi, mse_uni)}`` from CSVs with loss, mse_multi, mse_uni columns."""
    out = {}
    for path in paths:
        for row in _read_csv(path):
            missing = {"loss", "mse_multi", "mse_uni"} - set(row)
            if missing:
                raise ConfigError(f"{path}: missing columns {sorted(missing)}")
            name = row["loss"].strip()
            kind = name if name in trainer.LOSS_KINDS else _LABEL_TO_KIND.get(name.lower())
            if kind is None:
                raise ConfigError(f"{path}: unknown loss {name!r}")
            out[kind] = (float(row["mse_multi"]), float(row["mse_uni"]))
    return out


def _figures(src, fig_dir):
    """Render every figure whose source CSV exists under ``src/metrics``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    m = src / "metrics"
    made = []

    def save(fig, name):
        fig.tight_layout()
        fig.savefig(fig_dir / name, dpi=100)
        plt.close(fig)
        made.append(name)

    if (m / "doe_aggregate.csv").exists():
        rows = _read_csv(m / "doe_aggregate.csv")
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        for ax, col, label in zip(axes, ("mean_length_px", "mean_height_px"), ("L (px)", "H (px)")):
            for v in sorted({float(r["velocity_mm_s"]) for r in rows}):
                sel = [r for r in rows if float(r["velocity_mm_s"]) == v]
                ax.plot([float(r["power_w"]) for r in sel], [float(r[col]) for r in sel], "o-", label=f"v={v:g} mm/s")
            ax.set_xlabel("laser power (W)")
            ax.set_ylabel(label)
        axes[0].legend(fontsize=7)
        save(fig, "doe_geometry.png")

    if (m / "train_metrics.csv").exists():
        rows = [r for r in _read_csv(m / "train_metrics.csv") if r["epoch"].isdigit() and r["total"]]
        if rows:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.plot([int(r["epoch"]) for r in rows], [float(r["total"]) for r in rows], "o-")
            ax.set_yscale("log")
            ax.set_xlabel("epoch")
            ax.set_ylabel("training objective")
            save(fig, "training_curve.png")

    for setting in trainer.SETTINGS:
        f = m / f"scatter_{setting}.csv"
        if not f.exists():
            continue
        rows = _read_csv(f)
        fig, axes = plt.subplots(1, 2, figsize=(8, 4))
        for ax, t in zip(axes, ("length", "height")):
            x = np.array([float(r[f"{t}_true"]) for r in rows])
            y = np.array([float(r[f"{t}_pred"]) for r in rows])
            ax.scatter(x, y, s=8)
            lo, hi = min(x.min(), y.min()), max(x.max(), y.max())
            ax.plot([lo, hi], [lo, hi], "k--", lw=1)
            ax.set_xlabel(f"true {t} (px)")
            ax.set_ylabel(f"predicted {t} (px)")
        fig.suptitle(setting)
        save(fig, f"scatter_{setting}.png")

    for name, cols in (("pca_2d", ("pc1", "pc2")), ("tsne_2d", ("dim1", "dim2"))):
        f = m / f"{name}.csv"
        if not f.exists():
            continue
        rows = _read_csv(f)
        mods = sorted({r["modality"] for r in rows})
        fig, axes = plt.subplots(2, len(mods), figsize=(4.5 * len(mods), 8), squeeze=False)
        for j, mod in enumerate(mods):
            sel = [r for r in rows if r["modality"] == mod]
            for i, (key, label) in enumerate((("power_w", "P (W)"), ("velocity_mm_s", "v (mm/s)"))):
                ax = axes[i, j]
                sc = ax.scatter([float(r[cols[0]]) for r in sel], [float(r[cols[1]]) for r in sel],
                                c=[float(r[key]) for r in sel], s=8, cmap="viridis")
                fig.colorbar(sc, ax=ax, label=label)
                ax.set_title(mod)
        save(fig, f"{name}.png")

    if (m / "probes.csv").exists():
        rows = _read_csv(m / "probes.csv")
        fig, ax = plt.subplots(figsize=(6, 3.5))
        labels = [f"{r['target']}\n{r['modality']}" for r in rows]
        ax.bar(range(len(rows)), [float(r["r2_heldout"]) for r in rows])
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, fontsize=7)
        ax.set_ylabel("held-out r2")
        ax.set_ylim(min(0.0, min(float(r["r2_heldout"]) for r in rows)), 1.0)
        save(fig, "probes.png")

    if (m / "importance.csv").exists():
        rows = _read_csv(m / "importance.csv")
        mods = sorted({r["modality"] for r in rows})
        fig, axes = plt.subplots(len(mods), 1, figsize=(7, 3 * len(mods)), squeeze=False)
        for ax, mod in zip(axes[:, 0], mods):
            for r in (r for r in rows if r["modality"] == mod):
                w = [float(v) for k, v in r.items() if k.startswith("pc") and v not in ("", None)]
                ax.plot(range(1, len(w) + 1), w, "o-", label=r["target"])
            ax.set_title(mod)
            ax.set_xlabel("principal component")
            ax.set_ylabel("importance")
            ax.legend(fontsize=7)
        save(fig, "importance.png")
    return made


def cmd_report(cfg, run_dir):
    r = cfg["report"]
    out = {}
    tables = r["table_csv"]
    if tables:
        tables = [tables] if isinstance(tables, str) else list(tables)
        csv_text, text = trainer.report_table(_table_inputs(tables))
        (run_dir / "metrics" / "table.csv").write_text(csv_text)
        (run_dir / "metrics" / "table.txt").write_text(text)
        sys.stdout.write(text)
        out["table"] = str(run_dir / "metrics" / "table.csv")
    src = Path(r["source_dir"]) if r["source_dir"] else run_dir
    out["figures"] = _figures(src, run_dir / "figures")
    return out


COMMANDS = {
    "gen-data": cmd_gen_data,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "attn": cmd_attn,
    "report": cmd_report,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="jema", description="Multimodal co-learning pipeline for melt-pool monitoring.")
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("--config", "-c", help="YAML config file")
    ap.add_argument("--run-dir", help="existing or new run directory (default: a fresh one under $JEMA_RUN_ROOT)")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("overrides", nargs="*", metavar="key=value")
    return ap


def _fail(verb, exc):
    msg = " ".join(str(exc).split())
    print(json.dumps({"status": "error", "verb": verb, "error": type(exc).__name__, "message": msg}), file=sys.stderr)
    return 1


def main(argv=None):
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.overrides)
        if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
            raise ConfigError("seed must be an integer")
        threads = cfg["threads"]
        if not isinstance(threads, int) or threads < 1:
            raise ConfigError("threads must be a positive integer")
        if args.verb == "train":
            _train_config(cfg)  # validate before creating a run directory
        torch.set_num_threads(threads)
        run_dir = make_run_dir(cfg["seed"], args.run_dir)
        write_snapshot(run_dir, args.verb, cfg)
        result = COMMANDS[args.verb](cfg, run_dir)
    except (ConfigError, ValueError, OSError, KeyError, TypeError, IndexError) as exc:
        return _fail(args.verb, exc)
    print(json.dumps({"status": "ok", "verb": args.verb, "run_dir": str(run_dir), **result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
