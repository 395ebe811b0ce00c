"""Co-learning training loop, held-out evaluation and Table-style reporting.

Reported MSE is the mean of the normalized length MSE and the normalized
height MSE.
"""
import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from skimage.transform import resize

from . import synth
from .losses import (
    LossWeights,
    contrastive_regression_loss,
    jema_loss,
    regression_mse,
    rnc_loss,
    supcon_loss,
)
from .model import Checkpoint, EncoderConfig, JemaModel, Modality, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOSS_KINDS = ("reg", "supcon", "rnc", "jema_cosine", "jema_l2", "jema_l1")
TABLE_LABELS = {
    "reg": "Reg",
    "supcon": "SupCon",
    "rnc": "RnC",
    "jema_cosine": "Cosine",
    "jema_l2": "L2-distance",
    "jema_l1": "L1-distance",
}
DEFAULT_TAU = {"supcon": 0.1, "rnc": 2.0}
SETTINGS = ("multimodal", "unimodal_on_axis")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


@dataclass
class TrainConfig:
    loss_kind: str = "jema_cosine"
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = None
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    preset: str = "desk"
    augment: bool = False
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        self.weights  # validates alpha/beta
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be positive")
        if int(self.epochs) < 1:
            raise ValueError("epochs must be >= 1")
        if int(self.batch_size) < 2:
            raise ValueError("batch_size must be >= 2 for pairwise losses")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        EncoderConfig.preset(self.preset)

    @property
    def weights(self):
        return LossWeights(self.alpha, self.beta)

    @property
    def resolved_tau(self):
        return self.tau if self.tau is not None else DEFAULT_TAU.get(self.loss_kind)

    @property
    def encoder_config(self):
        return EncoderConfig.preset(self.preset)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class FrameData:
    """Images and normalized labels for one split, as tensors."""

    frame_ids: list
    on_axis: torch.Tensor = None  # (N, 1, S, S) or None
    off_axis: torch.Tensor = None
    metadata: torch.Tensor = None  # (N, 2): u_p, u_v
    targets: torch.Tensor = None  # (N, 2): y_l, y_h
    cells: torch.Tensor = None  # (N,) DOE cell index
    raw: dict = field(default_factory=dict)  # modality -> uint8 (N, 320, 320) for augmentation

    def __len__(self):
        return len(self.frame_ids)

    def subset(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        pick = lambda t: None if t is None else t[idx]  # noqa: E731
        return FrameData(
            [self.frame_ids[i] for i in idx.tolist()],
            pick(self.on_axis),
            pick(self.off_axis),
            pick(self.metadata),
            pick(self.targets),
            pick(self.cells),
            {k: v[idx.numpy()] for k, v in self.raw.items()},
        )


def split_indices(records, seed=0, fractions=SPLIT_FRACTIONS):
    """Train/val/test indices stratified by DOE cell."""
    rng = np.random.default_rng(seed)
    groups = {}
    for i, r in enumerate(records):
        groups.setdefault(r.cell, []).append(i)
    out = {"train": [], "val": [], "test": []}
    for cell in sorted(groups):
        idx = np.asarray(groups[cell])
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(fractions[0] * len(idx)))
        n_val = int(round(fractions[1] * len(idx)))
        out["train"].extend(idx[:n_train].tolist())
        out["val"].extend(idx[n_train : n_train + n_val].tolist())
        out["test"].extend(idx[n_train + n_val :].tolist())
    return {k: sorted(v) for k, v in out.items()}


def read_image(path):
    """Single choke point for image reads (tests instrument it)."""
    return synth.read_png(path)


def _to_size(img, size):
    if img.shape == (size, size):
        return img
    return resize(img, (size, size), anti_aliasing=True, preserve_range=True)


def load_frames(manifest, split="all", modalities=("on_axis", "off_axis"), image_size=32, seed=0, norm=None, keep_raw=False):
    """Load one split of a manifest. Only the requested modalities are read."""
    records, root = synth.read_manifest(manifest)
    norm = norm or synth.load_norm(manifest)
    if split == "all":
        idx = list(range(len(records)))
    else:
        idx = split_indices(records, seed)[split]
    if not idx:
        raise ValueError(f"split {split!r} of {manifest} is empty")
    recs = [records[i] for i in idx]
    cell_index = {c: k for k, c in enumerate(sorted({r.cell for r in records}))}
    labels = np.array([synth.normalize(r, norm) for r in recs], dtype=np.float32)
    data = FrameData(
        [r.frame_id for r in recs],
        metadata=torch.from_numpy(labels[:, :2].copy()),
        targets=torch.from_numpy(labels[:, 2:].copy()),
        cells=torch.tensor([cell_index[r.cell] for r in recs]),
    )
    for m in modalities:
        m = Modality(m)
        raws = [read_image(root / r.path(m)) for r in recs]
        imgs = np.stack([_to_size(x, image_size) for x in raws]).astype(np.float32)
        setattr(data, m.value, torch.from_numpy(imgs[:, None]))
        if keep_raw:
            data.raw[m.value] = np.stack([np.round(x * 255).astype(np.uint8) for x in raws])
    return data, recs


def _augmented_batch(raw, idx, rng, size):
    out = np.empty((len(idx), 1, size, size), dtype=np.float32)
    for n, i in enumerate(idx):
        img = synth.augment(raw[i].astype(np.float64) / 255.0, rng)
        out[n, 0] = _to_size(img, size)
    return torch.from_numpy(out)


def objective_terms(model, on, off, metadata, targets, cells, cfg: TrainConfig):
    """All loss terms for one paired batch.

    Contrastive terms run on the 2N stack of both modalities' embeddings
    with duplicated labels, so same-parameter pairs across modalities are
    pulled together. Returns ``None`` for a supcon batch with a single cell.
    """
    out = model.forward_multimodal(on, off)
    pred = out.predictions
    lreg_l = regression_mse(targets[:, 0], pred[:, 0])
    lreg_h = regression_mse(targets[:, 1], pred[:, 1])
    zero = pred.new_zeros(())
    kind = cfg.loss_kind
    if kind == "reg":
        lcr_p = lcr_v = zero
    else:
        s_p = torch.cat([out.on_axis.s_p, out.off_axis.s_p])
        s_v = torch.cat([out.on_axis.s_v, out.off_axis.s_v])
        u = torch.cat([metadata, metadata]).to(s_p.dtype)
        if kind.startswith("jema_"):
            sim = kind.split("_", 1)[1]
            lcr_p = contrastive_regression_loss(s_p, u[:, 0], sim)
            lcr_v = contrastive_regression_loss(s_v, u[:, 1], sim)
        elif kind == "supcon":
            if torch.unique(cells).numel() < 2:
                return None
            labels = torch.cat([cells, cells])
            lcr_p = supcon_loss(s_p, labels, cfg.resolved_tau)
            lcr_v = supcon_loss(s_v, labels, cfg.resolved_tau)
        else:
            lcr_p = rnc_loss(s_p, u[:, 0], cfg.resolved_tau)
            lcr_v = rnc_loss(s_v, u[:, 1], cfg.resolved_tau)
    weights = cfg.weights if kind != "reg" else LossWeights(0.0, cfg.beta)
    total = jema_loss(lcr_p, lcr_v, lreg_l, lreg_h, weights)
    return {"total": total, "lcr_p": lcr_p, "lcr_v": lcr_v, "lreg_l": lreg_l, "lreg_h": lreg_h}


def _batches(n, batch_size, generator=None):
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    starts = range(0, n, batch_size)
    batches = [order[s : s + batch_size] for s in starts]
    # a trailing singleton cannot form pairs; fold it into the previous batch
    if len(batches) > 1 and len(batches[-1]) < 2:
        last = batches.pop()
        batches[-1] = torch.cat([batches[-1], last])
    return batches


@torch.no_grad()
def full_objective(model, data: FrameData, cfg: TrainConfig):
    """Mean of each loss term over one fixed, seeded batching of ``data`` (eval mode).

    Records are stored cell by cell, so the batching is a seeded
    permutation rather than file order; otherwise every supcon batch would
    hold a single cell.
    """
    was_training = model.training
    model.eval()
    sums, count = {}, 0
    dtype = model.predict_head.weight.dtype
    for idx in _batches(len(data), cfg.batch_size, torch.Generator().manual_seed(cfg.seed)):
        terms = objective_terms(
            model, data.on_axis[idx].to(dtype), data.off_axis[idx].to(dtype),
            data.metadata[idx], data.targets[idx].to(dtype), data.cells[idx], cfg,
        )
        if terms is None:
            continue
        for k, v in terms.items():
            sums[k] = sums.get(k, 0.0) + float(v)
        count += 1
    model.train(was_training)
    return {k: v / count for k, v in sums.items()}


def fit_model(model, data: FrameData, cfg: TrainConfig, on_epoch=None):
    """Optimize ``model`` in place. Returns the per-epoch history.

    Deterministic for a fixed seed in single-threaded execution.
    """
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    aug_rng = np.random.default_rng(cfg.seed)
    dtype = model.predict_head.weight.dtype
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    size = model.cfg.image_size
    history = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        t0 = time.perf_counter()
        sums, steps, skipped = {}, 0, 0
        for idx in _batches(len(data), cfg.batch_size, gen):
            if cfg.augment and data.raw:
                on = _augmented_batch(data.raw["on_axis"], idx.tolist(), aug_rng, size)
                off = _augmented_batch(data.raw["off_axis"], idx.tolist(), aug_rng, size)
            else:
                on, off = data.on_axis[idx], data.off_axis[idx]
            terms = objective_terms(
                model, on.to(dtype), off.to(dtype), data.metadata[idx], data.targets[idx].to(dtype), data.cells[idx], cfg
            )
            if terms is None:
                skipped += 1
                log.warning("epoch %d: skipped supcon batch with a single DOE cell", epoch)
                continue
            opt.zero_grad(set_to_none=True)
            terms["total"].backward()
            opt.step()
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            steps += 1
        row = {"epoch": epoch, **{k: v / max(steps, 1) for k, v in sums.items()}, "lr": cfg.lr,
               "skipped_batches": skipped, "wall_time_s": time.perf_counter() - t0}
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    model.eval()
    return history


def build_model(cfg: TrainConfig, dtype=torch.float32):
    torch.manual_seed(cfg.seed)
    return JemaModel(cfg.encoder_config).to(dtype)


METRIC_FIELDS = ("epoch", "total", "lcr_p", "lcr_v", "lreg_l", "lreg_h", "lr", "skipped_batches")


def train(config: TrainConfig, manifest, checkpoint_path=None, metrics_dir=None):
    """Train on the manifest's train split and return a :class:`Checkpoint`.

    When ``metrics_dir`` is given, writes ``train_metrics.csv`` (no
    timings, byte-reproducible) and ``train_log.jsonl`` (with wall time).
    """
    norm = synth.load_norm(manifest)
    enc = config.encoder_config
    data, _ = load_frames(manifest, "train", image_size=enc.image_size, seed=config.seed, norm=norm, keep_raw=config.augment)
    model = build_model(config)
    initial = full_objective(model, data, config)
    rows = []
    jsonl = None
    if metrics_dir is not None:
        Path(metrics_dir).mkdir(parents=True, exist_ok=True)
        jsonl = open(Path(metrics_dir) / "train_log.jsonl", "w")

    def on_epoch(row):
        rows.append(row)
        log.info("epoch %d total=%.6g", row["epoch"], row.get("total", float("nan")))
        if jsonl is not None:
            jsonl.write(json.dumps(row, sort_keys=True) + "\n")
            jsonl.flush()

    try:
        fit_model(model, data, config, on_epoch)
    finally:
        if jsonl is not None:
            jsonl.close()
    final = full_objective(model, data, config)
    if metrics_dir is not None:
        with open(Path(metrics_dir) / "train_metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_FIELDS)
            for label, terms in [("initial", initial)] + [(r["epoch"], r) for r in rows] + [("final", final)]:
                w.writerow([label] + [_fmt(terms.get(k, "")) for k in METRIC_FIELDS[1:]])
    meta = {
        "train_config": config.to_dict(),
        "seed": config.seed,
        "loss_kind": config.loss_kind,
        "alpha": config.alpha,
        "beta": config.beta,
        "tau": config.resolved_tau,
        "split_seed": config.seed,
        "manifest": str(manifest),
        "initial_objective": initial,
        "final_objective": final,
    }
    if checkpoint_path is not None:
        Path(checkpoint_path).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(checkpoint_path, model, norm, meta)
    return Checkpoint(model, norm, meta)


def _fmt(x):
    return f"{x:.8g}" if isinstance(x, float) else str(x)


def _resolve(checkpoint):
    if isinstance(checkpoint, Checkpoint):
        return checkpoint
    return load_checkpoint(checkpoint)


@torch.no_grad()
def predict_split(checkpoint, manifest, setting="multimodal", split="test"):
    """Normalized (targets, predictions) arrays for one evaluation setting."""
    ckpt = _resolve(checkpoint)
    model = ckpt.model.eval()
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}")
    modalities = ("on_axis", "off_axis") if setting == "multimodal" else ("on_axis",)
    seed = ckpt.meta.get("split_seed", 0)
    data, recs = load_frames(manifest, split, modalities, model.cfg.image_size, seed=seed, norm=ckpt.norm)
    dtype = model.predict_head.weight.dtype
    preds = []
    for idx in _batches(len(data), 256):
        if setting == "multimodal":
            out = model.forward_multimodal(data.on_axis[idx].to(dtype), data.off_axis[idx].to(dtype))
        else:
            out = model.forward_unimodal(data.on_axis[idx].to(dtype), Modality.ON_AXIS)
        preds.append(out.predictions)
    return data.targets.numpy().astype(np.float64), torch.cat(preds).double().numpy(), recs


@dataclass
class EvalReport:
    mse_multi: float
    mse_uni: float
    variation_multi_pct: float
    variation_uni_pct: float
    per_target: dict
    n_samples: int = 0


def mse_from_arrays(y, yhat):
    """(combined, length, height) MSE; combined is the mean of the two targets."""
    y, yhat = np.asarray(y, dtype=float), np.asarray(yhat, dtype=float)
    if len(y) == 0:
        raise ValueError("empty evaluation split")
    per = ((y - yhat) ** 2).mean(axis=0)
    return float(per.mean()), float(per[0]), float(per[1])


def evaluate(checkpoint, manifest, baseline_mse=None, split="test"):
    """Held-out MSE in the multimodal and unimodal on-axis settings.

    Variations are relative to ``baseline_mse`` (the Reg multimodal MSE);
    without one, this checkpoint's own multimodal MSE is the baseline.
    """
    ckpt = _resolve(checkpoint)
    results = {}
    n = 0
    for setting in SETTINGS:
        y, yhat, recs = predict_split(ckpt, manifest, setting, split)
        results[setting] = mse_from_arrays(y, yhat)
        n = len(recs)
    base = results["multimodal"][0] if baseline_mse is None else baseline_mse
    return EvalReport(
        mse_multi=results["multimodal"][0],
        mse_uni=results["unimodal_on_axis"][0],
        variation_multi_pct=variation_pct(base, results["multimodal"][0]),
        variation_uni_pct=variation_pct(base, results["unimodal_on_axis"][0]),
        per_target={s: results[s][1:] for s in SETTINGS},
        n_samples=n,
    )


def predict_scatter(checkpoint, manifest, setting="multimodal", split="test"):
    """Per-sample (true, predicted) length and height in pixels."""
    ckpt = _resolve(checkpoint)
    y, yhat, recs = predict_split(ckpt, manifest, setting, split)
    c = ckpt.norm
    return {
        "frame_id": [r.frame_id for r in recs],
        "length_true": y[:, 0] * c.l_max,
        "length_pred": yhat[:, 0] * c.l_max,
        "height_true": y[:, 1] * c.h_max,
        "height_pred": yhat[:, 1] * c.h_max,
    }


def variation_pct(baseline_mse, mse):
    """Percent improvement over the baseline: ``100 * (baseline - mse) / baseline``."""
    if not baseline_mse > 0:
        raise ValueError(f"baseline MSE must be positive, got {baseline_mse}")
    return 100.0 * (baseline_mse - mse) / baseline_mse


def round_half_up(x):
    return int(math.floor(x + 0.5))


TABLE_COLUMNS = ("loss", "mse_multi_e4", "mse_uni_e4", "variation_multi_pct", "variation_uni_pct")


def report_table(reports):
    """Render ``{loss_kind: EvalReport or (mse_multi, mse_uni)}`` as (csv_text, aligned_text).

    Variations are recomputed against the ``reg`` multimodal MSE and
    rounded to the nearest integer.
    """
    if "reg" not in reports:
        raise ValueError("report_table needs the 'reg' baseline")

    def pair(r):
        return (r.mse_multi, r.mse_uni) if isinstance(r, EvalReport) else (float(r[0]), float(r[1]))

    base = pair(reports["reg"])[0]
    rows = []
    for kind in LOSS_KINDS:
        if kind not in reports:
            continue
        multi, uni = pair(reports[kind])
        rows.append((TABLE_LABELS[kind], multi * 1e4, uni * 1e4,
                     round_half_up(variation_pct(base, multi)), round_half_up(variation_pct(base, uni))))
    unknown = set(reports) - set(LOSS_KINDS)
    if unknown:
        raise ValueError(f"unknown loss kinds: {sorted(unknown)}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for name, m, u, vm, vu in rows:
        w.writerow([name, f"{m:.2f}", f"{u:.2f}", vm, vu])
    header = "MSE = mean of normalized L-MSE and H-MSE (x1e-4); variation vs Reg multimodal (%)"
    lines = [header, f"{'':<12}{'Multi':>8}{'Uni':>8}{'Var.M':>8}{'Var.U':>8}"]
    for name, m, u, vm, vu in rows:
        lines.append(f"{name:<12}{m:>8.2f}{u:>8.2f}{vm:>8d}{vu:>8d}")
    return buf.getvalue(), "\n".join(lines) + "\n"
