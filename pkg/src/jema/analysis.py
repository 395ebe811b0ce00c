"""Embedding inspection: PCA, t-SNE, linear probes, component importance, attention overlays."""
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from skimage.transform import resize
from sklearn.manifold import TSNE
from sklearn.utils.validation import check_array

__all__ = [
    "PCAResult",
    "ProbeResult",
    "ComponentImportance",
    "pca_fit",
    "tsne_embed",
    "linear_probe",
    "probe_r2",
    "component_importance",
    "attention_overlay",
    "collect_embeddings",
]


@dataclass
class PCAResult:
    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance_ratio: np.ndarray  # (k,)
    all_ratios: np.ndarray  # every component, for threshold sweeps

    @property
    def n_components(self):
        return self.components.shape[0]

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.mean) @ self.components.T

    def inverse_transform(self, Z):
        return np.asarray(Z, dtype=float) @ self.components + self.mean


def pca_fit(embeddings, mode="two_components", threshold=0.95, n_components=None):
    """Principal axes of the centred embeddings.

    ``mode="two_components"`` keeps two axes; ``"variance_95"`` keeps the
    fewest axes whose cumulative explained variance reaches ``threshold``;
    ``"all"`` keeps every axis.
    """
    X = check_array(embeddings, dtype=np.float64)
    n, d = X.shape
    if n <= 1:
        raise ValueError("PCA needs at least 2 samples")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    var = s**2
    total = var.sum()
    ratios = var / total if total > 0 else np.zeros_like(var)
    if n_components is not None:
        k = int(n_components)
    elif mode == "two_components":
        k = 2
    elif mode == "variance_95":
        if not 0 < threshold <= 1:
            raise ValueError("threshold must be in (0, 1]")
        # small slack so a cumulative sum of exactly 1 still reaches threshold 1
        k = int(np.searchsorted(np.cumsum(ratios), threshold - 1e-12) + 1)
    elif mode == "all":
        k = len(s)
    else:
        raise ValueError(f"unknown PCA mode {mode!r}")
    k = max(1, min(k, len(s)))
    if n <= k and mode != "all":
        raise ValueError(f"need more samples ({n}) than retained components ({k})")
    return PCAResult(mean, vt[:k], ratios[:k], ratios)


def tsne_embed(embeddings, seed=0, perplexity=30.0):
    """2-D t-SNE layout. Perplexity is capped below (N - 1) / 3 for small N."""
    X = check_array(embeddings, dtype=np.float64)
    if X.shape[0] < 10:
        raise ValueError("t-SNE needs at least 10 samples")
    perplexity = min(perplexity, (X.shape[0] - 1) / 3.0)
    return TSNE(n_components=2, perplexity=perplexity, random_state=seed, init="pca", learning_rate="auto").fit_transform(X)


@dataclass
class ProbeResult:
    coefficients: np.ndarray
    intercept: float
    r2: float
    singular: bool = False

    def predict(self, features):
        return np.asarray(features, dtype=float) @ self.coefficients + self.intercept


def _r2(y, yhat):
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float(((y - yhat) ** 2).sum())
    if ss_tot == 0:
        return 0.0
    return 1.0 - ss_res / ss_tot


def linear_probe(features, target):
    """Ordinary least squares with intercept; r2 is in-sample.

    Rank-deficient designs (including fewer samples than features) fall
    back to the minimum-norm solution and set ``singular``; their in-sample
    r2 is optimistic, so judge them on held-out data.
    """
    X = check_array(features, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64).ravel()
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"features have {X.shape[0]} rows but target has {y.shape[0]}")
    n, k = X.shape
    if n < 2:
        raise ValueError("probe needs at least 2 samples")
    xm, ym = X.mean(axis=0), y.mean()
    Xc, yc = X - xm, y - ym
    coef, _, rank, _ = np.linalg.lstsq(Xc, yc, rcond=None)
    intercept = float(ym - xm @ coef)
    return ProbeResult(coef, intercept, _r2(y, X @ coef + intercept), singular=bool(rank < k or n <= k))


def probe_r2(result: ProbeResult, features, target):
    """r2 of a fitted probe on other (e.g. held-out) data."""
    y = np.asarray(target, dtype=float).ravel()
    return _r2(y, result.predict(features))


@dataclass
class ComponentImportance:
    target: str
    per_component_weight: np.ndarray


def component_importance(pca_features, targets):
    """Absolute standardized OLS coefficients of each component, per target.

    ``targets`` maps a name (e.g. ``"P"``) to a vector.
    """
    Z = check_array(pca_features, dtype=np.float64)
    sx = Z.std(axis=0)
    out = {}
    for name, y in targets.items():
        y = np.asarray(y, dtype=float).ravel()
        probe = linear_probe(Z, y)
        sy = y.std()
        w = np.abs(probe.coefficients * sx) / sy if sy > 0 else np.zeros(Z.shape[1])
        out[name] = ComponentImportance(name, w)
    return out


def attention_overlay(image, attn, head_reduce="mean", alpha=0.5):
    """Heatmap of CLS attention over patches, upsampled and blended onto ``image``.

    Returns ``(heatmap, overlay)``, both the size of ``image`` and in [0, 1].
    A flat attention map becomes a constant 0.5 heatmap.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    if img.ndim != 2:
        raise ValueError(f"expected a grayscale image, got shape {img.shape}")
    A = attn.detach().cpu().numpy() if isinstance(attn, torch.Tensor) else np.asarray(attn, dtype=float)
    if A.ndim == 2:
        A = A[None]
    if A.ndim != 3 or A.shape[1] != A.shape[2]:
        raise ValueError(f"attention must be (heads, T, T), got {A.shape}")
    n_patch = A.shape[-1] - 1
    g = int(round(np.sqrt(n_patch)))
    if g * g != n_patch or g == 0:
        raise ValueError(f"{n_patch} patch tokens do not form a square grid")
    cls_row = A[:, 0, 1:]
    if head_reduce == "mean":
        cls_row = cls_row.mean(axis=0)
    elif head_reduce == "max":
        cls_row = cls_row.max(axis=0)
    else:
        raise ValueError("head_reduce must be 'mean' or 'max'")
    grid = cls_row.reshape(g, g)
    up = resize(grid, img.shape, order=1, mode="edge", anti_aliasing=False)
    lo, hi = up.min(), up.max()
    heat = np.full(img.shape, 0.5) if np.isclose(hi, lo, rtol=0, atol=1e-12) else (up - lo) / (hi - lo)
    overlay = np.clip((1 - alpha) * img + alpha * heat, 0.0, 1.0)
    return heat, overlay


@torch.no_grad()
def collect_embeddings(model, data, modality):
    """Unimodal embeddings for every frame in ``data`` as numpy arrays."""
    imgs = getattr(data, modality)
    dtype = model.predict_head.weight.dtype
    out = [model.forward_unimodal(imgs[i : i + 256].to(dtype), modality).embeddings for i in range(0, len(data), 256)]
    return {
        "s_p": torch.cat([o.s_p for o in out]).double().numpy(),
        "s_v": torch.cat([o.s_v for o in out]).double().numpy(),
        "fused": torch.cat([o.fused for o in out]).double().numpy(),
    }


PROBE_SPECS = (("P", "s_p", 0, "metadata"), ("v", "s_v", 1, "metadata"), ("L", "fused", 0, "targets"), ("H", "fused", 1, "targets"))


def run_probes(model, train_data, test_data, modalities=("on_axis", "off_axis")):
    """Fit probes on train embeddings, report in-sample and held-out r2 per modality."""
    rows = []
    for modality in modalities:
        tr = collect_embeddings(model, train_data, modality)
        te = collect_embeddings(model, test_data, modality)
        for name, key, col, source in PROBE_SPECS:
            y_tr = getattr(train_data, source)[:, col].double().numpy()
            y_te = getattr(test_data, source)[:, col].double().numpy()
            res = linear_probe(tr[key], y_tr)
            rows.append({
                "target": name,
                "modality": modality,
                "embedding": key,
                "r2": res.r2,
                "r2_heldout": probe_r2(res, te[key], y_te),
                "singular": res.singular,
                "intercept": res.intercept,
                "coefficients": res.coefficients,
            })
    return rows


def write_probe_csv(path, rows):
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target", "modality", "embedding", "r2", "r2_heldout", "singular", "intercept", "coefficients"])
        for r in rows:
            coefs = " ".join(f"{c:.6g}" for c in r["coefficients"])
            w.writerow([r["target"], r["modality"], r["embedding"], f"{r['r2']:.6f}", f"{r['r2_heldout']:.6f}",
                        int(r["singular"]), f"{r['intercept']:.6g}", coefs])


def write_importance_csv(path, by_modality):
    """``by_modality`` maps a modality name to the output of :func:`component_importance`."""
    k = max(len(imp.per_component_weight) for imps in by_modality.values() for imp in imps.values())
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target", "modality"] + [f"pc{i + 1}" for i in range(k)])
        for modality, imps in by_modality.items():
            for name, imp in imps.items():
                w.writerow([name, modality] + [f"{x:.6f}" for x in imp.per_component_weight])
