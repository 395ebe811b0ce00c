"""scikit-learn compatible front end for the co-learning model."""
import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .model import Modality
from .trainer import FrameData, TrainConfig, build_model, fit_model, full_objective


def _check_images(X, image_size=None):
    """Validate an image stack: (n, 2, S, S) paired, or (n, S, S) / (n, 1, S, S) on-axis only."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] not in (1, 2) or X.shape[2] != X.shape[3]:
        raise ValueError(f"expected images shaped (n, 2, S, S) or (n, S, S), got {X.shape}")
    if image_size is not None and X.shape[2] != image_size:
        raise ValueError(f"expected {image_size}x{image_size} images, got {X.shape[2]}x{X.shape[3]}")
    if not np.isfinite(X).all() or X.min() < 0 or X.max() > 1:
        raise ValueError("pixel values must be finite and in [0, 1]")
    return X


class JemaRegressor(RegressorMixin, TransformerMixin, BaseEstimator):
    """Predict normalized melt-pool (length, height) from paired images.

    ``fit(X, y, metadata)`` takes ``X`` of shape (n, 2, S, S) holding the
    on-axis and off-axis image of each frame, ``y`` of shape (n, 2) and the
    normalized process parameters ``metadata`` (n, 2) = (u_p, u_v).
    ``predict`` and ``transform`` accept paired input (multimodal) or
    on-axis images alone (unimodal).
    """

    def __init__(self, loss_kind="jema_cosine", alpha=1.0, beta=1.0, tau=None, epochs=20,
                 batch_size=32, lr=1e-4, seed=0, preset="desk"):
        self.loss_kind = loss_kind
        self.alpha = alpha
        self.beta = beta
        self.tau = tau
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.preset = preset

    def _config(self):
        return TrainConfig(
            loss_kind=self.loss_kind, alpha=self.alpha, beta=self.beta, tau=self.tau, epochs=self.epochs,
            batch_size=self.batch_size, lr=self.lr, seed=self.seed, preset=self.preset,
        )

    def fit(self, X, y, metadata=None, groups=None):
        cfg = self._config()
        X = _check_images(X, cfg.encoder_config.image_size)
        if X.shape[1] != 2:
            raise ValueError("fit needs paired on-axis and off-axis images, shape (n, 2, S, S)")
        y = check_array(y, dtype=np.float32)
        if y.shape != (X.shape[0], 2):
            raise ValueError(f"y must have shape ({X.shape[0]}, 2)")
        if metadata is None:
            if cfg.loss_kind != "reg":
                raise ValueError(f"loss_kind {cfg.loss_kind!r} needs metadata (u_p, u_v)")
            metadata = np.zeros((X.shape[0], 2), dtype=np.float32)
        metadata = check_array(metadata, dtype=np.float32)
        if metadata.shape != (X.shape[0], 2):
            raise ValueError(f"metadata must have shape ({X.shape[0]}, 2)")
        if groups is None:
            _, groups = np.unique(metadata, axis=0, return_inverse=True)
        data = FrameData(
            list(range(X.shape[0])),
            on_axis=torch.from_numpy(X[:, :1].copy()),
            off_axis=torch.from_numpy(X[:, 1:].copy()),
            metadata=torch.from_numpy(metadata),
            targets=torch.from_numpy(y),
            cells=torch.as_tensor(np.asarray(groups).ravel()),
        )
        self.model_ = build_model(cfg)
        self.initial_objective_ = full_objective(self.model_, data, cfg)
        self.history_ = fit_model(self.model_, data, cfg)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    @torch.no_grad()
    def _forward(self, X):
        check_is_fitted(self, "model_")
        X = _check_images(X, self.model_.cfg.image_size)
        t = torch.from_numpy(X)
        self.model_.eval()
        if X.shape[1] == 2:
            out = self.model_.forward_multimodal(t[:, :1], t[:, 1:])
            return out.fused_joint, out.predictions
        out = self.model_.forward_unimodal(t, Modality.ON_AXIS)
        return out.embeddings.fused, out.predictions

    def predict(self, X):
        return self._forward(X)[1].numpy().astype(np.float64)

    def transform(self, X):
        """Fused embedding (joint for paired input, on-axis only otherwise)."""
        return self._forward(X)[0].numpy().astype(np.float64)
