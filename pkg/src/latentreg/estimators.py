"""scikit-learn style wrappers around the autoencoder and the registration loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._validation import ValidationError, check_cloud, check_views
from .degrade import DegradationModel
from .descriptor import (DescriptorModel, TrainConfig, decode, encode_batch, evaluate_reconstruction,
                         load_model, train)
from .descriptor import _pad
from .register import RegConfig, register

__all__ = ["LatentAutoencoder", "MultiviewRegistration"]


def _stack_clouds(X) -> np.ndarray:
    """Stack clouds of possibly different sizes by repeating points."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    clouds = [check_cloud(x) for x in X]
    if not clouds:
        raise ValidationError("no clouds given")
    return np.stack([_pad(c, max(len(c) for c in clouds)) for c in clouds])


class LatentAutoencoder(TransformerMixin, BaseEstimator):
    """PointNet-style autoencoder trained to restore clean shapes from degraded ones.

    ``fit`` trains on the built-in shape corpus (``shapes``); ``transform``
    encodes clouds to latent vectors and ``inverse_transform`` decodes them.
    Pass ``model_path`` to load a stored model instead of training.
    """

    def __init__(self, latent_dim=128, k_out=512, n_points=512, encoder_widths=(32, 64),
                 decoder_widths=(512, 1024), epochs=40, batch_size=32, samples_per_epoch=2048,
                 lr=1e-3, weight_decay=1e-2, shapes=TrainConfig.shapes, shape_variation=0.15,
                 noise_max=0.03, visibility=(0.7, 1.0), seed=0, time_budget=None,
                 model_path=None):
        self.latent_dim = latent_dim
        self.k_out = k_out
        self.n_points = n_points
        self.encoder_widths = encoder_widths
        self.decoder_widths = decoder_widths
        self.epochs = epochs
        self.batch_size = batch_size
        self.samples_per_epoch = samples_per_epoch
        self.lr = lr
        self.weight_decay = weight_decay
        self.shapes = shapes
        self.shape_variation = shape_variation
        self.noise_max = noise_max
        self.visibility = visibility
        self.seed = seed
        self.time_budget = time_budget
        self.model_path = model_path

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, samples_per_epoch=self.samples_per_epoch,
            lr=self.lr, weight_decay=self.weight_decay, latent_dim=self.latent_dim,
            k_out=self.k_out, n_points=self.n_points, encoder_widths=self.encoder_widths,
            decoder_widths=self.decoder_widths, shapes=self.shapes,
            shape_variation=self.shape_variation, noise_max=self.noise_max,
            visibility=self.visibility, seed=self.seed)

    def fit(self, X=None, y=None):
        """Train (or load) the model. ``X`` is unused: training data are synthesized."""
        if self.model_path is not None:
            self.model_ = load_model(self.model_path)
            self.history_ = []
            self.validation_chamfer_ = float("nan")
        else:
            result = train(self.train_config(), time_budget=self.time_budget)
            self.model_ = result.model
            self.history_ = result.history
            self.validation_chamfer_ = result.validation
        return self

    @classmethod
    def from_model(cls, model: DescriptorModel) -> LatentAutoencoder:
        est = cls(latent_dim=model.latent_dim, k_out=model.k_out)
        est.model_ = model
        est.history_ = []
        est.validation_chamfer_ = float("nan")
        return est

    def _model(self) -> DescriptorModel:
        if not hasattr(self, "model_"):
            raise NotFittedError("LatentAutoencoder is not fitted yet")
        return self.model_

    def transform(self, X) -> np.ndarray:
        """Latent codes ``(n, latent_dim)`` for a cloud or a sequence of clouds."""
        return encode_batch(self._model(), _stack_clouds(X), dtype=np.float64)

    def inverse_transform(self, Z) -> np.ndarray:
        """Decoded clouds ``(n, k_out, 3)``."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return np.stack([decode(self._model(), z) for z in Z])

    def score(self, X, y=None) -> float:
        """Negative mean Chamfer distance between ``X`` (or ``y``) and its reconstruction."""
        src = _stack_clouds(X)
        tgt = src if y is None else _stack_clouds(y)
        return -evaluate_reconstruction(self._model(), src, tgt)


class MultiviewRegistration(BaseEstimator):
    """Estimate a shared template and one rigid pose per view.

    After ``fit(views)``: ``template_`` (input units), ``poses_`` (template to
    view), ``z_`` and ``report_``. ``transform(views)`` moves every view into
    the template frame with the fitted poses.
    """

    def __init__(self, model=None, sigma=(0.0, 0.0, 0.0), v=1.0, o=0.0, grid_size=5000,
                 grid_neighbors=64, top_m=4, escape_deg=15.0, reg_weight=1e-2,
                 density_radius=0.1, lr=1e-2, patience_lr=10, patience_stop=100,
                 max_steps=2000, max_rounds=20, threads=1, seed=0):
        self.model = model
        self.sigma = sigma
        self.v = v
        self.o = o
        self.grid_size = grid_size
        self.grid_neighbors = grid_neighbors
        self.top_m = top_m
        self.escape_deg = escape_deg
        self.reg_weight = reg_weight
        self.density_radius = density_radius
        self.lr = lr
        self.patience_lr = patience_lr
        self.patience_stop = patience_stop
        self.max_steps = max_steps
        self.max_rounds = max_rounds
        self.threads = threads
        self.seed = seed

    def _descriptor(self) -> DescriptorModel:
        m = self.model
        if isinstance(m, DescriptorModel):
            return m
        if isinstance(m, LatentAutoencoder):
            return m._model()
        if isinstance(m, str):
            return load_model(m)
        raise ValidationError("model must be a DescriptorModel, a fitted LatentAutoencoder or a path")

    def degradation(self) -> DegradationModel:
        s = np.asarray(self.sigma, dtype=float)
        if s.shape == (3,):
            return DegradationModel.from_axes(*s, v=self.v, o=self.o)
        return DegradationModel(s.reshape(3, 3), self.v, self.o)

    def reg_config(self) -> RegConfig:
        return RegConfig(grid_size=self.grid_size, grid_neighbors=self.grid_neighbors,
                         top_m=self.top_m, escape_deg=self.escape_deg, reg_weight=self.reg_weight,
                         density_radius=self.density_radius, lr=self.lr,
                         patience_lr=self.patience_lr, patience_stop=self.patience_stop,
                         max_steps=self.max_steps, max_rounds=self.max_rounds, threads=self.threads, seed=self.seed)

    def fit(self, X, y=None):
        views = check_views(X, min_views=1)
        self.z_, self.poses_, self.report_ = register(views, self._descriptor(), self.degradation(),
                                                      self.reg_config())
        self.template_ = self.report_.template
        return self

    def transform(self, X) -> list[np.ndarray]:
        if not hasattr(self, "poses_"):
            raise NotFittedError("MultiviewRegistration is not fitted yet")
        views = check_views(X)
        if len(views) != len(self.poses_):
            raise ValidationError(f"fitted on {len(self.poses_)} views, got {len(views)}")
        return [p.inverse().apply(x) for p, x in zip(self.poses_, views)]

    def fit_transform(self, X, y=None):
        return self.fit(X).transform(X)
