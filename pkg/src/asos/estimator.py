"""scikit-learn style front end for the whole pipeline."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .activation_space import SensitivityIndex, activation_maps, build_grid, collect_activations, \
    estimate_sensitivities
from .maps import IIOSConfig, asos_map, iios_map
from .model import ModelConfig, load_checkpoint
from .training import TrainConfig, predict_scores, train
from .validation import check_images, check_labels


class ASOS(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Train the encoder-decoder + classifier, then map activation space to sensitivities.

    ``fit`` trains the network on raw-count tiles (n, h, w, c) with labels 0
    (anthropogenic) / 1 (wild) and estimates the hypercube sensitivities from
    the correctly classified training tiles. ``predict_proba`` scores tiles;
    ``transform`` returns per-pixel sensitivity maps (NaN = undetermined) for
    images of any size divisible by 16.
    """

    def __init__(self, n_m=3, widths=(16, 32, 64, 128), bottleneck=640, batch_size=32, epochs=5,
                 max_lr=1e-2, weight_decay=1e-4, cutmix_prob=0.8, cutmix_max_fraction=0.5,
                 occlusion_rate=(0.2, 0.5), rotations=(90, 180, 270), l_cube=0.1, density_multiplier=2.0,
                 density_basis="occupied", min_occluded=10, frame=10, fraction=1e-3, random_state=0):
        self.n_m = n_m
        self.widths = widths
        self.bottleneck = bottleneck
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_lr = max_lr
        self.weight_decay = weight_decay
        self.cutmix_prob = cutmix_prob
        self.cutmix_max_fraction = cutmix_max_fraction
        self.occlusion_rate = occlusion_rate
        self.rotations = rotations
        self.l_cube = l_cube
        self.density_multiplier = density_multiplier
        self.density_basis = density_basis
        self.min_occluded = min_occluded
        self.frame = frame
        self.fraction = fraction
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            batch_size=self.batch_size, epochs=self.epochs, max_lr=self.max_lr,
            weight_decay=self.weight_decay, cutmix_prob=self.cutmix_prob,
            cutmix_max_fraction=self.cutmix_max_fraction, occlusion_rate=self.occlusion_rate,
            rotations=self.rotations, seed=self.random_state or 0,
        )

    def fit(self, X, y, X_val=None, y_val=None, ids=None):
        X = check_images(X, divisible=True, square=True)
        y = check_labels(y, len(X))
        if X_val is not None:
            X_val = check_images(X_val, n_channels=X.shape[3])
            y_val = check_labels(y_val, len(X_val))
        self.model_config_ = ModelConfig(n_in=X.shape[3], n_m=self.n_m, widths=self.widths,
                                         bottleneck=self.bottleneck, tile_size=X.shape[1])
        self.model_, self.history_ = train(X, y, self._train_config(), model_config=self.model_config_,
                                           X_val=X_val, y_val=y_val)
        self._set_fitted_attrs()
        return self.fit_sensitivities(X, y, ids)

    def fit_sensitivities(self, X, y, ids=None):
        """(Re)build the sensitivity index from training tiles with the current network."""
        check_is_fitted(self, "model_")
        X = check_images(X, n_channels=self.n_features_in_)
        y = check_labels(y, len(X))
        rng = np.random.default_rng(self.random_state)
        cloud = collect_activations(self.model_, X, y, ids, frame=self.frame, fraction=self.fraction, rng=rng)
        index = build_grid(cloud, self.l_cube, self.density_multiplier, self.density_basis, self.min_occluded)
        self.index_ = estimate_sensitivities(self.model_.classifier, cloud.maps, index, baseline=cloud.scores,
                                             ids=cloud.sample_ids)
        self.n_correct_ = len(cloud.sample_ids)
        self.n_points_ = len(cloud)
        return self

    def _set_fitted_attrs(self):
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = self.model_.config.n_in

    @classmethod
    def from_checkpoint(cls, checkpoint, index=None):
        model, _ = load_checkpoint(checkpoint)
        cfg = model.config
        est = cls(n_m=cfg.n_m, widths=cfg.widths, bottleneck=cfg.bottleneck)
        est.model_, est.model_config_ = model, cfg
        est._set_fitted_attrs()
        if index is not None:
            est.index_ = index if isinstance(index, SensitivityIndex) else SensitivityIndex.load(index)
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, n_channels=self.n_features_in_)
        p = predict_scores(self.model_, X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def activation_maps(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, n_channels=self.n_features_in_, divisible=True)
        return activation_maps(self.model_, X)[0]

    def sensitivity_maps(self, X):
        """One ``SensitivityMap`` per image; images may differ in size."""
        check_is_fitted(self, ["model_", "index_"])
        images = check_images(X, n_channels=self.n_features_in_, divisible=True, same_shape=False)
        return [asos_map(self.model_.encoder_decoder, self.index_, img) for img in images]

    def transform(self, X):
        """Sensitivity values (n, h, w), NaN where undetermined."""
        return np.stack([m.values for m in self.sensitivity_maps(X)])


class IIOS(TransformerMixin, BaseEstimator):
    """Input-image occlusion sensitivity using a fitted ``ASOS`` estimator's network."""

    def __init__(self, estimator=None, l_patch=8, l_stride=4):
        self.estimator = estimator
        self.l_patch = l_patch
        self.l_stride = l_stride

    def fit(self, X=None, y=None):
        if self.estimator is None:
            raise ValueError("IIOS needs a fitted ASOS estimator")
        check_is_fitted(self.estimator, "model_")
        self.model_ = self.estimator.model_
        self.n_features_in_ = self.model_.config.n_in
        return self

    def sensitivity_maps(self, X):
        check_is_fitted(self, "model_")
        images = check_images(X, n_channels=self.n_features_in_, same_shape=False)
        cfg = IIOSConfig(self.l_patch, self.l_stride)
        return [iios_map(self.model_, img, cfg) for img in images]

    def transform(self, X):
        return np.stack([m.values for m in self.sensitivity_maps(X)])
