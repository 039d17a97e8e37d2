"""scikit-learn style wrappers so the toolkit composes with pipelines and grid search.

Images are passed as an array (or list) of shape ``(n, C, H, W)``;
transformers return 2-D ``(n, 1)`` feature columns.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import attack, model as model_lib
from .analysis import UniformityConfig, uniformity
from .errors import DataError, ShapeError


def check_images(X):
    """Validate a batch of CHW images; returns a float64 array ``(n, C, H, W)``."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected images shaped (n, C, H, W), got {arr.shape}")
    if arr.shape[0] == 0:
        raise DataError("no images given")
    if not np.all(np.isfinite(arr)):
        raise DataError("images contain non-finite values")
    return arr


class UniformityTransformer(TransformerMixin, BaseEstimator):
    """Sliding-window uniformity of each image (lower is flatter)."""

    def __init__(self, window=8, stride=4):
        self.window = window
        self.stride = stride

    def fit(self, X, y=None):
        X = check_images(X)
        self.config_ = UniformityConfig(self.window, self.stride)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        return np.array([[uniformity(img, self.config_)] for img in check_images(X)])


class DensityProbe(TransformerMixin, BaseEstimator):
    """Post-ReLU density of each image on a fixed, calibrated model."""

    def __init__(self, model=None):
        self.model = model

    def fit(self, X=None, y=None):
        if self.model is None or not self.model.calibrated:
            raise DataError("DensityProbe needs a calibrated model")
        self.model_ = self.model
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return np.array([[attack.query_density(self.model_, img)] for img in check_images(X)])


class BNCalibrator(BaseEstimator):
    """Fit BN running statistics of ``model`` on images ``X``; result in ``model_``."""

    def __init__(self, model=None, momentum=0.1, passes=3):
        self.model = model
        self.momentum = momentum
        self.passes = passes

    def fit(self, X, y=None):
        self.model_ = model_lib.calibrate(self.model, list(check_images(X)), self.momentum, self.passes)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return np.array([np.argmax(model_lib.forward(self.model_, img)[0]) for img in check_images(X)])


class UniformSampler(BaseEstimator):
    """Uniform Sampling strategy: grid-search the mean on the target, then sample.

    ``fit`` only issues density queries against the target.
    """

    def __init__(self, mu_grid=tuple(np.round(np.linspace(0, 1, 11), 2)), sigma=attack.DEFAULT_SIGMA,
                 samples_per_mu=10, seed=0):
        self.mu_grid = mu_grid
        self.sigma = sigma
        self.samples_per_mu = samples_per_mu
        self.seed = seed

    def fit(self, target, y=None):
        oracle = attack._as_oracle(target)
        self.best_mu_, self.grid_table_ = attack.grid_search_mu(
            oracle, self.mu_grid, self.sigma, self.samples_per_mu, self.seed
        )
        self.input_shape_ = oracle.input_shape
        return self

    def sample(self, n=1, seed=None):
        check_is_fitted(self, "best_mu_")
        return np.stack(attack.uniform_sampling(self.best_mu_, self.sigma, self.input_shape_, n,
                                                self.seed if seed is None else seed))


class SpongeGA(BaseEstimator):
    def __init__(self, pool_size=32, iterations=100, mutation_std=4 / 255, elite_fraction=0.25, seed=0):
        self.pool_size = pool_size
        self.iterations = iterations
        self.mutation_std = mutation_std
        self.elite_fraction = elite_fraction
        self.seed = seed

    def fit(self, target, y=None):
        cfg = attack.GaConfig(self.pool_size, self.iterations, self.mutation_std,
                              self.elite_fraction, self.seed)
        self.result_ = attack.sponge_ga(target, cfg)
        self.density_ = self.result_.density
        return self

    def sample(self):
        check_is_fitted(self, "result_")
        return self.result_.image[None]


class SpongeLBFGS(BaseEstimator):
    def __init__(self, steps=50, history_size=10, step_length=0.05, seed=0):
        self.steps = steps
        self.history_size = history_size
        self.step_length = step_length
        self.seed = seed

    def fit(self, model, y=None):
        cfg = attack.LbfgsConfig(self.steps, self.history_size, self.step_length, self.seed)
        self.result_ = attack.sponge_lbfgs(model, cfg)
        self.density_ = self.result_.density
        return self

    def sample(self):
        check_is_fitted(self, "result_")
        return self.result_.image[None]
