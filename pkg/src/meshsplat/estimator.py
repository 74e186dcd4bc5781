"""scikit-learn style wrapper around the prior model.

MeshGaussianPrior(...).fit(samples) trains the conditioned texel network
on a list of TrainSample; predict maps (inputs, driving) pairs to raw
gaussian maps. Hyperparameters follow the estimator convention: stored
verbatim at __init__, all state learned by fit carries a trailing
underscore, get_params/set_params come from BaseEstimator.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .errors import ContractError
from .objectives import LossWeights
from .prior import (PriorConfig, TrainConfig, TrainSample,
                    predict_gaussian_map, train_prior)


class MeshGaussianPrior(BaseEstimator):
    """Identity prior as an estimator.

    fit(X): X is a list of TrainSample (the supervised views).
    predict(X): X is a list of TrainSample or (UVInputMaps, DrivingSignal)
    pairs; returns a list of GaussianMap.
    """

    def __init__(self, embed_dim=128, group_latent=16, hidden_layers=3,
                 hidden_width=64, max_offset=0.02, lr=1e-3, steps=200,
                 lambda_perc=0.2, lambda_d=100.0, lambda_n=0.05, seed=0,
                 renderer_mode="tiled", threads=None):
        self.embed_dim = embed_dim
        self.group_latent = group_latent
        self.hidden_layers = hidden_layers
        self.hidden_width = hidden_width
        self.max_offset = max_offset
        self.lr = lr
        self.steps = steps
        self.lambda_perc = lambda_perc
        self.lambda_d = lambda_d
        self.lambda_n = lambda_n
        self.seed = seed
        self.renderer_mode = renderer_mode
        self.threads = threads

    def _prior_config(self, n_expressions: int) -> PriorConfig:
        return PriorConfig(
            n_expressions=n_expressions, embed_dim=self.embed_dim,
            group_latent=self.group_latent,
            hidden_layers=self.hidden_layers,
            hidden_width=self.hidden_width, max_offset=self.max_offset)

    def fit(self, X, y=None):
        if not X:
            raise ContractError("fit: need at least one training sample")
        for i, sample in enumerate(X):
            if not isinstance(sample, TrainSample):
                raise ContractError(
                    f"fit: X[{i}] is not a TrainSample")
        self.config_ = self._prior_config(X[0].driving.n_expressions)
        train_cfg = TrainConfig(
            steps=self.steps, lr=self.lr, seed=self.seed,
            renderer_mode=self.renderer_mode, threads=self.threads,
            loss_weights=LossWeights(
                perceptual=self.lambda_perc,
                depth_distortion=self.lambda_d,
                normal_consistency=self.lambda_n))
        self.weights_, self.trace_ = train_prior(self.config_, list(X),
                                                 train_cfg)
        return self

    def predict(self, X):
        if not hasattr(self, "weights_"):
            raise ContractError(
                "predict: estimator is not fitted; call fit first")
        out = []
        for item in X:
            if isinstance(item, TrainSample):
                inputs, driving = item.inputs, item.driving
            else:
                inputs, driving = item
            out.append(predict_gaussian_map(self.config_, self.weights_,
                                            inputs, driving))
        return out
