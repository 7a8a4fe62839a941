"""scikit-learn style wrapper around the agent.

``X`` is an array of image pairs with shape ``(n, 2, H, W)``: channel 0 is the
fixed image and channel 1 the moving image, intensities in ``[0, 1]``.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .agent import TrainConfig, Trainer
from .warp import grid_sample_bilinear


def _pairs(X, image_size: int | None = None) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if X.ndim != 4 or X.shape[1] != 2 or X.shape[2] != X.shape[3]:
        raise ValueError(f"expected pairs shaped (n, 2, H, H), got {X.shape}")
    if image_size is not None and X.shape[2] != image_size:
        raise ValueError(f"fitted on {image_size}x{image_size} images, got {X.shape[2]}x{X.shape[3]}")
    return X


def _as_tensors(X: np.ndarray):
    t = torch.from_numpy(np.ascontiguousarray(X))
    return [(t[i, 0:1].clone(), t[i, 1:2].clone()) for i in range(t.shape[0])]


class SPACRegistration(TransformerMixin, BaseEstimator):
    """Fits a registration policy on pairs; ``transform`` returns warped moving images.

    ``predict`` returns the accumulated displacement fields ``(n, 2, H, W)``
    after ``horizon`` deterministic steps and ``score`` the mean final Dice of
    the K-means label maps.
    """

    def __init__(
        self,
        steps: int = 2000,
        horizon: int = 10,
        mode: str = "spac",
        plan_dim: int = 64,
        max_step_disp: float = 2.8,
        batch_size: int = 32,
        reg_batch: int = 16,
        tv_weight: float = 1.0,
        lr_critic: float = 3e-4,
        lr_planner: float = 1e-3,
        lr_actor: float = 1e-3,
        seed: int = 0,
    ):
        self.steps = steps
        self.horizon = horizon
        self.mode = mode
        self.plan_dim = plan_dim
        self.max_step_disp = max_step_disp
        self.batch_size = batch_size
        self.reg_batch = reg_batch
        self.tv_weight = tv_weight
        self.lr_critic = lr_critic
        self.lr_planner = lr_planner
        self.lr_actor = lr_actor
        self.seed = seed

    def fit(self, X, y=None):
        X = _pairs(X)
        params = self.get_params()
        params.pop("steps")
        config = TrainConfig(image_size=X.shape[2], **params)
        self.trainer_ = Trainer(config, _as_tensors(X))
        self.trainer_.run(self.steps)
        self.agent_ = self.trainer_.agent
        self.image_size_ = X.shape[2]
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _rollouts(self, X):
        check_is_fitted(self, "agent_")
        X = _pairs(X, self.image_size_)
        return X, [self.agent_.evaluate_policy(f, m, self.horizon) for f, m in _as_tensors(X)]

    def predict(self, X) -> np.ndarray:
        _, results = self._rollouts(X)
        return np.stack([r.final_field.numpy() for r in results])

    def transform(self, X) -> np.ndarray:
        X, results = self._rollouts(X)
        moving = torch.from_numpy(X[:, 1])
        return np.stack(
            [grid_sample_bilinear(moving[i : i + 1], r.final_field)[0].numpy() for i, r in enumerate(results)]
        )

    def score(self, X, y=None) -> float:
        _, results = self._rollouts(X)
        return float(np.mean([r.dice[-1] for r in results]))
