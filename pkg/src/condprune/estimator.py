"""scikit-learn style front end: ``fit`` trains one conditional policy, ``transform`` prunes at any rate."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import driver
from .graph import ModelGraph
from .inference import LabeledDataset
from .validation import check_dataset, check_model, check_rate, check_support


class ConditionalChannelPruner(BaseEstimator):
    """Channel pruner conditioned on the target cost-reduction rate.

    ``fit(model, dataset)`` trains a single policy over ``beta_support``;
    afterwards ``transform(model, beta)`` returns the pruned model for any
    feasible ``beta`` without further training.

    Parameters mirror :class:`condprune.driver.TrainConfig`; ``random_state``
    seeds everything, ``n_jobs`` parallelises episode generation.
    """

    def __init__(self, beta_support=(0.3, 0.5, 0.7), alpha_max=0.8, episodes=400, warmup_episodes=100,
                 lr_actor=1e-4, lr_critic=1e-3, discount=1.0, tau=0.01, sigma=0.5, sigma_decay=0.99,
                 buffer_size=2000, batch_size=64, updates_per_episode=20, action_reg=0.05, hidden=64, n_jobs=1,
                 random_state=0):
        self.beta_support = beta_support
        self.alpha_max = alpha_max
        self.episodes = episodes
        self.warmup_episodes = warmup_episodes
        self.lr_actor = lr_actor
        self.lr_critic = lr_critic
        self.discount = discount
        self.tau = tau
        self.sigma = sigma
        self.sigma_decay = sigma_decay
        self.buffer_size = buffer_size
        self.batch_size = batch_size
        self.updates_per_episode = updates_per_episode
        self.action_reg = action_reg
        self.hidden = hidden
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _config(self) -> driver.TrainConfig:
        return driver.TrainConfig(
            beta_support=check_support(self.beta_support),
            alpha_max=self.alpha_max,
            episodes=self.episodes,
            warmup_episodes=self.warmup_episodes,
            seed=int(self.random_state),
            lr_actor=self.lr_actor,
            lr_critic=self.lr_critic,
            discount=self.discount,
            tau=self.tau,
            sigma=self.sigma,
            sigma_decay=self.sigma_decay,
            buffer_size=self.buffer_size,
            batch_size=self.batch_size,
            updates_per_episode=self.updates_per_episode,
            action_reg=self.action_reg,
            hidden=self.hidden,
            jobs=self.n_jobs,
        )

    def fit(self, X: ModelGraph, y: LabeledDataset):
        model = check_model(X)
        dataset = check_dataset(model, y)
        config = self._config()
        history: list[dict] = []
        self.policy_ = driver.train(model, dataset, config, log=history.append)
        self.model_ = model
        self.dataset_ = dataset
        self.history_ = history
        self.config_ = config
        return self

    def _resolve(self, X):
        check_is_fitted(self, "policy_")
        if X is None:
            return self.model_
        return check_model(X)

    def compress(self, beta, X: ModelGraph | None = None, dataset: LabeledDataset | None = None):
        """``(pruned_model, CompressionReport)`` at rate ``beta``."""
        model = self._resolve(X)
        dataset = self.dataset_ if dataset is None else check_dataset(model, dataset)
        return driver.compress(model, self.policy_, check_rate(beta), dataset)

    def transform(self, X: ModelGraph | None = None, beta=None) -> ModelGraph:
        if beta is None:
            beta = self.config_.beta_support[-1] if hasattr(self, "config_") else None
        return self.compress(beta, X)[0]

    def score(self, X: ModelGraph | None = None, y: LabeledDataset | None = None, beta=None) -> float:
        """Accuracy of the pruned model; averaged over the training support when ``beta`` is None."""
        check_is_fitted(self, "policy_")
        betas = self.config_.beta_support if beta is None else (check_rate(beta),)
        return float(np.mean([self.compress(b, X, y)[1].accuracy for b in betas]))
