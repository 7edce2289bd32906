"""scikit-learn style wrappers around scoring, tiering and federated training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .clustering import cluster_devices
from .data import Dataset, partition_noniid
from .models import build_family, predict_proba
from .profiles import (PROFILE_FEATURES, ResourceProfile, ScoringWeights, Workload, generate_fleet,
                       normalize_features, raw_features, run_benchmark)
from .simulator import SimConfig, run_experiment, run_fedavg
from .training import TrainConfig


class CapabilityScorer(TransformerMixin, BaseEstimator):
    """Min-max normalise device profiles (plus benchmark times) and score them.

    ``X`` has one row per device with the eight profile columns in
    ``PROFILE_FEATURES`` order.
    """

    def __init__(self, compute=0.5, memory=0.3, network=0.2, include_benchmark=True, matmul_dim=64):
        self.compute = compute
        self.memory = memory
        self.network = network
        self.include_benchmark = include_benchmark
        self.matmul_dim = matmul_dim

    def _raw(self, X):
        X = check_array(X, ensure_min_samples=1)
        if X.shape[1] != len(PROFILE_FEATURES):
            raise ValueError(f"expected {len(PROFILE_FEATURES)} profile columns, got {X.shape[1]}")
        workload = Workload(matmul_dim=self.matmul_dim)
        rows = []
        for row in X:
            profile = ResourceProfile(*row[:2], int(row[2]), *row[3:])
            bench = run_benchmark(profile, workload) if self.include_benchmark else None
            rows.append(raw_features(profile, bench))
        return np.array(rows)

    def fit(self, X, y=None):
        self.weights_ = ScoringWeights.from_groups(self.compute, self.memory, self.network,
                                                   self.include_benchmark)
        raw = self._raw(X)
        self.bounds_ = (raw.min(axis=0), raw.max(axis=0))
        self.n_features_in_ = len(PROFILE_FEATURES)
        return self

    def transform(self, X):
        check_is_fitted(self, "bounds_")
        return normalize_features(self._raw(X), self.weights_.lower_is_better, self.bounds_)

    def score_samples(self, X):
        return self.transform(X) @ self.weights_.weights


class TierKMeans(ClusterMixin, BaseEstimator):
    """k-means++ / Lloyd with minimum-size repair and High/Mid/Low ranking."""

    def __init__(self, n_clusters=3, n_min=2, random_state=0, max_iter=100, tol=1e-6):
        self.n_clusters = n_clusters
        self.n_min = n_min
        self.random_state = random_state
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None, scores=None):
        X = check_array(X)
        scores = X.mean(axis=1) if scores is None else np.asarray(scores, dtype=float)
        assignment, tiers = cluster_devices(X, scores, self.n_clusters, self.n_min, self.random_state,
                                            self.max_iter, self.tol)
        self.labels_ = assignment.labels
        self.cluster_centers_ = assignment.centroids
        self.inertia_ = assignment.objective
        self.n_iter_ = assignment.iterations_used
        self.tiers_ = tiers
        self.assignment_ = assignment
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X)
        d2 = ((X[:, None, :] - self.cluster_centers_[None]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)


class ASAFederatedClassifier(ClassifierMixin, BaseEstimator):
    """Federated MLP trained over a simulated fleet; ``method`` picks the algorithm."""

    def __init__(self, method="asa", n_clients=10, hidden=((16,), (32,), (64,)), rounds=20, lr=0.1,
                 batch_size=32, local_epochs=1, alpha=0.5, k=3, prox_mu=0.01, random_state=0):
        self.method = method
        self.n_clients = n_clients
        self.hidden = hidden
        self.rounds = rounds
        self.lr = lr
        self.batch_size = batch_size
        self.local_epochs = local_epochs
        self.alpha = alpha
        self.k = k
        self.prox_mu = prox_mu
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        train = Dataset(X, encoded, len(self.classes_))
        seed = self.random_state
        fleet = generate_fleet(self.n_clients, seed=seed)
        shards = partition_noniid(encoded, self.n_clients, self.alpha, seed)
        self.family_ = build_family(X.shape[1], len(self.classes_), self.hidden)
        train_cfg = TrainConfig(self.lr, "constant", self.batch_size, self.local_epochs)
        base = dict(rounds=self.rounds, k=self.k, seed=seed, train=train_cfg, early_stop=False)
        if self.method == "asa":
            result = run_experiment(SimConfig(**base), fleet, self.family_, train, shards)
        elif self.method == "hierfl":
            result = run_experiment(SimConfig(**base, force_rung=2, adaptive=False), fleet, self.family_,
                                    train, shards)
        elif self.method in ("fedavg", "fedprox"):
            mu = self.prox_mu if self.method == "fedprox" else None
            result = run_fedavg(SimConfig(**base), fleet, self.family_, train, shards, prox_mu=mu)
        else:
            raise ValueError(f"unknown method {self.method!r}")
        self.params_ = result.model.params
        self.logs_ = result.logs
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        return predict_proba(self.family_.archs[2], self.params_, X)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
