"""Estimator facade over the training and retrieval pipeline."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .backbone import BackboneConfig, ModelConfig, Schedule, build_model, predict_in_chunks, train
from .features import FeatureConfig, encode_pairs
from .ingest import CityDataset, TrajectoryPair
from .retrieve import LocationIndex, hit_at_k, query_many, query_topk


class NextLocPredictor(BaseEstimator):
    """Regress the next visit's coordinates, then retrieve the k nearest locations.

    ``fit`` takes a :class:`CityDataset` and trains on its ``train`` split,
    early-stopping on ``val``. ``predict``/``predict_topk``/``score`` accept
    either a dataset (all of its pairs) or a sequence of trajectory pairs
    over the fitted city's locations.
    """

    def __init__(
        self,
        M=30,
        N=6,
        d_model=64,
        layers=2,
        heads=4,
        d_ff=256,
        poi_mode="llm",
        use_time=True,
        use_duration=True,
        use_prompt=True,
        branches="both",
        freeze_mode="frozen-partial",
        lr=1e-3,
        batch_size=64,
        max_epochs=30,
        patience=5,
        max_steps=None,
        eval_every=None,
        time_budget_s=None,
        k=10,
        random_state=0,
    ):
        self.M = M
        self.N = N
        self.d_model = d_model
        self.layers = layers
        self.heads = heads
        self.d_ff = d_ff
        self.poi_mode = poi_mode
        self.use_time = use_time
        self.use_duration = use_duration
        self.use_prompt = use_prompt
        self.branches = branches
        self.freeze_mode = freeze_mode
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.max_steps = max_steps
        self.eval_every = eval_every
        self.time_budget_s = time_budget_s
        self.k = k
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        features = FeatureConfig(d_model=self.d_model, use_time=self.use_time, use_duration=self.use_duration, poi_mode=self.poi_mode)
        backbone = BackboneConfig(layers=self.layers, heads=self.heads, d_model=self.d_model, d_ff=self.d_ff, freeze_mode=self.freeze_mode)
        return ModelConfig(features=features, backbone=backbone, M=self.M, N=self.N, use_prompt=self.use_prompt, branches=self.branches)

    def fit(self, X: CityDataset, y=None):
        if not isinstance(X, CityDataset):
            raise TypeError("fit expects a CityDataset")
        if X.meta.get("M", self.M) != self.M or X.meta.get("N", self.N) != self.N:
            raise ValueError("dataset window lengths differ from the estimator's M and N")
        if y is not None:
            raise ValueError("targets come from the dataset's trajectory pairs; pass y=None")
        config = self._model_config()
        schedule = Schedule(
            lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience,
            max_steps=self.max_steps, eval_every=self.eval_every, time_budget_s=self.time_budget_s,
        )
        state = build_model(config, len(X.categories), seed=self.random_state, categories=X.categories)
        val = encode_pairs(X, X.split["val"]) if len(X.split["val"]) else None
        result = train(state, encode_pairs(X, X.split["train"]), val, schedule, seed=self.random_state)
        self.state_ = replace(result.state, norm_stats=X.norm_stats, dur_bounds=X.dur_bounds)
        self.dataset_ = X
        self.index_ = LocationIndex(X.centers, X.location_ids)
        self.train_loss_ = list(result.train_loss)
        self.val_loss_ = list(result.val_loss)
        self.n_steps_ = result.steps
        return self

    def _encode(self, X):
        check_is_fitted(self, "state_")
        if isinstance(X, CityDataset):
            ds = X
        else:
            pairs = list(X)
            if not all(isinstance(p, TrajectoryPair) for p in pairs):
                raise TypeError("X must be a CityDataset or a sequence of TrajectoryPair")
            ds = replace(self.dataset_, pairs=pairs, split={"all": np.arange(len(pairs))})
        return ds, encode_pairs(ds, None, self.state_.norm_stats, self.state_.dur_bounds)

    def predict(self, X) -> np.ndarray:
        """Predicted Mercator coordinates, shape (n_pairs, 2)."""
        _, batch = self._encode(X)
        return predict_in_chunks(self.state_, batch)

    def predict_topk(self, X, k=None) -> np.ndarray:
        """Location ids ranked nearest-first, shape (n_pairs, k)."""
        k = self.k if k is None else k
        if k > len(self.index_):
            raise ValueError(f"k={k} exceeds the {len(self.index_)} indexed locations")
        return np.array(query_many(self.index_, self.predict(X), k), dtype=np.int64).reshape(-1, k)

    def predict_one(self, pair: TrajectoryPair, k=None):
        """Single pair -> Prediction (coordinates plus ranked (id, meters))."""
        xy = self.predict([pair])[0]
        return query_topk(self.index_, xy, self.k if k is None else k)

    def score(self, X, y=None) -> float:
        """Hit@k (with the estimator's ``k``) over every pair of ``X``."""
        ds, batch = self._encode(X)
        ranked = self.predict_topk(X)
        truth = ds.location_ids[batch.target_row] if y is None else np.asarray(y)
        return hit_at_k(ranked.tolist(), truth.tolist(), self.k)
