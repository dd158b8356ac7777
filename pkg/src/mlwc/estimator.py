"""scikit-learn style wrapper: fit on base classes, imprint novel classes, predict over both."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .backbone import BackboneConfig
from .data import LabeledDataset
from .evaluation import CombinedModel, ExtendOptions, branches_of, combine, novel_weights_from_features
from .heads import LEVELS, HeadConfig
from .losses import LossConfig
from .model import MultiLevelNet
from .trainer import TrainConfig, freeze_weights, train_stage1, train_stage2


def check_images(X, channels: int | None = None) -> np.ndarray:
    """Validate an image batch of shape (n, C, H, W); (n, H, W) is read as one channel."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, C, H, W), got {X.shape}")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[1]}")
    return X


def _encode(y, classes) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([index[v] for v in y], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"unknown label {exc.args[0]!r}") from None


class MLWCClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Multi-level cosine classifier with weight-centric fine-tuning.

    ``fit`` trains on base classes. ``imprint`` attaches novel classes from a
    handful of examples each, after which ``predict`` ranges over base and
    novel labels together. ``transform`` returns the concatenated per-branch
    unit features.
    """

    def __init__(
        self,
        levels=LEVELS,
        embed_dim=64,
        stage_channels=(16, 32, 64),
        weight_centric=True,
        stage1_epochs=40,
        stage2_epochs=20,
        stage1_lr=0.1,
        lr_step=15,
        stage2_lr=0.01,
        batch_size=32,
        weight_decay=1e-4,
        random_state=0,
    ):
        self.levels = levels
        self.embed_dim = embed_dim
        self.stage_channels = stage_channels
        self.weight_centric = weight_centric
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.stage1_lr = stage1_lr
        self.lr_step = lr_step
        self.stage2_lr = stage2_lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            stage1_lr=self.stage1_lr,
            lr_step=self.lr_step,
            stage1_epochs=self.stage1_epochs,
            stage2_lr=self.stage2_lr,
            stage2_epochs=self.stage2_epochs,
            plateau_stop=False,
            seed=int(self.random_state),
        )

    def fit(self, X, y):
        X = check_images(X)
        check_classification_targets(y)
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        levels = tuple(self.levels)
        if not levels or any(lv not in LEVELS for lv in levels):
            raise ValueError(f"levels must be drawn from {LEVELS}")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        data = LabeledDataset(X, _encode(y, self.classes_), tuple(map(str, self.classes_)), "base")
        backbone = BackboneConfig(stage_channels=tuple(self.stage_channels), in_channels=X.shape[1])
        heads = HeadConfig(embed_dim=self.embed_dim)
        losses = LossConfig(weight_decay=self.weight_decay)
        cfg = self._train_config()
        net = MultiLevelNet.init(backbone, heads, len(self.classes_), np.random.default_rng(cfg.seed), data.label_space)
        net, log_ = train_stage1(net, data, cfg, losses)
        if self.weight_centric:
            net, log_ = train_stage2(net, freeze_weights(net), data, cfg, losses, log_=log_)
        self.net_ = net
        self.log_ = log_
        self.model_ = combine(branches_of(net, levels))
        self.base_classes_ = self.classes_
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.transform(check_images(X, self.net_.backbone.in_channels))

    def imprint(self, X, y, generator: str = "avg"):
        """Add one classifier column per new label in ``y``, averaged from its examples.

        Every novel label needs the same number of examples. Calling again
        replaces earlier novel classes.
        """
        check_is_fitted(self, "model_")
        X = check_images(X, self.net_.backbone.in_channels)
        check_classification_targets(y)
        y = np.asarray(y)
        novel = np.unique(y)
        clash = np.intersect1d(novel, self.base_classes_)
        if len(clash):
            raise ValueError(f"labels {clash.tolist()} are base classes")
        counts = {c: int(np.sum(y == c)) for c in novel}
        if len(set(counts.values())) != 1:
            raise ValueError(f"each novel class needs the same number of examples, got {counts}")
        k = counts[novel[0]]
        feats = self.model_.branch_features(X)
        support = [np.stack([f[y == c] for c in novel]).reshape(len(novel), k, -1) for f in feats]
        names = tuple(map(str, novel))
        w = novel_weights_from_features(self.model_, support, ExtendOptions(generator=generator), names)
        self.model_ = CombinedModel(self.model_.branches, self.model_.base_weights, w, self.model_.label_space, names, self.model_.cache)
        self.classes_ = np.concatenate([self.base_classes_, novel])
        return self

    def decision_function(self, X) -> np.ndarray:
        """Summed per-branch cosine scores against every known class column."""
        return self.model_.scores(self.transform(X))

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]
