"""scikit-learn style wrappers: ``CNNClassifier`` and ``DistilledClassifier``.

Inputs are image batches shaped ``[n, H, W]`` or ``[n, C, H, W]`` holding pixel
intensities in ``[0, 255]``; they are rounded to bytes before training.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import distill as D
from .data import Dataset
from .nn import PRE_RELU, SIMPLE, ModelSpec
from .tensor import TRAINING, softmax
from .train import TrainConfig, predict_logits, train_student


def _as_images(X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped [n, H, W] or [n, C, H, W], got {X.ndim}-d input")
    if X.dtype == np.uint8:
        return X
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"images must be numeric, got dtype {X.dtype}")
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 255:
        raise ValueError("pixel intensities must be finite and lie in [0, 255]")
    return np.rint(X).astype(np.uint8)


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """Small convolutional classifier trained from scratch with SGD.

    Parameters mirror ``ModelSpec`` (architecture) and ``TrainConfig``
    (optimization).  ``lr_decay_epochs=None`` decays at 1/2 and 3/4 of
    ``epochs``.
    """

    def __init__(
        self,
        groups=(16, 32, 64),
        blocks_per_group=1,
        width_multiplier=1.0,
        block_kind=SIMPLE,
        epochs=10,
        base_lr=0.1,
        lr_decay_epochs=None,
        batch_size=64,
        momentum=0.9,
        weight_decay=5e-4,
        augment=False,
        augment_pad=4,
        augment_flip=True,
        random_state=0,
    ):
        self.groups = groups
        self.blocks_per_group = blocks_per_group
        self.width_multiplier = width_multiplier
        self.block_kind = block_kind
        self.epochs = epochs
        self.base_lr = base_lr
        self.lr_decay_epochs = lr_decay_epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.augment = augment
        self.augment_pad = augment_pad
        self.augment_flip = augment_flip
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        decay = self.lr_decay_epochs
        if decay is None:
            decay = sorted({self.epochs // 2, 3 * self.epochs // 4} - {0})
        seed = 0 if self.random_state is None else int(self.random_state)
        return TrainConfig(
            epochs=self.epochs,
            base_lr=self.base_lr,
            lr_decay_epochs=tuple(decay),
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            seed=seed,
            augment=self.augment,
            augment_pad=self.augment_pad,
            augment_flip=self.augment_flip,
        )

    def _model_spec(self, num_classes: int, input_shape) -> ModelSpec:
        return ModelSpec(
            tuple(self.groups), self.blocks_per_group, self.width_multiplier, num_classes, tuple(input_shape), self.block_kind
        )

    def _validate_fit(self, X, y) -> Dataset:
        X, y = check_X_y(X, y, allow_nd=True, dtype=None)
        images = _as_images(X)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        self.input_shape_ = images.shape[1:]
        self.n_features_in_ = int(np.prod(self.input_shape_))
        return Dataset(images, encoded, len(self.classes_))

    def _distill_config(self) -> D.DistillConfig:
        return D.DistillConfig(method=D.NO_DISTILL)

    def _teacher_model(self):
        return None

    def fit(self, X, y):
        """Train on images ``X`` with labels ``y``; returns ``self``."""
        ds = self._validate_fit(X, y)
        spec = self._model_spec(len(self.classes_), self.input_shape_)
        res = train_student(spec, self._teacher_model(), ds, None, self._train_config(), self._distill_config())
        self.model_ = res.model
        self.history_ = res.history
        self.margins_ = res.margins
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=None)
        images = _as_images(X)
        if images.shape[1:] != tuple(self.input_shape_):
            raise ValueError(f"expected images shaped {tuple(self.input_shape_)}, got {images.shape[1:]}")
        ds = Dataset(images, np.zeros(len(images), np.int64), len(self.classes_))
        return predict_logits(self.model_, ds)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self._logits(X))

    def predict(self, X) -> np.ndarray:
        labels = self._logits(X).argmax(axis=1)
        return self.classes_[labels]


class DistilledClassifier(CNNClassifier):
    """Student classifier trained under a fitted ``CNNClassifier`` teacher.

    ``method`` selects the distillation term (``"proposed"``, ``"fitnets_l2"``,
    ``"kd"`` or ``"none"``); the remaining distillation parameters match
    ``DistillConfig``.
    """

    def __init__(
        self,
        teacher=None,
        method=D.PROPOSED,
        alpha=1e-3,
        temperature=4.0,
        kd_lambda=1.0,
        layer_weights=None,
        teacher_bn_mode=TRAINING,
        tap_position=PRE_RELU,
        margin_source=D.EMPIRICAL,
        groups=(8, 16, 32),
        blocks_per_group=1,
        width_multiplier=1.0,
        block_kind=SIMPLE,
        epochs=10,
        base_lr=0.1,
        lr_decay_epochs=None,
        batch_size=64,
        momentum=0.9,
        weight_decay=5e-4,
        augment=False,
        augment_pad=4,
        augment_flip=True,
        random_state=0,
    ):
        super().__init__(
            groups=groups,
            blocks_per_group=blocks_per_group,
            width_multiplier=width_multiplier,
            block_kind=block_kind,
            epochs=epochs,
            base_lr=base_lr,
            lr_decay_epochs=lr_decay_epochs,
            batch_size=batch_size,
            momentum=momentum,
            weight_decay=weight_decay,
            augment=augment,
            augment_pad=augment_pad,
            augment_flip=augment_flip,
            random_state=random_state,
        )
        self.teacher = teacher
        self.method = method
        self.alpha = alpha
        self.temperature = temperature
        self.kd_lambda = kd_lambda
        self.layer_weights = layer_weights
        self.teacher_bn_mode = teacher_bn_mode
        self.tap_position = tap_position
        self.margin_source = margin_source

    def _distill_config(self) -> D.DistillConfig:
        return D.DistillConfig(
            method=self.method,
            alpha=self.alpha,
            temperature=self.temperature,
            kd_lambda=self.kd_lambda,
            layer_weights=self.layer_weights,
            teacher_bn_mode=self.teacher_bn_mode,
            tap_position=self.tap_position,
            margin_source=self.margin_source,
        )

    def _teacher_model(self):
        return self.teacher.model_ if self.teacher is not None else None

    def _validate_fit(self, X, y) -> Dataset:
        ds = super()._validate_fit(X, y)
        if self.method != D.NO_DISTILL:
            if self.teacher is None:
                raise ValueError(f"method {self.method!r} needs a fitted teacher")
            check_is_fitted(self.teacher, "model_")
            if not np.array_equal(self.teacher.classes_, self.classes_):
                raise ValueError("teacher was fitted on different classes")
            if tuple(self.teacher.input_shape_) != tuple(self.input_shape_):
                raise ValueError("teacher was fitted on differently shaped images")
        return ds
