"""Scikit-learn style estimators wrapping the training pipelines.

``ConvNetClassifier`` trains a small CNN end to end; ``ReconPostTrainer``
refines a frozen pretrained network on the combined classification plus
feature-reconstruction objective.  Both follow the fit/predict protocol
and compose with model selection utilities via ``get_params``.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .data import LabeledDataset
from .network import Network, build_network, forward_logits, load_checkpoint, softmax
from .posttrain import PostTrainConfig, build_recon_dataset, pretrain, run_posttrain
from .validation import as_image_batch, as_label_vector, check_matching_lengths

__all__ = ["ConvNetClassifier", "ReconPostTrainer"]


class _NetworkPredictorMixin:
    def predict_proba(self, X):
        X = as_image_batch(X, self.network_.input_shape)
        return softmax(forward_logits(self.network_, X))

    def predict(self, X):
        X = as_image_batch(X, self.network_.input_shape)
        return forward_logits(self.network_, X).argmax(axis=1)


class ConvNetClassifier(_NetworkPredictorMixin, ClassifierMixin, BaseEstimator):
    """CNN classifier trained by plain backprop with Adam.

    Parameters
    ----------
    architecture : str or dict
        Preset name or explicit description with ``input_shape`` and
        ``units``.
    epochs, batch_size, lr, seed
        Training loop settings; the seed fixes both the weight init and
        the batch order, so fits are reproducible.
    """

    def __init__(self, architecture="mnist_baseline", epochs=10, batch_size=256,
                 lr=0.001, seed=0):
        self.architecture = architecture
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X, y):
        net = build_network(self.architecture, seed=self.seed)
        X = as_image_batch(X, net.input_shape)
        y = as_label_vector(y, net.class_count)
        check_matching_lengths(X, y)
        data = LabeledDataset(X, y, net.class_count)
        pretrain(net, data, epochs=self.epochs, batch_size=self.batch_size,
                 lr=self.lr, seed=self.seed)
        self.network_ = net
        self.classes_ = np.arange(net.class_count)
        return self


class ReconPostTrainer(_NetworkPredictorMixin, ClassifierMixin, BaseEstimator):
    """Post-trains part of a pretrained network against reconstructed features.

    Parameters
    ----------
    base : Network, fitted ConvNetClassifier, or checkpoint path
        Frozen starting point; it is copied, never mutated.
    mode : {"fr", "bp"}
        "fr" adds the feature-reconstruction loss with weight ``alpha``;
        "bp" continues with the classification loss alone.
    l_s, l_r : int
        Only units in ``(l_s, l_r]`` train.  ``l_r=None`` means the last
        unit.
    embed_method : {"ne", "ma", "onehot"}
        How labels become output-vector targets in "fr" mode.
    """

    def __init__(self, base=None, mode="fr", l_s=0, l_r=None, alpha=0.1,
                 embed_method="ne", epochs=1, batch_size=256, lr=0.001, seed=0):
        self.base = base
        self.mode = mode
        self.l_s = l_s
        self.l_r = l_r
        self.alpha = alpha
        self.embed_method = embed_method
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def _resolve_base(self):
        if isinstance(self.base, Network):
            return self.base.copy()
        if isinstance(self.base, ConvNetClassifier):
            if not hasattr(self.base, "network_"):
                raise ValueError("base classifier is not fitted")
            return self.base.network_.copy()
        if isinstance(self.base, (str, bytes)) or hasattr(self.base, "__fspath__"):
            return load_checkpoint(self.base)
        raise ValueError("base must be a Network, a fitted ConvNetClassifier, "
                         "or a checkpoint path")

    def fit(self, X, y):
        net = self._resolve_base()
        X = as_image_batch(X, net.input_shape)
        y = as_label_vector(y, net.class_count)
        check_matching_lengths(X, y)
        data = LabeledDataset(X, y, net.class_count)
        l_r = net.depth if self.l_r is None else self.l_r
        config = PostTrainConfig(mode=self.mode, l_s=self.l_s, l_r=l_r,
                                 alpha=self.alpha, epochs=self.epochs,
                                 batch_size=self.batch_size, lr=self.lr,
                                 seeds=(self.seed,), embed_method=self.embed_method)
        recon = None
        self.diagnostics_ = {}
        if self.mode == "fr":
            recon, self.diagnostics_ = build_recon_dataset(
                net, data, l_r, method=self.embed_method,
                batch_size=self.batch_size)
        _, models = run_posttrain(net, config, data, recon=recon)
        self.network_ = models[self.seed]
        self.classes_ = np.arange(net.class_count)
        return self
