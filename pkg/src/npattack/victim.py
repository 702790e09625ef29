"""Victim MLP classifiers, the query-counting oracle, and white-box diagnostics."""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor, backward
from .errors import ContractViolation


@dataclass
class Classifier:
    """Fully connected relu network; widths include input and class count."""

    widths: list
    tensors: dict = field(repr=False)

    @classmethod
    def init(cls, widths, seed=0):
        if len(widths) < 2:
            raise ContractViolation("classifier needs at least input and output widths")
        rng = np.random.default_rng(seed)
        tensors = {}
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            std = np.sqrt(2.0 / (fan_in + fan_out))
            tensors[f"w{i}"] = Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)))
            tensors[f"b{i}"] = Tensor(np.zeros(fan_out))
        return cls(widths=list(widths), tensors=tensors)

    @property
    def n_classes(self):
        return self.widths[-1]

    @property
    def n_features(self):
        return self.widths[0]

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def logits_t(self, x_t):
        h = x_t
        for i in range(1, self.n_layers):
            h = ad.relu(ad.affine(h, self.tensors[f"w{i}"], self.tensors[f"b{i}"]))
        last = self.n_layers
        return ad.affine(h, self.tensors[f"w{last}"], self.tensors[f"b{last}"])

    def _flat(self, images):
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        else:
            x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.n_features:
            raise ContractViolation(
                f"input has {x.shape[1]} features, classifier expects {self.n_features}")
        return x

    def predict_proba(self, images):
        """Softmax probabilities, one row per image; rows normalize to 1."""
        logits = self.logits_t(Tensor(self._flat(images)))
        return ad.softmax_rows(logits).data.copy()

    def predict(self, images):
        return self.predict_proba(images).argmax(axis=1)


def train_classifier(dataset, arch=None, epochs=20, test=None, lr=1e-3,
                     batch=64, seed=0, holdout=0.2):
    """Cross-entropy training of an MLP victim; returns (classifier, test accuracy).

    When no explicit test split is given, a seeded holdout fraction is carved
    off the tail of a shuffled copy of the dataset. Fixed seeds reproduce the
    final weights bit for bit.
    """
    n_classes = dataset.n_classes
    if n_classes < 2:
        raise ContractViolation("training needs at least two classes")
    flat = dataset.images.reshape(len(dataset), -1)
    labels = dataset.labels

    rng = np.random.default_rng(seed)
    if test is None:
        order = rng.permutation(len(dataset))
        n_test = max(1, int(round(holdout * len(dataset))))
        test_x, test_y = flat[order[-n_test:]], labels[order[-n_test:]]
        train_x, train_y = flat[order[:-n_test]], labels[order[:-n_test]]
    else:
        train_x, train_y = flat, labels
        test_x = test.images.reshape(len(test), -1)
        test_y = test.labels

    n_features = train_x.shape[1]
    if arch is None:
        hidden = (256, 128) if n_features >= 784 else (128, 64)
        arch = [n_features, *hidden, n_classes]
    if arch[0] != n_features or arch[-1] < n_classes:
        raise ContractViolation(f"architecture {arch} does not fit the dataset")

    clf = Classifier.init(arch, seed=seed)
    opt = Adam(clf.tensors.values(), lr=lr)
    for _ in range(epochs):
        order = rng.permutation(train_x.shape[0])
        for start in range(0, train_x.shape[0], batch):
            idx = order[start:start + batch]
            tape = Tape()
            for t in clf.tensors.values():
                tape.watch(t)
            logp = ad.log_softmax_rows(clf.logits_t(Tensor(train_x[idx])))
            loss = ad.scale(ad.mean_all(ad.take_per_row(logp, train_y[idx])), -1.0)
            backward(tape, loss)
            opt.step()

    accuracy = float((clf.predict(test_x) == test_y).mean())
    return clf, accuracy


class QueryOracle:
    """Score-returning gateway to a classifier with exact query accounting.

    Every forward evaluation through the oracle increments ``query_count``
    by exactly one (batched calls by the batch size), atomically with
    respect to concurrent callers. No gradients cross this boundary. An
    optional ball guard, meant for tests, asserts that every query stays
    inside a given L-infinity ball and the [0,1] box.
    """

    def __init__(self, classifier, log_calls=False, cache=False):
        self._clf = classifier
        self._lock = threading.Lock()
        self._count = 0
        self._log_calls = log_calls
        self.call_log = []
        self._cache = {} if cache else None
        self._guard = None

    @property
    def query_count(self):
        return self._count

    @property
    def n_classes(self):
        return self._clf.n_classes

    @property
    def n_features(self):
        return self._clf.n_features

    def reset(self):
        with self._lock:
            self._count = 0
            self.call_log = []

    def enable_ball_guard(self, reference, epsilon):
        self._guard = (np.asarray(reference, dtype=np.float64).ravel(), float(epsilon))

    def _validate(self, flat):
        if flat.min() < 0.0 or flat.max() > 1.0:
            raise ContractViolation("query outside the [0,1] pixel box")
        if self._guard is not None:
            ref, eps = self._guard
            if np.abs(flat - ref[None, :]).max() > eps + 1e-12:
                raise ContractViolation("query outside the configured distortion ball")

    def query(self, image):
        """Softmax probabilities for one image; counts exactly one query."""
        return self.query_many(np.asarray(image, dtype=np.float64)[None, ...])[0]

    def query_many(self, images):
        """Softmax probabilities for a batch; counts one query per image."""
        images = np.asarray(images, dtype=np.float64)
        flat = images.reshape(images.shape[0], -1)
        self._validate(flat)
        with self._lock:
            self._count += flat.shape[0]
        if self._cache is not None:
            probs = np.empty((flat.shape[0], self._clf.n_classes))
            for i in range(flat.shape[0]):
                key = hashlib.sha256(flat[i].tobytes()).hexdigest()
                if key not in self._cache:
                    self._cache[key] = self._clf.predict_proba(flat[i])[0]
                probs[i] = self._cache[key]
        else:
            probs = self._clf.predict_proba(flat)
        if self._log_calls:
            with self._lock:
                for i in range(flat.shape[0]):
                    digest = hashlib.sha256(flat[i].tobytes()).hexdigest()[:16]
                    self.call_log.append((digest, int(probs[i].argmax())))
        return probs


def fgsm_attack(classifier, image, label, epsilon, steps=1):
    """Gradient-sign attack on a white-box classifier.

    steps=1 is the single-shot variant; steps=k takes k steps of size
    epsilon/k, re-projecting into the epsilon ball and the [0,1] box after
    each. The output never leaves either constraint set.
    """
    if epsilon < 0:
        raise ContractViolation("epsilon must be non-negative")
    image = np.asarray(image, dtype=np.float64)
    flat = image.ravel().copy()
    origin = flat.copy()
    step_size = epsilon / steps
    label_arr = np.asarray([label], dtype=np.int64)
    for _ in range(steps):
        tape = Tape()
        x = tape.leaf(flat[None, :])
        logp = ad.log_softmax_rows(classifier.logits_t(x))
        loss = ad.scale(ad.mean_all(ad.take_per_row(logp, label_arr)), -1.0)
        backward(tape, loss)
        flat = flat + step_size * np.sign(x.grad.ravel())
        flat = np.clip(flat, np.maximum(origin - epsilon, 0.0),
                       np.minimum(origin + epsilon, 1.0))
    return flat.reshape(image.shape)
