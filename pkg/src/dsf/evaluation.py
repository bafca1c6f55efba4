"""Frozen-encoder evaluation: cosine kNN and a linear probe."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


class EvaluationError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    embeddings: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.embeddings.shape[0] != self.labels.shape[0]:
            raise EvaluationError("embeddings and labels differ in length")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if self.embeddings.size and not np.allclose(norms, 1.0, atol=1e-7):
            raise EvaluationError("embedding rows must be unit norm")

    def __len__(self):
        return self.labels.shape[0]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for label, row in zip(self.labels, self.embeddings):
                writer.writerow([int(label), *(repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path, split="train"):
        labels, rows = [], []
        with open(path, newline="") as fh:
            for line_no, rec in enumerate(csv.reader(fh), start=1):
                if not rec:
                    continue
                try:
                    labels.append(int(rec[0]))
                    rows.append([float(v) for v in rec[1:]])
                except ValueError as exc:
                    raise EvaluationError(f"{path}:{line_no}: {exc}") from exc
        if not rows:
            raise EvaluationError(f"{path}: empty table")
        return cls(np.array(rows), np.array(labels), split)


def default_k(n_train):
    return max(1, min(200, n_train // 10))


def knn_eval(train, test, k=None, chunk=1024):
    """Top-1 accuracy of majority-vote kNN under cosine similarity.

    Vote ties go to the smaller class id; neighbour ties to the lower
    training index.
    """
    if len(train) == 0 or len(test) == 0:
        raise EvaluationError("kNN needs non-empty train and test tables")
    k = default_k(len(train)) if k is None else int(k)
    if not 1 <= k <= len(train):
        raise EvaluationError(f"k={k} must lie in [1, {len(train)}]")
    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    correct = 0
    for start in range(0, len(test), chunk):
        q = test.embeddings[start:start + chunk]
        sims = q @ train.embeddings.T
        nearest = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        votes = np.zeros((q.shape[0], n_classes), dtype=np.int64)
        np.add.at(votes, (np.arange(q.shape[0])[:, None], train.labels[nearest]), 1)
        pred = np.argmax(votes, axis=1)
        correct += int(np.sum(pred == test.labels[start:start + chunk]))
    return correct / len(test)


def linear_probe(train, test, epochs=100, lr=0.5, batch_size=256, seed=0, return_train_accuracy=False):
    """Softmax regression on frozen embeddings; returns test accuracy.

    Features are standardised with training-set statistics. Minibatch SGD
    with momentum 0.9; the shuffling order is the only randomness.
    """
    if len(train) == 0 or len(test) == 0:
        raise EvaluationError("linear probe needs non-empty tables")
    x = train.embeddings
    mean = x.mean(axis=0)
    std = x.std(axis=0) + 1e-8
    xs = (x - mean) / std
    xt = (test.embeddings - mean) / std
    n, d = xs.shape
    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    y = np.eye(n_classes)[train.labels]
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits = xs[idx] @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            prob = np.exp(logits)
            prob /= prob.sum(axis=1, keepdims=True)
            g = (prob - y[idx]) / idx.size
            loss = -np.mean(np.sum(y[idx] * np.log(prob + 1e-300), axis=1))
            if not math.isfinite(loss):
                raise EvaluationError("linear probe loss became non-finite")
            vw = 0.9 * vw + xs[idx].T @ g
            vb = 0.9 * vb + g.sum(axis=0)
            w -= lr * vw
            b -= lr * vb
    test_acc = float(np.mean(np.argmax(xt @ w + b, axis=1) == test.labels))
    if return_train_accuracy:
        train_acc = float(np.mean(np.argmax(xs @ w + b, axis=1) == train.labels))
        return test_acc, train_acc
    return test_acc
