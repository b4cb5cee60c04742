"""Linear SVMs for the pairwise baselines and the per-class (b_c, f_c) pairs."""

import numpy as np
from sklearn.svm import SVC

from .. import DataError
from ..decision import ClassifierPair, LinearClassifier


def fit_linear(pos, neg, C=1.0):
    """Max-margin separator of two sample sets; positive scores favor ``pos``."""
    pos, neg = np.asarray(pos, dtype=np.float64), np.asarray(neg, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise DataError("both sides of a binary SVM need samples")
    X = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    svm = SVC(kernel="linear", C=C).fit(X, y)
    # sklearn orders classes ascending, so the decision function favors +1
    return LinearClassifier(svm.coef_[0].copy(), float(svm.intercept_[0]))


def margin(clf):
    return 1.0 / float(np.linalg.norm(clf.w))


def train_pairwise(features, labels, classes, C=1.0):
    """One-vs-one classifiers keyed (i, j) with i < j; positive favors i."""
    features, labels = np.asarray(features), np.asarray(labels)
    classes = sorted(classes)
    out = {}
    for a, i in enumerate(classes):
        for j in classes[a + 1:]:
            out[(i, j)] = fit_linear(features[labels == i], features[labels == j], C)
    return out


def train_dual_pairs(features, labels, classes, background, C=1.0):
    """Per class c: b_c separates c from background, f_c separates c from the other classes."""
    features, labels = np.asarray(features), np.asarray(labels)
    pairs = []
    for c in classes:
        pos = features[labels == c]
        b = fit_linear(pos, features[labels == background], C)
        others = np.isin(labels, [k for k in classes if k != c])
        pairs.append(ClassifierPair(c, b, fit_linear(pos, features[others], C)))
    return pairs


def train_one_vs_rest(features, labels, c, C=1.0):
    features, labels = np.asarray(features), np.asarray(labels)
    return fit_linear(features[labels == c], features[labels != c], C)
