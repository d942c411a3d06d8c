"""From-scratch CART classifier used to explain cluster membership.

Greedy binary splits on Gini impurity: every feature and every midpoint
between consecutive distinct sorted values is a candidate, and the split
with the largest impurity decrease wins (ties to the smaller feature
index, then the smaller threshold).  Feature importance is the node-
fraction-weighted impurity decrease accumulated per feature; a
permutation mode (shuffle one held-out column, measure the error
increase) is available as a less biased alternative.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import TreeError

log = logging.getLogger(__name__)


@dataclass
class TreeParams:
    max_depth: int | None = 12
    min_leaf: int = 5
    min_impurity_decrease: float = 1e-4


@dataclass
class Node:
    # internal nodes carry split_feature/threshold/left/right;
    # leaves carry class_id/class_counts; both carry n_samples
    n_samples: int
    split_feature: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    impurity_decrease: float = 0.0
    class_id: int = -1
    class_counts: np.ndarray | None = None

    @property
    def is_leaf(self) -> bool:
        return self.split_feature < 0


@dataclass
class DecisionTree:
    nodes: list[Node]
    classes: np.ndarray
    n_features: int
    params: TreeParams = field(default_factory=TreeParams)


@dataclass
class ImportanceVector:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if (self.values < 0).any():
            raise TreeError("importances must be non-negative")
        total = self.values.sum()
        if total > 0 and abs(total - 1.0) > 1e-9:
            raise TreeError(f"importances must sum to 0 or 1, got {total}")


def _gini(counts: np.ndarray, n: int) -> float:
    p = counts / n
    return float(1.0 - (p * p).sum())


def _best_split(X, codes, n_classes, min_leaf):
    """Best (feature, threshold, gain) at one node; gain is the decrease
    in Gini impurity weighted by the child fractions, local to the node."""
    n = len(codes)
    counts = np.bincount(codes, minlength=n_classes)
    parent = _gini(counts, n)
    best_gain, best_feat, best_thr = -np.inf, -1, 0.0
    onehot = np.zeros((n, n_classes), dtype=np.float64)
    onehot[np.arange(n), codes] = 1.0
    for f in range(X.shape[1]):
        col = X[:, f]
        order = np.argsort(col, kind="stable")
        sv = col[order]
        boundaries = np.flatnonzero(sv[:-1] != sv[1:])
        if boundaries.size == 0:
            continue
        cum = onehot[order].cumsum(axis=0)
        left = cum[boundaries]
        right = counts[None, :] - left
        nl = (boundaries + 1).astype(np.float64)
        nr = n - nl
        valid = (nl >= min_leaf) & (nr >= min_leaf)
        if not valid.any():
            continue
        gini_l = 1.0 - ((left / nl[:, None]) ** 2).sum(axis=1)
        gini_r = 1.0 - ((right / nr[:, None]) ** 2).sum(axis=1)
        gains = parent - (nl / n) * gini_l - (nr / n) * gini_r
        gains[~valid] = -np.inf
        pos = int(np.argmax(gains))  # first max == smallest threshold
        if gains[pos] > best_gain:
            best_gain = float(gains[pos])
            best_feat = f
            i = int(boundaries[pos])
            best_thr = float((sv[i] + sv[i + 1]) / 2.0)
    return best_feat, best_thr, best_gain


def fit_tree(X, y, params: TreeParams | None = None) -> DecisionTree:
    """Grow a CART classifier on (features, labels).

    A single-class input yields a degenerate one-leaf tree.  Splits stop on
    depth, leaf-size, purity, or an impurity decrease below the threshold.
    """
    params = params or TreeParams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2:
        raise TreeError("X must be a 2-d feature matrix")
    if len(X) == 0:
        raise TreeError("empty training data")
    if len(X) != len(y):
        raise TreeError("X and y lengths differ")
    if not np.isfinite(X).all():
        raise TreeError("non-finite feature values")
    classes, codes = np.unique(y, return_inverse=True)
    n_classes = len(classes)
    nodes: list[Node] = []
    max_depth = np.inf if params.max_depth is None else params.max_depth

    def grow(rows: np.ndarray, depth: int) -> int:
        codes_here = codes[rows]
        counts = np.bincount(codes_here, minlength=n_classes)
        node_id = len(nodes)
        nodes.append(Node(n_samples=len(rows)))

        def make_leaf():
            nodes[node_id].class_id = int(np.argmax(counts))
            nodes[node_id].class_counts = counts.copy()

        if (
            depth >= max_depth
            or len(rows) < 2 * params.min_leaf
            or counts.max() == len(rows)
        ):
            make_leaf()
            return node_id
        feat, thr, gain = _best_split(X[rows], codes_here, n_classes, params.min_leaf)
        if feat < 0 or gain <= 0.0 or gain < params.min_impurity_decrease:
            make_leaf()
            return node_id
        node = nodes[node_id]
        node.split_feature = feat
        node.threshold = thr
        node.impurity_decrease = gain
        mask = X[rows, feat] <= thr
        node.left = grow(rows[mask], depth + 1)
        node.right = grow(rows[~mask], depth + 1)
        return node_id

    grow(np.arange(len(X)), 0)
    return DecisionTree(nodes=nodes, classes=classes, n_features=X.shape[1], params=params)


def predict(tree: DecisionTree, x) -> int:
    """Route one feature vector down the tree; returns the leaf's class."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (tree.n_features,):
        raise TreeError(
            f"feature vector of length {x.shape} does not match "
            f"training dimension {tree.n_features}"
        )
    node = tree.nodes[0]
    while not node.is_leaf:
        node = tree.nodes[node.left if x[node.split_feature] <= node.threshold else node.right]
    return tree.classes[node.class_id]


def predict_batch(tree: DecisionTree, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return np.array([predict(tree, row) for row in X])


def training_error(tree: DecisionTree, X, y) -> float:
    return float((predict_batch(tree, X) != np.asarray(y)).mean())


def predictor_importance(tree: DecisionTree) -> ImportanceVector:
    """Impurity-decrease importance per feature, normalized to sum 1.

    Each internal node contributes (its sample fraction) x (its impurity
    decrease) to its split feature.  A tree with no splits yields zeros.
    """
    values = np.zeros(tree.n_features, dtype=np.float64)
    n_total = tree.nodes[0].n_samples
    for node in tree.nodes:
        if not node.is_leaf:
            values[node.split_feature] += (node.n_samples / n_total) * node.impurity_decrease
    total = values.sum()
    if total > 0:
        values /= total
    return ImportanceVector(values)


def permutation_importance(
    tree: DecisionTree, X, y, seed: int = 0
) -> ImportanceVector:
    """Held-out permutation importance: per-feature error increase.

    Shuffles one column of ``X`` at a time and measures how much the
    misclassification rate rises.  Negative increases clip to zero; the
    vector is normalized to sum 1 when any increase is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    base = training_error(tree, X, y)
    deltas = np.zeros(tree.n_features, dtype=np.float64)
    for f in range(tree.n_features):
        shuffled = X.copy()
        shuffled[:, f] = rng.permutation(shuffled[:, f])
        deltas[f] = max(0.0, training_error(tree, shuffled, y) - base)
    total = deltas.sum()
    if total > 0:
        deltas /= total
    return ImportanceVector(deltas)


def stratified_folds(y, folds: int, seed: int) -> np.ndarray:
    """Deterministic stratified fold assignment (one fold id per sample)."""
    y = np.asarray(y)
    if folds < 2:
        raise TreeError("folds must be >= 2")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=np.int64)
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        if len(idx) < folds:
            log.warning(
                "class %r has %d members for %d folds; stratification degrades",
                cls, len(idx), folds,
            )
        rng.shuffle(idx)
        fold_of[idx] = np.arange(len(idx)) % folds
    return fold_of


def cv_misclassification(
    X, y, folds: int = 10, params: TreeParams | None = None, seed: int = 0
) -> float:
    """Pooled k-fold cross-validated misclassification rate."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    fold_of = stratified_folds(y, folds, seed)
    errors = 0
    for f in range(folds):
        test = fold_of == f
        if not test.any():
            continue
        train = ~test
        tree = fit_tree(X[train], y[train], params)
        errors += int((predict_batch(tree, X[test]) != y[test]).sum())
    return errors / len(y)


def tree_to_dict(tree: DecisionTree) -> dict:
    """JSON-ready structure for audit export."""
    return {
        "n_features": tree.n_features,
        "classes": [int(c) for c in tree.classes],
        "params": {
            "max_depth": tree.params.max_depth,
            "min_leaf": tree.params.min_leaf,
            "min_impurity_decrease": tree.params.min_impurity_decrease,
        },
        "nodes": [
            {
                "n_samples": node.n_samples,
                **(
                    {
                        "class": int(tree.classes[node.class_id]),
                        "class_counts": [int(c) for c in node.class_counts],
                    }
                    if node.is_leaf
                    else {
                        "split_feature": node.split_feature,
                        "threshold": node.threshold,
                        "impurity_decrease": node.impurity_decrease,
                        "left": node.left,
                        "right": node.right,
                    }
                ),
            }
            for node in tree.nodes
        ],
    }


def tree_from_dict(payload: dict) -> DecisionTree:
    classes = np.array(payload["classes"])
    class_pos = {int(c): i for i, c in enumerate(classes)}
    nodes = []
    for entry in payload["nodes"]:
        if "class" in entry:
            nodes.append(
                Node(
                    n_samples=entry["n_samples"],
                    class_id=class_pos[int(entry["class"])],
                    class_counts=np.array(entry["class_counts"], dtype=np.int64),
                )
            )
        else:
            nodes.append(
                Node(
                    n_samples=entry["n_samples"],
                    split_feature=entry["split_feature"],
                    threshold=entry["threshold"],
                    impurity_decrease=entry["impurity_decrease"],
                    left=entry["left"],
                    right=entry["right"],
                )
            )
    p = payload["params"]
    return DecisionTree(
        nodes=nodes,
        classes=classes,
        n_features=payload["n_features"],
        params=TreeParams(p["max_depth"], p["min_leaf"], p["min_impurity_decrease"]),
    )
