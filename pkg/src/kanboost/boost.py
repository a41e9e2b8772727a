"""Second-order gradient boosted trees with a softmax multiclass objective.

Trees are grown with exact greedy split search over presorted columns.  Each
boosting round fits one regression tree per class on the per-row gradient and
hessian of the softmax loss; prediction adds ``learning_rate`` times the tree
outputs to ``base_score``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HESS_FLOOR = 1e-16


def softmax_grad_hess(logits, labels):
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    rows, C = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    g = p.copy()
    g[np.arange(rows), labels] -= 1.0
    h = np.maximum(p * (1.0 - p), HESS_FLOOR)
    return g, h


def split_gain(GL, HL, GR, HR, lam, gamma):
    return 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - (GL + GR) ** 2 / (HL + HR + lam)) - gamma


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    gain: float


def best_split(rows, X, g, h, lam: float = 1.0, gamma: float = 0.0,
               min_child_weight: float = 0.0, presorted=None) -> Split | None:
    """Best (feature, threshold) for the node holding ``rows``, or None.

    Candidates are midpoints between consecutive distinct values of each
    feature.  Exact ties go to the lowest feature index, then the lowest
    threshold.  ``presorted`` may supply, per feature, the node's rows in
    ascending feature order (shape ``(d, len(rows))``).
    """
    rows = np.asarray(rows)
    if rows.size < 2:
        return None
    d = X.shape[1]
    if presorted is None:
        presorted = rows[np.argsort(X[rows].T, axis=1, kind="stable")]
    order = presorted
    vals = X[order, np.arange(d)[:, None]]
    GL = np.cumsum(g[order], axis=1)[:, :-1]
    HL = np.cumsum(h[order], axis=1)[:, :-1]
    G = g[rows].sum()
    H = h[rows].sum()
    GR = G - GL
    HR = H - HL
    gains = split_gain(GL, HL, GR, HR, lam, gamma)
    valid = (vals[:, :-1] < vals[:, 1:]) & (HL >= min_child_weight) & (HR >= min_child_weight)
    gains = np.where(valid, gains, -np.inf)
    flat = int(np.argmax(gains))
    f, i = divmod(flat, gains.shape[1])
    best = gains[f, i]
    if not best > 0:
        return None
    return Split(f, 0.5 * (vals[f, i] + vals[f, i + 1]), float(best))


@dataclass
class Tree:
    """Binary regression tree in flat preorder arrays.

    Leaves have ``feature == -1`` and carry ``value``; internal nodes send
    rows with ``x[feature] < threshold`` to ``left`` and the rest to ``right``.
    """

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def _add(self, feature=-1, threshold=0.0, value=0.0) -> int:
        self.feature.append(int(feature))
        self.threshold.append(float(threshold))
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return len(self.feature) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def depth(self, node: int = 0) -> int:
        if self.is_leaf(node):
            return 0
        return 1 + max(self.depth(self.left[node]), self.depth(self.right[node]))

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by every row."""
        X = np.asarray(X, dtype=float)
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = feature[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            n = node[idx]
            go_left = X[idx, feature[n]] < threshold[n]
            node[idx] = np.where(go_left, left[n], right[n])
            active = feature[node] >= 0
        return node

    def predict(self, X) -> np.ndarray:
        return np.asarray(self.value)[self.apply(X)]


@dataclass(frozen=True)
class GbtParams:
    n_estimators: int = 100
    learning_rate: float = 0.1
    max_depth: int | None = 6
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    base_score: float = 0.0

    def __post_init__(self):
        if self.n_estimators < 0:
            raise ValueError("n_estimators must be non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be non-negative or None")
        if self.reg_lambda < 0 or self.gamma < 0:
            raise ValueError("reg_lambda and gamma must be non-negative")


def leaf_weight(G: float, H: float, lam: float) -> float:
    return -G / (H + lam)


def build_tree(rows, X, g, h, params: GbtParams, presorted=None) -> Tree:
    """Greedy depth-first growth; nodes are numbered in preorder."""
    rows = np.asarray(rows)
    if rows.size == 0:
        raise ValueError("cannot grow a tree on an empty row set")
    if presorted is None:
        presorted = rows[np.argsort(X[rows].T, axis=1, kind="stable")]
    tree = Tree()
    max_depth = params.max_depth
    lam = params.reg_lambda
    in_left = np.zeros(X.shape[0], dtype=bool)

    def grow(node_rows, order, depth):
        split = None
        if node_rows.size >= 2 and (max_depth is None or depth < max_depth):
            split = best_split(node_rows, X, g, h, lam, params.gamma,
                               params.min_child_weight, presorted=order)
        if split is None:
            return tree._add(value=leaf_weight(g[node_rows].sum(), h[node_rows].sum(), lam))
        node = tree._add(split.feature, split.threshold)
        goes_left = X[node_rows, split.feature] < split.threshold
        in_left[node_rows] = goes_left
        # stable partition keeps every column sorted
        mask = in_left[order]
        left_order = order[mask].reshape(order.shape[0], -1)
        right_order = order[~mask].reshape(order.shape[0], -1)
        left_rows, right_rows = node_rows[goes_left], node_rows[~goes_left]
        tree.left[node] = grow(left_rows, left_order, depth + 1)
        tree.right[node] = grow(right_rows, right_order, depth + 1)
        return node

    grow(rows, presorted, 0)
    return tree


@dataclass
class GbtModel:
    params: GbtParams
    n_classes: int
    n_features: int
    trees: list[list[Tree]] = field(default_factory=list)  # [round][class]
    losses: list[float] = field(default_factory=list)

    @property
    def rounds(self) -> int:
        return len(self.trees)

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        logits = np.full((X.shape[0], self.n_classes), self.params.base_score)
        for round_trees in self.trees:
            for c, tree in enumerate(round_trees):
                logits[:, c] += self.params.learning_rate * tree.predict(X)
        return logits


def mean_softmax_loss(logits, labels) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(log_norm - z[np.arange(len(labels)), labels]))


def gbt_fit(X, y, params: GbtParams = GbtParams(), n_classes: int | None = None) -> GbtModel:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need a non-empty (rows, features) matrix")
    if y.shape != (X.shape[0],):
        raise ValueError("labels must have one entry per row")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    C = int(y.max()) + 1 if n_classes is None else n_classes
    if y.min() < 0 or y.max() >= C:
        raise ValueError(f"labels must lie in [0, {C})")
    model = GbtModel(params, C, X.shape[1])
    rows = np.arange(X.shape[0])
    presorted = np.argsort(X.T, axis=1, kind="stable")
    logits = np.full((X.shape[0], C), params.base_score)
    for _ in range(params.n_estimators):
        g, h = softmax_grad_hess(logits, y)
        round_trees = []
        for c in range(C):
            tree = build_tree(rows, X, g[:, c], h[:, c], params, presorted=presorted)
            round_trees.append(tree)
        for c, tree in enumerate(round_trees):
            logits[:, c] += params.learning_rate * tree.predict(X)
        model.trees.append(round_trees)
        model.losses.append(mean_softmax_loss(logits, y))
    return model


def gbt_predict(model: GbtModel, X) -> tuple[np.ndarray, np.ndarray]:
    logits = model.decision_function(X)
    return logits, np.argmax(logits, axis=1)


# --------------------------------------------------------------------------
# Serialisation
# --------------------------------------------------------------------------

GBT_MAGIC = b"KBGBT\x00"
GBT_VERSION = 1
_HEADER = "<HIIIIdidddd"


def save_gbt(model: GbtModel, path) -> None:
    """Params header followed by every tree in preorder (little-endian)."""
    p = model.params
    chunks = [GBT_MAGIC, struct.pack(
        _HEADER, GBT_VERSION, model.n_classes, model.n_features, model.rounds,
        p.n_estimators, p.learning_rate, -1 if p.max_depth is None else p.max_depth,
        p.reg_lambda, p.gamma, p.min_child_weight, p.base_score,
    )]
    for round_trees in model.trees:
        for tree in round_trees:
            chunks.append(struct.pack("<I", tree.n_nodes))
            _dump_node(tree, 0, chunks)
    Path(path).write_bytes(b"".join(chunks))


def _dump_node(tree: Tree, node: int, out: list) -> None:
    if tree.is_leaf(node):
        out.append(struct.pack("<Bd", 0, tree.value[node]))
        return
    out.append(struct.pack("<Bid", 1, tree.feature[node], tree.threshold[node]))
    _dump_node(tree, tree.left[node], out)
    _dump_node(tree, tree.right[node], out)


def load_gbt(path) -> GbtModel:
    data = Path(path).read_bytes()
    if not data.startswith(GBT_MAGIC):
        raise ValueError(f"{path}: not a boosted-tree file")
    pos = len(GBT_MAGIC)
    version, C, d, rounds, n_estimators, eta, depth, lam, gamma, mcw, base = struct.unpack_from(_HEADER, data, pos)
    if version != GBT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos += struct.calcsize(_HEADER)
    params = GbtParams(n_estimators, eta, None if depth < 0 else depth, lam, gamma, mcw, base)
    model = GbtModel(params, C, d)

    def read_node(tree: Tree) -> int:
        nonlocal pos
        (tag,) = struct.unpack_from("<B", data, pos)
        pos += 1
        if tag == 0:
            (value,) = struct.unpack_from("<d", data, pos)
            pos += 8
            return tree._add(value=value)
        feature, threshold = struct.unpack_from("<id", data, pos)
        pos += 12
        node = tree._add(feature, threshold)
        tree.left[node] = read_node(tree)
        tree.right[node] = read_node(tree)
        return node

    for _ in range(rounds):
        round_trees = []
        for _ in range(C):
            (n_nodes,) = struct.unpack_from("<I", data, pos)
            pos += 4
            tree = Tree()
            read_node(tree)
            if tree.n_nodes != n_nodes:
                raise ValueError(f"{path}: corrupt tree ({tree.n_nodes} != {n_nodes} nodes)")
            round_trees.append(tree)
        model.trees.append(round_trees)
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return model
