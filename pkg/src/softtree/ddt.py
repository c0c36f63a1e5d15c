"""Differentiable decision trees: soft forward pass, analytic gradients,
crisp extraction, rendering, and leaf reachability analysis.

A tree of depth ``d`` has ``2**d - 1`` decision nodes and ``2**d`` leaves,
stored level order: the root is node 1 and node ``i`` has children ``2i``
(left) and ``2i + 1`` (right). A decision node blends the input features
with softmax-normalized weights, subtracts its threshold, and squashes the
result through a sigmoid to obtain the probability of routing left. A leaf
maps its weight vector to an action distribution through a negated-exponent
softmax, so a *smaller* leaf weight means a *larger* action probability.
The soft output is the path-probability-weighted mixture of the leaf
distributions; inference uses the hardened (crisp) tree extracted by
argmax over feature weights and leaf weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, softmax

TREE_CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class TreeParams:
    """Trainable parameters of one tree, level-order indexed.

    ``beta[i - 1]`` and ``phi[i - 1]`` belong to decision node ``i`` (nodes
    are numbered from 1), ``w[j]`` to the j-th leaf counted left to right.
    """

    depth: int
    n_features: int
    n_actions: int
    beta: np.ndarray  # (2**depth - 1, n_features) raw feature-selection weights
    phi: np.ndarray   # (2**depth - 1,) cut thresholds
    w: np.ndarray     # (2**depth, n_actions) leaf weight vectors

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64))
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=np.float64))
        object.__setattr__(self, "w", np.asarray(self.w, dtype=np.float64))
        if self.depth < 1:
            raise ValueError(f"tree depth must be >= 1, got {self.depth}")
        if self.n_features < 1 or self.n_actions < 1:
            raise ValueError(
                f"need at least one feature and one action, got "
                f"{self.n_features} features / {self.n_actions} actions"
            )
        n_dec = 2 ** self.depth - 1
        n_leaf = 2 ** self.depth
        if self.beta.shape != (n_dec, self.n_features):
            raise ValueError(
                f"beta shape {self.beta.shape} does not match "
                f"({n_dec}, {self.n_features})"
            )
        if self.phi.shape != (n_dec,):
            raise ValueError(f"phi shape {self.phi.shape} does not match ({n_dec},)")
        if self.w.shape != (n_leaf, self.n_actions):
            raise ValueError(
                f"w shape {self.w.shape} does not match ({n_leaf}, {self.n_actions})"
            )
        for name, arr in (("beta", self.beta), ("phi", self.phi), ("w", self.w)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def n_decision_nodes(self) -> int:
        return 2 ** self.depth - 1

    @property
    def n_leaves(self) -> int:
        return 2 ** self.depth

    def to_arrays(self) -> list[np.ndarray]:
        """Flat parameter list in a fixed order, for optimizers."""
        return [self.beta, self.phi, self.w]

    def with_arrays(self, arrays: list[np.ndarray]) -> "TreeParams":
        """Rebuild the same tree structure around new parameter values."""
        beta, phi, w = arrays
        return replace(self, beta=beta, phi=phi, w=w)


@dataclass(frozen=True)
class TreeGradients:
    """Gradients with the same shapes as the matching TreeParams fields."""

    d_beta: np.ndarray
    d_phi: np.ndarray
    d_w: np.ndarray

    def to_arrays(self) -> list[np.ndarray]:
        return [self.d_beta, self.d_phi, self.d_w]


@dataclass(frozen=True)
class CrispTree:
    """Hardened tree: one feature and threshold per node, one action per leaf.

    ``threshold_units`` records whether thresholds live in the tree's own
    input space ("normalized") or were mapped back to raw feature units
    ("raw"). ``saturated`` flags nodes whose threshold fell outside the
    observed feature range during the raw-unit conversion and was clamped
    to the range edge; such a node routes every observed input one way.
    """

    depth: int
    n_features: int
    n_actions: int
    feature_index: np.ndarray  # (2**depth - 1,) int
    threshold: np.ndarray      # (2**depth - 1,) float
    leaf_action: np.ndarray    # (2**depth,) int
    threshold_units: str = "normalized"
    saturated: np.ndarray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "feature_index", np.asarray(self.feature_index, dtype=np.int64)
        )
        object.__setattr__(
            self, "threshold", np.asarray(self.threshold, dtype=np.float64)
        )
        object.__setattr__(
            self, "leaf_action", np.asarray(self.leaf_action, dtype=np.int64)
        )
        if self.saturated is None:
            object.__setattr__(
                self, "saturated", np.zeros(self.feature_index.shape, dtype=bool)
            )

    @property
    def n_decision_nodes(self) -> int:
        return 2 ** self.depth - 1

    @property
    def n_leaves(self) -> int:
        return 2 ** self.depth


# --------------------------------------------------------------------------
# initialization and elementary pieces


def init_tree(depth: int, n_features: int, n_actions: int, seed: int) -> TreeParams:
    """Fresh tree with all parameters drawn uniformly from [-0.5, 0.5]."""
    if depth < 1:
        raise ValueError(f"tree depth must be >= 1, got {depth}")
    if n_features < 1 or n_actions < 1:
        raise ValueError(
            f"need at least one feature and one action, got "
            f"{n_features} features / {n_actions} actions"
        )
    rng = np.random.default_rng(seed)
    n_dec = 2 ** depth - 1
    beta = rng.uniform(-0.5, 0.5, size=(n_dec, n_features))
    phi = rng.uniform(-0.5, 0.5, size=n_dec)
    w = rng.uniform(-0.5, 0.5, size=(2 ** depth, n_actions))
    return TreeParams(depth, n_features, n_actions, beta, phi, w)


def normalized_weights(beta: np.ndarray) -> np.ndarray:
    """Softmax over the feature axis; rows become convex feature mixtures."""
    return softmax(np.asarray(beta, dtype=np.float64), axis=-1)


def decision_prob(beta: np.ndarray, phi: float, x: np.ndarray) -> float:
    """Probability of routing left at one node for input ``x``."""
    beta = np.asarray(beta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if beta.shape != x.shape:
        raise ValueError(f"beta shape {beta.shape} does not match input {x.shape}")
    tilde = normalized_weights(beta)
    return float(expit(float(tilde @ x) - phi))


def leaf_distribution(w: np.ndarray) -> np.ndarray:
    """Action distribution of one leaf: softmax of the negated weights."""
    w = np.asarray(w, dtype=np.float64)
    return softmax(-w, axis=-1)


# --------------------------------------------------------------------------
# soft forward pass


def _check_input(tree: TreeParams, x: np.ndarray, batched: bool) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    want = 2 if batched else 1
    if x.ndim != want or x.shape[-1] != tree.n_features:
        raise ValueError(
            f"input shape {x.shape} does not match {tree.n_features} features"
        )
    return x

def _decision_probs(tree: TreeParams, x2d: np.ndarray) -> np.ndarray:
    """Left-routing probability of every decision node, shape (B, 2**d - 1)."""
    tilde = normalized_weights(tree.beta)
    return expit(x2d @ tilde.T - tree.phi)


def _leaf_matrix(tree: TreeParams) -> np.ndarray:
    """All leaf distributions stacked, shape (2**d, A)."""
    return softmax(-tree.w, axis=-1)


def _path_probs(tree: TreeParams, p: np.ndarray) -> np.ndarray:
    """Root-to-leaf probability products from node probabilities ``p``.

    Level by level: the mass of a node splits into (mass * p) for the left
    child and (mass * (1 - p)) for the right child, which keeps the leaf
    masses a partition of one by construction.
    """
    mu = np.ones((p.shape[0], 1))
    for level in range(tree.depth):
        lo = 2 ** level - 1
        hi = 2 ** (level + 1) - 1
        p_level = p[:, lo:hi]
        nxt = np.empty((p.shape[0], 2 ** (level + 1)))
        nxt[:, 0::2] = mu * p_level
        nxt[:, 1::2] = mu * (1.0 - p_level)
        mu = nxt
    return mu


def path_probabilities(tree: TreeParams, x: np.ndarray) -> np.ndarray:
    """Probability of reaching each leaf for a single input, shape (2**d,)."""
    x2d = _check_input(tree, x, batched=False)[None, :]
    return _path_probs(tree, _decision_probs(tree, x2d))[0]


def forward_soft(tree: TreeParams, x: np.ndarray) -> np.ndarray:
    """Soft action distribution for one input, shape (n_actions,)."""
    x2d = _check_input(tree, x, batched=False)[None, :]
    return forward_soft_batch(tree, x2d)[0]


def forward_soft_batch(tree: TreeParams, x: np.ndarray) -> np.ndarray:
    """Soft action distributions for a batch of inputs, shape (B, n_actions)."""
    x2d = _check_input(tree, x, batched=True)
    mu = _path_probs(tree, _decision_probs(tree, x2d))
    return mu @ _leaf_matrix(tree)


def forward_depth2(tree: TreeParams, x: np.ndarray) -> np.ndarray:
    """Depth-2 output via the explicit 2x2 path-matrix composition.

    Kept as a literal transcription next to the generic pass so the two
    routes can be checked against each other; rejects other depths.
    """
    if tree.depth != 2:
        raise ValueError(f"path-matrix form is defined for depth 2, got {tree.depth}")
    x = _check_input(tree, x, batched=False)
    p1 = decision_prob(tree.beta[0], float(tree.phi[0]), x)
    p2 = decision_prob(tree.beta[1], float(tree.phi[1]), x)
    p3 = decision_prob(tree.beta[2], float(tree.phi[2]), x)
    first = np.array([[p1, 0.0], [0.0, 1.0 - p1]])
    second = np.array([[p2, 1.0 - p2], [p3, 1.0 - p3]])
    paths = first @ second
    leaves = _leaf_matrix(tree)
    return (
        paths[0, 0] * leaves[0]
        + paths[0, 1] * leaves[1]
        + paths[1, 0] * leaves[2]
        + paths[1, 1] * leaves[3]
    )


# --------------------------------------------------------------------------
# analytic backward pass


def backward(tree: TreeParams, x: np.ndarray, upstream: np.ndarray) -> TreeGradients:
    """Gradients of ``upstream @ forward_soft(tree, x)`` for a single input."""
    x2d = _check_input(tree, x, batched=False)[None, :]
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (tree.n_actions,):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match ({tree.n_actions},)"
        )
    return backward_batch(tree, x2d, upstream[None, :])


def backward_batch(
    tree: TreeParams, x: np.ndarray, upstream: np.ndarray
) -> TreeGradients:
    """Gradients summed over a batch.

    The scalar being differentiated is ``sum_b upstream[b] @ forward(x[b])``;
    scale ``upstream`` beforehand (for example by 1/B) for a mean. Uses the
    subtree-value / prefix-mass decomposition: with V_i the action-value
    mixture of the subtree under node i and R_i the probability mass
    arriving at node i, d(output)/d(p_i) = R_i (V_left - V_right).
    """
    x2d = _check_input(tree, x, batched=True)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (x2d.shape[0], tree.n_actions):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match "
            f"({x2d.shape[0]}, {tree.n_actions})"
        )
    n_batch = x2d.shape[0]
    n_leaves = tree.n_leaves
    tilde = normalized_weights(tree.beta)
    z = x2d @ tilde.T - tree.phi
    p = expit(z)
    leaves = _leaf_matrix(tree)

    # subtree mixtures bottom-up, prefix masses top-down (nodes numbered from 1)
    value: dict[int, np.ndarray] = {
        n_leaves + j: np.broadcast_to(leaves[j], (n_batch, tree.n_actions))
        for j in range(n_leaves)
    }
    for i in range(tree.n_decision_nodes, 0, -1):
        p_i = p[:, i - 1][:, None]
        value[i] = p_i * value[2 * i] + (1.0 - p_i) * value[2 * i + 1]
    mass: dict[int, np.ndarray] = {1: np.ones(n_batch)}
    for i in range(1, tree.n_decision_nodes + 1):
        mass[2 * i] = mass[i] * p[:, i - 1]
        mass[2 * i + 1] = mass[i] * (1.0 - p[:, i - 1])

    d_beta = np.zeros_like(tree.beta)
    d_phi = np.zeros_like(tree.phi)
    d_w = np.zeros_like(tree.w)

    for i in range(1, tree.n_decision_nodes + 1):
        gap = value[2 * i] - value[2 * i + 1]
        d_prob = mass[i] * np.einsum("ba,ba->b", upstream, gap)
        d_z = d_prob * p[:, i - 1] * (1.0 - p[:, i - 1])
        d_phi[i - 1] = -d_z.sum()
        # z = softmax(beta) . x - phi, so dz/dbeta_k = tilde_k (x_k - tilde . x)
        blend = x2d @ tilde[i - 1]
        d_beta[i - 1] = tilde[i - 1] * (d_z @ x2d - d_z @ blend)

    for j in range(n_leaves):
        g = mass[n_leaves + j] @ upstream  # (A,) aggregated leaf upstream
        q = leaves[j]
        d_w[j] = -(q * g - q * (g @ q))  # softmax of -w: negated Jacobian

    return TreeGradients(d_beta, d_phi, d_w)


# --------------------------------------------------------------------------
# crisp extraction and inference


def crispify(tree: TreeParams, norm=None) -> CrispTree:
    """Extract the hard tree: argmax feature per node, argmax action per leaf.

    Ties resolve toward the lowest index. Without ``norm`` the thresholds
    stay in the tree's own input space. With a NormStats the thresholds are
    mapped back to raw feature units against each node's selected feature;
    thresholds outside the observed [0, 1] band are clamped to the nearest
    edge first and flagged in ``saturated`` (the node routes every observed
    input one way, and the clamped value is the faithful rendering of that).
    """
    tilde = normalized_weights(tree.beta)
    feature = np.argmax(tilde, axis=1)
    action = np.argmax(_leaf_matrix(tree), axis=1)
    threshold = tree.phi.copy()
    units = "normalized"
    saturated = np.zeros(threshold.shape, dtype=bool)
    if norm is not None:
        from . import profiles  # local import keeps the module dependency one-way

        units = "raw"
        for i, f in enumerate(feature):
            clamped = min(max(threshold[i], 0.0), 1.0)
            saturated[i] = clamped != threshold[i]
            threshold[i] = profiles.norm_invert(norm, int(f), clamped)
    return CrispTree(
        depth=tree.depth,
        n_features=tree.n_features,
        n_actions=tree.n_actions,
        feature_index=feature,
        threshold=threshold,
        leaf_action=action,
        threshold_units=units,
        saturated=saturated,
    )


def infer_crisp(crisp: CrispTree, x: np.ndarray) -> int:
    """Walk the hard tree; go left iff x[feature] >= threshold; return action."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (crisp.n_features,):
        raise ValueError(f"input shape {x.shape} does not match ({crisp.n_features},)")
    node = 1
    for _ in range(crisp.depth):
        if x[crisp.feature_index[node - 1]] >= crisp.threshold[node - 1]:
            node = 2 * node
        else:
            node = 2 * node + 1
    return int(crisp.leaf_action[node - crisp.n_leaves])


# --------------------------------------------------------------------------
# rendering


def export_tree(
    crisp: CrispTree,
    feature_names: list[str],
    action_labels: list[str],
    format: str = "text",
) -> str:
    """Render a crisp tree as nested if/else pseudocode or as Graphviz DOT.

    Both renderings are deterministic for a given tree. Node order follows
    the level-order storage; thresholds print with six significant digits.
    """
    if len(feature_names) != crisp.n_features:
        raise ValueError(
            f"{len(feature_names)} feature names for {crisp.n_features} features"
        )
    if len(action_labels) != crisp.n_actions:
        raise ValueError(
            f"{len(action_labels)} action labels for {crisp.n_actions} actions"
        )
    if format == "text":
        return _export_text(crisp, feature_names, action_labels)
    if format == "dot":
        return _export_dot(crisp, feature_names, action_labels)
    raise ValueError(f"unknown export format {format!r}, expected 'text' or 'dot'")


def _node_rule(crisp: CrispTree, node: int, feature_names: list[str]) -> str:
    name = feature_names[crisp.feature_index[node - 1]]
    rule = f"{name} >= {crisp.threshold[node - 1]:.6g}"
    if crisp.saturated[node - 1]:
        rule += " (saturated)"
    return rule


def _export_text(
    crisp: CrispTree, feature_names: list[str], action_labels: list[str]
) -> str:
    lines = [f"# thresholds in {crisp.threshold_units} units"]

    def walk(node: int, indent: int) -> None:
        pad = "  " * indent
        if node >= crisp.n_leaves:
            label = action_labels[crisp.leaf_action[node - crisp.n_leaves]]
            lines.append(f"{pad}action: {label}")
            return
        lines.append(f"{pad}if {_node_rule(crisp, node, feature_names)}:")
        walk(2 * node, indent + 1)
        lines.append(f"{pad}else:")
        walk(2 * node + 1, indent + 1)

    walk(1, 0)
    return "\n".join(lines) + "\n"


def _export_dot(
    crisp: CrispTree, feature_names: list[str], action_labels: list[str]
) -> str:
    def quote(s: str) -> str:
        return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'

    lines = [
        "digraph policy {",
        f"  // thresholds in {crisp.threshold_units} units",
        "  node [fontname=\"Helvetica\"];",
    ]
    for i in range(1, crisp.n_decision_nodes + 1):
        lines.append(
            f"  d{i} [shape=box, label={quote(_node_rule(crisp, i, feature_names))}];"
        )
    for j in range(crisp.n_leaves):
        label = action_labels[crisp.leaf_action[j]]
        lines.append(f"  l{j + 1} [shape=ellipse, label={quote(label)}];")
    for i in range(1, crisp.n_decision_nodes + 1):
        for child, side in ((2 * i, "yes"), (2 * i + 1, "no")):
            if child >= crisp.n_leaves:
                name = f"l{child - crisp.n_leaves + 1}"
            else:
                name = f"d{child}"
            lines.append(f"  d{i} -> {name} [label=\"{side}\"];")
    lines.append("}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# reachability


def analyze_reachability(
    crisp: CrispTree, feature_bounds: list[tuple[float, float]]
) -> list[int]:
    """Indices of leaves no input within ``feature_bounds`` can reach.

    Propagates one interval per feature down the tree: the left branch
    tightens the lower bound to the threshold (inclusive), the right branch
    tightens the upper bound to the threshold (exclusive). A leaf whose
    interval set is empty on some feature is unreachable. Returned indices
    are leaf positions counted left to right, sorted ascending.
    """
    if len(feature_bounds) != crisp.n_features:
        raise ValueError(
            f"{len(feature_bounds)} bounds for {crisp.n_features} features"
        )
    lo = np.array([b[0] for b in feature_bounds], dtype=np.float64)
    hi = np.array([b[1] for b in feature_bounds], dtype=np.float64)
    if np.any(lo > hi):
        raise ValueError("every feature bound needs lo <= hi")
    hi_open = np.zeros(crisp.n_features, dtype=bool)
    unreachable: list[int] = []

    def empty(lo_f: float, hi_f: float, open_f: bool) -> bool:
        return lo_f > hi_f or (lo_f == hi_f and open_f)

    def walk(node, lo, hi, hi_open, dead):
        if node >= crisp.n_leaves:
            if dead:
                unreachable.append(node - crisp.n_leaves)
            return
        f = int(crisp.feature_index[node - 1])
        t = float(crisp.threshold[node - 1])
        # left: x[f] >= t
        l_lo = lo.copy()
        l_lo[f] = max(l_lo[f], t)
        walk(2 * node, l_lo, hi, hi_open,
             dead or empty(l_lo[f], hi[f], hi_open[f]))
        # right: x[f] < t
        r_hi = hi.copy()
        r_open = hi_open.copy()
        if t <= r_hi[f]:
            r_hi[f] = min(r_hi[f], t)
            r_open[f] = True
        walk(2 * node + 1, lo, r_hi, r_open,
             dead or empty(lo[f], r_hi[f], r_open[f]))

    walk(1, lo, hi, hi_open, False)
    return sorted(unreachable)


# --------------------------------------------------------------------------
# checkpoints


def save_tree(tree: TreeParams, path: str | Path) -> None:
    """Write the tree as a versioned JSON checkpoint."""
    payload = {
        "format_version": TREE_CHECKPOINT_VERSION,
        "kind": "ddt",
        "depth": tree.depth,
        "n_features": tree.n_features,
        "n_actions": tree.n_actions,
        "beta": tree.beta.tolist(),
        "phi": tree.phi.tolist(),
        "w": tree.w.tolist(),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def load_tree(path: str | Path) -> TreeParams:
    """Read a tree checkpoint written by :func:`save_tree`."""
    payload = json.loads(Path(path).read_text())
    if payload.get("kind") != "ddt":
        raise ValueError(f"checkpoint kind {payload.get('kind')!r} is not 'ddt'")
    version = payload.get("format_version")
    if version != TREE_CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported tree checkpoint version {version!r}, "
            f"expected {TREE_CHECKPOINT_VERSION}"
        )
    return TreeParams(
        depth=payload["depth"],
        n_features=payload["n_features"],
        n_actions=payload["n_actions"],
        beta=np.array(payload["beta"], dtype=np.float64),
        phi=np.array(payload["phi"], dtype=np.float64),
        w=np.array(payload["w"], dtype=np.float64),
    )
