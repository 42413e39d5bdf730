"""Finite event-tree market models.

A market consists of a constant bond (price 1) and d risky assets on a
rooted path tree: nodes are information states, leaves are terminal
outcomes.  Trees are stored non-recombining; recombining lattices must be
unrolled into path trees before loading.

Array conventions
-----------------
Nodes are held in canonical order: stable-sorted by time, so parents come
before children and each time level is a contiguous slice.  Leaf order is
the document order of the time-T nodes, and every terminal random
variable ("outcome vector") is a plain float array indexed that way.
Adapted processes are float arrays over all nodes, measures are
probability arrays over leaves, and a predictable strategy is an
``(n_nonleaf, d)`` array of holdings over the following period.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels

PROB_FLOOR = 1e-12


class ModelError(ValueError):
    """Raised when a model document cannot be built or used."""


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass
class ArbitrageCertificate:
    """A one-node strategy with nonnegative, somewhere-positive gain at zero cost."""

    node: int
    direction: np.ndarray          # holdings in the d assets at that node
    child_gains: np.ndarray        # gain over each child edge
    strategy: np.ndarray           # full (n_nonleaf, d) predictable strategy

    def __repr__(self):
        return (f"ArbitrageCertificate(node={self.node}, "
                f"direction={np.array2string(self.direction, precision=6)})")


class MarketTree:
    """Event tree with transition probabilities and per-node asset prices."""

    def __init__(self, parent, time, edge_prob, prices, labels=None):
        self.parent = np.asarray(parent, dtype=np.int64)
        self.time = np.asarray(time, dtype=np.int64)
        self.edge_prob = np.asarray(edge_prob, dtype=np.float64)
        self.prices = np.atleast_2d(np.asarray(prices, dtype=np.float64))
        self.n = self.parent.shape[0]
        self.d = self.prices.shape[1]
        self.T = int(self.time.max()) if self.n else 0
        self.labels = list(labels) if labels is not None else [str(i) for i in range(self.n)]

        if self.n == 0:
            raise ModelError("empty tree")
        if not np.all(np.diff(self.time) >= 0):
            raise ModelError("nodes are not in canonical (time-sorted) order")
        if self.time[0] != 0 or self.parent[0] != -1:
            raise ModelError("first node must be the root at time 0")
        if np.any(self.parent[1:] < 0) or np.any(self.parent[1:] >= np.arange(1, self.n)):
            raise ModelError("every non-root node needs an earlier parent")
        if np.any(self.time[1:] != self.time[self.parent[1:]] + 1):
            raise ModelError("child time must be parent time + 1")

        # contiguous time levels
        self.level_starts = np.searchsorted(self.time, np.arange(self.T + 2))
        self.is_leaf = self.time == self.T
        self.leaf_ids = np.flatnonzero(self.is_leaf)
        self.n_leaves = self.leaf_ids.shape[0]
        self.nonleaf_ids = np.flatnonzero(~self.is_leaf)
        # strategy row of each non-leaf node (-1 for leaves)
        self.srow = np.full(self.n, -1, dtype=np.int64)
        self.srow[self.nonleaf_ids] = np.arange(self.nonleaf_ids.shape[0])

        self.children = [[] for _ in range(self.n)]
        for i in range(1, self.n):
            self.children[self.parent[i]].append(i)

        self.path_prob = np.ones(self.n)
        for t in range(1, self.T + 1):
            lo, hi = self.level_starts[t], self.level_starts[t + 1]
            self.path_prob[lo:hi] = self.path_prob[self.parent[lo:hi]] * self.edge_prob[lo:hi]
        self.leaf_prob = self.path_prob[self.leaf_ids]
        self._gain_matrix = None

    # -- constructors -------------------------------------------------------

    @classmethod
    def from_nodes(cls, nodes):
        """Build from a list of node dicts (id, parent, time, prob, prices)."""
        by_id = {}
        for spec in nodes:
            nid = spec["id"]
            if nid in by_id:
                raise ModelError(f"duplicate node id {nid!r}")
            by_id[nid] = spec
        roots = [s for s in nodes if s.get("parent") is None]
        if len(roots) != 1:
            raise ModelError(f"expected exactly one root node, found {len(roots)}")
        for s in nodes:
            pid = s.get("parent")
            if pid is not None and pid not in by_id:
                raise ModelError(f"orphan node {s['id']!r}: unknown parent {pid!r}")

        order = sorted(range(len(nodes)), key=lambda i: nodes[i]["time"])
        pos = {nodes[i]["id"]: k for k, i in enumerate(order)}
        parent, time, prob, prices, labels = [], [], [], [], []
        for k, i in enumerate(order):
            s = nodes[i]
            pid = s.get("parent")
            parent.append(-1 if pid is None else pos[pid])
            time.append(int(s["time"]))
            prob.append(1.0 if pid is None else float(s["prob"]))
            prices.append([float(v) for v in np.atleast_1d(s["prices"])])
            labels.append(str(s["id"]))
        return cls(parent, time, prob, prices, labels)

    @classmethod
    def one_period(cls, s0, outcomes, probs, labels=None):
        """One-period model: root prices s0, one child per outcome row."""
        s0 = np.atleast_1d(np.asarray(s0, dtype=float))
        outcomes = np.atleast_2d(np.asarray(outcomes, dtype=float))
        if outcomes.shape[1] != s0.shape[0]:
            outcomes = outcomes.reshape(-1, s0.shape[0])
        probs = np.asarray(probs, dtype=float)
        parent = [-1] + [0] * outcomes.shape[0]
        time = [0] + [1] * outcomes.shape[0]
        prob = [1.0] + list(probs)
        prices = [list(s0)] + [list(r) for r in outcomes]
        return cls(parent, time, prob, prices, labels)

    # -- helpers ------------------------------------------------------------

    def cond_prob(self, node):
        kids = self.children[node]
        return kids, self.edge_prob[kids]

    def gain_matrix(self):
        """(leaves x strategy coords) map: terminal gain of each unit holding.

        Column ``srow(n) * d + j`` is the outcome vector of holding one unit
        of asset j over the single period that starts at non-leaf node n.
        """
        if self._gain_matrix is None:
            K = self.nonleaf_ids.shape[0] * self.d
            J = np.zeros((self.n_leaves, K))
            for li, leaf in enumerate(self.leaf_ids):
                node = int(leaf)
                while self.parent[node] >= 0:
                    par = self.parent[node]
                    base = self.srow[par] * self.d
                    J[li, base:base + self.d] = self.prices[node] - self.prices[par]
                    node = int(par)
            self._gain_matrix = J
        return self._gain_matrix

    def to_document(self):
        nodes = []
        for i in range(self.n):
            nodes.append({
                "id": self.labels[i],
                "parent": None if self.parent[i] < 0 else self.labels[self.parent[i]],
                "time": int(self.time[i]),
                "prob": float(self.edge_prob[i]) if self.parent[i] >= 0 else None,
                "prices": [float(v) for v in self.prices[i]],
            })
        return {"times": list(range(self.T + 1)),
                "assets": [f"S{j + 1}" for j in range(self.d)],
                "nodes": nodes}


# ---------------------------------------------------------------------------
# loading / validation
# ---------------------------------------------------------------------------

def load_model(path) -> MarketTree:
    with open(path) as fh:
        doc = json.load(fh)
    return model_from_document(doc)


def model_from_document(doc) -> MarketTree:
    try:
        nodes = doc["nodes"]
    except (TypeError, KeyError) as exc:
        raise ModelError("model document needs a 'nodes' list") from exc
    return MarketTree.from_nodes(nodes)


def save_model(model: MarketTree, path):
    with open(path, "w") as fh:
        json.dump(model.to_document(), fh, indent=1, sort_keys=True)


def validate_tree(model: MarketTree) -> ValidationReport:
    """Check all structural invariants; returns the list of violations."""
    rep = ValidationReport()
    for node in range(model.n):
        kids = model.children[node]
        if model.time[node] < model.T and not kids:
            rep.violations.append(
                f"node {model.labels[node]} at time {model.time[node]} has no children")
        if kids:
            if model.time[node] == model.T:
                rep.violations.append(f"node {model.labels[node]} at terminal time has children")
            psum = float(model.edge_prob[kids].sum())
            if abs(psum - 1.0) > 1e-12:
                rep.violations.append(
                    f"node {model.labels[node]}: probability sum {psum:.12g} != 1")
    small = np.flatnonzero(model.edge_prob[1:] < PROB_FLOOR) + 1
    for i in small:
        rep.violations.append(
            f"node {model.labels[i]}: transition probability {model.edge_prob[i]:.3g} "
            f"below floor {PROB_FLOOR:g}")
    bad_price = np.flatnonzero(np.any(model.prices <= 0.0, axis=1))
    for i in bad_price:
        rep.violations.append(f"node {model.labels[i]}: nonpositive price")
    if np.any(model.leaf_prob <= 0.0):
        rep.violations.append("some leaf path-probability is not strictly positive")
    return rep


def validate_model_document(doc) -> ValidationReport:
    """Document-level validation: structural build errors become violations."""
    try:
        model = model_from_document(doc)
    except ModelError as exc:
        return ValidationReport([str(exc)])
    return validate_tree(model)


# ---------------------------------------------------------------------------
# wealth arithmetic
# ---------------------------------------------------------------------------

def _as_strategy(model: MarketTree, H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim == 0:
        H = np.full((model.nonleaf_ids.shape[0], model.d), float(H))
    if H.ndim == 1:
        if model.d == 1 and H.shape[0] == model.nonleaf_ids.shape[0]:
            H = H[:, None]
        elif H.shape[0] == model.d and model.nonleaf_ids.shape[0] == 1:
            H = H[None, :]
        else:
            raise ModelError(f"strategy shape {H.shape} does not match model")
    if H.shape != (model.nonleaf_ids.shape[0], model.d):
        raise ModelError(f"strategy shape {H.shape} does not match model")
    return np.ascontiguousarray(H)


def wealth_process(model: MarketTree, x, H) -> np.ndarray:
    """Node-wise wealth of the self-financing portfolio (x, H)."""
    H = _as_strategy(model, H)
    return kernels.propagate_wealth(model.parent, model.srow, model.level_starts,
                                    model.prices, H, float(x))


def admissible(model: MarketTree, x, H) -> bool:
    """True iff the wealth process stays nonnegative at every node."""
    return bool(wealth_process(model, x, H).min() >= -1e-12)


def terminal_gain_span(model: MarketTree) -> np.ndarray:
    """Spanning set (columns) of attainable zero-cost terminal gains."""
    return model.gain_matrix()


def numeraire_change(model: MarketTree, X) -> MarketTree:
    """New model with prices (1/X, S/X) for a strictly positive process X."""
    X = np.asarray(X, dtype=float)
    if X.shape != (model.n,):
        raise ModelError("numeraire process must be defined on every node")
    if np.any(X <= 0.0):
        raise ModelError("numeraire process must be strictly positive at every node")
    prices = np.column_stack([1.0 / X, model.prices / X[:, None]])
    return MarketTree(model.parent, model.time, model.edge_prob, prices, model.labels)


def conditional_expectation(rv, measure, model: MarketTree) -> np.ndarray:
    """Adapted process of conditional expectations of a terminal variable.

    ``measure`` is a leaf probability vector; it must put strictly positive
    mass under every node.
    """
    rv = np.asarray(rv, dtype=float)
    w = np.asarray(measure, dtype=float)
    num = np.zeros(model.n)
    den = np.zeros(model.n)
    num[model.leaf_ids] = w * rv
    den[model.leaf_ids] = w
    num = kernels.aggregate_up(model.parent, model.level_starts, num)
    den = kernels.aggregate_up(model.parent, model.level_starts, den)
    if np.any(den <= 0.0):
        raise ModelError("measure has zero total mass under some node")
    return num / den


def leaf_measure_to_edges(model: MarketTree, leaf_q) -> np.ndarray:
    """Edge (one-step conditional) probabilities of a leaf measure."""
    mass = np.zeros(model.n)
    mass[model.leaf_ids] = np.asarray(leaf_q, dtype=float)
    mass = kernels.aggregate_up(model.parent, model.level_starts, mass)
    edge = np.ones(model.n)
    edge[1:] = mass[1:] / mass[model.parent[1:]]
    return edge


# ---------------------------------------------------------------------------
# martingale measure / arbitrage
# ---------------------------------------------------------------------------

def _node_measure(dS, p):
    """KL projection of child probabilities p onto the martingale set.

    Minimizes KL(q || p) subject to sum(q * dS) = 0, by Newton on the
    log-partition function of the exponential family q ~ p * exp(theta . dS).
    Returns (q, None) on success or (None, direction) when the zero vector
    is not in the relative interior of the increments' convex hull, in which
    case ``direction`` is an arbitrage direction h with h . dS >= 0 for all
    children and > 0 for at least one.
    """
    nc, d = dS.shape
    scale = np.abs(dS).max()
    if scale <= 1e-14:
        return p.copy(), None
    z = dS / scale
    # restrict to the effective span of the increments
    u, sv, vt = np.linalg.svd(z, full_matrices=False)
    rank = int(np.sum(sv > 1e-13 * sv[0]))
    vr = vt[:rank].T
    zr = z @ vr

    theta = np.zeros(rank)
    logp = np.log(p)

    def fval(th):
        expo = logp + zr @ th
        m = expo.max()
        return m + np.log(np.exp(expo - m).sum())

    def weights(th):
        expo = logp + zr @ th
        expo -= expo.max()
        q = np.exp(expo)
        return q / q.sum()

    eps = np.finfo(float).eps
    f = fval(theta)
    for _ in range(300):
        q = weights(theta)
        grad = q @ zr
        gnorm = np.abs(grad).max()
        if gnorm <= 1e-13:
            if q.min() >= PROB_FLOOR:
                return q, None
            break  # mass escapes to a face: no equivalent measure
        if np.abs(theta).max() > 400.0 or f < logp.min() - 40.0:
            break
        cov = zr.T @ (q[:, None] * zr) - np.outer(grad, grad)
        try:
            step = np.linalg.solve(cov + 1e-14 * np.eye(rank), -grad)
        except np.linalg.LinAlgError:
            step = -grad
        slope = float(grad @ step)
        if slope >= 0.0:
            step = -grad
            slope = -float(grad @ grad)
        # below the float resolution of f the line search cannot see the
        # remaining descent; take the (tiny) capped Newton step as is
        if -slope <= 64.0 * eps * (1.0 + abs(f)):
            cap = np.abs(step).max()
            if cap > 1.0:
                step /= cap
            theta = theta + step
            f = fval(theta)
            continue
        t = 1.0
        for _ in range(60):
            f_try = fval(theta + t * step)
            if f_try <= f + 0.25 * t * slope:
                break
            t *= 0.5
        theta = theta + t * step
        f = f_try
    # divergence: -theta separates the increments from the origin
    h = vr @ (-theta)
    nh = np.linalg.norm(h)
    if nh == 0.0:
        h = vr @ np.ones(rank)
        nh = np.linalg.norm(h)
    h /= nh
    gains = z @ h
    if gains.min() < -1e-9 or gains.max() <= 1e-12:
        return None, None  # numerically undecidable; caller raises
    return None, h


def find_martingale_measure(model: MarketTree):
    """Equivalent martingale measure (leaf weights) or an arbitrage certificate.

    The martingale condition is local on trees, so a per-node feasibility
    problem is solved at each non-leaf node and the leaf density assembled
    from edge products.
    """
    edge_q = np.ones(model.n)
    for node in model.nonleaf_ids:
        kids = model.children[node]
        dS = model.prices[kids] - model.prices[node]
        p = model.edge_prob[kids]
        q, h = _node_measure(dS, p / p.sum())
        if q is None:
            if h is None:
                raise ModelError(
                    f"martingale feasibility undecidable at node {model.labels[node]}")
            strategy = np.zeros((model.nonleaf_ids.shape[0], model.d))
            strategy[model.srow[node]] = h
            return ArbitrageCertificate(node=int(node), direction=h,
                                        child_gains=dS @ h, strategy=strategy)
        edge_q[kids] = q
    q_path = np.ones(model.n)
    for t in range(1, model.T + 1):
        lo, hi = model.level_starts[t], model.level_starts[t + 1]
        q_path[lo:hi] = q_path[model.parent[lo:hi]] * edge_q[lo:hi]
    return q_path[model.leaf_ids]


# ---------------------------------------------------------------------------
# random models for test batteries
# ---------------------------------------------------------------------------

def random_tree(rng, periods=None, children=(2, 4), assets=(1, 3),
                vol=0.25, min_children=None) -> MarketTree:
    """Random arbitrage-free path tree with strictly positive prices.

    Child prices at each node are scaled so that a strictly positive
    reference measure prices them back to the parent, which certifies the
    absence of arbitrage by construction.
    """
    T = int(periods) if periods is not None else int(rng.integers(1, 4))
    d = int(rng.integers(assets[0], assets[1] + 1))
    lo = children[0] if min_children is None else max(children[0], min_children)
    nodes = [{"id": "0", "parent": None, "time": 0,
              "prices": list(np.exp(rng.normal(0.0, 0.1, d)))}]
    frontier = [0]
    for t in range(1, T + 1):
        new_frontier = []
        for ni in frontier:
            nc = int(rng.integers(lo, children[1] + 1))
            p = rng.dirichlet(np.full(nc, 4.0))
            p = np.maximum(p, 0.05)
            p /= p.sum()
            qref = rng.dirichlet(np.full(nc, 4.0))
            qref = np.maximum(qref, 0.05)
            qref /= qref.sum()
            parent_prices = np.asarray(nodes[ni]["prices"])
            factors = np.exp(rng.normal(0.0, vol, (nc, d)))
            factors /= qref @ factors  # per-asset martingale under qref
            for c in range(nc):
                nodes.append({"id": str(len(nodes)), "parent": nodes[ni]["id"],
                              "time": t, "prob": float(p[c]),
                              "prices": list(parent_prices * factors[c])})
                new_frontier.append(len(nodes) - 1)
        frontier = new_frontier
    return MarketTree.from_nodes(nodes)
