"""Recursive scoring of binary trees with a score head and a valence head.

Every internal node combines its children ``c1, c2`` into
``p = tanh([c1; c2] W + b1)`` and emits a score ``p W_score`` and a
valence ``p W_val``. A tree's score and valence are sums over its internal
nodes. Training maximizes the margin objective

    J = s(gold) - max_y [s(y) + D(y, gold)] + val(gold) - max_y [val(y) + D(y, gold)]

where ``D`` charges ``lam`` for every internal span of ``y`` missing from the
gold tree. Both maxima are found by enumerating all binary trees over the
leaves, which is only feasible for short sequences.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from qops import autodiff as ad
from qops import checkpoint
from qops.autodiff import Tensor
from qops.data import Vocab
from qops.seq2seq import ModelParams, check_shapes, init_tensors
from qops.training import AdamState, adam_step

SECTION = "TREE"


class CapacityError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Node:
    """Covers leaves ``start .. end-1``; leaves have no children."""

    start: int
    end: int
    left: "Node | None" = None
    right: "Node | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)

    def internal(self) -> list["Node"]:
        """Internal nodes in post-order (children before parents)."""
        if self.is_leaf:
            return []
        return self.left.internal() + self.right.internal() + [self]

    def spans(self) -> frozenset[tuple[int, int]]:
        return frozenset(n.span for n in self.internal())

    def __eq__(self, other) -> bool:
        return isinstance(other, Node) and self.span == other.span and self.spans() == other.spans()

    def __hash__(self) -> int:
        return hash((self.span, self.spans()))


def leaf(i: int) -> Node:
    return Node(i, i + 1)


def join(left: Node, right: Node) -> Node:
    if left.end != right.start:
        raise ValueError(f"children {left.span} and {right.span} are not adjacent")
    return Node(left.start, right.end, left, right)


def left_branching(n: int) -> Node:
    node = leaf(0)
    for i in range(1, n):
        node = join(node, leaf(i))
    return node


def right_branching(n: int) -> Node:
    node = leaf(n - 1)
    for i in range(n - 2, -1, -1):
        node = join(leaf(i), node)
    return node


# ---------------------------------------------------------------- bracket notation

_BRACKET_TOKEN = re.compile(r"\(|\)|[^\s()]+")


def parse_tree(text: str) -> tuple[list[str], Node]:
    """Parse ``((a b) (c d))`` into leaf symbols and a binary tree."""
    tokens = _BRACKET_TOKEN.findall(text)
    if not tokens:
        raise ValueError("empty tree string")
    leaves: list[str] = []
    pos = 0

    def parse() -> Node:
        nonlocal pos
        if pos >= len(tokens):
            raise ValueError(f"unexpected end of tree string {text!r}")
        tok = tokens[pos]
        pos += 1
        if tok == ")":
            raise ValueError(f"unexpected ')' in {text!r}")
        if tok != "(":
            leaves.append(tok)
            return leaf(len(leaves) - 1)
        children = []
        while pos < len(tokens) and tokens[pos] != ")":
            children.append(parse())
        if pos >= len(tokens):
            raise ValueError(f"unbalanced parentheses in {text!r}")
        pos += 1
        if len(children) == 1:
            return children[0]
        if len(children) != 2:
            raise ValueError(f"node with {len(children)} children is not binary in {text!r}")
        return join(*children)

    root = parse()
    if pos != len(tokens):
        raise ValueError(f"trailing tokens in {text!r}")
    return leaves, root


def format_tree(node: Node, leaves: Sequence[str]) -> str:
    if node.is_leaf:
        return leaves[node.start]
    return f"({format_tree(node.left, leaves)} {format_tree(node.right, leaves)})"


# ---------------------------------------------------------------- enumeration


def catalan(k: int) -> int:
    """C_k by the recurrence C_0 = 1, C_k = sum_i C_i C_{k-1-i}."""
    c = [1]
    for m in range(1, k + 1):
        c.append(sum(c[i] * c[m - 1 - i] for i in range(m)))
    return c[k]


def enumerate_trees(num_leaves: int, max_leaves: int = 10) -> list[Node]:
    """All binary trees over ``num_leaves`` ordered leaves (C_{n-1} of them)."""
    if num_leaves < 1:
        raise ValueError("need at least one leaf")
    if num_leaves > max_leaves:
        raise CapacityError(f"{num_leaves} leaves exceeds the enumeration limit of {max_leaves}")
    return list(_trees(0, num_leaves))


@lru_cache(maxsize=None)
def _trees(i: int, j: int) -> tuple[Node, ...]:
    if j - i == 1:
        return (leaf(i),)
    out = []
    for k in range(i + 1, j):
        for left in _trees(i, k):
            for right in _trees(k, j):
                out.append(join(left, right))
    return tuple(out)


def delta(y: Node, gold: Node, lam: float) -> float:
    """``lam`` times the number of internal spans of ``y`` absent from ``gold``."""
    return lam * len(y.spans() - gold.spans())


def gold_valence(tree: Node) -> dict[tuple[int, int], int]:
    """Leaves 0; an internal node counts its own rule plus all rules below it."""
    out: dict[tuple[int, int], int] = {}

    def walk(n: Node) -> int:
        if n.is_leaf:
            out[n.span] = 0
            return 0
        v = walk(n.left) + walk(n.right) + 1
        out[n.span] = v
        return v

    walk(tree)
    return out


# ---------------------------------------------------------------- scoring


@dataclass(frozen=True)
class MarginConfig:
    lam: float = 0.1
    max_leaves: int = 10
    dim: int = 4
    valence_weight: float = 0.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be > 0")


def scorer_shapes(n_symbols: int, dim: int) -> dict[str, tuple[int, int]]:
    return {
        "E_leaf": (n_symbols, dim),
        "W": (2 * dim, dim),
        "b1": (1, dim),
        "W_score": (dim, 1),
        "W_val": (dim, 1),
    }


def init_scorer(n_symbols: int, dim: int = 4, seed: int = 0, scale: float = 0.5) -> ModelParams:
    params = init_tensors(scorer_shapes(n_symbols, dim), seed)
    rng = np.random.default_rng(seed + 1)
    for name in ("E_leaf", "W", "W_score", "W_val"):
        params[name].data[...] = rng.uniform(-scale, scale, size=params[name].shape)
    return params


def combine(c1: Tensor, c2: Tensor, params: ModelParams) -> tuple[Tensor, Tensor, Tensor]:
    """Return (p, node score, node valence) for one collapsing decision."""
    n = params["b1"].shape[1]
    if c1.shape != (1, n) or c2.shape != (1, n):
        raise ad.DimensionError(f"children must be (1, {n}), got {c1.shape} and {c2.shape}")
    p = ad.tanh(ad.concat([c1, c2]) @ params["W"] + params["b1"])
    return p, p @ params["W_score"], p @ params["W_val"]


def leaf_vectors(symbol_ids: Sequence[int], params: ModelParams) -> list[Tensor]:
    return [ad.embedding_lookup(params["E_leaf"], int(i)) for i in symbol_ids]


def tree_score(tree: Node, leaves: Sequence[Tensor], params: ModelParams,
               node_values: dict | None = None) -> tuple[Tensor, Tensor]:
    """Sum of node scores and of node valences, evaluated bottom-up.

    ``node_values`` (keyed by node identity) lets callers share subtree
    results across many trees; it is filled as a side effect.
    """
    memo = node_values if node_values is not None else {}
    score_terms, val_terms = [], []

    def rep(node: Node) -> Tensor:
        if node.is_leaf:
            return leaves[node.start]
        key = id(node)
        if key not in memo:
            memo[key] = combine(rep(node.left), rep(node.right), params)
        return memo[key][0]

    for node in tree.internal():
        rep(node)
        _, s, v = memo[id(node)]
        score_terms.append(s)
        val_terms.append(v)
    if not score_terms:
        return ad.zeros(1, 1), ad.zeros(1, 1)
    return ad.sum_all(score_terms), ad.sum_all(val_terms)


@dataclass
class MarginResult:
    J: Tensor
    score_violator: Node
    valence_violator: Node

    @property
    def value(self) -> float:
        return self.J.item()


def _argmax(values: list[float], trees: list[Node], gold: Node) -> Node:
    best = max(values)
    for v, t in zip(values, trees):
        if v == best and t == gold:
            return t
    return trees[int(np.argmax(values))]


def margin_objective(symbol_ids: Sequence[int], gold: Node, params: ModelParams,
                     config: MarginConfig = MarginConfig()) -> MarginResult:
    """J for one instance; both maxima run over every tree, the gold one included."""
    trees = enumerate_trees(len(symbol_ids), config.max_leaves)
    deltas = [delta(t, gold, config.lam) for t in trees]
    with ad.no_grad():
        leaves = leaf_vectors(symbol_ids, params)
        shared: dict = {}
        scored = [tree_score(t, leaves, params, shared) for t in trees]
    aug_s = [s.item() + d for (s, _), d in zip(scored, deltas)]
    aug_v = [v.item() + d for (_, v), d in zip(scored, deltas)]
    vs = _argmax(aug_s, trees, gold)
    vv = _argmax(aug_v, trees, gold)
    leaves = leaf_vectors(symbol_ids, params)
    memo: dict = {}
    s_gold, v_gold = tree_score(gold, leaves, params, memo)
    s_viol, _ = tree_score(vs, leaves, params, memo)
    _, v_viol = tree_score(vv, leaves, params, memo)
    J = (s_gold - (s_viol + delta(vs, gold, config.lam))) + (v_gold - (v_viol + delta(vv, gold, config.lam)))
    return MarginResult(J, vs, vv)


def valence_loss(symbol_ids: Sequence[int], gold: Node, params: ModelParams) -> Tensor:
    """Squared error between predicted node valences and gold rule counts."""
    leaves = leaf_vectors(symbol_ids, params)
    target = gold_valence(gold)
    memo: dict = {}
    tree_score(gold, leaves, params, memo)
    terms = []
    for node in gold.internal():
        err = memo[id(node)][2] - float(target[node.span])
        terms.append(ad.mul(err, err))
    return ad.sum_all(terms) if terms else ad.zeros(1, 1)


# ---------------------------------------------------------------- training / io


@dataclass
class TreeInstance:
    leaves: tuple[str, ...]
    tree: Node

    @classmethod
    def from_json(cls, obj: dict) -> "TreeInstance":
        symbols, tree = parse_tree(obj["tree"])
        leaves = tuple(obj.get("leaves", symbols))
        if tuple(symbols) != leaves:
            raise ValueError(f"leaf list {leaves} does not match tree leaves {tuple(symbols)}")
        return cls(leaves, tree)

    def to_json(self) -> dict:
        return {"leaves": list(self.leaves), "tree": format_tree(self.tree, self.leaves)}


def read_instances(path: str | Path) -> list[TreeInstance]:
    with open(path, encoding="utf-8") as fh:
        return [TreeInstance.from_json(json.loads(line)) for line in fh if line.strip()]


@dataclass
class TreeModel:
    config: MarginConfig
    params: ModelParams
    vocab: Vocab
    history: list[float] = field(default_factory=list)


def objective(instances: Sequence[TreeInstance], model: TreeModel) -> tuple[Tensor, list[MarginResult]]:
    """Loss to minimize: -sum J_i, plus the optional valence regression term."""
    results, terms = [], []
    for inst in instances:
        ids = model.vocab.encode(inst.leaves)
        res = margin_objective(ids, inst.tree, model.params, model.config)
        results.append(res)
        terms.append(-res.J)
        if model.config.valence_weight > 0 and len(ids) > 1:
            terms.append(valence_loss(ids, inst.tree, model.params) * model.config.valence_weight)
    return ad.sum_all(terms), results


def train_scorer(instances: Sequence[TreeInstance], config: MarginConfig = MarginConfig(),
                 steps: int = 500, lr: float = 1e-2, seed: int = 0,
                 stop_at_zero: bool = True) -> TreeModel:
    """Subgradient ascent on J with Adam (full batch)."""
    vocab = Vocab(s for inst in instances for s in inst.leaves)
    model = TreeModel(config, init_scorer(len(vocab), config.dim, seed), vocab)
    tensors = model.params.tensors()
    state = AdamState.for_params(tensors)
    for _ in range(steps):
        ad.zero_grad(tensors)
        loss, results = objective(instances, model)
        model.history.append(sum(r.value for r in results))
        if stop_at_zero and all(r.value == 0.0 for r in results) and config.valence_weight == 0:
            break
        ad.backward(loss)
        adam_step(tensors, state, lr)
    ad.zero_grad(tensors)
    return model


def predict_tree(model: TreeModel, leaves: Sequence[str]) -> Node:
    """Highest-scoring tree under the score head (no margin term)."""
    ids = model.vocab.encode(leaves)
    trees = enumerate_trees(len(ids), model.config.max_leaves)
    with ad.no_grad():
        vecs = leaf_vectors(ids, model.params)
        shared: dict = {}
        scores = [tree_score(t, vecs, model.params, shared)[0].item() for t in trees]
    return trees[int(np.argmax(scores))]


def save_scorer(model: TreeModel, path: str | Path) -> None:
    cfg = {f"margin.{k}": str(v) for k, v in asdict(model.config).items()}
    cfg["leaf_vocab"] = json.dumps(model.vocab.symbols)
    checkpoint.save(path, SECTION, cfg, model.params.arrays())


def load_scorer(path: str | Path) -> TreeModel:
    _, cfg, arrays = checkpoint.load(path, SECTION)
    try:
        mc = MarginConfig(lam=float(cfg["margin.lam"]), max_leaves=int(cfg["margin.max_leaves"]),
                          dim=int(cfg["margin.dim"]), valence_weight=float(cfg["margin.valence_weight"]))
        vocab = Vocab.from_symbols(json.loads(cfg["leaf_vocab"]))
    except (KeyError, ValueError) as exc:
        raise checkpoint.FormatError(f"{path}: bad config block ({exc})") from exc
    params = ModelParams.from_arrays(arrays)
    check_shapes(params, scorer_shapes(len(vocab), mc.dim))
    return TreeModel(mc, params, vocab)
