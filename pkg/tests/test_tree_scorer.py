import math
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qops import autodiff as ad
from qops.autodiff import Tensor
from qops.tree_scorer import (
    CapacityError,
    MarginConfig,
    TreeInstance,
    catalan,
    combine,
    delta,
    enumerate_trees,
    format_tree,
    gold_valence,
    init_scorer,
    join,
    leaf,
    leaf_vectors,
    left_branching,
    load_scorer,
    margin_objective,
    parse_tree,
    predict_tree,
    right_branching,
    save_scorer,
    train_scorer,
    tree_score,
)


def zero_params(n_symbols=4, dim=2):
    params = init_scorer(n_symbols, dim, seed=0)
    for t in params.tensors():
        t.data[...] = 0.0
    return params


class TestCombine:
    def test_closed_form(self):
        params = zero_params(dim=1)
        params["W"].data[...] = [[0.5], [0.5]]
        params["W_score"].data[...] = 2.0
        params["W_val"].data[...] = -1.0
        p, s, v = combine(Tensor([[1.0]]), Tensor([[1.0]]), params)
        assert p.item() == pytest.approx(0.761594, abs=1e-6)
        assert s.item() == pytest.approx(2 * math.tanh(1.0), abs=1e-15)
        assert v.item() == pytest.approx(-math.tanh(1.0), abs=1e-15)

    def test_bad_child_width(self):
        with pytest.raises(ad.DimensionError):
            combine(Tensor([[1.0]]), Tensor([[1.0, 2.0]]), zero_params(dim=2))

    def test_single_leaf_scores_zero(self):
        params = init_scorer(3, 2)
        s, v = tree_score(leaf(0), leaf_vectors([1], params), params)
        assert s.item() == 0.0 and v.item() == 0.0

    def test_tree_score_is_sum_of_nodes(self):
        params = init_scorer(5, 3, seed=2)
        tree = join(join(leaf(0), leaf(1)), leaf(2))
        vecs = leaf_vectors([4, 3, 2], params)
        p1, s1, v1 = combine(vecs[0], vecs[1], params)
        _, s2, v2 = combine(p1, vecs[2], params)
        s, v = tree_score(tree, vecs, params)
        assert s.item() == pytest.approx(s1.item() + s2.item(), abs=1e-15)
        assert v.item() == pytest.approx(v1.item() + v2.item(), abs=1e-15)


class TestTrees:
    @pytest.mark.parametrize("n", range(1, 11))
    def test_catalan_counts(self, n):
        trees = enumerate_trees(n)
        # closed form C_k = binom(2k, k) / (k + 1) as an independent oracle
        assert len(trees) == catalan(n - 1) == comb(2 * (n - 1), n - 1) // n
        assert len(set(trees)) == len(trees)

    def test_capacity(self):
        with pytest.raises(CapacityError):
            enumerate_trees(11)

    def test_gold_valence_root(self):
        for n in range(1, 7):
            for tree in enumerate_trees(n):
                assert gold_valence(tree)[(0, n)] == n - 1

    def test_delta_left_vs_right(self):
        assert delta(left_branching(4), right_branching(4), 0.1) == pytest.approx(0.2)

    @pytest.mark.parametrize("n", range(1, 7))
    def test_delta_zero_iff_equal(self, n):
        trees = enumerate_trees(n)
        for a in trees:
            for b in trees:
                assert (delta(a, b, 0.1) == 0) == (a == b)

    def test_bracket_round_trip(self):
        leaves, tree = parse_tree("((a b) (c d))")
        assert leaves == ["a", "b", "c", "d"] and tree.spans() == {(0, 2), (2, 4), (0, 4)}
        assert format_tree(tree, leaves) == "((a b) (c d))"

    @pytest.mark.parametrize("bad", ["", "(a b", "(a b c)", "a b", "(a b))"])
    def test_bracket_errors(self, bad):
        with pytest.raises(ValueError):
            parse_tree(bad)

    def test_join_adjacency(self):
        with pytest.raises(ValueError):
            join(leaf(0), leaf(2))


class TestMargin:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 10_000))
    def test_objective_never_positive(self, n, seed):
        rng = np.random.default_rng(seed)
        params = init_scorer(6, 3, seed=seed)
        trees = enumerate_trees(n)
        gold = trees[int(rng.integers(len(trees)))]
        ids = [int(i) for i in rng.integers(4, 6, size=n)]
        assert margin_objective(ids, gold, params).value <= 0.0

    def test_zero_params(self):
        gold = left_branching(4)
        res = margin_objective([4, 5, 4, 5], gold, zero_params(6), MarginConfig(lam=0.1))
        # every score is 0, so each violator is a tree sharing no non-root span with gold
        assert res.value == pytest.approx(-2 * 0.1 * 2, abs=1e-15)
        assert delta(res.score_violator, gold, 0.1) == pytest.approx(0.2)

    def test_ties_prefer_gold(self):
        params = zero_params(6)
        res = margin_objective([4, 5], join(leaf(0), leaf(1)), params)
        assert res.value == 0.0 and res.score_violator == join(leaf(0), leaf(1))

    def test_gradient_check(self):
        params = init_scorer(6, 3, seed=7)
        gold = right_branching(4)
        ids = [4, 5, 5, 4]
        assert margin_objective(ids, gold, params).value < 0  # violators differ from gold, no ties
        err = ad.grad_check(lambda: -margin_objective(ids, gold, params).J, params.tensors())
        assert err <= 1e-4

    def test_subgradient_step_raises_objective(self):
        params = init_scorer(6, 3, seed=3)
        gold = left_branching(5)
        ids = [4, 5, 4, 5, 4]
        before = margin_objective(ids, gold, params)
        ad.backward(-before.J)
        for t in params.tensors():
            t.data -= 1e-3 * t.grad
        assert margin_objective(ids, gold, params).value > before.value


class TestTraining:
    def test_reaches_zero_and_round_trips(self, tmp_path):
        inst = [TreeInstance.from_json({"tree": "((a b) (c d))"})]
        model = train_scorer(inst, MarginConfig(lam=0.1, dim=4), steps=500, lr=0.05, seed=0)
        assert model.history[-1] == 0.0 and len(model.history) <= 500
        assert predict_tree(model, ["a", "b", "c", "d"]) == inst[0].tree
        save_scorer(model, tmp_path / "t.bin")
        back = load_scorer(tmp_path / "t.bin")
        assert back.config == model.config
        assert all(np.array_equal(back.params[k].data, model.params[k].data) for k in model.params)

    def test_instance_leaf_mismatch(self):
        with pytest.raises(ValueError):
            TreeInstance.from_json({"leaves": ["a", "c"], "tree": "(a b)"})
