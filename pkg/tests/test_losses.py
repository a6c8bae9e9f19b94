import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nprepmet.embed_net import NPEmbedding
from nprepmet.errors import ConfigError, UsageError
from nprepmet.geometry import IGNORED, NEGATIVE, POSITIVE
from nprepmet.losses import LossConfig, batch_loss, cross_entropy, triplet_neg, triplet_pos
from nprepmet.representatives import ProbConfig, RepBank, class_posterior, class_probability, min_distances
from oracles import unit_rows

X = np.array([1.0, 0.0, 0.0])


def at_distance(d, axis=1):
    """Unit vector at Euclidean distance ``d`` from ``X``."""
    c = 1.0 - d * d / 2.0
    v = np.zeros(3)
    v[0], v[axis] = c, math.sqrt(max(0.0, 1.0 - c * c))
    return v


def pos_triplet_bank(d_same, d_mixed, d_other):
    """Bank whose class-0 distances to ``X`` realise the three positive-triplet terms."""
    pos = np.stack([[at_distance(d_same)], [at_distance(d_other, 2)]])
    neg = np.stack([[at_distance(d_mixed)], [-X]])
    return RepBank(pos, neg)


class TestTripletHandValues:
    @pytest.mark.parametrize(
        "d_same, d_mixed, d_other, expected",
        [
            (0.0, 1.0, 1.0, 0.0),
            (0.7, 0.7, 0.7, 0.5),
            (1.5, 0.5, 0.5, 1.5),
        ],
    )
    def test_positive_triplet(self, d_same, d_mixed, d_other, expected):
        r = triplet_pos(NPEmbedding(e_neg=X, e_pos=X), pos_triplet_bank(d_same, d_mixed, d_other), 0, 0.5)
        assert r.loss == pytest.approx(expected, abs=1e-9)

    def test_negative_triplet(self):
        # d_neg_same=2, d_pos_same=0, d_neg_other=0 -> 2 - 0 + 0.5
        bank = RepBank(np.stack([[X], [at_distance(1.0)]]), np.stack([[-X], [X]]))
        r = triplet_neg(NPEmbedding(e_neg=X, e_pos=X), bank, 0, 0.5)
        assert r.loss == pytest.approx(2.5, abs=1e-9)

    def test_negative_triplet_mirror_of_zero_case(self):
        b = pos_triplet_bank(0.0, 1.0, 1.0)
        r = triplet_neg(NPEmbedding(e_neg=X, e_pos=X), RepBank(b.neg, b.pos), 0, 0.5)
        assert r.loss == pytest.approx(0.0, abs=1e-9)

    def test_negative_triplet_equal_distances(self):
        b = pos_triplet_bank(0.4, 0.4, 0.4)
        r = triplet_neg(NPEmbedding(e_neg=X, e_pos=X), RepBank(b.neg, b.pos), 0, 0.5)
        assert r.loss == pytest.approx(0.5, abs=1e-9)

    def test_needs_two_classes(self):
        bank = RepBank(np.array([[X]]), np.array([[X]]))
        with pytest.raises(ConfigError):
            triplet_pos(NPEmbedding(X, X), bank, 0)

    def test_flat_region_has_zero_gradient(self):
        r = triplet_pos(NPEmbedding(X, X), pos_triplet_bank(0.0, 1.5, 1.5), 0, 0.5)
        assert r.loss == 0.0
        assert not r.grad_emb.any() and not r.grad_pos.any() and not r.grad_neg.any()

    def test_kink_takes_zero_branch(self):
        bank = RepBank(np.stack([[X], [-X]]), np.stack([[-X], [X]]))
        # d_same 0, d_mixed 2, d_other 2: with alpha 2 the hinge argument is exactly 0
        r = triplet_pos(NPEmbedding(X, X), bank, 0, 2.0)
        assert r.loss == 0.0 and not r.grad_emb.any()

    def test_argmin_tie_lowest_index(self):
        pos = np.stack([[at_distance(1.0), at_distance(1.0)], [-X, -X]])
        neg = np.stack([[X, X], [X, X]])
        # 1 - (0 + 2) / 2 + 0.5 = 0.5
        r = triplet_pos(NPEmbedding(X, X), RepBank(pos, neg), 0, 0.5)
        assert r.loss == pytest.approx(0.5, abs=1e-12)
        assert r.grad_pos[0, 0].any() and not r.grad_pos[0, 1].any()


class TestMirrorSymmetry:
    @given(st.integers(0, 10_000), st.integers(0, 3), st.floats(0.0, 1.0))
    def test_exact(self, seed, cls, alpha):
        rng = np.random.default_rng(seed)
        bank = RepBank(unit_rows(rng, 4, 3, 5), unit_rows(rng, 4, 3, 5))
        emb = NPEmbedding(unit_rows(rng, 5), unit_rows(rng, 5))
        a = triplet_pos(emb, bank, cls, alpha)
        b = triplet_neg(NPEmbedding(e_neg=emb.e_pos, e_pos=emb.e_neg), RepBank(bank.neg, bank.pos), cls, alpha)
        assert a.loss == b.loss
        assert np.array_equal(a.grad_emb, b.grad_emb)
        assert np.array_equal(a.grad_pos, b.grad_neg) and np.array_equal(a.grad_neg, b.grad_pos)

    @given(st.integers(0, 10_000))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        bank = RepBank(unit_rows(rng, 3, 2, 4), unit_rows(rng, 3, 2, 4))
        emb = NPEmbedding(unit_rows(rng, 4), unit_rows(rng, 4))
        assert triplet_pos(emb, bank, 1).loss >= 0 and triplet_neg(emb, bank, 2).loss >= 0


class TestCrossEntropy:
    def test_certain(self):
        assert cross_entropy(np.array([1.0, 0.0]), 0)[0] == 0.0

    def test_uniform_five(self):
        assert cross_entropy(np.full(5, 0.2), 3)[0] == pytest.approx(math.log(5), abs=1e-9)
        assert math.log(5) == pytest.approx(1.609438, abs=1e-6)

    def test_quarter(self):
        assert cross_entropy(np.array([0.25, 0.75]), 0)[0] == pytest.approx(math.log(4), abs=1e-9)
        assert math.log(4) == pytest.approx(1.386294, abs=1e-6)

    def test_gradient(self):
        _, g = cross_entropy(np.array([0.25, 0.75]), 0)
        assert g.tolist() == [-4.0, 0.0]

    @pytest.mark.parametrize("t", [-1, 2])
    def test_target_range(self, t):
        with pytest.raises(UsageError):
            cross_entropy(np.array([0.5, 0.5]), t)


def per_item_reference(e_neg, e_pos, kinds, classes, bank, prob, lc):
    """Batch loss recomputed one proposal at a time from the public pieces."""
    trips, ces = [], []
    for i, k in enumerate(kinds):
        if k == IGNORED:
            continue
        emb = NPEmbedding(e_neg[i], e_pos[i])
        q = class_posterior(class_probability(min_distances(bank, emb), prob), prob)
        if k == POSITIVE:
            trips.append(triplet_pos(emb, bank, classes[i], lc.alpha).loss)
            ces.append(cross_entropy(q, classes[i])[0])
        else:
            trips.append(triplet_neg(emb, bank, classes[i], lc.alpha).loss)
            ces.append(cross_entropy(q, bank.n_classes)[0])
    return float(np.mean(trips)), float(np.mean(ces))


class TestBatchLoss:
    def setup_method(self):
        rng = np.random.default_rng(2)
        self.bank = RepBank(unit_rows(rng, 4, 3, 6), unit_rows(rng, 4, 3, 6))
        self.e_neg, self.e_pos = unit_rows(rng, 9, 6), unit_rows(rng, 9, 6)
        self.kinds = np.array([POSITIVE, NEGATIVE, IGNORED, POSITIVE, NEGATIVE, NEGATIVE, IGNORED, POSITIVE, POSITIVE])
        self.classes = np.array([0, 1, -1, 3, 3, 2, -1, 1, 0])

    def test_only_ignored_rejected(self):
        with pytest.raises(UsageError):
            batch_loss(self.e_neg[:2], self.e_pos[:2], np.array([IGNORED, IGNORED]), np.array([-1, -1]),
                       self.bank, ProbConfig(), LossConfig())

    def test_singleton_positive(self):
        br, _ = batch_loss(self.e_neg[:1], self.e_pos[:1], self.kinds[:1], self.classes[:1],
                           self.bank, ProbConfig(), LossConfig())
        emb = NPEmbedding(self.e_neg[0], self.e_pos[0])
        q = class_posterior(class_probability(min_distances(self.bank, emb), ProbConfig()), ProbConfig())
        expected = cross_entropy(q, 0)[0] + triplet_pos(emb, self.bank, 0).loss
        assert br.total == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("weights", [(1.0, 1.0), (0.3, 2.0), (0.0, 1.0)])
    def test_mixed_matches_per_item(self, weights):
        lc = LossConfig(ce_weight=weights[0], triplet_weight=weights[1])
        br, _ = batch_loss(self.e_neg, self.e_pos, self.kinds, self.classes, self.bank, ProbConfig(), lc)
        trip, ce = per_item_reference(self.e_neg, self.e_pos, self.kinds, self.classes, self.bank, ProbConfig(), lc)
        assert br.triplet == pytest.approx(trip, abs=1e-12)
        assert br.cross_entropy == pytest.approx(ce, abs=1e-12)
        assert br.total == pytest.approx(lc.ce_weight * ce + lc.triplet_weight * trip, abs=1e-12)

    def test_ignored_rows_get_no_gradient(self):
        _, g = batch_loss(self.e_neg, self.e_pos, self.kinds, self.classes, self.bank, ProbConfig(), LossConfig())
        assert not g.e_pos[2].any() and not g.e_neg[6].any()

    def test_gradients_match_finite_differences(self):
        prob, lc = ProbConfig(), LossConfig()

        def total(e_neg, e_pos, bank):
            return batch_loss(e_neg, e_pos, self.kinds, self.classes, bank, prob, lc)[0].total

        _, g = batch_loss(self.e_neg, self.e_pos, self.kinds, self.classes, self.bank, prob, lc)
        h = 1e-6
        for arr, grad in ((self.e_pos, g.e_pos), (self.e_neg, g.e_neg), (self.bank.pos, g.reps_pos),
                          (self.bank.neg, g.reps_neg)):
            for idx in list(np.ndindex(arr.shape))[::5]:
                old = arr[idx]
                arr[idx] = old + h
                up = total(self.e_neg, self.e_pos, self.bank)
                arr[idx] = old - h
                down = total(self.e_neg, self.e_pos, self.bank)
                arr[idx] = old
                num = (up - down) / (2 * h)
                assert num == pytest.approx(grad[idx], rel=1e-4, abs=1e-7)

    def test_ragged_bank_rejected(self):
        bank = self.bank.copy()
        bank.replaced[0] = (bank.pos[0], bank.neg[0])
        with pytest.raises(UsageError):
            batch_loss(self.e_neg, self.e_pos, self.kinds, self.classes, bank, ProbConfig(), LossConfig())

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            LossConfig(alpha=-1)
        with pytest.raises(ConfigError):
            LossConfig(ce_weight=-1)
