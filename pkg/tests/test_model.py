import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import PAIR12, affine, identity_params, item
from typeaware.model import (ConfigurationError, DimensionMismatch, EmbeddingModel, Hyperparams,
                             MissingModality, ModelError, ModelParams, Outfit, TypePair, UnseenPair,
                             cosine_compatibility, encode_image, encode_text, metric_compatibility,
                             outfit_score, pair_distance, pair_score, project_pair)
from typeaware.trainer import init_params

floats = st.floats(-10, 10, allow_nan=False)


def vec(d):
    return arrays(np.float64, d, elements=floats)


class TestTypes:
    def test_type_pair_is_canonical(self):
        assert TypePair(3, 1) == TypePair(1, 3)
        assert (TypePair(3, 1).u, TypePair(3, 1).v) == (1, 3)
        assert TypePair.parse(str(TypePair(5, 2))) == TypePair(2, 5)

    def test_outfit_rejects_duplicates(self):
        with pytest.raises(ModelError):
            Outfit("o", ("a", "b", "a"))

    def test_hyperparam_defaults(self):
        h = Hyperparams()
        assert (h.margin, h.learning_rate, h.batch_size, h.embed_dim) == (0.2, 5e-5, 256, 64)
        assert h.lambda3 == 5e-5
        assert h.lambda1 == h.lambda2 == h.lambda4 == h.lambda5 == 5e-4

    @pytest.mark.parametrize("kw", [{"margin": 0.0}, {"lambda2": -1.0}, {"batch_size": 0},
                                    {"score_mode": "dot"}, {"projection": "full"}])
    def test_hyperparam_validation(self, kw):
        with pytest.raises(ConfigurationError):
            Hyperparams(**kw)

    def test_binary_masks_are_frozen(self):
        p = identity_params(2, [PAIR12], [[1.0, 0.0]], kind="binary")
        with pytest.raises(ValueError):
            p.projection_bank[0][0] = 0.5

    def test_projection_shape_checked(self):
        with pytest.raises(DimensionMismatch):
            identity_params(2, [PAIR12], [[1.0, 0.0, 1.0]])


class TestEncoders:
    def test_identity_encoder(self):
        p = identity_params(3)
        assert np.array_equal(encode_image(p, item("a", 1, [1, 0, 0])), [1, 0, 0])

    def test_zero_weights(self):
        p = ModelParams(affine(np.zeros((2, 3)), np.zeros(2)))
        assert np.array_equal(encode_image(p, item("a", 1, [4, -2, 7])), [0, 0])

    def test_hand_affine_layer(self):
        p = ModelParams(affine([[1, 2], [0, 1]], [0.5, 0]))
        assert np.allclose(encode_image(p, item("a", 1, [1, 1])), [3.5, 1.0])

    def test_leaky_hidden_layer(self):
        layers = affine(np.eye(2), np.zeros(2)) + affine(np.eye(2), np.zeros(2))
        p = ModelParams(layers)
        assert np.allclose(encode_image(p, item("a", 1, [2, -3])), [2, -0.03])

    def test_dimension_mismatch_names_item(self):
        p = identity_params(2)
        with pytest.raises(DimensionMismatch, match="bad"):
            encode_image(p, item("bad", 1, [1, 2, 3]))

    def test_text_encoder_examples(self):
        p = identity_params(3)
        assert np.array_equal(encode_text(p, item("a", 1, [0, 0, 0], [0, 0, 0])), [0, 0, 0])
        assert np.array_equal(encode_text(p, item("a", 1, [0, 0, 0], [1, 0, 0])), [1, 0, 0])
        q = ModelParams(affine(np.eye(2), [0, 0]), affine(np.eye(2), [1, 1]))
        assert np.allclose(encode_text(q, item("a", 1, [0, 0], [2, 3])), [3, 4])

    def test_missing_text(self):
        with pytest.raises(MissingModality):
            encode_text(identity_params(2), item("a", 1, [1, 2]))


class TestProjection:
    def test_ones_is_identity(self):
        p = identity_params(3, [PAIR12], [[1, 1, 1]])
        y = np.array([1.0, -2.0, 3.0])
        assert np.array_equal(project_pair(p, PAIR12, y), y)

    def test_zeros(self):
        p = identity_params(3, [PAIR12], [[0, 0, 0]])
        assert np.array_equal(project_pair(p, PAIR12, np.array([1.0, 2, 3])), [0, 0, 0])

    def test_hand_mask(self):
        p = identity_params(3, [PAIR12], [[1, 0, 2]])
        assert np.array_equal(project_pair(p, PAIR12, np.array([1.0, 2, 3])), [1, 0, 6])

    def test_full_matrix(self):
        p = identity_params(2, [PAIR12], [[[0, 1], [1, 0]]], kind="fc")
        assert np.array_equal(project_pair(p, PAIR12, np.array([1.0, 2])), [2, 1])

    def test_unseen_pair(self):
        with pytest.raises(UnseenPair):
            project_pair(identity_params(2, [PAIR12], [[1, 1]]), TypePair(1, 3), np.zeros(2))


class TestPairDistance:
    def test_hand_value(self):
        p = identity_params(2, [PAIR12], [[1, 0]])
        assert pair_distance(p, item("a", 1, [1, 2]), item("b", 2, [3, 1])) == 4.0

    def test_identical_is_zero(self):
        p = identity_params(2, [PAIR12], [[0.3, 2]])
        a = item("a", 1, [1, 2])
        assert pair_distance(p, a, a) == 0.0

    def test_unseen_pair_uses_general_space(self):
        p = identity_params(2, [PAIR12], [[1, 0]])
        assert pair_distance(p, item("a", 1, [1, 2]), item("b", 3, [3, 1])) == 5.0

    @given(vec(4), vec(4), vec(4))
    def test_symmetric_nonnegative(self, fa, fb, w):
        p = identity_params(4, [PAIR12], [w])
        a, b = item("a", 1, fa), item("b", 2, fb)
        d = pair_distance(p, a, b)
        assert d >= 0
        assert d == pair_distance(p, b, a)

    @given(vec(4), vec(4))
    def test_ones_mask_is_euclidean(self, fa, fb):
        p = identity_params(4, [PAIR12], [np.ones(4)])
        d = pair_distance(p, item("a", 1, fa), item("b", 2, fb))
        assert d == pytest.approx(float(np.sum((fa - fb) ** 2)), rel=1e-12, abs=1e-12)

    @given(vec(5), vec(5), st.lists(st.booleans(), min_size=5, max_size=5),
           st.integers(0, 4))
    def test_zeroing_binary_entries_never_increases(self, fa, fb, bits, extra):
        mask = np.array(bits, dtype=float)
        fewer = mask.copy()
        fewer[extra] = 0.0
        a, b = item("a", 1, fa), item("b", 2, fb)
        full = pair_distance(identity_params(5, [PAIR12], [mask], kind="binary"), a, b)
        less = pair_distance(identity_params(5, [PAIR12], [fewer], kind="binary"), a, b)
        assert less <= full


class TestScores:
    def test_metric_hand_value(self):
        p = identity_params(2, [PAIR12], [[1, 1]], score_mode="learned_metric", metric=[1, 1])
        assert metric_compatibility(p, item("a", 1, [1, 2]), item("b", 2, [2, 1])) == 4.0

    def test_metric_zero_head(self):
        p = identity_params(2, [PAIR12], [[1, 1]], score_mode="learned_metric", metric=[0, 0])
        assert metric_compatibility(p, item("a", 1, [1, 2]), item("b", 2, [2, 1])) == 0.0

    def test_metric_requires_head(self):
        with pytest.raises(ConfigurationError):
            metric_compatibility(identity_params(2), item("a", 1, [1, 2]), item("b", 2, [2, 1]))

    @given(vec(3), vec(3), vec(3), vec(3))
    def test_metric_symmetric(self, fa, fb, w, m):
        p = identity_params(3, [PAIR12], [w], score_mode="learned_metric", metric=m, bias=0.5)
        a, b = item("a", 1, fa), item("b", 2, fb)
        assert metric_compatibility(p, a, b) == metric_compatibility(p, b, a)

    def test_cosine(self):
        p = identity_params(2, [PAIR12], [[1, 1]], score_mode="cosine")
        assert cosine_compatibility(p, item("a", 1, [1, 0]), item("b", 2, [0, 3])) == pytest.approx(0.0)
        assert cosine_compatibility(p, item("a", 1, [2, 0]), item("b", 2, [5, 0])) == pytest.approx(1.0)

    def test_distance_mode_sign(self):
        p = identity_params(2, [PAIR12], [[1, 0]])
        assert pair_score(p, item("a", 1, [1, 2]), item("b", 2, [3, 1])) == -4.0


class TestOutfitScore:
    def fixture(self):
        # along one axis: pairwise squared distances 1, 2, 3 via hand-picked points
        pairs = [TypePair(1, 2), TypePair(1, 3), TypePair(2, 3)]
        p = identity_params(1, pairs, [[1.0]] * 3)
        items = {"a": item("a", 1, [0.0]), "b": item("b", 2, [1.0]), "c": item("c", 3, [np.sqrt(3)])}
        return p, items

    def test_two_items(self):
        p, items = self.fixture()
        assert outfit_score(p, Outfit("o", ("a", "b")), items) == -1.0

    def test_mean_of_pairs(self):
        p = identity_params(3, [TypePair(1, 2), TypePair(1, 3), TypePair(2, 3)],
                            [[1, 0, 0], [0, 1, 0], [0, 0, 1]])
        items = {"a": item("a", 1, [0, 0, 0]), "b": item("b", 2, [1, 0, 0]),
                 "c": item("c", 3, [0, np.sqrt(2), np.sqrt(3)])}
        # scores: ab -1, ac -2, bc -3
        assert outfit_score(p, Outfit("o", ("a", "b", "c")), items) == pytest.approx(-2.0)

    def test_single_item_rejected(self):
        p, items = self.fixture()
        with pytest.raises(ModelError):
            outfit_score(p, Outfit("o", ("a",)), items)

    @given(st.permutations(["a", "b", "c", "d"]), st.integers(0, 2**31))
    def test_permutation_invariant(self, order, seed):
        rng = np.random.default_rng(seed)
        hyper = Hyperparams(embed_dim=4, hidden=(3,), text_hidden=())
        pairs = [TypePair(u, v) for u, v in itertools.combinations(range(1, 5), 2)]
        p = init_params(hyper, 3, None, pairs, rng)
        for w in p.projection_bank:
            w += rng.normal(size=w.shape)
        items = {k: item(k, n + 1, rng.normal(size=3)) for n, k in enumerate("abcd")}
        base = outfit_score(p, Outfit("o", tuple("abcd")), items)
        assert outfit_score(p, Outfit("o", tuple(order)), items) == pytest.approx(base, rel=1e-12)


class TestEmbeddingModel:
    @pytest.mark.parametrize("mode", ["negative_distance", "learned_metric", "cosine"])
    @pytest.mark.parametrize("kind", ["diag", "binary", "fc", "none"])
    def test_matches_reference_path(self, mode, kind, rng):
        hyper = Hyperparams(embed_dim=5, hidden=(4,), score_mode=mode, projection=kind)
        p = init_params(hyper, 3, None, [TypePair(1, 2)], rng)
        if kind in ("diag", "fc"):
            for w in p.projection_bank:
                w += rng.normal(size=w.shape)
        items = {f"i{n}": item(f"i{n}", n % 3 + 1, rng.normal(size=3)) for n in range(6)}
        model = EmbeddingModel(p, items)
        for a, b in itertools.combinations(items, 2):
            assert model.pair_score(a, b) == pytest.approx(pair_score(p, items[a], items[b]), rel=1e-12, abs=1e-12)
        o = Outfit("o", ("i0", "i1", "i2"))
        assert model.outfit_score(o) == pytest.approx(outfit_score(p, o, items), rel=1e-12, abs=1e-12)

    def test_general_distance(self):
        items = {"a": item("a", 1, [0, 0]), "b": item("b", 1, [3, 4])}
        assert EmbeddingModel(identity_params(2), items).general_distance("a", "b") == 25.0

    def test_catalog_dimension_checked(self):
        with pytest.raises(DimensionMismatch):
            EmbeddingModel(identity_params(2), {"a": item("a", 1, [0, 0, 0])})
