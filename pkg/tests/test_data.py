import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import item
from splitting_oracle import edges_brute_force, min_discards
from typeaware.data import (Dataset, DatasetError, SplitAssignment, SplitError, SyntheticSpec,
                            build_item_graph, disjoint_split, generate_synthetic, largest_remainder,
                            load_dataset, load_split, oracle_score, outfit_split, save_dataset, save_split)
from typeaware.model import Outfit, TypePair


def ds_from(outfits, n_types=2):
    ids = sorted({i for o in outfits for i in o})
    items = {i: item(i, n % n_types + 1, [float(n)], [1.0]) for n, i in enumerate(ids)}
    return Dataset(items, [Outfit(f"o{n}", tuple(o)) for n, o in enumerate(outfits)])


outfit_lists = st.lists(
    st.lists(st.sampled_from([f"x{k}" for k in range(12)]), min_size=2, max_size=4, unique=True),
    min_size=1, max_size=8)


class TestFiles:
    def test_roundtrip(self, tmp_path):
        ds, _ = generate_synthetic(SyntheticSpec(n_items=50, n_outfits=20, seed=4))
        save_dataset(ds, tmp_path / "i.tsv", tmp_path / "o.tsv")
        back = load_dataset(tmp_path / "i.tsv", tmp_path / "o.tsv")
        assert back.taxonomy == ds.taxonomy
        assert [o.items for o in back.outfits] == [o.items for o in ds.outfits]
        for k, r in ds.items.items():
            assert r.image_features.tobytes() == back.items[k].image_features.tobytes()
            assert r.text_features.tobytes() == back.items[k].text_features.tobytes()

    def write(self, tmp_path, items, outfits):
        (tmp_path / "i.tsv").write_text(items)
        (tmp_path / "o.tsv").write_text(outfits)
        return tmp_path / "i.tsv", tmp_path / "o.tsv"

    def items_text(self, n=3):
        from typeaware.data import _encode_block
        lines = [f"a{k}\t{k % 2 + 1}\t{_encode_block(np.array([k, 1.0]))}\t\t" for k in range(n)]
        return "\n".join(lines) + "\n"

    def test_empty_outfits(self, tmp_path):
        ds = load_dataset(*self.write(tmp_path, self.items_text(), ""))
        assert ds.outfits == [] and len(ds.items) == 3

    def test_unknown_item_names_outfit(self, tmp_path):
        with pytest.raises(DatasetError, match="o9.*ghost|ghost.*o9"):
            load_dataset(*self.write(tmp_path, self.items_text(), "o9\ta0\tghost\n"))

    def test_single_item_outfits_dropped(self, tmp_path):
        ds = load_dataset(*self.write(tmp_path, self.items_text(), "o1\ta0\ta1\no2\ta2\no3\ta1\ta2\n"))
        assert len(ds.outfits) == 2
        assert ds.notes["dropped_single_item_outfits"] == 1

    def test_untyped_items_dropped(self, tmp_path):
        text = self.items_text() + "u\t\t\t\t\n"
        ds = load_dataset(*self.write(tmp_path, text, "o1\ta0\tu\ta1\n"))
        assert "u" not in ds.items and ds.outfits[0].items == ("a0", "a1")

    def test_duplicate_ids_located(self, tmp_path):
        text = self.items_text() + self.items_text().splitlines()[0] + "\n"
        with pytest.raises(DatasetError, match=r"i\.tsv:4"):
            load_dataset(*self.write(tmp_path, text, ""))

    def test_ragged_features_located(self, tmp_path):
        from typeaware.data import _encode_block
        text = self.items_text() + f"z\t1\t{_encode_block(np.zeros(3))}\t\t\n"
        with pytest.raises(DatasetError, match=r"i\.tsv:4"):
            load_dataset(*self.write(tmp_path, text, ""))

    def test_duplicate_outfit_ids(self):
        items = {"a": item("a", 1, [0.0]), "b": item("b", 2, [0.0])}
        with pytest.raises(DatasetError):
            Dataset(items, [Outfit("o", ("a", "b")), Outfit("o", ("a", "b"))])


class TestGraph:
    def test_two_disjoint_outfits(self):
        g = build_item_graph(ds_from([("a", "b"), ("c", "d")]))
        assert g.number_of_nodes() == 4 and g.number_of_edges() == 2

    def test_triangle(self):
        g = build_item_graph(ds_from([("a", "b", "c")]))
        assert g.number_of_edges() == 3

    def test_overlapping(self):
        g = build_item_graph(ds_from([("a", "b", "c"), ("c", "d")]))
        assert {tuple(sorted(e)) for e in g.edges} == {("a", "b"), ("a", "c"), ("b", "c"), ("c", "d")}

    @given(outfit_lists)
    def test_edges_match_double_loop(self, outfits):
        ds = ds_from(outfits)
        g = build_item_graph(ds)
        assert {tuple(sorted(e)) for e in g.edges} == edges_brute_force(ds.outfits)


class TestOutfitSplit:
    def test_all_train(self):
        ds = ds_from([(f"a{k}", f"b{k}") for k in range(7)])
        s = outfit_split(ds, (1, 0, 0), 3)
        assert set(s.outfits.values()) == {"train"}

    def test_seeded(self):
        ds = ds_from([(f"a{k}", f"b{k}") for k in range(30)])
        assert outfit_split(ds, seed=5).outfits == outfit_split(ds, seed=5).outfits

    def test_sizes(self):
        ds = ds_from([(f"a{k}", f"b{k}") for k in range(100)])
        s = outfit_split(ds, (0.8, 0.1, 0.1), 0)
        assert [len(s.outfit_ids(x)) for x in ("train", "val", "test")] == [80, 10, 10]

    @given(st.integers(0, 500), st.lists(st.integers(0, 20), min_size=3, max_size=3).filter(lambda w: sum(w) > 0))
    def test_largest_remainder(self, total, weights):
        fr = [w / sum(weights) for w in weights]
        sizes = largest_remainder(total, fr)
        assert sum(sizes) == total
        assert all(abs(s - total * f) < 1 for s, f in zip(sizes, fr))

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            outfit_split(ds_from([("a", "b")]), (0.5, 0.2, 0.2))

    def test_split_file_roundtrip(self, tmp_path):
        ds = ds_from([("a", "b", "c"), ("c", "d"), ("e", "f"), ("g", "h")])
        s = disjoint_split(ds, (0.5, 0.25, 0.25))
        save_split(s, tmp_path / "s.tsv")
        back = load_split(tmp_path / "s.tsv", ds)
        assert back.outfits == s.outfits and back.items == s.items and back.mode == "disjoint"


class TestDisjointSplit:
    def test_equal_components(self):
        ds = ds_from([("a", "b"), ("c", "d")])
        s = disjoint_split(ds, (0.5, 0.5, 0.0))
        assert not s.discarded
        assert sorted(s.outfits.values()) == ["train", "val"]

    @pytest.mark.parametrize("outfits", [[("a", "b"), ("b", "c"), ("a", "c")], [("a", "b", "c")]])
    def test_triangle_against_brute_force(self, outfits):
        ds = ds_from(outfits)
        s = disjoint_split(ds, (0.5, 0.5, 0.0), max_discard_fraction=1.0)
        opt = min_discards(ds.outfits, (0.5, 0.5, 0.0))
        assert opt >= 1
        assert opt <= len(s.discarded) <= 2 * opt

    def test_budget_exhausted(self):
        ds = ds_from([("a", "b"), ("b", "c"), ("a", "c")])
        with pytest.raises(SplitError) as err:
            disjoint_split(ds, (0.5, 0.5, 0.0), max_discard_fraction=0.1)
        assert err.value.stats["discarded"] >= 1

    @given(outfit_lists, st.sampled_from([(0.8, 0.1, 0.1), (0.5, 0.5, 0.0), (0.4, 0.3, 0.3)]))
    def test_disjoint_invariant(self, outfits, fractions):
        ds = ds_from(outfits)
        try:
            s = disjoint_split(ds, fractions, max_discard_fraction=1.0)
        except SplitError:
            pytest.fail("budget 1.0 can always be met")
        owner = {}
        for o in ds.outfits:
            label = s.outfits.get(o.outfit_id)
            for i in o.items:
                if i in s.discarded or label is None:
                    continue
                assert owner.setdefault(i, label) == label

    def test_check_disjoint_catches_violation(self):
        ds = ds_from([("a", "b"), ("b", "c")])
        bad = SplitAssignment({"o0": "train", "o1": "test"}, {"a": "train", "b": "train", "c": "test"})
        with pytest.raises(SplitError):
            bad.check_disjoint(ds)


class TestSynthetic:
    def test_identity_noiseless_features_are_latents(self):
        spec = SyntheticSpec(n_items=30, n_outfits=5, latent_dim=5, image_dim=5, noise=0.0,
                             mixing="identity", seed=1, n_types=3, outfit_size=(2, 3), threshold=2.0)
        ds, oracle = generate_synthetic(spec)
        for k, r in ds.items.items():
            assert np.array_equal(r.image_features, oracle.latents[k])

    def test_outfits_pass_oracle(self):
        ds, oracle = generate_synthetic(SyntheticSpec(n_items=200, n_outfits=80, seed=7))
        for o in ds.outfits:
            for a in o.items:
                for b in o.items:
                    if a != b:
                        assert oracle_score(oracle, a, b)

    def test_infinite_threshold(self):
        ds, oracle = generate_synthetic(SyntheticSpec(n_items=60, n_outfits=50, threshold=np.inf, seed=2,
                                                      max_attempts=1))
        assert len(ds.outfits) == 50
        assert oracle.compatible("i00000", "i00001")

    def test_infeasible_spec(self):
        with pytest.raises(DatasetError, match="attempts"):
            generate_synthetic(SyntheticSpec(n_items=60, n_outfits=5, threshold=1e-9, seed=2, max_attempts=3))

    def oracle(self, ha, hb, coords=(0, 1), threshold=0.1):
        spec = SyntheticSpec(n_types=2, latent_dim=4, n_items=4, n_outfits=0, threshold=threshold,
                             relevant_coords={TypePair(1, 2): coords}, seed=0, outfit_size=(2, 2))
        _, oracle = generate_synthetic(spec)
        oracle.latents["i00000"] = np.asarray(ha, dtype=float)
        oracle.latents["i00001"] = np.asarray(hb, dtype=float)
        return oracle

    def test_oracle_identical(self):
        assert oracle_score(self.oracle([0.3, 0.2, 0, 0], [0.3, 0.2, 0, 0]), "i00000", "i00001")

    def test_oracle_irrelevant_coords(self):
        assert oracle_score(self.oracle([0, 0, -1, -1], [0, 0, 1, 1]), "i00000", "i00001")

    def test_oracle_hand_value(self):
        # relevant squared distance 0.3^2 = 0.09 < 0.1
        assert oracle_score(self.oracle([0.3, 0, 0, 0], [0, 0, 0.9, 0.9]), "i00000", "i00001")
        assert not oracle_score(self.oracle([0.4, 0, 0, 0], [0, 0, 0, 0]), "i00000", "i00001")

    def test_unknown_pair_uses_union(self):
        spec = SyntheticSpec(n_types=3, latent_dim=4, n_items=6, n_outfits=0, seed=0, outfit_size=(2, 2),
                             relevant_coords={TypePair(1, 2): (0,), TypePair(2, 3): (1,)})
        _, oracle = generate_synthetic(spec)
        assert oracle.coords(TypePair(1, 3)) == (0, 1)

    def test_oracle_bayes_separates_at_zero_noise(self):
        ds, oracle = generate_synthetic(SyntheticSpec(n_items=120, n_outfits=30, noise=0.0, seed=3))
        ids = sorted(ds.items)
        for a in ids[:20]:
            for b in ids[20:40]:
                if ds.type_of(a) != ds.type_of(b):
                    assert (oracle.pair_score(a, b) == 1.0) == oracle.compatible(a, b)

    def test_seeded(self):
        a, _ = generate_synthetic(SyntheticSpec(n_items=60, n_outfits=20, seed=8))
        b, _ = generate_synthetic(SyntheticSpec(n_items=60, n_outfits=20, seed=8))
        assert [o.items for o in a.outfits] == [o.items for o in b.outfits]

    @pytest.mark.parametrize("kw", [{"noise": -1.0}, {"n_types": 1},
                                    {"relevant_coords": {TypePair(1, 2): ()}}])
    def test_spec_validation(self, kw):
        with pytest.raises(ValueError):
            SyntheticSpec(**kw)
