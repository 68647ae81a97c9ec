import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smearscreen.dataset import (
    LabeledTile,
    balance_by_augmentation,
    compute_mean,
    dihedral_apply,
    dihedral_variants,
    load_annotations,
    normalize,
    read_truth_labels,
    resolve_fold,
    save_labeled_tiles,
    stratified_holdout,
    stratified_kfold,
    synth_smear,
    write_truth_circles,
    write_truth_labels,
)
from smearscreen.errors import ValidationError
from smearscreen.imagecore import FloatPlane, Raster, Tile, save_raster, to_raster

from conftest import constant_tile, make_tile


class TestDihedral:
    def test_constant_tile_all_identical(self):
        t = constant_tile(0.42)
        variants = dihedral_variants(t)
        assert len(variants) == 8
        for v in variants:
            assert np.allclose(v.tile.plane.values, 0.42)
            assert v.label == t.label

    def test_corner_pixel_lands_on_each_corner_twice(self):
        values = np.zeros((5, 5))
        values[0, 0] = 1.0
        variants = dihedral_variants(make_tile(values))
        corners = []
        for v in variants:
            pos = np.unravel_index(np.argmax(v.tile.plane.values), (5, 5))
            corners.append(pos)
        counts = {c: corners.count(c) for c in set(corners)}
        assert counts == {(0, 0): 2, (0, 4): 2, (4, 0): 2, (4, 4): 2}

    def test_group_closure(self, rng):
        t = make_tile(rng.random((6, 6)))
        base_set = {v.tile.plane.values.tobytes() for v in dihedral_variants(t)}
        for v in dihedral_variants(t):
            again = {w.tile.plane.values.tobytes() for w in dihedral_variants(v)}
            assert again == base_set

    def test_variant_ids_and_provenance(self, rng):
        t = make_tile(rng.random((4, 4)), tile_id="src")
        variants = dihedral_variants(t)
        assert variants[0] is t
        for i, v in enumerate(variants[1:], start=1):
            assert v.variant == i
            assert v.augmented_from == "src"

    @settings(deadline=None, max_examples=20)
    @given(seed=st.integers(0, 2**16), variant=st.integers(0, 7))
    def test_pixel_multiset_preserved(self, seed, variant):
        values = np.random.default_rng(seed).random((7, 7))
        out = dihedral_apply(values, variant)
        assert np.array_equal(np.sort(out.ravel()), np.sort(values.ravel()))

    def test_non_square_rejected(self):
        with pytest.raises(ValidationError):
            dihedral_apply(np.zeros((3, 4)), 1)


class TestBalance:
    def _tiles(self, n_healthy, n_infected, rng):
        tiles = [
            make_tile(rng.random((4, 4)), f"h{i}", "healthy") for i in range(n_healthy)
        ]
        tiles += [
            make_tile(rng.random((4, 4)), f"i{i}", "infected") for i in range(n_infected)
        ]
        return tiles

    def test_already_balanced_unchanged(self, rng):
        tiles = self._tiles(10, 10, rng)
        assert balance_by_augmentation(tiles, seed=0) == tiles

    def test_eightfold_exactly_achievable(self, rng):
        tiles = self._tiles(16, 2, rng)
        out = balance_by_augmentation(tiles, seed=0)
        counts = {lab: sum(1 for t in out if t.label == lab) for lab in ("healthy", "infected")}
        assert counts == {"healthy": 16, "infected": 16}

    def test_variants_exhausted_leaves_residual(self, rng):
        tiles = self._tiles(18, 2, rng)
        out = balance_by_augmentation(tiles, seed=0)
        counts = {lab: sum(1 for t in out if t.label == lab) for lab in ("healthy", "infected")}
        assert counts == {"healthy": 18, "infected": 16}  # capped at 8x

    def test_no_duplicate_source_variant_pairs(self, rng):
        tiles = self._tiles(30, 5, rng)
        out = balance_by_augmentation(tiles, seed=3)
        pairs = [(t.augmented_from or t.tile_id, t.variant) for t in out]
        assert len(pairs) == len(set(pairs))

    def test_originals_retained(self, rng):
        tiles = self._tiles(12, 3, rng)
        out = balance_by_augmentation(tiles, seed=1)
        assert out[: len(tiles)] == tiles

    def test_deterministic(self, rng):
        tiles = self._tiles(20, 4, rng)
        a = balance_by_augmentation(tiles, seed=42)
        b = balance_by_augmentation(tiles, seed=42)
        assert [(t.tile_id, t.variant) for t in a] == [(t.tile_id, t.variant) for t in b]

    def test_missing_class_rejected(self, rng):
        with pytest.raises(ValidationError):
            balance_by_augmentation(self._tiles(5, 0, rng), seed=0)


class TestNormalization:
    def test_single_constant_tile(self):
        stats = compute_mean([constant_tile(0.5)])
        assert stats.mean == pytest.approx(0.5)

    def test_two_constant_tiles_average(self):
        stats = compute_mean([constant_tile(0.2, tile_id="a"), constant_tile(0.8, tile_id="b")])
        assert stats.mean == pytest.approx(0.5)

    def test_mean_matches_bruteforce(self, rng):
        tiles = [make_tile(rng.random((8, 8)), f"t{i}") for i in range(100)]
        stats = compute_mean(tiles)
        brute = sum(float(v) for t in tiles for v in t.tile.plane.values.ravel())
        brute /= sum(t.tile.plane.values.size for t in tiles)
        assert stats.mean == pytest.approx(brute, abs=1e-12)

    def test_normalize_zeroes_the_mean(self, rng):
        tiles = [make_tile(rng.random((6, 6)), f"t{i}") for i in range(20)]
        stats = compute_mean(tiles)
        normed = normalize(tiles, stats)
        assert compute_mean(normed).mean == pytest.approx(0.0, abs=1e-9)

    def test_zero_mean_is_identity(self, rng):
        tiles = [make_tile(rng.random((5, 5)))]
        out = normalize(tiles, compute_mean([constant_tile(0.0)]))
        assert np.array_equal(out[0].tile.plane.values, tiles[0].tile.plane.values)

    def test_pixel_arithmetic(self):
        from smearscreen.dataset import NormalizationStats

        out = normalize([constant_tile(0.7)], NormalizationStats(0.45))
        assert np.allclose(out[0].tile.plane.values, 0.25)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            compute_mean([])


def _labeled(n_healthy, n_infected, rng, size=4):
    tiles = [make_tile(rng.random((size, size)), f"h{i}", "healthy") for i in range(n_healthy)]
    tiles += [make_tile(rng.random((size, size)), f"i{i}", "infected") for i in range(n_infected)]
    return tiles


class TestStratifiedKFold:
    def test_even_fold_sizes(self, rng):
        tiles = _labeled(1000, 1000, rng)
        splits = stratified_kfold(tiles, 5, seed=0)
        assert [len(s.test_ids) for s in splits] == [400] * 5

    def test_stratified_quotas(self, rng):
        tiles = _labeled(1200, 800, rng)
        for split in stratified_kfold(tiles, 5, seed=1):
            test = set(split.test_ids)
            healthy = sum(1 for t in tiles if t.tile_id in test and t.label == "healthy")
            infected = sum(1 for t in tiles if t.tile_id in test and t.label == "infected")
            assert abs(healthy - 240) <= 1
            assert abs(infected - 160) <= 1

    def test_deterministic(self, rng):
        tiles = _labeled(40, 30, rng)
        assert stratified_kfold(tiles, 5, seed=9) == stratified_kfold(tiles, 5, seed=9)

    def test_class_smaller_than_k(self, rng):
        with pytest.raises(ValidationError):
            stratified_kfold(_labeled(10, 3, rng), 5, seed=0)

    @settings(deadline=None, max_examples=20)
    @given(
        n_h=st.integers(6, 40),
        n_i=st.integers(6, 40),
        k=st.integers(2, 6),
        seed=st.integers(0, 999),
    )
    def test_disjoint_exhaustive_cover(self, n_h, n_i, k, seed):
        if min(n_h, n_i) < k:
            return
        rng = np.random.default_rng(0)
        tiles = _labeled(n_h, n_i, rng, size=2)
        splits = stratified_kfold(tiles, k, seed)
        all_ids = {t.tile_id for t in tiles}
        seen = []
        for s in splits:
            assert set(s.train_ids) | set(s.test_ids) == all_ids
            assert set(s.train_ids) & set(s.test_ids) == set()
            seen.extend(s.test_ids)
        assert sorted(seen) == sorted(all_ids)  # each id tested exactly once

    def test_augmented_follow_source(self, rng):
        tiles = _labeled(8, 8, rng)
        augmented = []
        for t in tiles[:4]:
            augmented.extend(dihedral_variants(t)[1:3])
        everything = tiles + augmented
        for split in stratified_kfold(everything, 4, seed=2):
            train, test = resolve_fold(everything, split)
            train_ids = set(split.train_ids)
            for t in train + test:
                src = t.augmented_from or t.tile_id
                side = train if src in train_ids else test
                assert t in side

    def test_only_originals_in_splits(self, rng):
        tiles = _labeled(8, 8, rng)
        augmented = dihedral_variants(tiles[0])[1:]
        splits = stratified_kfold(tiles + augmented, 4, seed=0)
        for s in splits:
            for vid in s.train_ids + s.test_ids:
                assert "#v" not in vid


class TestStratifiedHoldout:
    def test_fractions(self, rng):
        tiles = _labeled(1056, 1056, rng, size=2)
        train, val, test = stratified_holdout(tiles, 104 / 1056, 320 / 1056, seed=0)
        assert len(test) == 640 and len(val) == 208 and len(train) == 1264

    def test_partition(self, rng):
        tiles = _labeled(50, 40, rng, size=2)
        train, val, test = stratified_holdout(tiles, 0.1, 0.3, seed=1)
        ids = [t.tile_id for t in train + val + test]
        assert sorted(ids) == sorted(t.tile_id for t in tiles)

    def test_bad_fractions(self, rng):
        with pytest.raises(ValidationError):
            stratified_holdout(_labeled(5, 5, rng), 0.6, 0.5, seed=0)


class TestSynthSmear:
    def test_zero_cells_pure_noise(self):
        smear = synth_smear(0, 0.5, 120, 100, seed=0)
        assert smear.circles == () and smear.labels == ()
        assert smear.raster.width == 120 and smear.raster.height == 100
        assert smear.raster.depth == 16

    def test_counts_by_construction(self):
        smear = synth_smear(50, 0.4, 900, 800, seed=7)
        assert len(smear.circles) == 50
        assert sum(1 for lab in smear.labels if lab == "infected") == 20

    def test_bit_identical_reruns(self):
        a = synth_smear(12, 0.5, 300, 260, seed=3)
        b = synth_smear(12, 0.5, 300, 260, seed=3)
        assert np.array_equal(a.raster.pixels, b.raster.pixels)
        assert a.circles == b.circles and a.labels == b.labels

    def test_different_seeds_differ(self):
        a = synth_smear(12, 0.5, 300, 260, seed=3)
        b = synth_smear(12, 0.5, 300, 260, seed=4)
        assert not np.array_equal(a.raster.pixels, b.raster.pixels)

    def test_infeasible_density(self):
        with pytest.raises(ValidationError):
            synth_smear(100, 0.5, 100, 100, seed=0)

    def test_cells_inside_bounds(self):
        smear = synth_smear(30, 0.5, 500, 400, seed=11)
        for c in smear.circles:
            assert c.cx - c.r >= 0 and c.cx + c.r <= 500
            assert c.cy - c.r >= 0 and c.cy + c.r <= 400

    def test_no_overlap(self):
        import math

        smear = synth_smear(30, 0.5, 500, 400, seed=11)
        cs = smear.circles
        for i in range(len(cs)):
            for j in range(i + 1, len(cs)):
                d = math.hypot(cs[i].cx - cs[j].cx, cs[i].cy - cs[j].cy)
                assert d >= cs[i].r + cs[j].r

    def test_truth_csv_roundtrip(self, tmp_path):
        smear = synth_smear(8, 0.5, 300, 260, seed=5)
        write_truth_circles(smear.circles, tmp_path / "c.csv")
        write_truth_labels(smear.circles, smear.labels, tmp_path / "l.csv")
        circles, labels = read_truth_labels(tmp_path / "l.csv")
        assert len(circles) == 8 and labels == list(smear.labels)
        header = (tmp_path / "c.csv").read_text().splitlines()[0]
        assert header == "cx,cy,r"


class TestAnnotations:
    def _write_tiles(self, tmp_path, rows, size=71):
        rng = np.random.default_rng(0)
        lines = ["tile_file,label"]
        for name, label in rows:
            pixels = rng.integers(0, 65536, size=(size, size)).astype(np.uint16)
            save_raster(Raster(size, size, 16, pixels), tmp_path / name)
            lines.append(f"{name},{label}")
        csv_path = tmp_path / "labels.csv"
        csv_path.write_text("\n".join(lines) + "\n")
        return csv_path

    def test_load_counts(self, tmp_path):
        rows = [(f"h{i}.pgm", "healthy") for i in range(3)]
        rows += [(f"i{i}.pgm", "Infected") for i in range(2)]  # case-insensitive
        csv_path = self._write_tiles(tmp_path, rows)
        tiles = load_annotations(tmp_path, csv_path)
        assert len(tiles) == 5
        assert sum(1 for t in tiles if t.label == "infected") == 2
        assert all(t.variant == 0 for t in tiles)

    def test_unknown_label_names_row(self, tmp_path):
        csv_path = self._write_tiles(tmp_path, [("a.pgm", "healthy"), ("b.pgm", "Parasite")])
        with pytest.raises(ValidationError, match="line 3"):
            load_annotations(tmp_path, csv_path)

    def test_empty_csv(self, tmp_path):
        csv_path = tmp_path / "labels.csv"
        csv_path.write_text("tile_file,label\n")
        assert load_annotations(tmp_path, csv_path) == []

    def test_missing_tile_file(self, tmp_path):
        csv_path = tmp_path / "labels.csv"
        csv_path.write_text("tile_file,label\nghost.pgm,healthy\n")
        with pytest.raises(ValidationError, match="missing"):
            load_annotations(tmp_path, csv_path)

    def test_wrong_size_rejected(self, tmp_path):
        csv_path = self._write_tiles(tmp_path, [("small.pgm", "healthy")], size=32)
        with pytest.raises(ValidationError, match="expected 71x71"):
            load_annotations(tmp_path, csv_path)

    def test_origin_parsed_from_filename(self, tmp_path):
        csv_path = self._write_tiles(tmp_path, [("img_x142_y88.pgm", "healthy")])
        tiles = load_annotations(tmp_path, csv_path)
        assert tiles[0].tile.origin == (142, 88)

    def test_save_load_roundtrip(self, tmp_path, rng):
        tiles = [
            make_tile(rng.integers(0, 65536, size=(71, 71)) / 65535.0, f"t{i}_x0_y0.pgm",
                      "infected" if i % 2 else "healthy")
            for i in range(6)
        ]
        csv_path = save_labeled_tiles(tiles, tmp_path / "tiles")
        back = load_annotations(tmp_path / "tiles", csv_path)
        assert [t.label for t in back] == [t.label for t in tiles]
        for a, b in zip(back, tiles):
            assert np.allclose(a.tile.plane.values, b.tile.plane.values, atol=1e-12)
