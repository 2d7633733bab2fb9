import math

import numpy as np
import pytest

from conftest import tiny_model_config
from sshr.errors import ConfigError
from sshr.model import SshrModel
from sshr.probe import (
    LogisticRegressionProbe,
    dump_representations,
    entropy_of_counts,
    kmeans,
    lid_probe,
    mutual_information,
    probe_all_layers,
    stratified_split,
    write_report,
)


class TestMutualInformation:
    def test_independent_factorial_table_is_exactly_zero(self):
        # every (cluster, label) pair appears the same number of times
        a = np.repeat(np.arange(4), 6)
        b = np.tile(np.repeat(np.arange(3), 2), 4)
        assert mutual_information(a, b) == 0.0

    def test_identity_equiprobable_is_log_m(self):
        for m in (2, 3, 5, 8):
            labels = np.repeat(np.arange(m), 7)
            assert abs(mutual_information(labels, labels) - math.log(m)) < 1e-12

    def test_direct_formula_small_table(self):
        # joint counts [[2,1],[1,2]] over N=6
        a = np.array([0, 0, 0, 1, 1, 1])
        b = np.array([0, 0, 1, 0, 1, 1])
        n = 6.0
        expected = sum(
            (c / n) * math.log((c * n) / (r * s))
            for c, r, s in [(2, 3, 3), (1, 3, 3), (1, 3, 3), (2, 3, 3)]
        )
        assert abs(mutual_information(a, b) - expected) < 1e-12

    def test_symmetry_and_relabel_invariance(self):
        rng = np.random.default_rng(0)
        a = rng.integers(0, 5, 200)
        b = rng.integers(0, 4, 200)
        mi = mutual_information(a, b)
        assert abs(mi - mutual_information(b, a)) < 1e-12
        relabeled = (a * 7 + 3) % 31  # injective on 0..4
        assert abs(mi - mutual_information(relabeled, b)) < 1e-12

    def test_nonnegative_and_bounded_random_tables(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = int(rng.integers(2, 60))
            a = rng.integers(0, int(rng.integers(2, 6)), n)
            b = rng.integers(0, int(rng.integers(2, 6)), n)
            mi = mutual_information(a, b)
            ha = entropy_of_counts(np.bincount(a))
            hb = entropy_of_counts(np.bincount(b))
            assert mi >= -1e-12
            assert mi <= min(ha, hb) + 1e-9


class TestKMeans:
    def test_k_equals_n_zero_distortion(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 3))
        res = kmeans(x, 6, seed=0)
        assert res.distortions[-1] < 1e-12  # exactly 0 up to the expanded-form rounding
        assert len(set(res.assignments.tolist())) == 6

    def test_k_one_centroid_is_global_mean(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(40, 4))
        res = kmeans(x, 1, seed=0)
        assert np.allclose(res.centroids[0], x.mean(axis=0))

    def test_two_separated_blobs(self):
        rng = np.random.default_rng(4)
        a = rng.normal(0.0, 0.1, (30, 3))
        b = rng.normal(10.0, 0.1, (30, 3))
        x = np.concatenate([a, b])
        res = kmeans(x, 2, seed=0)
        first, second = res.assignments[:30], res.assignments[30:]
        assert len(set(first.tolist())) == 1
        assert len(set(second.tolist())) == 1
        assert first[0] != second[0]

    def test_distortion_non_increasing(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(120, 5))
        res = kmeans(x, 8, seed=1)
        for earlier, later in zip(res.distortions, res.distortions[1:]):
            assert later <= earlier + 1e-9

    def test_k_greater_than_n_rejected(self):
        with pytest.raises(ConfigError):
            kmeans(np.zeros((3, 2)), 4, seed=0)

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(50, 4))
        a = kmeans(x, 5, seed=9)
        b = kmeans(x, 5, seed=9)
        assert np.array_equal(a.assignments, b.assignments)
        assert np.array_equal(a.centroids, b.centroids)


class TestLidProbe:
    def test_separable_blobs(self):
        rng = np.random.default_rng(7)
        x = np.concatenate([rng.normal(0, 0.5, (60, 8)), rng.normal(6, 0.5, (60, 8))])
        y = np.array([0] * 60 + [1] * 60)
        assert lid_probe(x, y, split_seed=0) >= 0.99

    def test_shuffled_labels_near_chance(self):
        rng = np.random.default_rng(8)
        n, m = 160, 4
        x = rng.normal(size=(n, 10))
        y = rng.integers(0, m, n)
        acc = lid_probe(x, y, split_seed=0)
        n_test = n - int(round(0.7 * n))
        sigma = math.sqrt((1 / m) * (1 - 1 / m) / n_test)
        assert abs(acc - 1 / m) <= 3 * sigma + 1e-9

    def test_identical_points_balanced_labels(self):
        m = 4
        x = np.ones((40 * m, 6))
        y = np.tile(np.arange(m), 40)
        acc = lid_probe(x, y, split_seed=0)
        assert abs(acc - 1 / m) < 0.05

    def test_single_class_rejected(self):
        with pytest.raises(ConfigError):
            LogisticRegressionProbe().fit(np.zeros((10, 3)), np.zeros(10))

    def test_affine_invariance_of_accuracy(self):
        rng = np.random.default_rng(9)
        x = np.concatenate([rng.normal(0, 1.0, (50, 6)), rng.normal(2.5, 1.0, (50, 6))])
        y = np.array([0] * 50 + [1] * 50)
        rot, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        diffs = []
        for seed in (0, 1, 2):
            base = lid_probe(x, y, split_seed=seed)
            mapped = lid_probe(x @ rot * 3.0 + 1.7, y, split_seed=seed)
            diffs.append(abs(base - mapped))
        assert max(diffs) <= 0.02

    def test_stratified_split_balanced(self):
        y = np.array([0] * 10 + [1] * 20 + [2] * 10)
        train, test = stratified_split(y, 0.7, seed=0)
        assert len(set(train) & set(test)) == 0
        assert len(train) + len(test) == 40
        assert np.bincount(y[train]).tolist() == [7, 14, 7]


@pytest.fixture(scope="module")
def probe_setup(tmp_path_factory):
    from sshr.ctc import Vocabulary
    from sshr.datagen import default_corpus_spec, generate_corpus, load_split

    out = tmp_path_factory.mktemp("probe_corpus")
    spec = default_corpus_spec(seed=77, counts={"train": 6, "dev": 3, "test": 6},
                               min_phonemes=4, max_phonemes=6)
    generate_corpus(spec, out)
    vocab = Vocabulary(spec.phoneme_symbols, spec.language_names)
    cfg = tiny_model_config(vocab=vocab, depth=3, hidden=8, heads=2, ffn=16, feature_dim=16,
                            seed=2, lid_extract_layer=1, lid_in_targets=True)
    return SshrModel(cfg), load_split(out, "test")


class TestProbePipeline:

    def test_untrained_model_full_finite_report(self, probe_setup, tmp_path):
        model, utts = probe_setup
        report = probe_all_layers(model, utts, k=6, seed=0)
        assert len(report.rows) == model.depth + 1
        for row in report.rows:
            assert 0.0 <= row["lid_acc"] <= 1.0
            assert np.isfinite(row["mi_nats"]) and row["mi_nats"] >= 0
        json_path, csv_path = write_report(report, tmp_path)
        lines = open(csv_path).read().strip().splitlines()
        assert lines[0] == "layer,lid_acc,mi_nats"
        assert len(lines) == model.depth + 2

    def test_dump_layer_zero_is_projected_input(self, probe_setup):
        model, utts = probe_setup
        dumps = dump_representations(model, utts[:2], layer=0)
        first = utts[0]
        import sshr.tensor as tz

        expected = first.features @ model.w_in.values + model.b_in.values + tz.sinusoidal_positions(first.n_frames, model.cfg.stack.hidden)
        assert np.allclose(dumps[0], expected, atol=1e-5)

    def test_dump_lengths_follow_length_law(self, probe_setup):
        model, utts = probe_setup
        lid = model.cfg.lid_extract_layer
        for d in range(model.depth + 1):
            dumps = dump_representations(model, utts[:3], layer=d)
            for utt, act in zip(utts[:3], dumps):
                assert act.shape[0] == utt.n_frames + (1 if d > lid else 0)

    def test_frame_level_dump_excludes_summary_row(self, probe_setup):
        model, utts = probe_setup
        d = model.depth  # after the splice
        full = dump_representations(model, utts[:2], layer=d)
        frames = dump_representations(model, utts[:2], layer=d, frame_level=True)
        for utt, whole, part in zip(utts[:2], full, frames):
            assert whole.shape[0] == utt.n_frames + 1
            assert part.shape[0] == utt.n_frames
            assert np.array_equal(part, whole[1:])

    def test_dump_layer_out_of_range(self, probe_setup):
        model, utts = probe_setup
        with pytest.raises(ConfigError):
            dump_representations(model, utts[:1], layer=model.depth + 1)

    def test_dumps_deterministic(self, probe_setup):
        model, utts = probe_setup
        a = dump_representations(model, utts[:2], layer=2)
        b = dump_representations(model, utts[:2], layer=2)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
