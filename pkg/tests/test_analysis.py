import itertools

import networkx as nx
import numpy as np
import pytest

from cohesion_groups.analysis import (PredictionReport, accuracy_gaps, agreement_graph, argmax_baseline,
                                      chance_purity, cohesion_classify, cohesion_classify_unconditional,
                                      extract_groups, find_generative_groups, label_purity, prediction_agreement)
from cohesion_groups.cohesion import (AgreementMatrix, CohesionMatrix2D, CohesionTensor3D, SamplingConfig, agreement,
                                      sample_cohesion)
from cohesion_groups.dataset import concat, gen_synthetic
from cohesion_groups.model import ModelSpec, zero_params
from cohesion_groups.trainer import OptimConfig, Trainer


def _matrix(score):
    score = np.asarray(score, dtype=np.int64)
    return CohesionMatrix2D(np.maximum(score, 0), np.maximum(-score, 0), np.zeros_like(score), trials=1)


def _agreement(p_hat, support=30):
    p_hat = np.asarray(p_hat, dtype=np.float64)
    return AgreementMatrix(p_hat, np.full(p_hat.shape, support, dtype=np.int64))


def _blocks(*sizes):
    n = sum(sizes)
    p_hat = np.zeros((n, n))
    start = 0
    for size in sizes:
        p_hat[start:start + size, start:start + size] = 1.0
        start += size
    return _agreement(p_hat)


class TestClassify:
    def test_highest_score_wins(self):
        report = cohesion_classify(_matrix([[5, -3], [2, 7]]), [0, 1], truth=[0, 0])
        np.testing.assert_array_equal(report.predicted, [0, 1])
        np.testing.assert_array_equal(report.best_index, [0, 1])
        np.testing.assert_array_equal(report.best_score, [5, 7])
        assert report.correct == 1
        assert report.accuracy == 0.5

    def test_ties_go_to_lowest_index(self):
        report = cohesion_classify(CohesionMatrix2D.empty_of(3, 4), [2, 0, 1])
        np.testing.assert_array_equal(report.predicted, [2, 2, 2, 2])
        assert report.accuracy is None

    def test_scale_invariant(self):
        score = np.array([[1, -2, 0], [3, 1, -1], [0, 4, 2]])
        first = cohesion_classify(_matrix(score), [0, 1, 2])
        second = cohesion_classify(_matrix(7 * score), [0, 1, 2])
        np.testing.assert_array_equal(first.predicted, second.predicted)

    def test_empty_matrix(self):
        with pytest.raises(ValueError):
            cohesion_classify(CohesionMatrix2D.empty_of(0, 3), [])

    def test_label_count_mismatch(self):
        with pytest.raises(ValueError):
            cohesion_classify(_matrix([[1, 2]]), [0, 1])

    def test_unconditional_uses_only_matching_classes(self):
        tensor = CohesionTensor3D.empty_of(2, 2, 2)
        tensor.pos[0, 0, 0] = 3
        tensor.pos[1, 0, 1] = 5
        tensor.pos[0, 0, 1] = 9  # a0 is labelled 0, so this cell is ignored
        tensor.pos[0, 1, 0] = 4
        tensor.pos[1, 1, 1] = 2
        report = cohesion_classify_unconditional(tensor, [0, 1], truth=[1, 0])
        np.testing.assert_array_equal(report.predicted, [1, 0])
        np.testing.assert_array_equal(report.best_index, [1, 0])
        np.testing.assert_array_equal(report.best_score, [5, 4])
        assert report.accuracy == 1.0

    def test_unconditional_label_out_of_range(self):
        with pytest.raises(ValueError):
            cohesion_classify_unconditional(CohesionTensor3D.empty_of(2, 1, 2), [5, 7])

    def test_unconditional_ignores_truth(self):
        tensor = CohesionTensor3D.empty_of(2, 1, 2)
        tensor.pos[1, 0, 1] = 1
        first = cohesion_classify_unconditional(tensor, [0, 1], truth=[0])
        second = cohesion_classify_unconditional(tensor, [0, 1], truth=[1])
        np.testing.assert_array_equal(first.predicted, second.predicted)


def test_argmax_on_zero_model(blobs):
    spec = ModelSpec('linear', input_dim=4, classes=3)
    report = argmax_baseline(spec, zero_params(spec), blobs)
    assert not report.predicted.any()
    assert report.accuracy == pytest.approx(1 / 3)


def test_gaps_and_agreement():
    truth = np.array([0, 1, 1, 0])
    alg1 = PredictionReport('1', np.array([0, 1, 1, 1]), truth)
    alg2 = PredictionReport('2', np.array([0, 1, 0, 1]), truth)
    train = PredictionReport('train', np.array([0, 1]), np.array([0, 1]))
    test = PredictionReport('test', np.array([0, 0, 1, 0]), truth)
    gaps = accuracy_gaps(alg1, alg2, train, test)
    assert gaps['generalization'] == pytest.approx(0.25)
    assert gaps['alg1_minus_argmax_test'] == pytest.approx(0.0)
    assert gaps['alg2_minus_argmax_test'] == pytest.approx(-0.25)
    assert gaps['alg1_minus_alg2'] == pytest.approx(0.25)
    assert prediction_agreement(alg1, alg2) == 0.75


class TestGroups:
    def test_all_agreeing(self):
        report = extract_groups(_agreement(np.ones((5, 5))))
        assert [group.members for group in report.groups] == [(0, 1, 2, 3, 4)]
        assert report.groups[0].min_p_hat == 1.0
        assert report.groups[0].min_support == 30

    @pytest.mark.parametrize('method', ['greedy', 'exhaustive'])
    def test_blocks(self, method):
        report = extract_groups(_blocks(2, 3), method=method)
        assert sorted(group.members for group in report.groups) == [(0, 1), (2, 3, 4)]

    def test_threshold_and_support(self):
        p_hat = np.array([[1.0, 0.9, 0.2], [0.9, 1.0, 0.2], [0.2, 0.2, 1.0]])
        assert not extract_groups(_agreement(p_hat)).groups
        assert extract_groups(_agreement(p_hat), threshold=0.85).groups[0].members == (0, 1)
        assert not extract_groups(_agreement(p_hat, support=10), threshold=0.85, min_support=20).groups

    def test_undefined_cells_do_not_connect(self):
        agr = AgreementMatrix(np.full((2, 2), np.nan), np.zeros((2, 2), dtype=np.int64))
        assert not extract_groups(agr, threshold=0.0, min_support=0).groups

    def test_both_directions_must_agree(self):
        p_hat = np.array([[1.0, 1.0], [0.5, 1.0]])
        assert not extract_groups(_agreement(p_hat)).groups

    @pytest.mark.parametrize('threshold', [-0.1, 1.5])
    def test_threshold_range(self, threshold):
        with pytest.raises(ValueError):
            extract_groups(_agreement(np.ones((2, 2))), threshold=threshold)

    def test_square_only(self):
        with pytest.raises(ValueError):
            agreement_graph(_agreement(np.ones((2, 3))))

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            extract_groups(_agreement(np.ones((2, 2))), method='spectral')

    @pytest.mark.parametrize('seed', range(5))
    def test_greedy_groups_are_maximal_cliques(self, seed):
        rng = np.random.default_rng(seed)
        n = 14
        upper = np.triu(rng.random((n, n)), k=1)
        agr = _agreement(upper + upper.T + np.eye(n))
        greedy = extract_groups(agr, threshold=0.6, min_support=1)
        graph = agreement_graph(agr, threshold=0.6, min_support=1)
        maximal = {tuple(sorted(clique)) for clique in nx.find_cliques(graph)}
        for group in greedy.groups:
            assert group.members in maximal
        covered = {pair for group in greedy.groups for pair in itertools.combinations(group.members, 2)}
        assert covered == {tuple(sorted(edge)) for edge in graph.edges}
        exhaustive = extract_groups(agr, threshold=0.6, min_support=1, method='exhaustive')
        assert {group.members for group in exhaustive.groups} == {c for c in maximal if len(c) > 1}


class TestGenerative:
    membership = [True, True, False, False, True]

    def test_flags_groups_with_test_members(self):
        report = extract_groups(_blocks(2, 3), train_membership=self.membership)
        flags = {group.members: group.generative for group in report.groups}
        assert flags == {(0, 1): False, (2, 3, 4): True}

    def test_filter(self):
        report = find_generative_groups(extract_groups(_blocks(2, 3)), self.membership)
        assert [group.members for group in report.groups] == [(2, 3, 4)]
        assert report.membership_known

    def test_membership_length(self):
        with pytest.raises(ValueError):
            extract_groups(_blocks(2, 3), train_membership=[True, False])


class TestPurity:
    def test_pure_groups(self):
        report = extract_groups(_blocks(2, 2))
        assert label_purity(report, [0, 0, 1, 1]) == 1.0
        assert label_purity(report, [0, 1, 1, 1]) == 0.5

    def test_chance_purity(self):
        report = extract_groups(_blocks(2, 2))
        assert chance_purity(report, [0, 0, 1, 1]) == pytest.approx(1 / 3)

    def test_no_groups(self):
        report = extract_groups(_agreement(np.zeros((3, 3))))
        assert label_purity(report, [0, 1, 2]) is None
        assert chance_purity(report, [0, 1, 2]) is None


class TestToyRun:
    size_a = 8

    @pytest.fixture(scope='class')
    def union_agreement(self, trained, blobs):
        trainer, state = trained
        union = concat(blobs.subset(range(self.size_a)), blobs.subset(range(self.size_a, 2 * self.size_a)))
        matrix = sample_cohesion(trainer, state, blobs, union, union, SamplingConfig(trials=20, seed=3))
        return agreement(matrix)

    @pytest.mark.parametrize('method', ['greedy', 'exhaustive'])
    def test_groups_against_maximal_cliques(self, union_agreement, method):
        membership = np.arange(2 * self.size_a) < self.size_a
        report = extract_groups(union_agreement, threshold=1.0, min_support=1, train_membership=membership,
                                method=method)
        graph = agreement_graph(union_agreement, threshold=1.0, min_support=1)
        maximal = {tuple(sorted(clique)) for clique in nx.find_cliques(graph)}
        groups = {group.members for group in report.groups}
        assert groups <= maximal
        for clique in maximal:
            if len(clique) > 1:
                assert any(set(clique) & set(members) for members in groups)
        for group in report.groups:
            assert group.generative == any(member >= self.size_a for member in group.members)
        if method == 'exhaustive':
            assert groups == {clique for clique in maximal if len(clique) > 1}

    def test_groups_are_purer_than_chance(self):
        data = gen_synthetic(classes=6, dim=8, per_class=30, separation=8.0, seed=5)
        spec = ModelSpec('linear', input_dim=8, classes=6)
        trainer = Trainer(spec, OptimConfig(learning_rate=0.05, batch_size=16, epochs=10, seed=0))
        state = trainer.train(data)
        union = data.subset(range(24))
        matrix = sample_cohesion(trainer, state, data, union, union, SamplingConfig(trials=30, seed=1))
        report = extract_groups(agreement(matrix), threshold=1.0, min_support=1)
        purity = label_purity(report, union.labels)
        assert purity is not None
        assert purity >= 2 * chance_purity(report, union.labels)


def test_classifiers_couple_on_separable_toy():
    data = gen_synthetic(classes=3, dim=6, per_class=80, separation=6.0, seed=2)
    spec = ModelSpec('linear', input_dim=6, classes=3)
    trainer = Trainer(spec, OptimConfig(learning_rate=0.05, batch_size=16, epochs=8, seed=0))
    state = trainer.train(data.subset(range(160)))
    a_set, b_set = data.subset(range(60)), data.subset(range(160, 240))
    matrix = sample_cohesion(trainer, state, data.subset(range(160)), a_set, b_set,
                             SamplingConfig(trials=30, seed=2))
    cohesion = cohesion_classify(matrix, a_set.labels, truth=b_set.labels)
    baseline = argmax_baseline(spec, state.theta, b_set)
    assert prediction_agreement(cohesion, baseline) >= 0.7
