#!/usr/bin/env python3
#
# Reading finished cohesion matrices: nearest-by-cohesion classification,
# the argmax baseline, and cohesive-convergence group extraction.

from __future__ import annotations

import logging
import math
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Sequence

import networkx as nx
import numpy as np

from .cohesion import AgreementMatrix, CohesionMatrix, CohesionMatrix2D, CohesionTensor3D
from .dataset import LabeledSet
from .model import ModelSpec, ParamVector, logits_batch
from .util import EVAL_CHUNK, map_chunks

logger = logging.getLogger('cohesion_groups.analysis')

GROUP_METHODS = ('greedy', 'exhaustive')
DEFAULT_MIN_SUPPORT = 20

_MASKED = np.iinfo(np.int64).min


@dataclass(frozen=True, eq=False)
class PredictionReport:
    """Predictions for one evaluated set.

    best_index/best_score/best_support describe the winning element of A for
    cohesion classifiers and are None for the argmax baseline.
    """
    name: str
    predicted: np.ndarray
    truth: Optional[np.ndarray] = None
    best_index: Optional[np.ndarray] = None
    best_class: Optional[np.ndarray] = None
    best_score: Optional[np.ndarray] = None
    best_support: Optional[np.ndarray] = None

    @property
    def total(self) -> int:
        return int(self.predicted.size)

    @property
    def correct(self) -> Optional[int]:
        if self.truth is None:
            return None
        return int(np.count_nonzero(self.predicted == self.truth))

    @property
    def accuracy(self) -> Optional[float]:
        correct = self.correct
        if correct is None or self.total == 0:
            return None
        return correct / self.total

    def to_dict(self) -> dict[str, Any]:
        result: dict[str, Any] = {
            'name': self.name,
            'total': self.total,
            'correct': self.correct,
            'accuracy': self.accuracy,
            'predicted': self.predicted.tolist(),
        }
        for key in ('best_index', 'best_class', 'best_score', 'best_support'):
            value = getattr(self, key)
            if value is not None:
                result[key] = value.tolist()
        return result


def _check_labels_a(matrix: CohesionMatrix, labels_a: Sequence[int]) -> np.ndarray:
    if matrix.empty:
        raise ValueError(f'empty cohesion matrix {matrix.shape}')
    labels = np.asarray(labels_a, dtype=np.int64)
    if labels.shape != (matrix.size_a,):
        raise ValueError(f'{labels.size} labels for {matrix.size_a} rows of A')
    return labels


def _truth(truth: Optional[Sequence[int]], size_b: int) -> Optional[np.ndarray]:
    if truth is None:
        return None
    truth = np.asarray(truth, dtype=np.int64)
    if truth.shape != (size_b,):
        raise ValueError(f'{truth.size} ground-truth labels for {size_b} columns of B')
    return truth


def cohesion_classify(matrix: CohesionMatrix2D, labels_a: Sequence[int], truth: Optional[Sequence[int]] = None,
                      name: str = 'cohesion') -> PredictionReport:
    '''Each b takes the label of the a with the highest cohesive degree; the lowest index wins ties'''
    labels = _check_labels_a(matrix, labels_a)
    score = matrix.score
    columns = np.arange(matrix.size_b)
    best = np.argmax(score, axis=0)
    return PredictionReport(name, labels[best], _truth(truth, matrix.size_b), best_index=best,
                            best_score=score[best, columns], best_support=(matrix.pos + matrix.neg)[best, columns])


def cohesion_classify_unconditional(matrix: CohesionTensor3D, labels_a: Sequence[int],
                                    truth: Optional[Sequence[int]] = None,
                                    name: str = 'cohesion-unconditional') -> PredictionReport:
    """Each b takes the class c of the best (a, c) cell with labels_a[a] == c.

    Cells whose class disagrees with the label of a are removed before the
    argmax, so no label of B is consulted; ties go to the lowest (a, c).
    """
    labels = _check_labels_a(matrix, labels_a)
    size_a, size_b, classes = matrix.shape
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f'labels of A outside [0, {classes})')
    score = matrix.score
    allowed = labels[:, None] == np.arange(classes)[None, :]
    masked = np.where(allowed[:, None, :], score, _MASKED)
    # (A, B, C) -> (A * C, B): row a * C + c, so the first maximum is the lowest (a, c)
    flat = np.argmax(masked.transpose(0, 2, 1).reshape(size_a * classes, size_b), axis=0)
    best_a, best_c = np.divmod(flat, classes)
    columns = np.arange(size_b)
    support = matrix.pos + matrix.neg
    return PredictionReport(name, best_c, _truth(truth, size_b), best_index=best_a, best_class=best_c,
                            best_score=score[best_a, columns, best_c],
                            best_support=support[best_a, columns, best_c])


def argmax_baseline(spec: ModelSpec, theta: ParamVector, labeled: LabeledSet, executor: Optional[Executor] = None,
                    name: str = 'argmax') -> PredictionReport:
    features = labeled.features
    logits = map_chunks(lambda s, e: logits_batch(spec, theta, features[s:e]), len(labeled), EVAL_CHUNK, executor)
    return PredictionReport(name, np.argmax(logits, axis=1), np.array(labeled.labels))


def prediction_agreement(first: PredictionReport, second: PredictionReport) -> float:
    '''Fraction of elements on which two reports predict the same class'''
    if first.total != second.total:
        raise ValueError(f'reports cover {first.total} and {second.total} elements')
    if first.total == 0:
        raise ValueError('empty reports')
    return int(np.count_nonzero(first.predicted == second.predicted)) / first.total


def accuracy_gaps(alg1: PredictionReport, alg2: PredictionReport, argmax_train: PredictionReport,
                  argmax_test: PredictionReport) -> dict[str, Optional[float]]:
    def gap(first: PredictionReport, second: PredictionReport) -> Optional[float]:
        if first.accuracy is None or second.accuracy is None:
            return None
        return first.accuracy - second.accuracy

    return {
        'generalization': gap(argmax_train, argmax_test),
        'alg1_minus_argmax_test': gap(alg1, argmax_test),
        'alg2_minus_argmax_test': gap(alg2, argmax_test),
        'alg1_minus_alg2': gap(alg1, alg2),
    }


# Groups

@dataclass(frozen=True)
class Group:
    members: tuple[int, ...]
    min_p_hat: float
    min_support: int
    generative: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            'members': list(self.members),
            'min_p_hat': self.min_p_hat,
            'min_support': self.min_support,
            'generative': self.generative,
        }


@dataclass(frozen=True)
class GroupReport:
    """Groups over the indices 0..size-1 of one union set A u B."""
    groups: tuple[Group, ...]
    threshold: float
    min_support: int
    size: int
    method: str = 'greedy'
    membership_known: bool = field(default=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            'threshold': self.threshold,
            'min_support': self.min_support,
            'size': self.size,
            'method': self.method,
            'groups': [group.to_dict() for group in self.groups],
        }


def agreement_graph(agr: AgreementMatrix, threshold: float = 1.0,
                    min_support: int = DEFAULT_MIN_SUPPORT) -> nx.Graph:
    """Pairs i != j whose agreement reaches threshold with enough support, both ways.

    Edges carry the weaker direction's p_hat and support.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f'threshold {threshold} outside [0, 1]')
    if min_support < 0:
        raise ValueError('min_support must be non-negative')
    if agr.p_hat.ndim != 2 or agr.p_hat.shape[0] != agr.p_hat.shape[1]:
        raise ValueError(f'group extraction needs a square agreement matrix, got {agr.p_hat.shape}')
    p_hat = np.where(agr.defined, agr.p_hat, -1.0)
    p_low = np.minimum(p_hat, p_hat.T)
    support_low = np.minimum(agr.support, agr.support.T)
    qualifies = (p_low >= threshold) & (support_low >= min_support) & agr.defined & agr.defined.T
    graph = nx.Graph()
    graph.add_nodes_from(range(p_hat.shape[0]))
    for i, j in zip(*np.nonzero(np.triu(qualifies, k=1))):
        graph.add_edge(int(i), int(j), p_hat=float(p_low[i, j]), support=int(support_low[i, j]))
    return graph


def _greedy_cliques(graph: nx.Graph) -> list[tuple[int, ...]]:
    """Maximal cliques grown from the strongest edges not yet covered.

    A clique grows by the common neighbour with the highest summed p_hat
    towards the current members, lowest index first on ties.
    """
    edges = sorted(graph.edges(data=True), key=lambda e: (-e[2]['p_hat'], -e[2]['support'], min(e[:2]), max(e[:2])))
    covered: set[tuple[int, int]] = set()
    cliques = []
    for i, j, _ in edges:
        i, j = min(i, j), max(i, j)
        if (i, j) in covered:
            continue
        members = [i, j]
        candidates = set(graph[i]) & set(graph[j])
        while candidates:
            best = min(candidates, key=lambda c: (-sum(graph[c][m]['p_hat'] for m in members), c))
            members.append(best)
            candidates &= set(graph[best])
            candidates.discard(best)
        members.sort()
        for x in range(len(members)):
            for y in range(x + 1, len(members)):
                covered.add((members[x], members[y]))
        cliques.append(tuple(members))
    return cliques


def _exhaustive_cliques(graph: nx.Graph) -> list[tuple[int, ...]]:
    cliques = [tuple(sorted(clique)) for clique in nx.find_cliques(graph) if len(clique) > 1]
    return sorted(cliques)


def _describe(graph: nx.Graph, members: tuple[int, ...], membership: Optional[np.ndarray]) -> Group:
    pairs = [graph[x][y] for k, x in enumerate(members) for y in members[k + 1:]]
    generative = membership is not None and not bool(np.all(membership[list(members)]))
    return Group(members, min(p['p_hat'] for p in pairs), min(p['support'] for p in pairs), generative)


def _membership(train_membership: Optional[Sequence[bool]], size: int) -> Optional[np.ndarray]:
    if train_membership is None:
        return None
    membership = np.asarray(train_membership, dtype=bool)
    if membership.shape != (size,):
        raise ValueError(f'membership mask of length {membership.size} for {size} elements')
    return membership


def extract_groups(agr: AgreementMatrix, threshold: float = 1.0, min_support: int = DEFAULT_MIN_SUPPORT,
                   train_membership: Optional[Sequence[bool]] = None, method: str = 'greedy') -> GroupReport:
    """Cohesive-convergence groups of a union run (A := B := A u B).

    `greedy` returns maximal cliques of the agreement graph seeded by the
    strongest uncovered edges; `exhaustive` returns every maximal clique of
    size > 1 and is meant for small sets. With train_membership (True for
    training-side indices) each group is flagged generative when it has a
    member outside the training side.
    """
    if method not in GROUP_METHODS:
        raise ValueError(f'method must be one of {GROUP_METHODS}, got {method!r}')
    graph = agreement_graph(agr, threshold, min_support)
    size = graph.number_of_nodes()
    membership = _membership(train_membership, size)
    cliques = _greedy_cliques(graph) if method == 'greedy' else _exhaustive_cliques(graph)
    groups = tuple(_describe(graph, members, membership) for members in cliques)
    logger.info('%s extraction: %s edges, %s groups over %s elements (threshold %s, min support %s)', method,
                graph.number_of_edges(), len(groups), size, threshold, min_support)
    return GroupReport(groups, threshold, min_support, size, method, membership_known=membership is not None)


def find_generative_groups(report: GroupReport, train_membership: Sequence[bool]) -> GroupReport:
    '''Keeps groups with at least one member outside the training side'''
    membership = _membership(train_membership, report.size)
    assert membership is not None
    flagged = [replace(group, generative=not bool(np.all(membership[list(group.members)])))
               for group in report.groups]
    return replace(report, groups=tuple(group for group in flagged if group.generative), membership_known=True)


def label_purity(report: GroupReport, labels: Sequence[int]) -> Optional[float]:
    '''Fraction of groups whose members all share one label; None without groups'''
    if not report.groups:
        return None
    labels = np.asarray(labels, dtype=np.int64)
    pure = sum(1 for group in report.groups if np.unique(labels[list(group.members)]).size == 1)
    return pure / len(report.groups)


def chance_purity(report: GroupReport, labels: Sequence[int]) -> Optional[float]:
    """Expected label purity of random groups with the same sizes.

    A random s-subset of n elements is pure with probability
    sum_c C(n_c, s) / C(n, s).
    """
    if not report.groups:
        return None
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels)
    n = labels.size
    rates = []
    for group in report.groups:
        s = len(group.members)
        rates.append(sum(math.comb(int(c), s) for c in counts) / math.comb(n, s))
    return float(np.mean(rates))
