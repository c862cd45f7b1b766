#!/usr/bin/env python3
#
# Experiment report: accuracy rows, gaps, classifier/argmax coupling and the
# group section, as JSON for machines and aligned columns for people.

from __future__ import annotations

import json
import logging
import os
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd

from .analysis import GroupReport, PredictionReport, accuracy_gaps, chance_purity, label_purity
from .analysis import prediction_agreement

logger = logging.getLogger('cohesion_groups.report')

REPORT_JSON = 'report.json'
REPORT_TEXT = 'report.txt'


def _row(number: str, algorithm: str, dataset: str, prediction: PredictionReport) -> dict[str, Any]:
    return {
        'row': number,
        'algorithm': algorithm,
        'dataset': dataset,
        'accuracy': prediction.accuracy,
        'correct': prediction.correct,
        'total': prediction.total,
    }


def group_section(groups: GroupReport, union_labels: Sequence[int], size_a: int) -> dict[str, Any]:
    '''Groups with side tags (A for indices below size_a, B otherwise) and member labels'''
    labels = np.asarray(union_labels, dtype=np.int64)
    if labels.shape != (groups.size,):
        raise ValueError(f'{labels.size} labels for a group report over {groups.size} elements')
    entries = []
    for group in groups.groups:
        entry = group.to_dict()
        entry['sides'] = ['A' if m < size_a else 'B' for m in group.members]
        entry['labels'] = [int(labels[m]) for m in group.members]
        entries.append(entry)
    section = groups.to_dict()
    section.update({
        'groups': entries,
        'count': len(entries),
        'generative_count': sum(1 for entry in entries if entry['generative']),
        'label_purity': label_purity(groups, labels),
        'chance_purity': chance_purity(groups, labels),
    })
    return section


def build_report(alg1: PredictionReport, alg2: PredictionReport, argmax_train: PredictionReport,
                 argmax_test: PredictionReport, argmax_compact_test: Optional[PredictionReport] = None,
                 groups: Optional[GroupReport] = None, union_labels: Optional[Sequence[int]] = None,
                 size_a: int = 0, include_predictions: bool = True,
                 meta: Optional[dict[str, Any]] = None) -> dict[str, Any]:
    report: dict[str, Any] = {
        'rows': [
            _row('1', 'cohesion (conditional)', 'compact test', alg1),
            _row('2', 'cohesion (unconditional)', 'compact test', alg2),
            _row('arg max', 'arg max', 'training', argmax_train),
            _row('arg max', 'arg max', 'test', argmax_test),
        ],
        'gaps': accuracy_gaps(alg1, alg2, argmax_train, argmax_test),
    }
    if argmax_compact_test is not None:
        report['coupling'] = {
            'alg1_vs_argmax': prediction_agreement(alg1, argmax_compact_test),
            'alg2_vs_argmax': prediction_agreement(alg2, argmax_compact_test),
            'argmax_compact_test_accuracy': argmax_compact_test.accuracy,
        }
    if groups is not None:
        if union_labels is None:
            raise ValueError('a group section needs the labels of A u B')
        report['groups'] = group_section(groups, union_labels, size_a)
    if include_predictions:
        predictions = [alg1, alg2] + ([argmax_compact_test] if argmax_compact_test is not None else [])
        report['predictions'] = {p.name: p.to_dict() for p in predictions}
    if meta:
        report['meta'] = meta
    return report


def _table(header: Sequence[str], rows: list[Sequence[Any]]) -> list[str]:
    cells = [[np.nan if value is None else value for value in row] for row in rows]
    frame = pd.DataFrame(cells, columns=list(header), dtype=object)
    return frame.to_string(index=False, na_rep='-', float_format=lambda v: f'{v:.4f}').splitlines()


def render_text(report: dict[str, Any]) -> str:
    lines = ['Accuracy', '']
    lines += _table(('row', 'algorithm', 'dataset', 'accuracy', 'correct', 'total'),
                    [(r['row'], r['algorithm'], r['dataset'], r['accuracy'], r['correct'], r['total'])
                     for r in report['rows']])
    lines += ['', 'Gaps', '']
    lines += _table(('gap', 'value'), sorted(report['gaps'].items()))
    if 'coupling' in report:
        lines += ['', 'Agreement with arg max on the compact test set', '']
        lines += _table(('pair', 'value'), sorted(report['coupling'].items()))
    if 'groups' in report:
        section = report['groups']
        lines += ['', f"Groups ({section['method']}, threshold {section['threshold']}, "
                      f"min support {section['min_support']}, {section['size']} elements)", '']
        lines += _table(('count', 'generative', 'label purity', 'chance purity'),
                        [(section['count'], section['generative_count'], section['label_purity'],
                          section['chance_purity'])])
        if section['groups']:
            lines.append('')
            lines += _table(('#', 'size', 'min p_hat', 'support', 'generative', 'members'),
                            [(k, len(g['members']), g['min_p_hat'], g['min_support'], 'yes' if g['generative'] else 'no',
                              ' '.join(f'{m}{s}:{c}' for m, s, c in zip(g['members'], g['sides'], g['labels'])))
                             for k, g in enumerate(section['groups'])])
    return '\n'.join(lines) + '\n'


def write_report(out_dir: str, report: dict[str, Any]) -> tuple[str, str]:
    json_path = os.path.join(out_dir, REPORT_JSON)
    text_path = os.path.join(out_dir, REPORT_TEXT)
    with open(json_path, 'w') as outfile:
        json.dump(report, outfile, indent=2, sort_keys=True)
        outfile.write('\n')
    with open(text_path, 'w') as outfile:
        outfile.write(render_text(report))
    logger.info('wrote %s and %s', json_path, text_path)
    return json_path, text_path
