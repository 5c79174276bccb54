"""Serializer helpers for reports, metrics and vote tables."""

from __future__ import annotations

import json
from dataclasses import asdict
from typing import Dict, List

from tools.cluster_evaluation import EvalReport
from tools.consistency_voting import VoteTable
from tools.feature_dataset import Dataset
from tools.train_gcd_model import EpochMetrics, GradCheckReport

from discovery.services.storage import matrix_csv_text


def eval_report_to_dict(report: EvalReport) -> dict:
    payload = {
        "all_acc": report.all_acc,
        "old_acc": report.old_acc,
        "new_acc": report.new_acc,
        "k_used": report.k_used,
        "space": report.space,
        "mapping": [[int(cluster), int(label)] for cluster, label in report.mapping],
    }
    if report.k_scores:
        payload["k_scores"] = {str(k): score for k, score in sorted(report.k_scores.items())}
    return payload


def eval_report_json(report: EvalReport) -> str:
    return json.dumps(eval_report_to_dict(report), sort_keys=True)


def metrics_to_rows(metrics: List[EpochMetrics]) -> List[Dict[str, object]]:
    return [asdict(item) for item in metrics]


def gradcheck_lines(report: GradCheckReport) -> List[str]:
    lines = [f"{name}\t{error:.3e}" + ("\tFAIL" if not error < report.tol else "") for name, error in report.errors.items()]
    verdict = "PASS" if report.passed else f"FAIL ({len(report.failing)} tensors above tol {report.tol:g})"
    lines.append(f"max_rel_error\t{report.max_error:.3e}\t{verdict}")
    return lines


def vote_counts_csv(votes: VoteTable, ds: Dataset) -> str:
    return matrix_csv_text(votes.w, [int(i) for i in ds.ids], fmt=lambda v: str(int(v)))


def vote_scores_csv(votes: VoteTable, ds: Dataset) -> str:
    return matrix_csv_text(votes.c, [int(i) for i in ds.ids], fmt=lambda v: "%.10g" % v)
