#!/usr/bin/env python3
"""
Markdown Run Report Generator
Summarizes one training run from its metrics CSV and evaluation report JSON

Usage:
    python3 -m tools.generate_markdown_report path/to/metrics.csv path/to/eval_report.json [path/to/report.md]
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from tools.gcd_losses import COMPONENTS
from tools.train_gcd_model import METRICS_COLUMNS

Row = Dict[str, Optional[float]]


def load_metrics(path) -> List[Row]:
    """Read a metrics CSV; blank accuracy cells become None."""
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"Metrics file not found: {source}")
    with source.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ValueError(f"Metrics file {source} has columns {reader.fieldnames}, expected {list(METRICS_COLUMNS)}")
        rows: List[Row] = []
        for raw in reader:
            row: Row = {"epoch": int(raw["epoch"])}
            for column in METRICS_COLUMNS[1:]:
                row[column] = float(raw[column]) if raw[column] else None
            rows.append(row)
    return rows


def _pct(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100.0 * value:.2f}%"


def _num(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.4f}"


class RunReportGenerator:
    def __init__(self, metrics: Sequence[Row], evaluation: Dict, title: str = "Category Discovery Run"):
        self.metrics = list(metrics)
        self.evaluation = evaluation
        self.title = title

    def generate_header(self):
        return f"""# {self.title}
**Epochs Logged:** {len(self.metrics)}
**Evaluation Space:** {self.evaluation.get('space', 'n/a')}
**Clusters (k):** {self.evaluation.get('k_used', 'n/a')}

---

"""

    def generate_summary(self):
        """Final accuracies plus the best epoch seen during training."""
        text = f"""## Summary

| Subset | Accuracy |
|---|---|
| All | {_pct(self.evaluation.get('all_acc'))} |
| Old | {_pct(self.evaluation.get('old_acc'))} |
| New | {_pct(self.evaluation.get('new_acc'))} |

"""
        scored = [row for row in self.metrics if row.get("all_acc") is not None]
        if scored:
            best = max(scored, key=lambda row: row["all_acc"])
            text += f"Best per-epoch All accuracy: {_pct(best['all_acc'])} at epoch {int(best['epoch'])}.\n\n"
        return text + "---\n\n"

    def generate_training_curve(self):
        if not self.metrics:
            return "## Training Curve\n\nNo epochs were run.\n\n---\n\n"
        columns = ["epoch", *COMPONENTS, "total", "all_acc"]
        text = "## Training Curve\n\n"
        text += "| " + " | ".join(columns) + " |\n"
        text += "|" + "---|" * len(columns) + "\n"
        for row in self.metrics:
            cells = [str(int(row["epoch"]))] + [_num(row.get(column)) for column in columns[1:]]
            text += "| " + " | ".join(cells) + " |\n"
        return text + "\n---\n\n"

    def generate_mapping(self):
        mapping = self.evaluation.get("mapping", [])
        text = "## Cluster to Class Mapping\n\n"
        if not mapping:
            return text + "No clusters were matched.\n\n---\n\n"
        text += "| Cluster | Class |\n|---|---|\n"
        for cluster, label in mapping:
            text += f"| {cluster} | {label} |\n"
        return text + "\n---\n\n"

    def generate_k_scores(self):
        scores = self.evaluation.get("k_scores")
        if not scores:
            return ""
        text = "## Class Count Estimate\n\n| k | Labeled accuracy |\n|---|---|\n"
        for k, score in sorted(scores.items(), key=lambda item: int(item[0])):
            marker = " (chosen)" if int(k) == self.evaluation.get("k_used") else ""
            text += f"| {k}{marker} | {_pct(score)} |\n"
        return text + "\n---\n\n"

    def generate(self):
        report = ""
        report += self.generate_header()
        report += self.generate_summary()
        report += self.generate_k_scores()
        report += self.generate_training_curve()
        report += self.generate_mapping()
        return report


def main():
    """Main execution function"""
    if len(sys.argv) not in (3, 4):
        print("Usage:")
        print("  python3 -m tools.generate_markdown_report path/to/metrics.csv path/to/eval_report.json [path/to/report.md]")
        sys.exit(1)

    metrics_file = sys.argv[1]
    eval_file = sys.argv[2]
    output_path = Path(sys.argv[3]) if len(sys.argv) == 4 else Path(metrics_file).parent / "report.md"

    try:
        metrics = load_metrics(metrics_file)
        with open(eval_file, "r", encoding="utf-8") as f:
            evaluation = json.load(f)

        report = RunReportGenerator(metrics, evaluation).generate()
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, "w", encoding="utf-8") as f:
            f.write(report)
        print(f"Report saved to: {output_path}")

    except FileNotFoundError as e:
        print(f"Error: File not found: {e}")
        sys.exit(1)
    except (json.JSONDecodeError, ValueError) as e:
        print(f"Error: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
