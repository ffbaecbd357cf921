"""Generate metrics documentation from mrsi.pipeline.metrics.

Introspects the Prometheus metric objects defined there and emits a Markdown
table with name, type, labels and help text.

Usage:
  python scripts/generate_metrics_doc.py > docs/METRICS.md
"""
from __future__ import annotations

import importlib
import inspect
import os
import sys
from typing import List

from prometheus_client.metrics import MetricWrapperBase

MODULE = "mrsi.pipeline.metrics"

TYPE_MAP = {
    "counter": "counter",
    "histogram": "histogram",
    "gauge": "gauge",
}


def collect() -> List[dict]:
    # repository root on sys.path so the package imports from a checkout
    repo_root = os.path.abspath(os.path.join(os.path.dirname(__file__), os.pardir))
    if repo_root not in sys.path:
        sys.path.insert(0, repo_root)
    mod = importlib.import_module(MODULE)
    metrics = []
    for _, obj in inspect.getmembers(mod):
        if isinstance(obj, MetricWrapperBase):
            family = obj.describe()[0]
            metrics.append(
                {
                    "name": family.name,
                    "type": TYPE_MAP.get(family.type, family.type),
                    "help": family.documentation,
                    "labels": list(getattr(obj, "_labelnames", ()) or ()),
                }
            )
    return sorted(metrics, key=lambda m: m["name"])


def render(md_metrics: List[dict]) -> str:
    lines = [
        "# MRSI Pipeline Metrics",
        "",
        "This document is auto-generated by `scripts/generate_metrics_doc.py`. Do not edit manually.",
        "",
        "Every CLI command writes a snapshot of these to `timings/metrics.prom` in the output directory.",
        "",
        "| Metric | Type | Labels | Description |",
        "|--------|------|--------|-------------|",
    ]
    for m in md_metrics:
        labels = ",".join(m["labels"]) if m["labels"] else "-"
        lines.append(f"| `{m['name']}` | {m['type']} | {labels} | {m['help']} |")
    return "\n".join(lines) + "\n"


def main():
    print(render(collect()), end="")


if __name__ == "__main__":
    main()
