import datetime
import logging
import os
import re
from typing import Dict, List, Optional, Sequence

import markdown
import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import yaml  # noqa: E402

from src.layer1.class_map import ClassMap  # noqa: E402
from src.layer4.benchmark import LatencyReport  # noqa: E402
from src.layer4.metrics import MetricReport  # noqa: E402

logger = logging.getLogger("ReportGenerator")

HTML_TEMPLATE = """<!DOCTYPE html>
<html>
<head>
<meta charset="utf-8">
<title>{title}</title>
<style>
body {{ font-family: sans-serif; margin: 40px; color: #2c3e50; }}
table {{ border-collapse: collapse; margin: 20px 0; }}
th, td {{ border: 1px solid #d0d7de; padding: 6px 12px; text-align: right; }}
th {{ background: #f0f3f6; }}
h1 {{ border-bottom: 2px solid #3498db; padding-bottom: 10px; }}
</style>
</head>
<body>
{body}
</body>
</html>
"""


class ReportGenerator:
    """
    Writes metric, latency, comparison and class-statistics reports.
    Every report has a YAML twin for machines and a Markdown (plus HTML) form for people.

    Args:
        config_path: config.yaml; `paths.results_dir` is the default output directory.
        output_dir: Overrides the configured results directory. Created if missing.
    """

    def __init__(self, config_path: str = "config/config.yaml", output_dir: Optional[str] = None):
        with open(config_path, 'r') as f:
            self.config = yaml.safe_load(f) or {}
        self.output_dir = output_dir or self.config.get('paths', {}).get('results_dir', './results')
        os.makedirs(self.output_dir, exist_ok=True)

    def _stem(self, name: str, out: Optional[str] = None) -> str:
        """Output path without extension: `out` as given, else a timestamped name under output_dir."""
        if out:
            os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
            return os.path.splitext(out)[0]
        safe = re.sub(r'_+', '_', "".join(c if c.isalnum() else "_" for c in name)).strip("_")[:50]
        timestamp = datetime.datetime.now().strftime("%Y%m%d_%H%M%S")
        return os.path.join(self.output_dir, f"{timestamp}_{safe}")

    @staticmethod
    def _write_yaml(path: str, doc: dict):
        with open(path, 'w') as f:
            yaml.safe_dump(doc, f, sort_keys=False)

    @staticmethod
    def _write_markdown(stem: str, text: str, title: str) -> List[str]:
        md_path, html_path = f"{stem}.md", f"{stem}.html"
        with open(md_path, 'w') as f:
            f.write(text)
        body = markdown.markdown(text, extensions=['tables'])
        with open(html_path, 'w') as f:
            f.write(HTML_TEMPLATE.format(title=title, body=body))
        return [md_path, html_path]

    def write_metric_report(self, report: MetricReport, name: str = "eval", out: Optional[str] = None) -> Dict[str, str]:
        """
        Writes per-class IoU, mIoU and pixel accuracy.

        Args:
            report: Evaluation result to write.
            name: Report title; also names the files when `out` is not given.
            out: Explicit output path. Its extension is replaced per format.

        Returns:
            Paths keyed by "yaml", "markdown" and "html".
        """
        stem = self._stem(name, out)
        title = f"Segmentation Results: {name}"
        self._write_yaml(f"{stem}.yaml", report.to_dict())
        md_path, html_path = self._write_markdown(stem, report.to_markdown(title), title)
        logger.info(f"metric report saved to: {stem}.yaml / .md / .html")
        return {"yaml": f"{stem}.yaml", "markdown": md_path, "html": html_path}

    def write_latency_report(self, reports: Sequence[LatencyReport], name: str = "bench",
                             out: Optional[str] = None) -> Dict[str, str]:
        """Median and p95 per run against the budget. Returns paths keyed by "yaml", "markdown" and "html"."""
        stem = self._stem(name, out)
        self._write_yaml(f"{stem}.yaml", {"runs": [r.to_dict() for r in reports]})
        lines = [f"# Inference Latency: {name}", "",
                 "| mode | runs | median (ms) | p95 (ms) | budget (ms) | within budget |",
                 "|---|---|---|---|---|---|"]
        for r in reports:
            lines.append(f"| {r.mode.value} | {len(r.times_ms)} | {r.median_ms:.2f} | {r.p95_ms:.2f} "
                         f"| {r.budget_ms:.1f} | {'yes' if r.within_budget else 'no'} |")
        md_path, html_path = self._write_markdown(stem, "\n".join(lines) + "\n", f"Inference Latency: {name}")
        logger.info(f"latency report saved to: {stem}.yaml")
        return {"yaml": f"{stem}.yaml", "markdown": md_path, "html": html_path}

    def write_comparison(self, rows: Sequence[dict], budget_ms: float, name: str = "compare",
                         out: Optional[str] = None) -> Dict[str, str]:
        """
        Table and mIoU-versus-latency figure over backbone presets. The figure shades the real-time zone.

        Args:
            rows: One dict per preset with keys preset, parameters, miou (None when
                not evaluated), single_ms and dual_ms (medians).
            budget_ms: Real-time budget a dual run must stay within.
            name: Report title; also names the files when `out` is not given.
            out: Explicit output path. Its extension is replaced per format.

        Returns:
            Paths keyed by "yaml", "markdown", "html" and "figure".
        """
        stem = self._stem(name, out)
        self._write_yaml(f"{stem}.yaml", {"budget_ms": float(budget_ms), "presets": [dict(r) for r in rows]})

        def pct(v):
            return "n/a" if v is None or np.isnan(v) else f"{100.0 * v:.2f}"

        lines = [f"# Backbone Comparison: {name}", "",
                 "| preset | parameters | mIoU | single (ms) | dual (ms) | real-time |",
                 "|---|---|---|---|---|---|"]
        for r in rows:
            ok = "yes" if r["dual_ms"] <= budget_ms else "no"
            lines.append(f"| {r['preset']} | {r['parameters']:,} | {pct(r['miou'])} | {r['single_ms']:.2f} "
                         f"| {r['dual_ms']:.2f} | {ok} |")
        md_path, html_path = self._write_markdown(stem, "\n".join(lines) + "\n", f"Backbone Comparison: {name}")

        fig, ax = plt.subplots(figsize=(6, 4))
        dual = np.array([r["dual_ms"] for r in rows], dtype=np.float64)
        miou = np.array([np.nan if r["miou"] is None else 100.0 * r["miou"] for r in rows], dtype=np.float64)
        right = max(budget_ms, float(np.nanmax(dual)) if len(dual) else budget_ms) * 1.15
        ax.axvspan(0.0, budget_ms, color="#2ecc71", alpha=0.15, label=f"real-time ({budget_ms:.1f} ms)")
        ax.scatter(dual, miou, color="#2c3e50", zorder=3)
        for r, x, y in zip(rows, dual, miou):
            if np.isnan(y):
                continue
            ax.annotate(r["preset"], (x, y), textcoords="offset points", xytext=(4, 4))
        ax.set_xlim(0.0, right)
        ax.set_xlabel("dual inference median (ms)")
        ax.set_ylabel("mIoU (%)")
        ax.legend(loc="lower right")
        fig.tight_layout()
        png_path = f"{stem}.png"
        fig.savefig(png_path, dpi=120)
        plt.close(fig)
        logger.info(f"comparison saved to: {stem}.yaml / .png")
        return {"yaml": f"{stem}.yaml", "markdown": md_path, "html": html_path, "figure": png_path}

    def write_class_statistics(self, counts: np.ndarray, class_map: ClassMap, name: str = "stats",
                               out: Optional[str] = None) -> Dict[str, str]:
        """Per-class point counts as YAML and a log-scale bar chart in class colors."""
        stem = self._stem(name, out)
        counts = np.asarray(counts, dtype=np.int64)
        total = int(counts.sum())
        self._write_yaml(f"{stem}.yaml", {
            "total": total,
            "classes": {n: {"points": int(c), "fraction": (float(c) / total if total else 0.0)}
                        for n, c in zip(class_map.names(), counts)},
        })
        fig, ax = plt.subplots(figsize=(8, 4))
        positions = np.arange(len(counts))
        # Empty classes would break the log axis
        ax.bar(positions, np.maximum(counts, 1), color=class_map.colors()[:len(counts)] / 255.0, edgecolor="#2c3e50")
        ax.set_yscale("log")
        ax.set_xticks(positions)
        ax.set_xticklabels(class_map.names(), rotation=35, ha="right")
        ax.set_ylabel("points")
        fig.tight_layout()
        png_path = f"{stem}.png"
        fig.savefig(png_path, dpi=120)
        plt.close(fig)
        logger.info(f"class statistics saved to: {stem}.yaml / .png")
        return {"yaml": f"{stem}.yaml", "figure": png_path}
