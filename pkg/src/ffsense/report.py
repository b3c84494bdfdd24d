"""Markdown/CSV tables, confusion grids and the filter usability document.

All numbers are formatted with fixed six-digit precision and '.' as the
decimal point, so identical reports render to identical bytes.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from . import metrics as M

HIGH_CUT = 0.5
AGE_SKEW_YEARS = 0.5
BIAS_SHARE = 0.5

REPORT_FILES = (
    "distortion.md", "distortion.csv",
    "age_deviation.md", "age_deviation.csv",
    "gender_mispredictions.md", "gender_mispredictions.csv",
    "ethnicity_mispredictions.md", "ethnicity_mispredictions.csv",
    "confusion_gender.txt", "confusion_ethnicity.txt",
    "usability.md",
)


class ReportError(ValueError):
    pass


def fmt(x) -> str:
    if x is None:
        return "undefined"
    if isinstance(x, bool):
        return "yes" if x else "no"
    if isinstance(x, int):
        return str(x)
    return f"{float(x) + 0.0:.6f}"  # + 0.0 turns -0.0 into 0.0


def _label(labels: Mapping[str, str] | None, key) -> str:
    return (labels or {}).get(key, str(key))


def table_rows(report, labels: Mapping[str, str] | None = None) -> tuple[list[str], list[list[str]]]:
    """Header and formatted body rows for any metrics report."""
    if isinstance(report, M.FilterDistortionReport):
        header = ["Filter", "Average L2 distance", "Pairs", "Breaking"]
        rows = [[_label(labels, f), fmt(r.mean_d), fmt(r.n_pairs), fmt(r.breaking)] for f, r in report.rows.items()]
    elif isinstance(report, M.AgeDeviationReport):
        header = ["Filter", "Average age reduction (yrs)", "Average age increment (yrs)", "Net deviation (yrs)",
                  "Underestimated", "Overestimated"]
        rows = [[_label(labels, f), fmt(r.avg_reduction), fmt(r.avg_increment), fmt(r.net_deviation),
                 fmt(r.n_reduced), fmt(r.n_increased)] for f, r in report.rows.items()]
    elif isinstance(report, M.MispredictionTable):
        if report.task == "gender":
            header = ["Filter", "Males classified as females", "Females classified as males"]
        else:
            header = ["Filter", *report.columns]
        rows = [[_label(labels, f), *(fmt(int(r[c])) for c in report.columns)] for f, r in report.rows.items()]
    elif isinstance(report, M.ClassificationReport):
        header = ["Class", "Precision", "Recall", "F1", "Support"]
        rows = [[str(c), fmt(m.precision), fmt(m.recall), fmt(m.f1), fmt(m.support)]
                for c, m in report.per_class.items()]
    elif isinstance(report, M.RegressionReport):
        header = ["Metric", "Value"]
        rows = [["R2", fmt(report.r2)], ["MAE", fmt(report.mae)], ["MSE", fmt(report.mse)]]
    else:
        raise ReportError(f"cannot render {type(report).__name__}")
    return header, rows


def _markdown(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join(["---"] + ["---:"] * (len(header) - 1)) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _csv(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def render_table(report, format: str = "markdown", labels: Mapping[str, str] | None = None) -> str:
    header, rows = table_rows(report, labels)
    if format == "markdown":
        return _markdown(header, rows)
    if format == "csv":
        return _csv(header, rows)
    raise ReportError(f"unknown format {format!r}")


def render_confusion_grid(matrices: Mapping[str, M.ConfusionMatrix],
                          labels: Mapping[str, str] | None = None) -> str:
    """One aligned block per filter, rows = actual, columns = predicted."""
    if not matrices:
        return ""
    classes = next(iter(matrices.values())).classes
    for fid, cm in matrices.items():
        if cm.classes != classes:
            raise ReportError(f"{fid}: class list {list(cm.classes)} differs from {list(classes)}")
    corner = "actual \\ predicted"
    first = max(len(corner), *(len(str(c)) for c in classes))
    width = max(max(len(str(c)) for c in classes),
                max(len(str(int(cm.counts.max(initial=0)))) for cm in matrices.values()))
    blocks = []
    for fid, cm in matrices.items():
        lines = [_label(labels, fid),
                 corner.ljust(first) + "".join("  " + str(c).rjust(width) for c in classes)]
        for i, c in enumerate(classes):
            lines.append(str(c).ljust(first) + "".join("  " + str(int(v)).rjust(width) for v in cm.counts[i]))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


@dataclass(frozen=True)
class UsabilityVerdict:
    filter_id: str
    mean_d: float
    distortion_band: str
    notes: tuple[str, ...] = ()


def distortion_band(mean_d: float, breaking: float = M.BREAKING_THRESHOLD, high: float = HIGH_CUT) -> str:
    if mean_d > breaking:
        return "breaking"
    if mean_d > high:
        return "high"
    return "ok"


def _age_note(row: M.AgeDeviationRow | None) -> str | None:
    if row is None or row.net_deviation is None or abs(row.net_deviation) <= AGE_SKEW_YEARS:
        return None
    direction = "younger" if row.net_deviation < 0 else "older"
    return f"faces read {direction}: net age deviation {fmt(row.net_deviation)} yrs"


def _gender_note(counts: Mapping[str, int]) -> str | None:
    total = sum(counts.values())
    if not total:
        return None
    key, n = max(counts.items(), key=lambda kv: kv[1])
    if n / total <= BIAS_SHARE:
        return None
    a, b = key.split("->")
    return f"gender errors mostly {a} predicted as {b} ({n} of {total})"


def _ethnicity_note(counts: Mapping[str, int]) -> str | None:
    total = sum(counts.values())
    if not total:
        return None
    key, n = max(counts.items(), key=lambda kv: kv[1])
    if n / total <= BIAS_SHARE:
        return None
    return f"ethnicity bias toward {key} ({n} of {total} errors)"


def usability_report(distortion: M.FilterDistortionReport, age: M.AgeDeviationReport,
                     gender: M.MispredictionTable, ethnicity: M.MispredictionTable,
                     labels: Mapping[str, str] | None = None) -> tuple[list[UsabilityVerdict], str]:
    """Per-filter verdicts and a markdown document summarizing them."""
    filters = list(distortion.rows)
    for name, rep in (("age", age), ("gender", gender), ("ethnicity", ethnicity)):
        if set(rep.rows) != set(filters):
            diff = sorted(set(rep.rows) ^ set(filters))
            raise ReportError(f"{name} report covers a different filter set (differs on {diff})")
    verdicts = []
    for fid in filters:
        row = distortion.rows[fid]
        notes = [n for n in (_age_note(age.rows[fid]), _gender_note(gender.rows[fid]),
                             _ethnicity_note(ethnicity.rows[fid])) if n]
        verdicts.append(UsabilityVerdict(fid, row.mean_d, distortion_band(row.mean_d, distortion.threshold),
                                         tuple(notes)))

    lines = ["# Filter usability", "",
             "| Filter | Mean distance | Band | Notes |", "|---|---:|---|---|"]
    for v in verdicts:
        lines.append(f"| {_label(labels, v.filter_id)} | {fmt(v.mean_d)} | {v.distortion_band} | "
                     f"{'; '.join(v.notes) if v.notes else '-'} |")
    breaking = [_label(labels, v.filter_id) for v in verdicts if v.distortion_band == "breaking"]
    lines += ["", f"Breaking filters: {', '.join(breaking) if breaking else 'none'}", "", "---", "",
              f"Bands: ok for mean distance <= {fmt(HIGH_CUT)}, high up to {fmt(distortion.threshold)}, "
              f"breaking above {fmt(distortion.threshold)}. The {fmt(HIGH_CUT)} cut is a local convention.",
              f"Notes are added when |net age deviation| > {fmt(AGE_SKEW_YEARS)} yrs, or when one direction "
              f"or class holds more than {BIAS_SHARE:.0%} of a filter's gender or ethnicity errors.", ""]
    return verdicts, "\n".join(lines)


def write_reports(analysis: Mapping, out_dir: str | Path) -> list[Path]:
    """Render every report file into ``out_dir``.

    ``analysis`` is what :func:`ffsense.analysis.load_analysis` returns.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = analysis["filter_labels"]
    files = {}
    for stem, key in (("distortion", "distortion"), ("age_deviation", "age_deviation"),
                      ("gender_mispredictions", "gender_mispredictions"),
                      ("ethnicity_mispredictions", "ethnicity_mispredictions")):
        files[f"{stem}.md"] = render_table(analysis[key], "markdown", labels)
        files[f"{stem}.csv"] = render_table(analysis[key], "csv", labels)
    files["confusion_gender.txt"] = render_confusion_grid(analysis["gender_mispredictions"].confusions, labels)
    files["confusion_ethnicity.txt"] = render_confusion_grid(analysis["ethnicity_mispredictions"].confusions, labels)
    _, doc = usability_report(analysis["distortion"], analysis["age_deviation"],
                              analysis["gender_mispredictions"], analysis["ethnicity_mispredictions"], labels)
    files["usability.md"] = doc
    written = []
    for name in REPORT_FILES:
        path = out / name
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(files[name])
        written.append(path)
    return written
