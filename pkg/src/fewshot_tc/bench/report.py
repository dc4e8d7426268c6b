"""Tables built from run records: shot sweep, way heatmap, scenario sizes, plain transfer."""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError
from .metrics import mean_ci95
from .records import RunRecord

FORMATS = {"csv": "csv", "tsv": "tsv", "markdown": "md"}

CI_FOOTER = ("95% CI: normal approximation, mean ± 1.96·sd/√n with sample sd, "
             "computed over {unit}.")


@dataclass
class Table:
    name: str
    header: list
    rows: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)   # "row|column" -> sorted record ids
    footer: str = ""


def _fmt(values) -> str:
    m, h = mean_ci95(values)
    return f"{m:.4f}±{h:.4f}"


def _group(records, key):
    out = defaultdict(list)
    for r in records:
        out[key(r)].append(r)
    return out


def shots_table(records) -> Table:
    recs = [r for r in records if r.scenario == "shots"]
    shots = sorted({r.shots for r in recs})
    t = Table("shots", ["method"] + [f"S={s}" for s in shots],
              footer=CI_FOOTER.format(unit="the test episodes of all seeds"))
    cells = _group(recs, lambda r: (r.method, r.shots))
    for method in sorted({r.method for r in recs}):
        row = [method]
        for s in shots:
            group = cells.get((method, s), [])
            row.append(_fmt([r.balanced_accuracy for r in group]) if group else "")
            t.provenance[f"{method}|S={s}"] = sorted(r.record_id for r in group)
        t.rows.append(row)
    return t


def ways_table(records) -> Table:
    """Heatmap of mean accuracy: one row per (method, train ways), one column per test ways."""
    recs = [r for r in records if r.scenario == "ways"]
    test_ways = sorted({r.ways for r in recs})
    t = Table("ways", ["method", "train_ways"] + [f"N={w}" for w in test_ways],
              footer="Cells are mean balanced accuracy over test episodes; the reference row "
                     "fits a forest on each episode's support set.")
    cells = _group(recs, lambda r: (r.method, r.train_ways, r.ways))
    keys = sorted({(r.method, r.train_ways) for r in recs},
                  key=lambda k: (k[1] is None, k[0], k[1] or 0))
    for method, tw in keys:
        label = "reference" if tw is None else str(tw)
        row = [method, label]
        for w in test_ways:
            group = cells.get((method, tw, w), [])
            row.append(f"{mean_ci95([r.balanced_accuracy for r in group])[0]:.4f}"
                       if group else "")
            t.provenance[f"{method}/{label}|N={w}"] = sorted(r.record_id for r in group)
        t.rows.append(row)
    return t


def _mean_or_blank(values, spec="{:.1f}") -> str:
    values = [v for v in values if v is not None]
    return spec.format(sum(values) / len(values)) if values else ""


def scenarios_table(records) -> Table:
    recs = [r for r in records if r.scenario in ("a", "b", "c")]
    scen = ("a", "b", "c")
    t = Table("scenarios", ["method"] + [f"scenario_{s}" for s in scen]
              + ["params_trunk", "params_head", "nodes", "depth"],
              footer=CI_FOOTER.format(unit="runs of all seeds (one run per fold, or "
                                            "per fold and class selection)"))
    cells = _group(recs, lambda r: (r.method, r.scenario))
    for method in sorted({r.method for r in recs}):
        row = [method]
        for s in scen:
            group = cells.get((method, s), [])
            row.append(_fmt([r.balanced_accuracy for r in group]) if group else "")
            t.provenance[f"{method}|scenario_{s}"] = sorted(r.record_id for r in group)
        sized = cells.get((method, "a"), []) or cells.get((method, "c"), [])
        row += [_mean_or_blank([r.params_trunk for r in sized], "{:.0f}"),
                _mean_or_blank([r.params_head for r in sized], "{:.0f}"),
                _mean_or_blank([r.nodes for r in sized], "{:.0f}"),
                _mean_or_blank([r.depth for r in sized], "{:.2f}")]
        for col in ("params_trunk", "params_head", "nodes", "depth"):
            t.provenance[f"{method}|{col}"] = sorted(r.record_id for r in sized)
        t.rows.append(row)
    return t


def plain_table(records) -> Table:
    recs = [r for r in records if r.scenario == "plain"]
    t = Table("plain", ["method", "accuracy", "params_head"],
              footer=CI_FOOTER.format(unit="seeds"))
    for method, group in sorted(_group(recs, lambda r: r.method).items()):
        t.rows.append([method, _fmt([r.balanced_accuracy for r in group]),
                       _mean_or_blank([r.params_head for r in group], "{:.0f}")])
        t.provenance[f"{method}|accuracy"] = sorted(r.record_id for r in group)
    return t


def build_tables(records) -> list[Table]:
    records = list(records)
    return [shots_table(records), ways_table(records), scenarios_table(records),
            plain_table(records)]


def render(table: Table, fmt: str) -> str:
    if fmt not in FORMATS:
        raise ConfigError(f"unknown report format {fmt!r}; choose from {sorted(FORMATS)}")
    if fmt == "markdown":
        lines = ["| " + " | ".join(table.header) + " |",
                 "|" + "|".join("---" for _ in table.header) + "|"]
        lines += ["| " + " | ".join(row) + " |" for row in table.rows]
        if table.footer:
            lines += ["", table.footer]
        return "\n".join(lines) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="," if fmt == "csv" else "\t", lineterminator="\n")
    writer.writerow(table.header)
    writer.writerows(table.rows)
    if table.footer:
        buf.write(f"# {table.footer}\n")
    return buf.getvalue()


def write_report(records, out_dir, fmt: str = "csv") -> list[Path]:
    """Write every table plus ``provenance.json``; identical records give identical bytes."""
    if fmt not in FORMATS:
        raise ConfigError(f"unknown report format {fmt!r}; choose from {sorted(FORMATS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths, provenance = [], {}
    for table in build_tables(records):
        path = out / f"{table.name}.{FORMATS[fmt]}"
        path.write_text(render(table, fmt), encoding="utf-8")
        paths.append(path)
        provenance[table.name] = table.provenance
    prov = out / "provenance.json"
    prov.write_text(json.dumps(provenance, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return paths + [prov]
