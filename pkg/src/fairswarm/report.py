"""SVG charts and a summary table over experiment output directories.

``render_report`` scans a directory for the aggregate CSVs that
``experiments.run_experiment`` wrote, draws one chart per preset found,
and writes ``summary.csv`` with the headline comparisons (rounds to stop,
final variance, freeloader delay).  Rendering the same directory twice
produces byte-identical SVGs.
"""

from __future__ import annotations

import csv
from itertools import accumulate
from pathlib import Path
from statistics import fmean, median

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .experiments import (  # noqa: E402
    AGGREGATE_HEADER, MANIFEST_HEADER, NODES_HEADER, MissingData,
    UnknownPreset, preset,
)
from .metrics import ROLE_FREELOADER, ROLE_LEECHER  # noqa: E402

_AXIS_LABELS = {
    "avg_pieces": "average pieces per node",
    "seeder_upload_mean": "mean seeder uploads (cumulative)",
    "seeder_upload_per_interval": "seeder uploads this round",
    "upload_variance": "upload variance across nodes",
    "completions": "downloads completed (cumulative)",
}


def _read_rows(path: Path, header: tuple) -> list:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        first = tuple(next(reader, ()))
        if first != header:
            raise MissingData(f"{path}: unexpected header {first}")
        return list(reader)


def _load_aggregate(path: Path) -> dict:
    """arm -> metric -> list of (round, mean, median) sorted by round."""
    out: dict[str, dict[str, list]] = {}
    for rnd, arm, metric, mean, med, _n in _read_rows(path, AGGREGATE_HEADER):
        out.setdefault(arm, {}).setdefault(metric, []).append(
            (int(rnd), float(mean), float(med)))
    for arm in out.values():
        for series in arm.values():
            series.sort()
    return out


def _figure(title: str):
    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=100)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _save(fig, path: Path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _chart_metric(name: str) -> tuple:
    try:
        found = preset(name)
        return found.chart, found.description
    except UnknownPreset:
        return "avg_pieces", f"scenario {name}"


def _line_chart(name: str, metric: str, description: str, aggregate: dict,
                out: Path) -> Path:
    fig, ax = _figure(f"{name}: {description}")
    for arm in sorted(aggregate):
        series = aggregate[arm].get(metric, [])
        xs = [r for r, _, _ in series]
        ys = [m for _, m, _ in series]
        if metric == "completions":
            ys = list(accumulate(ys))
        ax.plot(xs, ys, label=arm, linewidth=1.5)
    ax.set_xlabel("round")
    ax.set_ylabel(_AXIS_LABELS.get(metric, metric))
    ax.legend()
    path = out / f"{name}.svg"
    _save(fig, path)
    return path


def _node_uploads(data_dir: Path, name: str, arm: str) -> dict:
    """node id -> mean final uploads across seeds, leechers only."""
    totals: dict[int, list] = {}
    for path in sorted(data_dir.glob(f"{name}_{arm}_*_nodes.csv")):
        for node, _arm, _seed, role, uploads, _downs, _done in \
                _read_rows(path, NODES_HEADER):
            if role == ROLE_LEECHER:
                totals.setdefault(int(node), []).append(int(uploads))
    return {node: fmean(vals) for node, vals in totals.items()}


def _bar_chart(name: str, description: str, data_dir: Path, arms: list,
               out: Path) -> Path:
    fig, ax = _figure(f"{name}: {description}")
    per_arm = {arm: _node_uploads(data_dir, name, arm) for arm in arms}
    nodes = sorted(set.intersection(*(set(d) for d in per_arm.values())))[:10]
    width = 0.8 / max(len(arms), 1)
    for i, arm in enumerate(sorted(arms)):
        xs = [pos + i * width for pos in range(len(nodes))]
        ax.bar(xs, [per_arm[arm].get(n, 0.0) for n in nodes],
               width=width, label=arm)
    ax.set_xticks([pos + width / 2 for pos in range(len(nodes))])
    ax.set_xticklabels([str(n) for n in nodes])
    ax.set_xlabel("leecher node id")
    ax.set_ylabel("mean final uploads")
    ax.legend()
    path = out / f"{name}.svg"
    _save(fig, path)
    return path


def _freeloader_medians(data_dir: Path, name: str, arms: list) -> dict:
    """arm -> median completion round over every freeloader and seed."""
    out = {}
    for arm in arms:
        rounds = []
        for path in sorted(data_dir.glob(f"{name}_{arm}_*_nodes.csv")):
            for _node, _arm, _seed, role, _up, _down, done in \
                    _read_rows(path, NODES_HEADER):
                if role == ROLE_FREELOADER and done != "":
                    rounds.append(int(done))
        if rounds:
            out[arm] = median(rounds)
    return out


def _summary_rows(name: str, aggregate: dict, manifest: list,
                  data_dir: Path) -> list:
    rows = []
    metric, _ = _chart_metric(name)
    by_arm: dict[str, list] = {}
    for _preset, arm, _seed, converged, rounds, _file in manifest:
        by_arm.setdefault(arm, []).append((converged == "true", int(rounds)))
    for arm in sorted(by_arm):
        cells = by_arm[arm]
        rows.append([name, arm, "median_rounds_to_stop",
                     f"{median(r for _, r in cells):.6g}"])
        rows.append([name, arm, "converged_fraction",
                     f"{fmean(1.0 if ok else 0.0 for ok, _ in cells):.6g}"])
        if metric != "node_uploads" and arm in aggregate:
            series = aggregate[arm].get("upload_variance", [])
            if series:
                rows.append([name, arm, "final_upload_variance",
                             f"{series[-1][1]:.6g}"])
    fl = _freeloader_medians(data_dir, name, sorted(by_arm))
    for arm in sorted(fl):
        rows.append([name, arm, "freeloader_median_completion",
                     f"{fl[arm]:.6g}"])
    if "proposed" in fl and "willingness50" in fl and fl["willingness50"]:
        rows.append([name, "proposed", "freeloader_delay_ratio_vs_willingness50",
                     f"{fl['proposed'] / fl['willingness50']:.6g}"])
    return rows


def render_report(data_dir, out_dir=None) -> list:
    """Draw every preset found in ``data_dir``; returns written paths."""
    data = Path(data_dir)
    out = Path(out_dir) if out_dir else data
    out.mkdir(parents=True, exist_ok=True)
    aggregates = sorted(data.glob("*_aggregate.csv"))
    if not aggregates:
        raise MissingData(f"no aggregate CSVs under {data}")

    plt.rcParams["svg.hashsalt"] = "fairswarm"
    written = []
    summary = []
    for agg_path in aggregates:
        name = agg_path.name[:-len("_aggregate.csv")]
        aggregate = _load_aggregate(agg_path)
        manifest_path = data / f"{name}_manifest.csv"
        manifest = (_read_rows(manifest_path, MANIFEST_HEADER)
                    if manifest_path.exists() else [])
        metric, description = _chart_metric(name)
        if metric == "node_uploads":
            written.append(_bar_chart(name, description, data,
                                      sorted(aggregate), out))
        else:
            written.append(_line_chart(name, metric, description,
                                       aggregate, out))
        summary.extend(_summary_rows(name, aggregate, manifest, data))

    summary_path = out / "summary.csv"
    with summary_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("preset", "arm", "quantity", "value"))
        writer.writerows(summary)
    written.append(summary_path)
    return written
