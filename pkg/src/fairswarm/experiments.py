"""Scenario presets, scenario files, and the CSV experiment driver.

Each preset bundles the network layout for one headline comparison with the
strategy arms it is compared across.  ``run_experiment`` executes every
arm x seed cell, writes one metrics CSV per cell plus a per-node sidecar,
and finishes with an across-seed aggregate and a run manifest.  All output
is deterministic: rerunning a preset with the same seeds reproduces every
file byte for byte.

Floats are serialized with ``repr`` so parsing a file back yields exactly
the streamed values.
"""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .metrics import MetricRecord
from .swarm import (
    CHURN_LEAVE_ON_COMPLETE, CHURN_STATIC, STOP_ALL_COMPLETE,
    STOP_FREELOADERS_COMPLETE, STRATEGY_PROPOSED, STRATEGY_TFT,
    STRATEGY_WILLINGNESS, InvalidConfig, NonConvergence, ScenarioConfig,
    build_network, run_until,
)

DEFAULT_SEEDS = tuple(range(1, 11))

CSV_HEADER = ("round", "arm", "seed", "avg_pieces", "seeder_upload_mean",
              "seeder_upload_per_interval", "upload_variance", "completions")
NODES_HEADER = ("node", "arm", "seed", "role", "uploads", "downloads",
                "completed_round")
AGGREGATE_HEADER = ("round", "arm", "metric", "mean", "median", "n_seeds")
MANIFEST_HEADER = ("preset", "arm", "seed", "converged", "rounds", "file")

METRIC_COLUMNS = ("avg_pieces", "seeder_upload_mean",
                  "seeder_upload_per_interval", "upload_variance",
                  "completions")


class ExperimentError(Exception):
    """Base class for experiment-driver failures."""


class UnknownPreset(ExperimentError):
    """No preset under the requested name."""


class MissingData(ExperimentError):
    """Report requested where no experiment output exists."""


@dataclass(frozen=True)
class ScenarioPreset:
    """One figure-style comparison: a config per arm plus default seeds."""

    name: str
    description: str
    chart: str                   # metric column a report should plot
    configs: dict                # arm name -> ScenarioConfig
    seeds: tuple = DEFAULT_SEEDS


def _willingness_arms(base: ScenarioConfig) -> dict:
    arms = {"proposed": replace(base, strategy=STRATEGY_PROPOSED)}
    for level in (25, 50, 75, 100):
        arms[f"willingness{level}"] = replace(
            base, strategy=STRATEGY_WILLINGNESS, willingness=level / 100)
    return arms


def _duel_arms(base: ScenarioConfig, arm: str, strategy: str, **kw) -> dict:
    return {"proposed": replace(base, strategy=STRATEGY_PROPOSED),
            arm: replace(base, strategy=strategy, **kw)}


def _presets(scale: str) -> dict:
    desk = scale == "desk"

    fig4 = ScenarioConfig(
        name="fig4", n_seeders=10, churn=CHURN_STATIC, stop=STOP_ALL_COMPLETE,
        n_nodes=100 if desk else 1000, n_pieces=25 if desk else 100)
    fig5a = replace(fig4, name="fig5a", churn=CHURN_LEAVE_ON_COMPLETE)
    # Already desk-sized: the original run is 100 nodes.
    fig5b = ScenarioConfig(name="fig5b", n_nodes=100, n_seeders=10,
                           n_pieces=100, churn=CHURN_STATIC,
                           stop=STOP_ALL_COMPLETE)
    fig6 = ScenarioConfig(
        name="fig6", n_seeders=10, churn=CHURN_STATIC,
        stop=STOP_FREELOADERS_COMPLETE,
        n_nodes=100 if desk else 500,
        n_freeloaders=2 if desk else 5,
        n_pieces=25 if desk else 100)
    fig7 = ScenarioConfig(name="fig7", n_nodes=30, n_seeders=6, n_pieces=100,
                          churn=CHURN_LEAVE_ON_COMPLETE,
                          stop=STOP_ALL_COMPLETE)

    return {
        "fig4": ScenarioPreset(
            "fig4", "static swarm: average pieces per node over time",
            "avg_pieces", _willingness_arms(fig4)),
        "fig5a": ScenarioPreset(
            "fig5a", "departing swarm: per-interval seeder upload load",
            "seeder_upload_per_interval", _willingness_arms(fig5a)),
        "fig5b": ScenarioPreset(
            "fig5b", "static swarm: spread of upload burden across nodes",
            "upload_variance", _willingness_arms(fig5b)),
        "fig6": ScenarioPreset(
            "fig6", "freeloaders present: how late refusers finish",
            "completions", _duel_arms(fig6, "willingness50",
                                      STRATEGY_WILLINGNESS, willingness=0.5)),
        "fig7a": ScenarioPreset(
            "fig7a", "small swarm vs tit-for-tat: per-leecher upload counts",
            "node_uploads", _duel_arms(fig7, "tft", STRATEGY_TFT)),
        "fig7b": ScenarioPreset(
            "fig7b", "small swarm vs tit-for-tat: seeder upload load",
            "seeder_upload_mean", _duel_arms(fig7, "tft", STRATEGY_TFT)),
    }


def preset_names() -> list:
    return sorted(_presets("full"))


def preset(name: str, scale: str = "full") -> ScenarioPreset:
    """Look up a named comparison at ``desk`` or ``full`` scale."""
    if scale not in ("desk", "full"):
        raise InvalidConfig(f"unknown scale {scale!r}")
    table = _presets(scale)
    if name not in table:
        raise UnknownPreset(
            f"unknown preset {name!r}; expected one of {', '.join(sorted(table))}")
    return table[name]


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------

_INT_KEYS = {"n_nodes", "n_seeders", "n_freeloaders", "n_pieces", "degree",
             "capacity", "piece_size", "unchoke_period", "tft_slots",
             "tft_rotation", "pair_wait", "seed"}
_FLOAT_KEYS = {"willingness", "explore"}
_BOOL_KEYS = {"stay_after_complete", "keep_transcripts"}
_OPT_INT_KEYS = {"max_rounds"}
_STR_KEYS = {"name", "strategy", "target_rule", "churn", "stop"}


def _coerce(key: str, raw: str):
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key in _BOOL_KEYS:
        lowered = raw.lower()
        if lowered in ("true", "yes", "1"):
            return True
        if lowered in ("false", "no", "0"):
            return False
        raise InvalidConfig(f"{key}: expected a boolean, got {raw!r}")
    if key in _OPT_INT_KEYS:
        return None if raw.lower() in ("none", "") else int(raw)
    if key in _STR_KEYS:
        return raw
    raise InvalidConfig(f"unknown scenario key {key!r}")


def parse_scenario(path) -> ScenarioConfig:
    """Flat ``key = value`` text file mapping 1:1 onto ScenarioConfig."""
    path = Path(path)
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{path.name}:{lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = _coerce(key, raw)
    values.setdefault("name", path.stem)
    return ScenarioConfig(**values)


# ---------------------------------------------------------------------------
# Running and serializing
# ---------------------------------------------------------------------------

def _float_cell(value: float) -> str:
    return repr(float(value))


def _record_row(record: MetricRecord, arm: str, seed: int) -> list:
    return [str(record.round), arm, str(seed),
            _float_cell(record.avg_pieces),
            _float_cell(record.seeder_upload_mean),
            _float_cell(record.seeder_upload_per_interval),
            _float_cell(record.upload_variance),
            str(record.completions)]


def _write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def parse_records(path) -> list:
    """Read a per-cell metrics CSV back into (arm, seed, MetricRecord) rows."""
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise MissingData(f"{path}: unexpected header {header}")
        for row in reader:
            record = MetricRecord(
                round=int(row[0]), avg_pieces=float(row[3]),
                seeder_upload_mean=float(row[4]),
                seeder_upload_per_interval=float(row[5]),
                upload_variance=float(row[6]), completions=int(row[7]))
            out.append((row[1], int(row[2]), record))
    return out


def _run_cell(config: ScenarioConfig, seed: int):
    state = build_network(replace(config, seed=seed))
    try:
        run_until(state)
        return state, True
    except NonConvergence as err:
        return err.state, False


def _aggregate_rows(per_seed: dict) -> list:
    """Across-seed mean and median for every (arm, metric, round)."""
    rows = []
    for arm in sorted(per_seed):
        runs = per_seed[arm]
        longest = max(len(records) for records in runs.values())
        for metric in METRIC_COLUMNS:
            for rnd in range(longest):
                values = [getattr(records[rnd], metric)
                          for records in runs.values() if rnd < len(records)]
                rows.append([str(rnd), arm, metric,
                             _float_cell(statistics.fmean(values)),
                             _float_cell(statistics.median(values)),
                             str(len(values))])
    return rows


def run_experiment(source, seeds=None, out_dir=".", scale="full") -> list:
    """Run every arm x seed cell of a preset or scenario file.

    Returns the written file paths: one metrics CSV and one per-node sidecar
    per cell, then the aggregate and the manifest.  A cell that hits the
    round cap is flagged in the manifest instead of raising.
    """
    if isinstance(source, ScenarioPreset):
        chosen = source
    elif source in _presets("full"):
        chosen = preset(source, scale=scale)
    else:
        if not Path(source).is_file():
            raise UnknownPreset(
                f"{source!r} is neither a preset "
                f"({', '.join(preset_names())}) nor a scenario file")
        config = parse_scenario(source)
        chosen = ScenarioPreset(
            name=config.name, description=f"scenario file {source}",
            chart="avg_pieces", configs={config.strategy: config},
            seeds=(config.seed,))
    seeds = tuple(seeds) if seeds else chosen.seeds

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    manifest_rows = []
    per_seed = {arm: {} for arm in chosen.configs}
    for arm in sorted(chosen.configs):
        config = chosen.configs[arm]
        for seed in seeds:
            state, converged = _run_cell(config, seed)
            per_seed[arm][seed] = state.records
            name = f"{chosen.name}_{arm}_{seed}.csv"
            written.append(_write_csv(
                out / name, CSV_HEADER,
                [_record_row(r, arm, seed) for r in state.records]))
            node_rows = [[str(p.node_id), arm, str(seed), p.role,
                          str(p.uploads), str(p.downloads),
                          "" if p.completed_round is None
                          else str(p.completed_round)]
                         for p in sorted(state.peers.values(),
                                         key=lambda q: q.node_id)]
            written.append(_write_csv(
                out / f"{chosen.name}_{arm}_{seed}_nodes.csv",
                NODES_HEADER, node_rows))
            manifest_rows.append([chosen.name, arm, str(seed),
                                  str(converged).lower(),
                                  str(state.round_no), name])

    written.append(_write_csv(out / f"{chosen.name}_aggregate.csv",
                              AGGREGATE_HEADER, _aggregate_rows(per_seed)))
    written.append(_write_csv(out / f"{chosen.name}_manifest.csv",
                              MANIFEST_HEADER, manifest_rows))
    return written
