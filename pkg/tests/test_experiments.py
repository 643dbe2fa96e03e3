"""Presets, scenario files, CSV round-trips, reports, and the CLI."""

import dataclasses

import pytest

from fairswarm import cli, experiments, report
from fairswarm.experiments import (
    AGGREGATE_HEADER, CSV_HEADER, MissingData, UnknownPreset, parse_records,
    parse_scenario, preset, preset_names, run_experiment,
)
from fairswarm.swarm import (
    CHURN_LEAVE_ON_COMPLETE, CHURN_STATIC, STOP_ALL_COMPLETE,
    STOP_FREELOADERS_COMPLETE, InvalidConfig,
)


def _tiny(preset_name, n_nodes=24, n_seeders=3, n_pieces=6, seeds=(1, 2),
          **kw):
    """A preset shrunk far enough for unit-test speed."""
    found = preset(preset_name, scale="desk")
    configs = {arm: dataclasses.replace(cfg, n_nodes=n_nodes,
                                        n_seeders=n_seeders,
                                        n_pieces=n_pieces, **kw)
               for arm, cfg in found.configs.items()}
    return dataclasses.replace(found, configs=configs, seeds=tuple(seeds))


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def test_preset_catalog():
    assert preset_names() == ["fig4", "fig5a", "fig5b", "fig6", "fig7a",
                              "fig7b"]
    with pytest.raises(UnknownPreset):
        preset("fig99")
    with pytest.raises(InvalidConfig):
        preset("fig4", scale="huge")


def test_preset_full_scale_parameters():
    p4 = preset("fig4").configs["proposed"]
    assert (p4.n_nodes, p4.n_seeders, p4.n_pieces) == (1000, 10, 100)
    assert p4.churn == CHURN_STATIC and p4.stop == STOP_ALL_COMPLETE
    p5a = preset("fig5a").configs["proposed"]
    assert p5a.churn == CHURN_LEAVE_ON_COMPLETE
    p6 = preset("fig6").configs["willingness50"]
    assert (p6.n_nodes, p6.n_freeloaders, p6.n_pieces) == (500, 5, 100)
    assert p6.stop == STOP_FREELOADERS_COMPLETE
    assert p6.willingness == 0.5
    p7 = preset("fig7b").configs["tft"]
    assert (p7.n_nodes, p7.n_seeders, p7.n_pieces) == (30, 6, 100)


def test_preset_desk_scale_parameters():
    p4 = preset("fig4", scale="desk").configs["proposed"]
    assert (p4.n_nodes, p4.n_seeders, p4.n_pieces) == (100, 10, 25)
    p6 = preset("fig6", scale="desk").configs["proposed"]
    assert (p6.n_nodes, p6.n_freeloaders, p6.n_pieces) == (100, 2, 25)
    # Small to begin with: desk equals full.
    assert preset("fig5b", scale="desk") == preset("fig5b")
    assert preset("fig7a", scale="desk") == preset("fig7a")


def test_willingness_sweep_arms():
    arms = preset("fig4").configs
    assert sorted(arms) == ["proposed", "willingness100", "willingness25",
                            "willingness50", "willingness75"]
    assert arms["willingness25"].willingness == 0.25
    assert arms["willingness100"].willingness == 1.0


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------

def test_parse_scenario_roundtrip(tmp_path):
    path = tmp_path / "night_run.scenario"
    path.write_text(
        "# comment line\n"
        "n_nodes = 40\n"
        "n_seeders = 4\n"
        "n_pieces = 12\n"
        "strategy = willingness\n"
        "willingness = 0.75\n"
        "churn = leave_on_complete\n"
        "stay_after_complete = true\n"
        "max_rounds = 500\n"
        "seed = 3\n")
    cfg = parse_scenario(path)
    assert cfg.name == "night_run"
    assert cfg.n_nodes == 40 and cfg.willingness == 0.75
    assert cfg.churn == CHURN_LEAVE_ON_COMPLETE
    assert cfg.stay_after_complete is True and cfg.max_rounds == 500


@pytest.mark.parametrize("body", [
    "bogus_key = 1\n",
    "n_nodes 40\n",
    "stay_after_complete = maybe\n",
])
def test_parse_scenario_rejects_malformed(tmp_path, body):
    path = tmp_path / "bad.scenario"
    path.write_text(body)
    with pytest.raises(InvalidConfig):
        parse_scenario(path)


# ---------------------------------------------------------------------------
# run_experiment output contract
# ---------------------------------------------------------------------------

def test_run_experiment_file_set(tmp_path):
    files = run_experiment(_tiny("fig6"), out_dir=tmp_path)
    names = sorted(f.name for f in files)
    assert names == sorted(
        [f"fig6_{arm}_{seed}.csv" for arm in ("proposed", "willingness50")
         for seed in (1, 2)]
        + [f"fig6_{arm}_{seed}_nodes.csv"
           for arm in ("proposed", "willingness50") for seed in (1, 2)]
        + ["fig6_aggregate.csv", "fig6_manifest.csv"])


def test_per_seed_csv_parses_back_losslessly(tmp_path):
    run_experiment(_tiny("fig4", seeds=(5,)), out_dir=tmp_path)
    rows = parse_records(tmp_path / "fig4_proposed_5.csv")
    assert rows and all(arm == "proposed" and seed == 5
                        for arm, seed, _ in rows)
    rounds = [record.round for _, _, record in rows]
    assert rounds == list(range(len(rounds)))

    from fairswarm.swarm import build_network, run_until
    cfg = _tiny("fig4", seeds=(5,)).configs["proposed"]
    state = run_until(build_network(dataclasses.replace(cfg, seed=5)))
    assert [record for _, _, record in rows] == state.records


def test_reruns_are_byte_identical(tmp_path):
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    files_a = run_experiment(_tiny("fig6"), out_dir=a_dir)
    files_b = run_experiment(_tiny("fig6"), out_dir=b_dir)
    for fa, fb in zip(files_a, files_b):
        assert fa.name == fb.name
        assert fa.read_bytes() == fb.read_bytes()


def test_aggregate_matches_recomputation_from_per_seed_files(tmp_path):
    import csv as csvmod
    from statistics import fmean, median
    files = run_experiment(_tiny("fig6"), out_dir=tmp_path)
    per_seed = {}
    for path in files:
        if path.name.endswith("_nodes.csv") or "aggregate" in path.name \
                or "manifest" in path.name:
            continue
        for arm, seed, record in parse_records(path):
            per_seed.setdefault(arm, {}).setdefault(seed, []).append(record)
    with (tmp_path / "fig6_aggregate.csv").open() as fh:
        reader = csvmod.reader(fh)
        assert tuple(next(reader)) == AGGREGATE_HEADER
        for rnd, arm, metric, mean, med, n_seeds in reader:
            values = [getattr(records[int(rnd)], metric)
                      for records in per_seed[arm].values()
                      if int(rnd) < len(records)]
            assert len(values) == int(n_seeds)
            assert float(mean) == fmean(values)
            assert float(med) == median(values)


def test_nonconvergence_is_flagged_not_raised(tmp_path):
    stuck = _tiny("fig4", n_seeders=0, n_nodes=8, n_pieces=4, seeds=(1,))
    stuck = dataclasses.replace(
        stuck, configs={"proposed": dataclasses.replace(
            stuck.configs["proposed"], max_rounds=30)})
    files = run_experiment(stuck, out_dir=tmp_path)
    manifest = (tmp_path / "fig4_manifest.csv").read_text().splitlines()
    assert "fig4,proposed,1,false,30,fig4_proposed_1.csv" in manifest
    assert any(f.name == "fig4_proposed_1.csv" for f in files)


def test_unknown_source_rejected(tmp_path):
    with pytest.raises(UnknownPreset):
        run_experiment("fig99", out_dir=tmp_path)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def test_report_renders_charts_and_summary(tmp_path):
    run_experiment(_tiny("fig6", n_freeloaders=2), out_dir=tmp_path)
    run_experiment(_tiny("fig7a", n_pieces=8), out_dir=tmp_path)
    written = report.render_report(tmp_path)
    names = {f.name for f in written}
    assert names == {"fig6.svg", "fig7a.svg", "summary.csv"}
    summary = (tmp_path / "summary.csv").read_text()
    assert "median_rounds_to_stop" in summary
    assert "freeloader_delay_ratio_vs_willingness50" in summary
    svg = (tmp_path / "fig6.svg").read_text()
    assert svg.lstrip().startswith("<?xml")


def test_report_is_idempotent(tmp_path):
    run_experiment(_tiny("fig4", seeds=(1,)), out_dir=tmp_path)
    report.render_report(tmp_path)
    first = (tmp_path / "fig4.svg").read_bytes()
    report.render_report(tmp_path)
    assert (tmp_path / "fig4.svg").read_bytes() == first


def test_report_missing_data(tmp_path):
    with pytest.raises(MissingData):
        report.render_report(tmp_path)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_cli_run_and_report(tmp_path, capsys):
    scen = tmp_path / "mini.scenario"
    scen.write_text("n_nodes = 16\nn_seeders = 2\nn_pieces = 5\n"
                    "strategy = proposed\nseed = 4\n")
    assert cli.main(["run", str(scen), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "wrote" in out
    assert cli.main(["report", str(tmp_path)]) == 0
    assert (tmp_path / "mini.svg").exists()
    assert (tmp_path / "summary.csv").exists()


def test_cli_list_presets(capsys):
    assert cli.main(["list-presets"]) == 0
    out = capsys.readouterr().out
    for name in preset_names():
        assert name in out


def test_cli_trace_prints_a_transcript(capsys):
    assert cli.main(["trace", "fig7b", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    header, first_line = out.splitlines()[:2]
    assert header.startswith("# session")
    assert first_line.count(",") == 6


def test_cli_error_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "fig99", "--out", str(tmp_path)]) == 1
    assert "neither a preset" in capsys.readouterr().err
    assert cli.main(["report", str(tmp_path / "void")]) == 1
    assert cli.main(["trace", "fig99"]) == 1
