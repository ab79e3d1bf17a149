import csv
import json
import sys
from pathlib import Path

import pytest

from prrx import cli

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
from prrx.pipeline import ConfigError, derive_seed, load_config, parse_config, sweep_points

TINY = """
name = "tiny"
output_dir = "tiny"
seed = 3

[tx]
n_symbols = 2048
pilot_fraction = 0.1
n_polarizations = 1

[link]
osnr_db = 25.0

[gs]
max_iterations = 60
block_length = 256
max_attempts = 1

[eq]
n_outer_iterations = 1
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_configs_lists_bundled(capsys):
    code, out, _ = run(["configs"], capsys)
    assert code == 0
    for name in ("fig2b", "fig2b-nopilot", "fig3e-sim", "link520"):
        assert name in out


@pytest.mark.parametrize("name", ["fig2b", "fig2b-nopilot", "fig3e-sim", "link520"])
def test_bundled_configs_validate(name, capsys):
    code, out, err = run(["validate", name], capsys)
    assert code == 0, err
    resolved = json.loads(out)
    assert resolved["name"] == name and err.startswith("ok\t")


def test_validate_resolves_defaults(tiny, capsys):
    code, out, _ = run(["validate", tiny], capsys)
    cfg = json.loads(out)
    assert cfg["gs"]["epsilon"] == pytest.approx(1e-3)
    assert cfg["tx"]["seed"] == derive_seed(3, 1)


@pytest.mark.parametrize("section, key, value, path", [
    ("gs", "block_length", 300, "gs.block_length"),
    ("tx", "rolloff", "wide", "tx.rolloff"),
    ("frontend", "element_dispersion", 0.0, "frontend.element_dispersion"),
    ("eq", "n_tapz", 3, "eq.n_tapz"),
    ("link", "osnr_db", "loud", "link.osnr_db"),
    ("gs", "spectral_support", "round", "gs.spectral_support"),
])
def test_config_errors_name_the_field(section, key, value, path):
    data = tomllib.loads(TINY)
    data.setdefault(section, {})[key] = value
    with pytest.raises(ConfigError) as info:
        parse_config(data)
    assert path in str(info.value)


def test_empty_sweep_list_rejected():
    data = tomllib.loads(TINY)
    data["sweep"] = {"link.osnr_db": []}
    with pytest.raises(ConfigError, match="sweep.link.osnr_db"):
        parse_config(data)


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(TINY.replace("block_length = 256", "block_length = 300"))
    code, _, err = run(["validate", bad], capsys)
    assert code == cli.EXIT_CONFIG and "gs.block_length" in err
    code, _, err = run(["run", bad, "--output-root", tmp_path], capsys)
    assert code == cli.EXIT_CONFIG


def test_missing_config(capsys):
    code, _, err = run(["validate", "no-such-config"], capsys)
    assert code == cli.EXIT_CONFIG and "no such" in err


def test_sweep_grid_expansion(tmp_path):
    path = tmp_path / "s.toml"
    path.write_text(TINY + '\n[sweep]\n"link.osnr_db" = [15.0, 20.0]\n"tx.pilot_fraction" = [0.1, 0.2]\n')
    points = sweep_points(load_config(path))
    assert len(points) == 4
    seeds = {p.tx.seed for _, p in points}
    assert len(seeds) == 4
    assert {(v["link.osnr_db"], v["tx.pilot_fraction"]) for v, _ in points} == \
        {(15.0, 0.1), (15.0, 0.2), (20.0, 0.1), (20.0, 0.2)}


def test_parse_rejects_single_pol_jones():
    with pytest.raises(ConfigError, match="link.jones_seed"):
        parse_config({"tx": {"n_polarizations": 1}, "link": {"jones_seed": 3}})


def test_run_is_deterministic(tiny, tmp_path, capsys):
    code, out, err = run(["run", tiny, "--output-root", tmp_path / "a"], capsys)
    assert code == 0, err
    assert "blocks_converged\t" in out
    code, _, _ = run(["run", tiny, "--output-root", tmp_path / "b"], capsys)
    assert code == 0
    a, b = tmp_path / "a" / "tiny", tmp_path / "b" / "tiny"
    for name in ("manifest.json", "convergence.csv", "constellation.csv", "channel.json",
                 "phase_error.csv", "outer_loop.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    man = json.loads((a / "manifest.json").read_text())
    assert man["status"] == "ok" and man["seed"] == 3
    assert len(man["config_sha256"]) == 64
    assert set(man["versions"]) >= {"prrx", "numpy", "scipy"}


def test_output_root_from_environment(tiny, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "env"))
    code, _, _ = run(["run", tiny], capsys)
    assert code == 0
    assert (tmp_path / "env" / "tiny" / "manifest.json").exists()


def test_rerun_from_waveform_dump(tiny, tmp_path, capsys):
    text = tiny.read_text() + "\n[run]\nsave_waveforms = true\n"
    tiny.write_text(text)
    assert run(["run", tiny, "--output-root", tmp_path / "first"], capsys)[0] == 0
    dump = tmp_path / "first" / "tiny" / "waveforms"
    assert (dump / "intensity").exists() and (dump / "truth.json").exists()
    code, _, err = run(["run", tiny, "--output-root", tmp_path / "again", "--from-waveforms", dump], capsys)
    assert code == 0, err
    m1 = json.loads((tmp_path / "first" / "tiny" / "manifest.json").read_text())["metrics"]
    m2 = json.loads((tmp_path / "again" / "tiny" / "manifest.json").read_text())["metrics"]
    assert m1 == m2


def test_incomplete_dump_is_a_config_error(tiny, tmp_path, capsys):
    code, _, err = run(["run", tiny, "--from-waveforms", tmp_path], capsys)
    assert code == cli.EXIT_CONFIG and "dump" in err


def test_sweep_two_by_two(tiny, tmp_path, capsys):
    path = tmp_path / "sw.toml"
    path.write_text(TINY + '\n[sweep]\n"link.osnr_db" = [18.0, 25.0]\n"tx.pilot_fraction" = [0.1, 0.2]\n')
    code, out, err = run(["sweep", path, "--output-root", tmp_path], capsys)
    assert code == 0, err
    root = tmp_path / "tiny"
    with (root / "summary.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert len(list(root.glob("point_*/manifest.json"))) == 4
    assert (root / "ber_vs_osnr.csv").exists()
    code, out, _ = run(["report", root], capsys)
    assert code == 0
    figs = [Path(line.split("\t")[1]) for line in out.splitlines() if line.startswith("figure\t")]
    assert figs and all(f.exists() and f.stat().st_size > 0 for f in figs)


def test_one_point_sweep_equals_run(tiny, tmp_path, capsys):
    path = tmp_path / "one.toml"
    path.write_text(TINY + '\n[sweep]\n"link.osnr_db" = [25.0]\n')
    assert run(["sweep", path, "--output-root", tmp_path / "s"], capsys)[0] == 0
    assert run(["run", tiny, "--output-root", tmp_path / "r"], capsys)[0] == 0
    m_sweep = json.loads((tmp_path / "s" / "tiny" / "point_000" / "manifest.json").read_text())
    m_run = json.loads((tmp_path / "r" / "tiny" / "manifest.json").read_text())
    assert m_sweep["metrics"] == m_run["metrics"]


def test_report_for_a_run(tiny, tmp_path, capsys):
    assert run(["run", tiny, "--output-root", tmp_path], capsys)[0] == 0
    code, out, _ = run(["report", tmp_path / "tiny"], capsys)
    assert code == 0
    names = {Path(line.split("\t")[1]).name for line in out.splitlines() if line.startswith("figure\t")}
    assert {"convergence.png", "constellation.png", "phase_error.png", "channel_response.png"} <= names
    assert (tmp_path / "tiny" / "report.csv").exists()
    assert "metrics.ber\t" in out


def test_report_on_empty_directory(tmp_path, capsys):
    code, _, err = run(["report", tmp_path], capsys)
    assert code == cli.EXIT_CONFIG


def test_failed_stage_is_recorded(tmp_path, capsys):
    # 64 symbols are 128 ADC samples, shorter than one retrieval block
    path = tmp_path / "f.toml"
    path.write_text(TINY.replace("n_symbols = 2048", "n_symbols = 64"))
    code, _, err = run(["run", path, "--output-root", tmp_path], capsys)
    man = json.loads((tmp_path / "tiny" / "manifest.json").read_text())
    assert code == cli.EXIT_RUNTIME
    assert man["status"] == "failed" and man["failed_stage"] == "process"
    assert "shorter than one block" in man["error"] and "process" in err
