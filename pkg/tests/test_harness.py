import logging
import xml.etree.ElementTree as ET

import pytest

from collapse_lab import harness
from collapse_lab.errors import ContractError, NumericalFailure
from collapse_lab.model import ModelConfig

CFG = ModelConfig(d=16)


def spec(tmp_path=None, **kw):
    base = dict(experiment="collapse", cfg=CFG, lengths=(8, 16, 32), seeds=(0, 1), pes=("nope",), precisions=("f64",))
    base.update(kw)
    if tmp_path is not None:
        base["out"] = str(tmp_path / "out.csv")
    return harness.ExperimentSpec(**base)


class TestRun:
    def test_cartesian_count(self):
        rows = harness.run(spec())
        assert len([r for r in rows if r.metric == "l1"]) == 6
        assert len([r for r in rows if r.metric == "linf"]) == 6

    def test_sorted(self):
        rows = harness.run(spec(pes=("rope", "nope"), precisions=("bf16", "f64")))
        assert rows == sorted(rows, key=harness.ResultRow.key)

    def test_byte_identical_across_runs_and_threads(self, tmp_path):
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        harness.run(spec(pes=("nope", "alibi"), out=str(a)), threads=1)
        harness.run(spec(pes=("nope", "alibi"), out=str(b)), threads=3)
        assert a.read_bytes() == b.read_bytes()

    def test_tv_experiment(self):
        rows = harness.run(spec(experiment="tv", lengths=(300, 600), params=(("k", 100),)))
        assert {r.metric for r in rows} == {"tv"} and len(rows) == 4

    @pytest.mark.parametrize(
        "kw", [dict(lengths=()), dict(seeds=()), dict(pes=("bogus",)), dict(precisions=("fp8",)),
               dict(experiment="nope"), dict(lengths=(0,)), dict(out="/nonexistent/dir/x.csv")]
    )
    def test_validation_before_work(self, kw):
        with pytest.raises(ContractError):
            spec(**kw)

    def test_cell_failure_names_cell(self, monkeypatch):
        def boom(*a):
            raise NumericalFailure("overflow")

        monkeypatch.setitem(harness.CELLS, "collapse", boom)
        with pytest.raises(harness.CellFailure, match="nope"):
            harness.run(spec())


class TestRows:
    def test_nonfinite_rejected(self):
        with pytest.raises(NumericalFailure):
            harness.ResultRow("collapse", "ones", "nope", "f64", 4, 0, "l1", float("nan"))

    def test_unknown_metric(self):
        with pytest.raises(ContractError):
            harness.ResultRow("collapse", "ones", "nope", "f64", 4, 0, "accuracy", 1.0)

    def test_repr_floats_round_trip(self, tmp_path):
        v = 0.1 + 0.2
        path = harness.write_csv([harness.ResultRow("collapse", "ones", "nope", "f64", 4, 0, "l1", v)], tmp_path / "x.csv")
        assert float(harness.read_rows(path)[0]["value"]) == v

    def test_format_value_refuses_inf(self):
        with pytest.raises(NumericalFailure):
            harness.format_value(float("inf"))


class TestSvg:
    def _csv(self, tmp_path, rows):
        return harness.write_csv(rows, tmp_path / "c.csv")

    def test_grouping(self, tmp_path):
        rows = [
            harness.ResultRow("collapse", p, pe, "f64", n, s, "l1", 1.0 / n + s)
            for p in ("ones", "digits") for pe in ("nope", "rope") for n in (4, 8, 16) for s in (0, 1)
        ]
        svg = harness.emit_svg(self._csv(tmp_path, rows), tmp_path / "p.svg")
        root = ET.parse(svg).getroot()
        ns = "{http://www.w3.org/2000/svg}"
        assert len(root.findall(f"{ns}polyline")) == 4
        assert len(root.findall(f"{ns}polygon")) == 4

    def test_single_point(self, tmp_path):
        rows = [harness.ResultRow("collapse", "ones", "nope", "f64", 4, 0, "l1", 0.5)]
        svg = harness.emit_svg(self._csv(tmp_path, rows), tmp_path / "p.svg")
        root = ET.parse(svg).getroot()
        assert len(root.findall("{http://www.w3.org/2000/svg}circle")) == 1

    def test_log_floor_warns(self, tmp_path, caplog):
        rows = [harness.ResultRow("collapse", "ones", "nope", "f64", n, 0, "l1", v) for n, v in ((4, 1.0), (8, 0.0))]
        with caplog.at_level(logging.WARNING):
            harness.emit_svg(self._csv(tmp_path, rows), tmp_path / "p.svg", harness.PlotSpec(log_y=True))
        assert "clamped" in caplog.text
        ET.parse(tmp_path / "p.svg")

    def test_malformed_csv(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("n,value\nfour,1.0\n")
        with pytest.raises(ContractError):
            harness.emit_svg(bad, tmp_path / "p.svg")
        bad.write_text("a,b\n1,2\n")
        with pytest.raises(ContractError):
            harness.emit_svg(bad, tmp_path / "p.svg")


class TestRegistryAndConfig:
    def test_families(self):
        assert set(harness.families()) >= {"collapse", "tv", "alt-tv", "squash", "limit-case", "counting", "selftest"}

    def test_anchors_nonempty(self):
        assert all(anchor.strip() for _, anchor in harness.preset_registry())

    def test_unknown_preset(self):
        with pytest.raises(ContractError, match="valid presets"):
            harness.lookup("collapse banana")
        assert harness.lookup("tv")

    def test_config_parsing(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("# comment\nseed = 3\nmax-n=8  # trailing\n\n")
        assert harness.load_config(p) == {"seed": "3", "max_n": "8"}
        p.write_text("novalue\n")
        with pytest.raises(ContractError):
            harness.load_config(p)

    def test_thread_env(self, monkeypatch):
        monkeypatch.setenv(harness.ENV_THREADS, "4")
        assert harness.default_threads() == 4
        monkeypatch.setenv(harness.ENV_THREADS, "zero")
        with pytest.raises(ContractError):
            harness.default_threads()
