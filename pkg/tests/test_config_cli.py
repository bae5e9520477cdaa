import math
import shutil
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import folmetlab
from folmetlab.cli_reporting import (EXIT_INPUT, EXIT_OK, EXIT_VERDICT, emit_csv, emit_svg, main, read_report_csv,
                                     report_header)
from folmetlab.config import (ConfigError, ExperimentConfig, domain_from_tree, domain_to_tree, field_from_tree,
                              field_to_tree, parse_config, serialize_config)
from folmetlab.convergence_lab import ExperimentReport, example_1_3, pointwise_convergence_experiment
from folmetlab.cplx_geometry import Ball, Difference, Tube, Union, polydisc
from folmetlab.foliation import example_6_1_field, example_6_3_field

CONFIGS = Path(folmetlab.__file__).parent / "configs"
GAP_1_3 = 0.346573590279972655
ETA_W_1_3 = 0.346573590279972655


def copy_config(name, tmp_path):
    dst = tmp_path / name
    shutil.copy(CONFIGS / name, dst)
    return dst


MINIMAL = """
experiment { kind = "pointwise"; name = "t"; seed = 3; }
field { catalog = "radial"; dim = 2; }
sequence { family = "example_1_3"; }
points { coords = [[0.5, 0.0, 0.0, 0.0]]; }
schedule { n = [5, 20]; }
numerics { h = 0.05; tol = 1e-06; }
"""

names = st.from_regex(r"[a-z][a-z0-9_]{0,8}", fullmatch=True)
scalars = st.one_of(st.floats(allow_nan=False), st.integers(-10 ** 12, 10 ** 12), st.booleans(),
                    st.text(st.characters(blacklist_categories=("Cs",)), max_size=12))
values = st.recursive(scalars, lambda c: st.lists(c, max_size=4), max_leaves=8)
trees = st.dictionaries(names, st.dictionaries(names, values, max_size=5), max_size=4)


class TestSyntax:
    @given(trees)
    def test_round_trip(self, tree):
        back = parse_config(serialize_config(tree))
        assert back == tree
        for sec in tree:
            for k, v in tree[sec].items():
                if isinstance(v, float) and not math.isinf(v):
                    assert back[sec][k].hex() == v.hex()

    def test_comments_and_separators(self):
        t = parse_config("a { x = 1, y = [1, 2] # note\n z = { u = \"s\" } }")
        assert t == {"a": {"x": 1, "y": [1, 2], "z": {"u": "s"}}}

    def test_error_position(self):
        with pytest.raises(ConfigError) as e:
            parse_config("a {\n  x = ;\n}")
        assert e.value.line == 2 and e.value.column == 7

    def test_unterminated_section(self):
        with pytest.raises(ConfigError):
            parse_config("a { x = 1;")


class TestValidation:
    def test_minimal_ok(self):
        cfg = ExperimentConfig.from_text(MINIMAL)
        assert cfg.kind == "pointwise" and cfg.seed == 3 and cfg.schedule == [5, 20]
        assert cfg.points().shape == (1, 2)

    @pytest.mark.parametrize("text,needle", [
        (MINIMAL.replace('seed = 3;', 'seed = 3; colour = 1;'), "colour"),
        (MINIMAL + "extras { a = 1; }", "extras"),
        (MINIMAL.replace('field { catalog = "radial"; dim = 2; }', ""), "field"),
        (MINIMAL.replace('"pointwise"', '"banana"'), "banana"),
        (MINIMAL.replace("h = 0.05", "h = -1"), "h"),
        (MINIMAL.replace("n = [5, 20]", "n = []"), "schedule"),
    ])
    def test_rejected(self, text, needle):
        with pytest.raises(ConfigError, match=needle):
            ExperimentConfig.from_text(text)

    def test_text_round_trip(self):
        cfg = ExperimentConfig.from_text(MINIMAL)
        assert ExperimentConfig.from_text(cfg.to_text()).tree == cfg.tree


class TestTrees:
    @pytest.mark.parametrize("D", [
        polydisc((1.0, 2.0)),
        Union((polydisc((1.0, 1.0)), Tube((-3.0, -3.0), (3.0, 3.0), 0.25))),
        Difference(Ball((0j, 0j), 2.0), polydisc((0.5, 0.5), center=(0.1, 0.2j))),
    ])
    def test_domain_round_trip(self, D):
        D2 = domain_from_tree(parse_config(serialize_config({"d": domain_to_tree(D)}))["d"])
        P = np.random.default_rng(0).normal(size=(50, 2)) + 1j * np.random.default_rng(1).normal(size=(50, 2))
        assert np.array_equal(D.sdf(P), D2.sdf(P))

    @pytest.mark.parametrize("X", [example_6_1_field(), example_6_3_field()])
    def test_field_round_trip(self, X):
        Y = field_from_tree(parse_config(serialize_config({"f": field_to_tree(X)}))["f"])
        P = np.array([[0.3 + 0.1j, -0.2j, 0.7][:X.dim]])
        assert np.array_equal(X(P), Y(P))

    def test_unknown_catalog_field(self):
        with pytest.raises(ConfigError):
            field_from_tree({"catalog": "nope"})


class TestCli:
    def test_example_1_3_run(self, tmp_path):
        cfg = copy_config("example_1_3.cfg", tmp_path)
        assert main(["run", str(cfg)]) == EXIT_OK
        rows = read_report_csv(tmp_path / "out" / "example_1_3.csv")
        axis = [r for r in rows if float(r["re_1"]) == 0.5 and float(r["re_2"]) == 0 and float(r["im_2"]) == 0]
        assert axis and all(abs(float(r["eta_W"]) - ETA_W_1_3) < 1e-12 for r in axis)
        big = [r for r in axis if int(r["n"]) >= 2]
        assert all(abs(float(r["gap"]) - GAP_1_3) < 1e-9 for r in big)
        assert all(r["in_S"] == "true" for r in axis)
        svg = (tmp_path / "out" / "example_1_3.eta.svg").read_text()
        assert "<svg" in svg and "<script" not in svg
        summary = parse_config((tmp_path / "out" / "example_1_3.summary.cfg").read_text())
        assert summary["summary"]["verdicts"] == {"pointwise_ok": True, "liminf_ok": True}

    def test_run_is_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir()
        b.mkdir()
        for d in (a, b):
            assert main(["run", str(copy_config("example_1_3.cfg", d))]) == EXIT_OK
        assert (a / "out" / "example_1_3.csv").read_bytes() == (b / "out" / "example_1_3.csv").read_bytes()
        assert (a / "out" / "example_1_3.eta.svg").read_bytes() == (b / "out" / "example_1_3.eta.svg").read_bytes()

    def test_missing_section_exit_1(self, tmp_path, capsys):
        p = tmp_path / "bad.cfg"
        p.write_text(MINIMAL.replace('sequence { family = "example_1_3"; }', ""))
        assert main(["run", str(p)]) == EXIT_INPUT
        assert "sequence" in capsys.readouterr().err

    def test_unreadable_exit_1(self, tmp_path):
        assert main(["run", str(tmp_path / "none.cfg")]) == EXIT_INPUT

    def test_failing_verdict_exit_2(self, tmp_path):
        # an exhaustion checked at n = 5 has not converged at tolerance 1e-6
        p = tmp_path / "gap.cfg"
        p.write_text(MINIMAL.replace('"example_1_3"', '"exhaustion"').replace("n = [5, 20]", "n = [2, 5]"))
        assert main(["run", str(p)]) == EXIT_VERDICT

    def test_compact_meeting_S_exit_1(self, tmp_path, capsys):
        p = tmp_path / "k.cfg"
        p.write_text(MINIMAL.replace('"pointwise"', '"uniform"') + "compact { count = 20; radius = 0.5; }")
        assert main(["run", str(p)]) == EXIT_INPUT
        assert "defective set" in capsys.readouterr().err

    def test_eta_command(self, tmp_path):
        p = tmp_path / "eta.cfg"
        p.write_text(MINIMAL)
        assert main(["eta", str(p)]) == EXIT_OK
        rows = read_report_csv(tmp_path / "out" / "t.csv")
        assert len(rows) == 2
        assert abs(float(rows[0]["gap"]) - GAP_1_3) < 1e-9

    def test_kernel_command(self, tmp_path):
        p = tmp_path / "k.cfg"
        p.write_text(MINIMAL.replace("schedule { n = [5, 20]; }", "schedule { n = [5]; n_max = 40; }"))
        assert main(["kernel", str(p)]) == EXIT_OK

    def test_report_command(self, tmp_path):
        cfg = copy_config("example_1_3.cfg", tmp_path)
        assert main(["run", str(cfg)]) == EXIT_OK
        out = tmp_path / "plot.svg"
        assert main(["report", str(tmp_path / "out" / "example_1_3.csv"), "--plot", "eta_vs_n",
                     "--out", str(out)]) == EXIT_OK
        assert "<script" not in out.read_text()


class TestEmitters:
    def test_empty_report(self, tmp_path):
        rep = ExperimentReport({}, [], {}, {"tol": 1e-3, "mc_tol": 0.05, "h": 0.05}, 0.0, {"dim": 2})
        path = emit_csv(rep, tmp_path / "e.csv")
        assert path.read_text().splitlines() == [",".join(report_header(2))]
        with pytest.raises(folmetlab.errors.InputError):
            emit_svg(read_report_csv(path), "eta_vs_n", tmp_path / "e.svg")

    def test_three_rows_four_lines(self, tmp_path):
        rep = pointwise_convergence_experiment(example_1_3(), [(0.5, 0)], [5, 10, 20], h=0.1)
        lines = emit_csv(rep, tmp_path / "r.csv").read_text().splitlines()
        assert len(lines) == 4
        assert lines[0].startswith("re_1,im_1,re_2,im_2,n,eta_n,eta_W,gap,in_S,in_E,verdictflags")

    def test_unknown_plot_kind(self, tmp_path):
        with pytest.raises(folmetlab.errors.InputError):
            emit_svg([{"a": 1}], "pie", tmp_path / "x.svg")

    def test_f_scatter_example_6_1(self, tmp_path):
        p = tmp_path / "f.cfg"
        p.write_text("""
experiment { kind = "defective"; name = "f61"; }
field { catalog = "ex6_1"; }
sequence { family = "example_6_1"; }
numerics { h = 0.1; defective = "declared"; }
output { svg = "out/f61.svg"; }
""")
        assert main(["run", str(p)]) == EXIT_OK
        svg = (tmp_path / "out" / "f61.svg").read_text()
        assert "<svg" in svg and "<script" not in svg
        assert "z_2" in svg
