import csv
import hashlib
import json
import os

import pytest

from mfmpc_plots.figures import FIGURE_KINDS, FigureSpec, render
from mfmpc_plots.io import SchemaError, read_summary, read_table, read_trace

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def fx(name):
    return os.path.join(FIXTURES, name)


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


# ---------------------------------------------------------------------------
# readers
# ---------------------------------------------------------------------------

def test_read_trace_fixture():
    trace = read_trace(fx("two_gap_trace.csv"))
    assert trace.t.size == 120
    assert trace.position.shape == (120, 3)
    assert trace.obstacles.shape[1] == 3
    assert trace.restart.sum() >= 1


def test_read_summary_fixture():
    s = read_summary(fx("two_gap_summary.json"))
    assert s["schema_version"] == 1
    assert len(s["obstacles"]) == 3
    assert all("dims" in o and "alpha0" in o for o in s["obstacles"])


def test_read_summary_rejects_wrong_version(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(SchemaError, match="schema_version"):
        read_summary(p)


def test_read_trace_rejects_missing_columns(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("step,t\n0,0.0\n")
    with pytest.raises(SchemaError, match="missing column"):
        read_trace(p)


def test_read_table():
    rows = read_table(fx("pareto.csv"))
    assert {"name", "cost_norm", "time_norm"} <= set(rows[0])


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def spec_for(kind, tmp_path, suffix="png"):
    inputs = {
        "trajectory": {"trace": fx("two_gap_trace.csv"),
                       "summary": fx("two_gap_summary.json")},
        "restart_cost": {"trace": fx("two_gap_trace.csv")},
        "pareto": {"pareto": fx("pareto.csv")},
        "constraint_panels": {"trace": fx("two_gap_trace.csv")},
        "step_response": {"step": fx("step_response.csv")},
    }[kind]
    return FigureSpec(kind=kind, inputs=inputs,
                      output=str(tmp_path / f"{kind}.{suffix}"))


@pytest.mark.parametrize("kind", FIGURE_KINDS)
def test_every_kind_renders(kind, tmp_path):
    out = render(spec_for(kind, tmp_path))
    assert os.path.exists(out)
    assert os.path.getsize(out) > 1000


def test_restart_stairs_pixel_identical(tmp_path):
    a = render(FigureSpec(kind="restart_cost",
                          inputs={"trace": fx("two_gap_trace.csv")},
                          output=str(tmp_path / "a.png")))
    b = render(FigureSpec(kind="restart_cost",
                          inputs={"trace": fx("two_gap_trace.csv")},
                          output=str(tmp_path / "b.png")))
    assert sha(a) == sha(b)


def test_pareto_pixel_identical(tmp_path):
    a = render(FigureSpec(kind="pareto", inputs={"pareto": fx("pareto.csv")},
                          output=str(tmp_path / "a.png")))
    b = render(FigureSpec(kind="pareto", inputs={"pareto": fx("pareto.csv")},
                          output=str(tmp_path / "b.png")))
    assert sha(a) == sha(b)


def test_empty_trace_renders_empty_axes(tmp_path):
    header = open(fx("two_gap_trace.csv")).readline()
    p = tmp_path / "empty.csv"
    p.write_text(header)
    out = render(FigureSpec(kind="trajectory", inputs={"trace": str(p)},
                            output=str(tmp_path / "empty.png")))
    assert os.path.exists(out)


def test_unknown_kind_rejected(tmp_path):
    with pytest.raises(ValueError, match="unknown figure kind"):
        FigureSpec(kind="pie", inputs={}, output=str(tmp_path / "x.png"))


def test_svg_output(tmp_path):
    out = render(spec_for("pareto", tmp_path, suffix="svg"))
    assert out.endswith(".svg") and os.path.getsize(out) > 500


# ---------------------------------------------------------------------------
# cli
# ---------------------------------------------------------------------------

def test_cli_renders_spec_list(tmp_path):
    import yaml

    from mfmpc_plots.cli import main
    spec_path = tmp_path / "figs.yaml"
    spec_path.write_text(yaml.safe_dump([
        {"kind": "restart_cost",
         "inputs": {"trace": fx("two_gap_trace.csv")},
         "output": str(tmp_path / "out" / "stairs.png")},
        {"kind": "pareto",
         "inputs": {"pareto": fx("pareto.csv")},
         "output": str(tmp_path / "out" / "pareto.png")},
    ]))
    assert main([str(spec_path)]) == 0
    assert (tmp_path / "out" / "stairs.png").exists()
    assert (tmp_path / "out" / "pareto.png").exists()


def test_cli_rejects_bad_spec(tmp_path):
    import yaml

    from mfmpc_plots.cli import main
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"kind": "restart_cost"}))
    assert main([str(bad)]) == 1
