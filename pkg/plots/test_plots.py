import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))
from plot import PlotSpec, SchemaError, main, read_columns, render

DATA = Path(__file__).resolve().parent / "data"

HOPLOG_HEADER = ("k,z1,z2,z3,z4,eta1,eta2,eta3,eta4,psi1,psi2,"
                 "e1,e2,e3,e4,v1,v2,cost,flight_time")


def synthetic_hoplog(path, n=12):
    rows = [HOPLOG_HEADER]
    for k in range(n):
        decay = 0.8 ** k
        vals = [k] + [0.5 * decay] * 4 + [0.1 * decay] * 4 + [0.05 * decay] * 2 \
            + [0.02 * decay] * 4 + [0.05 * decay] * 2 + [decay, 0.35]
        rows.append(",".join(str(v) for v in vals))
    path.write_text("\n".join(rows) + "\n")
    return path


def test_all_shipped_kinds_render(tmp_path):
    cases = [
        ("overhead-trajectory", DATA / "square_hops.csv",
         {"waypoints_path": str(DATA / "square_waypoints.csv")}),
        ("decay-curves", DATA / "offset_hops.csv", {}),
        ("loss-curve", DATA / "train_log.csv", {}),
        ("policy-vs-lqr-scatter", DATA / "lqr_scatter.csv", {}),
        ("velocity-bands", DATA / "square_hops.csv",
         {"legs_path": str(DATA / "square_hops.legs.csv")}),
    ]
    for kind, src, extra in cases:
        out = tmp_path / f"{kind}.png"
        render(PlotSpec(kind=kind, input_path=str(src), output_path=str(out), **extra))
        assert out.exists() and out.stat().st_size > 1000


def test_overhead_hull_matches_square():
    # positions of the shipped square run span the commanded 1 m square
    cols = read_columns(DATA / "square_hops.csv")
    x, y = cols["z1"], cols["z2"]
    assert abs((x.max() - x.min()) - 1.0) < 0.1
    assert abs((y.max() - y.min()) - 1.0) < 0.1


def test_empty_but_valid_csv_renders_axes(tmp_path):
    src = tmp_path / "empty.csv"
    src.write_text(HOPLOG_HEADER + "\n")
    out = tmp_path / "fig.png"
    code = main(["overhead-trajectory", "--in", str(src), "--out", str(out)])
    assert code == 0
    assert out.exists()


def test_schema_error_names_column(tmp_path):
    src = tmp_path / "bad.csv"
    src.write_text("k,z1\n0,0.1\n")
    with pytest.raises(SchemaError, match="z2"):
        render(PlotSpec(kind="overhead-trajectory", input_path=str(src),
                        output_path=str(tmp_path / "x.png")))


def test_cli_schema_error_exit_2(tmp_path):
    src = tmp_path / "bad.csv"
    src.write_text("step\n1\n")
    assert main(["loss-curve", "--in", str(src),
                 "--out", str(tmp_path / "x.png")]) == 2


def test_missing_optional_column_warns_and_renders(tmp_path):
    src = tmp_path / "minimal_train.csv"
    src.write_text("step,loss\n0,1.0\n1,0.5\n2,0.25\n")
    out = tmp_path / "loss.png"
    with pytest.warns(UserWarning, match="grad_norm"):
        render(PlotSpec(kind="loss-curve", input_path=str(src), output_path=str(out)))
    assert out.exists()


def test_render_deterministic(tmp_path):
    src = synthetic_hoplog(tmp_path / "hops.csv")
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    render(PlotSpec(kind="decay-curves", input_path=str(src), output_path=str(a)))
    render(PlotSpec(kind="decay-curves", input_path=str(src), output_path=str(b)))
    assert a.read_bytes() == b.read_bytes()


def test_inputs_not_mutated(tmp_path):
    src = synthetic_hoplog(tmp_path / "hops.csv")
    before = src.read_bytes()
    render(PlotSpec(kind="decay-curves", input_path=str(src),
                    output_path=str(tmp_path / "fig.png")))
    assert src.read_bytes() == before


def test_unknown_kind_rejected(tmp_path):
    src = synthetic_hoplog(tmp_path / "hops.csv")
    with pytest.raises(SchemaError):
        render(PlotSpec(kind="hologram", input_path=str(src),
                        output_path=str(tmp_path / "x.png")))
