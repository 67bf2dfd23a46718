import os

import numpy as np
import pytest

from kvlatent_plots import FigureSpec, RaggedGridError, render

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def fixture(name):
    return os.path.join(FIXTURES, name)


def test_heatmap_from_similarity_grid(tmp_path):
    out = str(tmp_path / "heat.png")
    spec = FigureSpec(
        inputs=[fixture("similarity_24x24.csv")],
        kind="heatmap",
        out_path=out,
        title="latent vs evicted keys",
        xlabel="teacher slot",
        ylabel="latent position",
    )
    assert render(spec) == out
    assert os.path.getsize(out) > 1000


def test_grouped_bars_from_ablation_table(tmp_path):
    out = str(tmp_path / "bars.png")
    spec = FigureSpec(
        inputs=[fixture("lambda_ablation.csv")],
        kind="bars",
        out_path=out,
        xlabel="lambda",
        ylabel="accuracy",
    )
    render(spec)
    assert os.path.exists(out)


def test_lines_from_sweep_table(tmp_path):
    out = str(tmp_path / "lines.png")
    spec = FigureSpec(
        inputs=[fixture("mt_sweep.csv")],
        kind="lines",
        out_path=out,
        xlabel="iterations",
        ylabel="accuracy",
    )
    render(spec)
    assert os.path.exists(out)


def test_ragged_grid_rejected_with_row_index(tmp_path):
    out = str(tmp_path / "bad.png")
    spec = FigureSpec(inputs=[fixture("ragged.csv")], kind="heatmap", out_path=out)
    with pytest.raises(RaggedGridError) as err:
        render(spec)
    assert err.value.row_index == 1
    assert not os.path.exists(out)


def test_empty_csv_rejected_no_file(tmp_path):
    out = str(tmp_path / "empty.png")
    spec = FigureSpec(inputs=[fixture("empty.csv")], kind="heatmap", out_path=out)
    with pytest.raises(ValueError):
        render(spec)
    assert not os.path.exists(out)


def test_missing_input_rejected(tmp_path):
    spec = FigureSpec(inputs=[fixture("nope.csv")], kind="heatmap", out_path=str(tmp_path / "x.png"))
    with pytest.raises(FileNotFoundError):
        render(spec)


def test_unknown_kind_rejected(tmp_path):
    spec = FigureSpec(inputs=[fixture("similarity_24x24.csv")], kind="pie", out_path=str(tmp_path / "x.png"))
    with pytest.raises(ValueError):
        render(spec)


def test_rendering_is_byte_deterministic(tmp_path):
    a, b = str(tmp_path / "a.png"), str(tmp_path / "b.png")
    for out in (a, b):
        render(
            FigureSpec(
                inputs=[fixture("similarity_24x24.csv")], kind="heatmap", out_path=out, title="t"
            )
        )
    assert open(a, "rb").read() == open(b, "rb").read()


def test_heatmap_color_scale_fixed(tmp_path):
    # values outside [-1, 1] clamp rather than rescale: render must not fail
    grid = tmp_path / "grid.csv"
    np.savetxt(grid, np.array([[2.0, -2.0], [0.0, 1.0]]), delimiter=",", fmt="%.2f")
    out = str(tmp_path / "c.png")
    render(FigureSpec(inputs=[str(grid)], kind="heatmap", out_path=out))
    assert os.path.exists(out)
