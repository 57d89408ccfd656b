import numpy as np
import pytest

from app.errors import ConfigError
from app.graph_io import (format_flows, format_graph, format_lp, parse_graph,
                          read_graph, write_graph)
from app.graph_steiner import EmbeddedGraph, GraphOptions, solve_graph

PATH = EmbeddedGraph([(0.1, 0.1), (0.5, 0.1), (0.9, 0.1)], [(0, 1), (1, 2)], (0, 2))


def test_graph_file(tmp_path):
    path = write_graph(tmp_path / "g.txt", PATH)
    g = read_graph(path)
    np.testing.assert_allclose(g.points, PATH.points)
    assert g.edges.tolist() == [[0, 1], [1, 2]]
    assert g.terminals == (0, 2)
    assert format_graph(g) == format_graph(PATH)


@pytest.mark.parametrize("text", [
    "edges 1\n0 1\n",
    "vertices 2\n0 0\n1 1\nterminals 0 1\n",
    "vertices 2\n0 0\n1 x\nedges 0\nterminals 0 1\n",
    "vertices 3\n0 0\n1 1\n",
])
def test_malformed_graph_file(text):
    with pytest.raises(ConfigError):
        parse_graph(text)


def test_missing_graph_file(tmp_path):
    with pytest.raises(ConfigError):
        read_graph(tmp_path / "nope.txt")


def test_lp_text():
    text = format_lp(PATH)
    assert text.startswith("\\ relaxed Steiner tree program\nMinimize\n")
    assert " k0_0: 1 V0_0 = 1\n" in text
    assert " -inf <= i0 <= 0\n" in text
    assert " V0_1 free\n" in text
    assert " s0 >= 0\n" in text
    assert text.endswith("End\n")


def test_flow_table():
    sol = solve_graph(PATH, GraphOptions(method="lp"))
    lines = format_flows(PATH, sol).splitlines()
    assert lines[0].startswith("# method=lp status=converged")
    assert lines[1].split("\t") == ["edge", "u", "v", "length", "V1"]
    assert lines[2].split("\t")[-1] == "1"
