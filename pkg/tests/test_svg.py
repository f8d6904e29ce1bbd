"""Chart emission tests: SVGs are pure functions of CSV text and carry
the verbatim CSV values."""

import xml.etree.ElementTree as ET

import pytest

from statt.errors import DataFormatError
from statt.svg import attention_chart_from_csv, sweep_chart_from_csv

SWEEP_CSV = """fraction,mode,mean_f1,a_f1,b_f1
0.0,attention,0.97,0.99,0.95
0.0,mean,0.96,0.98,0.94
0.25,attention,0.93,0.95,0.91
0.25,mean,0.9,0.92,0.88
0.5,attention,0.9150000000000001,0.93,0.9
0.5,mean,0.84,0.86,0.82
"""

ATTENTION_CSV = """t,alpha_mean,alpha_class_corn,alpha_class_rye
0,0.05,0.04,0.06
1,0.45,0.5,0.4
2,0.3,0.26,0.34
3,0.2,0.2,0.2
"""


def _attrs(svg: str, tag: str) -> list[dict]:
    root = ET.fromstring(svg)
    ns = "{http://www.w3.org/2000/svg}"
    return [e.attrib for e in root.iter(f"{ns}{tag}")]


def test_sweep_chart_is_deterministic():
    assert sweep_chart_from_csv(SWEEP_CSV) == sweep_chart_from_csv(SWEEP_CSV)


def test_sweep_chart_is_wellformed_xml_with_verbatim_values():
    svg = sweep_chart_from_csv(SWEEP_CSV)
    circles = _attrs(svg, "circle")        # also proves XML well-formedness
    assert len(circles) == 6
    seen = {(c["data-series"], c["data-x"], c["data-y"]) for c in circles}
    expect = {
        ("attention", "0.0", "0.97"),
        ("mean", "0.0", "0.96"),
        ("attention", "0.25", "0.93"),
        ("mean", "0.25", "0.9"),
        ("attention", "0.5", "0.9150000000000001"),
        ("mean", "0.5", "0.84"),
    }
    assert seen == expect
    assert len(_attrs(svg, "polyline")) == 2
    assert "attention" in svg and "mean" in svg


def test_sweep_chart_column_order_does_not_matter():
    rows = [line.split(",") for line in SWEEP_CSV.strip().split("\n")]
    reordered = "\n".join(
        ",".join([c[2], c[1], c[0], c[3], c[4]]) for c in rows) + "\n"
    svg = sweep_chart_from_csv(reordered)
    circles = _attrs(svg, "circle")
    assert {(c["data-x"], c["data-y"]) for c in circles} == \
        {(c["data-x"], c["data-y"])
         for c in _attrs(sweep_chart_from_csv(SWEEP_CSV), "circle")}


def test_sweep_chart_escapes_attribute_values():
    funky = 'fraction,mode,mean_f1\n0.0,a"b&c<d,0.5\n'
    svg = sweep_chart_from_csv(funky)
    circles = _attrs(svg, "circle")
    assert circles[0]["data-series"] == 'a"b&c<d'


def test_sweep_chart_rejects_malformed_csv():
    with pytest.raises(DataFormatError):
        sweep_chart_from_csv("")
    with pytest.raises(DataFormatError):
        sweep_chart_from_csv("fraction,mode,mean_f1\n0.0,attention\n")
    with pytest.raises(DataFormatError):
        sweep_chart_from_csv("fraction,mode\n0.0,attention\n")
    with pytest.raises(DataFormatError):
        sweep_chart_from_csv("fraction,mode,mean_f1\n")


def test_attention_chart_is_deterministic():
    assert attention_chart_from_csv(ATTENTION_CSV) == \
        attention_chart_from_csv(ATTENTION_CSV)


def test_attention_chart_bars_carry_verbatim_values():
    svg = attention_chart_from_csv(ATTENTION_CSV)
    bars = [a for a in _attrs(svg, "rect") if "data-series" in a]
    assert len(bars) == 4 * 3             # 4 steps x 3 value columns
    by_key = {(b["data-series"], b["data-t"]): b["data-value"] for b in bars}
    assert by_key[("alpha_mean", "0")] == "0.05"
    assert by_key[("alpha_class_corn", "1")] == "0.5"
    assert by_key[("alpha_class_rye", "3")] == "0.2"
    assert "corn" in svg and "rye" in svg


def test_attention_chart_bar_heights_scale_with_values():
    svg = attention_chart_from_csv(ATTENTION_CSV)
    bars = [a for a in _attrs(svg, "rect") if "data-series" in a]
    heights = {(b["data-series"], b["data-t"]): float(b["height"])
               for b in bars}
    assert heights[("alpha_mean", "1")] > heights[("alpha_mean", "0")]
    ratio = heights[("alpha_mean", "1")] / heights[("alpha_mean", "2")]
    assert abs(ratio - 0.45 / 0.3) < 1e-3


def test_attention_chart_mean_only_csv():
    svg = attention_chart_from_csv("t,alpha_mean\n0,0.5\n1,0.5\n")
    bars = [a for a in _attrs(svg, "rect") if "data-series" in a]
    assert len(bars) == 2
    assert all(b["data-series"] == "alpha_mean" for b in bars)


def test_attention_chart_rejects_malformed_csv():
    with pytest.raises(DataFormatError):
        attention_chart_from_csv("")
    with pytest.raises(DataFormatError):
        attention_chart_from_csv("time,alpha\n0,0.5\n")
    with pytest.raises(DataFormatError):
        attention_chart_from_csv("t,alpha_mean\n")
    with pytest.raises(DataFormatError):
        attention_chart_from_csv("t,alpha_mean\n0,0.5,0.4\n")
