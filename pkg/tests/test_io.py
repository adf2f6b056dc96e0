import numpy as np
import pytest

from gnnbound.io import (DatasetFormatError, csv_text, dumps_dataset, loads_dataset,
                         read_config, read_dataset, write_dataset)
from conftest import random_dataset


def test_dataset_round_trip_is_byte_identical(tmp_path):
    data = random_dataset(5, seed=1)
    path = tmp_path / "d.jsonl"
    write_dataset(path, data)
    text = path.read_text()
    back = read_dataset(path)
    assert dumps_dataset(back) == text
    for a, b in zip(data, back):
        np.testing.assert_array_equal(a.X, b.X)
        assert a.G == b.G and a.y == b.y


def test_malformed_line_reports_line_number():
    good = dumps_dataset(random_dataset(2, seed=0))
    with pytest.raises(DatasetFormatError, match=r"x\.jsonl:3"):
        loads_dataset(good + '{"n": 2, "edges": [[0, 5]], "features": [[1], [1]], "label": 0}\n',
                      source="x.jsonl")


def test_config_parsing(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nlr = 0.1\nnso-m=3  # trailing\n\n")
    assert read_config(path, {"lr", "nso_m"}) == {"lr": "0.1", "nso_m": "3"}
    path.write_text("lrr=0.1\n")
    with pytest.raises(ValueError, match="unknown config key"):
        read_config(path, {"lr"})


def test_csv_schema_header_first():
    text = csv_text(("a", "b"), [{"a": 1, "b": 0.1}, {"a": 2}], schema="demo")
    lines = text.splitlines()
    assert lines[0] == "# schema=demo version=1"
    assert lines[1] == "a,b"
    assert lines[2] == "1,0.1" and lines[3] == "2,"
