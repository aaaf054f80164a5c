import pytest

from skewgrad.csvio import CONFLICT_SCHEMA, PILOT_SCHEMA, CsvFormatError, read_csv, write_csv


def test_round_trip_preserves_floats_exactly(tmp_path):
    rows = [[0, 0.1 + 0.2, -1.0, 1 / 3, None], [25, 1e-17, 0.5, -0.25, 2.0]]
    path = write_csv(tmp_path / "c.csv", list(CONFLICT_SCHEMA), rows)
    back = read_csv(path, CONFLICT_SCHEMA)
    assert [list(r.values()) for r in back] == rows


def test_header_only_file(tmp_path):
    path = write_csv(tmp_path / "p.csv", list(PILOT_SCHEMA), [])
    assert path.read_text() == "mode,seed,target_accuracy\n"
    assert read_csv(path, PILOT_SCHEMA) == []


@pytest.mark.parametrize("text,match", [
    ("", "empty"),
    ("mode,seed\nall,0\n", "header"),
    ("mode,seed,target_accuracy\nall,0\n", ":2: 2 fields"),
    ("mode,seed,target_accuracy\nall,zero,0.5\n", "bad seed"),
    ("mode,seed,target_accuracy\nall,0,nan\n", "bad target_accuracy"),
])
def test_strict_parser_rejects(tmp_path, text, match):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(CsvFormatError, match=match):
        read_csv(path, PILOT_SCHEMA)


def test_writer_rejects_ragged_rows(tmp_path):
    with pytest.raises(CsvFormatError):
        write_csv(tmp_path / "x.csv", ["a", "b"], [[1]])
