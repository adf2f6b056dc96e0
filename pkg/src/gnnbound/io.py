"""Dataset files, key=value configs, CSV reports and atomic writes."""

import csv
import io
import json
import os
import tempfile

import numpy as np

from .graph import Graph
from .model import DatasetExample

CSV_SCHEMA_VERSION = 1


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` via a temp file in the same directory + rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def example_to_dict(ex):
    d = ex.G.to_dict()
    d["features"] = ex.X.tolist()
    d["label"] = ex.y
    return d


def dumps_dataset(examples):
    return "".join(json.dumps(example_to_dict(ex), separators=(",", ":")) + "\n"
                   for ex in examples)


class DatasetFormatError(ValueError):
    pass


def loads_dataset(text, source="<string>"):
    examples = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            G = Graph.from_dict(obj)
            X = np.array(obj["features"], dtype=np.float64)
            examples.append(DatasetExample(X.reshape(G.n, -1), G, int(obj["label"])))
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetFormatError(f"{source}:{lineno}: malformed example: {exc}") from exc
    return examples


def read_dataset(path):
    with open(path, encoding="utf-8") as fh:
        return loads_dataset(fh.read(), source=path)


def write_dataset(path, examples):
    atomic_write_text(path, dumps_dataset(examples))


def read_config(path, allowed):
    """Parse ``key=value`` lines (``#`` comments); unknown keys are errors."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in allowed:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = value
    return out


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def csv_text(header, rows, schema=None):
    """CSV from dict rows, led by a ``# schema=<name> version=<n>`` line."""
    buf = io.StringIO()
    if schema is not None:
        buf.write(f"# schema={schema} version={CSV_SCHEMA_VERSION}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(row.get(h)) for h in header])
    return buf.getvalue()


def write_csv(path, header, rows, schema=None):
    atomic_write_text(path, csv_text(header, rows, schema))
