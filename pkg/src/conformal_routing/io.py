"""Dataset ingestion: TNTP road networks and the package's CSV interchange format.

CSV layout (a directory holding two files)::

    nodes.csv   id,x,y[,extra feature columns...]
    edges.csv   src,dst,weight        # weight left blank when unobserved

TNTP input is the usual ``<name>_net.tntp`` with optional ``<name>_node.tntp``
(coordinates) and ``<name>_flow.tntp`` (link volumes/costs) siblings.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .graph import Graph

log = logging.getLogger(__name__)

FORMATS = ("tntp", "csv")


def load_graph(path, format: str = "csv", **options) -> Graph:
    """Read a graph from ``path``.

    ``format`` is ``"csv"`` (a directory with nodes.csv/edges.csv) or
    ``"tntp"`` (a ``*_net.tntp`` file or a directory containing one).
    Extra keyword arguments are passed to the TNTP reader.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file or directory: {path}")
    fmt = format.lower()
    if fmt == "csv":
        if options:
            raise TypeError(f"unexpected options for csv: {sorted(options)}")
        return read_csv_graph(path)
    if fmt == "tntp":
        return read_tntp(path, **options)
    raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")


# --------------------------------------------------------------------- CSV


def _parse_float(text, path, lineno, what):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(path, lineno, f"{what} {text!r} is not a number") from None
    if not math.isfinite(value):
        raise ParseError(path, lineno, f"{what} {text!r} is not finite")
    return value


def _parse_int(text, path, lineno, what):
    try:
        return int(text)
    except ValueError:
        raise ParseError(path, lineno, f"{what} {text!r} is not an integer") from None


def read_csv_graph(directory) -> Graph:
    directory = Path(directory)
    nodes_path, edges_path = directory / "nodes.csv", directory / "edges.csv"
    for p in (nodes_path, edges_path):
        if not p.is_file():
            raise FileNotFoundError(f"missing {p}")

    ids, feats = [], []
    with open(nodes_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0].strip().lower() != "id":
            raise ParseError(nodes_path, 1, "header must start with 'id'")
        width = len(header)
        for row in reader:
            lineno = reader.line_num
            if not row or not "".join(row).strip():
                continue
            if len(row) != width:
                raise ParseError(nodes_path, lineno, f"expected {width} fields, got {len(row)}")
            ids.append(_parse_int(row[0], nodes_path, lineno, "node id"))
            feats.append([_parse_float(x, nodes_path, lineno, "feature") for x in row[1:]])
    if not ids:
        raise ParseError(nodes_path, 2, "no nodes")
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{nodes_path}: duplicate node ids")
    index = {label: i for i, label in enumerate(ids)}
    features = np.asarray(feats, dtype=float).reshape(len(ids), width - 1)
    if features.shape[1] == 0:
        features = np.ones((len(ids), 1))

    edges, weights = [], []
    with open(edges_path, newline="") as f:
        reader = csv.reader(f)
        header = [h.strip().lower() for h in next(reader, [])]
        if header[:3] != ["src", "dst", "weight"]:
            raise ParseError(edges_path, 1, "header must be src,dst,weight")
        for row in reader:
            lineno = reader.line_num
            if not row or not "".join(row).strip():
                continue
            if len(row) < 3:
                raise ParseError(edges_path, lineno, f"expected 3 fields, got {len(row)}")
            u = _parse_int(row[0], edges_path, lineno, "src")
            v = _parse_int(row[1], edges_path, lineno, "dst")
            for label in (u, v):
                if label not in index:
                    raise ValidationError(
                        f"{edges_path}:{lineno}: edge references unknown node {label}"
                    )
            text = row[2].strip()
            w = float("nan") if text == "" else _parse_float(text, edges_path, lineno, "weight")
            if w < 0:
                raise ValidationError(f"{edges_path}:{lineno}: negative weight {w}")
            edges.append((index[u], index[v]))
            weights.append(w)
    return Graph(
        n_nodes=len(ids),
        node_features=features,
        edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2),
        weights=np.asarray(weights, dtype=float),
        node_ids=tuple(ids),
    )


def write_csv_graph(g: Graph, directory) -> Path:
    """Write ``g`` in the CSV interchange format; floats round-trip exactly."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    p = g.node_features.shape[1]
    names = ["x", "y"][:p] + [f"f{i}" for i in range(2, p)]
    with open(directory / "nodes.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", *names])
        for label, row in zip(g.node_ids, g.node_features):
            w.writerow([label, *(repr(float(x)) for x in row)])
    with open(directory / "edges.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["src", "dst", "weight"])
        for (u, v), weight in zip(g.edges, g.weights):
            w.writerow([g.node_ids[u], g.node_ids[v], "" if np.isnan(weight) else repr(float(weight))])
    return directory


# -------------------------------------------------------------------- TNTP

_META = re.compile(r"^\s*<([^>]+)>\s*(.*)$")


def _column_name(text: str) -> str:
    return re.sub(r"\s+", "_", text.strip().strip("~;").strip().lower())


def _split_header(line: str):
    body = line.strip().lstrip("~").strip().rstrip(";")
    parts = body.split("\t") if "\t" in body else body.split()
    return [_column_name(p) for p in parts if p.strip()]


def _data_lines(path):
    """Yield ``(lineno, fields)`` of a TNTP table plus its metadata and header."""
    meta, header, rows = {}, None, []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            m = _META.match(line)
            if m and header is None:
                key = m.group(1).strip().upper()
                if key != "END OF METADATA":
                    meta[key] = m.group(2).strip()
                continue
            if line.startswith("~"):
                if header is None:
                    header = _split_header(line)
                continue
            fields = line.rstrip(";").split()
            if header is None and not _looks_numeric(fields[0]):
                header = _split_header(line)
                continue
            rows.append((lineno, fields))
    return meta, header, rows


def _looks_numeric(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def _tntp_siblings(path: Path):
    if path.is_dir():
        nets = sorted(path.glob("*_net.tntp"))
        if not nets:
            raise FileNotFoundError(f"no *_net.tntp file in {path}")
        if len(nets) > 1:
            raise ValidationError(f"several *_net.tntp files in {path}; pass one explicitly")
        path = nets[0]
    stem = path.name[: -len("_net.tntp")] if path.name.endswith("_net.tntp") else path.stem
    node = path.with_name(f"{stem}_node.tntp")
    flow = path.with_name(f"{stem}_flow.tntp")
    return path, (node if node.is_file() else None), (flow if flow.is_file() else None)


def read_tntp(
    path,
    weight_column: str = "volume",
    node_file=None,
    flow_file=None,
    drop_zones: bool = True,
) -> Graph:
    """Read a TNTP network.

    Parameters
    ----------
    path : path
        A ``*_net.tntp`` file or a directory containing exactly one.
    weight_column : str
        Edge weight source: a column of the flow file (``volume``, ``cost``)
        or of the net file (``capacity``, ``free_flow_time``, ...).  Column
        names are lower-cased with spaces replaced by underscores.
    node_file, flow_file : path, optional
        Override the sibling files discovered next to the net file.
    drop_zones : bool
        Remove zone centroids (nodes numbered below ``<FIRST THRU NODE>``)
        together with their connector links.
    """
    net_path, found_node, found_flow = _tntp_siblings(Path(path))
    node_path = Path(node_file) if node_file else found_node
    flow_path = Path(flow_file) if flow_file else found_flow
    column = _column_name(weight_column)

    meta, header, rows = _data_lines(net_path)
    if header is None:
        raise ParseError(net_path, 1, "missing column header line")
    try:
        ci, cj = header.index("init_node"), header.index("term_node")
    except ValueError:
        raise ParseError(net_path, 1, f"header lacks init_node/term_node: {header}") from None

    first_thru = 1
    if drop_zones and "FIRST THRU NODE" in meta:
        first_thru = _parse_int(meta["FIRST THRU NODE"], net_path, 0, "FIRST THRU NODE")

    links, net_values = [], []
    net_col = header.index(column) if column in header else None
    for lineno, fields in rows:
        if len(fields) < len(header):
            raise ParseError(net_path, lineno, f"expected {len(header)} fields, got {len(fields)}")
        u = _parse_int(fields[ci], net_path, lineno, "init node")
        v = _parse_int(fields[cj], net_path, lineno, "term node")
        if u < first_thru or v < first_thru:
            continue
        links.append((u, v, lineno))
        if net_col is not None:
            net_values.append(_parse_float(fields[net_col], net_path, lineno, column))

    if flow_path is not None and column not in (header or []):
        weights = _flow_weights(flow_path, column, links)
    elif net_col is not None:
        weights = np.asarray(net_values, dtype=float)
    else:
        where = f"{net_path.name}" + (f" or {flow_path.name}" if flow_path else " (no flow file found)")
        raise ParseError(net_path, 1, f"weight column {column!r} not found in {where}")
    neg = np.flatnonzero(weights < 0)
    if neg.size:
        u, v, lineno = links[int(neg[0])]
        raise ValidationError(f"negative {column} {weights[neg[0]]} on link ({u}, {v}), line {lineno}")

    labels = sorted({u for u, _, _ in links} | {v for _, v, _ in links})
    coords = {}
    if node_path is not None:
        _, _, node_rows = _data_lines(node_path)
        for lineno, fields in node_rows:
            if len(fields) < 3:
                raise ParseError(node_path, lineno, "expected node, x, y")
            label = _parse_int(fields[0], node_path, lineno, "node")
            coords[label] = (
                _parse_float(fields[1], node_path, lineno, "x"),
                _parse_float(fields[2], node_path, lineno, "y"),
            )
        missing = [label for label in labels if label not in coords]
        if missing:
            raise ValidationError(f"{node_path}: no coordinates for nodes {missing[:5]}")
        features = np.asarray([coords[label] for label in labels])
    else:
        log.warning("no node file for %s; using constant node features", net_path)
        features = np.ones((len(labels), 1))

    index = {label: i for i, label in enumerate(labels)}
    seen = {}
    for u, v, lineno in links:
        if (u, v) in seen:
            raise ValidationError(f"{net_path}:{lineno}: duplicate link ({u}, {v}), first at line {seen[u, v]}")
        seen[u, v] = lineno
    edges = np.asarray([(index[u], index[v]) for u, v, _ in links], dtype=np.int64).reshape(-1, 2)
    return Graph(
        n_nodes=len(labels),
        node_features=features,
        edges=edges,
        weights=weights,
        node_ids=tuple(labels),
    )


def _flow_weights(flow_path: Path, column: str, links) -> np.ndarray:
    _, header, rows = _data_lines(flow_path)
    if header is None:
        raise ParseError(flow_path, 1, "missing column header line")
    try:
        ci, cj = header.index("from"), header.index("to")
        cw = header.index(column)
    except ValueError:
        raise ParseError(flow_path, 1, f"flow header {header} lacks from/to/{column}") from None
    table = {}
    for lineno, fields in rows:
        if len(fields) <= max(ci, cj, cw):
            raise ParseError(flow_path, lineno, f"expected {len(header)} fields, got {len(fields)}")
        u = _parse_int(fields[ci], flow_path, lineno, "from")
        v = _parse_int(fields[cj], flow_path, lineno, "to")
        table[u, v] = _parse_float(fields[cw], flow_path, lineno, column)
    return np.asarray([table.get((u, v), np.nan) for u, v, _ in links], dtype=float)
