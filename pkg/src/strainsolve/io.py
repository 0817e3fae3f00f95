"""
File formats and read-count ingestion.

Vectors and matrices are plain comma-separated text with ``#`` comments.
A matrix starts with a ``rows,cols`` header line. Numbers are written with
17 significant digits so that a write/read round trip is exact.

Result files are flat ``key: value`` lines followed by named CSV blocks::

    # strainsolve result
    method: global
    objective: 1.2345678901234567
    [M]
    10,3
    0,1,1
    ...
    [end]

The same content can be written as JSON instead (``fmt="json"``).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .bcd import BcdConfig
from .core import Measurement, ProblemDims

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message: str, path: Optional[PathLike] = None, line: Optional[int] = None):
        where = ""
        if path is not None:
            where = f"{path}:"
            if line is not None:
                where += f"{line}:"
            where += " "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
        self.path, self.line = path, line


def fmt_float(x: float) -> str:
    """17 significant digits, enough to parse back to the same double.

    Integral values are written without a decimal point.
    """
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if x == int(x) and abs(x) < 1e16:
        return str(int(x))
    return f"{x:.17g}"


def _content_lines(text: str):
    """(line number, stripped line) for non-blank, non-comment lines."""
    for k, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line and not line.startswith("#"):
            yield k, line


def _floats(line: str, path, k) -> List[float]:
    try:
        return [float(tok) for tok in line.split(",")]
    except ValueError:
        raise FormatError(f"expected comma-separated numbers, got {line!r}", path, k) from None


def _header(comments: Sequence[str]) -> str:
    return "".join(f"# {c}\n" for c in comments)


# ---------------------------------------------------------------------------
# vectors and matrices


def format_vector(v, comments: Sequence[str] = ()) -> str:
    return _header(comments) + ",".join(fmt_float(x) for x in np.ravel(v)) + "\n"


def parse_vector(text: str, path=None) -> np.ndarray:
    """All numbers of the file in reading order (rows are concatenated)."""
    vals = []
    for k, line in _content_lines(text):
        vals.extend(_floats(line, path, k))
    if not vals:
        raise FormatError("no values found", path)
    return np.array(vals)


def format_matrix(A, comments: Sequence[str] = ()) -> str:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    rows = [f"{A.shape[0]},{A.shape[1]}"] + [",".join(fmt_float(x) for x in r) for r in A]
    return _header(comments) + "\n".join(rows) + "\n"


def parse_matrix(text: str, path=None) -> np.ndarray:
    lines = list(_content_lines(text))
    if not lines:
        raise FormatError("empty matrix file", path)
    k0, head = lines[0]
    try:
        r, c = (int(t) for t in head.split(","))
    except ValueError:
        raise FormatError(f"expected a 'rows,cols' header, got {head!r}", path, k0) from None
    body = lines[1:]
    if len(body) != r:
        raise FormatError(f"header announces {r} rows, found {len(body)}", path, k0)
    A = np.empty((r, c))
    for i, (k, line) in enumerate(body):
        vals = _floats(line, path, k)
        if len(vals) != c:
            raise FormatError(f"expected {c} columns, found {len(vals)}", path, k)
        A[i] = vals
    return A


def write_vector(path: PathLike, v, comments: Sequence[str] = ()) -> None:
    Path(path).write_text(format_vector(v, comments), encoding="utf-8")


def read_vector(path: PathLike) -> np.ndarray:
    return parse_vector(_read(path), path)


def write_matrix(path: PathLike, A, comments: Sequence[str] = ()) -> None:
    Path(path).write_text(format_matrix(A, comments), encoding="utf-8")


def read_matrix(path: PathLike) -> np.ndarray:
    return parse_matrix(_read(path), path)


def _read(path: PathLike) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"not UTF-8 text ({exc.reason})", path) from None


# ---------------------------------------------------------------------------
# tables: a header of column names, then one comma-separated row per line


def format_table(columns: Sequence[str], rows, comments: Sequence[str] = ()) -> str:
    out = [",".join(columns)]
    for r in rows:
        out.append(",".join(v if isinstance(v, str) else fmt_float(v) for v in r))
    return _header(comments) + "\n".join(out) + "\n"


def parse_table(text: str, path=None) -> Tuple[List[str], List[List[str]]]:
    """Column names and rows of raw string cells."""
    lines = list(_content_lines(text))
    if not lines:
        raise FormatError("empty table", path)
    cols = lines[0][1].split(",")
    rows = []
    for k, line in lines[1:]:
        cells = line.split(",")
        if len(cells) != len(cols):
            raise FormatError(f"expected {len(cols)} cells, found {len(cells)}", path, k)
        rows.append(cells)
    return cols, rows


def write_table(path: PathLike, columns, rows, comments: Sequence[str] = ()) -> None:
    Path(path).write_text(format_table(columns, rows, comments), encoding="utf-8")


def read_table(path: PathLike):
    return parse_table(_read(path), path)


# ---------------------------------------------------------------------------
# result files


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _fmt_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt_value(x) for x in v)
    return str(v)


def format_result(
    fields: Dict[str, object],
    blocks: Dict[str, np.ndarray],
    fmt: str = "text",
    timestamp: bool = True,
    kind: str = "result",
) -> str:
    """Serialize scalar ``fields`` and named array ``blocks``."""
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds") if timestamp else None
    if fmt == "json":
        doc = {"kind": kind}
        if stamp:
            doc["created"] = stamp
        doc["fields"] = {k: _jsonable(v) for k, v in fields.items()}
        doc["blocks"] = {k: np.asarray(v, dtype=np.float64).tolist() for k, v in blocks.items()}
        # json writes floats with repr, which round-trips exactly
        return json.dumps(doc, indent=2, allow_nan=True) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    out = [f"# strainsolve {kind}"]
    if stamp:
        out.append(f"# created: {stamp}")
    for k, v in fields.items():
        if ":" in k or k.startswith("["):
            raise ValueError(f"invalid key {k!r}")
        out.append(f"{k}: {_fmt_value(v)}")
    text = "\n".join(out) + "\n"
    for name, arr in blocks.items():
        text += f"[{name}]\n" + format_matrix(arr) + "[end]\n"
    return text


def _parse_scalar(s: str):
    if s in ("true", "false"):
        return s == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def parse_result(text: str, path=None) -> Tuple[Dict[str, object], Dict[str, np.ndarray]]:
    """Inverse of :func:`format_result` for either format."""
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
        blocks = {k: np.atleast_2d(np.array(v, dtype=np.float64)) for k, v in doc.get("blocks", {}).items()}
        return dict(doc.get("fields", {})), blocks
    fields, blocks = {}, {}
    lines = text.splitlines()
    k = 0
    while k < len(lines):
        line = lines[k].strip()
        k += 1
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name, start = line[1:-1], k
            while k < len(lines) and lines[k].strip() != "[end]":
                k += 1
            if k == len(lines):
                raise FormatError(f"block [{name}] is not closed", path, start)
            blocks[name] = parse_matrix("\n".join(lines[start:k]), path)
            k += 1
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise FormatError(f"expected 'key: value', got {line!r}", path, k)
        fields[key.strip()] = _parse_scalar(value.strip())
    return fields, blocks


def write_result(path: PathLike, fields, blocks, fmt: str = "text", timestamp: bool = True, kind: str = "result"):
    Path(path).write_text(format_result(fields, blocks, fmt, timestamp, kind), encoding="utf-8")


def read_result(path: PathLike):
    return parse_result(_read(path), path)


# ---------------------------------------------------------------------------
# read counts


@dataclass(frozen=True)
class SiteRecord:
    """Read counts at one site: reference class and each alternate class."""

    site_id: str
    ref_count: int
    alt_counts: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "alt_counts", tuple(int(a) for a in self.alt_counts))
        if self.ref_count < 0 or any(a < 0 for a in self.alt_counts):
            raise ValueError(f"negative read count at site {self.site_id}")
        if not self.alt_counts:
            raise ValueError(f"site {self.site_id} has no alternate class")

    @property
    def depth(self) -> int:
        return self.ref_count + sum(self.alt_counts)

    @property
    def p(self) -> int:
        return len(self.alt_counts) + 1


def parse_counts_text(text: str, path=None) -> List[SiteRecord]:
    records, ncols, header_seen = [], None, False
    for k, line in _content_lines(text):
        cells = line.split("\t")
        if not header_seen:
            if cells[0].strip().lower() != "site" or len(cells) < 3:
                raise FormatError("header must be 'site<TAB>ref<TAB>alt1...'", path, k)
            header_seen, ncols = True, len(cells)
            continue
        if len(cells) != ncols:
            raise FormatError(f"expected {ncols} tab-separated fields, found {len(cells)}", path, k)
        try:
            counts = [int(c) for c in cells[1:]]
        except ValueError:
            raise FormatError(f"non-integer count in {line!r}", path, k) from None
        if any(c < 0 for c in counts):
            raise FormatError("negative count", path, k)
        records.append(SiteRecord(cells[0].strip(), counts[0], tuple(counts[1:])))
    return records


def parse_counts_file(path: PathLike) -> List[SiteRecord]:
    """Read a tab-separated counts file.

    The first non-comment line is the header ``site ref alt1 [alt2 ...]``;
    each later line holds one site. ``#`` lines are comments. An empty or
    comment-only file gives an empty list.
    """
    return parse_counts_text(_read(path), path)


@dataclass
class IngestResult:
    measurement: Optional[Measurement]
    kept: List[int]
    dropped: List[Tuple[int, str]] = field(default_factory=list)


def ingest_read_counts(records: Sequence[SiteRecord], min_depth: int = 0, n: int = 1) -> IngestResult:
    """Class frequencies alt_c / depth for every site with enough reads.

    Sites keep their input order. Dropped sites are reported with a reason,
    including zero-depth sites (whose frequencies are undefined). The
    returned measurement carries ``n`` strains, which only matters to later
    solves.
    """
    if not records:
        return IngestResult(None, [])
    p = records[0].p
    data, kept, dropped = [], [], []
    for idx, rec in enumerate(records):
        if rec.p != p:
            raise FormatError(f"site {rec.site_id} has {rec.p - 1} alternate classes, expected {p - 1}")
        depth = rec.depth
        if depth == 0:
            dropped.append((idx, f"{rec.site_id}: zero depth"))
            continue
        if depth < min_depth:
            dropped.append((idx, f"{rec.site_id}: depth {depth} < {min_depth}"))
            continue
        data.extend(a / depth for a in rec.alt_counts)
        kept.append(idx)
    if not kept:
        return IngestResult(None, [], dropped)
    return IngestResult(Measurement(ProblemDims(len(kept), n, p), np.array(data)), kept, dropped)


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """Everything a solver run needs besides the data itself."""

    dims: ProblemDims
    gamma: Union[float, Tuple[float, ...]]
    method: str = "bcd"
    bcd: BcdConfig = BcdConfig()
    mip_gap: float = 1e-6
    node_limit: int = 10**6
    posterior_nodes: int = 10_000
    rng_seed: Optional[int] = None
    input_path: Optional[str] = None
    output_path: Optional[str] = None

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gamma, dtype=np.float64))
        if not np.all(g > 0):
            raise ValueError("gamma must be > 0")
        if self.method not in ("bcd", "global", "hybrid"):
            raise ValueError(f"unknown method {self.method!r}")

    def stddevs(self) -> np.ndarray:
        g = np.atleast_1d(np.asarray(self.gamma, dtype=np.float64))
        return np.full(self.dims.q, g[0]) if g.size == 1 else g

    def check_paths(self) -> None:
        if self.input_path is not None and not Path(self.input_path).is_file():
            raise FileNotFoundError(self.input_path)
