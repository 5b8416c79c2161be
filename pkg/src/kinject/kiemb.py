"""KIEMB interchange format for per-category embedding vectors.

Text format, bit-exact by construction:

    KIEMB 1 <scale-tag> <dim> <count>
    <category-name>\t<v0> <v1> ... <v_{dim-1}>

Values are decimal floats with 9 significant digits, LF line endings, UTF-8.
Nine significant digits round-trip float32 exactly, so write->read->write is
stable.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorruptFile

MAGIC = "KIEMB"
VERSION = 1

SCALE_TEXT = "KI-S"
SCALE_RELATION = "KI-M"
SCALE_WIDE = "KI-L"
ALL_SCALES = (SCALE_TEXT, SCALE_RELATION, SCALE_WIDE)


def format_value(v: float) -> str:
    return f"{float(v):.9g}"


def write_kiemb(
    path: str | Path,
    scale_tag: str,
    entries: Sequence[tuple[str, np.ndarray]],
) -> None:
    """Serialize (category, vector) pairs. All vectors must share one dim."""
    if not entries:
        raise ValueError("refusing to write an empty KIEMB file")
    dim = len(entries[0][1])
    lines = [f"{MAGIC} {VERSION} {scale_tag} {dim} {len(entries)}"]
    for name, vec in entries:
        arr = np.asarray(vec, dtype=np.float64).ravel()
        if arr.shape[0] != dim:
            raise ValueError(f"vector for {name!r} has dim {arr.shape[0]}, expected {dim}")
        lines.append(name + "\t" + " ".join(format_value(v) for v in arr))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_kiemb(path: str | Path) -> tuple[str, int, list[tuple[str, np.ndarray]]]:
    """Parse a KIEMB file; returns (scale_tag, dim, [(name, vector), ...])."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise CorruptFile(f"{path}: empty file")
    header = lines[0].split(" ")
    if len(header) != 5 or header[0] != MAGIC:
        raise CorruptFile(f"{path}: bad header {lines[0]!r}")
    try:
        version, dim, count = int(header[1]), int(header[3]), int(header[4])
    except ValueError as exc:
        raise CorruptFile(f"{path}: non-integer header field") from exc
    if version != VERSION:
        raise CorruptFile(f"{path}: unsupported version {version}")
    scale_tag = header[2]
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise CorruptFile(f"{path}: header promises {count} records, found {len(body)}")
    entries = []
    for ln in body:
        name, sep, rest = ln.partition("\t")
        if not sep or not name:
            raise CorruptFile(f"{path}: record without tab separator: {ln[:60]!r}")
        try:
            vec = np.array([float(tok) for tok in rest.split(" ") if tok], dtype=np.float64)
        except ValueError as exc:
            raise CorruptFile(f"{path}: unparsable value in record {name!r}") from exc
        if vec.shape[0] != dim:
            raise CorruptFile(
                f"{path}: record {name!r} has {vec.shape[0]} values, header says {dim}"
            )
        if not np.all(np.isfinite(vec)):
            raise CorruptFile(f"{path}: non-finite value in record {name!r}")
        entries.append((name, vec))
    return scale_tag, dim, entries
