"""Line-delimited JSON and TSV files that carry the producing config hash."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable


class DataError(ValueError):
    """Malformed input file."""


def write_jsonl(path, records: Iterable[dict], config_hash: str = "", extra_meta: dict | None = None) -> None:
    meta = {"_meta": {"config_hash": config_hash, **(extra_meta or {})}}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> tuple[dict, list[dict]]:
    """Returns (meta, records). Files without a meta line get an empty meta."""
    meta: dict = {}
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: bad JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: expected an object")
            if lineno == 1 and "_meta" in rec:
                meta = rec["_meta"]
            else:
                records.append(rec)
    return meta, records


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "NA"
    return str(v)


def write_tsv(path, header: list[str], rows: Iterable[list], config_hash: str = "",
              comments: Iterable[str] = ()) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        for c in comments:
            fh.write(f"# {c}\n")
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_cell(v) for v in row) + "\n")


def read_tsv(path) -> tuple[str, list[str], list[list[str]]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    config_hash = ""
    if lines and lines[0].startswith("# config_hash="):
        config_hash = lines.pop(0).split("=", 1)[1]
    while lines and lines[0].startswith("#"):
        lines.pop(0)
    if not lines:
        raise DataError(f"{path}: empty table")
    header = lines[0].split("\t")
    return config_hash, header, [ln.split("\t") for ln in lines[1:]]
