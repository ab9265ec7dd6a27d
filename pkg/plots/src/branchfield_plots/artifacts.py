"""Reading and validating branchfield run artifacts.

This package touches the primary toolkit only through its documented
artifact interface: the CSV/JSON files and the shipped schema describing
them.  Files are never modified.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np


class HashMismatchError(ValueError):
    """Artifacts from different runs refused within one figure."""


class SchemaMismatchError(ValueError):
    """Artifact does not match the shipped schema."""


def load_schema() -> dict:
    ref = resources.files("branchfield") / "schemas" / "artifacts.json"
    return json.loads(ref.read_text())


@dataclass(frozen=True)
class CsvArtifact:
    path: Path
    config_hash: str
    header: list[str]
    data: np.ndarray

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.header.index(name)]


def read_csv_artifact(path, expected_kind: str | None = None) -> CsvArtifact:
    path = Path(path)
    with open(path) as fh:
        first = fh.readline().strip()
        if not first.startswith("# config_hash="):
            raise SchemaMismatchError(
                f"{path} lacks the leading config-hash comment"
            )
        config_hash = first.split("=", 1)[1]
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if expected_kind is not None:
        schema = load_schema()["artifacts"].get(expected_kind)
        if schema is None or "columns" not in schema:
            raise SchemaMismatchError(f"unknown artifact kind {expected_kind}")
        if header != schema["columns"]:
            raise SchemaMismatchError(
                f"{path}: columns {header} do not match schema "
                f"{schema['columns']} for {expected_kind}"
            )
    return CsvArtifact(path, config_hash, header, data)


def read_json_artifact(path) -> tuple[str, dict]:
    path = Path(path)
    payload = json.loads(path.read_text())
    if "config_hash" not in payload:
        raise SchemaMismatchError(f"{path} lacks a config_hash key")
    return payload["config_hash"], payload


def require_common_hash(*hashes: str) -> str:
    unique = {h for h in hashes if h}
    if len(unique) != 1:
        raise HashMismatchError(
            f"artifacts come from different runs: hashes {sorted(unique)}"
        )
    return unique.pop()
