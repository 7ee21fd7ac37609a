"""Dataset manifest CSV: ``path,patient_id,stage,variant,origin_path``.

Paths are stored relative to the manifest's directory.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

from .imaging import ParameterError

STAGE_NAMES = ("F0", "F1", "F2", "F3", "F4")
MANIFEST_HEADER = ("path", "patient_id", "stage", "variant", "origin_path")


@dataclass(frozen=True)
class Element:
    path: str
    patient_id: str
    stage: str
    variant: int = 0
    origin_path: str = ""

    def __post_init__(self):
        if self.stage not in STAGE_NAMES:
            raise ParameterError(f"stage must be one of {STAGE_NAMES}, got {self.stage!r}")

    @property
    def stage_index(self) -> int:
        return STAGE_NAMES.index(self.stage)


def write_manifest(elements, dest) -> None:
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    with dest.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in elements:
            writer.writerow([getattr(e, f.name) for f in fields(Element)])


def read_manifest(src) -> list[Element]:
    src = Path(src)
    with src.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise ParameterError(f"{src}: expected header {','.join(MANIFEST_HEADER)}")
        return [Element(path=r["path"], patient_id=r["patient_id"], stage=r["stage"],
                        variant=int(r["variant"]), origin_path=r["origin_path"])
                for r in reader]
