"""Extraction manifest: image directory plus per-image metadata.

The metadata CSV carries the same label columns as the engine's feature
contract plus the image filename:
``id,filename,subtlety,state,z,diagnosis,x_px,y_px,size_mm``.
Empty cells mean missing values and are copied through verbatim.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

METADATA_COLUMNS = (
    "id", "filename", "subtlety", "state", "z", "diagnosis",
    "x_px", "y_px", "size_mm",
)
LABEL_COLUMNS = METADATA_COLUMNS[2:]


class ManifestError(ValueError):
    """Malformed metadata or a metadata/image mismatch."""


@dataclass
class ImageEntry:
    id: str
    path: Path
    labels: dict[str, str]  # raw label cells, copied into the output


@dataclass
class ExtractionManifest:
    image_dir: Path
    entries: list[ImageEntry]
    output_path: Path
    backbones: tuple[str, ...] = ("densenet161", "efficientnet_b7")
    extras: dict = field(default_factory=dict)


def load_manifest(metadata_csv, image_dir, output_path) -> ExtractionManifest:
    """Parse the metadata CSV and verify every referenced image exists."""
    metadata_csv = Path(metadata_csv)
    image_dir = Path(image_dir)
    if not metadata_csv.exists():
        raise ManifestError(f"metadata file not found: {metadata_csv}")
    if not image_dir.is_dir():
        raise ManifestError(f"image directory not found: {image_dir}")

    entries: list[ImageEntry] = []
    with open(metadata_csv, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(METADATA_COLUMNS):
            raise ManifestError(
                f"metadata header must be {','.join(METADATA_COLUMNS)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(METADATA_COLUMNS):
                raise ManifestError(
                    f"line {line_no}: expected {len(METADATA_COLUMNS)} fields, "
                    f"got {len(row)}")
            cells = dict(zip(METADATA_COLUMNS, row))
            image_path = image_dir / cells["filename"]
            if not image_path.exists():
                raise ManifestError(
                    f"image for id {cells['id']!r} not found: {image_path}")
            entries.append(ImageEntry(
                id=cells["id"],
                path=image_path,
                labels={c: cells[c] for c in LABEL_COLUMNS},
            ))
    if not entries:
        raise ManifestError(f"no rows in metadata file {metadata_csv}")
    return ExtractionManifest(
        image_dir=image_dir, entries=entries, output_path=Path(output_path))
