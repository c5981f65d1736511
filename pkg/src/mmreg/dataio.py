"""Dataset directories: images, truth fields, and a JSONL manifest.

A dataset directory holds one line per record in ``manifest.jsonl`` and
the referenced files under ``pairs/``: grayscale images as binary PGM
and truth fields as DDF. Manifest lines carry the record id, its source
id, the role -> path mapping, and the record's metadata (deformation
parameters and the like). Keys are sorted and floats serialised with
repr, so regenerating a dataset from the same seed reproduces every byte.
"""

from __future__ import annotations

import json
import os

from .errors import DataError
from .field import load_ddf, save_ddf
from .imagecore import load_pgm, save_pgm

__all__ = ["save_dataset", "load_dataset"]


def save_dataset(out_dir, records) -> None:
    """Write records as a dataset directory (see module docstring)."""
    out_dir = os.fspath(out_dir)
    pairs_dir = os.path.join(out_dir, "pairs")
    os.makedirs(pairs_dir, exist_ok=True)
    lines = []
    for rec in records:
        files = {}
        save_pgm(rec.fixed, os.path.join(pairs_dir, f"{rec.id}_fixed.pgm"))
        files["fixed"] = f"pairs/{rec.id}_fixed.pgm"
        save_pgm(rec.moving, os.path.join(pairs_dir, f"{rec.id}_moving.pgm"))
        files["moving"] = f"pairs/{rec.id}_moving.pgm"
        if rec.label is not None:
            save_pgm(rec.label, os.path.join(pairs_dir, f"{rec.id}_label.pgm"))
            files["label"] = f"pairs/{rec.id}_label.pgm"
        if rec.truth_field is not None:
            save_ddf(rec.truth_field, os.path.join(pairs_dir, f"{rec.id}_truth.ddf"))
            files["truth"] = f"pairs/{rec.id}_truth.ddf"
        entry = {"id": rec.id, "source": rec.source, "files": files, "meta": rec.meta}
        lines.append(json.dumps(entry, sort_keys=True))
    with open(os.path.join(out_dir, "manifest.jsonl"), "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(in_dir):
    """Read a dataset directory back into records."""
    from .pipeline import PairRecord  # local import to avoid a cycle

    in_dir = os.fspath(in_dir)
    manifest = os.path.join(in_dir, "manifest.jsonl")
    if not os.path.exists(manifest):
        raise DataError(f"{in_dir}: no manifest.jsonl; not a dataset directory")
    records = []
    with open(manifest, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
                rec_id = entry["id"]
                files = entry["files"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{manifest}:{lineno}: malformed manifest line") from exc
            fixed = load_pgm(os.path.join(in_dir, files["fixed"]))
            moving = load_pgm(os.path.join(in_dir, files["moving"]))
            label = load_pgm(os.path.join(in_dir, files["label"])) if "label" in files else None
            truth = load_ddf(os.path.join(in_dir, files["truth"])) if "truth" in files else None
            records.append(
                PairRecord(
                    id=rec_id,
                    fixed=fixed,
                    moving=moving,
                    label=label,
                    truth_field=truth,
                    source=entry.get("source", rec_id),
                    meta=entry.get("meta", {}),
                )
            )
    return records
