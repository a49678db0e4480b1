"""Manifest ingestion, article-level splitting, caption cleaning and corpus statistics."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, LeakageError
from .metrics import canonical_modality

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class ManifestEntry:
    image_path: str
    caption: str
    article_id: str
    modality: str = "OTHER"
    split: str | None = None
    id: str = ""

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in asdict(self).items() if v not in (None, "")}, sort_keys=True)


@dataclass
class ManifestReport:
    entries: list
    errors: list = field(default_factory=list)  # (line number, message)


def parse_entry(obj: dict, lineno: int) -> ManifestEntry:
    if not isinstance(obj, dict):
        raise ValueError("entry is not a JSON object")
    missing = [k for k in ("image_path", "caption", "article_id") if not str(obj.get(k, "")).strip()]
    if missing:
        raise ValueError(f"missing {', '.join(missing)}")
    split = obj.get("split")
    if split is not None and split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return ManifestEntry(
        image_path=str(obj["image_path"]),
        caption=str(obj["caption"]),
        article_id=str(obj["article_id"]),
        modality=canonical_modality(obj.get("modality", "OTHER")),
        split=split,
        id=str(obj.get("id", lineno)),
    )


def load_manifest(path, strict: bool = False) -> ManifestReport:
    """Parse a JSONL manifest; bad lines are collected with their line numbers.

    Relative image paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    report = ManifestReport([])
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = parse_entry(json.loads(line), lineno)
        except (json.JSONDecodeError, ValueError) as exc:
            report.errors.append((lineno, str(exc)))
            continue
        if not Path(entry.image_path).is_absolute():
            entry.image_path = str(path.parent / entry.image_path)
        report.entries.append(entry)
    if report.errors:
        if strict:
            raise DataError(f"{path}: {len(report.errors)} malformed lines, first at line {report.errors[0][0]}")
        log.warning("%s: skipped %d malformed lines", path, len(report.errors))
    return report


def write_manifest(path, entries, base: Path | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            if base is not None:
                e = ManifestEntry(**{**asdict(e), "image_path": str(Path(e.image_path).relative_to(base))})
            fh.write(e.to_json() + "\n")


def _bucket(article_id: str, seed: int) -> float:
    digest = hashlib.sha256(f"{seed}:{article_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") / 2 ** 64


def audit_splits(entries) -> dict:
    """Map every article to the set of splits it appears in; raise if any spans two."""
    seen = {}
    for e in entries:
        if e.split is not None:
            seen.setdefault(e.article_id, set()).add(e.split)
    for art, splits in seen.items():
        if len(splits) > 1:
            raise LeakageError(art, splits)
    counts = {s: sum(1 for e in entries if e.split == s) for s in SPLITS}
    articles = {s: sum(1 for sp in seen.values() if s in sp) for s in SPLITS}
    return {"leak_free": True, "entries": counts, "articles": articles, "n_articles": len(seen)}


def assign_splits(entries, ratios=(0.8, 0.1, 0.1), seed: int = 42):
    """Place whole articles into train/val/test by a seeded hash of the article id.

    Articles that already carry a split keep it (and must agree across their
    images). Returns the entries and a leakage audit.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be three values summing to 1, got {ratios}")
    fixed = {}
    for e in entries:
        if e.split is not None:
            prev = fixed.setdefault(e.article_id, e.split)
            if prev != e.split:
                raise LeakageError(e.article_id, {prev, e.split})
    edges = np.cumsum(ratios)
    for e in entries:
        split = fixed.get(e.article_id)
        if split is None:
            u = _bucket(e.article_id, seed)
            split = SPLITS[min(int(np.searchsorted(edges, u, side="right")), 2)]
        e.split = split
    return entries, audit_splits(entries)


# Bracketed citations / figure references, panel labels, and URLs.
CLEANING_RULES = (
    (re.compile(r"\[[^\]]*\]"), " "),
    (re.compile(r"\((?:fig|figure|see|ref)\.?[^)]*\)", re.I), " "),
    (re.compile(r"\b(?:fig|figure)\.?\s*\d+[a-z]?\b", re.I), " "),
    (re.compile(r"https?://\S+"), " "),
    (re.compile(r"<[^>]+>"), " "),
)
_WS = re.compile(r"\s+")


def clean_caption(text: str) -> str:
    for pattern, repl in CLEANING_RULES:
        text = pattern.sub(repl, text)
    return _WS.sub(" ", text).strip().lower()


def clean_entries(entries) -> list:
    kept = []
    for e in entries:
        cleaned = clean_caption(e.caption)
        if not re.search(r"\w", cleaned):
            log.warning("dropping entry %s: caption empty after cleaning", e.id or e.image_path)
            continue
        e.caption = cleaned
        kept.append(e)
    return kept


def caption_stats(entries) -> dict:
    """Word-count mean, median and linear-interpolation quartiles."""
    return length_stats([len(e.caption.split()) for e in entries])


def length_stats(lengths) -> dict:
    lengths = np.asarray(lengths, dtype=float)
    if lengths.size == 0:
        raise DataError("caption statistics need at least one entry")
    q1, med, q3 = np.percentile(lengths, [25, 50, 75])
    return {"n": int(lengths.size), "mean": float(lengths.mean()), "median": float(med),
            "q1": float(q1), "q3": float(q3), "iqr": float(q3 - q1)}


def modality_mix(entries) -> dict:
    counts = {}
    for e in entries:
        counts[e.modality] = counts.get(e.modality, 0) + 1
    n = max(1, len(entries))
    return {k: v / n for k, v in sorted(counts.items())}
