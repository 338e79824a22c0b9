"""Offline preference scoring by frozen reference models.

Cache file format (JSON lines, version 1):

* line 1: ``{"header": {...}}`` with ``format`` (``"poftlab-scores"``),
  ``version``, ``created`` (ISO timestamp of the first write),
  ``eos_included`` (always ``true``: scored tokens are the response plus the
  end-of-sequence terminator) and ``models``, a map from model id to
  ``{"checkpoint_sha256", "tokenizer_sha256"}``;
* every further line is one record ``{"model_id", "example_id", "logp",
  "token_count", "r", "error"}``. ``r`` is ``logp / token_count`` in nats per
  token; ``error`` is ``null`` or a reason (``"oversize"``,
  ``"empty_response"``) in which case the numeric fields are ``null``.

External scorers may append records of their own: use a model id prefixed
with ``ext:`` (no header entry needed), put the score in ``r`` and set
``logp = r`` and ``token_count = 1``. Such columns aggregate and filter like
any reference model.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import Corpus
from .model import TransformerLM, batch_log_probs, encode_pair, sequence_length
from .objectives import RewardAggregate, aggregate

logger = logging.getLogger(__name__)

FORMAT = "poftlab-scores"
VERSION = 1
EXTERNAL_PREFIX = "ext:"


class ScoreCacheError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreEntry:
    model_id: str
    example_id: str
    logp: float | None
    token_count: int | None
    error: str | None = None

    @property
    def r(self) -> float | None:
        if self.error is not None:
            return None
        return self.logp / self.token_count

    def to_record(self) -> dict:
        return {
            "model_id": self.model_id,
            "example_id": self.example_id,
            "logp": self.logp,
            "token_count": self.token_count,
            "r": self.r,
            "error": self.error,
        }


class ScoreCache:
    def __init__(self, metadata: Mapping | None = None, path=None):
        meta = dict(metadata or {})
        meta.setdefault("format", FORMAT)
        meta.setdefault("version", VERSION)
        meta.setdefault("created", datetime.now(timezone.utc).replace(microsecond=0).isoformat())
        meta.setdefault("eos_included", True)
        meta.setdefault("models", {})
        self.metadata = meta
        self.entries: dict[tuple[str, str], ScoreEntry] = {}
        self.path = Path(path) if path is not None else None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return key in self.entries

    def get(self, model_id: str, example_id: str) -> ScoreEntry | None:
        return self.entries.get((model_id, example_id))

    def model_ids(self) -> list[str]:
        seen = dict.fromkeys(m for m, _ in self.entries)
        return list(dict.fromkeys([*self.metadata["models"], *seen]))

    def add(self, entry: ScoreEntry) -> None:
        self.entries[(entry.model_id, entry.example_id)] = entry

    def register_model(self, model: TransformerLM) -> None:
        info = {"checkpoint_sha256": model.digest(),
                "tokenizer_sha256": model.tokenizer.digest() if model.tokenizer else None}
        known = self.metadata["models"].get(model.name)
        if known is not None and known != info:
            raise ScoreCacheError(
                f"model {model.name!r} does not match the cache: checkpoint or tokenizer hash differs"
            )
        self.metadata["models"][model.name] = info

    # persistence

    def header_line(self) -> str:
        return json.dumps({"header": self.metadata}, sort_keys=True)

    def save(self, path=None) -> Path:
        path = Path(path or self.path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.header_line() + "\n")
            for e in self.entries.values():
                fh.write(json.dumps(e.to_record(), sort_keys=True) + "\n")
        self.path = path
        return path

    @classmethod
    def load(cls, path) -> "ScoreCache":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines:
            raise ScoreCacheError(f"{path}: empty cache file")
        try:
            header = json.loads(lines[0])["header"]
        except (json.JSONDecodeError, KeyError, TypeError):
            raise ScoreCacheError(f"{path}: first line is not a cache header") from None
        if header.get("format") != FORMAT or header.get("version") != VERSION:
            raise ScoreCacheError(f"{path}: unsupported cache format")
        cache = cls(header, path)
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entry = ScoreEntry(rec["model_id"], rec["example_id"], rec["logp"], rec["token_count"], rec.get("error"))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ScoreCacheError(f"{path}:{lineno}: bad record ({exc})") from None
            if entry.error is None and rec.get("r") is not None and rec["r"] != entry.r:
                raise ScoreCacheError(f"{path}:{lineno}: r != logp / token_count")
            cache.add(entry)
        return cache

    def _append(self, entries: Sequence[ScoreEntry]) -> None:
        if self.path is None or not entries:
            return
        with open(self.path, "a", encoding="utf-8") as fh:
            for e in entries:
                fh.write(json.dumps(e.to_record(), sort_keys=True) + "\n")


def open_cache(path) -> ScoreCache:
    """Load ``path`` if it exists, otherwise start an empty cache bound to it."""
    path = Path(path)
    if path.exists():
        return ScoreCache.load(path)
    return ScoreCache(path=path)


def score_dataset(models: Sequence[TransformerLM], dataset: Corpus, batch_size: int = 64,
                  cache: ScoreCache | None = None, path=None) -> ScoreCache:
    """Score every (model, example) pair not already present. With a path
    (or a cache bound to one) new records are appended to the file; entries
    already in the cache are left untouched, so rescoring is idempotent."""
    if cache is None:
        cache = open_cache(path) if path is not None else ScoreCache()
    for model in models:
        if not model.frozen:
            raise ScoreCacheError(f"reference model {model.name!r} must be frozen")
        cache.register_model(model)
    if cache.path is not None:
        existing = cache.path.exists()
        if existing:
            on_disk = ScoreCache.load(cache.path)
            if on_disk.metadata != cache.metadata:
                # header changed (new model registered): rewrite once, then append
                cache.save()
        else:
            cache.save()

    for model in models:
        todo, errors = [], []
        for ex in dataset:
            if (model.name, ex.id) in cache:
                continue
            if not ex.response:
                errors.append(ScoreEntry(model.name, ex.id, None, None, "empty_response"))
                continue
            p, r = encode_pair(model.tokenizer, ex.instruction, ex.response)
            if sequence_length(p, r) > model.config.max_seq:
                errors.append(ScoreEntry(model.name, ex.id, None, None, "oversize"))
                continue
            todo.append((ex.id, (p, r)))
        if errors:
            logger.warning("%s: %d examples could not be scored", model.name, len(errors))
        new = list(errors)
        with T.no_grad():
            for start in range(0, len(todo), batch_size):
                chunk = todo[start:start + batch_size]
                logp, counts = batch_log_probs(model, [pair for _, pair in chunk])
                for (ex_id, _), lp, n in zip(chunk, logp.data, counts):
                    new.append(ScoreEntry(model.name, ex_id, float(lp), int(n)))
        order = {ex.id: i for i, ex in enumerate(dataset)}
        new.sort(key=lambda e: order[e.example_id])
        for e in new:
            cache.add(e)
        cache._append(new)
    return cache


def aggregate_scores(cache: ScoreCache, model_ids: Sequence[str], strategy: str = "avg",
                     example_ids: Iterable[str] | None = None, skip_errors: bool = False) -> dict[str, RewardAggregate]:
    """Per-example aggregate of the requested models' ``r`` values.
    ``skip_errors`` drops examples with error or missing entries instead of raising."""
    model_ids = list(model_ids)
    if not model_ids:
        raise ScoreCacheError("no model ids requested")
    if example_ids is None:
        example_ids = list(dict.fromkeys(e for _, e in cache.entries))
    out: dict[str, RewardAggregate] = {}
    for ex_id in example_ids:
        values = []
        for m in model_ids:
            entry = cache.get(m, ex_id)
            if entry is None or entry.error is not None:
                if skip_errors:
                    values = None
                    break
                reason = "missing" if entry is None else entry.error
                raise ScoreCacheError(f"score for model {m!r}, example {ex_id} is {reason}")
            values.append(entry.r)
        if values is None:
            continue
        out[ex_id] = RewardAggregate(strategy, aggregate(values, strategy), tuple(model_ids))
    return out


def stale_entries(cache: ScoreCache, corpus: Corpus) -> list[ScoreEntry]:
    """Model entries whose example id no longer resolves to an example of
    ``corpus`` (the example was edited or removed)."""
    ids = set(corpus.ids())
    return [e for e in cache.entries.values()
            if e.example_id not in ids and not e.model_id.startswith(EXTERNAL_PREFIX)]


def missing_examples(cache: ScoreCache, corpus: Corpus, model_ids: Sequence[str]) -> list[str]:
    return [ex.id for ex in corpus if any((m, ex.id) not in cache for m in model_ids)]


def inject_external(cache: ScoreCache, column: str, values: Mapping[str, float]) -> None:
    """Add an external score column (e.g. an IFD or Deita score) under the
    model id ``ext:<column>``."""
    model_id = EXTERNAL_PREFIX + column
    new = [ScoreEntry(model_id, ex_id, float(v), 1) for ex_id, v in values.items()]
    for e in new:
        cache.add(e)
    cache._append(new)


# ---------------------------------------------------------------- histograms


def score_histogram(values, num_bins: int = 30, value_range: tuple[float, float] | None = None):
    """Density-normalized histogram: returns ``(edges, densities)``."""
    arr = np.array([getattr(v, "value", v) for v in (values.values() if isinstance(values, Mapping) else values)],
                   dtype=np.float64)
    if arr.size == 0:
        raise ScoreCacheError("cannot histogram an empty score set")
    densities, edges = np.histogram(arr, bins=num_bins, range=value_range, density=True)
    return edges, densities


def write_histogram_csv(path, histograms: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> Path:
    """One row per (series, bin)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "bin_left", "bin_right", "density"])
        for name, (edges, dens) in histograms.items():
            for lo, hi, d in zip(edges[:-1], edges[1:], dens):
                w.writerow([name, repr(float(lo)), repr(float(hi)), repr(float(d))])
    return path


def tail_mass(values, threshold: float) -> float:
    arr = np.array([getattr(v, "value", v) for v in values], dtype=np.float64)
    return float((arr < threshold).mean())
