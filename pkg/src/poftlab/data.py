"""Instruction-response datasets: JSONL I/O, synthetic tasks, noise synthesis,
score-based filtering and teacher regeneration."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LABELS = ("clean", "noise", "unknown")
TASKS = ("copy", "reverse", "addition", "sort")
DEFAULT_CHAR_RATES = {"ins": 0.05, "del": 0.05, "sub": 0.05}
DEFAULT_KEEP_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)


class DatasetError(ValueError):
    pass


def content_id(instruction: str, response: str) -> str:
    payload = json.dumps([instruction, response], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:20]


@dataclass(frozen=True)
class Example:
    instruction: str
    response: str
    label: str = "clean"
    external_scores: Mapping[str, float] = field(default_factory=dict, compare=False)
    id: str = ""

    def __post_init__(self):
        if self.label not in LABELS:
            raise DatasetError(f"unknown label {self.label!r}")
        expected = content_id(self.instruction, self.response)
        if not self.id:
            object.__setattr__(self, "id", expected)
        elif self.id != expected:
            raise DatasetError(f"example id {self.id} does not match its content (expected {expected})")

    def with_label(self, label: str) -> "Example":
        return Example(self.instruction, self.response, label, dict(self.external_scores))

    def with_response(self, response: str, label: str | None = None) -> "Example":
        return Example(self.instruction, response, label or self.label, dict(self.external_scores))

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "instruction": self.instruction,
            "response": self.response,
            "label": self.label,
            "external_scores": dict(self.external_scores),
        }


class Corpus:
    def __init__(self, examples: Iterable[Example] = (), provenance: Mapping | None = None):
        self.examples = list(examples)
        self.provenance = dict(provenance or {})
        seen: set[str] = set()
        for ex in self.examples:
            if ex.id in seen:
                raise DatasetError(f"duplicate example id {ex.id}")
            seen.add(ex.id)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, Corpus) and [e.to_record() for e in self] == [e.to_record() for e in other]

    def ids(self) -> list[str]:
        return [e.id for e in self.examples]

    def by_id(self) -> dict[str, Example]:
        return {e.id: e for e in self.examples}

    def label_counts(self) -> dict[str, int]:
        counts = {k: 0 for k in LABELS}
        for e in self.examples:
            counts[e.label] += 1
        return counts

    def subset(self, ids: Iterable[str], provenance: Mapping | None = None) -> "Corpus":
        index = self.by_id()
        return Corpus([index[i] for i in ids], provenance or self.provenance)


# ---------------------------------------------------------------- JSONL


def save_jsonl(corpus: Corpus, path) -> Path:
    """One JSON object per line; provenance goes to ``<path>.provenance.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus:
            fh.write(json.dumps(ex.to_record(), ensure_ascii=False, sort_keys=True) + "\n")
    prov = Path(str(path) + ".provenance.json")
    prov.write_text(json.dumps(corpus.provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_jsonl(path, rehash: bool = False) -> Corpus:
    """Read a dataset. A stored id that disagrees with the content is an
    error unless ``rehash`` is set, in which case the id is recomputed."""
    path = Path(path)
    examples = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetError(f"{path}:{lineno}: record is not an object")
            for key in ("instruction", "response"):
                if not isinstance(rec.get(key), str):
                    raise DatasetError(f"{path}:{lineno}: missing or non-string field {key!r}")
            label = rec.get("label") or "unknown"
            scores = rec.get("external_scores") or {}
            try:
                ex = Example(rec["instruction"], rec["response"], label,
                             {str(k): float(v) for k, v in scores.items()},
                             "" if rehash else rec.get("id", ""))
            except (DatasetError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            if ex.id in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate id {ex.id} (first seen on line {seen[ex.id]})")
            seen[ex.id] = lineno
            examples.append(ex)
    prov_path = Path(str(path) + ".provenance.json")
    provenance = json.loads(prov_path.read_text(encoding="utf-8")) if prov_path.exists() else {"source": str(path)}
    return Corpus(examples, provenance)


# ---------------------------------------------------------------- synthetic tasks

_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def _make_task(task: str, rng: np.random.Generator) -> tuple[str, str]:
    if task in ("copy", "reverse"):
        n = int(rng.integers(3, 9))
        s = "".join(_LETTERS[i] for i in rng.integers(0, 26, size=n))
        return f"{task}: {s}", s if task == "copy" else s[::-1]
    if task == "addition":
        a, b = (int(v) for v in rng.integers(0, 1000, size=2))
        return f"add: {a} {b}", str(a + b)
    if task == "sort":
        n = int(rng.integers(3, 7))
        digits = [int(v) for v in rng.integers(0, 10, size=n)]
        return "sort: " + " ".join(map(str, digits)), " ".join(map(str, sorted(digits)))
    raise DatasetError(f"unknown task {task!r}")


def parse_task_mix(task_mix) -> dict[str, float]:
    """Accept ``"copy"``, ``"copy,sort"``, ``"copy=3,sort=1"``, a list of
    names or a name->weight mapping."""
    if isinstance(task_mix, str):
        items = {}
        for part in filter(None, (p.strip() for p in task_mix.split(","))):
            name, _, weight = part.partition("=")
            items[name.strip()] = float(weight) if weight else 1.0
        task_mix = items
    elif not isinstance(task_mix, Mapping):
        task_mix = {name: 1.0 for name in task_mix}
    mix = {k: float(v) for k, v in task_mix.items() if float(v) > 0}
    for name in mix:
        if name not in TASKS:
            raise DatasetError(f"unknown task {name!r}; choose from {TASKS}")
    if not mix:
        raise DatasetError("task mix is empty")
    return mix


def generate_synthetic_corpus(task_mix, size: int, seed: int, exclude: Iterable[str] = ()) -> Corpus:
    """Distinct templated examples with exactly computable answers, all
    labeled clean. ``exclude`` lists ids that must not be produced (used to
    keep held-out sets disjoint)."""
    if size <= 0:
        raise DatasetError("size must be positive")
    mix = parse_task_mix(task_mix)
    names = sorted(mix)
    weights = np.array([mix[n] for n in names])
    weights = weights / weights.sum()
    rng = np.random.default_rng(seed)
    banned = set(exclude)
    examples: list[Example] = []
    seen: set[str] = set()
    attempts = 0
    while len(examples) < size:
        attempts += 1
        if attempts > 50 * size + 1000:
            raise DatasetError(f"could not draw {size} distinct examples from task mix {mix}")
        task = names[int(rng.choice(len(names), p=weights))]
        ex = Example(*_make_task(task, rng), label="clean")
        if ex.id in seen or ex.id in banned:
            continue
        seen.add(ex.id)
        examples.append(ex)
    return Corpus(examples, {"generator": "synthetic", "task_mix": mix, "size": size, "seed": seed})


def split_corpus(corpus: Corpus, eval_size: int, seed: int) -> tuple[Corpus, Corpus]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    held = sorted(order[:eval_size])
    rest = sorted(order[eval_size:])
    prov = dict(corpus.provenance)
    return (Corpus([corpus[i] for i in rest], {**prov, "split": "train", "split_seed": seed}),
            Corpus([corpus[i] for i in held], {**prov, "split": "eval", "split_seed": seed}))


# ---------------------------------------------------------------- noise


def corpus_alphabet(corpus: Corpus) -> list[str]:
    return sorted({ch for ex in corpus for ch in ex.instruction + ex.response})


def corrupt_text(text: str, rates: Mapping[str, float], alphabet: Sequence[str], rng: np.random.Generator) -> str:
    """Per character: delete with ``rates['del']``, otherwise substitute a
    different alphabet character with ``rates['sub']``; then insert a random
    character after it with ``rates['ins']``. Never returns an empty string."""
    p_del, p_sub, p_ins = rates.get("del", 0.0), rates.get("sub", 0.0), rates.get("ins", 0.0)
    out: list[str] = []
    for ch in text:
        u = rng.random()
        if u < p_del:
            pass
        elif u < p_del + p_sub and len(alphabet) > 1:
            k = int(rng.integers(0, len(alphabet) - 1))
            repl = alphabet[k]
            if repl == ch:
                repl = alphabet[-1]
            out.append(repl)
        else:
            out.append(ch)
        if rng.random() < p_ins:
            out.append(alphabet[int(rng.integers(0, len(alphabet)))])
    if not out:
        out.append(alphabet[int(rng.integers(0, len(alphabet)))])
    return "".join(out)


def _check_rates(rates: Mapping[str, float]) -> dict[str, float]:
    rates = {**{k: 0.0 for k in DEFAULT_CHAR_RATES}, **dict(rates)}
    for k, v in rates.items():
        if k not in DEFAULT_CHAR_RATES:
            raise DatasetError(f"unknown corruption rate {k!r}")
        if not 0.0 <= v <= 1.0:
            raise DatasetError(f"rate {k} must lie in [0, 1]")
    if rates["del"] + rates["sub"] > 1.0:
        raise DatasetError("del + sub rates exceed 1")
    return rates


def _corrupt_differently(text: str, original: str, rates: Mapping[str, float], alphabet: Sequence[str],
                         rng: np.random.Generator, tries: int = 20) -> str:
    """Corrupt ``text`` so the result differs from ``original``: redraw the
    corruption a few times, then substitute one character outright."""
    for _ in range(tries):
        out = corrupt_text(text, rates, alphabet, rng)
        if out != original:
            return out
    chars = list(out)
    i = int(rng.integers(0, len(chars)))
    others = [a for a in alphabet if a != chars[i]]
    if not others:
        raise DatasetError("alphabet too small to corrupt a response")
    chars[i] = others[int(rng.integers(0, len(others)))]
    return "".join(chars)


def make_noise(corpus: Corpus, n_noise: int, mismatch_fraction: float = 1.0,
               char_rates: Mapping[str, float] | None = None, seed: int = 0) -> Corpus:
    """Noise examples built from ``n_noise`` distinct source examples: with
    probability ``mismatch_fraction`` the response is swapped for a different
    example's (never one equal to its own), then characters are corrupted.
    When any corruption rate is positive the noise response never equals its
    source's clean response; with all rates zero and no mismatch the noise
    set is the sampled originals relabeled."""
    rates = _check_rates(DEFAULT_CHAR_RATES if char_rates is None else char_rates)
    if not 0.0 <= mismatch_fraction <= 1.0:
        raise DatasetError("mismatch_fraction must lie in [0, 1]")
    n = len(corpus)
    if n_noise < 0 or n_noise > n:
        raise DatasetError(f"cannot draw {n_noise} noise examples from {n} sources")
    responses = [ex.response for ex in corpus]
    if mismatch_fraction > 0 and n_noise > 0 and len(set(responses)) < 2:
        raise DatasetError("corpus too small to mismatch responses")
    alphabet = corpus_alphabet(corpus)
    rng = np.random.default_rng(seed)
    sources = rng.choice(n, size=n_noise, replace=False)
    noise: list[Example] = []
    n_mismatched = 0
    for src in sources:
        ex = corpus[int(src)]
        response = ex.response
        if rng.random() < mismatch_fraction:
            while True:
                donor = int(rng.integers(0, n - 1))
                if donor >= src:
                    donor += 1
                if responses[donor] != ex.response:
                    break
            response = responses[donor]
            n_mismatched += 1
        if any(rates.values()):
            response = _corrupt_differently(response, ex.response, rates, alphabet, rng)
        noise.append(Example(ex.instruction, response, "noise"))
    prov = {
        "generator": "make_noise",
        "source": corpus.provenance,
        "n_noise": n_noise,
        "mismatch_fraction": mismatch_fraction,
        "n_mismatched": n_mismatched,
        "char_rates": rates,
        "seed": seed,
    }
    return Corpus(noise, prov)


def blend(clean: Corpus, noise: Corpus, shuffle_seed: int) -> Corpus:
    overlap = set(clean.ids()) & set(noise.ids())
    if overlap:
        raise DatasetError(f"{len(overlap)} example ids occur in both corpora, e.g. {sorted(overlap)[0]}")
    merged = list(clean) + list(noise)
    order = np.random.default_rng(shuffle_seed).permutation(len(merged))
    prov = {"generator": "blend", "clean": clean.provenance, "noise": noise.provenance, "shuffle_seed": shuffle_seed}
    return Corpus([merged[i] for i in order], prov)


# ---------------------------------------------------------------- filtering


def _score_of(value) -> float:
    return float(getattr(value, "value", value))


def filter_by_percentile(corpus: Corpus, aggregates: Mapping[str, object], keep_fraction: float) -> Corpus:
    """Top ``ceil(keep_fraction * N)`` examples by aggregate score, in
    descending score order, ties broken by ascending id."""
    if not 0.0 < keep_fraction <= 1.0:
        raise DatasetError("keep_fraction must lie in (0, 1]")
    missing = [ex.id for ex in corpus if ex.id not in aggregates]
    if missing:
        raise DatasetError(f"{len(missing)} examples have no aggregate score, e.g. {missing[0]}")
    ranked = sorted(corpus, key=lambda ex: (-_score_of(aggregates[ex.id]), ex.id))
    # the small slack keeps e.g. 0.6 * 5 = 3.0000000000000004 from rounding up to 4
    keep = min(len(ranked), math.ceil(keep_fraction * len(ranked) - 1e-9))
    prov = {"generator": "filter_by_percentile", "source": corpus.provenance, "keep_fraction": keep_fraction}
    return Corpus(ranked[:keep], prov)


def external_aggregates(corpus: Corpus, column: str) -> dict[str, float]:
    """Aggregates taken from an ``external_scores`` column (IFD, Deita, ...)."""
    out = {}
    for ex in corpus:
        if column not in ex.external_scores:
            raise DatasetError(f"example {ex.id} lacks external score {column!r}")
        out[ex.id] = float(ex.external_scores[column])
    return out


def write_filter_audit(corpus: Corpus, aggregates: Mapping[str, object], kept: Corpus, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kept_ids = set(kept.ids())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "aggregate", "status"])
        for ex in corpus:
            w.writerow([ex.id, ex.label, repr(_score_of(aggregates[ex.id])), "kept" if ex.id in kept_ids else "dropped"])
    return path


# ---------------------------------------------------------------- distillation


def regenerate_responses(model, corpus: Corpus, temperature: float = 0.0, max_tokens: int = 32,
                         seed: int = 0) -> Corpus:
    """Replace each response with the frozen model's generation. Generations
    that hit ``max_tokens`` without ``eos`` are kept, truncated, and listed in
    the provenance; empty generations are dropped and listed too."""
    from .model import generate_text

    if not model.frozen:
        raise DatasetError("regeneration needs a frozen teacher model")
    rng = np.random.default_rng(seed)
    outputs = generate_text(model, [ex.instruction for ex in corpus], max_tokens, temperature, rng)
    examples, truncated, empty = [], [], []
    seen: set[str] = set()
    for ex, (text, stopped) in zip(corpus, outputs):
        if not text:
            empty.append(ex.id)
            continue
        new = Example(ex.instruction, text, "unknown", dict(ex.external_scores))
        if new.id in seen:
            continue
        seen.add(new.id)
        if not stopped:
            truncated.append(new.id)
        examples.append(new)
    if truncated:
        logger.warning("%d generations truncated at %d tokens", len(truncated), max_tokens)
    prov = {
        "generator": "regenerate_responses",
        "teacher": model.name,
        "teacher_sha256": model.digest(),
        "temperature": temperature,
        "max_tokens": max_tokens,
        "seed": seed,
        "source": corpus.provenance,
        "truncated_ids": truncated,
        "empty_source_ids": empty,
    }
    return Corpus(examples, prov)
