"""Training loop, evaluation and per-epoch metric records."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..data import Corpus, Example, load_jsonl
from ..model import (ModelConfig, TransformerLM, encode_pair, generate_text, init_model, load_model,
                     save_model, sequence_length)
from ..objectives import bi_poft_loss, ce_loss, dpo_loss, gradient_identity_check, model_scores, poft_loss
from ..scores import EXTERNAL_PREFIX, ScoreCache, aggregate_scores
from ..tokenizers import make_tokenizer
from .config import RunConfig, save_config
from .optim import AdamW, lr_at

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "epoch", "objective", "seed", "n_train", "train_loss", "mean_tau", "mean_tau_clean", "mean_tau_noise",
    "eval_nll", "eval_exact_match", "pair_loss", "grad_identity_err",
)


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    objective: str
    seed: int
    n_train: int
    train_loss: float
    mean_tau: float
    mean_tau_clean: float | None = None
    mean_tau_noise: float | None = None
    eval_nll: float | None = None
    eval_exact_match: float | None = None
    pair_loss: float | None = None
    grad_identity_err: float | None = None
    wall_time: float = 0.0


@dataclass
class RunMetrics:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise TrainingError("epoch indices must increase")
        self.records.append(rec)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def write(self, run_dir) -> None:
        """``metrics.csv`` holds only deterministic quantities; wall-clock
        time goes to ``timing.csv``."""
        run_dir = Path(run_dir)
        with open(run_dir / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for r in self.records:
                w.writerow([_fmt(getattr(r, c)) for c in METRIC_COLUMNS])
        with open(run_dir / "timing.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "wall_time_s"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.wall_time:.3f}"])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_metrics(path) -> list[dict]:
    """Rows of a ``metrics.csv`` with numeric fields parsed (blank -> None)."""
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.csv"
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if k == "objective":
                    parsed[k] = v
                elif v == "":
                    parsed[k] = None
                elif k in ("epoch", "seed", "n_train"):
                    parsed[k] = int(v)
                else:
                    parsed[k] = float(v)
            rows.append(parsed)
    return rows


@dataclass
class TrainResult:
    model: TransformerLM
    metrics: RunMetrics
    run_dir: Path
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------- evaluation


def evaluate(model: TransformerLM, eval_corpus: Corpus, train_ids: Sequence[str] | None = None,
             max_tokens: int = 0, batch_size: int = 128, exact_match: bool = True) -> dict[str, float]:
    """Held-out ``nll_per_token`` (mean over examples of ``-log p(y|x)/T0(y)``)
    and greedy-decoding exact-match accuracy."""
    if train_ids is not None:
        overlap = set(train_ids) & set(eval_corpus.ids())
        if overlap:
            raise TrainingError(f"{len(overlap)} evaluation examples also occur in the training set")
    examples = [ex for ex in eval_corpus if ex.response]
    if not examples:
        raise TrainingError("empty evaluation corpus")
    total = 0.0
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            total += float(ce_loss(model, chunk).loss.data) * len(chunk)
    result = {"nll_per_token": total / len(examples)}
    if exact_match:
        if max_tokens <= 0:
            max_tokens = max(model.tokenizer.token_count(ex.response) for ex in examples) + 2
        outputs = generate_text(model, [ex.instruction for ex in examples], max_tokens, batch_size=batch_size)
        hits = sum(1 for ex, (text, stopped) in zip(examples, outputs) if stopped and text == ex.response)
        result["exact_match"] = hits / len(examples)
    return result


# ---------------------------------------------------------------- data prep


@dataclass(frozen=True)
class PreferencePair:
    instruction: str
    chosen: str
    rejected: str


def load_pairs_jsonl(path) -> list[PreferencePair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pairs.append(PreferencePair(rec["instruction"], rec["chosen"], rec["rejected"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise TrainingError(f"{path}:{lineno}: bad preference pair ({exc})") from None
    return pairs


def save_pairs_jsonl(pairs: Sequence[PreferencePair], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(asdict(p), ensure_ascii=False, sort_keys=True) + "\n")
    return path


def _fits(model: TransformerLM, instruction: str, response: str) -> bool:
    if not response:
        return False
    p, r = encode_pair(model.tokenizer, instruction, response)
    return sequence_length(p, r) <= model.config.max_seq


def _build_model(config: RunConfig, train_texts: Sequence[str]) -> TransformerLM:
    if config.init_checkpoint:
        model = load_model(config.init_checkpoint, frozen=False)
        model.name = config.name
        return model
    tok = make_tokenizer(config.tokenizer, train_texts, config.bpe_merges, config.seed)
    mc = ModelConfig(tok.vocab_size, config.dim, config.n_layers, config.n_heads, config.max_seq, config.init_std)
    return init_model(mc, config.seed, tok, name=config.name)


def _reference_ids(cache: ScoreCache, requested: Sequence[str]) -> list[str]:
    if requested:
        return list(requested)
    ids = [m for m in cache.metadata["models"] if not m.startswith(EXTERNAL_PREFIX)]
    if not ids:
        raise TrainingError("score cache lists no reference models")
    return ids


# ---------------------------------------------------------------- training


def train(config: RunConfig, model: TransformerLM | None = None) -> TrainResult:
    """Train per ``config``; writes checkpoints, ``metrics.csv``,
    ``timing.csv``, ``config.ini`` and ``manifest.json`` into ``output_dir``."""
    config.validate()
    run_dir = Path(config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.ini")
    prev_checked = T._state.checked
    T.set_checked(config.checked)
    try:
        return _train(config, run_dir, model)
    finally:
        T.set_checked(prev_checked)


def _train(config: RunConfig, run_dir: Path, model: TransformerLM | None) -> TrainResult:
    is_dpo = config.objective == "dpo"
    if is_dpo:
        pairs = load_pairs_jsonl(config.train_path)
        texts = [t for p in pairs for t in (p.instruction, p.chosen, p.rejected)]
        train_ids: list[str] = []
    else:
        corpus = load_jsonl(config.train_path)
        texts = [t for ex in corpus for t in (ex.instruction, ex.response)]
        train_ids = corpus.ids()
    eval_corpus = load_jsonl(config.eval_path) if config.eval_path else None
    if eval_corpus is not None and train_ids:
        overlap = set(train_ids) & set(eval_corpus.ids())
        if overlap:
            raise TrainingError(f"{len(overlap)} evaluation examples also occur in the training set")

    if model is None:
        model = _build_model(config, texts)
    if model.frozen:
        raise TrainingError("cannot train a frozen model")

    reference = None
    rbar: dict[str, float] = {}
    if is_dpo:
        ref_path = config.dpo_reference or config.init_checkpoint
        reference = load_model(ref_path, frozen=True) if ref_path else model.copy(name="dpo_reference", frozen=True)
        samples: list = [p for p in pairs if _fits(model, p.instruction, p.chosen) and _fits(model, p.instruction, p.rejected)
                         and _fits(reference, p.instruction, p.chosen) and _fits(reference, p.instruction, p.rejected)]
        dropped = len(pairs) - len(samples)
    else:
        samples = [ex for ex in corpus if _fits(model, ex.instruction, ex.response)]
        dropped = len(corpus) - len(samples)
        if config.objective in ("poft", "bi_poft"):
            if not config.score_cache or not Path(config.score_cache).exists():
                raise TrainingError(f"objective {config.objective} needs a score cache (score_cache={config.score_cache!r})")
            cache = ScoreCache.load(config.score_cache)
            refs = _reference_ids(cache, config.ref_models)
            aggs = aggregate_scores(cache, refs, config.strategy, [ex.id for ex in samples], skip_errors=True)
            rbar = {k: v.value for k, v in aggs.items()}
            before = len(samples)
            samples = [ex for ex in samples if ex.id in rbar]
            dropped += before - len(samples)
        if config.objective == "bi_poft":
            bad = [ex.id for ex in samples if ex.label not in ("clean", "noise")]
            if bad:
                raise TrainingError(f"bi_poft needs clean/noise labels; {len(bad)} examples are unlabeled")
    if dropped:
        logger.warning("%s: %d training examples excluded (oversize, empty or unscored)", config.name, dropped)
    if not samples:
        raise TrainingError("no usable training examples")

    n = len(samples)
    extra: dict = {}
    if is_dpo:
        init_losses = _pair_losses(model, reference, samples, config.dpo_beta)
        extra["initial_pair_loss_mean"] = math.fsum(init_losses) / n
        extra["initial_pair_loss_max_abs_dev_from_log2"] = max(abs(v - math.log(2.0)) for v in init_losses)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    opt = AdamW(model.parameters(), (config.beta1, config.beta2), config.eps, config.weight_decay)
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    check_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    metrics = RunMetrics()
    step = 0
    eval_train_ids = train_ids

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        perm = order_rng.permutation(n)
        loss_sum = 0.0
        taus: list[float] = []
        labels: list[str] = []
        for b in range(steps_per_epoch):
            batch = [samples[i] for i in perm[b * config.batch_size:(b + 1) * config.batch_size]]
            if config.objective == "ce":
                out = ce_loss(model, batch)
            elif config.objective == "poft":
                out = poft_loss(model, batch, [rbar[ex.id] for ex in batch], config.strategy)
            elif config.objective == "bi_poft":
                out = bi_poft_loss(model, batch, [rbar[ex.id] for ex in batch], config.strategy)
            else:
                out = dpo_loss(model, reference, [(p.instruction, p.chosen, p.rejected) for p in batch], config.dpo_beta)
            value = out.value
            if not math.isfinite(value):
                _dump_batch(run_dir, epoch, step, batch, out)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}; batch dumped to {run_dir}")
            T.backward(out.loss)
            opt.step(lr_at(step, total_steps, config.lr, config.warmup_fraction, config.shape))
            opt.zero_grad()
            step += 1
            loss_sum += value * len(batch)
            taus.extend(out.per_sample_tau)
            labels.extend(getattr(s, "label", "unknown") for s in batch)

        rec = EpochRecord(epoch, config.objective, config.seed, n, loss_sum / n, float(np.mean(taus)))
        tau_arr, lab_arr = np.array(taus), np.array(labels)
        for lab in ("clean", "noise"):
            sel = lab_arr == lab
            if sel.any():
                setattr(rec, f"mean_tau_{lab}", float(tau_arr[sel].mean()))
        if config.objective in ("poft", "bi_poft"):
            candidates = [ex for ex in samples if ex.label != "noise"] or samples
            probe = candidates[int(check_rng.integers(0, len(candidates)))]
            rec.grad_identity_err = gradient_identity_check(model, probe, rbar[probe.id], config.strategy)
        if is_dpo:
            rec.pair_loss = math.fsum(_pair_losses(model, reference, samples, config.dpo_beta)) / n
        if eval_corpus is not None and (epoch % config.eval_every == 0 or epoch == config.epochs):
            ev = evaluate(model, eval_corpus, eval_train_ids, config.eval_max_tokens)
            rec.eval_nll = ev["nll_per_token"]
            rec.eval_exact_match = ev["exact_match"]
        rec.wall_time = time.perf_counter() - t0
        metrics.append(rec)
        if config.save_checkpoints:
            save_model(model, run_dir / "checkpoints" / f"epoch_{epoch:03d}")
        metrics.write(run_dir)
        logger.info("%s epoch %d: loss=%.4f tau=%.3f eval_nll=%s", config.name, epoch, rec.train_loss,
                    rec.mean_tau, rec.eval_nll)

    save_model(model, run_dir / "final")
    _write_manifest(run_dir, config, model, n, dropped, extra)
    return TrainResult(model, metrics, run_dir, extra)


def _pair_losses(policy, reference, pairs, beta: float) -> list[float]:
    out: list[float] = []
    with T.no_grad():
        for b in range(0, len(pairs), 64):
            chunk = pairs[b:b + 64]
            res = dpo_loss(policy, reference, [(p.instruction, p.chosen, p.rejected) for p in chunk], beta)
            out.extend(float(v) for v in res.per_sample_loss)
    return out


def _dump_batch(run_dir: Path, epoch: int, step: int, batch, out) -> None:
    dump = {
        "epoch": epoch,
        "step": step,
        "loss": repr(out.value),
        "per_sample_loss": [repr(float(x)) for x in out.per_sample_loss],
        "samples": [asdict(s) if isinstance(s, PreferencePair) else s.to_record() for s in batch],
    }
    (run_dir / "diverged_batch.json").write_text(json.dumps(dump, indent=2, ensure_ascii=False))


def _file_sha(path: str) -> str | None:
    import hashlib

    if not path or not Path(path).exists():
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(run_dir: Path, config: RunConfig, model: TransformerLM, n: int, dropped: int,
                    extra: dict) -> None:
    from .. import __version__

    manifest = {
        "poftlab_version": __version__,
        "config": config.to_dict(),
        "inputs": {k: _file_sha(getattr(config, k)) for k in ("train_path", "eval_path", "score_cache")},
        "n_train_used": n,
        "n_train_dropped": dropped,
        "final_model_sha256": model.digest(),
        **extra,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def score_corpus_with_model(model: TransformerLM, corpus: Corpus) -> np.ndarray:
    """``r_theta`` of ``model`` on each example (no graph)."""
    out = []
    with T.no_grad():
        for start in range(0, len(corpus), 128):
            chunk = corpus.examples[start:start + 128]
            r, _ = model_scores(model, chunk)
            out.extend(r.data.tolist())
    return np.array(out)
