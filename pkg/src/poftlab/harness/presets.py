"""Experiment presets: matched CE / PoFT arms on shared data and schedules.

Every preset writes into its report directory:

* ``data/`` with the clean train split, the held-out eval split, the noisy
  blend, the reference score cache and any derived corpora;
* ``histograms.csv`` (aggregate reference scores of clean vs noise examples)
  and ``soft_filtering.json`` (how far noise falls below clean);
* ``runs/<arm>_s<seed>/`` for each training run (``metrics.csv`` etc.);
* ``arms/<arm>.csv`` concatenating an arm's per-seed metrics;
* ``summary.csv`` (``emit_report`` over all runs) and ``summary_table.csv``
  (final-epoch numbers per arm, averaged over seeds);
* ``experiment.json`` with the resolved settings.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import shutil
import statistics
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from ..data import (DEFAULT_KEEP_FRACTIONS, Corpus, blend, filter_by_percentile, generate_synthetic_corpus,
                    make_noise, regenerate_responses, save_jsonl, split_corpus, write_filter_audit)
from ..model import TransformerLM, load_model, save_model
from ..scores import aggregate_scores, score_dataset, score_histogram, tail_mass, write_histogram_csv
from .config import RunConfig, apply_overrides
from .report import emit_report
from .train import PreferencePair, read_metrics, save_pairs_jsonl, train

logger = logging.getLogger(__name__)

ASSETS = Path(__file__).resolve().parent.parent / "assets"


class PresetError(ValueError):
    pass


# ---------------------------------------------------------------- reference models


@dataclass(frozen=True)
class AssetRecipe:
    """How the shipped models are trained, all with CE on clean synthetic data.

    The three reference models share one corpus and differ in tokenizer and
    seed. The base model that the presets fine-tune is trained on a disjoint
    corpus for fewer epochs, so it is a competent but weaker starting point.
    Each teacher starts from a reference model and specializes on a single
    task: ``(name, task, init_reference, corpus_size, epochs, lr, seed)``.
    """

    task_mix: str = "copy,reverse,addition,sort"
    eval_size: int = 200
    lr: float = 3e-3
    batch_size: int = 64
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq: int = 48
    ref_corpus_size: int = 20000
    ref_corpus_seed: int = 1000
    ref_epochs: int = 12
    references: tuple = (("ref_char", "char", 0, 11), ("ref_bpe64", "bpe", 64, 12), ("ref_bpe160", "bpe", 160, 13))
    base_corpus_size: int = 20000
    base_corpus_seed: int = 2000
    base_epochs: int = 6
    base_seed: int = 21
    teachers: tuple = (("teacher_copy", "copy", "ref_char", 10000, 10, 1e-3, 14),)
    teacher_corpus_seed: int = 3000

    def reference_corpus(self) -> Corpus:
        return generate_synthetic_corpus(self.task_mix, self.ref_corpus_size + self.eval_size, self.ref_corpus_seed)

    def base_corpus(self, exclude: Sequence[str] = ()) -> Corpus:
        return generate_synthetic_corpus(self.task_mix, self.base_corpus_size + self.eval_size,
                                         self.base_corpus_seed, exclude=exclude)

    def teacher_corpus(self, task: str, size: int, exclude: Sequence[str] = ()) -> Corpus:
        return generate_synthetic_corpus(task, size + self.eval_size, self.teacher_corpus_seed, exclude=exclude)

    def used_ids(self) -> set[str]:
        ref_ids = self.reference_corpus().ids()
        used = set(ref_ids) | set(self.base_corpus(ref_ids).ids())
        for _, task, _, size, *_ in self.teachers:
            used |= set(self.teacher_corpus(task, size, sorted(used)).ids())
        return used

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["references"] = [list(m) for m in self.references]
        d["teachers"] = [list(m) for m in self.teachers]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "AssetRecipe":
        d = dict(d)
        d["references"] = tuple(tuple(m) for m in d.get("references", ()))
        d["teachers"] = tuple(tuple(m) for m in d.get("teachers", ()))
        return cls(**d)


def _pretrain(recipe: AssetRecipe, corpus: Corpus, name: str, tokenizer: str, merges: int, seed: int,
              epochs: int, work: Path, out: Path, init: Path | None = None, lr: float | None = None) -> TransformerLM:
    train_c, eval_c = split_corpus(corpus, recipe.eval_size, seed)
    save_jsonl(train_c, work / f"{name}_train.jsonl")
    save_jsonl(eval_c, work / f"{name}_eval.jsonl")
    cfg = RunConfig(name=name, objective="ce", seed=seed, epochs=epochs, batch_size=recipe.batch_size,
                    output_dir=str(work / name), save_checkpoints=False, dim=recipe.dim,
                    n_layers=recipe.n_layers, n_heads=recipe.n_heads, max_seq=recipe.max_seq,
                    tokenizer=tokenizer, bpe_merges=merges, train_path=str(work / f"{name}_train.jsonl"),
                    eval_path=str(work / f"{name}_eval.jsonl"), lr=recipe.lr if lr is None else lr,
                    init_checkpoint=str(init) if init else "")
    res = train(cfg)
    res.model.freeze()
    save_model(res.model, out)
    shutil.copy(work / name / "metrics.csv", out / "training_metrics.csv")
    return res.model


def build_assets(out_dir=None, recipe: AssetRecipe | None = None, keep_work: bool = False) -> Path:
    """Train the reference models (``<out>/references/<name>``), the base
    model (``<out>/base``) and the teachers (``<out>/teachers/<name>``);
    deterministic given the recipe."""
    recipe = recipe or AssetRecipe()
    out_dir = Path(out_dir) if out_dir else ASSETS
    work = out_dir / "_work"
    ref_corpus = recipe.reference_corpus()
    for name, tokenizer, merges, seed in recipe.references:
        logger.info("pre-training reference %s", name)
        _pretrain(recipe, ref_corpus, name, tokenizer, merges, seed, recipe.ref_epochs, work,
                  out_dir / "references" / name)
    logger.info("pre-training base model")
    base_corpus = recipe.base_corpus(ref_corpus.ids())
    _pretrain(recipe, base_corpus, "base", "char", 0, recipe.base_seed, recipe.base_epochs, work, out_dir / "base")
    used = set(ref_corpus.ids()) | set(base_corpus.ids())
    for name, task, init_ref, size, epochs, lr, seed in recipe.teachers:
        logger.info("specializing teacher %s from %s", name, init_ref)
        corpus = recipe.teacher_corpus(task, size, sorted(used))
        used |= set(corpus.ids())
        _pretrain(recipe, corpus, name, "char", 0, seed, epochs, work, out_dir / "teachers" / name,
                  init=out_dir / "references" / init_ref, lr=lr)
    (out_dir / "recipe.json").write_text(json.dumps(recipe.to_dict(), indent=2, sort_keys=True) + "\n")
    if not keep_work:
        shutil.rmtree(work)
    return out_dir


def reference_dirs(directory=None) -> list[Path]:
    directory = Path(directory) if directory else ASSETS
    dirs = sorted(p.parent for p in (directory / "references").glob("*/manifest.json"))
    if not dirs:
        raise PresetError(f"no reference models under {directory}; run `poftlab build-assets`")
    return dirs


def load_reference_models(directory=None, names: Sequence[str] = ()) -> list[TransformerLM]:
    models = [load_model(d, frozen=True) for d in reference_dirs(directory)]
    if names:
        by_name = {m.name: m for m in models}
        missing = [n for n in names if n not in by_name]
        if missing:
            raise PresetError(f"unknown reference models {missing}; have {sorted(by_name)}")
        models = [by_name[n] for n in names]
    return models


def base_model_dir(directory=None) -> Path:
    path = (Path(directory) if directory else ASSETS) / "base"
    if not (path / "manifest.json").exists():
        raise PresetError(f"no base model under {path.parent}; run `poftlab build-assets`")
    return path


def teacher_dir(name: str, directory=None) -> Path:
    path = (Path(directory) if directory else ASSETS) / "teachers" / name
    if not (path / "manifest.json").exists():
        raise PresetError(f"no teacher {name!r} under {path.parent}; run `poftlab build-assets`")
    return path


def pretraining_ids(directory=None) -> set[str]:
    """Ids of every corpus used to pre-train the shipped models (empty if the
    directory has no recipe); experiment corpora avoid them."""
    recipe_path = (Path(directory) if directory else ASSETS) / "recipe.json"
    if not recipe_path.exists():
        return set()
    return AssetRecipe.from_dict(json.loads(recipe_path.read_text())).used_ids()


# ---------------------------------------------------------------- settings


@dataclass
class PresetSettings:
    seeds: tuple = (0, 1, 2)
    epochs: int = 5
    clean_size: int = 1000
    eval_size: int = 200
    task_mix: str = "copy,reverse,addition,sort"
    data_seed: int = 100
    noise_fraction: float = 0.2
    mismatch_fraction: float = 1.0
    strategy: str = "avg"
    keep_fractions: tuple = DEFAULT_KEEP_FRACTIONS
    assets: str = ""
    init_from_base: bool = True
    ref_models: tuple = ()
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq: int = 48
    lr: float = 3e-4
    batch_size: int = 32
    save_checkpoints: bool = True
    eval_max_tokens: int = 0
    first_stage: str = "poft"
    n_pairs: int = 400
    dpo_epochs: int = 2
    dpo_lr: float = 1e-4
    dpo_beta: float = 0.1
    teacher: str = ""
    teacher_max_tokens: int = 24


_SETTING_TYPES = {f.name: f.type for f in fields(PresetSettings)}


def _coerce_setting(name: str, raw: Any) -> Any:
    kind = _SETTING_TYPES[name]
    if not isinstance(raw, str):
        return tuple(raw) if kind == "tuple" else raw
    raw = raw.strip()
    if kind == "tuple":
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if name == "seeds":
            return tuple(int(p) for p in parts)
        if name == "keep_fractions":
            return tuple(float(p) for p in parts)
        return tuple(parts)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        return raw.lower() in ("1", "true", "yes", "on")
    return raw


def split_overrides(overrides: Mapping[str, Any] | None) -> tuple[dict, dict]:
    """Separate preset-setting overrides from per-run ``RunConfig`` ones."""
    preset, run = {}, {}
    for key, value in (overrides or {}).items():
        if key in _SETTING_TYPES:
            preset[key] = _coerce_setting(key, value)
        else:
            run[key] = value
    return preset, run


# ---------------------------------------------------------------- data


@dataclass
class PreparedData:
    data_dir: Path
    train_clean: Corpus
    eval: Corpus
    blend: Corpus
    score_cache: Path
    ref_ids: list[str]
    aggregates: dict
    references: list[TransformerLM] = field(repr=False, default_factory=list)
    base_dir: Path | None = None

    @property
    def blend_path(self) -> Path:
        return self.data_dir / "train_blend.jsonl"

    @property
    def clean_path(self) -> Path:
        return self.data_dir / "train_clean.jsonl"

    @property
    def eval_path(self) -> Path:
        return self.data_dir / "eval.jsonl"


def prepare_data(settings: PresetSettings, out_dir) -> PreparedData:
    data_dir = Path(out_dir) / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    refs = load_reference_models(settings.assets or None, settings.ref_models)
    exclude = pretraining_ids(settings.assets or None)
    full = generate_synthetic_corpus(settings.task_mix, settings.clean_size + settings.eval_size,
                                     settings.data_seed, exclude=exclude)
    train_clean, eval_c = split_corpus(full, settings.eval_size, settings.data_seed)
    n_noise = int(round(settings.noise_fraction * len(train_clean)))
    if n_noise:
        noise = make_noise(train_clean, n_noise, settings.mismatch_fraction, seed=settings.data_seed + 1)
        mixed = blend(train_clean, noise, settings.data_seed + 2)
    else:
        mixed = Corpus(list(train_clean), {"generator": "blend", "clean": train_clean.provenance, "noise": None})
    save_jsonl(train_clean, data_dir / "train_clean.jsonl")
    save_jsonl(eval_c, data_dir / "eval.jsonl")
    save_jsonl(mixed, data_dir / "train_blend.jsonl")

    cache_path = data_dir / "scores.jsonl"
    if cache_path.exists():
        cache_path.unlink()
    cache = score_dataset(refs, mixed, path=cache_path)
    ref_ids = [m.name for m in refs]
    aggs = aggregate_scores(cache, ref_ids, settings.strategy, mixed.ids(), skip_errors=True)
    base = base_model_dir(settings.assets or None) if settings.init_from_base else None
    prepared = PreparedData(data_dir, train_clean, eval_c, mixed, cache_path, ref_ids, aggs, refs, base)
    _write_score_diagnostics(prepared, cache, Path(out_dir))
    return prepared


def _write_score_diagnostics(prep: PreparedData, cache, out_dir: Path) -> None:
    clean = [prep.aggregates[ex.id].value for ex in prep.blend if ex.label == "clean" and ex.id in prep.aggregates]
    noise = [prep.aggregates[ex.id].value for ex in prep.blend if ex.label == "noise" and ex.id in prep.aggregates]
    series = {"clean": clean}
    if noise:
        series["noise"] = noise
    series["blend"] = clean + noise
    for rid in prep.ref_ids:
        single = aggregate_scores(cache, [rid], "avg", prep.blend.ids(), skip_errors=True)
        series[f"{rid}:clean"] = [single[ex.id].value for ex in prep.blend if ex.label == "clean" and ex.id in single]
        if noise:
            series[f"{rid}:noise"] = [single[ex.id].value for ex in prep.blend
                                      if ex.label == "noise" and ex.id in single]
    everything = [v for vals in series.values() for v in vals]
    lo, hi = min(everything), max(everything)
    if lo == hi:
        hi = lo + 1.0
    write_histogram_csv(out_dir / "histograms.csv",
                        {k: score_histogram(v, 30, (lo, hi)) for k, v in series.items() if v})
    p5 = float(np.percentile(clean, 5))
    median = float(np.median(clean))
    summary = {
        "strategy": prep.aggregates[next(iter(prep.aggregates))].strategy if prep.aggregates else None,
        "reference_models": prep.ref_ids,
        "n_clean": len(clean),
        "n_noise": len(noise),
        "clean_median": median,
        "clean_p5": p5,
        "noise_below_clean_median": float(np.mean(np.array(noise) < median)) if noise else None,
        "tail_mass_clean_only": tail_mass(clean, p5),
        "tail_mass_blend": tail_mass(clean + noise, p5),
    }
    (out_dir / "soft_filtering.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- arms


@dataclass(frozen=True)
class Arm:
    name: str
    objective: str
    train_path: str
    changes: tuple = ()

    def config(self, settings: PresetSettings, prep: PreparedData, seed: int, out_dir: Path,
               run_overrides: Mapping[str, Any]) -> RunConfig:
        cfg = RunConfig(
            name=f"{self.name}_s{seed}", objective=self.objective, strategy=settings.strategy, seed=seed,
            epochs=settings.epochs, batch_size=settings.batch_size, output_dir=str(out_dir / "runs" / f"{self.name}_s{seed}"),
            save_checkpoints=settings.save_checkpoints, eval_max_tokens=settings.eval_max_tokens,
            dim=settings.dim, n_layers=settings.n_layers, n_heads=settings.n_heads, max_seq=settings.max_seq,
            train_path=self.train_path, eval_path=str(prep.eval_path), score_cache=str(prep.score_cache),
            ref_models=tuple(prep.ref_ids), lr=settings.lr, dpo_beta=settings.dpo_beta,
            init_checkpoint=str(prep.base_dir) if prep.base_dir else "",
        )
        cfg = apply_overrides(cfg, run_overrides)
        return cfg.replace(**dict(self.changes))


def _run_arms(arms: Sequence[Arm], settings: PresetSettings, prep: PreparedData, out_dir: Path,
              run_overrides: Mapping[str, Any]) -> dict[str, list[Path]]:
    runs: dict[str, list[Path]] = {}
    for arm in arms:
        for seed in settings.seeds:
            cfg = arm.config(settings, prep, seed, out_dir, run_overrides)
            logger.info("training %s", cfg.name)
            train(cfg)
            runs.setdefault(arm.name, []).append(Path(cfg.output_dir))
    return runs


def _noise_arms(prep: PreparedData, objectives=("ce", "poft")) -> list[Arm]:
    return [Arm(obj, obj, str(prep.blend_path)) for obj in objectives]


def preset_noise_robustness(settings, prep, out_dir, run_overrides):
    return _run_arms(_noise_arms(prep), settings, prep, out_dir, run_overrides)


def preset_bi_poft_noise(settings, prep, out_dir, run_overrides):
    return _run_arms(_noise_arms(prep, ("ce", "poft", "bi_poft")), settings, prep, out_dir, run_overrides)


def preset_strategy_ablation(settings, prep, out_dir, run_overrides):
    arms = [Arm("ce", "ce", str(prep.blend_path))]
    arms += [Arm(f"poft_{s}", "poft", str(prep.blend_path), (("strategy", s),)) for s in ("avg", "min", "max")]
    return _run_arms(arms, settings, prep, out_dir, run_overrides)


def preset_reference_choice(settings, prep, out_dir, run_overrides):
    arms = [Arm("poft_all", "poft", str(prep.blend_path))]
    arms += [Arm(f"poft_{rid}", "poft", str(prep.blend_path), (("ref_models", (rid,)),)) for rid in prep.ref_ids]
    return _run_arms(arms, settings, prep, out_dir, run_overrides)


def _keep_tag(keep: float) -> str:
    return f"keep{int(round(keep * 100)):03d}"


def preset_filtering_sweep(settings, prep, out_dir, run_overrides):
    arms = []
    for keep in settings.keep_fractions:
        kept = filter_by_percentile(prep.blend, prep.aggregates, keep)
        tag = _keep_tag(keep)
        write_filter_audit(prep.blend, prep.aggregates, kept, prep.data_dir / f"filter_audit_{tag}.csv")
        if len(kept) == len(prep.blend):
            # keeping everything trains on the unfiltered blend itself, in its own order
            path = prep.blend_path
        else:
            path = save_jsonl(kept, prep.data_dir / f"train_{tag}.jsonl")
        arms.append(Arm(f"ce_{tag}", "ce", str(path)))
        arms.append(Arm(f"poft_{tag}", "poft", str(path)))
    return _run_arms(arms, settings, prep, out_dir, run_overrides)


def preset_distillation_compare(settings, prep, out_dir, run_overrides):
    teacher_name = settings.teacher or prep.ref_ids[0]
    teacher = next((m for m in prep.references if m.name == teacher_name), None)
    if teacher is None:
        raise PresetError(f"teacher {teacher_name!r} is not one of the reference models {prep.ref_ids}")
    distilled = regenerate_responses(teacher, prep.train_clean, 0.0, settings.teacher_max_tokens, settings.data_seed)
    path = save_jsonl(distilled, prep.data_dir / "train_distilled.jsonl")
    arms = [Arm("ce", "ce", str(prep.blend_path)), Arm("poft", "poft", str(prep.blend_path)),
            Arm("ce_distilled", "ce", str(path))]
    return _run_arms(arms, settings, prep, out_dir, run_overrides)


def make_preference_pairs(clean: Corpus, n_pairs: int, mismatch_fraction: float, seed: int) -> list[PreferencePair]:
    """chosen = clean response, rejected = a noise-corrupted counterpart of the
    same instruction (built by ``make_noise``)."""
    n_pairs = min(n_pairs, len(clean))
    noise = make_noise(clean, n_pairs, mismatch_fraction, seed=seed)
    by_instruction = {ex.instruction: ex.response for ex in clean}
    pairs = []
    for ex in noise:
        chosen = by_instruction[ex.instruction]
        if ex.response != chosen:
            pairs.append(PreferencePair(ex.instruction, chosen, ex.response))
    return pairs


def preset_two_step_dpo(settings, prep, out_dir, run_overrides):
    if settings.first_stage not in ("ce", "poft"):
        raise PresetError("first_stage must be ce or poft")
    first = Arm(settings.first_stage, settings.first_stage, str(prep.blend_path))
    runs = _run_arms([first], settings, prep, out_dir, run_overrides)
    pairs = make_preference_pairs(prep.train_clean, settings.n_pairs, settings.mismatch_fraction,
                                  settings.data_seed + 3)
    pairs_path = save_pairs_jsonl(pairs, prep.data_dir / "preference_pairs.jsonl")
    name = f"{settings.first_stage}_dpo"
    for seed, stage1 in zip(settings.seeds, runs[first.name]):
        init = str(stage1 / "final")
        arm = Arm(name, "dpo", str(pairs_path), (
            ("init_checkpoint", init), ("dpo_reference", init), ("epochs", settings.dpo_epochs),
            ("lr", settings.dpo_lr), ("shape", "linear"),
        ))
        cfg = arm.config(settings, prep, seed, out_dir, run_overrides)
        train(cfg)
        runs.setdefault(name, []).append(Path(cfg.output_dir))
    return runs


PRESETS: dict[str, tuple[Callable, dict]] = {
    "noise_robustness": (preset_noise_robustness, {"epochs": 10, "noise_fraction": 0.3}),
    "filtering_sweep": (preset_filtering_sweep, {}),
    "strategy_ablation": (preset_strategy_ablation, {}),
    "reference_choice": (preset_reference_choice, {}),
    "bi_poft_noise": (preset_bi_poft_noise, {"epochs": 10, "noise_fraction": 0.3}),
    "distillation_compare": (preset_distillation_compare, {}),
    "two_step_dpo": (preset_two_step_dpo, {}),
}


def preset_settings(name: str, overrides: Mapping[str, Any] | None = None) -> tuple[PresetSettings, dict]:
    if name not in PRESETS:
        raise PresetError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    preset_over, run_over = split_overrides(overrides)
    settings = dataclasses.replace(PresetSettings(), **PRESETS[name][1])
    settings = dataclasses.replace(settings, **preset_over)
    _check_settings(settings)
    # validate run-level overrides early
    apply_overrides(RunConfig(), run_over)
    return settings, run_over


def _check_settings(s: PresetSettings) -> None:
    if not s.seeds:
        raise PresetError("need at least one seed")
    if len(set(s.seeds)) != len(s.seeds):
        raise PresetError("seeds must be distinct")
    if s.epochs < 1 or s.dpo_epochs < 1:
        raise PresetError("epochs must be at least 1")
    if not 0.0 <= s.noise_fraction <= 1.0:
        raise PresetError("noise_fraction must lie in [0, 1]")
    if s.clean_size < 2 or s.eval_size < 1:
        raise PresetError("clean_size must be >= 2 and eval_size >= 1")
    if any(not 0.0 < k <= 1.0 for k in s.keep_fractions):
        raise PresetError("keep fractions must lie in (0, 1]")
    if s.strategy not in ("avg", "min", "max"):
        raise PresetError("strategy must be avg, min or max")


def run_experiment(preset_name: str, out_dir, overrides: Mapping[str, Any] | None = None) -> Path:
    """Run a preset end to end and return its report directory."""
    settings, run_over = preset_settings(preset_name, overrides)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prep = prepare_data(settings, out_dir)
    runs = PRESETS[preset_name][0](settings, prep, out_dir, run_over)
    write_arm_tables(runs, out_dir)
    all_dirs = [d for dirs in runs.values() for d in dirs]
    emit_report(all_dirs, out_dir / "summary.csv")
    settings_d = dataclasses.asdict(settings)
    record = {
        "preset": preset_name,
        "settings": {k: list(v) if isinstance(v, tuple) else v for k, v in settings_d.items()},
        "run_overrides": {k: str(v) for k, v in run_over.items()},
        "reference_models": prep.ref_ids,
        "arms": {arm: [str(d.relative_to(out_dir)) for d in dirs] for arm, dirs in runs.items()},
    }
    (out_dir / "experiment.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return out_dir


TABLE_COLUMNS = ("arm", "n_seeds", "final_eval_nll_mean", "final_eval_nll_std", "final_exact_match_mean",
                 "window_eval_nll_mean", "final_mean_tau_clean", "final_mean_tau_noise", "final_pair_loss_mean")


def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    return math.fsum(values) / len(values) if values else None


def write_arm_tables(runs: Mapping[str, Sequence[Path]], out_dir: Path) -> None:
    arms_dir = out_dir / "arms"
    arms_dir.mkdir(parents=True, exist_ok=True)
    table = []
    for arm, dirs in runs.items():
        per_seed = [read_metrics(d) for d in dirs]
        with open(arms_dir / f"{arm}.csv", "w", newline="") as out:
            header = None
            for d in dirs:
                with open(d / "metrics.csv", newline="") as fh:
                    lines = fh.read().splitlines()
                if header is None:
                    header = lines[0]
                    out.write(header + "\n")
                out.writelines(line + "\n" for line in lines[1:])
        finals = [rows[-1] for rows in per_seed]
        nll = [r["eval_nll"] for r in finals if r["eval_nll"] is not None]
        window = [_mean([r["eval_nll"] for r in rows if r["epoch"] >= 2] or [rows[0]["eval_nll"]]) for rows in per_seed]
        table.append([
            arm, len(dirs), _mean(nll), statistics.stdev(nll) if len(nll) >= 2 else None,
            _mean(r["eval_exact_match"] for r in finals), _mean(window),
            _mean(r["mean_tau_clean"] for r in finals), _mean(r["mean_tau_noise"] for r in finals),
            _mean(r["pair_loss"] for r in finals),
        ])
    with open(out_dir / "summary_table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for row in table:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in row])
