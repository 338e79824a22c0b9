"""Training objectives: cross-entropy SFT, PoFT, bi-PoFT and DPO.

PoFT treats each instruction-response pair as a Bradley-Terry comparison in
which the trainable model should out-score a panel of frozen reference models.
A model's score on ``(x, y)`` is its length-normalized log-likelihood
``r = log p(y|x) / T(y)`` in nats per token, ``T`` counted by that model's own
tokenizer. With ``rbar`` the aggregated reference score, the per-sample loss is
``softplus(rbar - r_theta)`` and its gradient is exactly the CE gradient scaled
by ``tau = sigmoid(rbar - r_theta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import TransformerLM, batch_log_probs, encode_pair
from .tensor import Tensor, sigmoid_values

STRATEGIES = ("avg", "min", "max")
LABELS = ("clean", "noise", "unknown")


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class PreferenceScore:
    model_id: str
    logp: float
    token_count: int

    def __post_init__(self):
        if self.token_count < 1:
            raise ObjectiveError("token_count must be at least 1")
        if not math.isfinite(self.logp) or self.logp > 0:
            raise ObjectiveError(f"log-likelihood must be finite and <= 0, got {self.logp}")

    @property
    def r(self) -> float:
        return self.logp / self.token_count


@dataclass(frozen=True)
class RewardAggregate:
    strategy: str
    value: float
    model_ids: tuple[str, ...] = ()


def aggregate(values: Sequence[float], strategy: str = "avg") -> float:
    if strategy not in STRATEGIES:
        raise ObjectiveError(f"unknown strategy {strategy!r}")
    if len(values) == 0:
        raise ObjectiveError("no reference scores to aggregate")
    if strategy == "avg":
        return float(math.fsum(values) / len(values))
    return float(min(values) if strategy == "min" else max(values))


def aggregate_scores(scores: Sequence[PreferenceScore], strategy: str = "avg") -> RewardAggregate:
    value = aggregate([s.r for s in scores], strategy)
    return RewardAggregate(strategy, value, tuple(s.model_id for s in scores))


def reference_value(entry, strategy: str = "avg") -> float:
    """Collapse one sample's reference information to ``rbar``. Accepts a
    plain float (already aggregated), a :class:`RewardAggregate`, or a
    sequence of :class:`PreferenceScore`."""
    if isinstance(entry, RewardAggregate):
        return entry.value
    if isinstance(entry, (int, float, np.floating)):
        return float(entry)
    if entry is None or len(entry) == 0:
        raise ObjectiveError("sample has no reference scores")
    return aggregate_scores(entry, strategy).value


@dataclass
class LossOutput:
    loss: Tensor
    per_sample_tau: list[float]
    per_sample_margin: list[float] = field(default_factory=list)
    per_sample_loss: list[float] = field(default_factory=list)

    @property
    def value(self) -> float:
        return self.loss.item()


# ---------------------------------------------------------------- helpers


def _fields(sample):
    """``(instruction, response, label)`` from an Example-like object or tuple."""
    if hasattr(sample, "instruction"):
        return sample.instruction, sample.response, getattr(sample, "label", "unknown")
    if len(sample) == 2:
        return sample[0], sample[1], "unknown"
    return sample[0], sample[1], sample[2]


def model_scores(model: TransformerLM, batch) -> tuple[Tensor, np.ndarray]:
    """``r_theta`` per sample as a graph-connected ``[batch]`` tensor, and the
    target-model token counts ``T0`` (response + eos)."""
    if model.tokenizer is None:
        raise ObjectiveError("model has no tokenizer")
    pairs = []
    for sample in batch:
        instruction, response, _ = _fields(sample)
        if not response:
            raise ObjectiveError("empty response")
        pairs.append(encode_pair(model.tokenizer, instruction, response))
    logp, counts = batch_log_probs(model, pairs)
    return logp / counts.astype(np.float64), counts


def bt_probability(lambda_i: float, lambda_j: float) -> float:
    """Bradley-Terry probability that item i beats item j."""
    if not (lambda_i > 0 and lambda_j > 0):
        raise ObjectiveError("Bradley-Terry strengths must be positive")
    return lambda_i / (lambda_i + lambda_j)


# ---------------------------------------------------------------- losses


def ce_loss(model: TransformerLM, batch) -> LossOutput:
    """Mean over samples of ``-log p(y|x) / T0(y)``."""
    if len(batch) == 0:
        raise ObjectiveError("empty batch")
    r_theta, _ = model_scores(model, batch)
    per = -r_theta
    n = len(batch)
    return LossOutput(per.mean(), [1.0] * n, [float("nan")] * n, per.data.tolist())


def _preference_loss(model, batch, rbar: np.ndarray, signs: np.ndarray) -> LossOutput:
    r_theta, _ = model_scores(model, batch)
    # sign +1: model should beat the references; -1: references should win
    per = T.softplus((rbar - r_theta) * signs)
    margin = r_theta.data - rbar
    tau = sigmoid_values(rbar - r_theta.data)
    return LossOutput(per.mean(), tau.tolist(), margin.tolist(), per.data.tolist())


def _reference_array(batch, ref_scores, strategy: str) -> np.ndarray:
    if ref_scores is None or len(ref_scores) != len(batch):
        raise ObjectiveError("need one reference-score entry per sample")
    return np.array([reference_value(e, strategy) for e in ref_scores], dtype=np.float64)


def poft_loss(model: TransformerLM, batch, ref_scores, strategy: str = "avg") -> LossOutput:
    """Mean of ``-log sigmoid(r_theta - rbar)`` = ``softplus(rbar - r_theta)``."""
    if len(batch) == 0:
        raise ObjectiveError("empty batch")
    rbar = _reference_array(batch, ref_scores, strategy)
    return _preference_loss(model, batch, rbar, np.ones(len(batch)))


def bi_poft_loss(model: TransformerLM, batch, ref_scores, strategy: str = "avg") -> LossOutput:
    """PoFT on clean samples; on noise samples the preference flips so the
    model is pushed below the references."""
    if len(batch) == 0:
        raise ObjectiveError("empty batch")
    signs = []
    for sample in batch:
        label = _fields(sample)[2]
        if label == "clean":
            signs.append(1.0)
        elif label == "noise":
            signs.append(-1.0)
        else:
            raise ObjectiveError(f"bi-PoFT needs clean/noise labels, got {label!r}")
    rbar = _reference_array(batch, ref_scores, strategy)
    return _preference_loss(model, batch, rbar, np.array(signs))


def dpo_loss(policy: TransformerLM, reference: TransformerLM, batch, beta: float = 0.1) -> LossOutput:
    """``-log sigmoid(beta * [(pol_c - ref_c) - (pol_r - ref_r)])`` averaged
    over ``(prompt, chosen, rejected)`` triples. ``per_sample_tau`` holds the
    DPO gradient weight ``sigmoid(-margin)``."""
    if beta <= 0:
        raise ObjectiveError("beta must be positive")
    if len(batch) == 0:
        raise ObjectiveError("empty batch")
    for prompt, chosen, rejected in batch:
        if not chosen or not rejected:
            raise ObjectiveError("empty chosen/rejected response")
        if chosen == rejected:
            raise ObjectiveError("chosen and rejected responses are identical")

    def logps(model: TransformerLM):
        pairs = [encode_pair(model.tokenizer, p, y) for p, c, r in batch for y in (c, r)]
        lp, _ = batch_log_probs(model, pairs)
        return lp

    n = len(batch)
    pol = logps(policy)
    with T.no_grad():
        ref = logps(reference).data
    ref_t = Tensor(ref)
    chosen_idx = np.arange(0, 2 * n, 2)
    rejected_idx = chosen_idx + 1
    ratio = pol - ref_t
    margin = (ratio[chosen_idx] - ratio[rejected_idx]) * beta
    per = T.softplus(-margin)
    return LossOutput(per.mean(), sigmoid_values(-margin.data).tolist(), margin.data.tolist(), per.data.tolist())


# ---------------------------------------------------------------- coefficient


def poft_coefficient(r_theta: float, ref_scores, strategy: str = "avg") -> float:
    """``tau = exp(rbar) / (exp(rbar) + exp(r_theta))`` evaluated as
    ``sigmoid(rbar - r_theta)``."""
    rbar = reference_value(ref_scores, strategy)
    return float(sigmoid_values(rbar - r_theta))


def poft_coefficient_product_form(logp_theta: float, t0: int, ref_logps: Sequence[float],
                                  ref_counts: Sequence[int]) -> float:
    """The same coefficient written with probabilities: the geometric mean over
    references of ``p_j^(1/T_j)`` against ``p_theta^(1/T0)``.

    Each factor is formed as ``p_j^(1/(M*T_j))`` so the product stays in range
    for per-token log-likelihoods down to several hundred nats."""
    m = len(ref_logps)
    if m == 0 or m != len(ref_counts):
        raise ObjectiveError("need matching reference log-likelihoods and counts")
    ref_part = 1.0
    for lp, t in zip(ref_logps, ref_counts):
        ref_part *= math.exp(lp) ** (1.0 / (m * t)) if lp > -700 else math.exp(lp / (m * t))
    own = math.exp(logp_theta) ** (1.0 / t0) if logp_theta > -700 else math.exp(logp_theta / t0)
    return ref_part / (ref_part + own)


def gradient_identity_check(model: TransformerLM, sample, ref_scores, strategy: str = "avg",
                            elementwise: bool = False) -> float:
    """Relative gap between the PoFT gradient and ``tau`` times the CE
    gradient, each from its own backward pass; the max over parameter tensors
    of ``|g_poft - tau*g_ce| / |tau*g_ce|`` (Euclidean norms).

    With ``elementwise`` the gap is instead the max over single coordinates of
    ``|a - b| / max(1e-12, |a| + |b|)``. That form is ill-conditioned for
    coordinates many orders of magnitude below the rest of their tensor, where
    summation round-off alone can exceed 1e-10. Leaves gradients cleared."""
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ObjectiveError("model has no trainable parameters")

    model.zero_grad()
    out = poft_loss(model, [sample], [ref_scores], strategy)
    T.backward(out.loss)
    g_poft = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    tau = out.per_sample_tau[0]

    model.zero_grad()
    T.backward(ce_loss(model, [sample]).loss)
    g_ce = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    model.zero_grad()

    worst = 0.0
    for gp, gc in zip(g_poft, g_ce):
        scaled = tau * gc
        if elementwise:
            err = np.abs(gp - scaled) / np.maximum(1e-12, np.abs(gp) + np.abs(scaled))
            worst = max(worst, float(err.max(initial=0.0)))
            continue
        diff, ref = float(np.linalg.norm(gp - scaled)), float(np.linalg.norm(scaled))
        if ref > 0.0:
            worst = max(worst, diff / ref)
        elif diff > 0.0:
            worst = max(worst, 1.0)
    return worst
