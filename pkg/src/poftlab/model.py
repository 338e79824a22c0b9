"""Tiny pre-norm decoder-only transformer over the tensor core.

Sequences are laid out as ``[bos] + prompt + response + [eos]``; the model
reads everything but the final ``eos`` and is scored on the response tokens
plus the ``eos`` terminator.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import arrays_digest, load_arrays, save_arrays
from .tensor import Tensor
from .tokenizers import Tokenizer
from .tokenizers import load as load_tokenizer

SEPARATOR = "\n"
MANIFEST_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    dim: int = 128
    n_layers: int = 2
    n_heads: int = 4
    max_seq: int = 128
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("vocab_size", "dim", "n_layers", "n_heads", "max_seq"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        if self.init_std <= 0:
            raise ModelError("init_std must be positive")
        if self.dim % self.n_heads:
            raise ModelError("dim must be divisible by n_heads")


class TransformerLM:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor], tokenizer: Tokenizer | None = None,
                 name: str = "model", frozen: bool = False):
        self.config = config
        self.params = params
        self.tokenizer = tokenizer
        self.name = name
        self.frozen = False
        if tokenizer is not None and tokenizer.vocab_size != config.vocab_size:
            raise ModelError(
                f"tokenizer has {tokenizer.vocab_size} ids but config.vocab_size={config.vocab_size}"
            )
        if frozen:
            self.freeze()

    def __repr__(self) -> str:
        c = self.config
        return f"TransformerLM({self.name!r}, dim={c.dim}, layers={c.n_layers}, vocab={c.vocab_size}, frozen={self.frozen})"

    def freeze(self) -> "TransformerLM":
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def digest(self) -> str:
        return arrays_digest(self.state_arrays())

    def copy(self, name: str | None = None, frozen: bool | None = None) -> "TransformerLM":
        params = {k: Tensor(p.data.copy(), requires_grad=p.requires_grad) for k, p in self.params.items()}
        return TransformerLM(self.config, params, self.tokenizer, name or self.name,
                             self.frozen if frozen is None else frozen)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def init_model(config: ModelConfig, seed: int, tokenizer: Tokenizer | None = None, name: str = "model") -> TransformerLM:
    """Weight matrices and embeddings ~ N(0, init_std); layer-norm gains are 1,
    biases 0, and the output projection starts at exactly 0."""
    rng = np.random.default_rng(seed)
    d, v = config.dim, config.vocab_size

    def normal(*shape):
        return Tensor(rng.normal(0.0, config.init_std, size=shape), requires_grad=True)

    def const(value, *shape):
        return Tensor(np.full(shape, float(value)), requires_grad=True)

    params: dict[str, Tensor] = {
        "tok_emb": normal(v, d),
        "pos_emb": normal(config.max_seq, d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        params[p + "ln1.g"] = const(1, d)
        params[p + "ln1.b"] = const(0, d)
        for w in ("wq", "wk", "wv", "wo"):
            params[p + "attn." + w] = normal(d, d)
        params[p + "ln2.g"] = const(1, d)
        params[p + "ln2.b"] = const(0, d)
        params[p + "mlp.w1"] = normal(d, 4 * d)
        params[p + "mlp.b1"] = const(0, 4 * d)
        params[p + "mlp.w2"] = normal(4 * d, d)
        params[p + "mlp.b2"] = const(0, d)
    params["ln_f.g"] = const(1, d)
    params["ln_f.b"] = const(0, d)
    params["head"] = const(0, d, v)
    return TransformerLM(config, params, tokenizer, name)


def _attention(x: Tensor, P: dict, prefix: str, n_heads: int, mask: np.ndarray) -> Tensor:
    b, L, d = x.shape
    hd = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(b, L, n_heads, hd).transpose(0, 2, 1, 3)

    q = heads(x @ P[prefix + "wq"])
    k = heads(x @ P[prefix + "wk"])
    v = heads(x @ P[prefix + "wv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
    att = T.masked_softmax(scores, mask)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(b, L, d)
    return out @ P[prefix + "wo"]


def forward_batch(model: TransformerLM, ids: np.ndarray) -> Tensor:
    """Logits of shape ``[batch, len, vocab]`` for right-padded ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ModelError("forward_batch expects a [batch, len] id array")
    cfg = model.config
    b, L = ids.shape
    if L > cfg.max_seq:
        raise ModelError(f"sequence length {L} exceeds max_seq={cfg.max_seq}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ModelError("token id out of range")
    P = model.params
    x = T.embedding_lookup(P["tok_emb"], ids) + P["pos_emb"][:L]
    mask = np.tril(np.ones((L, L), dtype=bool))
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = T.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
        x = x + _attention(h, P, p + "attn.", cfg.n_heads, mask)
        h = T.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        h = T.gelu(h @ P[p + "mlp.w1"] + P[p + "mlp.b1"])
        x = x + (h @ P[p + "mlp.w2"] + P[p + "mlp.b2"])
    x = T.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
    return x @ P["head"]


def forward_logits(model: TransformerLM, token_ids: Sequence[int]) -> Tensor:
    """Logits ``[len, vocab]`` for one sequence; row ``t`` sees ids[0..t] only."""
    ids = np.asarray(token_ids, dtype=np.int64)[None, :]
    return forward_batch(model, ids)[0]


# ---------------------------------------------------------------- scoring


def prompt_text(instruction: str) -> str:
    return instruction + SEPARATOR


def encode_pair(tokenizer: Tokenizer, instruction: str, response: str) -> tuple[list[int], list[int]]:
    return tokenizer.encode(prompt_text(instruction)), tokenizer.encode(response)


def sequence_length(prompt_ids: Sequence[int], response_ids: Sequence[int]) -> int:
    """Number of positions the model reads: bos + prompt + response."""
    return 1 + len(prompt_ids) + len(response_ids)


def build_batch(model: TransformerLM, pairs: Sequence[tuple[Sequence[int], Sequence[int]]]):
    """Pad ``(prompt_ids, response_ids)`` pairs into model inputs, next-token
    targets and a 0/1 mask selecting response + eos positions."""
    cfg = model.config
    bos, eos, pad = _specials(model)
    lengths = []
    for p, r in pairs:
        if len(r) == 0:
            raise ModelError("empty response")
        n = sequence_length(p, r)
        if n > cfg.max_seq:
            raise ModelError(f"sequence of {n} tokens exceeds max_seq={cfg.max_seq}")
        lengths.append(n)
    L = max(lengths)
    inputs = np.full((len(pairs), L), pad, dtype=np.int64)
    targets = np.full((len(pairs), L), pad, dtype=np.int64)
    mask = np.zeros((len(pairs), L))
    for i, (p, r) in enumerate(pairs):
        full = [bos, *p, *r, eos]
        n = len(full) - 1
        inputs[i, :n] = full[:-1]
        targets[i, :n] = full[1:]
        mask[i, len(p):n] = 1.0
    return inputs, targets, mask


def _specials(model: TransformerLM) -> tuple[int, int, int]:
    tok = model.tokenizer
    if tok is None:
        from .tokenizers import BOS, EOS, PAD

        return BOS, EOS, PAD
    return tok.bos_id, tok.eos_id, tok.pad_id


def batch_log_probs(model: TransformerLM, pairs) -> tuple[Tensor, np.ndarray]:
    """Per-sample ``log p(response + eos | prompt)`` as a ``[batch]`` tensor,
    plus the scored token counts (response tokens + 1)."""
    inputs, targets, mask = build_batch(model, pairs)
    logp = T.log_softmax(forward_batch(model, inputs), axis=-1)
    picked = T.take_last(logp, targets)
    return (picked * mask).sum(axis=1), mask.sum(axis=1).astype(np.int64)


def sequence_log_prob(model: TransformerLM, prompt_ids: Sequence[int], response_ids: Sequence[int]) -> tuple[float, int]:
    with T.no_grad():
        logp, counts = batch_log_probs(model, [(list(prompt_ids), list(response_ids))])
    return float(logp.data[0]), int(counts[0])


# ---------------------------------------------------------------- generation


def generate(model: TransformerLM, prompts: Sequence[Sequence[int]], max_tokens: int,
             temperature: float = 0.0, rng: np.random.Generator | None = None) -> list[tuple[list[int], bool]]:
    """Continue each prompt (already excluding ``bos``) until ``eos`` or
    ``max_tokens`` new tokens. ``temperature <= 0`` is greedy decoding.
    Returns ``(new_ids, stopped_at_eos)`` per prompt; ``eos`` is not included."""
    bos, eos, pad = _specials(model)
    if temperature > 0 and rng is None:
        raise ModelError("sampling needs an rng")
    seqs = [[bos, *p] for p in prompts]
    out: list[list[int]] = [[] for _ in prompts]
    done = [False] * len(prompts)
    banned = np.array([bos, pad])
    with T.no_grad():
        for _ in range(max_tokens):
            live = [i for i, d in enumerate(done) if not d and len(seqs[i]) < model.config.max_seq]
            if not live:
                break
            L = max(len(seqs[i]) for i in live)
            ids = np.full((len(live), L), pad, dtype=np.int64)
            for row, i in enumerate(live):
                ids[row, : len(seqs[i])] = seqs[i]
            logits = forward_batch(model, ids).data
            last = logits[np.arange(len(live)), [len(seqs[i]) - 1 for i in live]]
            last[:, banned] = -np.inf
            if temperature <= 0:
                nxt = last.argmax(axis=-1)
            else:
                z = last / temperature
                z = z - z.max(axis=-1, keepdims=True)
                probs = np.exp(z)
                probs /= probs.sum(axis=-1, keepdims=True)
                u = rng.random(len(live))
                nxt = np.minimum((probs.cumsum(axis=-1) < u[:, None]).sum(axis=-1), probs.shape[-1] - 1)
            for row, i in enumerate(live):
                t = int(nxt[row])
                if t == eos:
                    done[i] = True
                else:
                    seqs[i].append(t)
                    out[i].append(t)
        return [(out[i], done[i]) for i in range(len(prompts))]


def generate_text(model: TransformerLM, instructions: Sequence[str], max_tokens: int,
                  temperature: float = 0.0, rng: np.random.Generator | None = None,
                  batch_size: int = 256) -> list[tuple[str, bool]]:
    tok = model.tokenizer
    if tok is None:
        raise ModelError("model has no tokenizer")
    results: list[tuple[str, bool]] = []
    for start in range(0, len(instructions), batch_size):
        chunk = instructions[start:start + batch_size]
        prompts = [tok.encode(prompt_text(s)) for s in chunk]
        for ids, stopped in generate(model, prompts, max_tokens, temperature, rng):
            results.append((tok.decode(ids, errors="replace"), stopped))
    return results


# ---------------------------------------------------------------- persistence


def save_model(model: TransformerLM, directory) -> Path:
    """Write ``weights.npz``, ``tokenizer.txt`` and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_arrays(directory / "weights.npz", model.state_arrays())
    manifest = {
        "format": "poftlab-model",
        "version": MANIFEST_VERSION,
        "name": model.name,
        "config": asdict(model.config),
        "frozen": model.frozen,
        "weights": "weights.npz",
        "weights_sha256": model.digest(),
        "tokenizer": None,
    }
    if model.tokenizer is not None:
        model.tokenizer.save(directory / "tokenizer.txt")
        manifest["tokenizer"] = "tokenizer.txt"
        manifest["tokenizer_sha256"] = model.tokenizer.digest()
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_model(directory, frozen: bool | None = None) -> TransformerLM:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != "poftlab-model" or manifest.get("version") != MANIFEST_VERSION:
        raise ModelError(f"{directory}: unsupported model manifest")
    config = ModelConfig(**manifest["config"])
    arrays = load_arrays(directory / manifest["weights"])
    tok = load_tokenizer(directory / manifest["tokenizer"]) if manifest.get("tokenizer") else None
    reference = init_model(config, 0)
    if set(arrays) != set(reference.params):
        raise ModelError(f"{directory}: parameter names do not match config")
    params = {}
    for name, ref in reference.params.items():
        if arrays[name].shape != ref.shape:
            raise ModelError(f"{directory}: parameter {name} has shape {arrays[name].shape}, expected {ref.shape}")
        params[name] = Tensor(arrays[name], requires_grad=True)
    is_frozen = manifest["frozen"] if frozen is None else frozen
    return TransformerLM(config, params, tok, manifest["name"], frozen=is_frozen)
