"""A miniature decoder-only language model on top of the autograd tensors.

Pre-norm blocks (LayerNorm, causal multi-head attention, residual, LayerNorm,
GELU MLP, residual), learned absolute positional embeddings, greedy decoding.
Weights are plain tensors; freezing flips ``requires_grad`` off so no taped
path ever reaches them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import checkpoint
from .autograd import (AdamState, Tensor, add, adam_step, backward, concat_cols,
                       concat_rows, cross_entropy, embedding_lookup, gelu,
                       layer_norm, matmul, scale, slice_cols, slice_rows,
                       softmax_rows, transpose, zero_grad)
from .errors import ContractError, DimensionError

_MASK_FILL = -1e30


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 256
    tie_lm_head: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"ModelConfig.{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    def meta(self) -> dict[str, str]:
        return {
            "vocab_size": str(self.vocab_size),
            "d_model": str(self.d_model),
            "n_layers": str(self.n_layers),
            "n_heads": str(self.n_heads),
            "d_ff": str(self.d_ff),
            "max_seq_len": str(self.max_seq_len),
            "tie_lm_head": "1" if self.tie_lm_head else "0",
        }

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "ModelConfig":
        return cls(
            vocab_size=int(meta["vocab_size"]),
            d_model=int(meta["d_model"]),
            n_layers=int(meta["n_layers"]),
            n_heads=int(meta["n_heads"]),
            d_ff=int(meta["d_ff"]),
            max_seq_len=int(meta["max_seq_len"]),
            tie_lm_head=meta.get("tie_lm_head", "1") == "1",
        )


@dataclass
class BlockWeights:
    ln1_gain: Tensor
    ln1_bias: Tensor
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [(name, getattr(self, name)) for name in (
            "ln1_gain", "ln1_bias", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v",
            "w_o", "b_o", "ln2_gain", "ln2_bias", "w_ff1", "b_ff1", "w_ff2", "b_ff2")]


@dataclass
class ModelWeights:
    config: ModelConfig
    token_embedding: Tensor
    position_embedding: Tensor
    blocks: list[BlockWeights]
    final_gain: Tensor
    final_bias: Tensor
    lm_head: Tensor | None = None

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int, trainable: bool = True) -> "ModelWeights":
        rng = np.random.default_rng(seed)
        e, ff = config.d_model, config.d_ff

        def matrix(rows, cols):
            return Tensor(rng.normal(0.0, 0.02, size=(rows, cols)), requires_grad=trainable)

        def gain(n):
            return Tensor(np.ones(n), requires_grad=trainable)

        def zeros(n):
            return Tensor(np.zeros(n), requires_grad=trainable)

        blocks = []
        for _ in range(config.n_layers):
            blocks.append(BlockWeights(
                ln1_gain=gain(e), ln1_bias=zeros(e),
                w_q=matrix(e, e), b_q=zeros(e),
                w_k=matrix(e, e), b_k=zeros(e),
                w_v=matrix(e, e), b_v=zeros(e),
                w_o=matrix(e, e), b_o=zeros(e),
                ln2_gain=gain(e), ln2_bias=zeros(e),
                w_ff1=matrix(e, ff), b_ff1=zeros(ff),
                w_ff2=matrix(ff, e), b_ff2=zeros(e),
            ))
        head = None if config.tie_lm_head else matrix(e, config.vocab_size)
        return cls(
            config=config,
            token_embedding=matrix(config.vocab_size, e),
            position_embedding=matrix(config.max_seq_len, e),
            blocks=blocks,
            final_gain=gain(e),
            final_bias=zeros(e),
            lm_head=head,
        )

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("token_embedding", self.token_embedding),
               ("position_embedding", self.position_embedding)]
        for i, block in enumerate(self.blocks):
            out += [(f"block{i}.{name}", t) for name, t in block.tensors()]
        out += [("final_gain", self.final_gain), ("final_bias", self.final_bias)]
        if self.lm_head is not None:
            out.append(("lm_head", self.lm_head))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_tensors()}

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag

    def freeze(self) -> None:
        self.set_trainable(False)

    def digest(self) -> str:
        """SHA-256 over the canonical serialization of every weight array."""
        return checkpoint.digest_arrays(self.named_arrays())

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray],
                    trainable: bool = False) -> "ModelWeights":
        weights = cls.initialize(config, seed=0, trainable=trainable)
        for name, tensor in weights.named_tensors():
            if name not in arrays:
                raise ContractError(f"checkpoint lacks array {name!r}")
            if arrays[name].shape != tensor.data.shape:
                raise ContractError(
                    f"array {name!r} has shape {arrays[name].shape}, expected {tensor.data.shape}")
            tensor.data = np.array(arrays[name], dtype=np.float64)
        return weights


def save_model(path, weights: ModelWeights) -> None:
    checkpoint.save_checkpoint(path, "model", weights.config.meta(), weights.named_arrays())


def load_model(path) -> ModelWeights:
    kind, meta, arrays = checkpoint.load_checkpoint(path)
    if kind != "model":
        raise ContractError(f"{path} holds a {kind!r} checkpoint, expected a model")
    config = ModelConfig.from_meta(meta)
    return ModelWeights.from_arrays(config, arrays, trainable=False)


# ---------------------------------------------------------------------------
# forward pass


def embed(tokens: Sequence[int], weights: ModelWeights) -> Tensor:
    """Token embeddings only; positions are added over the composed sequence."""
    n = len(tokens)
    if n < 1:
        raise ContractError("embed needs at least one token")
    if n > weights.config.max_seq_len:
        raise ContractError(f"sequence length {n} exceeds max_seq_len {weights.config.max_seq_len}")
    return embedding_lookup(weights.token_embedding, tokens)


def with_positions(x: Tensor, weights: ModelWeights) -> Tensor:
    """Add learned positional embeddings for positions 0..L-1."""
    length = x.data.shape[0]
    if length > weights.config.max_seq_len:
        raise ContractError(f"sequence length {length} exceeds max_seq_len {weights.config.max_seq_len}")
    return add(x, slice_rows(weights.position_embedding, 0, length))


def _causal_mask(length: int) -> Tensor:
    return Tensor(np.triu(np.full((length, length), _MASK_FILL), k=1))


def forward(x: Tensor, weights: ModelWeights) -> Tensor:
    """Causal forward pass from position-ready embeddings to vocabulary logits."""
    if x.data.ndim != 2 or x.data.shape[1] != weights.config.d_model:
        raise DimensionError(f"forward expects [L x {weights.config.d_model}], got {x.data.shape}")
    length = x.data.shape[0]
    if length < 1:
        raise ContractError("forward needs a non-empty sequence")
    if length > weights.config.max_seq_len:
        raise ContractError(f"sequence length {length} exceeds max_seq_len {weights.config.max_seq_len}")
    cfg = weights.config
    head_dim = cfg.d_model // cfg.n_heads
    mask = _causal_mask(length)
    inv_sqrt = 1.0 / math.sqrt(head_dim)

    for block in weights.blocks:
        h = layer_norm(x, block.ln1_gain, block.ln1_bias)
        q = add(matmul(h, block.w_q), block.b_q)
        k = add(matmul(h, block.w_k), block.b_k)
        v = add(matmul(h, block.w_v), block.b_v)
        contexts = []
        for i in range(cfg.n_heads):
            lo, hi = i * head_dim, (i + 1) * head_dim
            scores = scale(matmul(slice_cols(q, lo, hi), transpose(slice_cols(k, lo, hi))), inv_sqrt)
            attn = softmax_rows(add(scores, mask))
            contexts.append(matmul(attn, slice_cols(v, lo, hi)))
        attended = add(matmul(concat_cols(contexts), block.w_o), block.b_o)
        x = add(x, attended)
        h2 = layer_norm(x, block.ln2_gain, block.ln2_bias)
        ff = add(matmul(gelu(add(matmul(h2, block.w_ff1), block.b_ff1)), block.w_ff2), block.b_ff2)
        x = add(x, ff)

    final = layer_norm(x, weights.final_gain, weights.final_bias)
    if weights.config.tie_lm_head:
        return matmul(final, transpose(weights.token_embedding))
    return matmul(final, weights.lm_head)


# ---------------------------------------------------------------------------
# training and decoding


def sequence_loss(token_ids: Sequence[int], weights: ModelWeights) -> Tensor:
    """Next-token cross-entropy over one sequence (all positions but the last)."""
    if len(token_ids) < 2:
        raise ContractError("next-token loss needs at least two tokens")
    x = with_positions(embed(token_ids, weights), weights)
    logits = forward(x, weights)
    n = len(token_ids)
    targets = [token_ids[i + 1] if i + 1 < n else 0 for i in range(n)]
    mask = [i + 1 < n for i in range(n)]
    return cross_entropy(logits, targets, mask)


def _mean_corpus_loss(sequences: list[list[int]], weights: ModelWeights) -> float:
    total = 0.0
    for seq in sequences:
        total += float(sequence_loss(seq, weights).data)
    return total / len(sequences)


@dataclass
class PretrainResult:
    weights: ModelWeights
    log: list[tuple[int, float]]
    holdout_initial: float
    holdout_final: float


def pretrain_lm(corpus: list[list[int]], config: ModelConfig, steps: int, lr: float,
                seed: int, batch_size: int = 8) -> PretrainResult:
    """Train from scratch on tokenized sequences; the result is returned frozen.

    With fewer than two corpus sequences the held-out slice is the corpus
    itself; otherwise the trailing tenth (at least one sequence) is held out.
    """
    if not corpus:
        raise ContractError("pretrain corpus is empty")
    sequences = [list(seq)[:config.max_seq_len] for seq in corpus]
    for i, seq in enumerate(sequences):
        if len(seq) < 2:
            raise ContractError(f"corpus sequence {i} is shorter than two tokens")
        for tok in seq:
            if not (0 <= tok < config.vocab_size):
                raise ContractError(f"corpus sequence {i} holds out-of-vocab id {tok}")
    if len(sequences) > 1:
        held = max(1, len(sequences) // 10)
        train, holdout = sequences[:-held], sequences[-held:]
    else:
        train = holdout = sequences

    rng = np.random.default_rng(seed)
    weights = ModelWeights.initialize(config, seed=seed, trainable=True)
    params = weights.parameters()
    state = AdamState()
    initial = _mean_corpus_loss(holdout, weights)
    log: list[tuple[int, float]] = []

    for step in range(steps):
        picks = rng.integers(0, len(train), size=min(batch_size, len(train)))
        losses = [sequence_loss(train[int(i)], weights) for i in picks]
        total = losses[0]
        for extra in losses[1:]:
            total = add(total, extra)
        batch_loss = scale(total, 1.0 / len(losses))
        backward(batch_loss)
        adam_step(params, state, lr)
        zero_grad(params)
        log.append((step, float(batch_loss.data)))

    final = _mean_corpus_loss(holdout, weights)
    weights.freeze()
    return PretrainResult(weights=weights, log=log, holdout_initial=initial, holdout_final=final)


def generate_greedy(prefix: Tensor, weights: ModelWeights, max_new_tokens: int,
                    stop_token: int) -> list[int]:
    """Greedily extend position-less prefix embeddings; ties go to the lowest id.

    The stop token, when emitted, is included in the returned ids.
    """
    if max_new_tokens < 0:
        raise ContractError("max_new_tokens must be non-negative")
    if prefix.data.shape[0] + max_new_tokens > weights.config.max_seq_len:
        raise ContractError(
            f"prefix length {prefix.data.shape[0]} plus budget {max_new_tokens} "
            f"exceeds max_seq_len {weights.config.max_seq_len}")
    generated: list[int] = []
    x = prefix
    for _ in range(max_new_tokens):
        logits = forward(with_positions(x, weights), weights)
        next_id = int(np.argmax(logits.data[-1]))
        generated.append(next_id)
        if next_id == stop_token:
            break
        x = concat_rows([x, embed([next_id], weights)])
    return generated
