"""Trainable soft prompts prefixed to embedded input, tuned against a frozen base.

Two parameterizations: ``direct`` (the prompt matrix itself is trained) and
``lstm`` (a seed matrix is pushed through a trainable bidirectional LSTM plus
projection each forward pass, P-tuning style). Loss is computed only over
target-token positions; only prompt parameters ever reach the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .autograd import (AdamState, BiLstmWeights, Tensor, add, adam_step,
                       backward, concat_rows, cross_entropy, lstm_bidirectional,
                       matmul, scale, zero_grad)
from .errors import ContractError, DimensionError
from .model import ModelWeights, embed, forward, generate_greedy, with_positions

MODE_DIRECT = "direct"
MODE_LSTM = "lstm"


class SoftPrompt:
    """A [p x e] matrix of trainable prefix embeddings, optionally reparametrized."""

    def __init__(self, length: int, width: int, mode: str,
                 matrix: Tensor | None = None, seed_matrix: Tensor | None = None,
                 lstm: BiLstmWeights | None = None, proj_w: Tensor | None = None,
                 proj_b: Tensor | None = None):
        if length < 1 or width < 1:
            raise ContractError("prompt length and width must be positive")
        if mode not in (MODE_DIRECT, MODE_LSTM):
            raise ContractError(f"unknown prompt mode {mode!r}")
        self.length = length
        self.width = width
        self.mode = mode
        self.matrix = matrix
        self.seed_matrix = seed_matrix
        self.lstm = lstm
        self.proj_w = proj_w
        self.proj_b = proj_b

    def materialize(self) -> Tensor:
        """The current [p x e] prompt matrix, differentiable into its parameters."""
        if self.mode == MODE_DIRECT:
            return self.matrix
        hidden = lstm_bidirectional(self.seed_matrix, self.lstm)
        return add(matmul(hidden, self.proj_w), self.proj_b)

    def parameters(self) -> list[Tensor]:
        if self.mode == MODE_DIRECT:
            return [self.matrix]
        return [self.seed_matrix, *self.lstm.parameters(), self.proj_w, self.proj_b]

    def collapse_to_direct(self) -> "SoftPrompt":
        """Export the materialized matrix as a plain direct-mode prompt."""
        values = self.materialize().data.copy()
        return SoftPrompt(self.length, self.width, MODE_DIRECT,
                          matrix=Tensor(values, requires_grad=True))

    def named_arrays(self) -> dict[str, np.ndarray]:
        if self.mode == MODE_DIRECT:
            return {"prompt_matrix": self.matrix.data}
        return {
            "seed_matrix": self.seed_matrix.data,
            "lstm.fwd.w_x": self.lstm.fwd.w_x.data,
            "lstm.fwd.w_h": self.lstm.fwd.w_h.data,
            "lstm.fwd.bias": self.lstm.fwd.bias.data,
            "lstm.bwd.w_x": self.lstm.bwd.w_x.data,
            "lstm.bwd.w_h": self.lstm.bwd.w_h.data,
            "lstm.bwd.bias": self.lstm.bwd.bias.data,
            "proj_w": self.proj_w.data,
            "proj_b": self.proj_b.data,
        }

    def digest(self) -> str:
        return checkpoint.digest_arrays(self.named_arrays())


def init_prompt(mode: str, length: int, width: int, seed: int) -> SoftPrompt:
    """Seeded initialization: direct entries are N(0, 0.02^2) draws."""
    if length < 1 or width < 1:
        raise ContractError("prompt length and width must be positive")
    rng = np.random.default_rng(seed)
    if mode == MODE_DIRECT:
        matrix = Tensor(rng.normal(0.0, 0.02, size=(length, width)), requires_grad=True)
        return SoftPrompt(length, width, mode, matrix=matrix)
    if mode == MODE_LSTM:
        hidden = max(1, width // 2)
        seed_matrix = Tensor(rng.normal(0.0, 0.02, size=(length, width)), requires_grad=True)
        lstm = BiLstmWeights.create(width, hidden, rng)
        proj_w = Tensor(rng.normal(0.0, 0.02, size=(2 * hidden, width)), requires_grad=True)
        proj_b = Tensor(np.zeros(width), requires_grad=True)
        return SoftPrompt(length, width, mode, seed_matrix=seed_matrix,
                          lstm=lstm, proj_w=proj_w, proj_b=proj_b)
    raise ContractError(f"unknown prompt mode {mode!r}")


def save_prompt(path, prompt: SoftPrompt) -> None:
    meta = {"length": str(prompt.length), "width": str(prompt.width), "mode": prompt.mode}
    if prompt.mode == MODE_LSTM:
        meta["lstm_hidden"] = str(prompt.lstm.hidden)
    checkpoint.save_checkpoint(path, "prompt", meta, prompt.named_arrays())


def load_prompt(path) -> SoftPrompt:
    kind, meta, arrays = checkpoint.load_checkpoint(path)
    if kind != "prompt":
        raise ContractError(f"{path} holds a {kind!r} checkpoint, expected a prompt")
    length, width, mode = int(meta["length"]), int(meta["width"]), meta["mode"]
    prompt = init_prompt(mode, length, width, seed=0)
    for name, tensor in _prompt_tensors(prompt):
        if name not in arrays:
            raise ContractError(f"prompt checkpoint lacks array {name!r}")
        tensor.data = np.array(arrays[name], dtype=np.float64)
    return prompt


def _prompt_tensors(prompt: SoftPrompt) -> list[tuple[str, Tensor]]:
    if prompt.mode == MODE_DIRECT:
        return [("prompt_matrix", prompt.matrix)]
    return [("seed_matrix", prompt.seed_matrix),
            ("lstm.fwd.w_x", prompt.lstm.fwd.w_x),
            ("lstm.fwd.w_h", prompt.lstm.fwd.w_h),
            ("lstm.fwd.bias", prompt.lstm.fwd.bias),
            ("lstm.bwd.w_x", prompt.lstm.bwd.w_x),
            ("lstm.bwd.w_h", prompt.lstm.bwd.w_h),
            ("lstm.bwd.bias", prompt.lstm.bwd.bias),
            ("proj_w", prompt.proj_w),
            ("proj_b", prompt.proj_b)]


def compose(prompt: SoftPrompt, embedded_input: Tensor) -> Tensor:
    """Stack the prompt matrix on top of embedded input: rows 0..p-1 are prompt."""
    if embedded_input.data.ndim != 2 or embedded_input.data.shape[1] != prompt.width:
        raise DimensionError(
            f"prompt width {prompt.width} does not match input {embedded_input.data.shape}")
    return concat_rows([prompt.materialize(), embedded_input])


@dataclass
class TuningConfig:
    prompt_length: int = 20
    learning_rate: float = 3e-3
    steps: int = 300
    batch_size: int = 8
    seed: int = 0
    init_mode: str = MODE_DIRECT
    loss_mask: str = "target_only"
    max_target_len: int = 64

    def __post_init__(self):
        if self.prompt_length < 1:
            raise ContractError("prompt_length must be positive")
        if self.loss_mask != "target_only":
            raise ContractError("only the target_only loss mask is supported")


@dataclass
class TokenizedSample:
    sample_id: str
    input_ids: list[int]
    target_ids: list[int]


@dataclass
class TuneResult:
    prompt: SoftPrompt
    log: list[tuple[int, float]]
    initial_loss: float
    final_loss: float
    digest_before: str
    digest_after: str


@dataclass
class InferResult:
    token_ids: list[int]
    truncated: bool


def composed_loss(weights: ModelWeights, prompt_matrix: Tensor,
                  input_ids: list[int], target_ids: list[int]) -> Tensor:
    """Cross-entropy over target positions of [prompt; embed(input); embed(target)].

    Position j in the composed sequence predicts the token at j+1; the mask
    keeps exactly the positions whose next token is a target token, so prompt
    and input positions contribute zero loss and zero gradient.
    """
    if not input_ids or not target_ids:
        raise ContractError("samples need non-empty input and target token lists")
    ids = list(input_ids) + list(target_ids)
    x = concat_rows([prompt_matrix, embed(ids, weights)])
    x = with_positions(x, weights)
    logits = forward(x, weights)
    p = prompt_matrix.data.shape[0]
    total = p + len(ids)
    targets = [0] * total
    mask = [False] * total
    for j in range(p + len(input_ids) - 1, total - 1):
        targets[j] = ids[j + 1 - p]
        mask[j] = True
    return cross_entropy(logits, targets, mask)


def _validate_samples(samples: list[TokenizedSample], config: TuningConfig,
                      weights: ModelWeights) -> None:
    if not samples:
        raise ContractError("tuning dataset is empty")
    budget = weights.config.max_seq_len
    for sample in samples:
        length = config.prompt_length + len(sample.input_ids) + len(sample.target_ids)
        if length > budget:
            raise ContractError(
                f"sample {sample.sample_id!r}: composed length {length} exceeds max_seq_len {budget}")
        if len(sample.target_ids) > config.max_target_len:
            raise ContractError(
                f"sample {sample.sample_id!r}: target length {len(sample.target_ids)} "
                f"exceeds max_target_len {config.max_target_len}")


def dataset_loss(weights: ModelWeights, prompt: SoftPrompt,
                 samples: list[TokenizedSample]) -> float:
    total = 0.0
    for sample in samples:
        total += float(composed_loss(weights, prompt.materialize(),
                                     sample.input_ids, sample.target_ids).data)
    return total / len(samples)


def tune(weights: ModelWeights, prompt: SoftPrompt, samples: list[TokenizedSample],
         config: TuningConfig) -> TuneResult:
    """Optimize prompt parameters only; the base model digest must not move."""
    _validate_samples(samples, config, weights)
    if prompt.length != config.prompt_length:
        raise ContractError(
            f"prompt length {prompt.length} does not match config {config.prompt_length}")
    digest_before = weights.digest()
    params = prompt.parameters()
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    order: list[int] = []
    initial = dataset_loss(weights, prompt, samples)
    log: list[tuple[int, float]] = []

    for step in range(config.steps):
        batch: list[int] = []
        while len(batch) < min(config.batch_size, len(samples)):
            if not order:
                order = list(rng.permutation(len(samples)))
            batch.append(int(order.pop()))
        prompt_matrix = prompt.materialize()
        losses = [composed_loss(weights, prompt_matrix,
                                samples[i].input_ids, samples[i].target_ids)
                  for i in batch]
        total = losses[0]
        for extra in losses[1:]:
            total = add(total, extra)
        batch_loss = scale(total, 1.0 / len(losses))
        backward(batch_loss)
        adam_step(params, state, config.learning_rate)
        zero_grad(params)
        log.append((step, float(batch_loss.data)))

    final = dataset_loss(weights, prompt, samples) if config.steps > 0 else initial
    digest_after = weights.digest()
    if digest_after != digest_before:
        raise ContractError("frozen base model changed during tuning")
    return TuneResult(prompt=prompt, log=log, initial_loss=initial, final_loss=final,
                      digest_before=digest_before, digest_after=digest_after)


def infer(weights: ModelWeights, prompt: SoftPrompt, input_ids: list[int],
          max_new_tokens: int, stop_token: int) -> InferResult:
    """Greedy continuation of [prompt; embed(input)]; flags budget exhaustion."""
    prefix = compose(prompt, embed(input_ids, weights))
    generated = generate_greedy(prefix, weights, max_new_tokens, stop_token)
    truncated = not generated or generated[-1] != stop_token
    return InferResult(token_ids=generated, truncated=truncated)
