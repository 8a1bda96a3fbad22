"""Prompt key/value caching for iterative decoding.

The cache is built during the first decode iteration over `prompt + answer window` and reused for
the following iterations. Under causal attention the prompt's keys and values cannot depend on the
answer, so reuse is exact. Under full attention they were computed while the window still held
`[MASK]` tokens, so later iterations see slightly stale prompt states.
"""

from __future__ import annotations

import dataclasses

from typing import Optional, Tuple

import numpy as np

from paradiff.helpers.exceptions import CacheMismatchError
from paradiff.model import (
    as_token_batch,
    AttentionMode,
    forward,
    forward_trace,
    LayerKV,
    ModelParams,
    OpCounter,
    TokensLike,
)


@dataclasses.dataclass(frozen=True, eq=False)
class KVCache:
    """Keys and values of the prompt positions, per layer.

    Every array has shape (1, n_heads, prompt_length, head_dim) and is read-only.
    """

    layers: Tuple[LayerKV, ...]
    mode: AttentionMode
    prompt_tokens: np.ndarray
    fingerprint: str
    """Fingerprint of the params the cache was built from."""

    @property
    def prompt_length(self) -> int:
        """The number of cached positions."""
        return int(self.prompt_tokens.shape[0])

    def check(self, params: ModelParams, mode: AttentionMode, tokens: np.ndarray) -> None:
        """Verify that the cache may serve a forward pass.

        Args:
            params: The params of the pass.
            mode: The attention mode of the pass.
            tokens: The full input of the pass, shape (B, T), which must start with the prompt.

        Raises:
            CacheMismatchError: The mode, the params or the prompt differ.
        """
        if mode is not self.mode:
            msg = f"cache was built under {self.mode.value} attention, not {mode.value}"
            raise CacheMismatchError(msg)
        if params.fingerprint() != self.fingerprint:
            msg = "cache was built from other params"
            raise CacheMismatchError(msg)
        if tokens.shape[1] < self.prompt_length or not np.array_equal(
            tokens[:, : self.prompt_length],
            np.broadcast_to(self.prompt_tokens, (tokens.shape[0], self.prompt_length)),
        ):
            msg = f"tokens do not start with the cached {self.prompt_length}-token prompt"
            raise CacheMismatchError(msg)


def _read_only(array: np.ndarray) -> np.ndarray:
    array = array.copy()
    array.setflags(write=False)
    return array


def build_cache(
    params: ModelParams,
    prompt: TokensLike,
    window: np.ndarray,
    mode: AttentionMode,
    *,
    counter: Optional[OpCounter] = None,
) -> Tuple[KVCache, np.ndarray]:
    """Run the full pass over `prompt + window` and keep the prompt's keys and values.

    Args:
        params: The weights.
        prompt: The prompt tokens.
        window: The current answer window, normally all `[MASK]` apart from prior slots.
        mode: The attention mode of the decode.
        counter: Receives the forward pass and its score entries.

    Returns:
        The cache and the logits of the answer slots, shape (len(window), V); these are exactly
            the logits of an uncached pass.

    Raises:
        SequenceLengthError: The combined length exceeds `max_seq_len`.
    """
    prompt_tokens = as_token_batch(prompt)[0][0]
    tokens = np.concatenate([prompt_tokens, np.asarray(window, dtype=np.int64)])[np.newaxis]
    trace = forward_trace(params, tokens, mode, counter=counter, keep_activations=False)
    length = len(prompt_tokens)
    layers = tuple(
        (_read_only(k[:, :, :length]), _read_only(v[:, :, :length])) for k, v in trace.kv
    )
    cache = KVCache(
        layers=layers,
        mode=mode,
        prompt_tokens=_read_only(prompt_tokens),
        fingerprint=params.fingerprint(),
    )
    return cache, trace.logits[0, length:]


def step_with_cache(
    params: ModelParams,
    prompt: TokensLike,
    window: np.ndarray,
    cache: KVCache,
    mode: AttentionMode,
    *,
    counter: Optional[OpCounter] = None,
) -> np.ndarray:
    """Compute the answer-slot logits, attending to the cached prompt and the fresh window.

    Only the window positions get queries, so a step costs
    `len(window) * (prompt_length + len(window))` score entries.

    Args:
        params: The weights the cache was built from.
        prompt: The prompt of the decode, which must be the cached prompt.
        window: The current answer window.
        cache: The prompt cache.
        mode: The attention mode of the decode.
        counter: Receives the forward pass and its score entries.

    Returns:
        Logits of shape (len(window), V).

    Raises:
        CacheMismatchError: The cache was built under another mode, from other params or for
            another prompt.
    """
    prompt_tokens = as_token_batch(prompt)[0][0]
    if len(prompt_tokens) != cache.prompt_length:
        msg = f"the prompt has {len(prompt_tokens)} tokens, the cache holds {cache.prompt_length}"
        raise CacheMismatchError(msg)
    window_tokens = np.asarray(window, dtype=np.int64)
    cache.check(params, mode, np.concatenate([prompt_tokens, window_tokens])[np.newaxis])
    trace = forward_trace(
        params,
        window_tokens[np.newaxis],
        mode,
        past=list(cache.layers),
        counter=counter,
        keep_activations=False,
    )
    return trace.logits[0]


def divergence_probe(
    params: ModelParams, prompt: TokensLike, window: np.ndarray, cache: KVCache
) -> float:
    """Return the largest absolute logit difference between a cached step and a full recompute."""
    prompt_tokens = as_token_batch(prompt)[0][0]
    full = forward(
        params, np.concatenate([prompt_tokens, np.asarray(window, dtype=np.int64)]), cache.mode
    )[len(prompt_tokens) :]
    cached = step_with_cache(params, prompt_tokens, window, cache, cache.mode)
    return float(np.abs(cached - full).max())


def predicted_score_ratio(prompt_length: int, answer_length: int) -> float:
    """Return the score entries of an uncached step divided by those of a cached step.

    Examples:
        >>> predicted_score_ratio(120, 8)
        16.0
        >>> predicted_score_ratio(0, 8)
        1.0
    """
    total = prompt_length + answer_length
    return float(total * total) / float(answer_length * total)
