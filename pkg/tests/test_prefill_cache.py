"""Unit tests for prompt key/value caching."""

import dataclasses

import numpy as np
import pytest

from paradiff.decoder import decode, DecodeAlgorithm, DecodeConfig
from paradiff.helpers.exceptions import CacheMismatchError
from paradiff.model import (
    AttentionMode,
    forward,
    forward_trace,
    init_params,
    ModelConfig,
    ModelParams,
    OpCounter,
)
from paradiff.prefill_cache import (
    build_cache,
    divergence_probe,
    predicted_score_ratio,
    step_with_cache,
)
from paradiff.tasks import encode_prompt, Vocabulary


def _random_tokens(rng: np.random.Generator, size: int, config: ModelConfig) -> np.ndarray:
    return rng.integers(4, config.vocab_size, size=size)


@pytest.fixture(name="prompt")
def fixture_prompt(vocab: Vocabulary) -> np.ndarray:
    """An extraction-style prompt."""
    return encode_prompt(vocab, "extract: time: | id: 1 2 3 4 ; time: 0 9 : 3 0")


def test_cache_retains_prompt_keys(task_params: ModelParams, prompt: np.ndarray) -> None:
    """The cache keeps the prompt keys and values of the pass that built it."""
    window = np.full(5, task_params.config.mask_id)
    cache, logits = build_cache(task_params, prompt, window, AttentionMode.FULL)
    assert cache.prompt_length == len(prompt)
    trace = forward_trace(
        task_params, np.concatenate([prompt, window])[np.newaxis], AttentionMode.FULL
    )
    for (cached_k, cached_v), (k, v) in zip(cache.layers, trace.kv):
        np.testing.assert_array_equal(cached_k, k[:, :, : len(prompt)])
        np.testing.assert_array_equal(cached_v, v[:, :, : len(prompt)])
        assert not cached_k.flags.writeable
    np.testing.assert_array_equal(logits, trace.logits[0, len(prompt) :])


def test_full_mode_prompt_states_see_the_window(
    task_params: ModelParams, prompt: np.ndarray
) -> None:
    """Under full attention deeper prompt keys depend on the answer window."""
    window = np.full(5, task_params.config.mask_id)
    changed = window.copy()
    changed[2] = 10
    first, _ = build_cache(task_params, prompt, window, AttentionMode.FULL)
    second, _ = build_cache(task_params, prompt, changed, AttentionMode.FULL)
    np.testing.assert_array_equal(first.layers[0][0], second.layers[0][0])
    assert not np.array_equal(first.layers[-1][0], second.layers[-1][0])


def test_causal_cache_is_exact(task_params: ModelParams) -> None:
    """Causal cached steps match a full recompute on random prompts and windows."""
    rng = np.random.default_rng(0)
    config = task_params.config
    worst = 0.0
    for _ in range(100):
        prompt = _random_tokens(rng, int(rng.integers(1, 40)), config)
        length = int(rng.integers(1, 12))
        cache, _ = build_cache(
            task_params, prompt, np.full(length, config.mask_id), AttentionMode.CAUSAL
        )
        window = _random_tokens(rng, length, config)
        worst = max(worst, divergence_probe(task_params, prompt, window, cache))
    assert worst < 1e-5


def test_full_cache_unchanged_window(task_params: ModelParams, prompt: np.ndarray) -> None:
    """A step over the window the cache was built with repeats the build logits."""
    window = np.full(6, task_params.config.mask_id)
    window[0] = 12
    cache, logits = build_cache(task_params, prompt, window, AttentionMode.FULL)
    logits_again = step_with_cache(task_params, prompt, window, cache, AttentionMode.FULL)
    np.testing.assert_allclose(logits_again, logits, atol=1e-5)


def test_full_cache_diverges_after_updates(task_params: ModelParams, prompt: np.ndarray) -> None:
    """Once answer tokens change, reused prompt states make the logits approximate."""
    window = np.full(6, task_params.config.mask_id)
    cache, _ = build_cache(task_params, prompt, window, AttentionMode.FULL)
    updated = _random_tokens(np.random.default_rng(1), 6, task_params.config)
    assert divergence_probe(task_params, prompt, updated, cache) > 0.0


def test_forward_with_cache(task_params: ModelParams, prompt: np.ndarray) -> None:
    """`forward` accepts a cache and returns only the rows after the prompt."""
    window = np.full(4, task_params.config.mask_id)
    cache, _ = build_cache(task_params, prompt, window, AttentionMode.CAUSAL)
    tokens = np.concatenate([prompt, window])
    cached = forward(task_params, tokens, AttentionMode.CAUSAL, cache)
    full = forward(task_params, tokens, AttentionMode.CAUSAL)
    assert cached.shape == (4, task_params.config.vocab_size)
    np.testing.assert_allclose(cached, full[len(prompt) :], atol=1e-5)


def test_cache_mismatches(task_params: ModelParams, prompt: np.ndarray) -> None:
    """A cache refuses another mode, other params or another prompt."""
    window = np.full(4, task_params.config.mask_id)
    cache, _ = build_cache(task_params, prompt, window, AttentionMode.FULL)
    tokens = np.concatenate([prompt, window])
    with pytest.raises(CacheMismatchError, match="attention"):
        forward(task_params, tokens, AttentionMode.CAUSAL, cache)
    other = init_params(task_params.config, seed=99)
    with pytest.raises(CacheMismatchError, match="other params"):
        step_with_cache(other, prompt, window, cache, AttentionMode.FULL)
    with pytest.raises(CacheMismatchError, match="other params"):
        forward(other, tokens, AttentionMode.FULL, cache)
    wrong_prompt = tokens.copy()
    wrong_prompt[1] = 4 if tokens[1] != 4 else 5
    with pytest.raises(CacheMismatchError, match="start with"):
        forward(task_params, wrong_prompt, AttentionMode.FULL, cache)
    with pytest.raises(CacheMismatchError, match="strict prefix"):
        forward(task_params, prompt, AttentionMode.FULL, cache)
    with pytest.raises(CacheMismatchError, match="attention"):
        step_with_cache(task_params, prompt, window, cache, AttentionMode.CAUSAL)
    with pytest.raises(CacheMismatchError, match="start with"):
        step_with_cache(task_params, wrong_prompt[: len(prompt)], window, cache, AttentionMode.FULL)
    with pytest.raises(CacheMismatchError, match="cache holds"):
        step_with_cache(task_params, prompt[:-1], window, cache, AttentionMode.FULL)


def test_cache_invalidated_by_training_update(task_params: ModelParams, prompt: np.ndarray) -> None:
    """An in-place update followed by fingerprint invalidation retires old caches."""
    params = task_params.copy()
    window = np.full(4, params.config.mask_id)
    cache, _ = build_cache(params, prompt, window, AttentionMode.FULL)
    params["lm_head"][0, 0] += 1.0
    params.invalidate_fingerprint()
    with pytest.raises(CacheMismatchError):
        step_with_cache(params, prompt, window, cache, AttentionMode.FULL)


def test_score_entries_per_step(task_params: ModelParams, prompt: np.ndarray) -> None:
    """A cached step costs L_answer * (L_prompt + L_answer) score entries."""
    answer = 8
    window = np.full(answer, task_params.config.mask_id)
    counter = OpCounter()
    cache, _ = build_cache(task_params, prompt, window, AttentionMode.FULL, counter=counter)
    total = len(prompt) + answer
    assert counter.snapshot() == (1, total * total)
    step_with_cache(task_params, prompt, window, cache, AttentionMode.FULL, counter=counter)
    assert counter.snapshot() == (2, total * total + answer * total)


def test_predicted_score_ratio() -> None:
    """Uncached over cached score entries per step."""
    assert predicted_score_ratio(120, 8) == 16.0
    assert predicted_score_ratio(0, 8) == 1.0


def test_decode_with_cache(task_params: ModelParams, prompt: np.ndarray) -> None:
    """Cached decoding counts one full pass and cheap steps, and matches under causal attention."""
    base = DecodeConfig(
        response_length=4,
        max_steps=4,
        algorithm=DecodeAlgorithm.MASKGIT,
        k=1,
        attention_mode=AttentionMode.CAUSAL,
    )
    plain = decode(task_params, prompt, base)
    cached = decode(task_params, prompt, dataclasses.replace(base, use_cache=True))
    np.testing.assert_array_equal(plain.window, cached.window)
    total = len(prompt) + 4
    assert plain.stats.score_entries == 4 * total * total
    assert cached.stats.score_entries == total * total + 3 * 4 * total
    assert cached.stats.forward_passes == 4
    assert cached.stats.cached_iterations == (False, True, True, True)
    assert cached.stats.iteration_entries == (total * total,) + (4 * total,) * 3


def test_decode_cache_refresh(task_params: ModelParams, prompt: np.ndarray) -> None:
    """A refresh interval rebuilds the cache with a full pass."""
    cfg = DecodeConfig(
        response_length=4,
        max_steps=4,
        algorithm=DecodeAlgorithm.MASKGIT,
        k=1,
        use_cache=True,
        cache_refresh_interval=2,
    )
    total = len(prompt) + 4
    result = decode(task_params, prompt, cfg)
    assert result.stats.score_entries == 2 * total * total + 2 * 4 * total


def test_decode_with_prebuilt_cache(task_params: ModelParams, prompt: np.ndarray) -> None:
    """A causal cache handed to `decode` serves every iteration and keeps the answer."""
    cfg = DecodeConfig(
        response_length=4,
        max_steps=4,
        algorithm=DecodeAlgorithm.MASKGIT,
        k=1,
        attention_mode=AttentionMode.CAUSAL,
    )
    cache, _ = build_cache(
        task_params, prompt, np.full(4, task_params.config.mask_id), AttentionMode.CAUSAL
    )
    cached = decode(task_params, prompt, cfg, cache=cache)
    np.testing.assert_array_equal(cached.window, decode(task_params, prompt, cfg).window)
    assert cached.stats.cached_iterations == (True, True, True, True)
    assert cached.stats.score_entries == 4 * 4 * (len(prompt) + 4)


def test_decode_rejects_cache_of_other_mode(task_params: ModelParams, prompt: np.ndarray) -> None:
    """A causal cache cannot serve a full-attention decode."""
    cfg = DecodeConfig(response_length=4, max_steps=4, algorithm=DecodeAlgorithm.MASKGIT, k=1)
    cache, _ = build_cache(
        task_params, prompt, np.full(4, task_params.config.mask_id), AttentionMode.CAUSAL
    )
    with pytest.raises(CacheMismatchError, match="attention"):
        decode(task_params, prompt, cfg, cache=cache)
    with pytest.raises(CacheMismatchError, match="attention"):
        decode(task_params, prompt, dataclasses.replace(cfg, use_cache=True), cache=cache)


def test_decode_rejects_cache_of_other_prompt(task_params: ModelParams, prompt: np.ndarray) -> None:
    """A cache built for one prompt cannot serve another one."""
    cfg = DecodeConfig(response_length=4, max_steps=4, use_cache=True)
    cache, _ = build_cache(
        task_params, prompt, np.full(4, task_params.config.mask_id), AttentionMode.FULL
    )
    with pytest.raises(CacheMismatchError, match="cache holds"):
        decode(task_params, prompt[:-2], cfg, cache=cache)
    altered = prompt.copy()
    altered[1] = 4 if prompt[1] != 4 else 5
    with pytest.raises(CacheMismatchError, match="start with"):
        decode(task_params, altered, cfg, cache=cache)
