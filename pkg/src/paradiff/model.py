"""A small pre-norm transformer with a hand-derived backward pass.

Weights follow the `x @ W` convention. Each block is

    h = h + Attention(RMSNorm(h)) @ wo
    h = h + GELU(RMSNorm(h) @ w1) @ w2

and the logits are `RMSNorm(h) @ lm_head`. The normalisation has no learned gain and no layer has a
bias, so every parameter is one of the tensors listed by
[`tensor_shapes()`][paradiff.model.tensor_shapes].
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import threading

from enum import Enum
from typing import Dict, Iterator, List, Mapping, Optional, Tuple, TYPE_CHECKING, Union

import numpy as np

from paradiff.diffusion_data import TokenSequence
from paradiff.helpers.constants import (
    BOS_ROLE,
    DEFAULT_SPECIAL_TOKENS,
    EOS_ROLE,
    MASK_ROLE,
    PAD_ROLE,
    RMS_NORM_EPS,
    SPECIAL_TOKEN_ROLES,
)
from paradiff.helpers.exceptions import (
    CacheMismatchError,
    ConfigError,
    SequenceLengthError,
    TokenRangeError,
)

if TYPE_CHECKING:
    from paradiff.diffusion_data import LossSpec
    from paradiff.prefill_cache import KVCache

_logger = logging.getLogger(__name__)

_GELU_C = math.sqrt(2.0 / math.pi)

TokensLike = Union[TokenSequence, np.ndarray, List[int]]
LayerKV = Tuple[np.ndarray, np.ndarray]
"""Keys and values of one layer, each of shape (B, H, T, head_dim)."""


class AttentionMode(Enum):
    """Which key positions a query may attend to."""

    CAUSAL = "causal"
    """Position `i` attends to positions `j <= i` only."""
    FULL = "full"
    """Every position attends to every valid position."""


@dataclasses.dataclass(frozen=True)
class ModelConfig:  # pylint: disable=too-many-instance-attributes
    """Architecture of the transformer."""

    vocab_size: int
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    max_seq_len: int = 64
    special_tokens: Dict[str, int] = dataclasses.field(
        default_factory=lambda: dict(DEFAULT_SPECIAL_TOKENS)
    )

    def __post_init__(self) -> None:
        """Validate the architecture.

        Raises:
            ConfigError: A size is not positive, `d_model` is not divisible by `n_heads`, or the
                special tokens are incomplete, repeated or outside the vocabulary.
        """
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                msg = f"{name} must be positive, got {getattr(self, name)}"
                raise ConfigError(msg)
        if self.d_model % self.n_heads:
            msg = f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            raise ConfigError(msg)
        missing = set(SPECIAL_TOKEN_ROLES) - set(self.special_tokens)
        if missing:
            msg = f"special_tokens is missing the roles {sorted(missing)}"
            raise ConfigError(msg)
        ids = [self.special_tokens[role] for role in SPECIAL_TOKEN_ROLES]
        if len(set(ids)) != len(ids) or not all(0 <= i < self.vocab_size for i in ids):
            msg = f"special token ids must be distinct and below vocab_size, got {ids}"
            raise ConfigError(msg)

    @property
    def head_dim(self) -> int:
        """Width of a single attention head."""
        return self.d_model // self.n_heads

    @property
    def mask_id(self) -> int:
        """Id of the `[MASK]` token."""
        return self.special_tokens[MASK_ROLE]

    @property
    def pad_id(self) -> int:
        """Id of the `[PAD]` token."""
        return self.special_tokens[PAD_ROLE]

    @property
    def bos_id(self) -> int:
        """Id of the `[BOS]` token."""
        return self.special_tokens[BOS_ROLE]

    @property
    def eos_id(self) -> int:
        """Id of the `[EOS]` token."""
        return self.special_tokens[EOS_ROLE]


def tensor_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Return the name and shape of every parameter tensor, in checkpoint order."""
    d, f = config.d_model, config.d_ff
    shapes: Dict[str, Tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_seq_len, d),
    }
    for layer in range(config.n_layers):
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"layers.{layer}.{name}"] = (d, d)
        shapes[f"layers.{layer}.w1"] = (d, f)
        shapes[f"layers.{layer}.w2"] = (f, d)
    shapes["lm_head"] = (d, config.vocab_size)
    return shapes


class ModelParams:
    """The weights of a model together with its configuration.

    Inference never writes to the arrays, so one instance may serve many concurrent decodes. The
    trainer updates them in place and calls
    [`invalidate_fingerprint()`][paradiff.model.ModelParams.invalidate_fingerprint] afterwards.
    """

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray]) -> None:
        """Wrap existing tensors.

        Args:
            config: The architecture.
            tensors: One array per entry of [`tensor_shapes()`][paradiff.model.tensor_shapes].

        Raises:
            ConfigError: A tensor is missing, unexpected or of the wrong shape.
        """
        expected = tensor_shapes(config)
        if set(tensors) != set(expected):
            msg = (
                f"tensor names differ from the architecture: missing "
                f"{sorted(set(expected) - set(tensors))}, "
                f"unexpected {sorted(set(tensors) - set(expected))}"
            )
            raise ConfigError(msg)
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                msg = f"{name} has shape {tensors[name].shape}, expected {shape}"
                raise ConfigError(msg)
        self.config = config
        self.tensors: Dict[str, np.ndarray] = {name: tensors[name] for name in expected}
        self._fingerprint: Optional[str] = None
        self._fingerprint_lock = threading.Lock()

    def __getitem__(self, name: str) -> np.ndarray:
        """Return the tensor with the given name."""
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        """Iterate over the tensor names in checkpoint order."""
        return iter(self.tensors)

    @property
    def dtype(self) -> np.dtype:  # pyright: ignore[reportMissingTypeArgument]
        """The floating point type of the weights."""
        return self.tensors["tok_emb"].dtype

    @property
    def num_parameters(self) -> int:
        """The total number of scalar parameters."""
        return sum(int(t.size) for t in self.tensors.values())

    def astype(self, dtype: type) -> ModelParams:
        """Return a copy with every tensor converted to `dtype`."""
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> ModelParams:
        """Return a deep copy."""
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def all_finite(self) -> bool:
        """Return True when no tensor holds NaN or infinite values."""
        return all(bool(np.isfinite(t).all()) for t in self.tensors.values())

    def fingerprint(self) -> str:
        """Return a SHA-256 digest of the configuration and every tensor's bytes."""
        with self._fingerprint_lock:
            if self._fingerprint is None:
                digest = hashlib.sha256(repr(dataclasses.astuple(self.config)).encode())
                for name, tensor in self.tensors.items():
                    digest.update(name.encode())
                    digest.update(str(tensor.dtype).encode())
                    digest.update(np.ascontiguousarray(tensor).tobytes())
                self._fingerprint = digest.hexdigest()
            return self._fingerprint

    def invalidate_fingerprint(self) -> None:
        """Forget the memoized fingerprint after the tensors were modified in place."""
        with self._fingerprint_lock:
            self._fingerprint = None


def init_params(config: ModelConfig, seed: int, dtype: type = np.float32) -> ModelParams:
    """Create weights drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.

    Embedding tables use the model width as their fan-in.

    Args:
        config: The architecture.
        seed: The seed of the generator.
        dtype: The floating point type of the weights.

    Returns:
        The new parameters.
    """
    rng = np.random.default_rng(seed)
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(config).items():
        fan_in = config.d_model if name in {"tok_emb", "pos_emb"} else shape[0]
        bound = 1.0 / math.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelParams(config, tensors)


@dataclasses.dataclass
class OpCounter:
    """Counts forward passes and attention-score entries.

    One forward pass over `B` sequences with `Tq` query rows and `Tk` key columns adds
    `B * Tq * Tk` score entries; layers and heads multiply every configuration equally and are
    not counted.
    """

    forward_passes: int = 0
    score_entries: int = 0
    _lock: threading.Lock = dataclasses.field(
        default_factory=threading.Lock, init=False, repr=False, compare=False
    )

    def record(self, batch: int, queries: int, keys: int) -> None:
        """Add one forward pass."""
        with self._lock:
            self.forward_passes += 1
            self.score_entries += batch * queries * keys

    def add(self, forward_passes: int, score_entries: int) -> None:
        """Add the totals of another counter."""
        with self._lock:
            self.forward_passes += forward_passes
            self.score_entries += score_entries

    def snapshot(self) -> Tuple[int, int]:
        """Return `(forward_passes, score_entries)`."""
        with self._lock:
            return self.forward_passes, self.score_entries


####################################################################################################
# Building blocks
####################################################################################################
def _rms_norm(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    scale = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + RMS_NORM_EPS)
    return x * scale, scale


def _rms_norm_backward(grad: np.ndarray, x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    # dx = s * (dy - (s^2 / D) * x * <x, dy>)
    width = x.shape[-1]
    dot = (x * grad).sum(axis=-1, keepdims=True)
    return scale * (grad - (scale * scale / width) * x * dot)


def _gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + 0.044715 * u**3)))


def _gelu_backward(grad: np.ndarray, u: np.ndarray) -> np.ndarray:
    inner = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return grad * (0.5 * (1.0 + inner) + 0.5 * u * (1.0 - inner * inner) * d_inner)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    batch, length, width = x.shape
    return x.reshape(batch, length, n_heads, width // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    batch, heads, length, width = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, length, heads * width)


def _attention_bias(
    mode: AttentionMode,
    queries: int,
    offset: int,
    key_lengths: np.ndarray,
    keys: int,
    dtype: np.dtype,  # pyright: ignore[reportMissingTypeArgument]
) -> Optional[np.ndarray]:
    """Return the additive mask of shape (B, 1, Tq, Tk), 0 where allowed and -inf elsewhere.

    None means every query sees every key.
    """
    if (key_lengths == keys).all() and (
        mode is AttentionMode.FULL or (queries == 1 and offset + 1 == keys)
    ):
        return None
    key_pos = np.arange(keys)
    allowed = key_pos[np.newaxis, :] < key_lengths[:, np.newaxis]  # (B, Tk)
    allowed = np.broadcast_to(allowed[:, np.newaxis, :], (len(key_lengths), queries, keys))
    if mode is AttentionMode.CAUSAL:
        query_pos = offset + np.arange(queries)
        allowed = allowed & (key_pos[np.newaxis, :] <= query_pos[:, np.newaxis])
    bias = np.where(allowed, 0.0, -np.inf).astype(dtype)
    return bias[:, np.newaxis]


@dataclasses.dataclass
class _LayerTrace:  # pylint: disable=too-many-instance-attributes
    h_in: np.ndarray
    norm1: np.ndarray
    scale1: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    mixed: np.ndarray
    h_mid: np.ndarray
    norm2: np.ndarray
    scale2: np.ndarray
    pre_act: np.ndarray
    act: np.ndarray


@dataclasses.dataclass
class ForwardTrace:
    """Everything a forward pass computed: the logits, each layer's new K/V and activations."""

    logits: np.ndarray
    """Shape (B, Tq, V)."""
    kv: List[LayerKV]
    """Keys and values of the processed positions only, per layer."""
    tokens: np.ndarray
    layers: List[_LayerTrace]
    final_in: np.ndarray
    final_norm: np.ndarray
    final_scale: np.ndarray


def as_token_batch(tokens: TokensLike) -> Tuple[np.ndarray, bool]:
    """Return tokens as a (B, T) integer array and whether the input was a single sequence."""
    if isinstance(tokens, TokenSequence):
        array = tokens.tokens
    else:
        array = np.asarray(tokens, dtype=np.int64)
    if array.ndim == 1:
        return array[np.newaxis], True
    return array, False


def forward_trace(  # noqa: PLR0913
    params: ModelParams,
    tokens: np.ndarray,
    mode: AttentionMode,
    *,
    lengths: Optional[np.ndarray] = None,
    past: Optional[List[LayerKV]] = None,
    counter: Optional[OpCounter] = None,
    keep_activations: bool = True,
) -> ForwardTrace:
    """Run the model on a batch and keep what the backward pass and the KV cache need.

    Args:
        params: The weights.
        tokens: Token ids of shape (B, T); with `past` these are the positions after the past.
        mode: The attention mode.
        lengths: Valid length of every row (right padding), defaults to full rows.
        past: Keys and values of `P` earlier positions per layer; positions are offset by `P`.
        counter: Receives one forward pass and its score entries.
        keep_activations: Keep the activations needed by the backward pass.

    Returns:
        The trace of the pass.

    Raises:
        SequenceLengthError: The positions would exceed `max_seq_len`.
        TokenRangeError: A token id is outside the vocabulary.
    """
    config = params.config
    batch, length = tokens.shape
    offset = 0 if past is None else int(past[0][0].shape[2])
    if offset + length > config.max_seq_len:
        msg = f"{offset + length} positions exceed max_seq_len={config.max_seq_len}"
        raise SequenceLengthError(msg)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        msg = f"token ids must be in [0, {config.vocab_size})"
        raise TokenRangeError(msg)
    if lengths is None:
        lengths = np.full(batch, length, dtype=np.int64)
    key_lengths = offset + np.asarray(lengths)
    bias = _attention_bias(mode, length, offset, key_lengths, offset + length, params.dtype)
    scale = 1.0 / math.sqrt(config.head_dim)
    if counter is not None:
        counter.record(batch, length, offset + length)

    h = params["tok_emb"][tokens] + params["pos_emb"][offset : offset + length][np.newaxis]
    layers: List[_LayerTrace] = []
    kv: List[LayerKV] = []
    for layer in range(config.n_layers):
        prefix = f"layers.{layer}."
        norm1, scale1 = _rms_norm(h)
        q = _split_heads(norm1 @ params[prefix + "wq"], config.n_heads)
        k = _split_heads(norm1 @ params[prefix + "wk"], config.n_heads)
        v = _split_heads(norm1 @ params[prefix + "wv"], config.n_heads)
        kv.append((k, v))
        if past is not None:
            past_k, past_v = past[layer]
            if past_k.shape[0] != batch:
                past_k = np.broadcast_to(past_k, (batch, *past_k.shape[1:]))
                past_v = np.broadcast_to(past_v, (batch, *past_v.shape[1:]))
            k_all = np.concatenate([past_k, k], axis=2)
            v_all = np.concatenate([past_v, v], axis=2)
        else:
            k_all, v_all = k, v
        scores = (q @ k_all.transpose(0, 1, 3, 2)) * scale
        if bias is not None:
            scores += bias
        attn = np.exp(scores - scores.max(axis=-1, keepdims=True))
        attn /= attn.sum(axis=-1, keepdims=True)
        mixed = _merge_heads(attn @ v_all)
        h_mid = h + mixed @ params[prefix + "wo"]
        norm2, scale2 = _rms_norm(h_mid)
        pre_act = norm2 @ params[prefix + "w1"]
        act = _gelu(pre_act)
        h_out = h_mid + act @ params[prefix + "w2"]
        if keep_activations:
            layers.append(
                _LayerTrace(
                    h, norm1, scale1, q, k, v, attn, mixed, h_mid, norm2, scale2, pre_act, act
                )
            )
        h = h_out
    final_norm, final_scale = _rms_norm(h)
    logits = final_norm @ params["lm_head"]
    return ForwardTrace(logits, kv, tokens, layers, h, final_norm, final_scale)


def forward(  # noqa: PLR0913
    params: ModelParams,
    tokens: TokensLike,
    mode: AttentionMode,
    cache: Optional[KVCache] = None,
    *,
    lengths: Optional[np.ndarray] = None,
    counter: Optional[OpCounter] = None,
) -> np.ndarray:
    """Compute the logits of a sequence or a right-padded batch.

    Examples:
        >>> config = ModelConfig(vocab_size=8, n_layers=1, n_heads=1, d_model=4, d_ff=8)
        >>> forward(init_params(config, seed=0), [2], AttentionMode.CAUSAL).shape
        (1, 8)

    Args:
        params: The weights.
        tokens: A sequence of shape (T,) or a batch of shape (B, T).
        mode: The attention mode.
        cache: Keys and values of a prompt that `tokens` starts with; only the rows after the
            prompt are computed then.
        lengths: Valid length of every batch row.
        counter: Receives the forward pass and its attention-score entries.

    Returns:
        Logits of shape (T, V) for a sequence, (B, T, V) for a batch; with a cache the rows of the
            cached prompt are left out.

    Raises:
        CacheMismatchError: The cache was built under another mode, from other params, or from a
            prompt that `tokens` does not start with.
    """
    batch, single = as_token_batch(tokens)
    past = None
    if cache is not None:
        cache.check(params, mode, batch)
        batch = batch[:, cache.prompt_length :]
        past = cache.layers
        if lengths is not None:
            lengths = np.asarray(lengths) - cache.prompt_length
        if batch.shape[1] == 0:
            msg = "a cache must cover a strict prefix of the tokens"
            raise CacheMismatchError(msg)
    trace = forward_trace(
        params, batch, mode, lengths=lengths, past=past, counter=counter, keep_activations=False
    )
    return trace.logits[0] if single else trace.logits


def backward(
    params: ModelParams,
    tokens: TokensLike,
    mode: AttentionMode,
    loss_spec: LossSpec,
    *,
    lengths: Optional[np.ndarray] = None,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Differentiate a loss with respect to every parameter tensor.

    Args:
        params: The weights.
        tokens: The model input, a sequence or a (B, T) batch matching the loss targets.
        mode: The attention mode.
        loss_spec: The loss, an [`ARLossSpec`][paradiff.diffusion_data.ARLossSpec] or a
            [`DiffusionLossSpec`][paradiff.diffusion_data.DiffusionLossSpec].
        lengths: Valid length of every batch row.

    Returns:
        The loss value and one gradient per tensor name, each of the tensor's shape.
    """
    batch, _ = as_token_batch(tokens)
    trace = forward_trace(params, batch, mode, lengths=lengths)
    loss, d_logits = loss_spec.loss_and_grad(trace.logits)
    d_logits = d_logits.astype(params.dtype, copy=False)
    config = params.config
    scale = 1.0 / math.sqrt(config.head_dim)
    grads: Dict[str, np.ndarray] = {}

    width = config.d_model
    grads["lm_head"] = trace.final_norm.reshape(-1, width).T @ d_logits.reshape(
        -1, config.vocab_size
    )
    d_h = _rms_norm_backward(d_logits @ params["lm_head"].T, trace.final_in, trace.final_scale)
    for layer in reversed(range(config.n_layers)):
        prefix = f"layers.{layer}."
        act = trace.layers[layer]
        # feed-forward
        grads[prefix + "w2"] = act.act.reshape(-1, config.d_ff).T @ d_h.reshape(-1, width)
        d_pre = _gelu_backward(d_h @ params[prefix + "w2"].T, act.pre_act)
        grads[prefix + "w1"] = act.norm2.reshape(-1, width).T @ d_pre.reshape(-1, config.d_ff)
        d_h = d_h + _rms_norm_backward(d_pre @ params[prefix + "w1"].T, act.h_mid, act.scale2)
        # attention
        grads[prefix + "wo"] = act.mixed.reshape(-1, width).T @ d_h.reshape(-1, width)
        d_out = _split_heads(d_h @ params[prefix + "wo"].T, config.n_heads)
        d_attn = d_out @ act.v.transpose(0, 1, 3, 2)
        d_v = act.attn.transpose(0, 1, 3, 2) @ d_out
        d_scores = act.attn * (d_attn - (act.attn * d_attn).sum(axis=-1, keepdims=True))
        d_q = _merge_heads(scale * (d_scores @ act.k))
        d_k = _merge_heads(scale * (d_scores.transpose(0, 1, 3, 2) @ act.q))
        d_v = _merge_heads(d_v)
        flat_norm = act.norm1.reshape(-1, width)
        grads[prefix + "wq"] = flat_norm.T @ d_q.reshape(-1, width)
        grads[prefix + "wk"] = flat_norm.T @ d_k.reshape(-1, width)
        grads[prefix + "wv"] = flat_norm.T @ d_v.reshape(-1, width)
        d_norm = (
            d_q @ params[prefix + "wq"].T
            + d_k @ params[prefix + "wk"].T
            + d_v @ params[prefix + "wv"].T
        )
        d_h = d_h + _rms_norm_backward(d_norm, act.h_in, act.scale1)

    d_tok = np.zeros_like(params["tok_emb"])
    np.add.at(d_tok, trace.tokens.reshape(-1), d_h.reshape(-1, width))
    grads["tok_emb"] = d_tok
    d_pos = np.zeros_like(params["pos_emb"])
    d_pos[: trace.tokens.shape[1]] = d_h.sum(axis=0)
    grads["pos_emb"] = d_pos
    return loss, {name: grads[name] for name in params}


def loss_value(
    params: ModelParams,
    tokens: TokensLike,
    mode: AttentionMode,
    loss_spec: LossSpec,
    *,
    lengths: Optional[np.ndarray] = None,
) -> float:
    """Evaluate a loss without differentiating it."""
    batch, _ = as_token_batch(tokens)
    trace = forward_trace(params, batch, mode, lengths=lengths, keep_activations=False)
    return loss_spec.loss_and_grad(trace.logits)[0]


def gradient_check(  # noqa: PLR0913
    params: ModelParams,
    tokens: TokensLike,
    mode: AttentionMode,
    loss_spec: LossSpec,
    *,
    epsilon: float = 1e-5,
    lengths: Optional[np.ndarray] = None,
) -> Dict[str, float]:
    """Compare the analytic gradient with central finite differences over every parameter.

    The comparison runs in float64. The error of a tensor is
    `||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12)`.

    Args:
        params: The weights, converted to float64 internally.
        tokens: The model input.
        mode: The attention mode.
        loss_spec: The loss.
        epsilon: The finite-difference step.
        lengths: Valid length of every batch row.

    Returns:
        The relative error per tensor name.
    """
    params64 = params.astype(np.float64)
    _, analytic = backward(params64, tokens, mode, loss_spec, lengths=lengths)
    errors: Dict[str, float] = {}
    for name in params64:
        tensor = params64[name]
        numeric = np.zeros_like(tensor)
        for index in np.ndindex(*tensor.shape):
            original = tensor[index]
            tensor[index] = original + epsilon
            plus = loss_value(params64, tokens, mode, loss_spec, lengths=lengths)
            tensor[index] = original - epsilon
            minus = loss_value(params64, tokens, mode, loss_spec, lengths=lengths)
            tensor[index] = original
            numeric[index] = (plus - minus) / (2.0 * epsilon)
        denominator = max(
            float(np.linalg.norm(analytic[name]) + np.linalg.norm(numeric)), 1e-12
        )
        errors[name] = float(np.linalg.norm(analytic[name] - numeric)) / denominator
        _logger.debug("gradient check %s: relative error %.3e", name, errors[name])
    return errors
