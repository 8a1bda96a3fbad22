"""Autoregressive-then-diffusion training.

Phase I trains next-token prediction under causal attention on the autoregressive form of the
corpus. Phase II switches to full attention and the reweighted masked loss on the padded
diffusion form. The pure-diffusion recipe runs Phase II alone.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import queue
import threading
import time

from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from paradiff.checkpoint import save_checkpoint
from paradiff.diffusion_data import (
    ARLossSpec,
    corrupt,
    CorpusRecord,
    DiffusionLossSpec,
    LossSpec,
    pad_batch,
    prepare_diffusion_sample,
    sample_t,
)
from paradiff.helpers.config import dataclass_to_table
from paradiff.helpers.constants import DEFAULT_T_EPSILON
from paradiff.helpers.exceptions import (
    ConfigError,
    NonFiniteError,
    SequenceLengthError,
    TrainingDivergedError,
)
from paradiff.helpers.logging import configure_logging, timed
from paradiff.model import AttentionMode, backward, ModelParams

_logger = logging.getLogger(__name__)


class Phase(Enum):
    """Training phase, it fixes the attention mode and the loss."""

    AR = "ar"
    """Causal attention, next-token loss."""
    DIFFUSION = "diffusion"
    """Full attention, reweighted masked loss."""

    @property
    def attention_mode(self) -> AttentionMode:
        """The attention mode the phase trains under."""
        return AttentionMode.CAUSAL if self is Phase.AR else AttentionMode.FULL


class LRSchedule(Enum):
    """Learning-rate schedule."""

    LINEAR_DECAY = "linear_decay"
    """Linear warmup from 0, then linear decay to 0 at the final step."""


class Recipe(Enum):
    """Training recipe of [`run_pipeline()`][paradiff.trainer.run_pipeline]."""

    HYBRID = "hybrid"
    """Phase I followed by Phase II."""
    PURE_DIFFUSION = "pure-diffusion"
    """Phase II only."""


@dataclasses.dataclass(frozen=True)
class TrainConfig:  # pylint: disable=too-many-instance-attributes
    """Hyper-parameters of one training phase."""

    phase: Phase = Phase.AR
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 1
    steps: Optional[int] = None
    """Number of updates; when absent it is `epochs` passes over the corpus, 0 skips the phase."""
    warmup_ratio: float = 0.05
    lr_schedule: LRSchedule = LRSchedule.LINEAR_DECAY
    max_grad_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    t_epsilon: float = DEFAULT_T_EPSILON
    """Lower bound of the diffusion time step."""
    log_every: int = 50
    prefetch: int = 4
    """Batches prepared ahead of the optimizer by the producer thread."""
    seed: int = 0

    def __post_init__(self) -> None:
        """Validate the ranges.

        Raises:
            ConfigError: A value is outside its range.
        """
        checks = {
            "learning_rate must be >= 0": self.learning_rate >= 0.0,
            "batch_size must be >= 1": self.batch_size >= 1,
            "epochs must be >= 1": self.epochs >= 1,
            "steps must be >= 0": self.steps is None or self.steps >= 0,
            "warmup_ratio must be in [0, 1)": 0.0 <= self.warmup_ratio < 1.0,
            "max_grad_norm must be > 0": self.max_grad_norm > 0.0,
            "t_epsilon must be in [0, 1)": 0.0 <= self.t_epsilon < 1.0,
            "log_every must be >= 1": self.log_every >= 1,
            "prefetch must be >= 1": self.prefetch >= 1,
        }
        failed = [message for message, ok in checks.items() if not ok]
        if failed:
            msg = "; ".join(failed)
            raise ConfigError(msg)

    def total_steps(self, corpus_size: int) -> int:
        """Return the number of updates on a corpus of the given size."""
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(corpus_size / self.batch_size)

    def warmup_steps(self, total: int) -> int:
        """Return the number of warmup updates, always below `total` when `total` > 0."""
        return int(self.warmup_ratio * total)


def linear_schedule(step: int, total: int, warmup: int, base_lr: float) -> float:
    """Return the learning rate of a zero-based step.

    Examples:
        >>> [linear_schedule(s, 5, 2, 1.0) for s in range(5)]
        [0.0, 0.5, 1.0, 0.5, 0.0]

    Args:
        step: The zero-based update index.
        total: The number of updates.
        warmup: The number of warmup updates, below `total`.
        base_lr: The peak learning rate.

    Returns:
        `base_lr * step / warmup` during warmup, then a linear decay reaching 0 at `total - 1`.
    """
    if step < warmup:
        return base_lr * step / warmup
    if total - 1 == warmup:
        return base_lr
    return base_lr * (total - 1 - step) / (total - 1 - warmup)


class AdamW:
    """Adam with decoupled weight decay.

    Updates a [`ModelParams`][paradiff.model.ModelParams] in place.
    """

    def __init__(self, params: ModelParams, cfg: TrainConfig) -> None:
        """Create zero moment estimates for every tensor."""
        self.params = params
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.adam_eps
        self.weight_decay = cfg.weight_decay
        self.step_count = 0
        self.first: Dict[str, np.ndarray] = {n: np.zeros_like(t) for n, t in params.tensors.items()}
        self.second: Dict[str, np.ndarray] = {
            n: np.zeros_like(t) for n, t in params.tensors.items()
        }

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        """Apply one update."""
        self.step_count += 1
        correction1 = 1.0 - self.beta1**self.step_count
        correction2 = 1.0 - self.beta2**self.step_count
        for name, grad in grads.items():
            self.first[name] = self.beta1 * self.first[name] + (1.0 - self.beta1) * grad
            self.second[name] = self.beta2 * self.second[name] + (1.0 - self.beta2) * grad * grad
            if lr == 0.0:
                continue
            tensor = self.params[name]
            update = (self.first[name] / correction1) / (
                np.sqrt(self.second[name] / correction2) + self.eps
            )
            if self.weight_decay:
                update = update + self.weight_decay * tensor
            tensor -= (lr * update).astype(tensor.dtype)
        self.params.invalidate_fingerprint()


def clip_grad_norm(
    grads: Dict[str, np.ndarray], max_norm: float
) -> Tuple[Dict[str, np.ndarray], float, float]:
    """Scale gradients so that their global L2 norm is at most `max_norm`.

    Returns:
        The clipped gradients, the norm before clipping and the norm after clipping.
    """
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    scale = min(1.0, max_norm / (norm + 1e-6))
    if scale < 1.0:
        grads = {name: (g * scale).astype(g.dtype) for name, g in grads.items()}
    return grads, norm, norm * scale


####################################################################################################
# Batches
####################################################################################################
@dataclasses.dataclass(frozen=True, eq=False)
class Batch:
    """Model input and loss of one update."""

    ids: Tuple[int, ...]
    """Corpus indices of the samples."""
    tokens: np.ndarray
    lengths: np.ndarray
    loss_spec: LossSpec


def make_batch(
    records: Sequence[CorpusRecord],
    ids: Sequence[int],
    phase: Phase,
    rng: np.random.Generator,
    params: ModelParams,
    t_epsilon: float = DEFAULT_T_EPSILON,
) -> Batch:
    """Prepare one batch in the form the phase trains on.

    AR batches use the autoregressive form. Diffusion batches draw fresh pad counts, a time step
    per sequence and the absorbed positions.

    Raises:
        SequenceLengthError: A prepared sequence exceeds `max_seq_len`.
    """
    config = params.config
    sequences = [records[i].to_sequence(config.special_tokens) for i in ids]
    if phase is Phase.AR:
        inputs = [seq.tokens for seq in sequences]
        spec: LossSpec = ARLossSpec.from_sequences(sequences)
    else:
        sequences = [prepare_diffusion_sample(s, rng, config.special_tokens) for s in sequences]
        samples = [
            corrupt(seq, sample_t(rng, t_epsilon), rng, mask_id=config.mask_id)
            for seq in sequences
        ]
        inputs = [sample.x_t for sample in samples]
        spec = DiffusionLossSpec.from_samples(samples, sequences)
    longest = max(len(seq) for seq in sequences)
    if longest > config.max_seq_len:
        msg = f"a training sequence of {longest} tokens exceeds max_seq_len={config.max_seq_len}"
        raise SequenceLengthError(msg)
    tokens, lengths = pad_batch(inputs, config.pad_id)
    return Batch(tuple(ids), tokens, lengths, spec)


class BatchProducer:
    """Prepares batches on a background thread and hands them over in order.

    A single producer consumes one random stream in a fixed order, so runs are reproducible
    regardless of thread timing.
    """

    _DONE = object()

    def __init__(
        self,
        records: Sequence[CorpusRecord],
        params: ModelParams,
        cfg: TrainConfig,
        total_steps: int,
    ) -> None:
        """Start the producer thread."""
        self._records = records
        self._params = params
        self._cfg = cfg
        self._total_steps = total_steps
        self._queue: queue.Queue[Any] = queue.Queue(maxsize=cfg.prefetch)
        self._stop = threading.Event()
        self.thread = threading.Thread(target=self._run, args=(), name="batch-producer")
        self.thread.daemon = True
        self.thread.start()

    def _indices(self, rng: np.random.Generator) -> "Any":
        while True:
            yield from rng.permutation(len(self._records)).tolist()

    def _put(self, item: Any) -> bool:
        """Hand an item over unless the consumer stopped, returning whether it was queued."""
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
            except queue.Full:
                continue
            return True
        return False

    def _run(self) -> None:
        rng = np.random.default_rng(self._cfg.seed)
        order = self._indices(rng)
        try:
            for _ in range(self._total_steps):
                ids = [next(order) for _ in range(min(self._cfg.batch_size, len(self._records)))]
                batch = make_batch(
                    self._records, ids, self._cfg.phase, rng, self._params, self._cfg.t_epsilon
                )
                if not self._put(batch):
                    return
            self._put(self._DONE)
        except Exception as error:  # noqa: BLE001
            self._put(error)

    def __iter__(self) -> "Any":
        """Yield the batches; errors of the producer are raised here."""
        while True:
            item = self._queue.get()
            if item is self._DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item

    def close(self) -> None:
        """Stop the producer thread."""
        self._stop.set()
        self.thread.join(timeout=5.0)


####################################################################################################
# Phases
####################################################################################################
@dataclasses.dataclass
class TrainReport:
    """Trace of one training phase."""

    phase: Phase
    config: TrainConfig
    losses: List[float] = dataclasses.field(default_factory=list)
    grad_norms: List[float] = dataclasses.field(default_factory=list)
    """Global gradient norms after clipping."""
    learning_rates: List[float] = dataclasses.field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: Optional[str] = None

    @property
    def steps(self) -> int:
        """The number of updates applied."""
        return len(self.losses)

    def write_jsonl(self, path: Union[str, Path]) -> Path:
        """Write one record per step followed by a summary record."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as file:
            for step, (loss, norm, lr) in enumerate(
                zip(self.losses, self.grad_norms, self.learning_rates)
            ):
                record = {"phase": self.phase.value, "step": step, "loss": loss, "grad_norm": norm}
                record["lr"] = lr
                file.write(json.dumps(record) + "\n")
            summary = {
                "phase": self.phase.value,
                "steps": self.steps,
                "final_loss": self.losses[-1] if self.losses else None,
                "wall_clock": self.wall_clock,
                "checkpoint": self.checkpoint,
                "config": dataclass_to_table(self.config),
            }
            file.write(json.dumps(summary) + "\n")
        return path


def train_phase(
    params: ModelParams,
    corpus: Sequence[CorpusRecord],
    cfg: TrainConfig,
    *,
    checkpoint_path: Optional[Union[str, Path]] = None,
) -> Tuple[ModelParams, TrainReport]:
    """Train a copy of `params` for one phase.

    Args:
        params: The starting weights, left unchanged.
        corpus: The training records; they are converted to the form the phase needs.
        cfg: The phase configuration.
        checkpoint_path: Where to save the trained weights, if given.

    Returns:
        The trained weights and the report of the phase.

    Raises:
        TrainingDivergedError: The loss or the gradient became NaN or infinite.
        ConfigError: The corpus is empty.
    """
    if not corpus:
        msg = "cannot train on an empty corpus"
        raise ConfigError(msg)
    params = params.copy()
    total = cfg.total_steps(len(corpus))
    warmup = cfg.warmup_steps(total)
    report = TrainReport(phase=cfg.phase, config=cfg)
    if total == 0:
        _logger.info("%s phase skipped (0 steps)", cfg.phase.value)
        return params, report
    optimizer = AdamW(params, cfg)
    mode = cfg.phase.attention_mode
    _logger.info(
        "%s phase: %d steps (%d warmup), lr=%g, batch=%d, %d samples",
        cfg.phase.value,
        total,
        warmup,
        cfg.learning_rate,
        cfg.batch_size,
        len(corpus),
    )
    producer = BatchProducer(corpus, params.copy(), cfg, total)
    try:
        with timed(f"{cfg.phase.value} phase", logger=_logger, level=logging.INFO) as watch:
            for step, batch in enumerate(producer):
                try:
                    loss, grads = backward(
                        params, batch.tokens, mode, batch.loss_spec, lengths=batch.lengths
                    )
                except NonFiniteError as error:
                    raise TrainingDivergedError(step, batch.ids, float("nan")) from error
                if not math.isfinite(loss) or not all(
                    bool(np.isfinite(g).all()) for g in grads.values()
                ):
                    raise TrainingDivergedError(step, batch.ids, loss)
                grads, raw_norm, norm = clip_grad_norm(grads, cfg.max_grad_norm)
                lr = linear_schedule(step, total, warmup, cfg.learning_rate)
                optimizer.step(grads, lr)
                report.losses.append(loss)
                report.grad_norms.append(norm)
                report.learning_rates.append(lr)
                _logger.debug(
                    "step %d: loss=%.6f lr=%.3g grad_norm=%.4f (raw %.4f)",
                    step,
                    loss,
                    lr,
                    norm,
                    raw_norm,
                )
                if (step + 1) % cfg.log_every == 0 or step + 1 == total:
                    _logger.info("%s step %d/%d: loss=%.4f", cfg.phase.value, step + 1, total, loss)
    finally:
        producer.close()
    report.wall_clock = watch.elapsed
    if not params.all_finite():
        raise TrainingDivergedError(total - 1, (), float("nan"))
    if checkpoint_path is not None:
        report.checkpoint = str(
            save_checkpoint(
                checkpoint_path,
                params,
                {"phase": cfg.phase.value, "steps": total, "seed": cfg.seed},
            )
        )
    return params, report


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    """The phase configurations of both recipes."""

    ar: TrainConfig = TrainConfig(phase=Phase.AR)  # noqa: RUF009
    diffusion: TrainConfig = TrainConfig(  # noqa: RUF009
        phase=Phase.DIFFUSION, learning_rate=1e-4, max_grad_norm=0.1
    )
    pure_diffusion: Optional[TrainConfig] = None
    """Config of the pure-diffusion arm; derived from `diffusion` when absent."""
    match_budget: bool = True
    """Give the pure-diffusion arm as many updates as both hybrid phases together."""

    def __post_init__(self) -> None:
        """Check the phases of the tables.

        Raises:
            ConfigError: A table trains the wrong phase.
        """
        if self.ar.phase is not Phase.AR:
            msg = "the ar config must train the AR phase"
            raise ConfigError(msg)
        for name in ("diffusion", "pure_diffusion"):
            value = getattr(self, name)
            if value is not None and value.phase is not Phase.DIFFUSION:
                msg = f"the {name} config must train the diffusion phase"
                raise ConfigError(msg)

    def pure_diffusion_config(self, corpus_size: int) -> TrainConfig:
        """Return the config of the pure-diffusion arm.

        Without an explicit table it is the diffusion config at the Phase I learning rate.
        """
        cfg = self.pure_diffusion or dataclasses.replace(
            self.diffusion, learning_rate=self.ar.learning_rate
        )
        if self.match_budget:
            steps = self.ar.total_steps(corpus_size) + self.diffusion.total_steps(corpus_size)
            cfg = dataclasses.replace(cfg, steps=steps)
        return cfg


@dataclasses.dataclass
class PipelineResult:
    """Output of [`run_pipeline()`][paradiff.trainer.run_pipeline]."""

    recipe: Recipe
    params: ModelParams
    reports: List[TrainReport]

    @property
    def total_updates(self) -> int:
        """Updates applied over all phases."""
        return sum(report.steps for report in self.reports)


def run_pipeline(
    recipe: Recipe,
    params: ModelParams,
    corpus: Sequence[CorpusRecord],
    cfgs: PipelineConfig,
    *,
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> PipelineResult:
    """Train with a recipe.

    The optimizer state starts fresh in every phase.

    Args:
        recipe: Hybrid (AR then diffusion) or pure diffusion.
        params: The initial weights, left unchanged.
        corpus: The training records.
        cfgs: The phase configurations.
        checkpoint_dir: Directory receiving `<recipe>-<phase>.ckpt` after every phase.

    Returns:
        The final weights and one report per phase.

    Raises:
        ConfigError: The hybrid recipe's Phase II learning rate exceeds its Phase I rate.
    """
    # Configure logging in case it hasn't been done yet
    configure_logging()
    if recipe is Recipe.HYBRID:
        if cfgs.diffusion.learning_rate > cfgs.ar.learning_rate:
            msg = (
                f"Phase II learning rate ({cfgs.diffusion.learning_rate}) must not exceed the "
                f"Phase I learning rate ({cfgs.ar.learning_rate})"
            )
            raise ConfigError(msg)
        phases = [cfgs.ar, cfgs.diffusion]
    else:
        phases = [cfgs.pure_diffusion_config(len(corpus))]
    started = time.perf_counter()
    reports: List[TrainReport] = []
    for cfg in phases:
        path = (
            Path(checkpoint_dir) / f"{recipe.value}-{cfg.phase.value}.ckpt"
            if checkpoint_dir is not None
            else None
        )
        params, report = train_phase(params, corpus, cfg, checkpoint_path=path)
        reports.append(report)
    _logger.info(
        "%s recipe finished: %d updates in %.1fs",
        recipe.value,
        sum(r.steps for r in reports),
        time.perf_counter() - started,
    )
    return PipelineResult(recipe=recipe, params=params, reports=reports)
