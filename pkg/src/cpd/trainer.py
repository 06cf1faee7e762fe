"""End-to-end contrastive training with a two-stage schedule.

The loop assembles seeded batches, dispatches the configured objective,
backpropagates into both encoders, refreshes the memory bank, and validates
by cross-modal retrieval once per epoch. Stage 1 keeps the text encoder
frozen (it is pre-fit by a short autoencoding warmup, the stand-in for a
pre-trained language model); when validation recall stops improving the loop
unfreezes the text side at a reduced learning rate, and a second plateau
stops training. A direct mode trains both encoders from the start at the
stage-1 rate for baseline comparisons.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoders, objectives
from .data import PairedDataset
from .errors import InvalidConfigError, NumericFaultError
from .evaluation import retrieval_recall
from .memory_bank import MemoryBank, init_bank

Array = np.ndarray

OBJECTIVES = ("cpd_nce", "cpd_exact", "mmid", "ranking")
STAGE1 = "stage1"
STAGE2 = "stage2"
DIRECT = "direct"
WARMUP_MODES = ("autoencoder", "none")

METRICS_CSV_HEADER = "epoch,stage,objective,train_loss,recall1,recall5,wall_s"


@dataclass(frozen=True)
class TrainingConfig:
    objective: str = "cpd_nce"
    tau: float = 0.07
    m: int = 4096
    delta: float = 0.5
    batch_size: int = 10
    stage1_lr: float = 0.1
    stage2_lr_text: float = 3e-5
    stage2_lr_rest: float = 0.01
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    max_epochs: int = 300
    plateau_patience: int = 5
    plateau_min_delta: float = 0.002
    seed: int = 0
    bank_momentum: float = 0.5
    exclude_positive: bool = True
    direct_finetune: bool = False
    hidden_dim: int = 128
    embed_dim: int = 64
    text_warmup: str = "autoencoder"
    warmup_epochs: int = 60
    warmup_lr: float = 0.05

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise InvalidConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.tau <= 0:
            raise InvalidConfigError(f"tau must be > 0, got {self.tau}")
        if self.m < 1:
            raise InvalidConfigError(f"m must be >= 1, got {self.m}")
        if self.delta < 0:
            raise InvalidConfigError(f"delta must be >= 0, got {self.delta}")
        if self.batch_size < 1:
            raise InvalidConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("stage1_lr", "stage2_lr_text", "stage2_lr_rest", "warmup_lr"):
            if getattr(self, name) <= 0:
                raise InvalidConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 <= self.sgd_momentum < 1:
            raise InvalidConfigError(f"sgd_momentum must be in [0, 1), got {self.sgd_momentum}")
        if self.weight_decay < 0:
            raise InvalidConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.max_epochs < 1:
            raise InvalidConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.plateau_patience < 1:
            raise InvalidConfigError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if self.plateau_min_delta < 0:
            raise InvalidConfigError(f"plateau_min_delta must be >= 0, got {self.plateau_min_delta}")
        if not 0 <= self.bank_momentum <= 1:
            raise InvalidConfigError(f"bank_momentum must be in [0, 1], got {self.bank_momentum}")
        if self.hidden_dim < 1 or self.embed_dim < 1:
            raise InvalidConfigError("hidden_dim and embed_dim must be >= 1")
        if self.text_warmup not in WARMUP_MODES:
            raise InvalidConfigError(f"text_warmup must be one of {WARMUP_MODES}, got {self.text_warmup!r}")
        if self.warmup_epochs < 0:
            raise InvalidConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")


@dataclass(frozen=True)
class CurriculumState:
    """Plateau bookkeeping; ``stage`` only ever advances."""

    stage: str = STAGE1
    best_val_recall: float = -math.inf
    epochs_since_improvement: int = 0
    stop: bool = False


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    stage: str
    objective: str
    train_loss: float
    recall1: float
    recall5: float
    wall_s: float

    def csv_row(self) -> str:
        return (
            f"{self.epoch},{self.stage},{self.objective},{self.train_loss!r},"
            f"{self.recall1!r},{self.recall5!r},{self.wall_s!r}"
        )


@dataclass
class TrainerState:
    """Everything the loop mutates; deterministic given config and data."""

    visual: encoders.EncoderParams
    text: encoders.EncoderParams
    visual_opt: encoders.OptimizerState
    text_opt: encoders.OptimizerState
    bank: MemoryBank
    curriculum: CurriculumState
    shuffle_rng: np.random.Generator
    noise_rng: np.random.Generator
    z_vt: float | None = None
    z_tv: float | None = None
    epoch: int = 0

    def snapshot(self) -> "TrainerState":
        return TrainerState(
            visual=self.visual.copy(),
            text=self.text.copy(),
            visual_opt=self.visual_opt.copy(),
            text_opt=self.text_opt.copy(),
            bank=self.bank.copy(),
            curriculum=self.curriculum,
            shuffle_rng=copy.deepcopy(self.shuffle_rng),
            noise_rng=copy.deepcopy(self.noise_rng),
            z_vt=self.z_vt,
            z_tv=self.z_tv,
            epoch=self.epoch,
        )

    def restore(self, other: "TrainerState") -> None:
        self.visual = other.visual
        self.text = other.text
        self.visual_opt = other.visual_opt
        self.text_opt = other.text_opt
        self.bank = other.bank
        self.curriculum = other.curriculum
        self.shuffle_rng = other.shuffle_rng
        self.noise_rng = other.noise_rng
        self.z_vt = other.z_vt
        self.z_tv = other.z_tv
        self.epoch = other.epoch


@dataclass
class TrainingResult:
    visual: encoders.EncoderParams
    text: encoders.EncoderParams
    bank: MemoryBank
    history: list[MetricsRecord]
    state: TrainerState


def calibrate_z(bank_store: Array, queries: Array, tau: float) -> float:
    """Partition-constant estimate: mean over queries of sum_j exp(score_j/tau)."""
    if tau <= 0:
        raise InvalidConfigError(f"tau must be > 0, got {tau}")
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    if queries.shape[0] < 1:
        raise InvalidConfigError("need at least one calibration query")
    scores = queries @ np.asarray(bank_store, dtype=float).T / tau
    row_max = scores.max(axis=1, keepdims=True)
    z_rows = np.exp(row_max[:, 0]) * np.exp(scores - row_max).sum(axis=1)
    z = float(z_rows.mean())
    if not (np.isfinite(z) and z > 0):
        raise NumericFaultError(f"partition constant overflowed (z={z})")
    return z


def plateau_step(
    cur: CurriculumState, val_recall: float, patience: int, min_delta: float
) -> CurriculumState:
    """Advance the plateau state machine by one validation report.

    Improvement beyond ``best + min_delta`` resets the counter; a full
    patience window triggers the stage-1 -> stage-2 switch, or a stop when
    already past stage 1.
    """
    if patience < 1:
        raise InvalidConfigError(f"patience must be >= 1, got {patience}")
    if val_recall > cur.best_val_recall + min_delta:
        return CurriculumState(cur.stage, val_recall, 0, False)
    count = cur.epochs_since_improvement + 1
    if count < patience:
        return CurriculumState(cur.stage, cur.best_val_recall, count, False)
    if cur.stage == STAGE1:
        return CurriculumState(STAGE2, cur.best_val_recall, 0, False)
    return CurriculumState(cur.stage, cur.best_val_recall, count, True)


def batch_objective(
    objective: str,
    emb_v: Array,
    emb_t: Array,
    bank_rows: Array,
    bank: MemoryBank,
    config: TrainingConfig,
    noise_rng: np.random.Generator,
    z_vt: float | None,
    z_tv: float | None,
) -> tuple[float, Array, Array]:
    """Mean loss over one batch plus gradients w.r.t. both embedding batches.

    ``bank_rows`` holds each batch item's own bank index. This is the exact
    path the training loop uses, so tests can probe it directly.
    """
    n = emb_v.shape[0]
    grad_v = np.zeros_like(emb_v)
    grad_t = np.zeros_like(emb_t)
    if objective == "ranking":
        loss, grad_v, grad_t = objectives.ranking_loss(emb_v, emb_t, config.delta)
        return loss, grad_v, grad_t

    total = 0.0
    if objective == "cpd_exact":
        for j in range(n):
            loss_j, g_v, g_t = objectives.cpd_loss_exact(
                emb_v[j], emb_t[j], int(bank_rows[j]), bank.visual, bank.text, config.tau
            )
            total += loss_j
            grad_v[j] = g_v / n
            grad_t[j] = g_t / n
    elif objective == "mmid":
        for j in range(n):
            loss_j, g_v, g_t = objectives.mmid_loss_exact(
                emb_v[j], emb_t[j], int(bank_rows[j]), bank.visual, bank.text, config.tau
            )
            total += loss_j
            grad_v[j] = g_v / n
            grad_t[j] = g_t / n
    elif objective == "cpd_nce":
        cfg_vt = objectives.NceConfig(
            m=config.m,
            n_instances=bank.n_instances,
            z_estimate=z_vt,
            exclude_positive=config.exclude_positive,
        )
        cfg_tv = replace(cfg_vt, z_estimate=z_tv)
        for j in range(n):
            row = int(bank_rows[j])
            noise_idx = bank.sample_noise(config.m, row, config.exclude_positive, noise_rng)
            loss_vt, g_v = objectives.nce_loss(
                emb_v[j], bank.text[row], bank.text[noise_idx], cfg_vt, config.tau
            )
            noise_idx = bank.sample_noise(config.m, row, config.exclude_positive, noise_rng)
            loss_tv, g_t = objectives.nce_loss(
                emb_t[j], bank.visual[row], bank.visual[noise_idx], cfg_tv, config.tau
            )
            total += loss_vt + loss_tv
            grad_v[j] = g_v / n
            grad_t[j] = g_t / n
    else:
        raise InvalidConfigError(f"unknown objective {objective!r}")
    return total / n, grad_v, grad_t


def _stage_lrs(stage: str, config: TrainingConfig) -> tuple[float, float | None]:
    """(visual lr, text lr or None when the text encoder is frozen)."""
    if stage == STAGE1:
        return config.stage1_lr, None
    if stage == STAGE2:
        return config.stage2_lr_rest, config.stage2_lr_text
    return config.stage1_lr, config.stage1_lr


def _batch_slices(n: int, batch_size: int, needs_pairs: bool) -> list[slice]:
    slices = [slice(start, min(start + batch_size, n)) for start in range(0, n, batch_size)]
    # A trailing singleton has no in-batch negatives; fold it into its neighbor.
    if needs_pairs and len(slices) > 1 and slices[-1].stop - slices[-1].start < 2:
        last = slices.pop()
        prev = slices.pop()
        slices.append(slice(prev.start, last.stop))
    return slices


def train_epoch(state: TrainerState, data: PairedDataset, config: TrainingConfig) -> MetricsRecord:
    """One seeded pass over the training split.

    On a non-finite loss the epoch aborts with :class:`NumericFaultError`
    and the state is rolled back to its value at entry.
    """
    t0 = time.perf_counter()
    entry = state.snapshot()
    try:
        train_idx = data.splits["train"]
        order = state.shuffle_rng.permutation(train_idx.shape[0])
        stage = state.curriculum.stage
        lr_visual, lr_text = _stage_lrs(stage, config)
        if config.objective == "cpd_nce" and (state.z_vt is None or state.z_tv is None):
            raise InvalidConfigError("cpd_nce requires calibrated partition constants")

        total_loss = 0.0
        total_items = 0
        for sl in _batch_slices(order.shape[0], config.batch_size, config.objective == "ranking"):
            bank_rows = order[sl]
            rows = train_idx[bank_rows]
            emb_v, cache_v = encoders.forward_batch(state.visual, data.visual[rows])
            emb_t, cache_t = encoders.forward_batch(state.text, data.text[rows])
            loss, g_v, g_t = batch_objective(
                config.objective, emb_v, emb_t, bank_rows, state.bank, config,
                state.noise_rng, state.z_vt, state.z_tv,
            )
            if not np.isfinite(loss):
                raise NumericFaultError(f"non-finite loss {loss} in epoch {state.epoch}")
            total_loss += loss * emb_v.shape[0]
            total_items += emb_v.shape[0]

            grads_v, _ = encoders.backward_batch(state.visual, cache_v, g_v)
            state.visual, state.visual_opt = encoders.sgd_step(
                state.visual, grads_v, state.visual_opt, lr_visual
            )
            if lr_text is not None:
                grads_t, _ = encoders.backward_batch(state.text, cache_t, g_t)
                state.text, state.text_opt = encoders.sgd_step(
                    state.text, grads_t, state.text_opt, lr_text
                )
            for j, row in enumerate(bank_rows):
                state.bank.update("visual", int(row), emb_v[j], config.bank_momentum)
                state.bank.update("text", int(row), emb_t[j], config.bank_momentum)

        recall1, recall5 = _validate(state, data)
        record = MetricsRecord(
            epoch=state.epoch,
            stage=stage,
            objective=config.objective,
            train_loss=total_loss / max(total_items, 1),
            recall1=recall1,
            recall5=recall5,
            wall_s=time.perf_counter() - t0,
        )
        state.epoch += 1
        return record
    except NumericFaultError:
        state.restore(entry)
        raise


def _validate(state: TrainerState, data: PairedDataset) -> tuple[float, float]:
    val_idx = data.splits["val"]
    emb_v, _ = encoders.forward_batch(state.visual, data.visual[val_idx])
    emb_t, _ = encoders.forward_batch(state.text, data.text[val_idx])
    ks = [1] if val_idx.shape[0] < 5 else [1, 5]
    recalls = retrieval_recall(emb_v, emb_t, ks)
    r1 = (recalls["v2t"][1] + recalls["t2v"][1]) / 2.0
    k5 = ks[-1]
    r5 = (recalls["v2t"][k5] + recalls["t2v"][k5]) / 2.0
    return r1, r5


def warmup_text_encoder(
    params: encoders.EncoderParams, feats: Array, epochs: int, lr: float, seed: int
) -> encoders.EncoderParams:
    """Pre-fit the text encoder by reconstruction through a linear decoder.

    Stands in for a pre-trained language model: after the warmup, text
    embeddings preserve the geometry of the raw text features instead of
    being a random projection. The decoder is discarded.
    """
    feats = np.asarray(feats, dtype=float)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise InvalidConfigError("warmup needs a non-empty (M, d_t) feature matrix")
    rng = np.random.default_rng(seed)
    decoder = rng.normal(0.0, 1.0 / math.sqrt(params.embed_dim), size=(feats.shape[1], params.embed_dim))
    opt = encoders.init_optimizer(params, momentum=0.9, weight_decay=0.0)
    n = feats.shape[0]
    batch = min(64, n)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            rows = order[start : start + batch]
            x = feats[rows]
            emb, cache = encoders.forward_batch(params, x)
            err = emb @ decoder.T - x
            grad_emb = (2.0 / rows.shape[0]) * err @ decoder
            grad_dec = (2.0 / rows.shape[0]) * err.T @ emb
            grads, _ = encoders.backward_batch(params, cache, grad_emb)
            params, opt = encoders.sgd_step(params, grads, opt, lr)
            decoder -= lr * grad_dec
    return params


def _derived_seeds(seed: int) -> dict[str, int]:
    names = ("visual_init", "text_init", "bank_init", "shuffle", "noise", "warmup")
    words = np.random.SeedSequence(seed).generate_state(len(names))
    return {name: int(word) for name, word in zip(names, words)}


def init_trainer(data: PairedDataset, config: TrainingConfig) -> TrainerState:
    """Build encoders, warm up the text side, seed the bank, calibrate z."""
    for name in ("train", "val"):
        if name not in data.splits or data.splits[name].size == 0:
            raise InvalidConfigError(f"dataset needs a non-empty {name!r} split")
    n_train = int(data.splits["train"].shape[0])
    if config.objective == "cpd_nce":
        limit = n_train - 1 if config.exclude_positive else n_train
        if config.m > limit:
            raise InvalidConfigError(
                f"m={config.m} exceeds the usable instance count {limit}; "
                f"pick m <= {limit} for this dataset"
            )
    if config.objective == "ranking" and config.batch_size < 2:
        raise InvalidConfigError("ranking needs batch_size >= 2")

    seeds = _derived_seeds(config.seed)
    visual = encoders.init_params([data.d_v, config.hidden_dim, config.embed_dim], seeds["visual_init"])
    text = encoders.init_params([data.d_t, config.hidden_dim, config.embed_dim], seeds["text_init"])
    if config.text_warmup == "autoencoder" and config.warmup_epochs > 0:
        # Text-only pre-fit: uses the training split's text marginal, never
        # the pairing, so it stands in for an externally pre-trained model.
        warmup_feats = data.text[data.splits["train"]]
        text = warmup_text_encoder(text, warmup_feats, config.warmup_epochs, config.warmup_lr, seeds["warmup"])

    state = TrainerState(
        visual=visual,
        text=text,
        visual_opt=encoders.init_optimizer(visual, config.sgd_momentum, config.weight_decay),
        text_opt=encoders.init_optimizer(text, config.sgd_momentum, config.weight_decay),
        bank=init_bank(n_train, config.embed_dim, seeds["bank_init"], config.bank_momentum),
        curriculum=CurriculumState(stage=DIRECT if config.direct_finetune else STAGE1),
        shuffle_rng=np.random.default_rng(seeds["shuffle"]),
        noise_rng=np.random.default_rng(seeds["noise"]),
    )
    if config.objective == "cpd_nce":
        _recalibrate(state, data, config)
    return state


def _recalibrate(state: TrainerState, data: PairedDataset, config: TrainingConfig) -> None:
    train_idx = data.splits["train"]
    rows = train_idx[: min(config.batch_size, train_idx.shape[0])]
    emb_v, _ = encoders.forward_batch(state.visual, data.visual[rows])
    emb_t, _ = encoders.forward_batch(state.text, data.text[rows])
    state.z_vt = calibrate_z(state.bank.text, emb_v, config.tau)
    state.z_tv = calibrate_z(state.bank.visual, emb_t, config.tau)


def run_curriculum(
    data: PairedDataset,
    config: TrainingConfig,
    epoch_callback=None,
) -> TrainingResult:
    """Train to plateau through both stages (or in direct mode) and return
    the final encoders, bank, and per-epoch metrics.

    ``epoch_callback(state, record)``, when given, runs after every epoch;
    the CLI uses it for metrics and checkpoint files.
    """
    state = init_trainer(data, config)
    history: list[MetricsRecord] = []
    for _ in range(config.max_epochs):
        record = train_epoch(state, data, config)
        history.append(record)
        new_cur = plateau_step(
            state.curriculum, record.recall1, config.plateau_patience, config.plateau_min_delta
        )
        transitioned = new_cur.stage != state.curriculum.stage
        state.curriculum = new_cur
        if transitioned and config.objective == "cpd_nce":
            _recalibrate(state, data, config)
        if epoch_callback is not None:
            epoch_callback(state, record)
        if new_cur.stop:
            break
    return TrainingResult(visual=state.visual, text=state.text, bank=state.bank, history=history, state=state)
