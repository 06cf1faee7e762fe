"""Binary checkpoint files.

Encoder parameters serialize as a versioned header, the layer dims, then each
layer's weight matrix and bias as row-major 64-bit little-endian floats. A
full training checkpoint carries both encoders, their optimizer buffers, the
memory bank (sizes and momentum first, then both stores in the same float
layout), the curriculum state, the partition constants, and the RNG states.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoders
from .errors import CheckpointFormatError
from .memory_bank import MemoryBank
from .trainer import CurriculumState, TrainerState

ENCODER_MAGIC = b"CPDENC01"
CHECKPOINT_MAGIC = b"CPDCKPT1"

_STAGES = ("stage1", "stage2", "direct")


def _write_u32(f, value: int) -> None:
    f.write(struct.pack("<I", value))


def _write_u64(f, value: int) -> None:
    f.write(struct.pack("<Q", value))


def _write_f64(f, value: float) -> None:
    f.write(struct.pack("<d", value))


def _write_array(f, arr: np.ndarray) -> None:
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_u32(f) -> int:
    return struct.unpack("<I", _read_exact(f, 4))[0]


def _read_u64(f) -> int:
    return struct.unpack("<Q", _read_exact(f, 8))[0]


def _read_f64(f) -> float:
    return struct.unpack("<d", _read_exact(f, 8))[0]


def _read_array(f, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape))
    data = np.frombuffer(_read_exact(f, count * 8), dtype="<f8")
    return data.reshape(shape).astype(float)


def _write_encoder(f, params: encoders.EncoderParams) -> None:
    dims = params.layer_dims
    _write_u32(f, len(dims))
    for d in dims:
        _write_u32(f, d)
    for w, b in zip(params.weights, params.biases):
        _write_array(f, w)
        _write_array(f, b)


def _read_encoder(f) -> encoders.EncoderParams:
    n_dims = _read_u32(f)
    if n_dims < 2:
        raise CheckpointFormatError(f"encoder section declares {n_dims} layer dims")
    dims = [_read_u32(f) for _ in range(n_dims)]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(_read_array(f, (fan_out, fan_in)))
        biases.append(_read_array(f, (fan_out,)))
    return encoders.EncoderParams(weights=weights, biases=biases)


def save_params(path: str | Path, params: encoders.EncoderParams) -> None:
    """Write one encoder's parameters as a standalone checkpoint file."""
    with open(path, "wb") as f:
        f.write(ENCODER_MAGIC)
        _write_encoder(f, params)


def load_params(path: str | Path) -> encoders.EncoderParams:
    with open(path, "rb") as f:
        magic = _read_exact(f, len(ENCODER_MAGIC))
        if magic != ENCODER_MAGIC:
            raise CheckpointFormatError(f"bad encoder file magic {magic!r}")
        return _read_encoder(f)


def _write_optimizer(f, opt: encoders.OptimizerState) -> None:
    _write_f64(f, opt.momentum)
    _write_f64(f, opt.weight_decay)
    for w, b in zip(opt.buffers.weights, opt.buffers.biases):
        _write_array(f, w)
        _write_array(f, b)


def _read_optimizer(f, params: encoders.EncoderParams) -> encoders.OptimizerState:
    momentum = _read_f64(f)
    weight_decay = _read_f64(f)
    buffers = encoders.zeros_like_params(params)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        buffers.weights[i] = _read_array(f, w.shape)
        buffers.biases[i] = _read_array(f, b.shape)
    return encoders.OptimizerState(momentum=momentum, weight_decay=weight_decay, buffers=buffers)


def _write_json_blob(f, obj) -> None:
    blob = json.dumps(obj).encode("utf-8")
    _write_u64(f, len(blob))
    f.write(blob)


def _read_json_blob(f):
    length = _read_u64(f)
    return json.loads(_read_exact(f, length).decode("utf-8"))


@dataclass
class Checkpoint:
    """A full training snapshot, sufficient to resume or evaluate a run."""

    visual: encoders.EncoderParams
    text: encoders.EncoderParams
    visual_opt: encoders.OptimizerState
    text_opt: encoders.OptimizerState
    bank: MemoryBank
    curriculum: CurriculumState
    shuffle_rng_state: dict
    noise_rng_state: dict
    z_vt: float | None
    z_tv: float | None
    epoch: int

    @classmethod
    def from_state(cls, state: TrainerState) -> "Checkpoint":
        return cls(
            visual=state.visual,
            text=state.text,
            visual_opt=state.visual_opt,
            text_opt=state.text_opt,
            bank=state.bank,
            curriculum=state.curriculum,
            shuffle_rng_state=state.shuffle_rng.bit_generator.state,
            noise_rng_state=state.noise_rng.bit_generator.state,
            z_vt=state.z_vt,
            z_tv=state.z_tv,
            epoch=state.epoch,
        )

    def to_state(self) -> TrainerState:
        shuffle_rng = np.random.default_rng()
        shuffle_rng.bit_generator.state = self.shuffle_rng_state
        noise_rng = np.random.default_rng()
        noise_rng.bit_generator.state = self.noise_rng_state
        return TrainerState(
            visual=self.visual,
            text=self.text,
            visual_opt=self.visual_opt,
            text_opt=self.text_opt,
            bank=self.bank,
            curriculum=self.curriculum,
            shuffle_rng=shuffle_rng,
            noise_rng=noise_rng,
            z_vt=self.z_vt,
            z_tv=self.z_tv,
            epoch=self.epoch,
        )


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        _write_encoder(f, ckpt.visual)
        _write_encoder(f, ckpt.text)
        _write_optimizer(f, ckpt.visual_opt)
        _write_optimizer(f, ckpt.text_opt)
        _write_u64(f, ckpt.bank.n_instances)
        _write_u64(f, ckpt.bank.dim)
        _write_f64(f, ckpt.bank.momentum)
        _write_array(f, ckpt.bank.visual)
        _write_array(f, ckpt.bank.text)
        f.write(struct.pack("<B", _STAGES.index(ckpt.curriculum.stage)))
        _write_f64(f, ckpt.curriculum.best_val_recall)
        _write_u64(f, ckpt.curriculum.epochs_since_improvement)
        f.write(struct.pack("<B", int(ckpt.curriculum.stop)))
        for z in (ckpt.z_vt, ckpt.z_tv):
            f.write(struct.pack("<B", int(z is not None)))
            _write_f64(f, 0.0 if z is None else z)
        _write_u64(f, ckpt.epoch)
        _write_json_blob(f, ckpt.shuffle_rng_state)
        _write_json_blob(f, ckpt.noise_rng_state)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = _read_exact(f, len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"bad checkpoint magic {magic!r}")
        visual = _read_encoder(f)
        text = _read_encoder(f)
        visual_opt = _read_optimizer(f, visual)
        text_opt = _read_optimizer(f, text)
        n = _read_u64(f)
        dim = _read_u64(f)
        bank_momentum = _read_f64(f)
        bank_visual = _read_array(f, (n, dim))
        bank_text = _read_array(f, (n, dim))
        stage_idx = struct.unpack("<B", _read_exact(f, 1))[0]
        if stage_idx >= len(_STAGES):
            raise CheckpointFormatError(f"unknown curriculum stage index {stage_idx}")
        best = _read_f64(f)
        since = _read_u64(f)
        stop = bool(struct.unpack("<B", _read_exact(f, 1))[0])
        zs = []
        for _ in range(2):
            present = struct.unpack("<B", _read_exact(f, 1))[0]
            value = _read_f64(f)
            zs.append(value if present else None)
        epoch = _read_u64(f)
        shuffle_state = _read_json_blob(f)
        noise_state = _read_json_blob(f)
    return Checkpoint(
        visual=visual,
        text=text,
        visual_opt=visual_opt,
        text_opt=text_opt,
        bank=MemoryBank(bank_visual, bank_text, bank_momentum),
        curriculum=CurriculumState(
            stage=_STAGES[stage_idx],
            best_val_recall=best,
            epochs_since_improvement=since,
            stop=stop,
        ),
        shuffle_rng_state=shuffle_state,
        noise_rng_state=noise_state,
        z_vt=zs[0],
        z_tv=zs[1],
        epoch=epoch,
    )
