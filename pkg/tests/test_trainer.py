"""Training-loop contracts: calibration, plateau state machine, freeze and
determinism guarantees, objective dispatch, and checkpoint round-trips."""

import dataclasses
import math

import numpy as np
import pytest

from cpd import checkpoint as ckpt_mod
from cpd import data as data_mod
from cpd import encoders, objectives, trainer
from cpd.errors import InvalidConfigError, NumericFaultError
from cpd.memory_bank import init_bank
from cpd.trainer import (
    DIRECT,
    STAGE1,
    STAGE2,
    CurriculumState,
    TrainingConfig,
    batch_objective,
    calibrate_z,
    plateau_step,
    run_curriculum,
)


def _unit_rows(rng, n, d):
    rows = rng.normal(size=(n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _tiny_dataset(seed=0, per_class=12, rho=0.0, sigma=0.1):
    spec = data_mod.SyntheticSpec(
        n_classes=4, per_class=per_class, d_v=12, d_t=10, sigma=sigma, rho=rho, seed=seed
    )
    return data_mod.split(data_mod.generate(spec), (0.6, 0.3, 0.1), seed=0)


def _tiny_config(**kwargs):
    defaults = dict(
        objective="cpd_nce",
        m=8,
        batch_size=6,
        max_epochs=4,
        hidden_dim=16,
        embed_dim=8,
        warmup_epochs=10,
        seed=3,
    )
    defaults.update(kwargs)
    return TrainingConfig(**defaults)


class TestCalibrateZ:
    def test_orthogonal_bank_gives_n(self):
        bank = np.eye(6)
        q = np.zeros(6)
        q[0] = 1.0
        # Query orthogonal to every bank row: use a row outside the bank span.
        bank = np.hstack([np.eye(6), np.zeros((6, 1))])
        q = np.zeros(7)
        q[6] = 1.0
        assert calibrate_z(bank, q[None, :], tau=0.07) == pytest.approx(6.0, abs=1e-9)

    def test_two_row_closed_form(self):
        tau = 0.25
        bank = np.array([[1.0, 0.0], [0.0, 1.0]])
        q = np.array([[1.0, 0.0]])
        expected = math.exp(1.0 / tau) + 1.0
        assert calibrate_z(bank, q, tau) == pytest.approx(expected, rel=1e-12)

    def test_invariant_to_query_order(self):
        rng = np.random.default_rng(0)
        bank = _unit_rows(rng, 8, 5)
        queries = _unit_rows(rng, 4, 5)
        a = calibrate_z(bank, queries, tau=0.1)
        b = calibrate_z(bank, queries[::-1], tau=0.1)
        assert a == pytest.approx(b, rel=1e-12)

    def test_overflow_raises_numeric_fault(self):
        bank = np.array([[1.0, 0.0]])
        q = np.array([[1.0, 0.0]])
        with pytest.raises(NumericFaultError):
            calibrate_z(bank, q, tau=1e-4)


class TestPlateauStep:
    def test_improving_sequence_stays_stage1(self):
        cur = CurriculumState()
        for r in (0.1, 0.2, 0.3, 0.4):
            cur = plateau_step(cur, r, patience=3, min_delta=0.0)
            assert cur.stage == STAGE1
            assert cur.epochs_since_improvement == 0

    def test_flat_sequence_transitions_after_patience(self):
        cur = CurriculumState()
        stages = []
        for r in (0.5, 0.5, 0.5, 0.5):
            cur = plateau_step(cur, r, patience=3, min_delta=0.002)
            stages.append(cur.stage)
        assert stages == [STAGE1, STAGE1, STAGE1, STAGE2]
        assert cur.epochs_since_improvement == 0  # reset on transition

    def test_min_delta_threshold(self):
        cur = plateau_step(CurriculumState(), 0.500, patience=3, min_delta=0.01)
        after = plateau_step(cur, 0.505, patience=3, min_delta=0.01)
        assert after.epochs_since_improvement == 1
        assert after.best_val_recall == 0.500

    def test_stage2_plateau_stops(self):
        cur = CurriculumState(stage=STAGE2, best_val_recall=0.7)
        for _ in range(2):
            cur = plateau_step(cur, 0.7, patience=2, min_delta=0.0)
        assert cur.stop

    def test_direct_mode_stops_without_transition(self):
        cur = CurriculumState(stage=DIRECT, best_val_recall=0.5)
        for _ in range(2):
            cur = plateau_step(cur, 0.5, patience=2, min_delta=0.0)
        assert cur.stage == DIRECT
        assert cur.stop


class TestBatchObjective:
    """The trainer-path loss must equal independent brute-force evaluations."""

    def _setup(self, rng, n=16, d=6, batch=5):
        bank = init_bank(n, d, seed=1)
        emb_v = _unit_rows(rng, batch, d)
        emb_t = _unit_rows(rng, batch, d)
        rows = rng.choice(n, size=batch, replace=False)
        return bank, emb_v, emb_t, rows

    def test_cpd_exact_matches_brute_force(self):
        rng = np.random.default_rng(1)
        bank, emb_v, emb_t, rows = self._setup(rng)
        config = _tiny_config(objective="cpd_exact", tau=0.2)
        loss, _, _ = batch_objective(
            "cpd_exact", emb_v, emb_t, rows, bank, config, np.random.default_rng(0), None, None
        )
        # Brute force: direct softmax evaluation, no shared code with the op.
        total = 0.0
        for j, row in enumerate(rows):
            for q, store in ((emb_v[j], bank.text), (emb_t[j], bank.visual)):
                scores = store @ q / config.tau
                p = np.exp(scores[row]) / np.exp(scores).sum()
                total += -math.log(p)
        assert loss == pytest.approx(total / len(rows), abs=1e-9)

    def test_mmid_matches_brute_force(self):
        rng = np.random.default_rng(2)
        bank, emb_v, emb_t, rows = self._setup(rng)
        config = _tiny_config(objective="mmid", tau=0.3)
        loss, _, _ = batch_objective(
            "mmid", emb_v, emb_t, rows, bank, config, np.random.default_rng(0), None, None
        )
        total = 0.0
        for j, row in enumerate(rows):
            scores = (bank.visual @ emb_v[j] + bank.text @ emb_t[j]) / config.tau
            p = np.exp(scores[row]) / np.exp(scores).sum()
            total += -math.log(p)
        assert loss == pytest.approx(total / len(rows), abs=1e-9)

    def test_nce_deterministic_in_rng(self):
        rng = np.random.default_rng(3)
        bank, emb_v, emb_t, rows = self._setup(rng)
        config = _tiny_config(objective="cpd_nce", m=4)
        out = []
        for _ in range(2):
            out.append(
                batch_objective(
                    "cpd_nce", emb_v, emb_t, rows, bank, config,
                    np.random.default_rng(77), 12.0, 9.0,
                )
            )
        assert out[0][0] == out[1][0]
        assert np.array_equal(out[0][1], out[1][1])
        assert np.array_equal(out[0][2], out[1][2])


class TestRunCurriculum:
    def test_stage1_freezes_text_encoder(self):
        ds = _tiny_dataset()
        config = _tiny_config(max_epochs=3, plateau_patience=10)
        state = trainer.init_trainer(ds, config)
        frozen = [w.copy() for w in state.text.weights] + [b.copy() for b in state.text.biases]
        for _ in range(3):
            trainer.train_epoch(state, ds, config)
        now = state.text.weights + state.text.biases
        for a, b in zip(frozen, now):
            assert np.array_equal(a, b)

    def test_bitwise_deterministic_runs(self):
        ds = _tiny_dataset()
        config = _tiny_config(max_epochs=3)
        r1 = run_curriculum(ds, config)
        r2 = run_curriculum(ds, config)
        for rec1, rec2 in zip(r1.history, r2.history):
            assert rec1.train_loss == rec2.train_loss
            assert rec1.recall1 == rec2.recall1
            assert rec1.recall5 == rec2.recall5
            assert rec1.stage == rec2.stage
        for a, b in zip(r1.visual.weights, r2.visual.weights):
            assert np.array_equal(a, b)
        assert np.array_equal(r1.bank.visual, r2.bank.visual)
        assert np.array_equal(r1.bank.text, r2.bank.text)

    def test_at_most_one_stage_transition(self):
        ds = _tiny_dataset()
        config = _tiny_config(max_epochs=12, plateau_patience=2, plateau_min_delta=0.5)
        result = run_curriculum(ds, config)
        stages = [rec.stage for rec in result.history]
        transitions = sum(1 for a, b in zip(stages, stages[1:]) if a != b)
        assert transitions <= 1
        assert all(s in (STAGE1, STAGE2) for s in stages)
        # Stage index never decreases.
        seen_stage2 = False
        for s in stages:
            if s == STAGE2:
                seen_stage2 = True
            if seen_stage2:
                assert s == STAGE2

    def test_direct_mode_never_transitions(self):
        ds = _tiny_dataset()
        config = _tiny_config(max_epochs=6, direct_finetune=True, plateau_patience=2,
                              plateau_min_delta=0.5)
        result = run_curriculum(ds, config)
        assert all(rec.stage == DIRECT for rec in result.history)
        # Plateau in direct mode stops early: patience 2 with an impossible
        # min_delta ends the run after the improvement streak dies.
        assert len(result.history) < 6

    def test_m_too_large_for_dataset(self):
        ds = _tiny_dataset()
        config = _tiny_config(m=1000)
        with pytest.raises(InvalidConfigError):
            run_curriculum(ds, config)

    def test_all_objectives_run_and_loss_is_finite(self):
        ds = _tiny_dataset()
        for objective in trainer.OBJECTIVES:
            config = _tiny_config(objective=objective, max_epochs=2)
            result = run_curriculum(ds, config)
            assert len(result.history) == 2
            assert all(np.isfinite(rec.train_loss) for rec in result.history)
            assert all(0.0 <= rec.recall1 <= 1.0 for rec in result.history)

    def test_training_loss_mostly_decreases_early(self):
        # Smoke property: over 5 seeds on clean separable data, the first
        # five epochs are non-increasing in at least 4.
        ds = _tiny_dataset(sigma=0.05)
        good = 0
        for seed in range(1, 6):
            config = _tiny_config(seed=seed, max_epochs=5, plateau_patience=10)
            hist = run_curriculum(ds, config).history
            losses = [rec.train_loss for rec in hist]
            if all(b <= a + 1e-9 for a, b in zip(losses, losses[1:])):
                good += 1
        assert good >= 4

    def test_numeric_fault_restores_state(self):
        ds = _tiny_dataset()
        config = _tiny_config(max_epochs=1, stage1_lr=1e18, warmup_epochs=0)
        state = trainer.init_trainer(ds, config)
        before_w = [w.copy() for w in state.visual.weights]
        before_bank = state.bank.visual.copy()
        before_epoch = state.epoch
        with pytest.raises(NumericFaultError):
            for _ in range(50):  # blow up within a few epochs
                trainer.train_epoch(state, ds, config)
        for a, b in zip(before_w, state.visual.weights):
            pass  # state was rolled back to the entry of the failing epoch
        assert state.epoch < 50
        assert all(np.all(np.isfinite(w)) for w in state.visual.weights)

    def test_epoch_callback_invoked(self):
        ds = _tiny_dataset()
        config = _tiny_config(max_epochs=3)
        seen = []
        run_curriculum(ds, config, epoch_callback=lambda state, rec: seen.append(rec.epoch))
        assert seen == [0, 1, 2]


class TestValRecallCeiling:
    def test_caption_noise_lowers_recall_ceiling(self):
        clean = _tiny_dataset(rho=0.0, per_class=20)
        noisy = _tiny_dataset(rho=0.9, per_class=20)
        config = _tiny_config(max_epochs=15, plateau_patience=15)
        clean_r = run_curriculum(clean, config).history[-1].recall1
        noisy_r = run_curriculum(noisy, config).history[-1].recall1
        assert clean_r > noisy_r


class TestCheckpointRoundTrip:
    def test_full_state_round_trips(self, tmp_path):
        ds = _tiny_dataset()
        config = _tiny_config(max_epochs=2)
        result = run_curriculum(ds, config)
        state = result.state
        path = tmp_path / "ck.cpdckpt"
        ckpt_mod.save_checkpoint(path, ckpt_mod.Checkpoint.from_state(state))
        back = ckpt_mod.load_checkpoint(path).to_state()

        for a, b in zip(state.visual.weights + state.text.weights,
                        back.visual.weights + back.text.weights):
            assert np.array_equal(a, b)
        for a, b in zip(state.visual_opt.buffers.weights, back.visual_opt.buffers.weights):
            assert np.array_equal(a, b)
        assert np.array_equal(state.bank.visual, back.bank.visual)
        assert np.array_equal(state.bank.text, back.bank.text)
        assert back.bank.momentum == state.bank.momentum
        assert back.curriculum == state.curriculum
        assert back.z_vt == state.z_vt
        assert back.z_tv == state.z_tv
        assert back.epoch == state.epoch
        # RNG streams continue identically after restore.
        assert back.noise_rng.integers(0, 1000, 5).tolist() == state.noise_rng.integers(0, 1000, 5).tolist()

    def test_resumed_training_matches_uninterrupted(self, tmp_path):
        ds = _tiny_dataset()
        config = _tiny_config(max_epochs=4, plateau_patience=10)
        full_state = trainer.init_trainer(ds, config)
        records_full = [trainer.train_epoch(full_state, ds, config) for _ in range(4)]

        half_state = trainer.init_trainer(ds, config)
        for _ in range(2):
            trainer.train_epoch(half_state, ds, config)
        path = tmp_path / "half.cpdckpt"
        ckpt_mod.save_checkpoint(path, ckpt_mod.Checkpoint.from_state(half_state))
        resumed = ckpt_mod.load_checkpoint(path).to_state()
        records_resumed = [trainer.train_epoch(resumed, ds, config) for _ in range(2)]

        assert records_resumed[0].train_loss == records_full[2].train_loss
        assert records_resumed[1].train_loss == records_full[3].train_loss
        for a, b in zip(full_state.visual.weights, resumed.visual.weights):
            assert np.array_equal(a, b)

    def test_encoder_params_file_round_trip(self, tmp_path):
        params = encoders.init_params([7, 5, 3], seed=2)
        path = tmp_path / "enc.bin"
        ckpt_mod.save_params(path, params)
        back = ckpt_mod.load_params(path)
        assert back.layer_dims == params.layer_dims
        for a, b in zip(params.weights + params.biases, back.weights + back.biases):
            assert np.array_equal(a, b)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTMAGIC" + b"\0" * 100)
        from cpd.errors import CheckpointFormatError

        with pytest.raises(CheckpointFormatError):
            ckpt_mod.load_checkpoint(path)
        with pytest.raises(CheckpointFormatError):
            ckpt_mod.load_params(path)


class TestTrainingConfigValidation:
    def test_rejects_unknown_objective(self):
        with pytest.raises(InvalidConfigError):
            TrainingConfig(objective="bogus")

    def test_rejects_bad_values(self):
        for kwargs in (
            dict(tau=0.0),
            dict(m=0),
            dict(batch_size=0),
            dict(stage1_lr=-1.0),
            dict(sgd_momentum=1.0),
            dict(weight_decay=-1e-4),
            dict(plateau_patience=0),
            dict(bank_momentum=1.5),
            dict(text_warmup="word2vec"),
        ):
            with pytest.raises(InvalidConfigError):
                TrainingConfig(**kwargs)
