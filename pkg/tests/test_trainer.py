import numpy as np
import pytest

from sercon.augment import AugmentSpec, Waveform, make_augmenter
from sercon.corpus import LabeledEmbedding, SyntheticConfig, UtteranceMeta, generate_synthetic_corpus
from sercon.encoder import HeadParams, init_params
from sercon.errors import DataError
from sercon.objective import LossConfig
from sercon.trainer import TrainConfig, TrainState, build_batch, plateau_schedule, sgd_step, train_fold


def embeddings_for(labels, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    return [
        LabeledEmbedding(UtteranceMeta(f"u{i}", f"spk{i % 2}", int(lbl)), rng.standard_normal(dim).astype(np.float32))
        for i, lbl in enumerate(labels)
    ]


def identity_augmenter(payload, rng):
    return payload


class TestBuildBatch:
    def test_minimal_batch(self):
        items = embeddings_for([2])
        batch = build_batch(items, identity_augmenter, seed=1)
        assert batch.size == 2
        assert batch.labels.tolist() == [2, 2]

    def test_identity_augmentation_pairs_equal(self):
        items = embeddings_for([0, 1, 2])
        batch = build_batch(items, identity_augmenter, seed=1)
        for orig_idx, aug_idx in batch.pairs:
            assert np.array_equal(batch.embeddings[orig_idx], batch.embeddings[aug_idx])

    def test_default_batch_of_twelve(self):
        items = embeddings_for([0, 1, 2, 3, 0, 1])
        batch = build_batch(items, identity_augmenter, seed=2)
        assert batch.size == 12
        assert batch.pairs.shape == (6, 2)
        # originals sit at odd rows, views at even rows, pairing exhaustive
        for t, (orig_idx, aug_idx) in enumerate(batch.pairs):
            assert orig_idx == 2 * t + 1
            assert aug_idx == 2 * t
            assert np.array_equal(batch.embeddings[orig_idx], items[t].x.astype(np.float64))
            assert batch.labels[orig_idx] == batch.labels[aug_idx] == items[t].meta.label

    def test_deterministic_given_seed(self):
        items = embeddings_for([0, 1, 0, 1])
        f = make_augmenter(AugmentSpec(kind="jitter", jitter_sigma=0.5))
        a = build_batch(items, f, seed=9)
        b = build_batch(items, f, seed=9)
        assert a.embeddings.tobytes() == b.embeddings.tobytes()

    def test_augment_failure_names_utterance(self):
        items = embeddings_for([0, 1])

        def broken(payload, rng):
            raise RuntimeError("boom")

        with pytest.raises(DataError, match="u0"):
            build_batch(items, broken, seed=1)

    def test_waveform_items_fit_to_max_len(self):
        sr = 100
        items = [
            (Waveform(np.linspace(-0.5, 0.5, 2 * sr), sr), 0),
            (Waveform(np.zeros(sr // 2) + 0.1, sr), 0),
        ]
        batch = build_batch(items, identity_augmenter, seed=1, max_len_seconds=1.0)
        assert batch.embeddings.shape == (4, sr)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            build_batch([], identity_augmenter, seed=1)


class TestSgdStep:
    def test_zero_grads_identity(self):
        p = init_params(3, 2, 2, seed=1)
        z = HeadParams(np.zeros((2, 3)), np.zeros(2), np.zeros((2, 2)), np.zeros(2))
        q = sgd_step(p, z, lr=0.5)
        for a, b in zip(p.arrays(), q.arrays()):
            assert np.array_equal(a, b)

    def test_lr_one_grads_equal_params_zeroes(self):
        p = init_params(3, 2, 2, seed=2)
        q = sgd_step(p, p, lr=1.0)
        for a in q.arrays():
            assert np.all(a == 0.0)

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(3)
        p = init_params(4, 3, 2, seed=3)
        g = HeadParams(
            rng.standard_normal((3, 4)), rng.standard_normal(3),
            rng.standard_normal((2, 3)), rng.standard_normal(2),
        )
        lr = 0.37
        q = sgd_step(p, g, lr)
        for got, pa, ga in zip(q.arrays(), p.arrays(), g.arrays()):
            expected = np.array([[v - lr * w for v, w in zip(row, grow)]
                                 for row, grow in zip(np.atleast_2d(pa), np.atleast_2d(ga))])
            assert np.abs(np.atleast_2d(got) - expected).max() < 1e-15


def state_with(lr=0.1, best=np.inf, counter=0):
    return TrainState(params=init_params(2, 2, 2, seed=0), epoch=0, lr=lr,
                      best_val_loss=best, epochs_since_improvement=counter)


class TestPlateauSchedule:
    def cfg(self, patience=20, factor=0.5, min_lr=1e-6, lr0=0.1):
        return TrainConfig(lr0=lr0, plateau_patience=patience, lr_factor=factor, min_lr=min_lr)

    def test_strictly_decreasing_never_decays(self):
        cfg = self.cfg()
        state = state_with(lr=0.1)
        for loss in np.linspace(1.0, 0.5, 50):
            state = plateau_schedule(state, float(loss), cfg)
        assert state.lr == 0.1
        assert state.epochs_since_improvement == 0

    def test_twenty_stale_epochs_halve_once(self):
        cfg = self.cfg(patience=20, factor=0.5)
        state = state_with(lr=0.1, best=1.0)
        for i in range(20):
            state = plateau_schedule(state, 1.0, cfg)
            if i < 19:
                assert state.lr == 0.1
        assert state.lr == 0.05
        assert state.epochs_since_improvement == 0

    def test_forty_stale_epochs_quarter(self):
        cfg = self.cfg(patience=20, factor=0.5, min_lr=1e-6)
        state = state_with(lr=0.1, best=1.0)
        for _ in range(40):
            state = plateau_schedule(state, 1.0, cfg)
        assert state.lr == pytest.approx(0.025, abs=0)
        assert state.lr > cfg.min_lr

    def test_floor_at_min_lr_then_stop(self):
        cfg = self.cfg(patience=2, factor=0.5, min_lr=0.04, lr0=0.1)
        state = state_with(lr=0.1, best=1.0)
        for _ in range(2):
            state = plateau_schedule(state, 1.0, cfg)
        assert state.lr == 0.05
        for _ in range(2):
            state = plateau_schedule(state, 1.0, cfg)
        assert state.lr == 0.04  # clamped
        assert not state.stop
        for _ in range(2):
            state = plateau_schedule(state, 1.0, cfg)
        assert state.lr == 0.04
        assert state.stop

    def test_improvement_resets_counter(self):
        cfg = self.cfg(patience=3)
        state = state_with(lr=0.1, best=1.0, counter=2)
        state = plateau_schedule(state, 0.5, cfg)
        assert state.epochs_since_improvement == 0
        assert state.best_val_loss == 0.5


def small_corpus(seed=3):
    cfg = SyntheticConfig(
        dim=6, label_names=("a", "b"), samples_per_class=24, n_speakers=4,
        class_separation=3.0, overlap_pair=None, seed=seed,
    )
    embs, manifest = generate_synthetic_corpus(cfg)
    train = [e for e in embs if e.meta.speaker in ("spk00", "spk01")]
    val = [e for e in embs if e.meta.speaker == "spk02"]
    return train, val


def quick_config(**kw):
    defaults = dict(
        batch_n=4, max_epochs=5, lr0=0.05, hidden_dim=8, seed=11,
        loss=LossConfig(tau=0.07, lam=0.1),
        augment=AugmentSpec(kind="jitter", jitter_sigma=0.2),
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestTrainFold:
    def test_zero_epochs_returns_initial_params(self):
        train, val = small_corpus()
        cfg = quick_config(max_epochs=0)
        params, log = train_fold(train, val, cfg, n_classes=2)
        init = init_params(6, cfg.hidden_dim, 2, cfg.seed)
        for a, b in zip(params.arrays(), init.arrays()):
            assert np.array_equal(a, b)
        assert log == []

    def test_deterministic(self):
        train, val = small_corpus()
        cfg = quick_config()
        p1, log1 = train_fold(train, val, cfg, n_classes=2)
        p2, log2 = train_fold(train, val, cfg, n_classes=2)
        for a, b in zip(p1.arrays(), p2.arrays()):
            assert a.tobytes() == b.tobytes()
        strip = lambda log: [{k: v for k, v in r.items() if k != "seconds"} for r in log]
        assert strip(log1) == strip(log2)

    def test_checkpoint_has_min_val_loss(self):
        train, val = small_corpus()
        cfg = quick_config(max_epochs=8)
        params, log = train_fold(train, val, cfg, n_classes=2)
        from sercon.encoder import forward_batch
        from sercon.objective import ce_loss

        val_x = np.stack([e.x for e in val]).astype(np.float64)
        val_y = np.asarray([e.meta.label for e in val])
        loss, _ = ce_loss(forward_batch(params, val_x).logits, val_y)
        assert loss <= min(r["val_loss"] for r in log) + 1e-12

    def test_lr_non_increasing_and_bounded(self):
        train, val = small_corpus()
        cfg = quick_config(max_epochs=10, plateau_patience=2, lr0=0.05, min_lr=0.01)
        _, log = train_fold(train, val, cfg, n_classes=2)
        lrs = [r["lr"] for r in log]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        assert all(lr >= cfg.min_lr for lr in lrs)

    def test_training_reduces_val_loss(self):
        train, val = small_corpus()
        cfg = quick_config(max_epochs=20)
        _, log = train_fold(train, val, cfg, n_classes=2)
        assert log[-1]["val_loss"] < log[0]["val_loss"]

    def test_empty_train_rejected(self):
        _, val = small_corpus()
        with pytest.raises(DataError):
            train_fold([], val, quick_config(), n_classes=2)

    def test_log_record_fields(self):
        train, val = small_corpus()
        _, log = train_fold(train, val, quick_config(max_epochs=2), n_classes=2)
        assert len(log) == 2
        assert set(log[0]) == {"epoch", "train_loss", "val_loss", "lr", "seconds"}
        assert log[0]["epoch"] == 1
