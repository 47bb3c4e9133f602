import logging
import math

import numpy as np
import pytest
import torch

from infnet.data import BinaryMask, CTSlice, DatasetSplit
from infnet.errors import CheckpointError, ValidationError
from infnet.model import InfNet, ModelConfig, load_checkpoint, weights_digest
from infnet import semisup
from infnet.semisup import (
    PseudoLabelState,
    SemiConfig,
    TrainingItem,
    TrainSchedule,
    pseudo_label_round,
    read_history,
    run_semi_supervised,
    sample_indices,
    semi_inf_net,
    two_step_train,
)
from infnet.synthetic import synthetic_pairs
from infnet.training import TrainConfig, Trainer
from oracles import simulate_rounds

BLANK = np.zeros((64, 64), np.float32)


class StubTrainer:
    """Records calls; predicts a fixed map with a 0.5 / 0.49 split."""

    def __init__(self):
        self.model = torch.nn.Linear(1, 1)
        self.fit_calls = []
        self.predict_calls = []
        self.resets = 0

    def predict(self, slices):
        self.predict_calls.append([s.id for s in slices])
        m = np.full((64, 64), 0.49, np.float32)
        m[:32] = 0.5
        return [m for _ in slices]

    def fit(self, pairs, epochs, batch_size=None):
        self.fit_calls.append((len(pairs), epochs, batch_size))
        return [1.0] * epochs

    def reset_optimizer(self):
        self.resets += 1


def make_split(n_labeled, n_unlabeled, n_test=0):
    def pair(i):
        return CTSlice(BLANK, i), BinaryMask(np.zeros((64, 64), np.uint8), i)

    return DatasetSplit(
        train_labeled=[pair(f"l{k}") for k in range(n_labeled)],
        test=[pair(f"t{k}") for k in range(n_test)],
        unlabeled=[CTSlice(BLANK, f"u{k}", "unlabeled") for k in range(n_unlabeled)],
    )


def cfg(k, **kw):
    return SemiConfig(K=k, initial_epochs=1, **kw)


@pytest.mark.parametrize("n,k,rounds", [(1600, 5, 320), (10, 3, 4), (7, 7, 1), (0, 5, 0)])
def test_round_counts_and_conservation(n, k, rounds):
    split = make_split(45, n)
    trainer = StubTrainer()
    _, state = run_semi_supervised(split, trainer, cfg(k))
    assert state.iteration == rounds == math.ceil(n / k) == state.max_rounds
    assert not state.unlabeled
    assert [(h["n_train"], h["n_unlabeled"]) for h in state.history] == simulate_rounds(45, n, k)
    for t, h in enumerate(state.history, 1):
        assert h["round"] == t
        assert h["n_train"] + h["n_unlabeled"] == 45 + n
        if h["n_unlabeled"]:
            assert h["n_train"] == 45 + k * t
    counts = state.counts()
    assert counts == {"gt": 45, "pseudo": n}
    # one initial fit plus one fine-tune per round
    assert len(trainer.fit_calls) == 1 + rounds
    assert trainer.fit_calls[0] == (45, 1, 16)


def test_full_scale_round_sizes():
    state = PseudoLabelState.from_split(make_split(45, 1600), K=5)
    trainer = StubTrainer()
    for t in range(1, 4):
        state = pseudo_label_round(state, trainer, SemiConfig(K=5))
        assert len(state.training) == 45 + 5 * t
        assert len(state.unlabeled) == 1600 - 5 * t


def test_provenance_monotone_and_disjoint():
    state = PseudoLabelState.from_split(make_split(3, 11), K=4)
    trainer = StubTrainer()
    last_pseudo = 0
    while state.unlabeled:
        state = pseudo_label_round(state, trainer, SemiConfig(K=4))
        state.check_invariants()
        c = state.counts()
        assert c["gt"] == 3 and c["pseudo"] >= last_pseudo
        last_pseudo = c["pseudo"]
    ids = [it.id for it in state.training]
    assert len(ids) == len(set(ids)) == 14


def test_seeded_replay_exact():
    split = make_split(5, 23)
    runs = [run_semi_supervised(split, StubTrainer(), cfg(4, seed=9))[1].history for _ in range(2)]
    assert runs[0] == runs[1]
    other = run_semi_supervised(split, StubTrainer(), cfg(4, seed=10))[1].history
    assert [h["sampled_ids"] for h in other] != [h["sampled_ids"] for h in runs[0]]


def test_sampled_ids_replay_oracle():
    """Rebuild the sampled ids from the documented rule: generator keyed by (seed, round)."""
    split = make_split(2, 17)
    _, state = run_semi_supervised(split, StubTrainer(), cfg(5, seed=3))
    pool = [s.id for s in split.unlabeled]
    for t, h in enumerate(state.history):
        gen = np.random.default_rng([3, t])
        idx = gen.choice(len(pool), size=min(5, len(pool)), replace=False)
        expected = [pool[i] for i in idx]
        assert h["sampled_ids"] == expected
        pool = [p for p in pool if p not in set(expected)]


def test_sample_indices_without_replacement():
    for t in range(20):
        idx = sample_indices(9, 5, 1, t)
        assert len(set(idx)) == 5 and all(0 <= i < 9 for i in idx)
    assert sorted(sample_indices(3, 5, 0, 0)) == [0, 1, 2]


def test_pseudo_masks_thresholded_at_half():
    state = PseudoLabelState.from_split(make_split(1, 2), K=2)
    state = pseudo_label_round(state, StubTrainer(), SemiConfig(K=2))
    for item in state.training:
        if item.provenance == "pseudo":
            assert item.mask.values[:32].all() and not item.mask.values[32:].any()


def test_empty_pool_is_noop(caplog):
    state = PseudoLabelState.from_split(make_split(3, 0), K=5)
    trainer = StubTrainer()
    with caplog.at_level(logging.WARNING):
        out = pseudo_label_round(state, trainer)
    assert out is state
    assert trainer.fit_calls == [] and trainer.predict_calls == []
    assert "empty" in caplog.text


def test_reset_optimizer_flag():
    state = PseudoLabelState.from_split(make_split(1, 4), K=2)
    trainer = StubTrainer()
    state = pseudo_label_round(state, trainer, SemiConfig(K=2, reset_optimizer=True))
    assert trainer.resets == 1
    pseudo_label_round(state, trainer, SemiConfig(K=2))
    assert trainer.resets == 1


def test_test_leakage_detected():
    split = make_split(2, 3, n_test=2)
    state = PseudoLabelState.from_split(split, K=1)
    leaked = state.training + [TrainingItem(*split.test[0], "gt")]
    bad = PseudoLabelState(leaked, state.unlabeled, 1, initial_labeled=3, initial_unlabeled=3)
    with pytest.raises(ValidationError, match="t0"):
        bad.check_invariants({s.id for s, _ in split.test})


def test_invalid_k():
    with pytest.raises(ValidationError):
        PseudoLabelState([], [], K=0)


def test_history_and_checkpoints(tmp_path):
    split = make_split(2, 5)
    _, state = run_semi_supervised(split, StubTrainer(), cfg(2, checkpoint_every=1), tmp_path)
    hist = read_history(tmp_path / "history.jsonl")
    assert [h["round"] for h in hist] == [1, 2, 3]
    assert hist == state.history
    assert set(hist[0]) == {"round", "sampled_ids", "n_train", "n_unlabeled", "mean_loss"}
    assert load_checkpoint(tmp_path / "checkpoints" / "semi_round.pt")["extra"] == {"round": 3}


def test_checkpoint_failure_keeps_prior_round(tmp_path, monkeypatch):
    real = semisup.save_checkpoint
    calls = {"n": 0}

    def flaky(model, path, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            raise CheckpointError("disk full")
        return real(model, path, **kw)

    monkeypatch.setattr(semisup, "save_checkpoint", flaky)
    with pytest.raises(CheckpointError):
        run_semi_supervised(make_split(2, 6), StubTrainer(), cfg(2, checkpoint_every=1), tmp_path)
    assert load_checkpoint(tmp_path / "checkpoints" / "semi_round.pt")["extra"] == {"round": 1}
    assert [h["round"] for h in read_history(tmp_path / "history.jsonl")] == [1, 2]


# ---------------------------------------------------------------- two-step schedule

def toy_trainer(seed=0, lr=1e-3):
    torch.manual_seed(seed)
    model = InfNet(ModelConfig(encoder="toy", ra_channels=4, input_size=(64, 64)))
    return Trainer(model, TrainConfig(lr=lr, batch_size=2, scales=(1.0,), input_size=(64, 64), seed=seed))


def test_two_step_empty_schedule_leaves_model():
    tr = toy_trainer()
    before = weights_digest(tr.model)
    pairs, _ = synthetic_pairs(2, 64)
    two_step_train(tr, pairs, pairs, TrainSchedule(0, 1, 0, 1))
    assert weights_digest(tr.model) == before


def test_two_step_empty_gt_refused():
    pairs, _ = synthetic_pairs(1, 64)
    with pytest.raises(ValidationError):
        two_step_train(toy_trainer(), pairs, [], TrainSchedule(1, 1, 1, 1))


def test_finetune_resumes_from_pretrain_weights(monkeypatch):
    tr = toy_trainer()
    init = weights_digest(tr.model)
    pseudo, _ = synthetic_pairs(2, 64, seed=1)
    gt, _ = synthetic_pairs(2, 64, seed=2)
    seen = []
    real_fit = tr.fit

    def spy(pairs, epochs, batch_size=None):
        seen.append(weights_digest(tr.model))
        return real_fit(pairs, epochs, batch_size)

    monkeypatch.setattr(tr, "fit", spy)
    result = two_step_train(tr, pseudo, gt, TrainSchedule(1, 2, 1, 2), val_set=gt[:1])
    assert result.pretrain_digest != init
    assert seen == [init, result.pretrain_digest]
    assert len(result.curves["pretrain_train"]) == 1
    assert len(result.curves["finetune_train"]) == 1 and len(result.curves["finetune_val"]) == 1


def test_semi_inf_net_uses_fresh_trainer_for_two_step():
    split = make_split(2, 3)
    made = []

    def factory():
        made.append(StubTrainer())
        return made[-1]

    final, state, result = semi_inf_net(split, factory, cfg(2), TrainSchedule(1, 4, 1, 2))
    assert len(made) == 2 and final is made[1]
    # pretrain on 3 pseudo pairs, fine-tune on the 2 ground-truth pairs
    assert made[1].fit_calls == [(3, 1, 4), (2, 1, 2)]
    assert state.counts() == {"gt": 2, "pseudo": 3}
