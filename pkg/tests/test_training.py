import copy
import csv
import json

import numpy as np
import pytest

from flowspike.encoding import EventWindow, events_from_list
from flowspike.errors import ConfigError, ShapeError
from flowspike.network import ArchConfig, build
from flowspike.synthetic import translating_windows
from flowspike.tensor import Tensor, backward
from flowspike.training import (LOG_COLUMNS, Adam, TrainConfig, chunk_loss, epoch_means, optimizer_step,
                                train, train_sequence, write_log)


def small_model(kind="sSNU", seed=0, size=8, **kw):
    cfg = ArchConfig(n_stages=2, base_channels=3, neuron_kind=kind, **kw)
    return build(cfg, size, size, seed=seed)


def bar_windows(n=6, size=8):
    windows, _ = translating_windows(width=size, height=size, n_windows=n)
    return windows


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        p.grad = np.array([0.3, -7.0, 1e-3])
        Adam(learning_rate=0.01).step([p])
        np.testing.assert_allclose(p.data, [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01], rtol=1e-4)
        assert p.grad is None

    def test_zero_grad_no_change(self):
        p = Tensor(np.array([1.5]), requires_grad=True)
        p.grad = np.zeros(1)
        opt = Adam(learning_rate=0.1)
        optimizer_step([p], opt)
        assert p.data[0] == 1.5

    def test_moments_decay_geometrically(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam(learning_rate=0.0)
        p.grad = np.array([1.0])
        opt.step([p])
        for k in range(1, 4):
            p.grad = np.array([0.0])
            opt.step([p])
            assert opt.m[id(p)][0] == pytest.approx(0.1 * 0.9 ** k)
            assert opt.v[id(p)][0] == pytest.approx(0.001 * 0.999 ** k)

    def test_missing_grad_skipped(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        Adam(learning_rate=1.0).step([p])
        assert p.data[0] == 2.0


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.tbptt_interval, cfg.learning_rate, cfg.lam) == (10, 1e-4, 1e-3)
        assert (cfg.beta1, cfg.beta2, cfg.eps) == (0.9, 0.999, 1e-8)

    @pytest.mark.parametrize("bad", [{"tbptt_interval": 0}, {"learning_rate": -1.0}, {"epochs": -2},
                                     {"beta1": 1.0}, {"momentum": 0.9}])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(bad)

    def test_json_file(self, tmp_path):
        path = tmp_path / "train.json"
        path.write_text(json.dumps({"tbptt_interval": 4, "λ": 0.01, "multi_res": True}), encoding="utf-8")
        cfg = TrainConfig.load(path)
        assert cfg.tbptt_interval == 4 and cfg.lam == 0.01 and cfg.multi_res
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestTrainSequence:
    def test_chunking(self):
        log = train_sequence(small_model(), bar_windows(7), TrainConfig(tbptt_interval=3))
        assert [r["chunk_index"] for r in log] == [0, 1, 2]
        assert all(set(LOG_COLUMNS) <= set(r) for r in log)

    def test_interval_one_updates_every_step(self):
        m = small_model()
        seen = []

        class Counting(Adam):
            def step(self, params):
                seen.append(1)
                super().step(params)

        train_sequence(m, bar_windows(5), TrainConfig(tbptt_interval=1), optimizer=Counting(1e-3))
        assert len(seen) == 5

    def test_zero_learning_rate_bit_identical(self):
        m = small_model()
        before = [p.data.copy() for p in m.parameters()]
        train(m, bar_windows(4), TrainConfig(tbptt_interval=2, learning_rate=0.0, epochs=2))
        for a, p in zip(before, m.parameters()):
            assert np.array_equal(a, p.data) and a.dtype == p.data.dtype

    def test_nonzero_learning_rate_moves_parameters(self):
        m = small_model()
        before = [p.data.copy() for p in m.parameters()]
        train_sequence(m, bar_windows(4), TrainConfig(tbptt_interval=2, learning_rate=1e-2))
        assert any(not np.array_equal(a, p.data) for a, p in zip(before, m.parameters()))

    def test_extent_mismatch_before_any_step(self):
        m = small_model()
        before = [p.data.copy() for p in m.parameters()]
        windows = bar_windows(3) + [EventWindow(events_from_list([]), 0, 10, 16, 8)]
        with pytest.raises(ShapeError):
            train_sequence(m, windows, TrainConfig(tbptt_interval=1, learning_rate=1.0))
        assert all(np.array_equal(a, p.data) for a, p in zip(before, m.parameters()))

    def test_reproducible(self, tmp_path):
        logs, params = [], []
        for _ in range(2):
            m = small_model(seed=3)
            logs.append(train(m, bar_windows(4), TrainConfig(tbptt_interval=2, learning_rate=1e-3, epochs=2)))
            params.append([p.data.copy() for p in m.parameters()])
        assert logs[0] == logs[1]
        assert all(np.array_equal(a, b) for a, b in zip(*params))

    def test_multi_res_flag_threads_through(self):
        cfg = TrainConfig(tbptt_interval=2, multi_res=True)
        m = small_model(multi_res_loss=True)
        chunk = bar_windows(2)
        with_mr, _ = chunk_loss(m, chunk, cfg)
        m.reset_states()
        without, _ = chunk_loss(m, chunk, TrainConfig(tbptt_interval=2))
        assert float(with_mr.data) > float(without.data)


def _snapshot(model):
    return [copy.deepcopy(l.state) for l in model.spiking_layers()]


def _restore(model, states):
    for l, s in zip(model.spiking_layers(), states):
        l.state = copy.deepcopy(s)


def _chunk_grads(model, chunk, cfg):
    model.zero_grad()
    total, _ = chunk_loss(model, chunk, cfg)
    backward(total)
    return [None if p.grad is None else p.grad.copy() for p in model.parameters()]


def test_no_gradient_crosses_chunk_boundary():
    cfg = TrainConfig(tbptt_interval=2)
    windows = bar_windows(4)
    first, second = windows[:2], windows[2:]

    m = small_model()
    chunk_loss(m, first, cfg)
    m.detach_states()
    states = _snapshot(m)
    ref = _chunk_grads(m, second, cfg)

    # the same chunk-1 computation from a model that never saw chunk 0
    fresh = small_model()
    _restore(fresh, states)
    got = _chunk_grads(fresh, second, cfg)

    # and from a model whose chunk 0 used different events
    mutated = small_model()
    chunk_loss(mutated, list(reversed(bar_windows(2, size=8))), cfg)
    mutated.detach_states()
    _restore(mutated, states)
    got_mut = _chunk_grads(mutated, second, cfg)

    for a, b, c in zip(ref, got, got_mut):
        assert (a is None and b is None and c is None) or (np.array_equal(a, b) and np.array_equal(a, c))


def test_epoch_means_and_csv(tmp_path):
    path = tmp_path / "log.csv"
    log = train(small_model(), bar_windows(4), TrainConfig(tbptt_interval=2, epochs=2), log_path=path)
    means = epoch_means(log)
    assert len(means) == 2
    assert means[0] == pytest.approx(np.mean([r["loss"] for r in log if r["epoch"] == 0]))
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0].keys()) == LOG_COLUMNS and len(rows) == 4
    assert [int(r["chunk_index"]) for r in rows] == [0, 1, 2, 3]
    write_log([], tmp_path / "empty.csv")
    assert (tmp_path / "empty.csv").read_text().strip() == ",".join(LOG_COLUMNS)


def test_callback_called_per_epoch():
    calls = []
    train(small_model(), bar_windows(2), TrainConfig(tbptt_interval=2, epochs=3),
          callback=lambda e, rows: calls.append((e, len(rows))))
    assert calls == [(0, 1), (1, 1), (2, 1)]
