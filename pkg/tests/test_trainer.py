import math

import numpy as np
import pytest

from vsdl import datapipe as dp
from vsdl import netblocks as nb
from vsdl import phantom as ph
from vsdl import trainer as tr
from vsdl.datapipe import SliceStack
from vsdl.errors import ConfigError, InputError, NumericError
from vsdl.netblocks import ModelKind, ModelSpec, Stage

SIDE = 16
SPEC = dict(input_side=SIDE, extractor=(Stage(4), Stage(6)), lstm_hidden=8, head=(5, 1))


def spec(kind=ModelKind.DCNN_LSTM):
    return ModelSpec(kind, **SPEC)


@pytest.fixture(scope="module")
def stacks():
    # rendered at the default size, then shrunk so small models train fast
    out = []
    for k in range(12):
        s = ph.generate_stack(k % 2, seed=k)
        small = np.stack([dp.resize_bilinear(sl, SIDE) for sl in s.slices]).astype(np.float32)
        out.append(SliceStack(np.clip(small, 0, 1), label=s.label, id=f"s{k}"))
    return out


def test_config_validation():
    with pytest.raises(ConfigError):
        tr.TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        tr.TrainConfig(early_stop_patience=0).validate()
    with pytest.raises(ConfigError):
        tr.TrainConfig.from_dict({"momentum": 0.9})
    cfg = tr.TrainConfig()
    assert (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon) == (0.001, 0.9, 0.999, 1e-8)
    assert (cfg.batch_size, cfg.max_epochs, cfg.early_stop_patience) == (5, 1000, 50)


def test_one_epoch_one_batch(stacks, monkeypatch):
    calls = []
    real = tr.adam_step

    def counting(param, grad, state):
        calls.append(id(param))
        real(param, grad, state)
    monkeypatch.setattr(tr, "adam_step", counting)
    net = nb.build(spec(), 0)
    _, hist = tr.train(net, stacks[:5], stacks[5:8], tr.TrainConfig(max_epochs=1))
    assert len(hist.records) == 1 == hist.stopped_epoch
    assert sorted(calls) == sorted(id(p) for p in net.parameters.values())


def test_determinism(stacks):
    cfg = tr.TrainConfig(max_epochs=3, seed=4)
    net_a, hist_a = tr.train(nb.build(spec(), 1), stacks[:8], stacks[8:], cfg)
    net_b, hist_b = tr.train(nb.build(spec(), 1), stacks[:8], stacks[8:], cfg)
    assert hist_a.to_csv(include_time=False) == hist_b.to_csv(include_time=False)
    for k in net_a.parameters:
        assert net_a.parameters[k].data.tobytes() == net_b.parameters[k].data.tobytes()


def _flipped(stacks):
    return [SliceStack(s.slices, label=1 - s.label, id=s.id) for s in stacks]


def test_patience_one_stops_after_worsening(stacks):
    # validation labels are the opposite of training labels, so every epoch of
    # learning pushes validation loss up
    train_set = stacks[:10]
    val_set = _flipped(train_set)
    cfg = tr.TrainConfig(max_epochs=20, early_stop_patience=1, learning_rate=0.01, seed=0)
    net, hist = tr.train(nb.build(spec(), 2), train_set, val_set, cfg)
    assert [r.val_loss for r in hist.records][1] > hist.records[0].val_loss
    assert (hist.best_epoch, hist.stopped_epoch) == (1, 2)
    # restored weights are exactly those after epoch 1
    ref, _ = tr.train(nb.build(spec(), 2), train_set, val_set, tr.TrainConfig(
        max_epochs=1, learning_rate=0.01, seed=0))
    for k in net.parameters:
        assert net.parameters[k].data.tobytes() == ref.parameters[k].data.tobytes()


def test_history_invariants(stacks):
    _, hist = tr.train(nb.build(spec(), 3), stacks[:6], stacks[6:],
                       tr.TrainConfig(max_epochs=6, early_stop_patience=2))
    assert len(hist.records) == hist.stopped_epoch
    assert 1 <= hist.best_epoch <= hist.stopped_epoch
    best = min(hist.records, key=lambda r: r.val_loss)
    assert best.epoch == hist.best_epoch
    assert all(r.seconds > 0 for r in hist.records)


def test_min_delta_ignores_tiny_improvements(stacks):
    cfg = tr.TrainConfig(max_epochs=4, early_stop_patience=10, min_delta=1e9)
    _, hist = tr.train(nb.build(spec(), 3), stacks[:6], stacks[6:], cfg)
    assert hist.best_epoch == 1 and hist.stopped_epoch == 4


def test_validation_does_not_update_parameters(stacks, monkeypatch):
    real = tr.predict_scores

    def guarded(net, x, batch_size=16):
        before = net.state()
        out = real(net, x, batch_size)
        after = net.state()
        assert all(np.array_equal(before[k], after[k]) for k in before)
        return out
    monkeypatch.setattr(tr, "predict_scores", guarded)
    tr.train(nb.build(spec(), 0), stacks[:5], stacks[5:], tr.TrainConfig(max_epochs=2))


def test_last_short_batch_is_kept(stacks, monkeypatch):
    sizes = []
    real = tr.Optimizer.fit_batch

    def spy(self, xb, yb):
        sizes.append(len(xb))
        return real(self, xb, yb)
    monkeypatch.setattr(tr.Optimizer, "fit_batch", spy)
    tr.train(nb.build(spec(), 0), stacks[:7], stacks[7:], tr.TrainConfig(max_epochs=1))
    assert sizes == [5, 2]


def test_errors(stacks):
    net = nb.build(spec(), 0)
    with pytest.raises(InputError):
        tr.train(net, [], stacks[:3])
    with pytest.raises(InputError):
        tr.train(net, stacks[:3], [])
    big = nb.build(ModelSpec(ModelKind.DCNN_LSTM, input_side=32, extractor=(Stage(4),),
                             lstm_hidden=4, head=(1,)), 0)
    with pytest.raises(InputError):
        tr.train(big, stacks[:3], stacks[3:6])
    unlabeled = [SliceStack(stacks[0].slices)]
    with pytest.raises(InputError):
        tr.train(net, unlabeled, stacks[:3])


def test_non_finite_loss_reports_epoch_and_batch(stacks):
    net = nb.build(spec(), 0)
    net.parameters["fc2.bias"].data[:] = np.nan
    with pytest.raises(NumericError, match="epoch 1, batch 1"):
        tr.train(net, stacks[:5], stacks[5:], tr.TrainConfig(max_epochs=2))


def test_history_csv_round_trip(tmp_path, stacks):
    _, hist = tr.train(nb.build(spec(), 0), stacks[:5], stacks[5:], tr.TrainConfig(max_epochs=2))
    hist.write_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_auc,seconds"
    back = tr.TrainHistory.read_csv(tmp_path / "h.csv")
    assert [r.val_loss for r in back.records] == [r.val_loss for r in hist.records]
    assert back.best_epoch == hist.best_epoch


def _hist(name, secs, steps):
    return tr.TrainHistory([tr.EpochRecord(i + 1, 0.5, 0.5, 0.5, s) for i, s in enumerate(secs)],
                           1, len(secs), name, steps)


def test_epoch_time_report():
    one = tr.epoch_time_report([_hist("A", [1.0, 3.0], 13)])
    assert one[0].mean_seconds == 2.0
    rows = tr.epoch_time_report({"CNN3D": _hist("CNN3D", [5.0], 13), "CNN_LSTM": _hist("CNN_LSTM", [3.0], 13),
                                 "DCNN_LSTM": _hist("DCNN_LSTM", [4.0], 12)})
    assert [r.model for r in rows] == ["CNN_LSTM", "DCNN_LSTM", "CNN3D"]
    assert [r.mean_seconds for r in rows] == sorted(r.mean_seconds for r in rows)
    text = tr.format_timing(rows)
    assert text.splitlines()[0].split() == ["model", "s/epoch", "epochs", "timesteps"]


def test_timestep_counts():
    assert tr.kind_timesteps(ModelKind.DCNN_LSTM) == 12
    assert tr.kind_timesteps(ModelKind.CNN_LSTM) == 13


@pytest.mark.parametrize("kind", [ModelKind.CNN_LSTM, ModelKind.DCNN_LSTM])
def test_memorises_five_samples(kind):
    params = ph.PhantomParams()
    five = [ph.generate_stack(k % 2, params, seed=100 + k) for k in range(5)]
    x, y = tr.stack_arrays(five)
    net = nb.build(ModelSpec(kind), 0)
    opt = tr.Optimizer(net, tr.TrainConfig())
    loss = math.inf
    for epoch in range(500):
        loss = opt.fit_batch(x, y)
        if loss < 0.05:
            break
    assert loss < 0.05
