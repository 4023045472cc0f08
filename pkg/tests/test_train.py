import numpy as np
import pytest

from sparsemask.autodiff import Tensor
from sparsemask.config import RunConfig
from sparsemask.errors import ConfigError
from sparsemask.pruner import full_architecture
from sparsemask.searchspace import build_fdn
from sparsemask.train import (
    Trainer,
    batches,
    binary_fraction,
    epoch_order,
    load_data,
    param_groups,
    search,
    separation_ratio,
)
from sparsemask.searchspace import GateMatrix

TINY = {
    "task": {"image_size": 16, "num_classes": 3, "num_train": 16, "num_val": 8},
    "encoder": {"name": "tiny", "stages": [{"channels": 4, "stride": 2}, {"channels": 6, "stride": 4},
                                           {"channels": 8, "stride": 8}]},
    "decoder_channels": 4,
    "search": {"epochs": 2, "batch": 4},
    "train": {"epochs": 3, "batch": 4},
}


@pytest.fixture(scope="module")
def tiny():
    cfg = RunConfig.from_dict(TINY)
    return cfg, load_data(cfg)


def test_epoch_order_is_pure():
    np.testing.assert_array_equal(epoch_order(10, 3, 2), epoch_order(10, 3, 2))
    assert sorted(epoch_order(10, 3, 2)) == list(range(10))
    assert [len(b) for b in batches(np.arange(10), 4)] == [4, 4]


def test_param_groups_cover_every_parameter():
    cfg = RunConfig.from_dict(TINY)
    net = build_fdn(cfg.encoder, 4, seed=0, num_classes=3)
    groups = param_groups(net, cfg.search)
    ids = [id(p) for g in groups for p in g.params]
    assert len(ids) == len(set(ids)) == len(net.parameters())
    gates = [g for g in groups if g.name == "gates"][0]
    assert gates.weight_decay == 0.0 and len(gates.params) == 12
    assert [g.base_lr for g in groups] == [0.005, 0.05, 0.05]


def test_search_trains_decoder_weights(tiny):
    cfg, data = tiny
    before = build_fdn(cfg.encoder, 4, seed=0, num_classes=3)
    res = search(cfg, data, eval_every=0)
    for (name, a), (_, b) in zip(before.decoder.named_parameters(), res.fdn.decoder.named_parameters()):
        assert not np.array_equal(a.data, b.data), name
    assert len(res.metrics.series("search", "binary_fraction")) == 2


def test_checkpoint_resume(tiny, tmp_path):
    cfg, data = tiny
    arch = full_architecture(cfg.encoder, cfg.decoder_channels)
    a = Trainer(arch, cfg, data)
    a.run(1, eval_every=0)
    path = tmp_path / "ckpt.npz"
    a.save(path)
    b = Trainer(arch, cfg, data)
    b.load(path)
    assert b.epoch == 1
    assert b.next_step_loss() == a.next_step_loss()
    a.run(1, eval_every=0)
    b.run(1, eval_every=0)
    for (_, pa), (_, pb) in zip(a.net.named_parameters(), b.net.named_parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_next_step_loss_leaves_state_untouched(tiny):
    cfg, data = tiny
    t = Trainer(full_architecture(cfg.encoder, cfg.decoder_channels), cfg, data)
    before = t.net.state_dict()
    t.next_step_loss()
    after = t.net.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_loss_decreases_on_default_task():
    cfg = RunConfig.from_dict({"train": {"epochs": 3}})
    data = load_data(cfg)
    t = Trainer(full_architecture(cfg.encoder, cfg.decoder_channels), cfg, data)
    t.run(eval_every=0)
    losses = t.metrics.series("train", "loss")
    assert len(losses) == 3
    assert losses[0] > losses[1] > losses[2]


def test_prediction_shape(tiny):
    cfg, data = tiny
    t = Trainer(full_architecture(cfg.encoder, cfg.decoder_channels), cfg, data)
    out = t.net(Tensor(data.val_x[:2]), training=False)
    assert out.shape == (2, 3, 16, 16)


def test_gate_summaries():
    assert binary_fraction([0.0, 0.05, 0.5, 0.95]) == 0.75
    gm = GateMatrix.full(2, 0.5)
    gm.values[next(iter(gm.values))] = 1e-4
    assert separation_ratio(gm, 1e-3) == pytest.approx(5000)
    assert separation_ratio(GateMatrix.full(2, 0.5), 1e-3) == float("inf")


def test_config_round_trip_and_digest():
    cfg = RunConfig.from_dict(TINY)
    again = RunConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.digest() == cfg.digest()
    assert RunConfig().search.lam == 0.01 and RunConfig().search.sigma == 0.001


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"search": {"epochs": 0}},
    {"search": {"batch": 1}},
    {"search": {"sigma": 1.5}},
    {"regularizer": "l2"},
    {"gate_param": "tanh"},
    {"activation": "gelu"},
    {"task": {"image_size": 60}},
    {"train": {"lam": 0.1}},
])
def test_config_rejects(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)
