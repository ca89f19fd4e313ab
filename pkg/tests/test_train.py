import numpy as np
import pytest

from herdmetric import coatgen, embednet
from herdmetric.cli import DESK_OVERRIDES
from herdmetric.dataset import herd_identities, make_class_splits, make_openset_splits
from herdmetric.embednet import ClassHead, EmbedNet, TrainConfig
from herdmetric.errors import ConfigurationError
from herdmetric.openset import Gallery, knn_classify_many, train_on_split


@pytest.fixture(scope="module")
def herd4():
    return coatgen.generate_herd(4, 20, master_seed=11)


def pools(herd, seed=0):
    cs = make_class_splits(herd, seed)
    train = {c.identity_id: list(c.train) for c in cs}
    val = [(i, c.identity_id) for c in cs for i in c.val]
    return train, val, np.array([i.grid for i in herd])


def val_accuracy(net, train, val, images, k=5):
    g_idx = [i for c in sorted(train) for i in train[c]]
    g_lab = [c for c in sorted(train) for _ in train[c]]
    pred = knn_classify_many(Gallery(net.embed(images[g_idx]), np.array(g_lab)),
                             net.embed(images[[i for i, _ in val]]), k)
    return float(np.mean(pred == np.array([c for _, c in val])))


def test_one_epoch_one_row(herd4):
    train, val, images = pools(herd4)
    net = EmbedNet(seed=1)
    _, _, pocket, rows = embednet.train(net, None, train, val, images, "tl",
                                        TrainConfig(epochs=1))
    assert len(rows) == 1 and rows[0].epoch == 1
    assert pocket.best_epoch == 1
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)


def test_softmax_rtl_learns_four_identities(herd4):
    # oracle runs with the tuned softmax-rtl entry reached 1.0 for seeds 2..7;
    # validation is one instance per class, so the bound means all four right
    train, val, images = pools(herd4)
    cfg = TrainConfig(epochs=30, seed=2, overrides=DESK_OVERRIDES).for_loss("softmax-rtl")
    net = EmbedNet(seed=2)
    head = ClassHead(128, sorted(train), seed=2)
    _, _, pocket, rows = embednet.train(net, head, train, val, images, "softmax-rtl", cfg)
    assert pocket.best_val_accuracy >= 0.95


def test_pocket_keeps_best_epoch(herd4):
    train, val, images = pools(herd4, seed=5)
    cfg = TrainConfig(epochs=6, learning_rate=3e-2, seed=4)
    net = EmbedNet(seed=4)
    _, _, pocket, rows = embednet.train(net, None, train, val, images, "tl", cfg)
    best = max(r.val_accuracy for r in rows)
    assert pocket.best_val_accuracy == best
    assert rows[pocket.best_epoch - 1].val_accuracy == best
    assert pocket.best_epoch == min(r.epoch for r in rows if r.val_accuracy == best)
    assert val_accuracy(net, train, val, images) == best
    assert pocket.history == list(np.maximum.accumulate([r.val_accuracy for r in rows]))


def test_training_is_deterministic(herd4):
    cs = make_class_splits(herd4, 1)
    split = make_openset_splits(herd_identities(herd4), [0.25], 1, 1, cs)[0]
    cfg = TrainConfig(epochs=2, seed=9)
    a = train_on_split(herd4, split, "rtl", cfg)
    b = train_on_split(herd4, split, "rtl", cfg)
    for k, v in a[0].params.items():
        assert np.array_equal(v, b[0].params[k])
    assert [r.train_loss for r in a[3]] == [r.train_loss for r in b[3]]


def test_train_needs_head_for_softmax_kinds(herd4):
    train, val, images = pools(herd4)
    with pytest.raises(ConfigurationError):
        embednet.train(EmbedNet(), None, train, val, images, "softmax-tl", TrainConfig(epochs=1))


def test_overrides_resolve_per_loss():
    cfg = TrainConfig(overrides={"rtl": {"learning_rate": 0.01},
                                 "softmax-rtl": {"learning_rate": 0.03, "lam": 0.1}})
    assert cfg.for_loss("rtl").learning_rate == 0.01
    assert cfg.for_loss("softmax-rtl").loss.lam == 0.1
    assert cfg.for_loss("tl").learning_rate == 1e-3 and cfg.for_loss("tl").loss.lam == 0.01
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        TrainConfig(overrides={"nope": {}})
