import struct

import numpy as np
import pytest

from conftest import mnist_dir, needs_mnist
from driftguard import data as D
from driftguard.metrics import eval_task
from driftguard.model import Network
from driftguard.optim import SGD
from driftguard.strategies import Strategy, StrategyConfig, train_task


def write_idx(tmp_path, images: np.ndarray, labels: np.ndarray, image_magic=0x803, label_magic=0x801):
    n, rows, cols = images.shape
    ip, lp = tmp_path / "img", tmp_path / "lbl"
    ip.write_bytes(struct.pack(">IIII", image_magic, n, rows, cols) + images.astype(np.uint8).tobytes())
    lp.write_bytes(struct.pack(">II", label_magic, labels.size) + labels.astype(np.uint8).tobytes())
    return ip, lp


def test_load_idx_scales_and_flattens(tmp_path, rng):
    images = rng.integers(0, 256, size=(5, 28, 28))
    images[0, 0, 0], images[0, 0, 1] = 255, 0
    ip, lp = write_idx(tmp_path, images, np.arange(5))
    x, y = D.load_idx(ip, lp)
    assert x.shape == (5, 784)
    assert x[0, 0] == 1.0 and x[0, 1] == 0.0
    np.testing.assert_allclose(x, images.reshape(5, -1) / 255.0)
    assert y.tolist() == [0, 1, 2, 3, 4]


def test_load_idx_rejects_bad_label_magic(tmp_path):
    ip, lp = write_idx(tmp_path, np.zeros((2, 2, 2)), np.zeros(2), label_magic=0x803)
    with pytest.raises(D.FormatError, match="magic"):
        D.load_idx(ip, lp)


def test_load_idx_rejects_truncation(tmp_path):
    ip, lp = write_idx(tmp_path, np.zeros((3, 4, 4)), np.zeros(3))
    ip.write_bytes(ip.read_bytes()[:-5])
    with pytest.raises(D.FormatError, match="truncated"):
        D.load_idx(ip, lp)


def test_load_idx_rejects_count_mismatch(tmp_path):
    ip, lp = write_idx(tmp_path, np.zeros((3, 4, 4)), np.zeros(2))
    with pytest.raises(D.FormatError, match="mismatch"):
        D.load_idx(ip, lp)


@needs_mnist
def test_real_mnist_shapes():
    (x, y), (xt, yt) = D.load_mnist(mnist_dir())
    assert x.shape == (60000, 784) and xt.shape == (10000, 784)
    assert x.min() == 0.0 and x.max() == 1.0
    assert np.bincount(y).tolist() == [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]


def base(rng, n=60, d=16, classes=10):
    return (rng.random((n, d)), np.arange(n) % classes), (rng.random((n // 2, d)), np.arange(n // 2) % classes)


def test_permuted_stream_contract(rng):
    train, test = base(rng)
    s = D.permuted_tasks(train, test, 4, seed=3)
    assert len(s) == 4 and s.heads.mode == "shared" and s.heads.classes_per_head == 10
    np.testing.assert_array_equal(s.train(0).inputs, train[0])
    perms = D.task_permutations(16, 4, 3)
    assert len({p.tobytes() for p in perms}) == 4
    for k, p in enumerate(perms):
        assert sorted(p.tolist()) == list(range(16))
        np.testing.assert_array_equal(s.train(k).inputs, train[0][:, p])
        np.testing.assert_array_equal(s.test(k).inputs, test[0][:, p])
        # per-pixel means get permuted, not changed
        np.testing.assert_allclose(np.sort(s.train(k).inputs.mean(0)), np.sort(train[0].mean(0)))


def test_permuted_stream_is_deterministic(rng):
    train, test = base(rng)
    a = D.permuted_tasks(train, test, 3, seed=11)
    b = D.permuted_tasks(train, test, 3, seed=11)
    for k in range(3):
        np.testing.assert_array_equal(a.train(k).inputs, b.train(k).inputs)


def test_split_stream_partitions_classes(rng):
    train, test = base(rng, n=100)
    s = D.split_tasks(train, test, 2)
    assert len(s) == 5 and s.heads.mode == "per-task" and s.heads.n_heads == 5
    covered = sorted(c for k in range(5) for c in s.train(k).class_map)
    assert covered == list(range(10))
    assert sum(len(s.train(k)) for k in range(5)) == 100
    for k in range(5):
        assert set(s.train(k).labels.tolist()) == {0, 1}
        assert s.train(k).class_map == {2 * k: 0, 2 * k + 1: 1}


def test_split_hundred_classes_into_ten_tasks(rng):
    train, test = base(rng, n=400, classes=100)
    assert len(D.split_tasks(train, test, 10)) == 10


def test_split_requires_divisible_classes(rng):
    with pytest.raises(D.ConfigurationError):
        D.split_tasks(*base(rng), 3)


def test_synthetic_stream_shape_and_determinism():
    s = D.synthetic_tasks(3, 10, 2, 50, seed=5)
    assert len(s) == 3 and all(sorted(set(s.train(k).labels.tolist())) == [0, 1] for k in range(3))
    again = D.synthetic_tasks(3, 10, 2, 50, seed=5)
    for k in range(3):
        np.testing.assert_array_equal(s.train(k).inputs, again.train(k).inputs)


def test_synthetic_task_is_learnable_quickly():
    s = D.synthetic_tasks(1, 10, 2, 500, seed=0, n_test_per_class=500)
    net = Network(10, [32, 32], s.heads, seed=0)
    strategy = Strategy(StrategyConfig(), net)
    train_task(net, strategy, s.train(0), epochs=1, optimizer=SGD(0.05), batch_size=10,
               rng=np.random.default_rng(0))  # 100 steps
    assert eval_task(net, s.test(0)) > 0.95


def test_downsample_averages_blocks():
    img = np.arange(16, dtype=float).reshape(1, 16)
    out = D.downsample(img, side=4)
    assert out.tolist() == [[2.5, 4.5, 10.5, 12.5]]


def test_minibatches_cover_epoch_once():
    batches = list(D.minibatches(10, 4, np.random.default_rng(0)))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def test_task_datasets_are_read_only(rng):
    s = D.permuted_tasks(*base(rng), 2)
    with pytest.raises(ValueError):
        s.train(0).inputs[0, 0] = 1.0
