import numpy as np
import pytest
from dataclasses import replace

from mupkit import container, model_zoo as mz
from mupkit.nn_core import Batch, Conv2d, Dense, forward


# --------------------------------------------------------------------------
# Dataset generation


def test_dataset_regenerates_bitwise():
    a = mz.generate_dataset(seed=5, num_classes=3, per_class_count=50)
    b = mz.generate_dataset(seed=5, num_classes=3, per_class_count=50)
    assert np.array_equal(a.train.images, b.train.images)
    assert np.array_equal(a.test.labels, b.test.labels)
    c = mz.generate_dataset(seed=6, num_classes=3, per_class_count=50)
    assert not np.array_equal(a.train.images, c.train.images)


def test_dataset_shapes_and_split(small_data):
    n = 3 * 60
    n_train = int(n * mz.TRAIN_FRACTION)
    assert len(small_data.train) == n_train
    assert len(small_data.test) == n - n_train
    assert small_data.train.images.shape[1:] == (1, 10, 10)
    assert small_data.num_classes == 3


def test_dataset_pixels_integer_valued(small_data):
    for split in (small_data.train, small_data.test):
        assert split.images.min() >= 0.0 and split.images.max() <= 255.0
        assert np.array_equal(split.images, np.rint(split.images))


def test_dataset_splits_class_balanced(small_data):
    for split in (small_data.train, small_data.test):
        counts = np.bincount(split.labels, minlength=3)
        assert counts.min() == counts.max()


def test_dataset_splits_are_shuffled(small_data):
    # any prefix should mix classes rather than visit them block by block
    head = small_data.train.labels[:30]
    assert len(np.unique(head)) == 3


def test_dataset_validation():
    with pytest.raises(ValueError):
        mz.generate_dataset(seed=0, num_classes=2, per_class_count=50)
    with pytest.raises(ValueError):
        mz.generate_dataset(seed=0, num_classes=3, per_class_count=10)
    with pytest.raises(ValueError):
        mz.generate_dataset(seed=0, num_classes=3, per_class_count=50,
                            image_shape=(1, 4, 4))


# --------------------------------------------------------------------------
# Architectures and initialization


def test_arch_registry():
    for name in mz.ARCH_NAMES:
        arch = mz.build_arch(name, (1, 14, 14), 5)
        net = mz.init_network(arch, seed=0)
        assert net.num_params > 0
        assert net.input_shift == mz.INPUT_SHIFT
        assert net.input_scale == mz.INPUT_SCALE
    with pytest.raises(ValueError):
        mz.build_arch("resnet", (1, 14, 14), 5)


def test_init_deterministic_and_seed_sensitive():
    arch = mz.build_arch("mlp", (1, 10, 10), 3)
    a = mz.init_network(arch, seed=4).flat_params()
    b = mz.init_network(arch, seed=4).flat_params()
    c = mz.init_network(arch, seed=5).flat_params()
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_init_biases_zero():
    arch = mz.build_arch("cnn_a", (1, 14, 14), 5)
    net = mz.init_network(arch, seed=0)
    for idx, store in net.params.items():
        assert np.all(store["bias"] == 0.0)


def test_untrained_accuracy_near_chance(small_data):
    """Random init on balanced data should sit at ~1/K within 3 sigma."""
    arch = mz.build_arch("cnn_b", small_data.image_shape,
                         small_data.num_classes)
    accs = [mz.accuracy(mz.init_network(arch, seed=s), small_data.test)
            for s in range(5)]
    n = len(small_data.test)
    p = 1.0 / small_data.num_classes
    sigma = np.sqrt(p * (1 - p) / n)
    assert abs(np.mean(accs) - p) < 3 * sigma + 0.05


# --------------------------------------------------------------------------
# Training


def test_training_reduces_loss(small_data):
    arch = mz.build_arch("mlp", small_data.image_shape, 3)
    result = mz.train_with_stats(arch, small_data,
                                 mz.TrainConfig(epochs=6, seed=0))
    losses = result.epoch_losses
    assert len(losses) == 6
    assert losses[-1] < losses[0]
    assert result.test_accuracy > 1.0 / 3.0


def test_training_deterministic(small_data):
    arch = mz.build_arch("mlp", small_data.image_shape, 3)
    cfg = mz.TrainConfig(epochs=3, seed=7)
    a = mz.train(arch, small_data, cfg).flat_params()
    b = mz.train(arch, small_data, cfg).flat_params()
    assert np.array_equal(a, b)


def test_training_divergence_raises(small_data):
    arch = mz.build_arch("mlp", small_data.image_shape, 3)
    with pytest.raises(mz.DivergenceError):
        mz.train(arch, small_data, mz.TrainConfig(epochs=8,
                                                  learning_rate=1e9))


def test_weight_decay_shrinks_weights(small_data):
    arch = mz.build_arch("mlp", small_data.image_shape, 3)
    plain = mz.train(arch, small_data, mz.TrainConfig(epochs=4, seed=0))
    decayed = mz.train(arch, small_data,
                       mz.TrainConfig(epochs=4, seed=0, weight_decay=0.01))
    assert np.linalg.norm(decayed.flat_params()) < \
        np.linalg.norm(plain.flat_params())


def test_train_config_validation():
    with pytest.raises(ValueError):
        mz.TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        mz.TrainConfig(learning_rate=-1.0)


# --------------------------------------------------------------------------
# Serialization


def test_network_round_trip(small_net):
    blob = mz.save(small_net)
    loaded = mz.load(blob)
    assert loaded.input_shape == small_net.input_shape
    assert loaded.num_classes == small_net.num_classes
    assert loaded.input_shift == small_net.input_shift
    assert loaded.input_scale == small_net.input_scale
    assert np.array_equal(loaded.flat_params(), small_net.flat_params())
    x = np.full((2, *small_net.input_shape), 100.0)
    assert np.array_equal(forward(loaded, x), forward(small_net, x))


def test_network_save_deterministic(small_net):
    assert mz.save(small_net) == mz.save(small_net)


def test_network_load_rejects_corruption(small_net):
    blob = bytearray(mz.save(small_net))
    blob[len(blob) // 2] ^= 0xFF
    with pytest.raises(container.ContainerError):
        mz.load(bytes(blob))


def test_network_load_rejects_wrong_format(small_data):
    blob = mz.save_dataset(small_data)
    with pytest.raises(container.ContainerError):
        mz.load(blob)


def test_dataset_round_trip(small_data):
    blob = mz.save_dataset(small_data)
    loaded = mz.load_dataset(blob)
    assert np.array_equal(loaded.train.images, small_data.train.images)
    assert np.array_equal(loaded.train.labels, small_data.train.labels)
    assert np.array_equal(loaded.test.images, small_data.test.images)
    assert loaded.num_classes == small_data.num_classes
    assert loaded.image_shape == small_data.image_shape
    assert mz.save_dataset(loaded) == blob
