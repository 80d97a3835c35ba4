import numpy as np
import pytest

from fgsmlab import autodiff as ad
from fgsmlab.data import (
    AugmentSpec,
    DataFormatError,
    augment,
    fixed_noise_store,
    load_cifar_binary,
    synth_dataset,
)


def _record(label, fill, coarse=None):
    head = bytes([label]) if coarse is None else bytes([coarse, label])
    return head + bytes([fill]) * 3072


def test_two_record_byte_oracle(tmp_path):
    # second record has a gradient of pixel bytes so channel/row order is checked too
    pix = bytes((i * 7) % 256 for i in range(3072))
    (tmp_path / "f.bin").write_bytes(_record(7, 255) + bytes([3]) + pix)
    ds = load_cifar_binary(tmp_path / "f.bin", "cifar10")
    assert len(ds) == 2 and ds.labels.tolist() == [7, 3]
    assert ds[0][2] == 7
    assert np.all(ds.images[0] == 1.0)
    expected = np.frombuffer(pix, dtype=np.uint8).reshape(3, 32, 32) / 255.0
    np.testing.assert_allclose(ds.images[1], expected, rtol=0, atol=1e-7)
    assert ds.images[1, 0, 0, 1] == pytest.approx(7 / 255)
    assert ds.images[1, 0, 1, 0] == pytest.approx((32 * 7 % 256) / 255)


def test_cifar100_uses_fine_label(tmp_path):
    (tmp_path / "g.bin").write_bytes(_record(42, 0, coarse=3) + _record(99, 0, coarse=19))
    ds = load_cifar_binary(tmp_path / "g.bin", "cifar100")
    assert ds.labels.tolist() == [42, 99] and ds.num_classes == 100


def test_five_batch_train_set(tmp_path):
    rec = b"".join(_record(i % 10, 0) for i in range(10))
    for i in range(1, 6):
        (tmp_path / f"data_batch_{i}.bin").write_bytes(rec * 1000)
    ds = load_cifar_binary(tmp_path, "cifar10", "train")
    assert len(ds) == 50_000 and ds.num_classes == 10
    assert np.bincount(ds.labels).tolist() == [5000] * 10


def test_framing_error(tmp_path):
    (tmp_path / "bad.bin").write_bytes(_record(1, 0)[:-5])
    with pytest.raises(DataFormatError):
        load_cifar_binary(tmp_path / "bad.bin", "cifar10")


def test_label_out_of_range(tmp_path):
    (tmp_path / "bad.bin").write_bytes(_record(10, 0))
    with pytest.raises(DataFormatError):
        load_cifar_binary(tmp_path / "bad.bin", "cifar10")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar_binary(tmp_path / "nope.bin", "cifar10")


def test_synth_balance_and_determinism():
    a = synth_dataset(500, 2, 16, seed=3)
    b = synth_dataset(500, 2, 16, seed=3)
    assert np.bincount(a.labels).tolist() == [250, 250]
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_synth_linearly_separable():
    ds = synth_dataset(500, 2, 16, seed=0)
    x = ds.images.reshape(len(ds), -1).astype(np.float64)
    w = ad.Tensor(np.zeros((2, x.shape[1])), requires_grad=True)
    b = ad.Tensor(np.zeros(2), requires_grad=True)
    for _ in range(200):
        gw, gb = ad.grad(ad.cross_entropy(ad.linear(ad.Tensor(x), w, b), ds.labels), [w, b])
        w.data -= 0.5 * gw.data
        b.data -= 0.5 * gb.data
    acc = np.mean(np.argmax(ad.linear(ad.Tensor(x), w, b).data, 1) == ds.labels)
    assert acc > 0.95


def test_stratified_subset_keeps_indices():
    ds = synth_dataset(100, 4, 8, seed=0)
    sub = ds.stratified(40, seed=1)
    assert np.bincount(sub.labels).tolist() == [10] * 4
    for i in range(len(sub)):
        idx, img, lab = sub[i]
        assert np.array_equal(ds.images[idx], img) and ds.labels[idx] == lab


class TestAugment:
    x = np.random.default_rng(0).uniform(size=(6, 3, 8, 8)).astype(np.float32)

    def test_all_off_identity(self):
        out = augment(self.x, AugmentSpec(False, False), np.random.default_rng(0))
        assert np.array_equal(out, self.x)

    def test_double_flip_identity(self):
        spec = AugmentSpec(True, False)
        once = augment(self.x, spec, None, force_flip=True)
        assert not np.array_equal(once, self.x)
        assert np.array_equal(augment(once, spec, None, force_flip=True), self.x)

    def test_stays_in_box(self):
        out = augment(self.x, AugmentSpec(), np.random.default_rng(1))
        assert out.min() >= 0 and out.max() <= 1 and out.shape == self.x.shape

    def test_crop_offset(self):
        out = augment(self.x, AugmentSpec(False, True, 2), None, offsets=np.full((6, 2), 4))
        assert np.array_equal(out[:, :, :6, :6], self.x[:, :, 2:, 2:])
        assert np.all(out[:, :, 6:, :] == 0)

    def test_crop_offsets_uniform(self):
        # recover each draw's offset from a single bright pixel
        pad, n = 4, 10_000
        img = np.zeros((n, 1, 9, 9), dtype=np.float32)
        img[:, 0, 4, 4] = 1.0
        out = augment(img, AugmentSpec(False, True, pad), np.random.default_rng(7))
        counts = np.zeros((2 * pad + 1, 2 * pad + 1))
        flat = out.reshape(n, -1)
        hit = flat.argmax(1)
        present = flat.max(1) > 0
        assert present.all()
        r, c = np.divmod(hit, 9)
        np.add.at(counts, (r, c), 1)
        p = 1 / counts.size
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_noise_store_binding_survives_shuffle(tmp_path):
    store = fixed_noise_store(8 / 255, (3, 4, 4), seed=2, path=tmp_path / "n.bin")
    a = store.batch([3, 1, 2])
    b = store.batch([2, 3, 1])
    assert np.array_equal(a[0], b[1]) and np.array_equal(a[2], b[0])
    assert np.abs(a).max() <= np.float32(8 / 255)
    store.save()
    again = fixed_noise_store(8 / 255, (3, 4, 4), seed=2, path=tmp_path / "n.bin")
    assert len(again) == 3
    assert again.get(1).tobytes() == store.get(1).tobytes()
    assert (tmp_path / "n.bin").read_bytes() == again.save(tmp_path / "m.bin").read_bytes()


def test_noise_store_rejects_mismatched_sidecar(tmp_path):
    s = fixed_noise_store(0.1, (1, 2, 2), seed=1, path=tmp_path / "n.bin")
    s.get(0)
    s.save()
    with pytest.raises(DataFormatError):
        fixed_noise_store(0.1, (1, 2, 2), seed=2, path=tmp_path / "n.bin")
