import numpy as np
import pytest
import torch

from choroidseg import dataio, synthdata as sd
from choroidseg.errors import ConfigError, DataError, LabelVisibilityError
from choroidseg.synthdata import ImageSample

from conftest import band_spec


@pytest.fixture()
def small_dataset(tmp_path):
    sd.generate_dataset(band_spec(seed=4), 10, tmp_path / "ds")
    return tmp_path / "ds"


class TestLoadDataset:
    def test_roundtrip_from_generator(self, small_dataset):
        ds = dataio.load_dataset(small_dataset, "source", labels_visible=True)
        assert len(ds) == 10
        assert ds.ids == sorted(ds.ids)
        sample = ds.sample(0)
        assert sample.image.shape == sample.mask.shape
        assert sample.domain == "source"

    def test_label_blind_mask_access_raises(self, small_dataset):
        ds = dataio.load_dataset(small_dataset, "target", labels_visible=False)
        with pytest.raises(LabelVisibilityError):
            ds.mask(0)
        assert ds.sample(0).mask is None

    def test_dimension_mismatch_names_offender(self, small_dataset):
        bad_id = "source_00003"
        wrong = np.zeros((32, 48), dtype=np.uint8)
        dataio.write_mask_png(small_dataset / "masks" / f"{bad_id}.png", wrong)
        with pytest.raises(DataError, match=bad_id):
            dataio.load_dataset(small_dataset, "source", labels_visible=True)

    def test_missing_mask_names_basename(self, small_dataset):
        missing = "source_00007"
        (small_dataset / "masks" / f"{missing}.png").unlink()
        with pytest.raises(DataError, match=missing):
            dataio.load_dataset(small_dataset, "source", labels_visible=True)

    def test_corrupted_masks_fine_when_label_blind(self, small_dataset):
        # label blindness: mask files are never opened on the unlabeled path
        for path in (small_dataset / "masks").glob("*.png"):
            path.write_bytes(b"not a png at all")
        ds = dataio.load_dataset(small_dataset, "target", labels_visible=False)
        batches = dataio.single_iterator(ds, 2, seed=0, size=64)
        for _ in range(6):
            batch = next(batches)
            assert batch.labels_onehot is None

    def test_empty_root_rejected(self, tmp_path):
        with pytest.raises(DataError):
            dataio.load_dataset(tmp_path, "source", labels_visible=True)


class TestPreprocess:
    def test_constant_image_stays_constant(self):
        for in_size in (48, 96, 200):
            sample = ImageSample(np.full((in_size, in_size), 0.5), None, "source", "x")
            img, onehot = dataio.preprocess(sample, 64)
            assert img.shape == (1, 64, 64)
            assert onehot is None
            assert torch.allclose(img, torch.full_like(img, 0.5), atol=1e-6)

    def test_all_background_onehot(self):
        sample = ImageSample(np.zeros((40, 40)), np.zeros((40, 40), dtype=np.uint8), "source", "x")
        _, onehot = dataio.preprocess(sample, 64)
        assert torch.all(onehot[0] == 1.0)
        assert torch.all(onehot[1] == 0.0)

    def test_onehot_sums_to_one_exactly(self, small_dataset):
        ds = dataio.load_dataset(small_dataset, "source", labels_visible=True)
        _, onehot = dataio.preprocess(ds.sample(0), 48)
        assert torch.all(onehot.sum(dim=0) == 1.0)
        assert set(onehot.unique().tolist()) <= {0.0, 1.0}

    def test_band_resize_follows_nearest_neighbor_mapping(self):
        mask = np.zeros((256, 256), dtype=np.uint8)
        mask[100:151, :] = 1  # band spanning rows 100..150
        sample = ImageSample(mask.astype(float), mask, "source", "x")
        _, onehot = dataio.preprocess(sample, 224)
        got = onehot[1].numpy().astype(np.uint8)
        # brute-force nearest-neighbor index map: out[r, c] = in[floor(r*256/224), ...]
        rows = (np.arange(224) * 256 // 224)
        cols = (np.arange(224) * 256 // 224)
        want = mask[np.ix_(rows, cols)]
        assert np.array_equal(got, want)
        for c in range(224):
            run = np.flatnonzero(got[:, c])
            assert run[0] >= 100 * 224 // 256 - 1
            assert run[-1] <= -(-150 * 224 // 256) + 1  # ceil

    def test_small_size_rejected(self):
        sample = ImageSample(np.zeros((40, 40)), None, "source", "x")
        with pytest.raises(ConfigError):
            dataio.preprocess(sample, 16)


class TestIterators:
    def _two_domains(self, tmp_path, n_source, n_target):
        sd.generate_dataset(band_spec(seed=6), n_source, tmp_path / "s")
        sd.generate_dataset(band_spec(seed=7), n_target, tmp_path / "t", domain="target")
        source = dataio.load_dataset(tmp_path / "s", "source", labels_visible=True)
        target = dataio.load_dataset(tmp_path / "t", "target", labels_visible=False)
        return source, target

    def test_short_target_cycles_within_source_epoch(self, tmp_path):
        source, target = self._two_domains(tmp_path, 4, 2)
        it = dataio.paired_iterator(source, target, 2, seed=0, size=64)
        steps = [next(it) for _ in range(2)]  # one source epoch
        source_ids = [i for bs, _ in steps for i in bs.ids]
        target_ids = [i for _, bt in steps for i in bt.ids]
        assert sorted(source_ids) == sorted(source.ids)
        assert sorted(target_ids) == sorted(target.ids * 2)

    def test_same_seed_reproduces_id_sequences(self, tmp_path):
        source, target = self._two_domains(tmp_path, 6, 4)
        seq = lambda: [
            (bs.ids, bt.ids)
            for (bs, bt), _ in zip(dataio.paired_iterator(source, target, 2, seed=9, size=64), range(9))
        ]
        assert seq() == seq()

    def test_different_seed_changes_order(self, tmp_path):
        source, target = self._two_domains(tmp_path, 8, 4)
        a = [bs.ids for (bs, _), _ in zip(dataio.paired_iterator(source, target, 2, seed=1, size=64), range(4))]
        b = [bs.ids for (bs, _), _ in zip(dataio.paired_iterator(source, target, 2, seed=2, size=64), range(4))]
        assert a != b

    def test_target_batches_hide_labels(self, tmp_path):
        source, target = self._two_domains(tmp_path, 4, 4)
        bs, bt = next(dataio.paired_iterator(source, target, 2, seed=0, size=64))
        assert bs.labels_onehot is not None
        assert bt.labels_onehot is None

    def test_oversized_batch_rejected(self, tmp_path):
        source, target = self._two_domains(tmp_path, 4, 2)
        with pytest.raises(ConfigError):
            next(dataio.paired_iterator(source, target, 3, seed=0, size=64))
        with pytest.raises(ConfigError):
            next(dataio.single_iterator(target, 3, seed=0, size=64))

    def test_epoch_coverage_with_remainder(self, tmp_path):
        source, target = self._two_domains(tmp_path, 7, 4)
        it = dataio.paired_iterator(source, target, 2, seed=3, size=64)
        epoch = [next(it) for _ in range(3)]  # 7 // 2 = 3 steps, one id dropped
        ids = [i for bs, _ in epoch for i in bs.ids]
        assert len(ids) == len(set(ids)) == 6

    def test_onehot_partition_over_an_epoch(self, tmp_path):
        source, target = self._two_domains(tmp_path, 6, 4)
        it = dataio.paired_iterator(source, target, 2, seed=0, size=48)
        for _ in range(3):
            bs, _ = next(it)
            assert torch.all(bs.labels_onehot.sum(dim=1) == 1.0)
            assert bs.images.min() >= 0.0 and bs.images.max() <= 1.0

    def test_start_step_resumes_mid_schedule(self, tmp_path):
        source, target = self._two_domains(tmp_path, 6, 4)
        full = [
            (bs.ids, bt.ids)
            for (bs, bt), _ in zip(dataio.paired_iterator(source, target, 2, seed=5, size=64), range(8))
        ]
        tail = [
            (bs.ids, bt.ids)
            for (bs, bt), _ in zip(
                dataio.paired_iterator(source, target, 2, seed=5, size=64, start_step=5), range(3))
        ]
        assert tail == full[5:]

    def test_single_iterator_covers_epoch(self, tmp_path):
        sd.generate_dataset(band_spec(seed=8), 6, tmp_path / "only")
        ds = dataio.load_dataset(tmp_path / "only", "source", labels_visible=True)
        it = dataio.single_iterator(ds, 2, seed=0, size=64)
        ids = [i for b, _ in zip(it, range(3)) for i in b.ids]
        assert sorted(ids) == sorted(ds.ids)
