import numpy as np
import pytest

from attnxfer import synthdata
from attnxfer.synthdata import SynthConfig

SMALL = SynthConfig(source_per_class=30, frames_per_video=4, test_videos_per_class=3)


@pytest.fixture(scope="module")
def small():
    return synthdata.generate(SMALL)


def probe_accuracy(x_train, y_train, x_test, y_test, n):
    """Ridge least-squares linear probe on raw pixels."""
    a = np.c_[x_train.reshape(len(x_train), -1), np.ones(len(x_train))]
    t = np.eye(n)[y_train]
    w = np.linalg.solve(a.T @ a + 1e-2 * np.eye(a.shape[1]), a.T @ t)
    b = np.c_[x_test.reshape(len(x_test), -1), np.ones(len(x_test))]
    return float(np.mean((b @ w).argmax(1) == y_test))


class TestGenerate:
    def test_default_split_sizes(self):
        data = synthdata.generate(SynthConfig(source_per_class=1, frames_per_video=1))
        assert len(data.split("target-test")) == 32
        assert len(data.split("target-train")) == 8
        assert len(data.split("source")) == 4

    def test_shapes_and_ids(self, small):
        v = small.split("target-test")[0]
        assert v.frames.shape == (4, 1, 24, 24)
        assert v.video_id == "tst-c0-000"
        assert small.split("source")[0].video_id == "src-c0-0000"
        assert small.concepts == ["concept0", "concept1", "concept2", "concept3"]

    def test_class_balance(self, small):
        for split, per in (("source", 30), ("target-train", 2), ("target-test", 3)):
            labels = [v.label for v in small.split(split)]
            np.testing.assert_array_equal(np.bincount(labels), [per] * 4)

    def test_deterministic(self, small):
        again = synthdata.generate(SMALL)
        for split in synthdata.SPLITS:
            for a, b in zip(small.split(split), again.split(split)):
                assert a.video_id == b.video_id
                assert a.frames.tobytes() == b.frames.tobytes()

    def test_seed_changes_data(self, small):
        other = synthdata.generate(SynthConfig(**{**SMALL.__dict__, "seed": 1}))
        assert small.split("target-test")[0].frames.tobytes() != other.split("target-test")[0].frames.tobytes()

    def test_domain_gap_for_linear_probe(self):
        data = synthdata.generate(SynthConfig(source_per_class=100, frames_per_video=2))
        xs, ys = synthdata.arrays(data.split("source"))
        xt, yt = synthdata.arrays(data.split("target-test"))
        held = np.arange(len(ys)) % 5 == 0
        source_acc = probe_accuracy(xs[~held], ys[~held], xs[held], ys[held], 4)
        target_acc = probe_accuracy(xs, ys, xt, yt, 4)
        assert source_acc >= 0.99
        assert source_acc - target_acc >= 0.10

    def test_validation(self):
        for bad in (dict(n_concepts=1), dict(n_concepts=9), dict(image_size=8), dict(frames_per_video=0),
                    dict(target_layout="diagonal"), dict(tint=-0.1)):
            with pytest.raises(ValueError):
                synthdata.generate(SynthConfig(**bad))

    def test_anchor_ring_is_inside_image(self):
        for n in (2, 4, 8):
            for label in range(n):
                r, c = synthdata.class_anchor(label, n, 24)
                assert 0 <= r <= 17 and 0 <= c <= 17


class TestSeparableMaps:
    def test_true_map_dominates(self):
        for _, label, stacks in synthdata.separable_maps(seed=3):
            assert stacks.shape == (6, 4, 5, 5)
            sums = stacks.sum(axis=(2, 3))
            assert np.all(sums.argmax(axis=1) == label)


class TestImageFiles:
    def test_round_trip(self, tmp_path):
        arr = np.random.default_rng(0).random((1, 5, 7))
        path = tmp_path / "a.atim"
        synthdata.write_image(path, arr)
        back = synthdata.read_image(path)
        np.testing.assert_array_equal(back, arr.astype(np.float32))
        assert synthdata.image_bytes(back) == path.read_bytes()

    def test_rejects_garbage(self):
        data = synthdata.image_bytes(np.zeros((2, 2)))
        with pytest.raises(ValueError, match="magic"):
            synthdata.image_from_bytes(b"NOPE" + data[4:])
        with pytest.raises(ValueError, match="size"):
            synthdata.image_from_bytes(data[:-1])

    def test_write_dataset(self, tmp_path, small):
        paths = synthdata.write_dataset(small, tmp_path)
        lines = open(paths["target-test"]).read().splitlines()
        assert len(lines) == 12
        assert '"frames": ["target-test/tst-c0-000/0000.atim"' in lines[0]
        assert (tmp_path / "concepts.txt").read_text() == "concept0\nconcept1\nconcept2\nconcept3\n"
        frame = synthdata.read_image(tmp_path / "target-test" / "tst-c0-000" / "0003.atim")
        np.testing.assert_array_equal(frame, small.split("target-test")[0].frames[3].astype(np.float32))
