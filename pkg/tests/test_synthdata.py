import numpy as np

from massdisp import synthdata


class TestWithinScenes:
    def test_deterministic(self):
        a = synthdata.gen_within(123)
        b = synthdata.gen_within(123)
        assert np.array_equal(a.image.data, b.image.data)
        assert np.array_equal(a.keypoints.positions, b.keypoints.positions)

    def test_values_in_unit_range(self):
        for seed in range(50):
            img = synthdata.gen_within(seed).image.data
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_margin_respected(self):
        lo, hi = synthdata.MARGIN, synthdata.SIZE - 1 - synthdata.MARGIN
        for seed in range(10_000):
            pos = synthdata.gen_within(seed).keypoints.positions
            assert np.all(pos >= lo) and np.all(pos <= hi)

    def test_noiseless_blob_peaks_at_keypoint(self):
        scene = synthdata.gen_within(7)
        x, y = scene.keypoints.positions[0]
        blob = synthdata.render_blob(x, y, 3.0, 1.0)
        peak = np.unravel_index(np.argmax(blob), blob.shape)
        assert abs(peak[1] - x) <= 0.5 and abs(peak[0] - y) <= 0.5


class TestCrossScenes:
    def test_deterministic(self):
        a = synthdata.gen_cross(55, occlude=True)
        b = synthdata.gen_cross(55, occlude=True)
        assert np.array_equal(a.image.data, b.image.data)

    def test_occlusion_only_touches_middle_blob(self):
        full = synthdata.gen_cross(99, occlude=False)
        occl = synthdata.gen_cross(99, occlude=True)
        assert np.array_equal(full.keypoints.positions, occl.keypoints.positions)
        assert np.all(occl.keypoints.visible)
        diff = np.abs(full.image.data[0] - occl.image.data[0])
        changed = np.argwhere(diff > 1e-6)
        assert changed.size > 0
        mid = full.keypoints.positions[1]
        dists = np.hypot(changed[:, 1] - mid[0], changed[:, 0] - mid[1])
        assert dists.max() < 14.0  # erased region hugs the middle blob

    def test_bone_length_bounds(self):
        lo = synthdata._MEAN_BONE / synthdata._BONE_SPREAD
        hi = synthdata._MEAN_BONE * synthdata._BONE_SPREAD
        for seed in range(10_000):
            pos = synthdata.gen_cross(seed).keypoints.positions
            for a, b in ((0, 1), (1, 2)):
                length = np.hypot(*(pos[b] - pos[a]))
                assert lo <= length <= hi

    def test_margin_respected(self):
        lo, hi = synthdata.MARGIN, synthdata.SIZE - 1 - synthdata.MARGIN
        for seed in range(500):
            pos = synthdata.gen_cross(seed).keypoints.positions
            assert np.all(pos >= lo) and np.all(pos <= hi)


def test_train_and_eval_seed_ranges_disjoint():
    train = set(range(synthdata.TRAIN_SEED_START, synthdata.TRAIN_SEED_END))
    ev = set(synthdata.eval_seeds())
    assert not train & ev
    assert len(ev) == 200
