import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racseg.pointcloud import DenseLabels, load_clicks, load_cloud
from racseg.synthdata import (
    OTOC,
    OTTC,
    AnnotationError,
    ClickScheme,
    SceneConfig,
    generate_scene,
    make_dataset,
    read_manifest,
    sample_clicks,
)


class TestScene:
    def test_single_floor(self):
        cloud, labels = generate_scene(SceneConfig(n_points=300, object_classes=(0,)))
        assert cloud.n_points == 300
        assert set(labels.class_per_point.tolist()) == {0}
        # a floor lies on z = 0 up to surface noise
        assert np.abs(cloud.locations[:, 2]).max() < 0.1

    def test_default_size(self):
        cloud, labels = generate_scene(SceneConfig())
        assert cloud.n_points == 4096 and cloud.feature_dim == 3
        assert len(labels.class_per_point) == 4096

    def test_seeds(self):
        a, la = generate_scene(SceneConfig(rng_seed=1))
        b, lb = generate_scene(SceneConfig(rng_seed=1))
        c, _ = generate_scene(SceneConfig(rng_seed=2))
        assert a.equals(b) and la.equals(lb)
        assert not a.equals(c)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_all_classes_when_enough_objects(self, seed):
        cfg = SceneConfig(n_points=1024, object_count=(6, 9), rng_seed=seed)
        _, labels = generate_scene(cfg)
        assert set(labels.class_per_point.tolist()) == set(range(6))
        n_inst = len(np.unique(labels.instance_per_point))
        assert 6 <= n_inst <= 9
        counts = np.bincount(labels.instance_per_point)
        assert counts.min() >= cfg.min_points_per_object

    def test_colors_in_unit_range(self):
        cloud, _ = generate_scene(SceneConfig(rng_seed=5))
        assert cloud.features.min() >= 0 and cloud.features.max() <= 1

    @pytest.mark.parametrize(
        "cfg",
        [
            SceneConfig(n_classes=1),
            SceneConfig(n_classes=7),
            SceneConfig(object_count=(0, 0)),
            SceneConfig(object_count=(5, 3)),
            SceneConfig(object_classes=()),
            SceneConfig(object_classes=(9,)),
            SceneConfig(n_points=100, object_count=(5, 5)),
            SceneConfig(extent=0.0),
        ],
    )
    def test_infeasible(self, cfg):
        with pytest.raises(ValueError):
            generate_scene(cfg)


class TestClicks:
    def _labels(self, sizes):
        inst = np.repeat(np.arange(len(sizes)), sizes)
        return DenseLabels(inst % 3, inst)

    def test_otoc_and_ottc(self):
        labels = self._labels([5, 6, 7, 8, 9, 10, 11])
        otoc = sample_clicks(labels, OTOC)
        ottc = sample_clicks(labels, OTTC)
        assert otoc.n_labeled == 7 and ottc.n_labeled == 21
        for lab in (otoc, ottc):
            np.testing.assert_array_equal(lab.classes, labels.class_per_point[lab.indices])
            assert len(set(lab.indices.tolist())) == lab.n_labeled

    def test_one_click_per_instance(self):
        labels = self._labels([4, 4, 4])
        lab = sample_clicks(labels, OTTC)
        assert np.bincount(labels.instance_per_point[lab.indices]).tolist() == [3, 3, 3]

    def test_too_small(self):
        with pytest.raises(AnnotationError, match="instance 1"):
            sample_clicks(self._labels([5, 2, 5]), OTTC)

    def test_invalid_scheme(self):
        with pytest.raises(ValueError):
            ClickScheme(0)

    def test_roughly_uniform(self):
        labels = self._labels([4])
        hits = np.zeros(4)
        rng = np.random.default_rng(0)
        for _ in range(4000):
            hits[sample_clicks(labels, OTOC, rng).indices[0]] += 1
        assert np.all(np.abs(hits / 4000 - 0.25) < 0.03)


class TestDataset:
    def test_layout_and_fraction(self, tmp_path):
        cfg = SceneConfig(n_points=600, object_count=(6, 8), rng_seed=3)
        manifest = make_dataset(cfg, 4, 2, ClickScheme(1, 9), tmp_path)
        entries, meta = read_manifest(manifest)
        assert [e.split for e in entries] == ["train"] * 4 + ["test"] * 2
        # recount the label fraction from the files themselves
        m = n = 0
        for e in entries:
            cloud, dense = load_cloud(e.cloud_path)
            clicks = load_clicks(e.clicks_path)
            assert dense is not None
            np.testing.assert_array_equal(clicks.classes, dense.class_per_point[clicks.indices])
            m += clicks.n_labeled
            n += cloud.n_points
        assert meta["label_fraction"] == m / n
        assert meta["n_classes"] == 6

    def test_manifest_lines(self, tmp_path):
        make_dataset(SceneConfig(n_points=400, object_count=(6, 6)), 2, 1, OTOC, tmp_path)
        body = [l for l in (tmp_path / "manifest.tsv").read_text().splitlines() if not l.startswith("#")]
        assert body == [
            "train\tscene_0000.bin\tscene_0000.clicks",
            "train\tscene_0001.bin\tscene_0001.clicks",
            "test\tscene_0002.bin\tscene_0002.clicks",
        ]

    def test_twenty_five_scenes(self, tmp_path):
        manifest = make_dataset(SceneConfig(n_points=300, object_count=(6, 6)), 20, 5, OTOC, tmp_path)
        entries, _ = read_manifest(manifest)
        assert len(entries) == 25
        assert sum(e.split == "test" for e in entries) == 5

    def test_byte_identical_rerun(self, tmp_path):
        cfg = SceneConfig(n_points=400, object_count=(6, 7), rng_seed=11)
        make_dataset(cfg, 2, 1, OTOC, tmp_path / "a")
        make_dataset(cfg, 2, 1, OTOC, tmp_path / "b")
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "m.tsv").write_text("valid\ta\tb\n")
        with pytest.raises(ValueError, match="m.tsv:1"):
            read_manifest(tmp_path / "m.tsv")
        with pytest.raises(FileNotFoundError):
            read_manifest(tmp_path / "none.tsv")
