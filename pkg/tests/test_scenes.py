import json

import numpy as np
import pytest

from obbkit.evaluation import confusion_matrix
from obbkit.geometry import rotated_iou
from obbkit.scenes import SceneConfig, ablation_config, gen_scene_set, nms_ablation

SMALL = dict(num_images=2, background_proposals=50, proposals_per_object=4)


class TestConfig:
    def test_class_names(self):
        cfg = SceneConfig(coarse_classes=["a", "b"], fine_per_coarse=2)
        assert cfg.class_names == ["a-1", "a-2", "b-1", "b-2"]
        assert [cfg.coarse_of(i) for i in range(4)] == [0, 0, 1, 1]

    @pytest.mark.parametrize("kw", [dict(confusion_rate=1.5), dict(score_model="random"),
                                    dict(objects_per_image=(5, 2)), dict(size_range=(0, 10)),
                                    dict(aspect_range=(0.5, 2)), dict(loc_noise=-1), dict(num_images=0),
                                    dict(size_range=(10, 600))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SceneConfig(**kw)

    def test_json_roundtrip(self, tmp_path):
        cfg = SceneConfig(seed=7, loc_noise=2.0)
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg.to_dict()))
        assert SceneConfig.from_json(p) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            SceneConfig.from_dict({"sed": 1})


class TestGeneration:
    def test_deterministic(self):
        a = gen_scene_set(SceneConfig(seed=3, loc_noise=2, **SMALL))
        b = gen_scene_set(SceneConfig(seed=3, loc_noise=2, **SMALL))
        assert a.images == b.images
        c = gen_scene_set(SceneConfig(seed=4, loc_noise=2, **SMALL))
        assert a.images != c.images

    def test_zero_noise_detections_are_gts(self):
        for im in gen_scene_set(SceneConfig(seed=1, **SMALL)).images:
            assert [d.box for d in im.detections] == [g.box for g in im.gts]
            assert [d.label for d in im.detections] == [g.label for g in im.gts]
            assert all(q == 1.0 for q in im.det_quality)

    def test_gts_do_not_overlap(self):
        for im in gen_scene_set(SceneConfig(seed=2, **SMALL)).images:
            for i, a in enumerate(im.gts):
                assert 0 <= a.box.cx <= 1024 and 0 <= a.box.cy <= 1024
                for b in im.gts[i + 1:]:
                    assert rotated_iou(a.box, b.box) < 0.05

    def test_infeasible_packing(self):
        cfg = SceneConfig(image_size=300, size_range=(120, 140), objects_per_image=(30, 30), num_images=1)
        with pytest.raises(ValueError, match="could not place"):
            gen_scene_set(cfg)

    def test_confusion_rate(self):
        cfg = SceneConfig(num_images=250, confusion_rate=0.3, proposals_per_object=0, background_proposals=0,
                          seed=11)
        total = confused = 0
        for im in gen_scene_set(cfg).images:
            for d, g in zip(im.detections, im.gts):
                total += 1
                if d.label != g.label:
                    confused += 1
                    assert cfg.coarse_of(d.label) == cfg.coarse_of(g.label)
        assert total >= 2000
        assert abs(confused / total - 0.3) <= 0.03

    def test_confusion_rate_from_matrix(self):
        cfg = SceneConfig(num_images=250, confusion_rate=0.3, proposals_per_object=0, background_proposals=0,
                          seed=12)
        k = len(cfg.class_names)
        cm = np.zeros((k + 1, k + 1), dtype=int)
        for im in gen_scene_set(cfg).images:
            cm += confusion_matrix(im.detections, im.gts, k, score_thr=0.0)
        matched = cm[:k, :k]
        assert matched.sum() >= 2000
        assert abs(1 - np.trace(matched) / matched.sum() - 0.3) <= 0.03

    def test_false_positives(self):
        im = gen_scene_set(SceneConfig(num_images=1, fp_rate=1.0, seed=5, **{k: v for k, v in SMALL.items()
                                                                               if k != "num_images"})).images[0]
        spurious = [q for q, s in zip(im.det_quality, im.det_source) if s == -1]
        assert len(spurious) == len(im.gts) and all(q == 0.0 for q in spurious)

    def test_score_models(self):
        base = dict(loc_noise=6.0, angle_noise=0.1, seed=9, **SMALL)
        for model, sign in (("correlated", 1), ("anti-correlated", -1)):
            im = gen_scene_set(SceneConfig(score_model=model, **base)).images[0]
            q = im.det_quality
            s = [d.score for d in im.detections]
            n = len(q)
            mq, ms = sum(q) / n, sum(s) / n
            cov = sum((a - mq) * (b - ms) for a, b in zip(q, s))
            assert sign * cov > 0

    def test_proposal_quality(self):
        im = gen_scene_set(SceneConfig(seed=0, **SMALL)).images[0]
        assert len(im.proposals) == 4 * len(im.gts) + 50
        for p, q in zip(im.proposals, im.proposal_quality):
            assert q == pytest.approx(max(rotated_iou(p.box, g.box) for g in im.gts), abs=1e-9)


class TestAblation:
    @pytest.mark.parametrize("seed", [1, 2])
    def test_trend(self, seed):
        table = nms_ablation(ablation_config(seed=seed, num_images=3), budgets=(300, 1000))
        for b in (300, 1000):
            assert table["without_nms"][b]["R75"] > table["with_nms"][b]["R75"]
            assert table["without_nms"][b]["AR"] > table["with_nms"][b]["AR"]

    def test_no_duplicates_no_difference(self):
        cfg = SceneConfig(num_images=2, proposals_per_object=1, background_proposals=0, seed=3)
        table = nms_ablation(cfg, budgets=(300,))
        assert table["with_nms"] == table["without_nms"]
