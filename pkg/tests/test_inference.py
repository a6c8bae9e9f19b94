import numpy as np
import pytest

from nprepmet import embed_net
from nprepmet.embed_net import EmbedConfig, NPEmbedding
from nprepmet.errors import ConfigError
from nprepmet.geometry import iou_matrix
from nprepmet.hard_negatives import SelectionStrategy
from nprepmet.inference import (
    InferenceConfig,
    build_class_support,
    build_support_reps,
    detect_arrays,
    pos_only_detect,
    postprocess,
    score_embeddings,
)
from nprepmet.model import Model
from nprepmet.representatives import RepBank, replace_class_reps
from nprepmet.synth_world import SyntheticScene, gen_episode, gen_prototypes
from oracles import unit_rows

CFG = EmbedConfig(input_dim=8, trunk_dims=(6,), embed_dim=4)
GT = np.array([[0.0, 0.0, 10.0, 10.0]])


def model(seed=0):
    return Model.init(CFG, 3, 2, seed)


def strip_scene(heights, cls=7, seed=0, extra=()):
    """Boxes ``(0, 0, 10, h)`` have IoU ``h / 10`` with the ground truth."""
    boxes = [[0.0, 0.0, 10.0, h] for h in heights] + [list(b) for b in extra]
    rng = np.random.default_rng(seed)
    return SyntheticScene(GT, np.array([cls]), np.array(boxes), rng.standard_normal((len(boxes), 8)),
                          rng.standard_normal((1, 8)))


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"k_negatives": 0},
        {"score_thresh": 1.5},
        {"neg_band": (0.3, 0.2)},
        {"neg_band": (0.2, 0.8)},
        {"fallback_bands": ((0.25, 0.35),)},
        {"fallback_bands": ((0.0, 0.1), (0.1, 0.2))},
        {"strategy": "bogus"},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            InferenceConfig(**kw)

    def test_positive_only_zeroes_beta(self):
        assert InferenceConfig(positive_only=True).prob.beta == 0.0
        assert InferenceConfig().prob.beta == 0.3

    def test_strategy_string(self):
        assert InferenceConfig(strategy="rd").strategy is SelectionStrategy.RD


class TestSupport:
    def test_gt_included_first(self):
        m = model()
        scene = strip_scene([9.0, 2.5])
        s = build_class_support(m, 7, [scene], InferenceConfig(), 0)
        assert s.pos_provenance[0] == (0, -1) and (0, 0) in s.pos_provenance
        assert np.array_equal(s.pos_vectors[0], embed_net.embed(m.net, scene.gt_features[0]).e_pos)
        assert len(s.pos_vectors) == 2

    def test_twelve_candidates_k_five(self):
        scene = strip_scene(np.linspace(2.05, 2.95, 12))
        s = build_class_support(model(), 7, [scene], InferenceConfig(k_negatives=5), 0)
        assert len(s.neg_vectors) == 5 and s.neg_band == (0.2, 0.3)
        assert len({p for p in s.neg_provenance}) == 5

    def test_few_candidates_all_kept(self):
        scene = strip_scene([2.2, 2.6])
        s = build_class_support(model(), 7, [scene], InferenceConfig(k_negatives=5), 0)
        assert sorted(s.neg_provenance) == [(0, 0), (0, 1)]

    @pytest.mark.parametrize("heights, band", [([1.5], (0.1, 0.2)), ([0.5], (0.0, 0.1)), ([9.0], None)])
    def test_band_ladder(self, heights, band):
        s = build_class_support(model(), 7, [strip_scene(heights)], InferenceConfig(), 0)
        assert s.neg_band == band
        assert len(s.neg_vectors) == (0 if band is None else 1)

    def test_ladder_prefers_primary_band(self):
        s = build_class_support(model(), 7, [strip_scene([0.5, 1.5, 2.5])], InferenceConfig(), 0)
        assert s.neg_band == (0.2, 0.3) and s.neg_provenance == [(0, 2)]

    def test_missing_class(self):
        with pytest.raises(ConfigError):
            build_class_support(model(), 3, [strip_scene([9.0])], InferenceConfig(), 0)

    def test_seeded(self):
        scene = strip_scene(np.linspace(2.05, 2.95, 12))
        cfg = InferenceConfig(strategy="rd")
        a = build_class_support(model(), 7, [scene], cfg, 3)
        b = build_class_support(model(), 7, [scene], cfg, 3)
        assert a.neg_provenance == b.neg_provenance


class TestScoring:
    def test_exact_match_scores_one(self):
        v = np.array([0.0, 1.0, 0.0, 0.0])
        bank = RepBank.empty(1, 4)
        replace_class_reps(bank, 0, [v], [])
        p = score_embeddings(NPEmbedding(e_neg=v, e_pos=v), bank, InferenceConfig())
        assert p.tolist() == [1.0]

    def test_scores_in_unit_interval(self):
        rng = np.random.default_rng(0)
        bank = RepBank(unit_rows(rng, 3, 2, 4), unit_rows(rng, 3, 2, 4))
        p = score_embeddings(NPEmbedding(unit_rows(rng, 50, 4), unit_rows(rng, 50, 4)), bank, InferenceConfig())
        assert np.all((p > 0) & (p <= 1))

    def test_no_negatives_np_equals_pos(self):
        m = model(1)
        support = {7: [strip_scene([9.0], seed=1)]}
        reps = build_support_reps(m, support, InferenceConfig())
        assert len(reps.per_class[7].neg_vectors) == 0
        query = strip_scene([9.5, 5.0, 2.5], seed=4)
        cfg = InferenceConfig(score_thresh=0.0)
        np_d = detect_arrays(m, reps, query, cfg)
        pos_d = detect_arrays(m, reps, query, cfg.with_(positive_only=True))
        assert np.array_equal(np_d.boxes, pos_d.boxes)
        assert np.allclose(np_d.scores, pos_d.scores, rtol=0, atol=1e-12)

    def test_pos_only_helper(self):
        m = model(1)
        reps = build_support_reps(m, {7: [strip_scene([9.0, 2.5], seed=1)]}, InferenceConfig())
        q = strip_scene([9.5, 5.0], seed=4)
        a = pos_only_detect(m, reps, q, InferenceConfig())
        b = detect_arrays(m, reps, q, InferenceConfig(positive_only=True)).to_list()
        assert a == b


class TestPostprocess:
    def test_threshold_monotone(self):
        rng = np.random.default_rng(3)
        boxes = np.concatenate([rng.uniform(0, 50, (40, 2))] * 2, axis=1) + np.array([0, 0, 10, 10])
        scores = rng.uniform(size=(40, 3))
        base = InferenceConfig(softnms_iou=1.0, softnms_floor=0.0)
        low = postprocess(boxes, scores, [4, 5, 6], base.with_(score_thresh=0.2))
        high = postprocess(boxes, scores, [4, 5, 6], base.with_(score_thresh=0.6))
        keep = low.scores >= 0.6
        assert np.array_equal(high.scores, low.scores[keep]) and np.array_equal(high.boxes, low.boxes[keep])
        assert np.array_equal(high.classes, low.classes[keep])

    def test_duplicate_suppressed(self):
        boxes = np.array([[0.0, 0.0, 10.0, 10.0]] * 2)
        out = postprocess(boxes, np.array([[0.9], [0.8]]), [2], InferenceConfig())
        assert out.scores.tolist() == [0.9] and out.classes.tolist() == [2]

    def test_same_box_other_class_kept(self):
        boxes = np.array([[0.0, 0.0, 10.0, 10.0]])
        out = postprocess(boxes, np.array([[0.9, 0.8]]), [2, 3], InferenceConfig())
        assert out.classes.tolist() == [2, 3]

    def test_nothing_above_threshold(self):
        out = postprocess(np.array([[0.0, 0.0, 1.0, 1.0]]), np.array([[0.01]]), [0], InferenceConfig())
        assert len(out) == 0 and out.boxes.shape == (0, 4)


class TestEpisodeDetect:
    def test_world_episode(self, tiny_world, tiny_embed):
        p = gen_prototypes(tiny_world)
        ep = gen_episode(tiny_world, p, tiny_world.novel_classes, 3, 1, seed=2)
        m = Model.init(tiny_embed, tiny_world.n_base_classes, 5, 0)
        reps = build_support_reps(m, ep.support, InferenceConfig(), seed=ep.seed)
        assert reps.classes == list(ep.support)
        for q in ep.query:
            d = detect_arrays(m, reps, q, InferenceConfig())
            assert set(d.classes.tolist()) <= set(ep.classes)
            assert np.all((d.scores > 0) & (d.scores <= 1))
            assert np.all(np.diff(d.scores) <= 0)

    def test_nms_prefilter(self):
        m = model()
        reps = build_support_reps(m, {7: [strip_scene([9.0], seed=1)]}, InferenceConfig())
        q = strip_scene([9.9, 9.8, 2.0], seed=2)
        d = detect_arrays(m, reps, q, InferenceConfig(nms_iou=0.5, score_thresh=0.0))
        assert iou_matrix(d.boxes, d.boxes)[~np.eye(len(d), dtype=bool)].max(initial=0.0) <= 0.5
