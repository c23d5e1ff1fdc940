"""Kalman filtering, cost matrices, assignment and track lifecycle."""
import itertools

import numpy as np
import pytest

from attmot import metrics
from attmot.assoc import (
    AssocConfig,
    KalmanState,
    Tracker,
    build_cost_matrix,
    gating_distance,
    kalman_init,
    kalman_predict,
    kalman_update,
    outputs_to_entries,
    run_bundle,
    run_sequence,
    solve_assignment,
)
from attmot.core import BBox, Detection, attribute_distance, cosine_distance
from attmot.synthgen import WorldConfig, simulate_sequence


def det(frame, box, emb=None, attr=None, conf=1.0):
    return Detection(frame=frame, box=box, confidence=conf,
                     embedding=emb, attr_obs=attr)


class TestKalmanInit:
    def test_mean_layout(self):
        s = kalman_init(BBox(100, 100, 50, 100))
        np.testing.assert_allclose(s.mean, [125, 150, 0.5, 100, 0, 0, 0, 0])

    def test_diagonal_positive_covariance(self):
        s = kalman_init(BBox(0, 0, 10, 20))
        assert np.array_equal(s.covariance, np.diag(np.diag(s.covariance)))
        assert np.all(np.diag(s.covariance) > 0)

    def test_deterministic(self):
        a = kalman_init(BBox(5, 6, 7, 8))
        b = kalman_init(BBox(5, 6, 7, 8))
        assert np.array_equal(a.mean, b.mean)
        assert np.array_equal(a.covariance, b.covariance)


class TestKalmanPredict:
    def test_zero_velocity_keeps_position(self):
        s = kalman_init(BBox(100, 100, 50, 100))
        s2 = kalman_predict(s)
        np.testing.assert_allclose(s2.mean[:4], s.mean[:4])
        assert np.trace(s2.covariance) > np.trace(s.covariance)

    def test_velocity_advances_position(self):
        s = kalman_init(BBox(100, 100, 50, 100))
        mean = s.mean.copy()
        mean[4] = 1.0  # cx velocity
        s = KalmanState(mean=mean, covariance=s.covariance)
        for step in range(1, 4):
            s = kalman_predict(s)
            assert s.mean[0] == pytest.approx(125 + step)

    def test_trace_monotone_over_ten_predicts(self):
        s = kalman_init(BBox(0, 0, 40, 80))
        traces = [np.trace(s.covariance)]
        for _ in range(10):
            s = kalman_predict(s)
            traces.append(np.trace(s.covariance))
        assert all(b > a for a, b in zip(traces, traces[1:]))


class TestKalmanUpdate:
    def test_zero_innovation_keeps_mean(self):
        s = kalman_predict(kalman_init(BBox(100, 100, 50, 100)))
        s2 = kalman_update(s, s.box())
        np.testing.assert_allclose(s2.mean[:4], s.mean[:4], atol=1e-9)

    def test_trace_never_increases(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = kalman_init(BBox(rng.uniform(0, 500), rng.uniform(0, 300),
                                 rng.uniform(20, 80), rng.uniform(40, 160)))
            for _ in range(int(rng.integers(1, 4))):
                s = kalman_predict(s)
            before = np.trace(s.covariance)
            box = BBox(s.mean[0] + rng.normal(0, 5), s.mean[1] + rng.normal(0, 5),
                       max(5.0, s.mean[2] * s.mean[3]), max(5.0, s.mean[3]))
            s = kalman_update(s, box)
            assert np.trace(s.covariance) <= before + 1e-9

    def test_scalar_closed_form(self):
        # At init the covariance is diagonal, so the correction decouples
        # per coordinate: m' = m + p/(p+r) * y and p' = p*r/(p+r).
        s = kalman_init(BBox(100, 100, 50, 100))
        h = s.mean[3]
        p = s.covariance[0, 0]
        r = (h / 20.0) ** 2
        offset = 7.0
        meas = s.mean[:4].copy()
        meas[0] += offset
        w = meas[2] * meas[3]
        box = BBox(meas[0] - w / 2, meas[1] - meas[3] / 2, w, meas[3])
        s2 = kalman_update(s, box)
        assert s2.mean[0] == pytest.approx(s.mean[0] + p / (p + r) * offset, rel=1e-9)
        assert s2.covariance[0, 0] == pytest.approx(p * r / (p + r), rel=1e-9)

    def test_symmetric_pd_through_interleaving(self):
        rng = np.random.default_rng(1)
        s = kalman_init(BBox(50, 60, 30, 90))
        for _ in range(60):
            if rng.random() < 0.5:
                s = kalman_predict(s)
            else:
                box = BBox(s.mean[0] + rng.normal(0, 4) - 15, s.mean[1] + rng.normal(0, 4) - 45,
                           30 + rng.normal(0, 1), 90 + rng.normal(0, 2))
                s = kalman_update(s, box)
            assert np.abs(s.covariance - s.covariance.T).max() < 1e-9
            np.linalg.cholesky(s.covariance)  # raises if not PD


class TestGating:
    def test_zero_at_predicted_mean(self):
        s = kalman_predict(kalman_init(BBox(10, 10, 30, 60)))
        assert gating_distance(s, s.box()) == pytest.approx(0.0, abs=1e-9)

    def test_monotone_along_axis(self):
        s = kalman_predict(kalman_init(BBox(10, 10, 30, 60)))
        base = s.box()
        dists = [gating_distance(s, BBox(base.left + dx, base.top, base.width, base.height))
                 for dx in (0, 5, 10, 20)]
        assert dists == sorted(dists)

    def test_identity_innovation_hand_value(self):
        # covariance chosen so S = P[:4,:4] + R = I; offsetting the
        # measurement by (3, 0, 0, 0) must give squared distance 9
        h = 2.0
        mean = np.array([50.0, 50.0, 0.5, h, 0, 0, 0, 0])
        r_std = np.array([h / 20, h / 20, 1e-1, h / 20])
        P = np.zeros((8, 8))
        P[:4, :4] = np.eye(4) - np.diag(r_std * r_std)
        P[4:, 4:] = np.eye(4)
        s = KalmanState(mean=mean, covariance=P)
        meas = mean[:4].copy()
        meas[0] += 3.0
        w = meas[2] * meas[3]
        box = BBox(meas[0] - w / 2, meas[1] - meas[3] / 2, w, meas[3])
        assert gating_distance(s, box) == pytest.approx(9.0, rel=1e-9)


class TestSolveAssignment:
    def test_single_cell(self):
        matches, ur, uc = solve_assignment(np.array([[0.0]]))
        assert matches == [(0, 0)] and ur == [] and uc == []

    def test_two_by_two(self):
        matches, _, _ = solve_assignment(np.array([[1.0, 2.0], [3.0, 1.0]]))
        assert sorted(matches) == [(0, 0), (1, 1)]

    def test_threshold_cut(self):
        cost = np.array([[5.0, 6.0], [7.0, 5.0]])
        matches, ur, uc = solve_assignment(cost, threshold=4.0)
        assert matches == [] and ur == [0, 1] and uc == [0, 1]

    def test_empty(self):
        matches, ur, uc = solve_assignment(np.zeros((0, 3)))
        assert matches == [] and ur == [] and uc == [0, 1, 2]

    def test_infeasible_mask(self):
        cost = np.array([[0.1, 0.2], [0.1, 0.2]])
        mask = np.array([[True, False], [False, True]])
        matches, _, _ = solve_assignment(cost, mask)
        assert sorted(matches) == [(0, 1), (1, 0)]

    def test_optimal_vs_brute_force(self):
        rng = np.random.default_rng(2)
        for n in range(1, 6):
            for _ in range(40):
                cost = rng.uniform(0, 10, (n, n))
                matches, _, _ = solve_assignment(cost)
                total = sum(cost[r, c] for r, c in matches)
                brute = min(sum(cost[i, p[i]] for i in range(n))
                            for p in itertools.permutations(range(n)))
                assert total == pytest.approx(brute, abs=1e-9)

    def test_rectangular(self):
        cost = np.array([[1.0, 9.0, 9.0], [9.0, 9.0, 2.0]])
        matches, ur, uc = solve_assignment(cost)
        assert sorted(matches) == [(0, 0), (1, 2)]
        assert ur == [] and uc == [1]


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


class TestBuildCostMatrix:
    def _tracks_and_dets(self):
        e1, e2 = _unit([1, 0, 0, 0]), _unit([0, 1, 0, 0])
        a1 = np.zeros(32); a1[:4] = 1.0
        a2 = np.zeros(32); a2[4:8] = 1.0
        cfg = AssocConfig(mode="embed+attr")
        tracker = Tracker(cfg)
        tracker.step(1, [det(1, BBox(0, 0, 10, 20), e1, a1),
                         det(1, BBox(200, 0, 10, 20), e2, a2)])
        dets = [det(2, BBox(1, 0, 10, 20), _unit([1, 0.1, 0, 0]), a1),
                det(2, BBox(201, 0, 10, 20), _unit([0.1, 1, 0, 0]), a2)]
        return tracker.tracks, dets, cfg

    def test_additivity_and_degenerate_weights(self):
        tracks, dets, _ = self._tracks_and_dets()
        embed, _ = build_cost_matrix(tracks, dets, AssocConfig(mode="embed"))
        attr, _ = build_cost_matrix(tracks, dets, AssocConfig(mode="attr"))
        both, _ = build_cost_matrix(tracks, dets, AssocConfig(mode="embed+attr"))
        np.testing.assert_array_equal(both, embed + attr)
        lam, _ = build_cost_matrix(tracks, dets,
                                   AssocConfig(mode="embed+attr", lambda_e=2.0, lambda_a=0.5))
        np.testing.assert_allclose(lam, 2.0 * embed + 0.5 * attr)
        only_e, _ = build_cost_matrix(tracks, dets,
                                      AssocConfig(mode="embed+attr", lambda_a=0.0))
        np.testing.assert_array_equal(only_e, embed)

    def test_hand_case(self):
        tracks, dets, _ = self._tracks_and_dets()
        cost, infeasible = build_cost_matrix(tracks, dets, AssocConfig(mode="embed+attr"))
        expected = np.zeros((2, 2))
        for i, trk in enumerate(tracks):
            for j, d in enumerate(dets):
                e_cost = min(cosine_distance(g, d.embedding) for g in trk.gallery)
                a_cost = attribute_distance(trk.attr_estimate, d.attr_obs)
                expected[i, j] = e_cost + a_cost
        np.testing.assert_allclose(cost, expected, atol=1e-9)
        # far-apart pairs fail the Mahalanobis gate
        assert infeasible[0, 1] and infeasible[1, 0]
        assert not infeasible[0, 0] and not infeasible[1, 1]

    def test_iou_mode(self):
        tracks, dets, _ = self._tracks_and_dets()
        cost, _ = build_cost_matrix(tracks, dets, AssocConfig(mode="iou"))
        from attmot.core import iou
        for i, trk in enumerate(tracks):
            for j, d in enumerate(dets):
                assert cost[i, j] == pytest.approx(1.0 - iou(trk.state.box(), d.box))

    def test_concat_mode_matches_direct(self):
        tracks, dets, _ = self._tracks_and_dets()
        cost, _ = build_cost_matrix(tracks, dets, AssocConfig(mode="concat"))
        from attmot.fusion import fuse_for_association
        for i, trk in enumerate(tracks):
            for j, d in enumerate(dets):
                expected = min(
                    cosine_distance(fuse_for_association(g, trk.attr_estimate),
                                    fuse_for_association(d.embedding, d.attr_obs))
                    for g in trk.gallery)
                assert cost[i, j] == pytest.approx(expected, abs=1e-9)

    def test_fusion_source_requires_params(self):
        tracks, dets, _ = self._tracks_and_dets()
        with pytest.raises(ValueError, match="fusion_params"):
            build_cost_matrix(tracks, dets,
                              AssocConfig(mode="attr", attr_source="fusion"))

    def test_missing_embedding_rejected(self):
        tracks, _, _ = self._tracks_and_dets()
        bare = [det(2, BBox(0, 0, 10, 20))]
        with pytest.raises(ValueError, match="no embedding"):
            build_cost_matrix(tracks, bare, AssocConfig(mode="embed"))

    def test_empty_inputs(self):
        cost, mask = build_cost_matrix([], [], AssocConfig(mode="embed"))
        assert cost.shape == (0, 0) and mask.shape == (0, 0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AssocConfig(mode="bogus")
        with pytest.raises(ValueError):
            AssocConfig(mode="embed+attr", lambda_e=0.0, lambda_a=0.0)
        with pytest.raises(ValueError):
            AssocConfig(attr_ema=1.0)

    def test_minmax_normalization_flag(self):
        tracks, dets, _ = self._tracks_and_dets()
        cost, _ = build_cost_matrix(tracks, dets,
                                    AssocConfig(mode="embed+attr", normalize_costs=True))
        embed, _ = build_cost_matrix(tracks, dets, AssocConfig(mode="embed"))
        attr, _ = build_cost_matrix(tracks, dets, AssocConfig(mode="attr"))

        def minmax(m):
            return (m - m.min()) / (m.max() - m.min())

        np.testing.assert_allclose(cost, minmax(embed) + minmax(attr), atol=1e-12)

    def test_attr_binarize_flag(self):
        # fuzzy observations are thresholded at 0.5 before the distance
        soft = np.clip(np.concatenate([np.full(16, 0.8), np.full(16, 0.2)]), 0, 1)
        hard = (soft >= 0.5).astype(float)
        d = det(2, BBox(0, 0, 10, 20), _unit([1, 0, 0, 0]), soft)
        cfg_soft = AssocConfig(mode="attr")
        cfg_hard = AssocConfig(mode="attr", attr_binarize=True)
        from attmot.assoc import detection_attr_vector
        np.testing.assert_array_equal(detection_attr_vector(d, cfg_soft), soft)
        np.testing.assert_array_equal(detection_attr_vector(d, cfg_hard), hard)

    def test_tracker_step_wrapper(self):
        from attmot.assoc import tracker_step
        tracker = Tracker(AssocConfig(mode="iou", n_init=1))
        out = tracker_step(tracker, 1, [det(1, BBox(0, 0, 20, 40))])
        assert len(out) == 1 and out[0].frame == 1


class TestTrackerLifecycle:
    def test_single_detection_confirms_with_stable_id(self):
        cfg = AssocConfig(mode="iou", n_init=3)
        tracker = Tracker(cfg)
        outputs = []
        for f in range(1, 6):
            outputs += tracker.step(f, [det(f, BBox(10 + f, 10, 20, 40))])
        confirmed = [t for t in tracker.tracks if t.status == "confirmed"]
        assert len(confirmed) == 1
        ids = {o.identity for o in outputs}
        assert ids == {confirmed[0].identity}
        # confirmation backfills the tentative frames
        assert sorted(o.frame for o in outputs) == [1, 2, 3, 4, 5]

    def test_empty_frame_ages_tracks(self):
        cfg = AssocConfig(mode="iou", n_init=1)
        tracker = Tracker(cfg)
        tracker.step(1, [det(1, BBox(0, 0, 20, 40))])
        out = tracker.step(2, [])
        assert out == []  # coasting not emitted by default
        assert tracker.tracks[0].time_since_update == 1

    def test_emit_coasting_flag(self):
        cfg = AssocConfig(mode="iou", n_init=1, emit_coasting=True)
        tracker = Tracker(cfg)
        tracker.step(1, [det(1, BBox(0, 0, 20, 40))])
        out = tracker.step(2, [])
        assert len(out) == 1 and out[0].frame == 2

    def test_lost_after_max_age(self):
        cfg = AssocConfig(mode="iou", n_init=1, max_age=3)
        tracker = Tracker(cfg)
        tracker.step(1, [det(1, BBox(0, 0, 20, 40))])
        for f in range(2, 7):
            tracker.step(f, [])
        assert tracker.tracks == []

    def test_tentative_dies_on_miss(self):
        cfg = AssocConfig(mode="iou", n_init=3)
        tracker = Tracker(cfg)
        tracker.step(1, [det(1, BBox(0, 0, 20, 40))])
        tracker.step(2, [])
        assert tracker.tracks == []

    def test_identities_never_reused(self):
        cfg = AssocConfig(mode="iou", n_init=1, max_age=1)
        tracker = Tracker(cfg)
        first = tracker.step(1, [det(1, BBox(0, 0, 20, 40))])
        assert [o.identity for o in first] == [1]
        tracker.step(2, [])
        tracker.step(3, [])  # exceeds max_age: the track is dropped
        assert tracker.tracks == []
        again = tracker.step(4, [det(4, BBox(0, 0, 20, 40))])
        # the re-appearing target gets a fresh identity, never a recycled one
        assert [o.identity for o in again] == [2]

    def test_unique_ids_per_frame(self):
        cfg = AssocConfig(mode="iou", n_init=1)
        tracker = Tracker(cfg)
        for f in range(1, 5):
            outs = tracker.step(f, [det(f, BBox(0, 0, 20, 40)),
                                    det(f, BBox(300, 0, 20, 40))])
            ids = [o.identity for o in outs if o.frame == f]
            assert len(ids) == len(set(ids))

    def test_crossing_with_attributes_keeps_identities(self):
        # two noiseless targets with distinct attributes cross paths over
        # 10 frames; attr mode must hold both identities through it
        a_attr = np.zeros(32); a_attr[:8] = 1.0
        b_attr = np.zeros(32); b_attr[8:16] = 1.0
        cfg = AssocConfig(mode="attr", n_init=1)
        tracker = Tracker(cfg)
        # 100px-tall boxes at 12px/frame keep the motion inside the gate
        speed, y, w, h = 12.0, 100.0, 40.0, 100.0
        first = tracker.step(1, [det(1, BBox(0, y, w, h), attr=a_attr),
                                 det(1, BBox(240, y, w, h), attr=b_attr)])
        id_a = next(o.identity for o in first if o.box.left == 0)
        id_b = next(o.identity for o in first if o.box.left == 240)
        pairs = []
        for f in range(2, 22):
            ax = speed * (f - 1)
            bx = 240.0 - speed * (f - 1)
            outs = tracker.step(f, [det(f, BBox(ax, y, w, h), attr=a_attr),
                                    det(f, BBox(bx, y, w, h), attr=b_attr)])
            assert len(outs) == 2
            assert len(tracker.tracks) == 2  # no spurious births
            if abs(ax - bx) > 2 * speed:     # skip the coincident frames
                out_a = min(outs, key=lambda o: abs(o.box.left - ax))
                out_b = min(outs, key=lambda o: abs(o.box.left - bx))
                pairs.append((out_a.identity, out_b.identity))
        # identities follow the attribute signatures through the crossing
        assert all(pair == (id_a, id_b) for pair in pairs), pairs


class TestRunSequence:
    def test_empty(self):
        assert run_sequence({}, AssocConfig(mode="iou")) == []

    def test_deterministic(self):
        cfg = WorldConfig(n_identities=3, n_frames=20, latent_dim=16, seed=8)
        bundle = simulate_sequence(cfg)
        a = run_bundle(bundle, AssocConfig(mode="embed"))
        b = run_bundle(bundle, AssocConfig(mode="embed"))
        assert a == b

    def test_noiseless_single_pedestrian_perfect_mota(self):
        cfg = WorldConfig(n_identities=1, n_frames=25, latent_dim=16, seed=1,
                          miss_base=0.0, miss_occ_gain=0.0, jitter_sigma=0.0,
                          fp_rate=0.0, embed_noise_sigma=0.0, attr_flip_base=0.0,
                          attr_flip_occ_gain=0.0, w_linear=1.0, w_crossing=0.0,
                          w_loiter=0.0)
        bundle = simulate_sequence(cfg)
        outputs = run_bundle(bundle, AssocConfig(mode="embed"))
        rep = metrics.clear_metrics(bundle.gt_entries(), outputs_to_entries(outputs))
        assert rep.mota == 1.0 and rep.idsw == 0 and rep.fp == 0 and rep.fn == 0
