import numpy as np
import pytest

from tubelets import linking
from tubelets.linking import ScoredTubelet, link_tubelets


def _tubelet(video="v", start=0, n=8, cx=0.5, cy=0.5, score=0.9, n_classes=2,
             class_id=0, slot=0, drift=0.0):
    boxes = np.zeros((n, 4))
    boxes[:, 0] = cx + drift * np.arange(n)
    boxes[:, 1] = cy
    boxes[:, 2] = 0.2
    boxes[:, 3] = 0.2
    probs = np.full((n, n_classes + 1), 0.05)
    probs[:, class_id] = score
    return ScoredTubelet(video, start, boxes, probs, slot=slot)


class TestConfidence:
    def test_mean_of_max_action_prob(self):
        probs = np.array([[0.2, 0.6, 0.9], [0.4, 0.1, 0.9]])
        # background channel (last) ignored
        assert linking.tubelet_confidence(probs) == pytest.approx((0.6 + 0.4) / 2)


class TestLinking:
    def test_static_actor_two_clips_one_tube(self):
        clips = [[_tubelet(start=0)], [_tubelet(start=4)]]
        tubes = link_tubelets(clips, overlap_frames=4)
        assert len(tubes) == 1
        assert tubes[0].first_frame == 0
        assert tubes[0].last_frame == 12
        assert len(tubes[0].tubelets) == 2

    def test_two_parallel_actors_no_switches(self):
        clips = []
        for start in (0, 4, 8):
            clips.append([_tubelet(start=start, cx=0.3, class_id=0, slot=0),
                          _tubelet(start=start, cx=0.7, class_id=1, slot=1)])
        tubes = link_tubelets(clips, overlap_frames=4)
        assert len(tubes) == 2
        for tube in tubes:
            xs = tube.boxes()[:, 0]
            assert np.allclose(xs, xs[0])  # no identity switches
            assert len(tube.tubelets) == 3

    def test_iou_floor_one_blocks_all_links(self):
        clips = [[_tubelet(start=0, drift=0.01)], [_tubelet(start=4, cx=0.55, drift=0.01)]]
        tubes = link_tubelets(clips, overlap_frames=4, link_iou_min=1.0)
        assert len(tubes) == 2

    def test_single_clip_identity_grouping(self):
        clip = [_tubelet(slot=0), _tubelet(cx=0.7, slot=1), _tubelet(cx=0.2, slot=2)]
        tubes = link_tubelets([clip], overlap_frames=4)
        assert len(tubes) == 3
        assert all(len(t.tubelets) == 1 for t in tubes)

    def test_every_tubelet_in_exactly_one_tube(self):
        rng = np.random.default_rng(0)
        clips = []
        all_ids = set()
        for k, start in enumerate((0, 4, 8, 12)):
            clip = []
            for j in range(3):
                tl = _tubelet(start=start, cx=rng.uniform(0.2, 0.8), slot=j)
                clip.append(tl)
                all_ids.add(id(tl))
            clips.append(clip)
        tubes = link_tubelets(clips, overlap_frames=4, link_iou_min=0.3)
        seen = [id(tl) for tube in tubes for tl in tube.tubelets]
        assert len(seen) == len(all_ids)
        assert set(seen) == all_ids

    def test_out_of_order_clips_rejected(self):
        with pytest.raises(ValueError, match="out of order"):
            link_tubelets([[_tubelet(start=4)], [_tubelet(start=0)]], overlap_frames=4)

    def test_causality_prefix_stability(self):
        # decisions after k clips do not change when later clips arrive
        rng = np.random.default_rng(1)
        clips = []
        for start in (0, 4, 8, 12):
            clips.append([_tubelet(start=start, cx=rng.uniform(0.3, 0.7), slot=j)
                          for j in range(2)])
        full = link_tubelets(clips, overlap_frames=4)
        prefix = link_tubelets(clips[:2], overlap_frames=4)
        # the composition of the first two clips' tubelets must agree
        def chains(tubes, upto):
            out = []
            for tube in tubes:
                chain = tuple(id(tl) for tl in tube.tubelets if tl.first_frame < upto)
                if chain:
                    out.append(chain)
            return sorted(out)
        assert chains(full, 8) == chains(prefix, 8)

    def test_overlap_boxes_averaged(self):
        a = _tubelet(start=0, cx=0.5)
        b = _tubelet(start=4, cx=0.6)
        tubes = link_tubelets([[a], [b]], overlap_frames=4, link_iou_min=0.05)
        assert len(tubes) == 1
        boxes = tubes[0].boxes()
        assert np.allclose(boxes[:4, 0], 0.5)
        assert np.allclose(boxes[4:8, 0], 0.55)  # averaged on the overlap
        assert np.allclose(boxes[8:, 0], 0.6)

    def test_tube_score_mean_of_confidences(self):
        a = _tubelet(start=0, score=0.8)
        b = _tubelet(start=4, score=0.6)
        tubes = link_tubelets([[a], [b]], overlap_frames=4, link_iou_min=0.05)
        assert tubes[0].score == pytest.approx((a.confidence + b.confidence) / 2)

    def test_unextended_tube_terminates(self):
        # the actor disappears for one clip and returns: the return starts
        # a fresh tube rather than resurrecting the dead one
        c0 = [_tubelet(start=0, cx=0.3)]
        c1 = [_tubelet(start=4, cx=0.9)]
        c2 = [_tubelet(start=8, cx=0.3)]
        tubes = link_tubelets([c0, c1, c2], overlap_frames=4, link_iou_min=0.3)
        assert len(tubes) == 3


class TestPredictionFiles:
    def test_roundtrip(self, tmp_path):
        tl = _tubelet()
        path = tmp_path / "pred.jsonl"
        linking.save_predictions([linking.record_from_tubelet(tl)], path)
        back = linking.load_predictions(path)
        assert len(back) == 1
        rec = back[0]
        assert set(rec) == {"video_id", "frame_range", "boxes", "class_probs",
                            "confidence"}
        tl2 = linking.tubelet_from_record(rec)
        assert np.array_equal(tl2.boxes, tl.boxes)
        assert np.array_equal(tl2.class_probs, tl.class_probs)
        assert tl2.confidence == tl.confidence
        assert rec["frame_range"] == [0, 8]

    def test_tube_record(self, tmp_path):
        a = _tubelet(start=0)
        b = _tubelet(start=4)
        tubes = link_tubelets([[a], [b]], overlap_frames=4, link_iou_min=0.05)
        rec = linking.record_from_tube(tubes[0])
        assert rec["frame_range"] == [0, 12]
        assert len(rec["boxes"]) == 12
