import numpy as np
import pytest

from promptseg.metrics import (
    EvalReport,
    FrameEval,
    binary_iou,
    challenge_iou,
    evaluate_frames,
    isi_iou,
    mc_iou,
    presence_metrics,
)

from . import oracles


def blk(r0, r1, c0, c1, shape=(8, 8)):
    m = np.zeros(shape, np.uint8)
    m[r0:r1, c0:c1] = 1
    return m


def frame(pred, gt, fid="f"):
    return FrameEval(fid, pred, gt)


def test_binary_iou_examples():
    a = blk(0, 2, 0, 2)
    assert binary_iou(a, a) == 1.0
    assert binary_iou(a, blk(4, 6, 4, 6)) == 0.0
    # 2x2 blocks shifted by one column: |inter| = 2, |union| = 6
    assert binary_iou(blk(0, 2, 0, 2), blk(0, 2, 1, 3)) == pytest.approx(1 / 3)
    assert binary_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    assert binary_iou(a, np.zeros_like(a)) == 0.0
    with pytest.raises(ValueError):
        binary_iou(a, np.zeros((3, 3)))


def test_challenge_examples():
    g = {0: blk(0, 2, 0, 2), 1: np.zeros((8, 8), np.uint8)}
    assert challenge_iou([frame(dict(g), g)]) == 1.0
    assert challenge_iou([frame({0: np.zeros((8, 8)), 1: np.zeros((8, 8))}, g)]) == 0.0
    f1 = frame({0: blk(0, 2, 0, 1)}, {0: blk(0, 2, 0, 2)})  # 0.5
    f2 = frame({0: blk(0, 2, 0, 2)}, {0: blk(0, 2, 0, 2)})  # 1.0
    empty = frame({0: np.zeros((8, 8))}, {0: np.zeros((8, 8))})
    assert challenge_iou([f1, f2, empty]) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        challenge_iou([empty])


def test_isi_examples():
    g = {0: blk(0, 2, 0, 2), 1: np.zeros((8, 8), np.uint8)}
    assert isi_iou([frame(dict(g), g)]) == challenge_iou([frame(dict(g), g)]) == 1.0
    fp = frame({0: blk(0, 2, 0, 2), 1: blk(5, 6, 5, 6)}, g)
    assert isi_iou([fp]) == pytest.approx(0.5)
    empty = frame({0: np.zeros((8, 8))}, {0: np.zeros((8, 8))})
    with pytest.raises(ValueError):
        isi_iou([empty])


def test_mc_examples():
    g = {0: blk(0, 2, 0, 2), 1: blk(4, 5, 4, 5)}
    m, per = mc_iou([frame(dict(g), g)])
    assert m == 1.0 and per == {0: 1.0, 1: 1.0}
    m, per = mc_iou([frame({0: blk(0, 2, 0, 2), 1: np.zeros((8, 8))}, g)])
    assert per[1] == 0.0
    a = frame({0: blk(0, 2, 0, 2)}, {0: blk(0, 2, 1, 3)})  # 2 / 6
    b = frame({0: blk(0, 2, 0, 2)}, {0: blk(0, 2, 0, 2)})  # 4 / 4
    m, per = mc_iou([a, b])
    assert per[0] == pytest.approx(6 / 10)


def test_presence_examples():
    g = {0: blk(0, 2, 0, 2), 1: np.zeros((8, 8), np.uint8)}
    p = presence_metrics([frame(dict(g), g)])
    assert p["fp"] == 0 and p["fpr"] == 0.0
    allpred = {0: blk(0, 1, 0, 1), 1: blk(0, 1, 0, 1)}
    p = presence_metrics([frame(allpred, g)])
    assert p["fpr"] == 1.0


def test_presence_rates_from_counts():
    # TP=3, FP=1, TN=5, FN=1 over single-class frames
    z, o = np.zeros((2, 2), np.uint8), np.ones((2, 2), np.uint8)
    frames = [frame({0: o}, {0: o})] * 3 + [frame({0: o}, {0: z})] + [frame({0: z}, {0: z})] * 5 + [frame({0: z}, {0: o})]
    p = presence_metrics(frames)
    assert (p["tp"], p["fp"], p["tn"], p["fn"]) == (3, 1, 5, 1)
    assert p["fpr"] == pytest.approx(1 / 6)
    assert p["precision"] == p["recall"] == p["f1"] == pytest.approx(0.75)


def test_presence_zero_denominators():
    z = np.zeros((2, 2), np.uint8)
    p = presence_metrics([frame({0: z}, {0: z})])
    assert p["precision"] == p["recall"] == p["f1"] == p["fpr"] == 0.0


def test_presence_existence_mode_and_macro():
    o, z = np.ones((2, 2), np.uint8), np.zeros((2, 2), np.uint8)
    f = FrameEval("f", {0: o, 1: o}, {0: o, 1: z}, pred_exists={0: True, 1: False})
    assert presence_metrics([f], "existence-prob")["fp"] == 0
    assert presence_metrics([f])["fp"] == 1
    with pytest.raises(ValueError):
        presence_metrics([frame({0: o}, {0: o})], "existence-prob")
    macro = presence_metrics([f], macro=True)
    assert macro["precision"] == pytest.approx(0.5)  # class 0: 1.0, class 1: 0.0


def _to_frames(inst):
    return [FrameEval(f"f{i}", pred, gt) for i, (pred, gt) in enumerate(inst)]


def test_metrics_match_bruteforce(rng):
    checked = 0
    for _ in range(300):
        inst = oracles.random_instance(rng)
        frames = _to_frames(inst)
        ref_ch, ref_isi = oracles.challenge(inst), oracles.isi(inst)
        if ref_ch is None:
            with pytest.raises(ValueError):
                challenge_iou(frames)
        else:
            assert challenge_iou(frames) == ref_ch
        if ref_isi is not None:
            assert isi_iou(frames) == ref_isi
        ref_mc, ref_per = oracles.mean_class(inst)
        if ref_mc is not None:
            m, per = mc_iou(frames)
            assert m == ref_mc and per == ref_per
        assert presence_metrics(frames) == oracles.presence(inst)
        checked += 1
    assert checked == 300


def test_metric_invariants(rng):
    for _ in range(100):
        inst = oracles.random_instance(rng)
        frames = _to_frames(inst)
        p = presence_metrics(frames)
        gt_pos = sum(bool(m.any()) for _, gt in inst for m in gt.values())
        n_pairs = sum(len(gt) for _, gt in inst)
        assert p["tp"] + p["fn"] == gt_pos
        assert p["fp"] + p["tn"] == n_pairs - gt_pos
        for k in ("fpr", "precision", "recall", "f1"):
            assert 0.0 <= p[k] <= 1.0
        if oracles.challenge(inst) is None:
            continue
        # Permuting frames and relabeling classes consistently leaves metrics unchanged.
        n = len(inst[0][1])
        perm = rng.permutation(n)
        shuffled = [inst[i] for i in rng.permutation(len(inst))]
        relabeled = [({int(perm[c]): pr[c] for c in pr}, {int(perm[c]): gt[c] for c in gt}) for pr, gt in shuffled]
        f2 = _to_frames(relabeled)
        assert challenge_iou(f2) == pytest.approx(challenge_iou(frames), abs=1e-12)
        assert isi_iou(f2) == pytest.approx(isi_iou(frames), abs=1e-12)
        m1, per1 = mc_iou(frames)
        m2, per2 = mc_iou(f2)
        assert m2 == pytest.approx(m1, abs=1e-12)
        assert {int(perm[c]): v for c, v in per1.items()} == per2


def test_isi_le_challenge_when_predictions_cover_gt(rng):
    for _ in range(200):
        inst = oracles.random_instance(rng)
        covered = []
        for pred, gt in inst:
            pred = {c: (pred[c] | gt[c]) if gt[c].any() else pred[c] for c in gt}
            covered.append((pred, gt))
        frames = _to_frames(covered)
        if oracles.challenge(covered) is None:
            continue
        # Frames without GT but with predictions only enter ISI; restrict to frames with GT.
        with_gt = [f for f in frames if f.gt_present()]
        assert isi_iou(with_gt) <= challenge_iou(with_gt) + 1e-12


def test_report_round_trip():
    g = {0: blk(0, 2, 0, 2), 1: np.zeros((8, 8), np.uint8)}
    rep = evaluate_frames([frame(dict(g), g)], label="x")
    again = EvalReport.from_dict(__import__("json").loads(rep.dumps()))
    assert again == rep
    assert rep.tp + rep.fp + rep.tn + rep.fn == 2
    assert "Ch IoU" in rep.table()
