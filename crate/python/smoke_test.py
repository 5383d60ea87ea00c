"""Imports the extension and exercises each exported op once."""

import math

import colocam


def main():
    a = colocam.BBox(0, 0, 10, 10)
    assert abs(colocam.iou(a, colocam.BBox(5, 0, 15, 10)) - 50 / 150) < 1e-12
    assert colocam.corloc([a, a], [a, colocam.BBox(0, 0, 20, 10)]) == 0.5

    level_values = [0.0] * 8 + [0.25] * 4 + [0.75] * 2 + [1.0] * 2
    threshold, level, degenerate = colocam.otsu(level_values)
    assert (threshold, level, degenerate) == (0.5, 64, False)

    pts = [[0.1 * i, 0.05 * i] for i in range(50)]
    vals = [math.sin(i) for i in range(50)]
    fast = colocam.GaussianFilter(pts).filter(vals)
    exact = colocam.brute_force_filter(pts, vals)
    assert max(abs(f - e) for f, e in zip(fast, exact)) < 0.05 * max(map(abs, exact))

    video = colocam.generate(frames=6, height=24, width=24, seed=3)
    h, w = video.shape
    frames = [video.frame(t) for t in range(len(video))]
    cams = [colocam.CamPair.from_foreground(h, w, s) for s in video.seeds()]
    crf = colocam.crf_frame_loss(cams[0], frames[0], exact=True)
    assert crf.value >= 0 and len(crf.grad) == h * w
    co = colocam.coloc_loss(frames[:3], cams[:3], exact=True)
    co_v = colocam.coloc_loss(frames[:3], cams[:3], exact=True, vertical=True)
    assert abs(co.value - co_v.value) <= 1e-9 * abs(co.value)
    pce = colocam.partial_cross_entropy([(0, 0), (5, 1)], cams[0])
    assert pce.value > 0
    size = colocam.size_barrier_loss(cams[0], 2.0)
    assert math.isfinite(size.value)

    assert colocam.z_schedule(0) == 1.0 and colocam.z_schedule(1000) == 10.0
    maps, log = colocam.train(video, n_frames=2, epochs=2)
    assert len(maps) == len(video)
    rows = log.strip().splitlines()
    assert rows[0].startswith("step,epoch,z")
    assert all(abs(float(r.split(",")[7])) == 1.0 for r in rows[1:])
    box = colocam.extract_bbox(maps[0], h, w)
    print("smoke ok:", box, "log rows", len(rows) - 1)


if __name__ == "__main__":
    main()
