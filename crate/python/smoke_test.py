"""Quick end-to-end check of the Python bindings."""

import math

import dlpm_py as d


def main():
    p = d.StableParams(1.7)
    xs = p.sample(2000, seed=1)
    assert len(xs) == 2000 and all(math.isfinite(x) for x in xs)
    cf = p.characteristic_function(1.0)
    assert abs(cf - math.exp(-1.0)) < 1e-12

    a = d.sample_positive_stable(1.7, 1000, 2)
    assert min(a) > 0

    s = d.NoiseSchedule.cosine(100, 1.7)
    g, sc = s.gamma_cum, s.sigma_cum
    assert len(g) == 101
    assert max(abs(g[t] ** 1.7 + sc[t] ** 1.7 - 1) for t in range(101)) < 1e-10
    yt, eps = s.marginal_sample([0.5, -0.5], 50, 3)
    assert len(yt) == len(eps) == 2

    data = [[0.5, -0.5]] * 64
    model, losses = d.train(data, s, steps=200, batch_size=64, seed=4)
    assert losses[-1] < losses[0]
    out = d.sample(model, s, 200, method="dlim", steps=25, seed=5)
    assert len(out) == 200 and len(out[0]) == 2

    real = d.stable2d(500, 6)
    gen = d.stable2d(500, 7)
    assert d.msle(real, real) == 0.0
    pr = d.precision_recall(real, gen)
    assert 0.0 <= pr[0] <= 1.0 and 0.0 <= pr[1] <= 1.0
    assert abs(d.f1_pr(0.9, 0.7) - 0.7875) < 1e-12
    pts, labels = d.gaussian_grid(100, 8)
    assert len(pts) == len(labels) == 100

    print("python smoke test passed")


if __name__ == "__main__":
    main()
