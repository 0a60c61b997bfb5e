"""Smoke test for the stemdiff_py extension.

Build and install first, e.g. `maturin develop --release` from crates/py.
"""

import math

import stemdiff_py as sd


def main():
    a, b = sd.rates(0.3)
    assert abs(a * a + b * b - 1.0) < 1e-12
    assert sd.rates(1.0) == (0.0, 1.0)

    cond = [[1.0, 2.0], [3.0, -1.0]]
    uncond = [[0.5, 0.0], [1.0, 1.0]]
    assert sd.cfg_combine(cond, uncond, 0.0) == cond
    assert sd.cfg_combine(cond, uncond, 1.0, "standard") == cond
    assert sd.style_ground(cond, [0.0, 0.0], 0.0) == cond
    grounded = sd.style_ground(cond, [5.0, -5.0], 1.0)
    assert sd.time_mean(grounded) == [5.0, -5.0]

    train, test, rule = sd.make_synthetic(n_items=24, n_steps=16, dim=4, seed=1)
    assert len(train) + len(test) == 24
    stem, mix = train[0]
    assert len(stem) == 16 and len(stem[0]) == 4

    den = sd.Denoiser(4, 4, seed=0, channels=[16, 32])
    trainer = sd.DiffusionTrainer(den, lr=1e-3, seed=0)
    losses = []
    for i in range(5):
        batch = train[i * 4:(i + 1) * 4]
        losses.append(trainer.step(den, [s for s, _ in batch], [m for _, m in batch]))
    assert all(math.isfinite(x) for x in losses)
    assert trainer.steps_taken == 5

    x1 = sd.sample(den, mix, steps=4, seed=7)
    x2 = sd.sample(den, mix, steps=4, seed=7)
    assert x1 == x2 and len(x1) == 16 and len(x1[0]) == 4
    r, diag = sd.coherence([rule.apply(m) for _, m in test], [rule.apply(m) for _, m in test])
    assert abs(r - 1.0) < 1e-12 and diag == 1.0

    ae = sd.Autoencoder("desk", "stem", seed=0)
    wave = [0.1 * math.sin(0.05 * n) for n in range(ae.r_time * 4)]
    lat = ae.encode(wave, wave)
    assert len(lat) == 4 and len(lat[0]) == ae.latent_dim
    left, right = ae.decode(lat)
    assert len(left) == len(right) == ae.r_time * 4

    try:
        den.predict([[0.0] * 3] * 16, 0.5)
    except ValueError:
        pass
    else:
        raise AssertionError("shape error not raised")

    print("stemdiff_py smoke test passed:", den.num_params, "denoiser parameters")


if __name__ == "__main__":
    main()
