"""Exercises the Python bindings end to end on a tiny problem."""

import math
import tempfile
from pathlib import Path

import numpy as np

import pyspectraldiff as sd


def main():
    rng = np.random.default_rng(0)

    x = rng.random((12, 10, 3))
    spec = sd.fft2(x)
    assert abs(np.linalg.norm(spec) - np.linalg.norm(x)) < 1e-9 * np.linalg.norm(x)
    assert np.allclose(sd.ifft2(spec).real, x)
    assert np.allclose(spec[..., 0], np.fft.fft2(x[..., 0], norm="ortho"))

    bank = sd.MaskBank(32, 32, grid="toy")
    assert len(bank) == 120
    assert abs((bank.mask(1) ** 2).sum() - 1.0) < 1e-6
    assert len(bank.params(120)) == 4

    ab = sd.cosine_alpha_bars(120)
    assert ab[0] == 1.0 and all(a > b for a, b in zip(ab, ab[1:]))

    assert sd.conv_flops(64, 64, 16, 16, 3) == 18_874_368
    assert sd.product_flops(64, 16, 16, 4) == 1_064_960
    assert abs(sd.reduction_ratio(64) - 18 * 64 / 65) < 1e-12
    assert sd.flops_report().startswith("backbone,")

    a = np.full((4, 4, 3), 0.3)
    assert abs(sd.psnr(a, a + 0.1) - 20.0) < 1e-9
    assert math.isinf(sd.psnr(a, a))
    assert abs(sd.ssim(a, a) - 1.0) < 1e-12

    model = sd.Denoiser(preset="toy", seed=1)
    cond = rng.random((32, 32, 3))
    eps = model.forward(cond, 60, cond)
    assert eps.shape == cond.shape

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        assert sd.make_toy_pairs(str(tmp / "data"), 8, seed=3) == 8
        trained, losses = sd.train(str(tmp / "data"), bank, iterations=20, seed=2)
        assert len(losses) == 20 and all(math.isfinite(v) for v in losses)
        trained.save(str(tmp / "model.ckpt"))
        again = sd.Denoiser.load(str(tmp / "model.ckpt"))
        assert again.config_json == trained.config_json
        out = again.derain(cond, bank, steps=4, seed=7)
        assert out.shape == cond.shape and out.min() >= 0.0 and out.max() <= 1.0
        assert np.array_equal(out, trained.derain(cond, bank, steps=4, seed=7))

    try:
        sd.Denoiser.load("/nonexistent/model.ckpt")
    except OSError:
        pass
    else:
        raise AssertionError("loading a missing checkpoint should fail")

    print("smoke test passed:", model, bank)


if __name__ == "__main__":
    main()
