"""Smoke test for the `lbf` extension module.

Build and install first, e.g. `maturin develop -m crates/python/Cargo.toml`
or `pip install crates/python`.
"""

import math
import os
import tempfile

import lbf


def main():
    clean = lbf.synthetic_shape("plane", 5000, 1)
    assert len(clean) == 5000
    assert clean.normals() is not None

    diag = clean.bbox_diagonal()
    noisy = lbf.add_gaussian_noise(clean, 0.01, 2)
    assert noisy.normals() is None

    radius = 0.05 * diag
    out, skipped = lbf.denoise_classical(noisy, radius, 0.5 * radius, 0.01 * diag)
    before = lbf.mse(noisy, clean, 1)
    after = lbf.mse(out, clean, 1)
    print(f"mse before={before:.4e} after={after:.4e} skipped={len(skipped)}")
    assert after < 0.8 * before

    # a constant model reproduces the classical filter on the same patches
    model = lbf.Model.constant(0.5, 0.2, [0.03, 0.04, 0.05], 400)
    learned, params = lbf.denoise_learned(noisy, model)
    assert all(p is None or (abs(p[0] - 0.5) < 1e-12 and abs(p[1] - 0.2) < 1e-12) for p in params)
    assert lbf.chamfer_distance(learned, clean) < lbf.chamfer_distance(noisy, clean)

    d = lbf.bilateral_displacement([0, 0, 0], [[0.1, 0, 0.2], [-0.1, 0, 0.2]], [0, 0, 1], 1.0, 1.0)
    assert math.isclose(d, 0.2, rel_tol=1e-12)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "c.xyz")
        lbf.write_xyz(clean, path)
        back = lbf.read_xyz(path)
        assert lbf.chamfer_distance(back, clean) < 1e-12

        shapes = [lbf.synthetic_shape("sphere", 1500, 3)]
        config = "\n".join([
            "noise_levels=0.01",
            "radius_fractions=0.1,0.15",
            "patch_size=32",
            "encoder_widths=8,16",
            "head_widths=8",
            "fusion_widths=4",
            "epochs=2",
            "patches_per_shape=100",
        ])
        trained, losses = lbf.train(shapes, config, os.path.join(tmp, "m.lbf"))
        assert len(losses) == 2 and all(math.isfinite(l) for l in losses)
        reloaded = lbf.Model.load(os.path.join(tmp, "m.lbf"))
        assert reloaded.radius_fractions == [0.1, 0.15]

    try:
        lbf.denoise_classical(noisy, radius, 0.0, 1.0)
    except ValueError as e:
        print(f"rejected as expected: {e}")
    else:
        raise AssertionError("zero bandwidth accepted")

    print("ok")


if __name__ == "__main__":
    main()
