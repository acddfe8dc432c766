"""Smoke test for the wait_py extension module.

Builds the module with cargo (unless --lib points at a built library), loads it
under its import name and checks a handful of results against numpy.

    python3 python/smoke_test.py [--lib target/release/libwait_py.so] [--checkpoint run/checkpoints/latest.ckpt]
"""

import argparse
import importlib.util
import os
import shutil
import subprocess
import sys
import tempfile

import numpy as np

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build():
    subprocess.run(
        ["cargo", "build", "-p", "wait-py", "--features", "extension-module", "--release"],
        cwd=ROOT,
        check=True,
    )
    name = {"darwin": "libwait_py.dylib", "win32": "wait_py.dll"}.get(sys.platform, "libwait_py.so")
    return os.path.join(ROOT, "target", "release", name)


def load(lib, tmp):
    ext = ".pyd" if sys.platform == "win32" else ".so"
    dst = os.path.join(tmp, "wait_py" + ext)
    shutil.copy(lib, dst)
    spec = importlib.util.spec_from_file_location("wait_py", dst)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def conv3x3(x, w, b):
    # zero-padded "same" convolution, NCHW
    n, c, h, wd = x.shape
    p = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], h, wd))
    for i in range(3):
        for j in range(3):
            out += np.einsum("nchw,oc->nohw", p[:, :, i:i + h, j:j + wd], w[:, :, i, j])
    return out + b[None, :, None, None]


def check(name, ok, detail=""):
    print(f"{'ok  ' if ok else 'FAIL'} {name} {detail}")
    return ok


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lib")
    ap.add_argument("--checkpoint")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    results = []
    with tempfile.TemporaryDirectory() as tmp:
        w = load(args.lib or build(), tmp)
        print("wait_py", w.__version__)

        x = rng.uniform(-1, 1, (2, 3, 6, 7))
        wt = rng.uniform(-1, 1, (4, 3, 3, 3))
        b = rng.uniform(-1, 1, 4)
        got = w.deformable_conv(x, np.zeros((2, 18, 6, 7)), wt, b)
        err = np.abs(got - conv3x3(x, wt, b)).max()
        results.append(check("deformable conv, zero offsets", err < 1e-12, f"{err:.1e}"))

        img = rng.uniform(-1, 1, (1, 2, 5, 5))
        flow = np.zeros((1, 2, 5, 5))
        flow[:, 0] = 1.0
        want = np.zeros_like(img)
        want[..., :-1] = img[..., 1:]
        results.append(check("integer flow warp", np.array_equal(w.flow_warp(img, flow), want)))

        still = np.zeros((5, 7, 2), np.float32)
        results.append(check("still scene mask", int(w.occlusion_mask(still, still).sum()) == 35))

        f = rng.normal(size=(4, 6, 2)).astype(np.float32)
        path = os.path.join(tmp, "a__b.flo")
        w.write_flo(path, f)
        results.append(check(".flo round trip", np.array_equal(w.read_flo(path), f)))

        xs = np.array([0.0, 2.0]).reshape(2, 1, 1, 1)
        ys = np.array([0.0, 1.0]).reshape(2, 1, 1, 1)
        results.append(check("temporal mse", w.temporal_mse(xs, ys) == 1.0))

        frames = rng.uniform(0, 1, (3, 3, 4, 4))
        zf = np.zeros((2, 4, 4, 2), np.float32)
        ones = np.ones((2, 4, 4), np.uint8)
        want = np.mean([np.mean((frames[t] - frames[t - 1]) ** 2) for t in (1, 2)])
        got = w.flow_warping_error(frames, zf, ones)
        results.append(check("flow warping error", abs(got - want) < 1e-12, f"{got:.6f}"))

        feats = rng.normal(size=(200, 5))
        a = w.FeatureStats.from_features(feats)
        results.append(check("stats mean", np.allclose(a.mean, feats.mean(0))))
        results.append(check("stats cov", np.allclose(a.covariance, np.cov(feats, rowvar=False))))
        shifted = w.FeatureStats(a.mean + 0.5, a.covariance, a.sample_count)
        d = w.fid(a, shifted)
        results.append(check("fid mean shift", abs(d - 5 * 0.25) < 1e-8, f"{d:.10f}"))

        try:
            w.flow_warp(img, np.zeros((1, 2, 4, 5)))
            results.append(check("shape error raised", False))
        except w.DataError as e:
            results.append(check("shape error raised", True, str(e)[:40]))

        try:
            w.normalize_config('variant = "wiat"\n')
            results.append(check("bad variant rejected", False))
        except w.ConfigError:
            results.append(check("bad variant rejected", True))
        text = w.normalize_config('variant = "wait"\nseed = 3\n')
        results.append(check("config round trip", w.normalize_config(text) == text))

        if args.checkpoint:
            m = w.Model.load(args.checkpoint)
            s = m.image_size
            frame = rng.uniform(-1, 1, (1, 3, s, s))
            out = m.translate(frame)
            same = m.translate(frame)
            results.append(check(f"{m.variant} translate", out.shape == (1, 3, s, s) and np.array_equal(out, same)))

    print(f"{sum(results)}/{len(results)} checks passed")
    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())
