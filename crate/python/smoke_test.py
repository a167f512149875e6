"""Smoke test for the crocnet_py extension module.

Build and install first, e.g. `maturin build --release -m crates/py/Cargo.toml`
followed by `pip install` of the produced wheel.
"""

import json
import sys
import tempfile

import crocnet_py as cn


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    image, labels, h, w, phase = cn.synth_case(0, 3)
    check(len(image) == h * w == len(labels), "synth_case shapes")
    check(set(labels) == {0, 1, 2, 3}, "synth_case has all classes")
    check(phase in ("ED", "ES"), "synth_case phase tag")

    mask = [False] * 64
    for i in (0, 1, 8, 30, 31, 63):
        mask[i] = True
    comp, sizes = cn.connected_components(mask, 8, 8, 4)
    check(sizes == [3, 2, 1], "connected_components sizes")
    check(comp[0] == comp[1] == comp[8] == 1, "connected_components labels")

    check(cn.expand_clamp((20, 29, 20, 29), 128, 128) == (1, 48, 1, 48), "expand_clamp example")

    bg = [1.0] * (64 * 64)
    for r in range(20, 30):
        for c in range(25, 35):
            bg[r * 64 + c] = 0.0
    bbox, fallback = cn.detect_heart(bg, 64, 64)
    check(not fallback and bbox[0] <= 20 and bbox[1] >= 29, "detect_heart encloses region")
    _, fallback = cn.detect_heart([1.0] * (64 * 64), 64, 64)
    check(fallback, "detect_heart falls back on empty prediction")

    a = [True, True, False, False]
    check(abs(cn.dice_score(a, [True, False, True, False]) - 0.5) < 1e-12, "dice_score")
    single = lambda i: [j == i for j in range(25)]
    check(abs(cn.hausdorff(single(0), single(24), 5, 5) - 32 ** 0.5) < 1e-12, "hausdorff")

    check(cn.param_count(1) > cn.param_count(2), "param_count ordering")
    try:
        cn.param_count(1, [8, 16, 32, 64, 100])
        check(False, "non-doubling widths rejected")
    except ValueError:
        check(True, "non-doubling widths rejected")

    passed, err = cn.gradcheck("sigmoid")
    check(passed and err < 1e-5, "gradcheck sigmoid")

    with tempfile.TemporaryDirectory() as tmp:
        index = cn.synth_generate(f"{tmp}/data", 2, seed=1)
        cfg = {
            "stage": 1,
            "epochs": 2,
            "lr": 1e-3,
            "lr_drops": [],
            "val_fraction": 0.0,
            "augment": None,
            "stage_channels": [2, 4, 8, 16, 32],
        }
        best = cn.train(json.dumps(cfg), index, f"{tmp}/s1")
        check(0.0 <= best <= 1.0, "train stage 1")
        model = cn.Stage1(f"{tmp}/s1/final.ckpt")
        image, _, h, w, _ = cn.synth_case(1, 0)
        probs = model.predict(image, h, w)
        check(len(probs) == model.channels * h * w, "Stage1.predict shape")
        check(all(0.0 < p < 1.0 for p in probs), "Stage1.predict in (0, 1)")
        check(len(model.labels(image, h, w)) == h * w, "Stage1.labels shape")

        cfg.update(stage=2, stage1_checkpoint=f"{tmp}/s1/final.ckpt", stage_channels=[2, 4, 8, 16, 32])
        cn.train(json.dumps(cfg), index, f"{tmp}/s2")
        pipe = cn.Pipeline(f"{tmp}/s1/final.ckpt", f"{tmp}/s2/final.ckpt")
        out, bbox, _ = pipe.run(image, h, w)
        outside = [out[r * w + c] for r in range(h) for c in range(w)
                   if not (bbox[0] <= r <= bbox[1] and bbox[2] <= c <= bbox[3])]
        check(len(out) == h * w and all(v == 0 for v in outside), "Pipeline.run background outside bbox")

        try:
            cn.Stage1(f"{tmp}/s2/final.ckpt")
            check(False, "stage-2 checkpoint rejected by Stage1")
        except ValueError:
            check(True, "stage-2 checkpoint rejected by Stage1")

    print("smoke test passed")


if __name__ == "__main__":
    main()
