"""Smoke test for the capsnet_py extension.

Build and install first:
    cd crates/py && maturin develop --release
then run:
    python python/smoke_test.py
"""

import json
import math
import sys
import tempfile

import capsnet_py as cn


def check(name, cond):
    print(f"[{'PASS' if cond else 'FAIL'}] {name}")
    return cond


def main():
    ok = True

    v = cn.squash([3.0, 4.0])
    ok &= check("squash norm is 25/26", abs(math.hypot(*v) - 25 / 26) < 1e-8)

    b, l, h, p = 2, 4, 3, 2
    votes = [[[[[math.sin(i + j + k + r + c) for c in range(p)] for r in range(p)]
               for k in range(h)] for j in range(l)] for i in range(b)]
    acts = [[0.1 + 0.2 * j for j in range(l)] for _ in range(b)]
    poses = [[[[math.cos(i * j + r - c) for c in range(p)] for r in range(p)] for j in range(l)] for i in range(b)]
    w_route = [[[0.1 * (t - k + q) for k in range(h)] for q in range(p * p)] for t in range(l)]
    for alg in ["dynamic", "em", "vb", "self"]:
        out = cn.route(alg, votes, acts, lower_poses=poses, w_route=w_route)
        a = out["activations"]
        sums = [sum(row) for c in out["couplings"] for batch in c for row in batch]
        ok &= check(
            f"{alg} routing: shapes, range and coupling sums",
            len(a) == b and len(a[0]) == h and len(out["poses"][0][0]) == p
            and all(0.0 <= x <= 1.0 for row in a for x in row)
            and all(abs(s - 1.0) < 1e-12 for s in sums),
        )

    try:
        cn.route("bogus", votes, acts)
        ok &= check("unknown algorithm raises", False)
    except ValueError:
        ok &= check("unknown algorithm raises ValueError", True)

    report = cn.dead_capsules([[[[[0.0, 0.5, 0.01]]]], [[[[0.0, 0.3, 0.01]]]]], threshold=0.01)
    ok &= check("dead capsules: inclusive threshold", [d for _, d in report] == [True, False, True])
    ok &= check("dead capsules: streamed mean", abs(report[1][0] - 0.4) < 1e-12)

    images, labels = cn.synthetic_dataset(n_classes=4, image_size=12, samples_per_class=3)
    ok &= check("synthetic dataset", len(images) == 12 and len(images[0][0]) == 12 and sorted(set(labels)) == [0, 1, 2, 3])

    net = cn.Network(1, 2, 4, "self", n_caps=2)
    ok &= check("network layers", net.layer_kinds() == ["backbone", "primary", "conv_caps", "conv_caps", "class_caps"])
    preds = net.predict(images[:5])
    ok &= check("network predicts one class per image", len(preds) == 5 and all(0 <= q < 4 for q in preds))

    checks = cn.run_selftest()
    ok &= check(f"selftest ({len(checks)} checks)", all(passed for _, passed, _ in checks))

    with tempfile.TemporaryDirectory() as out:
        cfg = cn.Config(
            """
            algorithm = "vb"
            depths = [1]
            epochs = 2
            batch_size = 8
            [dataset]
            kind = "synthetic"
            n_classes = 3
            image_size = 8
            samples_per_class = 8
            [model]
            n_caps = 2
            backbone_channels = 4
            """
        )
        cfg.outdir = out
        rec = cn.train(cfg)
        data = json.loads(rec.to_json())
        ok &= check(
            "train writes a record",
            rec.name == "vb_d01_s0" and len(rec.losses) == 2 and data["run"]["depth"] == 1
            and 0.0 <= rec.test_accuracy <= 1.0,
        )
        again = cn.train(cfg)
        ok &= check("training is deterministic", again.losses == rec.losses)

    try:
        cn.Config("epoch = 3")
        ok &= check("unknown config key raises", False)
    except ValueError:
        ok &= check("unknown config key raises ValueError", True)

    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
