"""Smoke test for the sparsenav extension module.

Uses an installed ``sparsenav`` when available (``maturin develop -m
crates/py/Cargo.toml``), otherwise loads ``target/release/libsparsenav.so``
built by ``cargo build --release -p sparsenav-py``.
"""

import importlib.machinery
import importlib.util
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load():
    try:
        import sparsenav

        return sparsenav
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libsparsenav.so")
        if os.path.exists(lib):
            break
    else:
        sys.exit("sparsenav not installed and no built library found")
    suffix = importlib.machinery.EXTENSION_SUFFIXES[0]
    dest = os.path.join(tempfile.mkdtemp(), "sparsenav" + suffix)
    shutil.copy(lib, dest)
    spec = importlib.util.spec_from_file_location("sparsenav", dest)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    sn = load()

    model = sn.Model.build(seed=1)
    h, w = model.input_size
    assert (h, w) == (64, 64)
    assert model.param_count() == 363782, model.param_count()
    assert model.num_classes == sn.NUM_CLASSES

    image, truth = sn.generate_scene(3)
    assert len(image) == 3 * h * w and len(truth) == h * w
    logits, shape = model.forward(image)
    assert shape == [sn.NUM_CLASSES, h, w] and len(logits) == sn.NUM_CLASSES * h * w
    pred = model.predict(image)
    assert sn.fidelity(pred, pred, h, w) == 1.0
    score, per_class = sn.iou(pred, truth, h, w)
    assert 0.0 <= score <= 100.0 and len(per_class) == sn.NUM_CLASSES

    profile = model.profile(reps=3, warmup=1)
    assert [b[0] for b in profile] == [1, 2, 3, 4]
    entries = [(b, prunable, lat) for b, lat, _, prunable in profile]
    k = sn.kscores(entries)
    assert all(x > 0 for x in k)
    ratios = sn.allocate(0.35, entries)
    spent = sum(r * e[1] for r, e in zip(ratios, entries))
    assert abs(spent - 0.35 * sum(e[1] for e in entries)) < 1e-6 * spent

    pruned, audit = model.prune(0.35, method="random", seed=2, calib=2, latencies=[e[2] for e in entries])
    assert pruned.param_count() < model.param_count()
    assert '"summary"' in audit
    again = sn.Model.from_bytes(pruned.to_bytes())
    assert again.predict(image) == pruned.predict(image)

    path = os.path.join(tempfile.mkdtemp(), "pruned.bin")
    pruned.save(path)
    assert sn.Model.load(path).param_count() == pruned.param_count()
    try:
        sn.Model.load(path + ".missing")
    except OSError:
        pass
    else:
        raise AssertionError("missing file loaded")

    assert sn.decide_direction(0.9, 0.1, 0.2) == "left"
    assert sn.decide_direction(0.0, 0.0, 0.0) == "stop"
    assert abs(sn.improvement(0.9, 0.6) - 50.0) < 1e-9
    assert abs(sn.battery_hours(10.0, 7800, 12) - 9.36) < 1e-9

    nav = sn.Navigator(threshold=0.4, window=3)
    sidewalk = [2] * (h * w)
    ev = nav.step_mask(sidewalk, h, w)
    assert ev.direction == "straight" and ev.cue is None, ev
    ev = nav.step_failure("lens cap")
    assert ev.cue == "camera error"
    ev = nav.step_image(model, image)
    assert ev.frame == 2 and ev.direction is not None
    try:
        sn.Navigator(window=0)
    except ValueError:
        pass
    else:
        raise AssertionError("zero window accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
