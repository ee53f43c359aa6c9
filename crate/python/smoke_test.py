"""Smoke test for the wildfire_py extension module.

Build first, e.g. `maturin develop -m crates/py/Cargo.toml --features extension-module`.
"""

import math
import os
import tempfile

import wildfire_py as wf


def main():
    assert len(wf.CHANNEL_NAMES) == 10

    assert wf.roc_auc([0.9, 0.8, 0.1, 0.2], [True, True, False, False]) == 1.0
    assert wf.confusion([0.9, 0.4, 0.6], [True, True, False]) == (1, 1, 0, 1)

    scenes, logits = wf.synth_scenes(height=64, width=64, days=20, seed=1)
    assert len(scenes) == 20 and len(logits) == 20
    assert scenes[0].shape == (64, 64)
    assert scenes[0].channel("elevation") == scenes[5].channel("elevation")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "day.wfrs")
        scenes[3].write(path)
        back = wf.Scene.read(path)
        assert back.date == scenes[3].date
        assert back.fire_mask == scenes[3].fire_mask

        data = wf.Dataset.build(scenes, task="daily", tile_size=16, seed=1)
        assert len(data) > 0 and data.task == "daily"
        train, val = data.split("train"), data.split("val")

        model = wf.Model("unet", [4, 8], tile=16, seed=0)
        history = model.fit(train, val, epochs=2, learning_rate=1e-3, batch_size=8)
        assert len(history) == 2
        assert all(math.isfinite(loss) for _, loss, _ in history)

        probs = model.predict(train)
        assert len(probs) == len(train) * 16 * 16
        assert all(0.0 <= p <= 1.0 for p in probs)

        ckpt = os.path.join(tmp, "model.wfck")
        model.save(ckpt)
        other = wf.Model("unet", [4, 8], tile=16, seed=9)
        other.load(ckpt)
        assert other.predict(train) == probs

        metrics = model.evaluate(train)
        assert set(metrics) >= {"auc", "precision", "recall", "iou", "mean_iou"}

    print("wildfire_py smoke test passed")


if __name__ == "__main__":
    main()
