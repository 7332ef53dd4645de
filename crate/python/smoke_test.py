"""Smoke test for the `pyreid` extension module.

Build and install first:
    maturin build --release -m crates/py/Cargo.toml -o target/wheels
    pip install --force-reinstall target/wheels/pyreid-*.whl
"""

import math
import sys
import tempfile
from pathlib import Path

import pyreid


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    check(pyreid.branch_count(6) == 21, "six levels give 21 branches")
    branches = pyreid.enumerate_branches(6, 6)
    check(branches[0] == (1, 1, 1, 1) and branches[-1] == (6, 1, 1, 6), "branch row ranges")

    check(math.isclose(pyreid.update_ema(2.0, 1.0, 0.25), 1.75), "ema update")
    check(pyreid.loss_reduction_prob(3.0, 2.0) == 1.0, "rising loss gives p = 1")
    check(pyreid.focal_weight(1.0, 2.0) == 0.0, "focal weight vanishes at p = 1")
    check(pyreid.select_phase(1.0, 0.1, 0.16) == "id_only", "small triplet weight stays id_only")
    check(pyreid.select_phase(1.0, 0.5, 0.16) == "combined", "large triplet weight switches")

    sched = pyreid.Scheduler()
    check(sched.decide() == "id_only", "scheduler starts id_only")
    sched.observe("id", 5.0)
    sched.observe("triplet", 1.0)
    check(sched.weights == (0.0, 0.0), "first observation leaves both weights at zero")

    cfg = pyreid.Config("desk")
    cfg["epochs"] = 3
    cfg.set("checkpoint_epochs", "")
    check(cfg.get("epochs") == "3", "config set and get")
    check(pyreid.Config.from_ini(cfg.to_ini()) == cfg, "config ini round trip")
    try:
        cfg.set("no_such_key", 1)
        check(False, "unknown key rejected")
    except pyreid.ConfigError as e:
        check("no_such_key" in str(e), "unknown key rejected")

    data = pyreid.Dataset.generate(seed=1, ids=16, images_per_id=6)
    check(len(data) == 96, "dataset size")
    shape, pixels = data.images("query")
    check(len(pixels) == math.prod(shape), "image buffer matches its shape")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        data.save(tmp / "data")
        reloaded = pyreid.Dataset.load(tmp / "data")
        check(reloaded.labels("gallery") == data.labels("gallery"), "dataset save and load")

        trainer = pyreid.Trainer(cfg, data)
        first = trainer.step()
        check(first["tau"] == 1 and first["phase"] == "id_only", "first iteration is id_only")
        rows = [first] + trainer.run()
        check(trainer.is_finished and len(rows) == 3 * trainer.iterations_per_epoch, "full run")
        check(any(r["phase"] == "combined" for r in rows), "combined phase reached")
        metrics = trainer.evaluate(data)
        check(0.0 <= metrics["mAP"] <= 1.0 and len(metrics["cmc"]) == 10, "metrics shape")

        ckpt = tmp / "model.pyrt"
        trainer.save_checkpoint(ckpt)
        again = pyreid.evaluate_checkpoint(str(ckpt), data)
        check(again["mAP"] == metrics["mAP"], "checkpoint evaluation matches the trainer")

        twin = pyreid.Trainer(cfg, data)
        twin.run()
        check(twin.checkpoint_bytes() == trainer.checkpoint_bytes(), "training is deterministic")

    emb = pyreid.evaluate_embeddings(
        [[0.0, 0.0], [5.0, 5.0]], [(1, 0), (2, 0)],
        [[0.1, 0.0], [5.0, 5.1]], [(1, 1), (2, 1)],
    )
    check(emb["mAP"] == 1.0 and emb["rank1"] == 1.0, "perfect embeddings score 1")

    bad = pyreid.Config("desk")
    bad["epochs"] = 1
    bad["base_lr"] = 1e12
    try:
        pyreid.Trainer(bad, data).run()
        check(False, "divergence raises")
    except pyreid.DivergedError:
        check(True, "divergence raises")

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
