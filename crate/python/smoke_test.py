"""Smoke test for the promptrec Python extension.

Builds nothing itself: run `cargo build --release -p promptrec-py` first, or
point PROMPTREC_PY_LIB at the compiled shared library.
"""

import importlib
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module(workdir):
    lib = os.environ.get("PROMPTREC_PY_LIB")
    candidates = [Path(lib)] if lib else [
        ROOT / "target" / "release" / "libpromptrec_py.so",
        ROOT / "target" / "debug" / "libpromptrec_py.so",
    ]
    for c in candidates:
        if c.is_file():
            shutil.copy(c, workdir / "promptrec_py.so")
            sys.path.insert(0, str(workdir))
            return importlib.import_module("promptrec_py")
    sys.exit(f"no compiled extension found in {[str(c) for c in candidates]}")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        pr = load_module(tmp)
        print("build", pr.BUILD_ID)

        cfg = pr.Config(overrides={
            "model_dim": "8", "num_layers": "1", "max_seq_len": "10",
            "epochs": "3", "lr": "0.01",
            "syn_warm_users": "200", "syn_cold_users": "80", "syn_items": "150",
        })
        assert cfg.get("lambda") == "0.1"
        try:
            cfg.set("no_such_key", "1")
        except pr.PromptrecError as e:
            assert e.args[1] == 2, e.args
        else:
            raise AssertionError("unknown key accepted")

        data = pr.Dataset.synthetic(cfg)
        warm, cold_train, cold_test = data.splits(cfg)
        print(f"users={data.num_users} items={data.num_items} warm={len(warm)} "
              f"cold={len(cold_train)}+{len(cold_test)}")

        base, report = pr.pretrain(cfg, data)
        print("pretrain epochs", len(json.loads(report)["epochs"]))
        tuned, report = pr.tune(cfg, base, data)
        report = json.loads(report)
        assert tuned.backbone_digest() == base.backbone_digest(), "light tuning moved the backbone"
        print("trainable_fraction", report["trainable_fraction"])

        before = pr.evaluate(cfg, base, data)
        after = pr.evaluate(cfg, tuned, data, "joint")
        print(f"auc frozen={before['auc']:.4f} tuned={after['auc']:.4f} cases={int(after['cases'])}")
        assert 0.0 <= after["auc"] <= 1.0

        path = tmp / "tuned.ckpt"
        tuned.save(str(path))
        again = pr.Checkpoint.load(str(path))
        assert again.meta["stage"] == "tune"
        scores = again.score_items(data.sequence(cold_test[0]), data, cold_test[0])
        assert len(scores) == again.num_items

        out = pr.run(["--out-dir", str(tmp / "cli"), "--set", "syn_warm_users=20",
                      "--set", "syn_cold_users=5", "gen-data"])
        assert out.startswith("users=25"), out
        assert abs(pr.f1_score(0.42, 0.74) - 0.536) < 5e-4
        assert pr.case_auc(1.0, [0.0, 2.0]) == 0.5
        print("smoke test passed")


if __name__ == "__main__":
    main()
