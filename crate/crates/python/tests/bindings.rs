use promptrec_py::promptrec_py;
use pyo3::prelude::*;

#[test]
fn module_drives_a_small_pipeline() {
    pyo3::append_to_inittab!(promptrec_py);
    Python::initialize();
    Python::attach(|py| {
        py.run(
            cr#"
import promptrec_py as pr

cfg = pr.Config(overrides={
    "model_dim": "8", "num_layers": "1", "max_seq_len": "10", "epochs": "2", "lr": "0.01",
    "syn_warm_users": "120", "syn_cold_users": "40", "syn_items": "150",
})
try:
    pr.Config(overrides={"bogus": "1"})
    raise AssertionError("unknown key accepted")
except pr.PromptrecError as e:
    assert e.args[1] == 2

data = pr.Dataset.synthetic(cfg)
assert data.num_users == 160 and data.num_attrs == 3
base, _ = pr.pretrain(cfg, data)
assert not base.has_prompt
tuned, report = pr.tune(cfg, base, data)
assert tuned.has_prompt
assert tuned.backbone_digest() == base.backbone_digest()
m = pr.evaluate(cfg, tuned, data, "zeroshot")
assert m["cases"] > 0 and 0.0 <= m["auc"] <= 1.0
assert set(["hit@10", "ndcg@10", "auc"]) <= set(m)
try:
    pr.evaluate(cfg, tuned, data, "sideways")
    raise AssertionError("bad split accepted")
except pr.PromptrecError as e:
    assert e.args[1] == 2
"#,
            None,
            None,
        )
        .unwrap_or_else(|e| panic!("{e}"));
    });
}
