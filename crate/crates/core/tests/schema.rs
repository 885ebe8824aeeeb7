use dmm_core::pipeline::{run_pipeline, PipelineConfig, REPORT_SCHEMA};
use serde_json::Value;

#[test]
fn report_validates_against_published_schema() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: PipelineConfig = toml::from_str(
        "seeds = [1, 2]\npseudo_batches = 1\n[dataset]\nkind = \"blobs\"\nn_per_class = 50\n\
         [partition]\ndomains = 3\nalpha = 0.5\nmin_size = 10\n[train]\nepochs = 2\n\
         [inversion]\nbatch_size = 16\nsteps = 10\n[distill]\nsteps = 3\n",
    )
    .unwrap();
    cfg.out_dir = dir.path().to_path_buf();
    run_pipeline(&cfg).unwrap();

    let schema: Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).unwrap();
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    if let Err(errors) = compiled.validate(&report) {
        let msgs: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
        panic!("report violates schema:\n{}", msgs.join("\n"));
    }

    let mut broken = report.clone();
    broken["schema_version"] = Value::String("one".into());
    assert!(!compiled.is_valid(&broken));
    let mut broken = report;
    broken["runs"][0]["eval"]["dmm"]["accuracy"] = Value::from(1.5);
    assert!(!compiled.is_valid(&broken));
}
