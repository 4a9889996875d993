//! Golden outputs. Set MORPHGATE_BLESS=1 to rewrite them after an
//! intentional change.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use morphgate::protocol::{self, split, ExperimentConfig};
use morphgate::synth::{make_dataset, GenerationSpec};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn check_golden(name: &str, actual: &str) {
    let path = fixtures().join(name);
    if std::env::var_os("MORPHGATE_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected =
        std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "{name} changed");
}

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

#[test]
fn synth_a_split_is_stable() {
    let spec = GenerationSpec::load(&config_dir().join("datasets/synthA.toml")).unwrap();
    let data = make_dataset(&spec).unwrap();
    let s = split(&data.samples, 0.6, 0.2, 7).unwrap();
    let mut text = String::new();
    for (part, ids) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        let owners: BTreeSet<&str> = ids
            .iter()
            .filter_map(|id| id.strip_prefix("synthA_").and_then(|r| r.split('_').next()))
            .filter(|o| o.starts_with('i'))
            .collect();
        text.push_str(&format!(
            "[{part}] samples={} identities={}\n",
            ids.len(),
            owners.len()
        ));
        for o in owners {
            text.push_str(o);
            text.push('\n');
        }
    }
    check_golden("split_synthA_seed7.golden", &text);
}

#[test]
fn small_experiment_report_is_stable() {
    let config = ExperimentConfig::from_toml(
        r#"
name = "golden"
seed = 11
split_train = 0.6
split_val = 0.2
train_sources = [{ tag = "g" }]
test_sources = ["g"]

[train]
epochs = 5
batch_size = 32
hidden = [16]
embedding_dim = 8
lr_grid = [1e-3, 1e-4]

[datasets.g]
spec = "g.toml"
"#,
    )
    .unwrap();
    let spec = GenerationSpec::from_toml(
        r#"
tag = "g"
seed = 5
identities = 40
bonafide_per_identity = 3
tools = ["opencv", "stylegan"]
morphs_per_tool = 40
"#,
    )
    .unwrap();
    let datasets = [("g".to_string(), make_dataset(&spec).unwrap())]
        .into_iter()
        .collect();
    let report = protocol::run_with_datasets(&config, &datasets).unwrap();
    check_golden("experiment_small.golden", &protocol::render_report(&report));
}
