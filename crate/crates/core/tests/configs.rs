use std::path::Path;

use moe_rl_lab::trainer::TrainConfig;

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let config = TrainConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert!(config.policy.num_params() <= 100_000, "{}", path.display());
            count += 1;
        }
    }
    assert!(count >= 3);
}
