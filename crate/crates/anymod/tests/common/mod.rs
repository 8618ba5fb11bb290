#![allow(dead_code)]

use std::path::Path;

use anymod::config::RunConfig;

/// Small enough for debug-speed CLI tests: 16^3 volumes, 8 patches per
/// modality, a two-layer encoder.
pub const TINY_CONFIG: &str = r#"{
  "cohort": { "synthetic": { "n_subjects": 40, "volume_shape": { "d": 16, "h": 16, "w": 16 }, "n_regions": 6, "seed": 3,
                             "missingness": { "t2": 0.8, "flair": 0.9, "pet": 0.8 } } },
  "model": { "dim": 24, "heads": 2, "layers": 2, "decoder_dim": 16, "decoder_heads": 2, "volume_shape": { "d": 16, "h": 16, "w": 16 } },
  "train": { "epochs": 2, "warmup_epochs": 1, "batch_size": 4, "max_steps": 12, "lr": 1e-3 },
  "pretrain": { "checkpoint_every": 4 },
  "finetune": { "max_epochs": 3, "freeze_epochs": 1, "patience": 5, "lr": 1e-3 },
  "eval": { "seeds": [0, 1], "fractions": [0.5, 1.0] }
}"#;

pub fn tiny() -> RunConfig {
    RunConfig::from_json(TINY_CONFIG).unwrap()
}

pub fn write_tiny(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, TINY_CONFIG).unwrap();
    p
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
