#![allow(dead_code)]

use std::path::{Path, PathBuf};

use larl_cli::Entries;

/// Settings for a pipeline small enough to run in a unit test.
pub fn tiny(variant: &str, seed: u64) -> Entries {
    let mut e = Entries::default();
    for (k, v) in [
        ("run.variant", variant.to_string()),
        ("run.seed", seed.to_string()),
        ("data.train", "24".into()),
        ("data.valid", "8".into()),
        ("data.test", "8".into()),
        ("data.eval_episodes", "4".into()),
        ("data.eval_ppl_dialogs", "4".into()),
        ("model.embed_size", "8".into()),
        ("model.utt_size", "8".into()),
        ("model.ctx_size", "8".into()),
        ("model.dec_size", "8".into()),
        ("model.d", "8".into()),
        ("train.epochs", "1".into()),
        ("train.batch_size", "8".into()),
        ("rl.episodes", "4".into()),
        ("rl.eval_every", "2".into()),
        ("eval.ppl_samples", "2".into()),
    ] {
        e.push(k, v);
    }
    e
}

/// Every regular file under `root`, relative to it, sorted.
pub fn files(root: &Path) -> Vec<String> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p: PathBuf = entry.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.push(
                    p.strip_prefix(root)
                        .unwrap()
                        .to_string_lossy()
                        .replace('\\', "/"),
                );
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
