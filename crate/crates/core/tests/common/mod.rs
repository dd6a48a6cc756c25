use std::path::PathBuf;
use std::sync::OnceLock;

use duet::model::Backbone;
use duet::trainer::pretrain::{pretrain, PretrainConfig};
use sha2::{Digest, Sha256};

/// Backbone trained with the default pretraining config. The checkpoint is
/// cached under the cargo test tmpdir, keyed by the config, so only the
/// first run pays for pretraining.
pub fn pretrained() -> &'static (Backbone, PathBuf) {
    static CELL: OnceLock<(Backbone, PathBuf)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = PretrainConfig::default();
        let key = hex::encode(Sha256::digest(serde_json::to_vec(&cfg).unwrap()));
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
        let path = dir.join(format!("backbone-{}.ckpt", &key[..16]));
        if let Ok((b, _)) = Backbone::load(&path) {
            return (b, path);
        }
        eprintln!("pretraining the backbone ({} steps); cached at {}", cfg.steps, path.display());
        let (b, _) = pretrain(&cfg, |_| {}).unwrap();
        let tmp = path.with_extension("partial");
        b.save(&tmp, Default::default()).unwrap();
        std::fs::rename(&tmp, &path).unwrap();
        (b, path)
    })
}
