use std::path::Path;

use modcomp::corpus::{SplitSizes, SyntheticSpec};
use modcomp::pipeline::RunConfig;

/// A small but complete run: four domains, two mixtures, a one-layer model.
pub fn tiny_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(
        r#"
        [data.synthetic]
        n_domains = 4
        vocab_size = 67
        tokens_per_split = { train = 1536, dev = 384, eval = 384 }

        [model]
        n_layers = 1
        d_model = 16
        n_heads = 2
        max_seq_len = 32
        reduction_factor = 4

        [pretrain]
        epochs = 1

        [train]
        epochs = 2
        lr = 1e-3
        seq_len = 32

        [scoring]
        n_samples = 12
        sample_len = 32

        [bench]
        eval_seq_len = 32

        [grid]
        seeds = [5, 10]
        "#,
    )
    .expect("tiny config parses");
    cfg.output_dir = out.to_path_buf();
    cfg
}

/// α = 0 domains without mixtures, for ranking checks.
pub fn disjoint_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        shared_fraction: 0.0,
        seed,
        tokens_per_split: SplitSizes {
            train: 2048,
            dev: 2048,
            eval: 2048,
        },
        mixtures: Vec::new(),
        ..SyntheticSpec::default()
    }
}
