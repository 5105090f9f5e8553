mod common;

use std::fs;
use std::path::Path;

use common::setups::tiny_config;
use modcomp::composer::{KSpec, Method, Weighting};
use modcomp::evaluator::EvalRecord;
use modcomp::pipeline::{self, Layout, RunConfig};
use modcomp::scoring::Strategy;
use modcomp::Error;

fn run_all(cfg: &RunConfig) {
    pipeline::gen_data(cfg).unwrap();
    pipeline::train(cfg).unwrap();
    pipeline::bench(cfg).unwrap();
    pipeline::metareg(cfg).unwrap();
    pipeline::report(cfg).unwrap();
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn gen_data_writes_every_domain_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&dir.path().join("a/b/c"));
    let out = pipeline::gen_data(&cfg).unwrap();
    assert_eq!(out.corpus.domains.len(), 6);
    let layout = Layout::new(&cfg.output_dir);
    for d in &out.corpus.domains {
        assert!(layout.corpus().join(&d.domain_id).join("train.tokens").exists());
    }
    let first = read(&layout.corpus().join("dom00/train.tokens"));
    pipeline::gen_data(&cfg).unwrap();
    assert_eq!(first, read(&layout.corpus().join("dom00/train.tokens")));
    assert!(out.overlap_table().lines().count() == 7);
}

#[test]
fn train_resumes_and_flags_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    pipeline::gen_data(&cfg).unwrap();
    let first = pipeline::train(&cfg).unwrap();
    assert_eq!(first.trained.len(), 5);
    let layout = Layout::new(&cfg.output_dir);
    for id in ["dom00", "dom01", "dom02", "dom03"] {
        assert!(layout.adapter(id).join("manifest.json").exists());
    }
    let log = read(&layout.file(pipeline::TRAINING_LOG));

    fs::remove_dir_all(layout.adapter("dom02")).unwrap();
    let second = pipeline::train(&cfg).unwrap();
    assert_eq!(second.trained, vec!["dom02"]);
    assert_eq!(second.skipped.len(), 4);
    assert_eq!(log, read(&layout.file(pipeline::TRAINING_LOG)));

    let manifest = layout.adapter("dom01").join("manifest.json");
    fs::write(&manifest, "{ not json").unwrap();
    match pipeline::train(&cfg) {
        Err(e @ Error::Data(_)) => {
            assert_eq!(e.exit_code(), 3);
            assert!(e.to_string().contains("manifest.json"), "{e}");
        }
        other => panic!("{:?}", other.map(|o| o.trained)),
    }
}

#[test]
fn changed_settings_retrain() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    pipeline::gen_data(&cfg).unwrap();
    pipeline::train(&cfg).unwrap();
    cfg.train.epochs = 1;
    let again = pipeline::train(&cfg).unwrap();
    assert_eq!(again.skipped, vec!["base"]);
    assert_eq!(again.trained.len(), 4);
}

#[test]
fn missing_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert_eq!(pipeline::train(&cfg).err().unwrap().exit_code(), 3);
    pipeline::gen_data(&cfg).unwrap();
    assert_eq!(pipeline::bench(&cfg).err().unwrap().exit_code(), 4);
    assert_eq!(pipeline::metareg(&cfg).err().unwrap().exit_code(), 4);

    let mut bad = cfg.clone();
    bad.grid.eval_domains = vec!["nowhere".into()];
    pipeline::train(&cfg).unwrap();
    assert_eq!(pipeline::bench(&bad).err().unwrap().exit_code(), 2);
}

#[test]
fn grid_cardinality() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.grid.strategies = vec![Strategy::TfIdf, Strategy::Prior];
    cfg.grid.weightings = vec![Weighting::Scored];
    cfg.grid.k = vec![KSpec::Fixed(0), KSpec::Fixed(1), KSpec::Fixed(2)];
    cfg.grid.seeds = vec![5, 10, 42, 88];
    pipeline::gen_data(&cfg).unwrap();
    pipeline::train(&cfg).unwrap();
    let out = pipeline::bench(&cfg).unwrap();
    assert_eq!(out.records.len(), 2 * 2 * 3 * 4 * 2);

    for r in out
        .records
        .iter()
        .filter(|r| r.k == KSpec::Fixed(1) && r.method == Method::Average)
    {
        let twin = out
            .records
            .iter()
            .find(|e| {
                e.method == Method::Ensemble
                    && e.k == r.k
                    && e.strategy == r.strategy
                    && e.eval_domain == r.eval_domain
                    && e.seed == r.seed
            })
            .unwrap();
        assert!((r.perplexity - twin.perplexity).abs() / twin.perplexity < 1e-5);
    }
    let n_comp = out.compositions.iter().filter(|c| c.k == KSpec::Fixed(2)).count();
    assert_eq!(n_comp, 2 * 2 * 4 * 2 * 2);
}

#[test]
fn full_run_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny_config(&dir.path().join("a"));
    let b = tiny_config(&dir.path().join("b"));
    run_all(&a);
    run_all(&b);
    for f in [
        pipeline::RESULTS,
        pipeline::SUMMARY,
        pipeline::COMPOSITIONS,
        pipeline::TRAINING_LOG,
        pipeline::METAREG,
        pipeline::COEFFICIENTS,
        pipeline::FEATURES,
        pipeline::PPL_VS_K,
        pipeline::WEIGHTS,
        pipeline::WEIGHT_KL,
        pipeline::CO2_VS_K,
        pipeline::AUTOK_SWEEP,
    ] {
        assert_eq!(read(&a.output_dir.join(f)), read(&b.output_dir.join(f)), "{f}");
    }
    let results = read(&a.output_dir.join(pipeline::RESULTS));
    pipeline::bench(&a).unwrap();
    assert_eq!(results, read(&a.output_dir.join(pipeline::RESULTS)));
}

#[test]
fn outputs_have_the_documented_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    run_all(&cfg);
    let layout = Layout::new(&cfg.output_dir);

    let records: Vec<EvalRecord> = pipeline::read_csv(&layout.file(pipeline::RESULTS)).unwrap();
    let out = pipeline::report(&cfg).unwrap();
    let ks: std::collections::BTreeSet<String> = out.ppl_vs_k.iter().map(|r| r.k.to_string()).collect();
    for k in &cfg.grid.k {
        assert!(ks.contains(&k.to_string()), "{k}");
    }
    let mut sums: std::collections::BTreeMap<(Strategy, String), f64> = Default::default();
    for w in &out.weights {
        *sums.entry((w.strategy, w.eval_domain.clone())).or_default() += w.weight;
    }
    assert!(sums.values().all(|s| (s - 1.0).abs() < 1e-9));

    let ens: Vec<f64> = out
        .co2_vs_k
        .iter()
        .filter(|r| {
            r.method == Method::Ensemble
                && matches!(r.k, KSpec::Fixed(_))
                && r.strategy == Strategy::TfIdf
                && r.weighting == Weighting::Scored
        })
        .map(|r| r.mean_co2_g)
        .collect();
    assert_eq!(ens.len(), 5);
    assert!(ens.windows(2).all(|w| w[0] <= w[1]), "{ens:?}");
    assert_eq!(out.autok.len() / cfg.report.auto_thresholds.len(), 5 * 2);

    let meta = fs::read_to_string(layout.file(pipeline::METAREG)).unwrap();
    for model in ["mean_diff", "linear", "ridge", "ridge_best"] {
        assert!(
            meta.lines()
                .any(|l| l.starts_with(&format!("{model},")) && l.contains(",mean,")),
            "{model}"
        );
    }
    let linear_mean = meta
        .lines()
        .find(|l| l.starts_with("linear,") && l.contains(",mean,"))
        .unwrap();
    let ridge0_mean = meta.lines().find(|l| l.starts_with("ridge,0.0,mean,")).unwrap();
    assert_eq!(
        linear_mean.trim_start_matches("linear,"),
        ridge0_mean.trim_start_matches("ridge,")
    );

    assert!(records.iter().all(|r| r.co2_g > 0.0 && r.wall_seconds > 0.0));
    assert!(layout.file("bench_metadata.json").exists());
}

#[test]
fn malformed_results_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    run_all(&cfg);
    let path = cfg.output_dir.join(pipeline::RESULTS);
    let mut lines: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
    let mut fields: Vec<&str> = lines[4].split(',').collect();
    fields[6] = "oops";
    lines[4] = fields.join(",");
    fs::write(&path, lines.join("\n")).unwrap();
    for err in [
        pipeline::metareg(&cfg).err().unwrap(),
        pipeline::report(&cfg).err().unwrap(),
    ] {
        match err {
            Error::Malformed { line, .. } => assert_eq!(line, 5),
            other => panic!("{other}"),
        }
    }
}
