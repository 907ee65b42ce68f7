use std::fs;

use gic_core::data::SynthSpuriousSpec;
use gic_core::pipeline::{
    group_distribution, prepare_data, run_pipeline, run_seed_in_memory, study_comparison_size, study_discrepancy,
    DatasetSource, DiscrepancyVariant, Manifest, PipelineConfig,
};
use gic_core::GicError;

fn toy(dir: &std::path::Path, seeds: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::toy2d();
    cfg.num_seeds = seeds;
    cfg.output_dir = dir.to_path_buf();
    cfg.eval.plot = false;
    cfg
}

#[test]
fn three_seed_toy_run_writes_three_reports_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), 3);
    let (manifest, outcomes) = run_pipeline(&cfg, false).unwrap();
    assert_eq!(manifest.seeds.len(), 3);
    assert_eq!(outcomes.len(), 3);
    for s in &manifest.seeds {
        let report = dir.path().join(&s.dir).join("report.json");
        assert!(report.is_file(), "{}", report.display());
        assert!(s.worst_group_accuracy <= s.average_accuracy);
        assert!(s.worst_group_accuracy > s.erm_worst_group_accuracy);
    }
    let on_disk = Manifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(on_disk, manifest);
}

#[test]
fn identical_configs_give_identical_manifests_and_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, _) = run_pipeline(&toy(a.path(), 1), false).unwrap();
    let (mb, _) = run_pipeline(&toy(b.path(), 1), false).unwrap();
    assert_eq!(ma.seeds, mb.seeds);
    assert_eq!(ma.config_hash, mb.config_hash);
    for name in ["erm.gicm", "gic.gicm", "robust.gicm", "groups.csv"] {
        let read = |root: &std::path::Path| fs::read(root.join("seed-0").join(name)).unwrap();
        assert_eq!(read(a.path()), read(b.path()), "{name}");
    }
}

#[test]
fn manifest_replay_reproduces_the_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, _) = run_pipeline(&toy(a.path(), 1), false).unwrap();
    let mut replay = PipelineConfig::load(&a.path().join("manifest.json")).unwrap();
    replay.output_dir = b.path().to_path_buf();
    let (mb, _) = run_pipeline(&replay, false).unwrap();
    assert_eq!(ma.seeds, mb.seeds);
    assert_eq!(
        fs::read(a.path().join("seed-0/robust.gicm")).unwrap(),
        fs::read(b.path().join("seed-0/robust.gicm")).unwrap()
    );
}

#[test]
fn cached_stages_are_reused_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), 1);
    run_pipeline(&cfg, false).unwrap();
    let model = dir.path().join("seed-0/robust.gicm");
    let stamp = fs::metadata(&model).unwrap().modified().unwrap();
    run_pipeline(&cfg, false).unwrap();
    assert_eq!(fs::metadata(&model).unwrap().modified().unwrap(), stamp);
    std::thread::sleep(std::time::Duration::from_millis(20));
    run_pipeline(&cfg, true).unwrap();
    assert!(fs::metadata(&model).unwrap().modified().unwrap() > stamp);
}

#[test]
fn changing_gamma_invalidates_downstream_stages_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy(dir.path(), 1);
    let (first, _) = run_pipeline(&cfg, false).unwrap();
    cfg.gic.gamma = 5.0;
    let (second, _) = run_pipeline(&cfg, false).unwrap();
    let (s1, s2) = (&first.seeds[0].stages, &second.seeds[0].stages);
    assert_eq!(s1["data"], s2["data"]);
    assert_eq!(s1["erm"], s2["erm"]);
    assert_ne!(s1["gic"], s2["gic"]);
    assert_ne!(s1["robust"], s2["robust"]);
}

#[test]
fn seeds_are_derived_from_the_base_seed() {
    let mut cfg = PipelineConfig::toy2d();
    cfg.base_seed = 7;
    cfg.num_seeds = 3;
    assert_eq!(cfg.seeds(), vec![7, 8, 9]);
}

#[test]
fn in_memory_run_matches_the_on_disk_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), 1);
    let (manifest, _) = run_pipeline(&cfg, false).unwrap();
    let o = run_seed_in_memory(&cfg, 0).unwrap();
    assert_eq!(o.robust.worst, manifest.seeds[0].worst_group_accuracy);
}

#[test]
fn study_entry_points_validate_their_inputs() {
    let cfg = PipelineConfig::toy2d();
    assert!(matches!(study_comparison_size(&cfg, &[], &[true]), Err(GicError::Study(_))));
    assert!(matches!(study_comparison_size(&cfg, &[10], &[]), Err(GicError::Study(_))));
    assert!(matches!(study_comparison_size(&cfg, &[1_000_000], &[true]), Err(GicError::Study(_))));
    let v = DiscrepancyVariant {
        name: "same".into(),
        fractions: vec![0.25; 4],
        readjust: false,
    };
    // The toy source cannot be regenerated with other comparison fractions.
    assert!(matches!(study_discrepancy(&cfg, &[v]), Err(GicError::Study(_))));
}

#[test]
fn single_size_gives_one_row() {
    let mut cfg = PipelineConfig::cmnist();
    if let DatasetSource::Synth { spec } = &mut cfg.dataset {
        spec.n = [2000, 500, 500];
    }
    cfg.num_seeds = 1;
    let rows = study_comparison_size(&cfg, &[10], &[true]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].size, rows[0].labeled, rows[0].seeds), (10, true, 1));
}

#[test]
fn variant_equal_to_train_distribution_has_zero_group_kl() {
    let mut cfg = PipelineConfig::cmnist();
    let train = SynthSpuriousSpec::cmnist().group_fractions[0].clone();
    if let DatasetSource::Synth { spec } = &mut cfg.dataset {
        spec.n = [2000, 2000, 500];
        spec.group_fractions[1] = train.clone();
    }
    cfg.num_seeds = 1;
    let data = prepare_data(&cfg.dataset, 0).unwrap();
    assert_eq!(group_distribution(&data.train).unwrap(), group_distribution(&data.comparison).unwrap());
    let v = DiscrepancyVariant {
        name: "train".into(),
        fractions: train,
        readjust: false,
    };
    let study = study_discrepancy(&cfg, &[v]).unwrap();
    assert_eq!(study.rows[0].group_kl, 0.0);
}
