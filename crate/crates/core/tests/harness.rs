use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use uql::bench::GeneratorId;
use uql::harness::*;

fn tiny(out: &Path, generators: &[GeneratorId]) -> ExperimentConfig {
    ExperimentConfig {
        n_per_class: 10,
        generators: generators.to_vec(),
        epochs: 1,
        bayes_epochs: 1,
        batch_size: 8,
        n: 3,
        learning_rate: 1e-3,
        out: out.to_path_buf(),
        ..Default::default()
    }
}

/// Every file below `dir` except manifests, keyed by relative path.
fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.extension().is_some_and(|x| x == "csv") {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn check_manifest(m: &RunManifest, dir: &Path) {
    assert!(m.complete, "{} incomplete", m.run);
    m.verify(dir).unwrap();
    let on_disk = RunManifest::load(&dir.join(RunManifest::file_name(&m.run))).unwrap();
    assert_eq!(&on_disk, m);
}

#[test]
fn binary_run_emits_listed_files_and_paired_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[GeneratorId::Df, GeneratorId::Nt]);
    let out = run_binary(&cfg).unwrap();
    check_manifest(out.manifest(), dir.path());
    assert_eq!(out.rows.len(), 4);
    for g in ["G-DF", "G-NT"] {
        let det = out.row(g, "test", "det").unwrap();
        let bnn = out.row(g, "test", "bnn").unwrap();
        assert_eq!(det.n_samples, bnn.n_samples);
        assert_eq!(det.mu, 0.0);
    }
    for r in &out.rows {
        assert!(r.mu <= r.pu + 1e-12, "{r:?}");
    }
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next(), Some(SUMMARY_HEADER));
    assert_eq!(summary, summary_csv(&out.rows));
    let listed: Vec<&str> = out.manifest().files.iter().map(|f| f.path.as_str()).collect();
    for f in ["G-DF/det.uql", "G-DF/bnn.uqb", "G-DF/report_bnn.csv", "G-NT/retention_det.csv", "G-NT/histogram_bnn.csv"] {
        assert!(listed.contains(&f), "{f} not in {listed:?}");
    }
    let phases: Vec<&str> = out.manifest().phases.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(phases[0], "data");
    assert!(phases.contains(&"convert G-NT"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[GeneratorId::Fsw]);
    run_binary(&cfg).unwrap();
    let first = csv_files(dir.path());
    run_binary(&cfg).unwrap();
    assert_eq!(csv_files(dir.path()), first);
    let other = tempfile::tempdir().unwrap();
    run_binary(&ExperimentConfig { out: other.path().to_path_buf(), ..cfg.clone() }).unwrap();
    assert_eq!(csv_files(other.path()), first);
}

#[test]
fn staged_pipeline_matches_one_shot_run() {
    let one = tempfile::tempdir().unwrap();
    let staged = tempfile::tempdir().unwrap();
    let gens = [GeneratorId::F2f];
    run_binary(&tiny(one.path(), &gens)).unwrap();
    let cfg = tiny(staged.path(), &gens);
    for stage in [stage_train, stage_convert, stage_eval, stage_retention] {
        let out = stage(&cfg).unwrap();
        check_manifest(out.manifest(), staged.path());
    }
    let a = csv_files(one.path());
    let b = csv_files(staged.path());
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    assert_eq!(a, b);
    assert_eq!(
        fs::read(one.path().join("G-F2F/bnn.uqb")).unwrap(),
        fs::read(staged.path().join("G-F2F/bnn.uqb")).unwrap()
    );
}

#[test]
fn failed_phase_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[GeneratorId::Df]);
    let err = stage_convert(&cfg).unwrap_err();
    assert!(!err.is_validation());
    let m = RunManifest::load(&dir.path().join(RunManifest::file_name("convert"))).unwrap();
    assert!(!m.complete);
    assert_eq!(m.failed_phase.as_deref(), Some("convert G-DF"));
    assert_eq!(m.phases.len(), 1);
    assert!(m.error.is_some());
}

#[test]
fn mc_dropout_runs_skip_conversion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        uq_method: UqMethod::McDropout,
        ..tiny(dir.path(), &[GeneratorId::Df])
    };
    let out = run_binary(&cfg).unwrap();
    let mcd = out.row("G-DF", "test", "mcd").unwrap();
    assert!(mcd.var_u >= 0.0 && mcd.mu <= mcd.pu);
    assert!(!dir.path().join("G-DF/bnn.uqb").exists());
    assert!(stage_convert(&cfg).unwrap_err().is_validation());
}

#[test]
fn source_detection_has_one_class_per_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &GeneratorId::ALL);
    let out = run_source_detection(&cfg).unwrap();
    check_manifest(out.manifest(), dir.path());
    let classes: Vec<&SummaryRow> = out.rows.iter().filter(|r| r.model == "bnn" && r.subset.starts_with("class_")).collect();
    assert_eq!(classes.len(), 6);
    for r in &classes {
        assert!(r.pu <= 6f64.ln() + 1e-12);
    }
    let total: usize = classes.iter().map(|r| r.n_samples).sum();
    assert_eq!(total, out.row("source", "test", "bnn").unwrap().n_samples);
    let confusion = fs::read_to_string(dir.path().join("source/confusion_bnn.csv")).unwrap();
    assert_eq!(confusion.lines().next(), Some(CONFUSION_HEADER));
    assert_eq!(confusion.lines().count(), 1 + 36);
    let counted: usize = confusion.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(counted, total);

    let two = tiny(dir.path(), &[GeneratorId::Df]);
    assert!(run_source_detection(&two).unwrap_err().is_validation());
}

#[test]
fn loo_writes_one_manifest_per_left_out_generator() {
    let dir = tempfile::tempdir().unwrap();
    let gens = [GeneratorId::Df, GeneratorId::Nt, GeneratorId::Fsw];
    let out = run_loo(&tiny(dir.path(), &gens)).unwrap();
    assert_eq!(out.manifests.len(), 4);
    for g in gens {
        let sub = dir.path().join(format!("loo_{g}"));
        check_manifest(&RunManifest::load(&sub.join(RunManifest::file_name("loo"))).unwrap(), &sub);
        let ho = out.row(&format!("loo_{g}"), "held_out", "bnn").unwrap();
        let ind = out.row(&format!("loo_{g}"), "in_dist", "bnn").unwrap();
        assert_eq!(ho.n_samples, 3);
        assert_eq!(ind.n_samples, 9);
        assert!(sub.join("retention_bnn_held_out_mix.csv").exists());
    }
    check_manifest(out.manifest(), dir.path());
    assert!(run_loo(&tiny(dir.path(), &gens[..2])).unwrap_err().is_validation());
}

#[test]
fn region_runs_pair_full_and_masked_settings() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_region(&tiny(dir.path(), &[GeneratorId::Nt])).unwrap();
    let settings: Vec<&str> = out.rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(settings, ["full/G-NT", "full/G-NT", "no_mouth/G-NT", "no_mouth/G-NT"]);
    check_manifest(out.manifest(), dir.path());
}

#[test]
fn ablation_emits_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), &[GeneratorId::Df]);
    for (axis, values) in [
        (AblationAxis::N, vec![1.0, 4.0]),
        (AblationAxis::DeltaMoped, vec![0.1, 0.5]),
        (AblationAxis::KlFactor, vec![0.0, 1.0, 2.0]),
        (AblationAxis::Dr, vec![0.2, 0.5]),
    ] {
        cfg.ablation_axis = axis;
        cfg.ablation_values = values.clone();
        let out = run_ablation(&cfg).unwrap();
        assert_eq!(out.rows.len(), values.len());
        for (r, v) in out.rows.iter().zip(&values) {
            assert_eq!(r.subset, format!("{axis}_{v}"));
            assert_eq!(r.model, if axis == AblationAxis::Dr { "mcd" } else { "bnn" });
        }
        check_manifest(out.manifest(), dir.path());
    }
    cfg.ablation_values = vec![0.1];
    assert!(run_ablation(&cfg).unwrap_err().is_validation());
    cfg.ablation_axis = AblationAxis::N;
    cfg.ablation_values = vec![1.0, 2.5];
    assert!(run_ablation(&cfg).unwrap_err().is_validation());
}

#[test]
fn attack_clean_rows_match_binary_rows() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let gens = [GeneratorId::Fsh];
    let attack = run_attack(&tiny(a.path(), &gens)).unwrap();
    let binary = run_binary(&tiny(b.path(), &gens)).unwrap();
    for model in ["det", "bnn"] {
        let clean = attack.row("G-FSh", "clean", model).unwrap();
        let base = binary.row("G-FSh", "test", model).unwrap();
        assert_eq!((clean.accuracy, clean.pu, clean.mu), (base.accuracy, base.pu, base.mu));
        assert!(attack.row("G-FSh", "fgsm", model).is_some());
    }
    assert_eq!(attack.perturbations.len(), 1);
    assert!(attack.perturbations[0].1 <= 0.05);
    let pert = fs::read_to_string(a.path().join("perturbation.csv")).unwrap();
    assert_eq!(pert.lines().next(), Some(PERTURBATION_HEADER));
}

#[test]
fn maps_emit_three_maps_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        map_count: 2,
        ..tiny(dir.path(), &[GeneratorId::Nt])
    };
    let out = run_maps(&cfg, Some(&[0, 15])).unwrap();
    check_manifest(out.manifest(), dir.path());
    assert_eq!(out.maps.len(), 6);
    let pgm: Vec<_> = fs::read_dir(dir.path().join("maps"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pgm"))
        .collect();
    assert_eq!(pgm.len(), 6);
    for name in pgm {
        let img = image::open(dir.path().join("maps").join(&name)).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
    }
    let csv = fs::read_to_string(dir.path().join("maps.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(MAPS_HEADER));
    assert_eq!(out.maps[0].source, "real");

    let err = run_maps(&cfg, Some(&[10_000])).unwrap_err();
    assert!(err.is_validation() && err.to_string().contains("10000"));
    let mcd = ExperimentConfig { uq_method: UqMethod::McDropout, ..cfg };
    assert!(run_maps(&mcd, None).unwrap_err().is_validation());
}

#[test]
fn gen_data_writes_images_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_gen_data(&tiny(dir.path(), &[GeneratorId::Df])).unwrap();
    check_manifest(out.manifest(), dir.path());
    assert_eq!(out.manifest().files.len(), 21);
    let labels = uql::bench::read_labels(&dir.path().join("data/labels.csv")).unwrap();
    assert_eq!(labels.len(), 20);
}
