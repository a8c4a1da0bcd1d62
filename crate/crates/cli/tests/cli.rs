use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aop_core::aop::{DiscriminatorSpec, GeneratorSpec};
use aop_core::classifier::ClassifierSpec;
use aop_core::commands::provenance_of;
use aop_core::config::RunConfig;
use aop_core::image::Image;
use aop_core::report::MetricsReport;
use aop_core::synth::SplitCounts;

/// A run small enough to go through every command in seconds.
fn tiny_config(root: &Path) -> (RunConfig, PathBuf) {
    tiny_config_in(root, root)
}

/// Writes the config under `dir` while its corpus and outputs live under `root`.
fn tiny_config_in(dir: &Path, root: &Path) -> (RunConfig, PathBuf) {
    let mut cfg = RunConfig::desk();
    cfg.paths.corpus_dir = root.join("corpus");
    cfg.paths.out_dir = root.join("out");
    cfg.data.segmentation_size = 32;
    cfg.data.classification_size = 32;
    cfg.synth.image_size = 32;
    cfg.synth.per_class_counts = SplitCounts { training: 2, validation: 1, test: 1 };
    cfg.synth.segmentation_pairs = 10;
    cfg.aop.generator = GeneratorSpec { depth: 3, base_channels: 4, max_channels: 8 };
    cfg.aop.discriminator = DiscriminatorSpec { depth: 3, base_channels: 4, max_channels: 8 };
    cfg.aop.train.epochs = 2;
    cfg.aop.train.batch_size = 4;
    cfg.aop.inference.working_size = 32;
    cfg.classifier.spec = ClassifierSpec { input_size: 32, ..cfg.classifier.spec };
    cfg.classifier.train.epochs = 1;
    cfg.gradcam.images = 4;
    cfg.gradcam.overlays = 2;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    (cfg, path)
}

fn aop(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aop")).arg("--config").arg(config).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstdout {}\nstderr {}", out.status.code(), String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn csv_rows(path: &Path) -> (String, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_owned();
    (header, lines.map(|l| l.split(',').map(str::to_owned).collect()).collect())
}

#[test]
fn synth_gen_is_deterministic_and_creates_directories() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, config) = tiny_config_in(dir.path(), &dir.path().join("not").join("yet"));
    let first = aop(&config, &["synth-gen"]);
    ok(&first);
    let manifest = cfg.paths.corpus_dir.join("manifest.csv");
    assert!(manifest.is_file());
    assert_eq!(provenance_of(&manifest).unwrap(), Some(cfg.hash().unwrap()));
    let second = aop(&config, &["synth-gen"]);
    ok(&second);
    // stdout carries the manifest digest
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let (_, config) = tiny_config(dir.path());
    assert_eq!(aop(&config, &["train-aop", "--variant", "VAE"]).status.code(), Some(1));
    assert_eq!(aop(&config, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(aop(&dir.path().join("missing.toml"), &["synth-gen"]).status.code(), Some(1));
    std::fs::write(dir.path().join("bad.toml"), "[aop.train]\nlearning_rate = -1.0\n").unwrap();
    assert_eq!(aop(&dir.path().join("bad.toml"), &["synth-gen"]).status.code(), Some(1));
    let gpu = Command::new(env!("CARGO_BIN_EXE_aop"))
        .arg("--config")
        .arg(&config)
        .arg("synth-gen")
        .env("AOP_DEVICE", "quantum")
        .output()
        .unwrap();
    assert_eq!(gpu.status.code(), Some(1));
}

#[test]
fn comparison_without_artifacts_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let (_, config) = tiny_config(dir.path());
    let out = aop(&config, &["run-comparison"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("MAE_prob.safetensors"), "{err}");
}

#[test]
fn train_aop_writes_one_loss_row_per_epoch_and_resumes_numbering() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, config) = tiny_config(dir.path());
    ok(&aop(&config, &["synth-gen"]));
    ok(&aop(&config, &["train-aop", "--variant", "MAE", "--max-new-epochs", "1"]));
    let losses = cfg.paths.out_dir.join("aop/MAE_losses.csv");
    let (header, rows) = csv_rows(&losses);
    assert_eq!(header, "epoch,d_loss,g_adv,content_loss");
    assert_eq!(rows.len(), 1);
    ok(&aop(&config, &["train-aop", "--variant", "MAE", "--resume"]));
    let (_, resumed) = csv_rows(&losses);
    let epochs: Vec<&str> = resumed.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(epochs, ["1", "2"]);
    assert_eq!(resumed[0], rows[0]);

    // an uninterrupted run reaches the same final losses
    let other = dir.path().join("straight");
    ok(&aop(&config, &["--out", other.to_str().unwrap(), "train-aop", "--variant", "MAE"]));
    let (_, straight) = csv_rows(&other.join("aop/MAE_losses.csv"));
    assert_eq!(straight.len(), cfg.aop.train.epochs);
    for (a, b) in straight.iter().zip(&resumed) {
        for (x, y) in a.iter().zip(b) {
            assert!((x.parse::<f64>().unwrap() - y.parse::<f64>().unwrap()).abs() < 1e-6, "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn full_pipeline_through_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, config) = tiny_config(dir.path());
    ok(&aop(&config, &["synth-gen"]));
    for v in ["MAE_prob", "MAE", "SSIM"] {
        ok(&aop(&config, &["train-aop", "--variant", v]));
    }

    let seg = aop(&config, &["evaluate-seg"]);
    ok(&seg);
    let (header, rows) = csv_rows(&cfg.paths.out_dir.join("report/segmentation.csv"));
    assert_eq!(header, "variant,precision,recall,f1");
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["MAE_prob", "MAE", "SSIM"]);

    // pretreat: one output per input at the classification size, and a warning on reuse
    let input = cfg.paths.corpus_dir.join("classification/test");
    let treated = dir.path().join("treated");
    let ck = cfg.paths.out_dir.join("aop/SSIM.safetensors");
    let args = ["pretreat", "--checkpoint", ck.to_str().unwrap(), "--input", input.to_str().unwrap(), "--output", treated.to_str().unwrap()];
    ok(&aop(&config, &args));
    let inputs = aop_core::dataset::find_images(&input).unwrap();
    let outputs = aop_core::dataset::find_images(&treated).unwrap();
    assert_eq!(inputs.len(), outputs.len());
    assert!(outputs.iter().all(|p| Image::load(p).unwrap().dims() == (32, 32)));
    let twice = dir.path().join("twice");
    let again = aop(&config, &["pretreat", "--checkpoint", ck.to_str().unwrap(), "--input", treated.to_str().unwrap(), "--output", twice.to_str().unwrap()]);
    ok(&again);
    assert!(String::from_utf8_lossy(&again.stderr).contains("already pretreated"));

    ok(&aop(&config, &["train-classifier", "--arm", "raw"]));
    let (header, rows) = csv_rows(&cfg.paths.out_dir.join("classifier/raw_history.csv"));
    assert_eq!(header, "epoch,train_acc,val_acc,loss");
    assert_eq!(rows.len(), 1);

    ok(&aop(&config, &["run-comparison"]));
    let report_dir = cfg.paths.out_dir.join("report");
    let report = MetricsReport::load_json(&report_dir.join("metrics.json")).unwrap();
    assert_eq!(report.arms.len(), 4);
    assert_eq!(report.provenance.config_hash, cfg.hash().unwrap());
    let hash = &report.arms[0].classifier_hash;
    assert!(report.arms.iter().all(|a| &a.classifier_hash == hash));
    let tags: std::collections::BTreeSet<_> = report.arms.iter().map(|a| a.pretreat.clone()).collect();
    assert_eq!(tags.len(), 4);
    for a in &report.arms {
        assert_eq!(a.gap, a.accuracy.validation - a.accuracy.test);
        assert_eq!(a.confusion.len(), 3);
        assert_eq!(a.gradcam.unwrap().images, 4);
    }
    let (header, cells) = csv_rows(&report_dir.join("accuracy.csv"));
    assert_eq!(header, "arm,pretreat,training,validation,test,gap");
    assert_eq!(cells.len() * 3, 12);
    for name in ["accuracy.png", "gradcam_overlap.png", "confusion_raw_test.png", "confusion_SSIM_validation.png", "gradcam_overlap.csv"] {
        let path = report_dir.join(name);
        assert!(path.is_file(), "{name}");
        assert_eq!(provenance_of(&path).unwrap(), Some(cfg.hash().unwrap()), "{name}");
    }

    let cam = aop(&config, &["gradcam", "--arm", "SSIM"]);
    ok(&cam);
    let (header, rows) = csv_rows(&cfg.paths.out_dir.join("gradcam/overlap.csv"));
    assert_eq!(header, "arm,image,target_class,overlap,all_zero");
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r[0] == "AOP_SSIM"));
    assert_eq!(aop_core::dataset::find_images(&cfg.paths.out_dir.join("gradcam/SSIM")).unwrap().len(), 2);
}
