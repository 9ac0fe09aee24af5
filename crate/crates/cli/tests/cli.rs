use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use getam::label_completion::{PseudoLabel, SaliencyMap};
use getam::vit::VitModel;
use getam::Tensor;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_getam"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small train/eval datasets and a briefly trained checkpoint shared by the
/// pipeline tests.
struct World {
    _root: tempfile::TempDir,
    train: PathBuf,
    eval: PathBuf,
    run: PathBuf,
}

fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let train = root.path().join("train");
        let eval = root.path().join("eval");
        let run_dir = root.path().join("run");
        assert_eq!(code(&run(&["gen-data", "--out", s(&train), "--n-images", "60", "--seed", "0"])), 0);
        assert_eq!(code(&run(&["gen-data", "--out", s(&eval), "--n-images", "20", "--seed", "1"])), 0);
        let out = run(&[
            "train", "--dataset", s(&train), "--out", s(&run_dir), "--epochs", "8", "--phase1-epochs", "6", "--seed", "3",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        World {
            _root: root,
            train,
            eval,
            run: run_dir,
        }
    })
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic_and_prints_config() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let out = run(&["gen-data", "--out", s(&a), "--n-images", "8", "--seed", "5"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("# resolved configuration: gen-data"));
    assert!(stdout(&out).contains("n_images = 8"));
    assert_eq!(code(&run(&["gen-data", "--out", s(&b), "--n-images", "8", "--seed", "5"])), 0);
    let fa = files_under(&a);
    assert_eq!(fa.len(), 8 * 3 + 2);
    // config.txt records the differing --out path
    for f in fa.iter().filter(|f| !f.ends_with("config.txt")) {
        let g = b.join(f.strip_prefix(&a).unwrap());
        assert_eq!(fs::read(f).unwrap(), fs::read(&g).unwrap(), "{}", f.display());
    }
    assert!(fs::read_to_string(a.join("labels.csv")).unwrap().starts_with("image_id,labels"));
}

#[test]
fn unknown_flag_and_config_key_are_validation_errors() {
    let root = tempfile::tempdir().unwrap();
    let out = run(&["gen-data", "--out", s(&root.path().join("x")), "--colour", "red"]);
    assert_eq!(code(&out), 1);

    let cfg = root.path().join("cfg.txt");
    fs::write(&cfg, "n_images = 4\nbogus_key = 1\n").unwrap();
    let target = root.path().join("y");
    let out = run(&["gen-data", "--config", s(&cfg), "--out", s(&target)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("bogus_key"));
    assert!(!target.exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("cfg.txt");
    fs::write(&cfg, "n_images = 4\nseed = 9\n").unwrap();
    let target = root.path().join("d");
    let out = run(&["gen-data", "--config", s(&cfg), "--n-images", "3", "--out", s(&target)]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("n_images = 3"));
    assert!(stdout(&out).contains("seed = 9"));
    assert_eq!(fs::read_dir(target.join("images")).unwrap().count(), 3);
}

#[test]
fn missing_input_names_the_path_and_leaves_no_output() {
    let root = tempfile::tempdir().unwrap();
    let target = root.path().join("report");
    let out = run(&["eval", "--dataset", "/definitely/not/here", "--pred", "/nope", "--out", s(&target)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("/definitely/not/here"));
    assert!(!target.exists());
    assert_eq!(fs::read_dir(root.path()).unwrap().count(), 0, "no partial directory left behind");
}

#[test]
fn invalid_values_exit_one() {
    let w = world();
    let root = tempfile::tempdir().unwrap();
    let ckpt = w.run.join("checkpoint");
    for args in [
        vec!["attribute", "--dataset", s(&w.eval), "--out", "UNUSED", "--method", "lrp"],
        vec!["attribute", "--dataset", s(&w.eval), "--out", "UNUSED", "--fusion", "max"],
        vec!["pseudo-label", "--dataset", s(&w.eval), "--checkpoint", s(&ckpt), "--out", "UNUSED", "--alpha", "1.5"],
        vec!["pseudo-label", "--dataset", s(&w.eval), "--checkpoint", s(&ckpt), "--out", "UNUSED", "--gamma", "1"],
        vec!["train", "--dataset", s(&w.train), "--out", "UNUSED", "--epochs", "2", "--phase1-epochs", "3"],
    ] {
        let target = root.path().join("o");
        let args: Vec<&str> = args.iter().map(|a| if *a == "UNUSED" { s(&target) } else { a }).collect();
        let out = run(&args);
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
        assert!(!target.exists());
    }
}

#[test]
fn refuses_to_overwrite_nonempty_output() {
    let w = world();
    let out = run(&["gen-data", "--out", s(&w.train), "--n-images", "2"]);
    assert_eq!(code(&out), 1);
    assert!(w.train.join("labels.csv").exists());
}

#[test]
fn gradcheck_passes() {
    let root = tempfile::tempdir().unwrap();
    let target = root.path().join("gc");
    let out = run(&["gradcheck", "--seed", "7", "--out", s(&target)]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let table = fs::read_to_string(target.join("gradcheck.csv")).unwrap();
    assert!(table.lines().count() > 10);
    assert!(table.lines().skip(1).all(|l| l.ends_with(",PASS")));
    assert!(table.contains("A^0") && table.contains("A^1"));
}

#[test]
fn train_writes_checkpoint_metrics_and_is_reproducible() {
    let w = world();
    let metrics = fs::read_to_string(w.run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,iter,l_cls,l_seg,l_sal,total,pseudo_miou");
    assert_eq!(lines.len(), 9);
    assert!(lines[6].ends_with(','), "phase-1 rows leave pseudo_miou empty");
    assert!(!lines[7].ends_with(','));
    assert!(w.run.join("checkpoint/manifest.txt").exists());
    VitModel::load(&w.run.join("checkpoint")).unwrap();

    let root = tempfile::tempdir().unwrap();
    let again = root.path().join("run");
    let out = run(&[
        "train", "--dataset", s(&w.train), "--out", s(&again), "--epochs", "8", "--phase1-epochs", "6", "--seed", "3",
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(metrics, fs::read_to_string(again.join("metrics.csv")).unwrap());
}

#[test]
fn attribute_writes_named_maps_for_every_method() {
    let w = world();
    let root = tempfile::tempdir().unwrap();
    for method in ["getam", "gradcam", "cam-add", "cam-ignore"] {
        let target = root.path().join(method);
        let out = run(&[
            "attribute", "--dataset", s(&w.eval), "--checkpoint", s(&w.run.join("checkpoint")), "--out", s(&target), "--method",
            method,
        ]);
        assert_eq!(code(&out), 0, "{method}: {}", stderr(&out));
        let maps = files_under(&target.join("maps"));
        assert!(!maps.is_empty());
        for m in &maps {
            let name = m.file_name().unwrap().to_str().unwrap();
            assert!(name.ends_with(&format!("_{method}.gtt")), "{name}");
            let t = Tensor::read_gtt(m).unwrap();
            assert_eq!(t.shape(), &[4, 4]);
            assert!(t.data().iter().all(|&v| v >= 0.0));
            assert!(target.join("png").join(name.replace(".gtt", ".png")).exists());
        }
        assert_eq!(target.join("blocks").exists(), method == "getam");
    }
}

#[test]
fn getam_of_zero_head_is_zero() {
    let w = world();
    let root = tempfile::tempdir().unwrap();
    let mut model = VitModel::load(&w.run.join("checkpoint")).unwrap();
    for name in ["head.w", "head.b"] {
        model.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let ckpt = root.path().join("zero");
    model.save(&ckpt).unwrap();
    let target = root.path().join("maps");
    let out = run(&["attribute", "--method", "getam", "--dataset", s(&w.eval), "--checkpoint", s(&ckpt), "--out", s(&target)]);
    assert_eq!(code(&out), 0);
    for m in files_under(&target.join("maps")) {
        let t = Tensor::read_gtt(&m).unwrap();
        assert!(t.data().iter().all(|v| v.abs() < 1e-12), "{}", m.display());
    }
}

fn pseudo_label(alpha: &str, dir: &Path) {
    let w = world();
    let out = run(&[
        "pseudo-label", "--dataset", s(&w.eval), "--checkpoint", s(&w.run.join("checkpoint")), "--out", s(dir), "--alpha",
        alpha, "--dump-intermediate",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

/// Non-salient pixels labeled with a foreground class.
fn mined_pixels(dir: &Path) -> usize {
    let w = world();
    let mut mined = 0;
    for label in files_under(&dir.join("labels")) {
        let p = PseudoLabel::read_png(&label).unwrap();
        let sal = SaliencyMap::read_png(&w.eval.join("saliency").join(label.file_name().unwrap())).unwrap();
        mined += (0..p.data.len()).filter(|&i| !sal.is_salient(i) && p.data[i] != 0 && p.data[i] != 255).count();
    }
    mined
}

#[test]
fn alpha_one_mines_nothing() {
    let root = tempfile::tempdir().unwrap();
    let (strict, loose) = (root.path().join("a10"), root.path().join("a09"));
    pseudo_label("1.0", &strict);
    pseudo_label("0.9", &loose);
    assert_eq!(mined_pixels(&strict), 0);
    assert!(mined_pixels(&loose) > 0);
    for dir in [&strict, &loose] {
        assert_eq!(files_under(&dir.join("labels")).len(), 20);
        assert_eq!(files_under(&dir.join("pre_mining")).len(), 20);
        assert_eq!(files_under(&dir.join("post_mining")).len(), 20);
    }
    // before mining, nothing outside the saliency is foreground
    let w = world();
    for pre in files_under(&strict.join("pre_mining")) {
        let p = PseudoLabel::read_png(&pre).unwrap();
        let sal = SaliencyMap::read_png(&w.eval.join("saliency").join(pre.file_name().unwrap())).unwrap();
        assert!((0..p.data.len()).all(|i| sal.is_salient(i) || p.data[i] == 0));
    }
}

#[test]
fn eval_scores_ground_truth_perfectly_and_pseudo_labels_partially() {
    let w = world();
    let root = tempfile::tempdir().unwrap();
    let target = root.path().join("gt");
    let out = run(&["eval", "--dataset", s(&w.eval), "--pred", s(&w.eval.join("masks")), "--out", s(&target)]);
    assert_eq!(code(&out), 0);
    let report = fs::read_to_string(target.join("miou_report.csv")).unwrap();
    assert!(report.contains("mean,1.000000"), "{report}");

    let pl = root.path().join("pl");
    pseudo_label("0.9", &pl);
    for strict in [false, true] {
        let target = root.path().join(format!("pl_report_{strict}"));
        let mut args = vec!["eval", "--dataset", s(&w.eval), "--pred", s(&pl), "--out", s(&target)];
        if strict {
            args.push("--count-unknown-as-error");
        }
        assert_eq!(code(&run(&args)), 0);
        let report = fs::read_to_string(target.join("miou_report.csv")).unwrap();
        let mean: f64 = report
            .lines()
            .find_map(|l| l.strip_prefix("mean,"))
            .and_then(|r| r.split(',').next())
            .unwrap()
            .parse()
            .unwrap();
        assert!(mean > 0.0 && mean <= 1.0);
    }
}

#[test]
fn viz_renders_overlays_and_histogram_without_touching_maps() {
    let w = world();
    let root = tempfile::tempdir().unwrap();
    let maps = root.path().join("maps");
    let out = run(&["attribute", "--dataset", s(&w.eval), "--checkpoint", s(&w.run.join("checkpoint")), "--out", s(&maps)]);
    assert_eq!(code(&out), 0);
    let before: Vec<Vec<u8>> = files_under(&maps).iter().map(|f| fs::read(f).unwrap()).collect();

    let (a, b) = (root.path().join("viz_a"), root.path().join("viz_b"));
    for target in [&a, &b] {
        let out = run(&["viz", "--dataset", s(&w.eval), "--maps", s(&maps), "--out", s(target)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    assert!(a.join("fusion_histogram.png").exists());
    assert!(fs::read_to_string(a.join("fusion_stats.csv")).unwrap().starts_with("mode,"));
    let overlays = files_under(&a.join("overlays"));
    assert_eq!(overlays.len(), files_under(&maps.join("maps")).len());
    let img = image::open(&overlays[0]).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
    for f in files_under(&a) {
        let g = b.join(f.strip_prefix(&a).unwrap());
        assert_eq!(fs::read(&f).unwrap(), fs::read(&g).unwrap(), "viz output differs: {}", f.display());
    }
    let after: Vec<Vec<u8>> = files_under(&maps).iter().map(|f| fs::read(f).unwrap()).collect();
    assert_eq!(before, after);
}
