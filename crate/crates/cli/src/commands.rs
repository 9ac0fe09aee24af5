use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use getam::attribution::{attribute, fusion_distribution_stats, ClassAttentionMap, FusionMode, Method, MIN_STATS_IMAGES};
use getam::data::{generate_dataset_sized, read_dataset, read_rgb_png, Confusion, QualityReport, Sample};
use getam::gradcheck::run_model_suite;
use getam::kv::KeyValues;
use getam::label_completion::{complete_labels_staged, CompletionConfig, MiningConfig, PseudoLabel};
use getam::training::{run_training, save_run, TrainConfig};
use getam::vit::{ModelConfig, VitModel};
use getam::{viz, Tensor};

use crate::settings::{Settings, UNSET};
use crate::staging::Staging;
use crate::{AttributionArgs, CliError, Command, CompletionArgs, Shared};

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData {
            shared,
            n_images,
            classes,
            nonsalient_fraction,
            image_size,
        } => {
            let mut s = Settings::new(defaults(&[
                ("out", UNSET.into()),
                ("seed", "0".into()),
                ("n_images", "200".into()),
                ("classes", "3".into()),
                ("nonsalient_fraction", "0.2".into()),
                ("image_size", getam::data::DEFAULT_IMAGE_SIZE.to_string()),
            ]));
            layer_shared(&mut s, &shared)?;
            s.flag("n_images", n_images)?;
            s.flag("classes", classes)?;
            s.flag("nonsalient_fraction", nonsalient_fraction)?;
            s.flag("image_size", image_size)?;
            s.print("gen-data");
            gen_data(&s)
        }
        Command::Train {
            shared,
            dataset,
            train,
            completion,
        } => {
            let model = ModelConfig::default();
            let mut d = vec![
                ("dataset", UNSET.to_string()),
                ("out", UNSET.into()),
                ("dim", model.dim.to_string()),
                ("depth", model.depth.to_string()),
                ("heads", model.heads.to_string()),
                ("patch_size", model.patch_size.to_string()),
            ];
            let train_kv = TrainConfig::default().to_kv();
            d.extend(train_kv.iter().map(|(k, v)| (k, v.to_string())));
            let mut s = Settings::new(defaults(&d));
            layer_shared(&mut s, &shared)?;
            s.flag("dataset", dataset.dataset.map(display))?;
            s.flag("epochs", train.epochs)?;
            s.flag("phase1_epochs", train.phase1_epochs)?;
            s.flag("lr", train.lr)?;
            s.flag("momentum", train.momentum)?;
            s.flag("sal_weight", train.sal_weight)?;
            s.flag("batch_size", train.batch_size)?;
            s.flag("dim", train.dim)?;
            s.flag("depth", train.depth)?;
            s.flag("heads", train.heads)?;
            s.flag("patch_size", train.patch_size)?;
            layer_completion(&mut s, &completion)?;
            s.print("train");
            train_cmd(&s)
        }
        Command::Attribute {
            shared,
            dataset,
            checkpoint,
            attribution,
            all_classes,
        } => {
            let mut s = Settings::new(defaults(&[
                ("dataset", UNSET.into()),
                ("checkpoint", UNSET.into()),
                ("out", UNSET.into()),
                ("seed", "0".into()),
                ("method", Method::Getam.to_string()),
                ("fusion", FusionMode::Sum.to_string()),
                ("all_classes", "false".into()),
            ]));
            layer_shared(&mut s, &shared)?;
            s.flag("dataset", dataset.dataset.map(display))?;
            s.flag("checkpoint", checkpoint.checkpoint.map(display))?;
            layer_attribution(&mut s, &attribution)?;
            s.flag("all_classes", all_classes.then_some(true))?;
            s.print("attribute");
            attribute_cmd(&s)
        }
        Command::PseudoLabel {
            shared,
            dataset,
            checkpoint,
            attribution,
            completion,
            dump_intermediate,
        } => {
            let mut d = vec![
                ("dataset", UNSET.to_string()),
                ("checkpoint", UNSET.into()),
                ("out", UNSET.into()),
                ("seed", "0".into()),
                ("method", Method::Getam.to_string()),
                ("fusion", FusionMode::Sum.to_string()),
                ("dump_intermediate", "false".into()),
            ];
            d.extend(completion_defaults());
            let mut s = Settings::new(defaults(&d));
            layer_shared(&mut s, &shared)?;
            s.flag("dataset", dataset.dataset.map(display))?;
            s.flag("checkpoint", checkpoint.checkpoint.map(display))?;
            layer_attribution(&mut s, &attribution)?;
            layer_completion(&mut s, &completion)?;
            s.flag("dump_intermediate", dump_intermediate.then_some(true))?;
            s.print("pseudo-label");
            pseudo_label_cmd(&s)
        }
        Command::Eval {
            shared,
            dataset,
            pred,
            count_unknown_as_error,
        } => {
            let mut s = Settings::new(defaults(&[
                ("dataset", UNSET.into()),
                ("pred", UNSET.into()),
                ("out", UNSET.into()),
                ("seed", "0".into()),
                ("count_unknown_as_error", "false".into()),
            ]));
            layer_shared(&mut s, &shared)?;
            s.flag("dataset", dataset.dataset.map(display))?;
            s.flag("pred", pred.map(display))?;
            s.flag("count_unknown_as_error", count_unknown_as_error.then_some(true))?;
            s.print("eval");
            eval_cmd(&s)
        }
        Command::Viz { shared, dataset, maps } => {
            let mut s = Settings::new(defaults(&[
                ("dataset", UNSET.into()),
                ("maps", UNSET.into()),
                ("out", UNSET.into()),
                ("seed", "0".into()),
            ]));
            layer_shared(&mut s, &shared)?;
            s.flag("dataset", dataset.dataset.map(display))?;
            s.flag("maps", maps.map(display))?;
            s.print("viz");
            viz_cmd(&s)
        }
        Command::Gradcheck { shared } => {
            let mut s = Settings::new(defaults(&[("out", UNSET.into()), ("seed", "7".into())]));
            layer_shared(&mut s, &shared)?;
            s.print("gradcheck");
            gradcheck_cmd(&s)
        }
    }
}

fn defaults(pairs: &[(&str, String)]) -> KeyValues {
    let mut kv = KeyValues::new();
    for (k, v) in pairs {
        kv.set(k, v);
    }
    kv
}

fn display(p: PathBuf) -> String {
    p.display().to_string()
}

fn layer_shared(s: &mut Settings, shared: &Shared) -> Result<(), CliError> {
    s.apply_file(shared.config.as_deref())?;
    s.flag("seed", shared.seed)?;
    s.flag("out", shared.out.clone().map(display))
}

fn completion_defaults() -> Vec<(&'static str, String)> {
    let c = CompletionConfig::default();
    vec![
        ("alpha", c.mining.alpha.to_string()),
        ("gamma", c.mining.gamma.to_string()),
        ("pamr", c.pamr.to_string()),
        ("pamr_iters", c.pamr_iters.to_string()),
    ]
}

fn layer_completion(s: &mut Settings, c: &CompletionArgs) -> Result<(), CliError> {
    s.flag("alpha", c.alpha)?;
    s.flag("gamma", c.gamma)?;
    s.flag("pamr", c.no_pamr.then_some(false))?;
    s.flag("pamr_iters", c.pamr_iters)
}

fn layer_attribution(s: &mut Settings, a: &AttributionArgs) -> Result<(), CliError> {
    s.flag("method", a.method.clone())?;
    s.flag("fusion", a.fusion.clone())
}

fn completion_config(s: &Settings) -> Result<CompletionConfig, CliError> {
    let cfg = CompletionConfig {
        mining: MiningConfig {
            alpha: s.get("alpha")?,
            gamma: s.get("gamma")?,
        },
        pamr: s.get("pamr")?,
        pamr_iters: s.get("pamr_iters")?,
    };
    cfg.mining.validate()?;
    Ok(cfg)
}

fn load_dataset(s: &Settings) -> Result<Vec<Sample>, CliError> {
    let dir = s.path("dataset")?;
    let samples = read_dataset(&dir)?;
    if samples.is_empty() {
        return Err(CliError::Validation(format!("dataset {} has no images", dir.display())));
    }
    Ok(samples)
}

/// Largest class id present in the dataset's image-level labels.
fn dataset_classes(samples: &[Sample]) -> Result<usize, CliError> {
    samples
        .iter()
        .flat_map(|s| s.labels.iter().copied())
        .max()
        .ok_or_else(|| CliError::Validation("dataset has no image-level labels".into()))
}

fn image_size(samples: &[Sample]) -> Result<usize, CliError> {
    let shape = samples[0].image.shape();
    if shape[1] != shape[2] {
        return Err(CliError::Validation(format!("images must be square, got {}×{}", shape[1], shape[2])));
    }
    Ok(shape[1])
}

fn load_model(s: &Settings) -> Result<VitModel, CliError> {
    let dir = s.path("checkpoint")?;
    Ok(VitModel::load(&dir)?)
}

fn gen_data(s: &Settings) -> Result<(), CliError> {
    let out = s.path("out")?;
    let samples = generate_dataset_sized(
        s.get("n_images")?,
        s.get("classes")?,
        s.get("seed")?,
        s.get("nonsalient_fraction")?,
        s.get("image_size")?,
    )?;
    let stage = Staging::new(&out)?;
    getam::data::write_dataset(stage.path(), &samples)?;
    s.kv().save(&stage.path().join("config.txt"))?;
    stage.commit()?;
    println!("wrote {} images to {}", samples.len(), out.display());
    Ok(())
}

fn train_cmd(s: &Settings) -> Result<(), CliError> {
    let out = s.path("out")?;
    let samples = load_dataset(s)?;
    let mut cfg = TrainConfig::default();
    cfg.apply_kv(s.kv())?;
    cfg.validate()?;
    let model_cfg = ModelConfig {
        image_size: image_size(&samples)?,
        patch_size: s.get("patch_size")?,
        dim: s.get("dim")?,
        depth: s.get("depth")?,
        heads: s.get("heads")?,
        num_classes: dataset_classes(&samples)?,
        seed: cfg.seed,
    };
    let mut model = VitModel::new(model_cfg)?;
    let stage = Staging::new(&out)?;
    let run = run_training(&mut model, &samples, &cfg)?;
    save_run(&model, &run, stage.path())?;
    s.kv().save(&stage.path().join("config.txt"))?;
    stage.commit()?;
    if let Some(last) = run.epochs.last() {
        println!(
            "trained {} epochs ({} updates, {} pseudo labels); final l_cls {:.6}, total {:.6}",
            run.epochs.len(),
            last.iter,
            run.pseudo_labels,
            last.l_cls,
            last.total
        );
    }
    println!("checkpoint: {}", out.join("checkpoint").display());
    Ok(())
}

fn map_stem(id: &str, class_id: usize, method: Method) -> String {
    format!("{id}_{class_id}_{method}")
}

fn attribute_cmd(s: &Settings) -> Result<(), CliError> {
    let out = s.path("out")?;
    let samples = load_dataset(s)?;
    let method: Method = s.get::<String>("method")?.parse()?;
    let fusion: FusionMode = s.get::<String>("fusion")?.parse()?;
    let all_classes: bool = s.get("all_classes")?;
    let model = match s.optional_path("checkpoint")? {
        Some(_) => load_model(s)?,
        None => {
            log::warn!("no checkpoint given; attributing an untrained model seeded with {}", s.get::<u64>("seed")?);
            VitModel::new(ModelConfig {
                image_size: image_size(&samples)?,
                num_classes: dataset_classes(&samples)?,
                seed: s.get("seed")?,
                ..ModelConfig::default()
            })?
        }
    };
    let stage = Staging::new(&out)?;
    let mut written = 0usize;
    for sample in &samples {
        let classes: Vec<usize> = if all_classes {
            (1..=model.config().num_classes).collect()
        } else {
            sample.label_vec()
        };
        for a in attribute(&model, &sample.image, &classes, method, fusion)? {
            let stem = map_stem(&sample.id, a.map.class_id, method);
            a.map.map.write_gtt(&stage.path().join("maps").join(format!("{stem}.gtt")))?;
            viz::write_map_png(&a.map.map, &stage.path().join("png").join(format!("{stem}.png")))?;
            for (b, block) in a.blocks.iter().enumerate() {
                block.map.write_gtt(&stage.path().join("blocks").join(format!("{stem}_b{b}.gtt")))?;
            }
            written += 1;
        }
    }
    s.kv().save(&stage.path().join("config.txt"))?;
    stage.commit()?;
    println!("wrote {written} {method} maps to {}", out.display());
    Ok(())
}

fn pseudo_label_cmd(s: &Settings) -> Result<(), CliError> {
    let out = s.path("out")?;
    let samples = load_dataset(s)?;
    let model = load_model(s)?;
    let method: Method = s.get::<String>("method")?.parse()?;
    let fusion: FusionMode = s.get::<String>("fusion")?.parse()?;
    let completion = completion_config(s)?;
    let dump: bool = s.get("dump_intermediate")?;
    let num_classes = model.config().num_classes;
    let stage = Staging::new(&out)?;
    let mut confusion = Confusion::new(num_classes + 1);
    for sample in &samples {
        let maps: Vec<ClassAttentionMap> = attribute(&model, &sample.image, &sample.label_vec(), method, fusion)?
            .into_iter()
            .map(|a| a.map)
            .collect();
        let stages = complete_labels_staged(&maps, num_classes, &sample.saliency, &sample.image, &completion)?;
        let file = format!("{}.png", sample.id);
        stages.labels.write_png(&stage.path().join("labels").join(&file))?;
        if dump {
            stages.pre_mining.write_png(&stage.path().join("pre_mining").join(&file))?;
            stages.labels.write_png(&stage.path().join("post_mining").join(&file))?;
        }
        confusion.add(&stages.labels, &sample.gt_mask)?;
    }
    s.kv().save(&stage.path().join("config.txt"))?;
    stage.commit()?;
    let report = confusion.miou(false);
    println!(
        "wrote {} pseudo labels to {}; mIoU against ground truth {:.4}",
        samples.len(),
        out.join("labels").display(),
        report.mean
    );
    Ok(())
}

/// Accepts either a directory of label PNGs or a `pseudo-label` output.
fn label_dir(pred: &Path) -> PathBuf {
    let nested = pred.join("labels");
    if nested.is_dir() {
        nested
    } else {
        pred.to_path_buf()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn render_report(report: &QualityReport) -> String {
    let mut csv = String::from("class,iou,precision,recall\n");
    for c in 0..report.miou.per_class.len() {
        let _ = writeln!(
            csv,
            "{c},{},{},{}",
            fmt_opt(report.miou.per_class[c]),
            fmt_opt(report.precision[c]),
            fmt_opt(report.recall[c])
        );
    }
    let _ = writeln!(csv, "mean,{:.6},,", report.miou.mean);
    let _ = writeln!(csv, "unknown_fraction,{:.6},,", report.unknown_fraction);
    csv
}

fn eval_cmd(s: &Settings) -> Result<(), CliError> {
    let out = s.path("out")?;
    let samples = load_dataset(s)?;
    let pred_dir = label_dir(&s.path("pred")?);
    let strict: bool = s.get("count_unknown_as_error")?;
    let mut confusion = Confusion::new(dataset_classes(&samples)? + 1);
    for sample in &samples {
        let pred = PseudoLabel::read_png(&pred_dir.join(format!("{}.png", sample.id)))?;
        confusion.add(&pred, &sample.gt_mask)?;
    }
    let report = QualityReport::from_confusion(&confusion, strict);
    if !report.miou.defined {
        log::warn!("no class is defined in prediction or ground truth; mIoU reported as 0");
    }
    let stage = Staging::new(&out)?;
    fs::write(stage.path().join("miou_report.csv"), render_report(&report))
        .map_err(|e| getam::Error::Io { path: out.join("miou_report.csv"), source: e })?;
    s.kv().save(&stage.path().join("config.txt"))?;
    stage.commit()?;
    print!("{}", render_report(&report));
    Ok(())
}

fn read_gtt_dir(dir: &Path) -> Result<Vec<(String, Tensor)>, CliError> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    let entries = fs::read_dir(dir).map_err(|e| getam::Error::Io { path: dir.into(), source: e })?;
    for entry in entries {
        let path = entry.map_err(|e| getam::Error::Io { path: dir.into(), source: e })?.path();
        if path.extension().is_some_and(|e| e == "gtt") {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.push((stem, Tensor::read_gtt(&path)?));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Splits `{image_id}_{class_id}_{method}` from the right.
fn parse_map_stem(stem: &str) -> Option<(&str, usize, &str)> {
    let mut parts = stem.rsplitn(3, '_');
    let method = parts.next()?;
    let class_id = parts.next()?.parse().ok()?;
    Some((parts.next()?, class_id, method))
}

fn viz_cmd(s: &Settings) -> Result<(), CliError> {
    let out = s.path("out")?;
    let maps_dir = s.path("maps")?;
    let dataset = s.path("dataset")?;
    let maps = read_gtt_dir(&maps_dir.join("maps"))?;
    if maps.is_empty() {
        return Err(CliError::Validation(format!("no .gtt maps under {}", maps_dir.join("maps").display())));
    }
    let stage = Staging::new(&out)?;
    let mut images: BTreeMap<String, Tensor> = BTreeMap::new();
    for (stem, map) in &maps {
        let (id, _, _) = parse_map_stem(stem)
            .ok_or_else(|| CliError::Validation(format!("unexpected map file name `{stem}.gtt`")))?;
        if !images.contains_key(id) {
            images.insert(id.to_string(), read_rgb_png(&dataset.join("images").join(format!("{id}.png")))?);
        }
        let image = &images[id];
        let (h, w) = (image.shape()[1], image.shape()[2]);
        viz::save_png(&viz::overlay(image, map)?, &stage.path().join("overlays").join(format!("{stem}.png")))?;
        viz::save_png(&viz::heatmap(map, h, w)?, &stage.path().join("heatmaps").join(format!("{stem}.png")))?;
    }

    // Block maps grouped per (image, class) feed the fusion histogram.
    let mut groups: BTreeMap<String, Vec<(usize, Tensor)>> = BTreeMap::new();
    for (stem, map) in read_gtt_dir(&maps_dir.join("blocks"))? {
        let Some((head, block)) = stem.rsplit_once("_b") else { continue };
        let Ok(block) = block.parse::<usize>() else { continue };
        groups.entry(head.to_string()).or_default().push((block, map));
    }
    if groups.len() >= MIN_STATS_IMAGES {
        let per_image: Vec<Vec<ClassAttentionMap>> = groups
            .into_iter()
            .map(|(head, mut blocks)| {
                blocks.sort_by_key(|(b, _)| *b);
                let class_id = parse_map_stem(&head).map(|p| p.1).unwrap_or(0);
                blocks
                    .into_iter()
                    .map(|(_, map)| ClassAttentionMap {
                        class_id,
                        map,
                        normalized: false,
                    })
                    .collect()
            })
            .collect();
        let stats = FusionMode::ALL
            .iter()
            .map(|&m| fusion_distribution_stats(&per_image, m))
            .collect::<Result<Vec<_>, _>>()?;
        viz::save_png(&viz::fusion_histogram(&stats)?, &stage.path().join("fusion_histogram.png"))?;
        let mut csv = String::from("mode,suppressed_mass,mean,std,histogram\n");
        for st in &stats {
            let hist: Vec<String> = st.histogram.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(csv, "{},{:.6},{:.6},{:.6},{}", st.mode, st.suppressed_mass, st.mean, st.std, hist.join(" "));
        }
        fs::write(stage.path().join("fusion_stats.csv"), &csv)
            .map_err(|e| getam::Error::Io { path: out.join("fusion_stats.csv"), source: e })?;
        print!("{csv}");
    } else {
        log::warn!(
            "fusion histogram skipped: {} (image, class) block groups found, {MIN_STATS_IMAGES} needed; run `attribute --method getam` first",
            groups.len()
        );
    }
    stage.commit()?;
    println!("wrote {} overlays to {}", maps.len(), out.join("overlays").display());
    Ok(())
}

fn gradcheck_cmd(s: &Settings) -> Result<(), CliError> {
    let seed: u64 = s.get("seed")?;
    let started = std::time::Instant::now();
    let outcomes = run_model_suite(seed)?;
    let mut table = String::from("check,max_rel_error,tolerance,result\n");
    for o in &outcomes {
        let verdict = if o.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(table, "{},{:.3e},{:.0e},{verdict}", o.name, o.report.max_rel_error, o.tolerance);
    }
    print!("{table}");
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    println!("{} checks, {failed} failed, {:.1}s", outcomes.len(), started.elapsed().as_secs_f64());
    if let Some(out) = s.optional_path("out")? {
        let stage = Staging::new(&out)?;
        fs::write(stage.path().join("gradcheck.csv"), &table)
            .map_err(|e| getam::Error::Io { path: out.join("gradcheck.csv"), source: e })?;
        stage.commit()?;
    }
    if failed > 0 {
        return Err(CliError::Internal(format!("{failed} gradient checks exceeded tolerance")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_stems_round_trip() {
        let stem = map_stem("img_0003", 2, Method::CamIgnore);
        assert_eq!(stem, "img_0003_2_cam-ignore");
        assert_eq!(parse_map_stem(&stem), Some(("img_0003", 2, "cam-ignore")));
        assert_eq!(parse_map_stem("nounderscore"), None);
        assert_eq!(parse_map_stem("a_x_getam"), None);
    }

    #[test]
    fn report_lists_every_class_then_summary() {
        let mut c = Confusion::new(2);
        let gt = PseudoLabel { height: 1, width: 2, data: vec![0, 1] };
        c.add(&gt, &gt).unwrap();
        let csv = render_report(&QualityReport::from_confusion(&c, false));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,iou,precision,recall");
        assert_eq!(lines[1], "0,1.000000,1.000000,1.000000");
        assert_eq!(lines[3], "mean,1.000000,,");
        assert_eq!(lines[4], "unknown_fraction,0.000000,,");
    }
}
