use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use fooling::data::{build_composite_dataset, glyph_dataset, load_image, write_idx, Composite, Dataset, ImageDirOptions};
use fooling::fooling::{
    argmax, build_frame_mask, finetune_with, train_classifier, FoolError, FoolMethod, FoolingConfig, LogRow, LrSchedule,
    TrainConfig,
};
use fooling::interpreters::{heatmaps, InterpreterKind, InterpreterSpec};
use fooling::metrics::{
    accuracy, aopc_curve, gaussian_perturb_probe, test_losses, write_records_csv, AopcConfig, AopcOrdering, FsrSpec,
    Report, TestLossExtras,
};
use fooling::model::{ArchDescriptor, Model};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{usage, CliError};
use crate::export::{render_heatmap, Style};
use crate::io::{ensure_dir, guard_output, load_data, load_model, save_model, write_idx_images, LoadedModel};
use crate::manifest::{manifest_beside, write_file, RunManifest};

fn need<T>(v: Option<T>, flag: &str) -> Result<T, CliError> {
    v.ok_or_else(|| usage(format!("missing required flag --{flag}")))
}

fn parse_method(s: &str) -> Result<FoolMethod, CliError> {
    s.parse().map_err(|_| usage(format!("unknown method `{s}` (location, topk, centermass, active)")))
}

fn parse_interpreter(s: &str) -> Result<InterpreterKind, CliError> {
    s.parse().map_err(|e: fooling::interpreters::InterpError| usage(e.to_string()))
}

fn spec_for(m: &LoadedModel, kind: &str, target: &Option<String>) -> Result<InterpreterSpec, CliError> {
    let kind = parse_interpreter(kind)?;
    let target = match target {
        Some(t) => t.clone(),
        None => m.desc().default_target().unwrap_or_default().to_string(),
    };
    let spec = InterpreterSpec::new(kind, target);
    spec.validate().map_err(|e| usage(e.to_string()))?;
    Ok(spec)
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize), CliError> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--input expects C,H,W, got `{s}`")))?;
    match v[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(usage(format!("--input expects C,H,W, got `{s}`"))),
    }
}

/// `path` with `suffix` appended to the file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iteration,loss_total,loss_ce,loss_fool,train_acc_probe\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.iteration, r.loss_total, r.loss_ce, r.loss_fool, r.train_acc_probe);
    }
    s
}

fn json_bytes(v: &impl Serialize) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn print_json(v: &Value) {
    println!("{v}");
}

/// Writes `name` under `dir` and records it in the manifest.
fn emit(dir: &Path, name: &str, bytes: &[u8], manifest: &mut RunManifest) -> Result<PathBuf, CliError> {
    let p = dir.join(name);
    write_file(&p, bytes)?;
    manifest.output(&p)?;
    Ok(p)
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SynthArgs {
    /// Training images [default: 4000]
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Validation images [default: 1000]
    #[arg(long)]
    pub n_val: Option<usize>,
    /// Image side in pixels [default: 28]
    #[arg(long)]
    pub size: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let out = need(a.out.clone(), "out")?;
    let (n_train, n_val) = (a.n_train.unwrap_or(4000), a.n_val.unwrap_or(1000));
    let (size, seed) = (a.size.unwrap_or(28), a.seed.unwrap_or(1));
    let all = glyph_dataset(n_train + n_val, size, size, seed).map_err(|e| usage(e.to_string()))?;
    let (train, val) = all.split_at(n_train);
    ensure_dir(&out)?;
    let mut m = RunManifest::new("synth", &a)?;
    m.seeds.insert("seed".into(), seed);
    for (split, ds) in [("train", &train), ("val", &val)] {
        let (i, l) = (out.join(format!("{split}-images.idx")), out.join(format!("{split}-labels.idx")));
        write_idx(ds, &i, &l)?;
        m.output(&i)?;
        m.output(&l)?;
    }
    m.write(&out.join("manifest.json"))?;
    print_json(&json!({ "train": n_train, "val": n_val, "size": size }));
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    /// Training data: IDX image file, IDX directory or class-directory tree
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `small` or a path to an architecture descriptor [default: small]
    #[arg(long)]
    pub arch: Option<String>,
    /// Image shape C,H,W for class-directory data [default: 1,28,28]
    #[arg(long)]
    pub input: Option<String>,
    /// [default: 2]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 0.02]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// [default: 32]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Seeds initialization and batch order [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn train(mut a: TrainArgs) -> Result<(), CliError> {
    let data_path = need(a.data.clone(), "data")?;
    let out = need(a.out.clone(), "out")?;
    let arch = a.arch.get_or_insert_with(|| "small".into()).clone();
    let shape = parse_shape(a.input.get_or_insert_with(|| "1,28,28".into()))?;
    let cfg = TrainConfig {
        epochs: *a.epochs.get_or_insert(2),
        lr: *a.lr.get_or_insert(0.02),
        momentum: *a.momentum.get_or_insert(0.9),
        batch_size: *a.batch.get_or_insert(32),
        seed: *a.seed.get_or_insert(0),
    };
    if !(cfg.lr > 0.0) || cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(usage("need lr > 0, batch >= 1 and momentum in [0, 1)"));
    }
    let raw = load_data(&data_path, shape, 2)?;
    if raw.labels().is_none() {
        return Err(usage(format!("{} has no labels", data_path.display())));
    }
    let [_, c, h, w] = raw.dims();
    let mut desc = if arch == "small" {
        ArchDescriptor::small_net(c, h, w, raw.classes())
    } else {
        let text = crate::io::read_input(Path::new(&arch))?;
        ArchDescriptor::parse(&String::from_utf8_lossy(&text))?
    };
    desc.normalization = Some(raw.normalization_stats());
    desc.validate()?;
    guard_output(&out, &[&data_path])?;
    let stats = desc.normalization.clone().expect("set above");
    let model = Model::build(desc)?;
    let data = raw.normalized(&stats)?;
    model.check_input(&data.dims())?;
    let p0 = model.init_params::<f32>(cfg.seed);
    log::info!("training {} epochs on {} samples", cfg.epochs, data.len());
    let (params, log_rows) = train_classifier(&model, &p0, &data, &cfg)?;
    let acc = accuracy(&model, &params, &data, 1, None)?;
    save_model(&out, &params, model.desc())?;
    let log_path = sibling(&out, ".log.csv");
    write_file(&log_path, log_csv(&log_rows).as_bytes())?;
    let mut m = RunManifest::new("train", &a)?;
    m.seeds.insert("seed".into(), cfg.seed);
    m.dataset("data", raw.fingerprint());
    m.output(&out)?;
    m.output(&log_path)?;
    m.notes.insert("train_accuracy".into(), json!(acc));
    m.write(&manifest_beside(&out))?;
    print_json(&json!({ "checkpoint": out, "train_accuracy": acc }));
    Ok(())
}

// ---------------------------------------------------------------- fool

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FoolArgs {
    /// Checkpoint to fine-tune (left untouched)
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Labeled data for the classification term
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// location, topk, centermass or active
    #[arg(long)]
    pub method: Option<String>,
    /// Interpreter whose heatmaps are penalized [default: gradcam]
    #[arg(long)]
    pub interpreter: Option<String>,
    /// Target layer [default: the checkpoint's first target]
    #[arg(long)]
    pub target: Option<String>,
    /// Penalty weight [default: per method]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// [default: per method]
    #[arg(long)]
    pub lr: Option<f64>,
    /// constant or linear (decay to zero) [default: linear]
    #[arg(long)]
    pub schedule: Option<String>,
    /// [default: 300]
    #[arg(long)]
    pub iters: Option<usize>,
    /// Top-k share in percent [default: 10]
    #[arg(long)]
    pub k: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub c1: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    pub c2: Option<usize>,
    /// [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// [default: 32]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Composite images for active fooling
    #[arg(long)]
    pub fool_data: Option<PathBuf>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fooled checkpoint path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn schedule_name(s: LrSchedule) -> &'static str {
    match s {
        LrSchedule::Constant => "constant",
        LrSchedule::Linear => "linear",
    }
}

pub fn fool(mut a: FoolArgs) -> Result<(), CliError> {
    let ckpt = need(a.ckpt.clone(), "ckpt")?;
    let data_path = need(a.data.clone(), "data")?;
    let out = need(a.out.clone(), "out")?;
    let method = parse_method(&need(a.method.clone(), "method")?)?;
    let m = load_model(&ckpt)?;
    let spec = spec_for(&m, a.interpreter.get_or_insert_with(|| "gradcam".into()), &a.target)?;
    a.target = Some(spec.target_layer.clone());
    let (lambda, lr) = method.default_strength();
    let mut cfg = FoolingConfig::new(method, spec);
    cfg.lambda = *a.lambda.get_or_insert(lambda);
    cfg.lr = *a.lr.get_or_insert(lr);
    cfg.schedule = match a.schedule.get_or_insert_with(|| schedule_name(cfg.schedule).into()).as_str() {
        "constant" => LrSchedule::Constant,
        "linear" => LrSchedule::Linear,
        other => return Err(usage(format!("unknown schedule `{other}` (constant or linear)"))),
    };
    cfg.iterations = *a.iters.get_or_insert(cfg.iterations);
    cfg.k_percent = *a.k.get_or_insert(cfg.k_percent);
    cfg.c1 = *a.c1.get_or_insert(cfg.c1);
    cfg.c2 = *a.c2.get_or_insert(cfg.c2);
    cfg.momentum = *a.momentum.get_or_insert(cfg.momentum);
    cfg.batch_size = *a.batch.get_or_insert(cfg.batch_size);
    cfg.seed = *a.seed.get_or_insert(cfg.seed);
    cfg.validate(m.model.classes()).map_err(|e| usage(e.to_string()))?;
    let mut inputs: Vec<&Path> = vec![&ckpt, &data_path];
    if let Some(f) = &a.fool_data {
        inputs.push(f);
    }
    guard_output(&out, &inputs)?;
    let data = m.labeled_data(&data_path)?;
    let fool_data = match (&a.fool_data, method) {
        (Some(p), _) => Some(m.data(p)?),
        (None, FoolMethod::Active) => return Err(usage("active fooling needs --fool-data")),
        (None, _) => None,
    };
    log::info!("fooling: {} via {}, λ {} lr {} for {} iterations", method, cfg.interpreter.kind, cfg.lambda, cfg.lr, cfg.iterations);
    let result = finetune_with(&m.model, &m.params, &data, fool_data.as_ref(), &cfg, |e, _| log::debug!("epoch {e}"));
    let (params, rows) = match result {
        Ok(v) => v,
        Err(FoolError::Diverged { iteration, reason, last_good }) => {
            let keep = sibling(&out, ".last-good");
            save_model(&keep, &last_good, m.desc())?;
            return Err(FoolError::Diverged { iteration, reason: format!("{reason}; last good parameters in {}", keep.display()), last_good }.into());
        }
        Err(e) => return Err(e.into()),
    };
    save_model(&out, &params, m.desc())?;
    let log_path = sibling(&out, ".log.csv");
    write_file(&log_path, log_csv(&rows).as_bytes())?;
    let mut man = RunManifest::new("fool", &a)?;
    man.seeds.insert("seed".into(), cfg.seed);
    man.checkpoint("ckpt", &ckpt)?;
    man.dataset("data", data.fingerprint());
    if let Some(f) = &fool_data {
        man.dataset("fool-data", f.fingerprint());
    }
    man.output(&out)?;
    man.output(&log_path)?;
    man.write(&manifest_beside(&out))?;
    let last = rows.last();
    print_json(&json!({
        "checkpoint": out,
        "iterations": rows.len(),
        "final_loss_fool": last.map(|r| r.loss_fool),
        "final_loss_ce": last.map(|r| r.loss_ce),
    }));
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Restrict to samples of this class
    #[arg(long)]
    pub class: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Optional JSON result file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(mut a: EvalArgs) -> Result<(), CliError> {
    let ckpt = need(a.ckpt.clone(), "ckpt")?;
    let data_path = need(a.data.clone(), "data")?;
    let top_k = *a.top_k.get_or_insert(1);
    let m = load_model(&ckpt)?;
    let data = m.labeled_data(&data_path)?;
    if top_k == 0 || top_k > m.model.classes() {
        return Err(usage(format!("--top-k must lie in 1..={}", m.model.classes())));
    }
    if let Some(c) = a.class {
        if c >= m.model.classes() {
            return Err(usage(format!("--class {c} outside 0..{}", m.model.classes())));
        }
    }
    let acc = accuracy(&m.model, &m.params, &data, top_k, a.class)?;
    let samples = a.class.map_or(data.len(), |c| data.class_indices(c).len());
    let result = json!({ "accuracy": acc, "top_k": top_k, "class": a.class, "samples": samples });
    if let Some(out) = &a.out {
        guard_output(out, &[&ckpt, &data_path])?;
        write_file(out, &json_bytes(&result)?)?;
        let mut man = RunManifest::new("eval", &a)?;
        man.checkpoint("ckpt", &ckpt)?;
        man.dataset("data", data.fingerprint());
        man.output(out)?;
        man.write(&manifest_beside(out))?;
    }
    print_json(&result);
    Ok(())
}

// ---------------------------------------------------------------- fsr

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FsrArgs {
    #[arg(long)]
    pub original: Option<PathBuf>,
    #[arg(long)]
    pub fooled: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    /// Interpreter evaluated [default: gradcam]
    #[arg(long)]
    pub interpreter: Option<String>,
    /// Interpreter the model was fooled with, for the report table [default: --interpreter]
    #[arg(long)]
    pub fooled_with: Option<String>,
    #[arg(long)]
    pub target: Option<String>,
    /// Samples whose heatmaps are tested (composites for active)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Labeled data for the accuracy columns [default: --data]
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Lower end of the success interval [default: per method]
    #[arg(long)]
    pub r_lo: Option<f64>,
    /// Upper end of the success interval [default: per method]
    #[arg(long)]
    pub r_hi: Option<f64>,
    /// [default: 10]
    #[arg(long)]
    pub k: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub c1: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    pub c2: Option<usize>,
    /// Output directory for records.csv and report.json
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything `fsr` writes to report.json.
#[derive(Debug, Serialize, Deserialize)]
pub struct FsrOutput {
    pub method: String,
    pub interpreter: String,
    pub fooled_with: String,
    pub interval: [f64; 2],
    pub fsr: f64,
    pub records: usize,
    pub excluded: usize,
    pub report: Report,
}

fn same_arch(a: &LoadedModel, b: &LoadedModel) -> Result<(), CliError> {
    if a.desc().to_text() != b.desc().to_text() {
        return Err(usage("original and fooled checkpoints describe different architectures"));
    }
    Ok(())
}

pub fn fsr(mut a: FsrArgs) -> Result<(), CliError> {
    let original = need(a.original.clone(), "original")?;
    let fooled = need(a.fooled.clone(), "fooled")?;
    let data_path = need(a.data.clone(), "data")?;
    let method = parse_method(&need(a.method.clone(), "method")?)?;
    let o = load_model(&original)?;
    let f = load_model(&fooled)?;
    same_arch(&o, &f)?;
    let spec = spec_for(&o, a.interpreter.get_or_insert_with(|| "gradcam".into()), &a.target)?;
    a.target = Some(spec.target_layer.clone());
    let fooled_with = parse_interpreter(a.fooled_with.get_or_insert_with(|| spec.kind.name().into()))?;
    let d = FsrSpec::default_for(method);
    let range = FsrSpec::new(method, *a.r_lo.get_or_insert(d.lo), *a.r_hi.get_or_insert(d.hi))
        .map_err(|e| usage(e.to_string()))?;
    let data = o.data(&data_path)?;
    let extras = match method {
        FoolMethod::Location => {
            let [_, _, h, w] = data.dims();
            let (rh, rw) = spec.resolution(&o.model, h, w)?;
            TestLossExtras::Location(build_frame_mask(rh, rw)?)
        }
        FoolMethod::TopK => TestLossExtras::TopK { k_percent: *a.k.get_or_insert(10.0) },
        FoolMethod::CenterMass => TestLossExtras::CenterMass,
        FoolMethod::Active => {
            let (c1, c2) = (*a.c1.get_or_insert(0), *a.c2.get_or_insert(1));
            if c1 == c2 || c1.max(c2) >= o.model.classes() {
                return Err(usage(format!("need distinct classes below {}", o.model.classes())));
            }
            TestLossExtras::Active { c1, c2 }
        }
    };
    let eval_path = a.eval_data.clone().unwrap_or_else(|| data_path.clone());
    let eval_data = o.data(&eval_path)?;
    if eval_data.labels().is_none() {
        return Err(usage(format!("{} has no labels; pass labeled --eval-data", eval_path.display())));
    }
    let losses = test_losses(&o.model, &o.params, &f.params, &data, &spec, &extras, &range)?;
    let mut report = Report::new(
        accuracy(&o.model, &o.params, &eval_data, 1, None)?,
        accuracy(&f.model, &f.params, &eval_data, 1, None)?,
    );
    let value = report.fsr_table.set(fooled_with, spec.kind, &losses.records, &range)?;
    let output = FsrOutput {
        method: method.name().into(),
        interpreter: spec.kind.name().into(),
        fooled_with: fooled_with.name().into(),
        interval: [range.lo, range.hi],
        fsr: value,
        records: losses.records.len(),
        excluded: losses.excluded,
        report,
    };
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        let mut man = RunManifest::new("fsr", &a)?;
        man.checkpoint("original", &original)?;
        man.checkpoint("fooled", &fooled)?;
        man.dataset("data", data.fingerprint());
        man.dataset("eval-data", eval_data.fingerprint());
        man.notes.insert("excluded".into(), json!(losses.excluded));
        let mut csv = Vec::new();
        write_records_csv(&mut csv, method, spec.kind, &losses.records)?;
        emit(out, "records.csv", &csv, &mut man)?;
        emit(out, "report.json", &json_bytes(&output)?, &mut man)?;
        man.write(&out.join("manifest.json"))?;
    }
    print_json(&json!({
        "fsr": output.fsr,
        "excluded": output.excluded,
        "records": output.records,
        "baseline_acc": output.report.baseline_acc,
        "fooled_acc": output.report.fooled_acc,
    }));
    Ok(())
}

// ---------------------------------------------------------------- heatmap

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct HeatmapArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// PGM, PPM or PNG input image
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Dataset to take the image from instead of --image
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Sample index within --data
    #[arg(long)]
    pub index: Option<usize>,
    /// Class to explain [default: the predicted class]
    #[arg(long)]
    pub class: Option<usize>,
    /// [default: gradcam]
    #[arg(long)]
    pub interpreter: Option<String>,
    #[arg(long)]
    pub target: Option<String>,
    /// [default: gray for gradcam, diverging otherwise]
    #[arg(long, value_enum)]
    pub style: Option<Style>,
    /// Output image (PGM for gray, PPM for diverging)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn heatmap(mut a: HeatmapArgs) -> Result<(), CliError> {
    let ckpt = need(a.ckpt.clone(), "ckpt")?;
    let out = need(a.out.clone(), "out")?;
    let m = load_model(&ckpt)?;
    let spec = spec_for(&m, a.interpreter.get_or_insert_with(|| "gradcam".into()), &a.target)?;
    a.target = Some(spec.target_layer.clone());
    let style = *a.style.get_or_insert(if spec.kind.signed() { Style::Diverging } else { Style::Gray });
    let (x, source): (Dataset, &Path) = match (&a.image, &a.data) {
        (Some(img), None) => {
            let (channels, height, width) = m.desc().input;
            if !img.exists() {
                return Err(usage(format!("missing file {}", img.display())));
            }
            let t = load_image(img, ImageDirOptions { channels, height, width })?;
            (m.prepare(&Dataset::new(t, None, m.model.classes())?)?, img)
        }
        (None, Some(d)) => {
            let ds = m.data(d)?;
            let i = need(a.index, "index")?;
            if i >= ds.len() {
                return Err(usage(format!("--index {i} outside 0..{}", ds.len())));
            }
            (ds.subset(&[i]), d)
        }
        _ => return Err(usage("pass exactly one of --image or --data")),
    };
    guard_output(&out, &[&ckpt, source])?;
    let (batch, _) = x.batch::<f32>(&[0]);
    let class = match a.class {
        Some(c) if c >= m.model.classes() => return Err(usage(format!("--class {c} outside 0..{}", m.model.classes()))),
        Some(c) => c,
        None => argmax(m.model.logits(&m.params, &batch)?.data()),
    };
    let h = heatmaps(&m.model, &m.params, &batch, &[class], &spec)?;
    let [_, _, ih, iw] = x.dims();
    let (hh, hw) = (h.shape()[1], h.shape()[2]);
    let map: Vec<f64> = h.data().iter().map(|&v| v as f64).collect();
    let img = render_heatmap(&map, (hh, hw), (ih, iw), style)?;
    write_file(&out, &img.encode())?;
    let mut man = RunManifest::new("heatmap", &a)?;
    man.checkpoint("ckpt", &ckpt)?;
    man.dataset("input", x.fingerprint());
    man.notes.insert("class".into(), json!(class));
    man.output(&out)?;
    man.write(&manifest_beside(&out))?;
    print_json(&json!({ "image": out, "class": class, "heatmap_shape": [hh, hw] }));
    Ok(())
}

// ---------------------------------------------------------------- aopc

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    /// Heatmaps of --original
    Original,
    /// Heatmaps of --ckpt
    Fooled,
    Random,
}

impl Source {
    fn name(self) -> &'static str {
        match self {
            Source::Original => "original",
            Source::Fooled => "fooled",
            Source::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct AopcArgs {
    /// Model whose class scores are measured
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Unfooled model, for --source original
    #[arg(long)]
    pub original: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Region orderings, comma separated [default: original,random,fooled]
    #[arg(long, value_enum, value_delimiter = ',')]
    pub source: Option<Vec<Source>>,
    /// [default: gradcam]
    #[arg(long)]
    pub interpreter: Option<String>,
    #[arg(long)]
    pub target: Option<String>,
    /// [default: 40]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Region side in pixels [default: 2]
    #[arg(long)]
    pub region: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for aopc.csv and report.json
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn aopc(mut a: AopcArgs) -> Result<(), CliError> {
    let ckpt = need(a.ckpt.clone(), "ckpt")?;
    let data_path = need(a.data.clone(), "data")?;
    let default_sources = if a.original.is_some() {
        vec![Source::Original, Source::Random, Source::Fooled]
    } else {
        vec![Source::Random, Source::Fooled]
    };
    let sources = a.source.get_or_insert(default_sources).clone();
    let cfg = AopcConfig {
        steps: *a.steps.get_or_insert(40),
        region: *a.region.get_or_insert(2),
        seed: *a.seed.get_or_insert(0),
    };
    let f = load_model(&ckpt)?;
    let o = match &a.original {
        Some(p) => {
            let o = load_model(p)?;
            same_arch(&o, &f)?;
            Some(o)
        }
        None if sources.contains(&Source::Original) => return Err(usage("--source original needs --original")),
        None => None,
    };
    let spec = spec_for(&f, a.interpreter.get_or_insert_with(|| "gradcam".into()), &a.target)?;
    a.target = Some(spec.target_layer.clone());
    let data = f.data(&data_path)?;
    let mut curves = BTreeMap::new();
    for s in &sources {
        let ordering = match s {
            Source::Original => AopcOrdering::Heatmap { params: &o.as_ref().expect("checked").params, spec: &spec },
            Source::Fooled => AopcOrdering::Heatmap { params: &f.params, spec: &spec },
            Source::Random => AopcOrdering::Random,
        };
        log::info!("aopc: {} ordering over {} images", s.name(), data.len());
        let curve = aopc_curve(&f.model, &f.params, &data, ordering, &cfg)?;
        curves.insert(s.name().to_string(), curve);
    }
    let finals: BTreeMap<&String, f64> = curves.iter().map(|(k, v)| (k, v[cfg.steps])).collect();
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        let mut man = RunManifest::new("aopc", &a)?;
        man.seeds.insert("seed".into(), cfg.seed);
        man.checkpoint("ckpt", &ckpt)?;
        if let Some(p) = &a.original {
            man.checkpoint("original", p)?;
        }
        man.dataset("data", data.fingerprint());
        let mut csv = String::from("step");
        for k in curves.keys() {
            let _ = write!(csv, ",{k}");
        }
        csv.push('\n');
        for step in 0..=cfg.steps {
            let _ = write!(csv, "{step}");
            for v in curves.values() {
                let _ = write!(csv, ",{}", v[step]);
            }
            csv.push('\n');
        }
        emit(out, "aopc.csv", csv.as_bytes(), &mut man)?;
        emit(out, "report.json", &json_bytes(&json!({ "aopc_curves": curves, "final": finals }))?, &mut man)?;
        man.write(&out.join("manifest.json"))?;
    }
    print_json(&json!({ "final": finals, "steps": cfg.steps, "images": data.len() }));
    Ok(())
}

// ---------------------------------------------------------------- perturb

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PerturbArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Noise scales as multiples of each tensor's RMS [default: 0,0.001,0.003,0.01]
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    /// [default: 5]
    #[arg(long)]
    pub trials: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for perturb.csv and report.json
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn perturb(mut a: PerturbArgs) -> Result<(), CliError> {
    let ckpt = need(a.ckpt.clone(), "ckpt")?;
    let data_path = need(a.data.clone(), "data")?;
    let sigmas = a.sigmas.get_or_insert_with(|| vec![0.0, 1e-3, 3e-3, 1e-2]).clone();
    let trials = *a.trials.get_or_insert(5);
    let seed = *a.seed.get_or_insert(0);
    if trials == 0 || sigmas.is_empty() || sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(usage("need trials >= 1 and finite sigmas >= 0"));
    }
    let m = load_model(&ckpt)?;
    let data = m.labeled_data(&data_path)?;
    let points = gaussian_perturb_probe(&m.model, &m.params, &data, &sigmas, trials, seed)?;
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        let mut man = RunManifest::new("perturb", &a)?;
        man.seeds.insert("seed".into(), seed);
        man.checkpoint("ckpt", &ckpt)?;
        man.dataset("data", data.fingerprint());
        let mut csv = String::from("sigma,accuracy\n");
        for p in &points {
            let _ = writeln!(csv, "{},{}", p.sigma, p.accuracy);
        }
        emit(out, "perturb.csv", csv.as_bytes(), &mut man)?;
        let name = ckpt.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        emit(out, "report.json", &json_bytes(&json!({ "perturb_curves": { name: &points } }))?, &mut man)?;
        man.write(&out.join("manifest.json"))?;
    }
    print_json(&json!({ "points": points }));
    Ok(())
}

// ---------------------------------------------------------------- compose

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ComposeArgs {
    /// Labeled source images
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Image shape C,H,W for class-directory data [default: 1,28,28]
    #[arg(long)]
    pub input: Option<String>,
    #[arg(long)]
    pub c1: Option<usize>,
    #[arg(long)]
    pub c2: Option<usize>,
    /// Composites in total, holdout included [default: 1300]
    #[arg(long)]
    pub n: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn layout_json(l: &[Composite]) -> Value {
    l.iter().map(|c| json!({ "quadrants": c.quadrants, "source_ids": c.source_ids })).collect()
}

pub fn compose(mut a: ComposeArgs) -> Result<(), CliError> {
    let data_path = need(a.data.clone(), "data")?;
    let out = need(a.out.clone(), "out")?;
    let (c1, c2) = (need(a.c1, "c1")?, need(a.c2, "c2")?);
    let n = *a.n.get_or_insert(1300);
    let seed = *a.seed.get_or_insert(0);
    let shape = parse_shape(a.input.get_or_insert_with(|| "1,28,28".into()))?;
    let base = load_data(&data_path, shape, 2)?;
    if base.labels().is_none() {
        return Err(usage(format!("{} has no labels", data_path.display())));
    }
    let split = build_composite_dataset(&base, c1, c2, n, seed).map_err(|e| usage(e.to_string()))?;
    ensure_dir(&out)?;
    let mut man = RunManifest::new("compose", &a)?;
    man.seeds.insert("seed".into(), seed);
    man.dataset("data", base.fingerprint());
    for (name, ds) in [("train-images.idx", &split.train), ("holdout-images.idx", &split.holdout)] {
        let p = out.join(name);
        write_idx_images(ds, &p)?;
        man.output(&p)?;
    }
    let layout = json!({
        "c1": c1,
        "c2": c2,
        "train": layout_json(&split.train_layout),
        "holdout": layout_json(&split.holdout_layout),
    });
    emit(&out, "layout.json", &json_bytes(&layout)?, &mut man)?;
    man.write(&out.join("manifest.json"))?;
    print_json(&json!({ "train": split.train.len(), "holdout": split.holdout.len() }));
    Ok(())
}
