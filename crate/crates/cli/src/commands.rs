use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toothloc::data::{
    read_annotation, save_scene, synthesize_scene, to_canvas, DatasetManifest, GrayImage, Scene, CANVAS_H, CANVAS_W,
};
use toothloc::eval::{evaluate, render_confusion, render_overlay, Detection, EvalReport, EvalScene};
use toothloc::gradcheck::{self, CheckRow};
use toothloc::losses::LossBreakdown;
use toothloc::pipeline::{
    export_detections, infer as run_infer, load_model, measure_fps, save_model, train as run_train, Cascade,
    PreparedScene, TrainReport, ValidationRecord,
};

use crate::{CliError, RunConfig};

pub const METRICS_FILE: &str = "metrics.csv";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const CONFUSION_FILE: &str = "confusion.png";
pub const OVERLAY_DIR: &str = "overlays";
pub const PREDICTION_DIR: &str = "predictions";
pub const BOXES_FILE: &str = "boxes.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.txt";

/// `measure_fps` needs this many images; shorter splits are cycled.
const FPS_IMAGES: usize = 10;

fn prepare(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    cfg.snapshot(out)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn save_png<P: image::PixelWithColorType, C: std::ops::Deref<Target = [P::Subpixel]>>(
    img: &image::ImageBuffer<P, C>,
    path: &Path,
) -> Result<(), CliError>
where
    [P::Subpixel]: image::EncodableLayout,
{
    img.save(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn scene_stem(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Writes `dataset.count` scenes and their split manifest.
pub fn synthesize(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest, CliError> {
    prepare(cfg, out)?;
    let stems: Vec<String> = (0..cfg.dataset.count).map(scene_stem).collect();
    let manifest = DatasetManifest::split(stems.clone(), &cfg.dataset.split)?;
    for (i, stem) in stems.iter().enumerate() {
        let scene = synthesize_scene(&cfg.synth, i as u64);
        save_scene(&scene, &DatasetManifest::annotation_path(out, stem), &DatasetManifest::image_rel(stem))?;
    }
    manifest.save(out)?;
    Ok(manifest)
}

fn load_split(root: &Path, name: &str) -> Result<(Vec<String>, Vec<Scene>), CliError> {
    let manifest = DatasetManifest::load(root).map_err(|e| CliError::Validation(format!("no dataset: {e}")))?;
    let stems = manifest
        .split_named(name)
        .ok_or_else(|| CliError::Validation(format!("unknown split `{name}`")))?
        .to_vec();
    let scenes = manifest.load_split(root, name)?;
    Ok((stems, scenes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub backbone: String,
    pub use_dr: bool,
    pub use_offset: bool,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub seconds: f64,
    pub final_validation: Option<ValidationRecord>,
    pub final_loss: Option<LossBreakdown>,
}

struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl MetricsLog {
    fn create(path: PathBuf) -> Result<Self, CliError> {
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut log = Self { path, out: BufWriter::new(file), error: None };
        log.line(format_args!("step,lr,center,dr,offset,box,weight_reg,total"));
        Ok(log)
    }

    fn line(&mut self, args: std::fmt::Arguments<'_>) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{args}") {
                self.error = Some(e);
            }
        }
    }

    fn finish(mut self) -> Result<(), CliError> {
        if let Some(e) = self.error.take() {
            return Err(CliError::io(&self.path, e));
        }
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

/// Trains on the `train` split, validating on `val`; writes the model,
/// `metrics.csv`, `validation.csv` and `summary.json` into `out`.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(TrainSummary, TrainReport), CliError> {
    prepare(cfg, out)?;
    let tc = &cfg.train;
    let (_, train_raw) = load_split(data, "train")?;
    if train_raw.is_empty() {
        return Err(CliError::Validation("empty split `train`".into()));
    }
    let (_, val_raw) = load_split(data, "val")?;
    let prep = |s: &[Scene]| -> Result<Vec<PreparedScene>, CliError> {
        s.iter().map(|s| PreparedScene::new(s, &tc.model).map_err(CliError::from)).collect()
    };
    let (train_set, val_set) = (prep(&train_raw)?, prep(&val_raw)?);
    drop((train_raw, val_raw));

    let mut net = Cascade::new(tc.model.clone(), tc.seed);
    let mut log = MetricsLog::create(out.join(METRICS_FILE))?;
    let result = run_train(&mut net, &train_set, &val_set, tc, |step, b| {
        log.line(format_args!(
            "{step},{},{},{},{},{},{},{}",
            tc.lr_at(step),
            b.center,
            b.dr,
            b.offset,
            b.box_size,
            b.weight_reg,
            b.total
        ))
    });
    log.finish()?;
    let report = result?;
    save_model(out, &net, &tc.loss_weights)?;

    let mut val = String::from("epoch,step,mse1,mse2\n");
    for r in &report.validation {
        val += &format!("{},{},{},{}\n", r.epoch, r.step, r.mse1, r.mse2);
    }
    write_file(&out.join(VALIDATION_FILE), val)?;
    let summary = TrainSummary {
        iterations: tc.iterations,
        backbone: tc.model.backbone.name.clone(),
        use_dr: tc.use_dr,
        use_offset: tc.use_offset,
        train_scenes: train_set.len(),
        val_scenes: val_set.len(),
        seconds: report.seconds,
        final_validation: report.final_validation().cloned(),
        final_loss: report.history.last().map(|(_, b)| *b),
    };
    write_file(&out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")?;
    Ok((summary, report))
}

#[derive(Debug, Clone)]
pub enum EvalSource {
    Model(PathBuf),
    /// Directory of `<stem>.json` annotation files.
    Predictions(PathBuf),
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub split: String,
    /// Images per second through the full cascade; model sources only.
    pub fps: Option<f64>,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// Scores `source` on `eval.split`; writes `report.json`, `report.csv`,
/// `confusion.png` and `overlays/`.
pub fn eval(cfg: &RunConfig, data: &Path, source: &EvalSource, out: &Path) -> Result<EvalOutput, CliError> {
    prepare(cfg, out)?;
    let split = cfg.eval.split.clone();
    let (stems, scenes) = load_split(data, &split)?;
    if scenes.is_empty() {
        return Err(CliError::Validation(format!("empty split `{split}`")));
    }
    let mut eval_scenes = Vec::with_capacity(scenes.len());
    let mut fps = None;
    match source {
        EvalSource::Model(dir) => {
            let (net, _) = load_model(dir)?;
            for s in &scenes {
                eval_scenes.push(EvalScene::new(&run_infer(&s.image, &net)?, &s.teeth));
            }
            let images: Vec<GrayImage> = scenes.iter().cycle().take(scenes.len().max(FPS_IMAGES)).map(|s| s.image.clone()).collect();
            fps = Some(measure_fps(&net, &images, cfg.eval.fps_warmup)?);
        }
        EvalSource::Predictions(dir) => {
            for (stem, s) in stems.iter().zip(&scenes) {
                let path = dir.join(format!("{stem}.json"));
                let teeth = read_annotation(&path)?.validate(&path)?;
                let detections = teeth.iter().map(|t| Detection { tooth: t.tooth, bbox: t.bbox }).collect();
                eval_scenes.push(EvalScene { detections, truth: s.teeth.clone() });
            }
        }
    }
    let output = EvalOutput { split, fps, report: evaluate(&eval_scenes) };
    write_file(&out.join(REPORT_JSON), serde_json::to_string_pretty(&output).expect("report serializes") + "\n")?;
    write_file(&out.join(REPORT_CSV), output.report.to_csv())?;
    save_png(&render_confusion(&output.report.confusion), &out.join(CONFUSION_FILE))?;
    let overlays = out.join(OVERLAY_DIR);
    create_dir(&overlays)?;
    for ((stem, s), es) in stems.iter().zip(&scenes).zip(&eval_scenes).take(cfg.eval.overlays) {
        let ious = es.detection_ious();
        save_png(&render_overlay(&s.image, &es.detections, Some(&ious)), &overlays.join(format!("{stem}.png")))?;
    }
    Ok(output)
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(input).map_err(|e| CliError::io(input, e))? {
        let path = entry.map_err(|e| CliError::io(input, e))?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::Validation(format!("{}: no PNG images", input.display())));
    }
    Ok(files)
}

/// Runs the model on every input image. Predictions are written on the
/// 768x512 canvas in the annotation schema; `boxes.csv` and the overlays
/// use source-image pixels.
pub fn infer(cfg: &RunConfig, model: &Path, input: &Path, out: &Path) -> Result<(), CliError> {
    prepare(cfg, out)?;
    let (net, _) = load_model(model)?;
    let files = png_inputs(input)?;
    let (pred_dir, overlay_dir) = (out.join(PREDICTION_DIR), out.join(OVERLAY_DIR));
    create_dir(&pred_dir)?;
    create_dir(&overlay_dir)?;
    let mut boxes = String::from("image,tooth,cx,cy,w,h\n");
    for path in files {
        let source = image::open(&path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
            .into_luma8();
        let stem = path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        let (canvas, transform) = to_canvas(&source);
        debug_assert_eq!(canvas.dimensions(), (CANVAS_W, CANVAS_H));
        let result = run_infer(&canvas, &net)?;
        let doc = export_detections(&result, &path.to_string_lossy());
        let json = serde_json::to_string_pretty(&doc).expect("annotation serializes") + "\n";
        write_file(&pred_dir.join(format!("{stem}.json")), json)?;
        let mut detections = Vec::with_capacity(result.teeth.len());
        for t in &result.teeth {
            let b = transform.box_to_source(&t.bbox);
            boxes += &format!("{stem},{},{},{},{},{}\n", t.tooth.index(), b.cx, b.cy, b.w, b.h);
            detections.push(Detection { tooth: t.tooth, bbox: b });
        }
        save_png(&render_overlay(&source, &detections, None), &overlay_dir.join(format!("{stem}.png")))?;
    }
    write_file(&out.join(BOXES_FILE), boxes)
}

/// Prints the gradient table and writes it to `gradcheck.txt`; any failing
/// row is a runtime failure.
pub fn gradcheck(cfg: &RunConfig, out: &Path) -> Result<Vec<CheckRow>, CliError> {
    prepare(cfg, out)?;
    let rows = gradcheck::run(cfg.gradcheck_seed, &cfg.gradcheck).map_err(|e| CliError::Runtime(e.to_string()))?;
    let table = gradcheck::format_table(&rows);
    print!("{table}");
    write_file(&out.join(GRADCHECK_FILE), &table)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::Runtime(format!("gradient check failed: {}", failed.join(", "))));
    }
    Ok(rows)
}
