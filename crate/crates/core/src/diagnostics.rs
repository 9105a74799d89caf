//! Evaluation, per-block similarity curves, renders and the ablation runner.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::{class_attention_map, mean_pairwise_cosine, TokenGrid};
use crate::cam::{cam_to_labels, upsample_cam, ActivationMap};
use crate::data::{derive_seed, gen_shapes_dataset, write_rgb_png, Dataset};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::metrics::{Confusion, IoUReport};
use crate::ptc::cosine_matrix;
use crate::segmenter::model::argmax_labels;
use crate::segmenter::{MetricsWriter, TocoModel, TrainConfig, Trainer};

/// Mean over images of the mean pairwise cosine similarity of patch tokens,
/// one value per block.
pub fn blockwise_similarity<T: Float>(model: &TocoModel<T>, dataset: &Dataset, sample_limit: usize) -> Result<Vec<f64>> {
    let n = dataset.len().min(sample_limit);
    if n == 0 {
        return Err(Error::config("similarity needs at least one sample"));
    }
    let depth = model.vit.config().depth;
    let mut sums = vec![0.0; depth];
    for sample in &dataset.samples[..n] {
        let image = sample.image.mapv(|v| T::of(f64::from(v)));
        let trace = model.vit.forward(&model.params, image.view())?;
        for (k, s) in sums.iter_mut().enumerate() {
            *s += mean_pairwise_cosine(trace.patch_tokens(k).tokens.view());
        }
    }
    Ok(sums.into_iter().map(|s| s / n as f64).collect())
}

/// `|cos(Fᵢ, Fⱼ)|` scaled to `0..=255`, rounding half to even.
pub fn similarity_map<T: Float>(features: &TokenGrid<T>) -> Array2<u8> {
    cosine_matrix(features).mapv(|c| (c.as_f64().abs().min(1.0) * 255.0).round_ties_even() as u8)
}

/// Jet-like colormap for `v ∈ [0, 1]`.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Blends a colormapped heat map over the image with opacity `v / 2`, so a
/// zero map leaves the image untouched.
pub fn overlay(image: ArrayView3<'_, f32>, heat: ArrayView2<'_, f64>) -> Result<Array3<f32>> {
    let (c, h, w) = image.dim();
    if heat.dim() != (h, w) || c != 3 {
        return Err(Error::shape(format!(
            "heat map {:?} over image {:?}",
            heat.dim(),
            image.dim()
        )));
    }
    let mut out = image.to_owned();
    for y in 0..h {
        for x in 0..w {
            let v = heat[[y, x]];
            if v <= 0.0 {
                continue;
            }
            let alpha = 0.5 * v.min(1.0);
            let col = colormap(v);
            for ch in 0..3 {
                let base = f64::from(image[[ch, y, x]]);
                out[[ch, y, x]] = ((1.0 - alpha) * base + alpha * col[ch]) as f32;
            }
        }
    }
    Ok(out)
}

/// Writes `<stem>_cam_<k>.png` for every present class, `<stem>_sim.png`
/// (token similarity matrix) and `<stem>_attn.png` (final-block class-token
/// attention). Returns the written paths.
pub fn render_cam<T: Float>(
    image: ArrayView3<'_, f32>,
    labels: &[bool],
    model: &TocoModel<T>,
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (_, h, w) = image.dim();
    let img_t = image.mapv(|v| T::of(f64::from(v)));
    let inf = model.infer(img_t.view(), Some(labels))?;
    let mut written = Vec::new();
    let up = upsample_cam(&inf.cam, (h, w));
    for k in (0..up.classes()).filter(|&k| labels[k]) {
        let heat = up.values.index_axis(Axis(0), k).mapv(|v| v.as_f64());
        let path = out_dir.join(format!("{stem}_cam_{}.png", k + 1));
        write_rgb_png(&path, overlay(image, heat.view())?.view())?;
        written.push(path);
    }
    let sim = similarity_map(&inf.trace.final_patch_tokens());
    let path = out_dir.join(format!("{stem}_sim.png"));
    write_gray_png(&path, sim.view())?;
    written.push(path);

    let attn = class_attention_map(&inf.trace, inf.trace.depth() - 1);
    let max = attn.iter().fold(0.0f64, |a, v| a.max(v.as_f64()));
    let scaled = attn.mapv(|v| if max > 0.0 { v.as_f64() / max } else { 0.0 });
    let grid = crate::cam::upsample_nearest(&scaled, (h, w));
    let path = out_dir.join(format!("{stem}_attn.png"));
    write_rgb_png(&path, overlay(image, grid.view())?.view())?;
    written.push(path);
    Ok(written)
}

pub fn write_gray_png(path: &Path, pixels: ArrayView2<'_, u8>) -> Result<()> {
    let (h, w) = pixels.dim();
    let buf: Vec<u8> = pixels.iter().copied().collect();
    image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized to image")
        .save(path)
        .map_err(|e| Error::data(path, e.to_string()))
}

/// Pseudo-label and segmentation quality of a model on a labelled dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Final-block CAM thresholded into labels.
    pub cam: IoUReport,
    /// Auxiliary-block CAM thresholded into labels.
    pub aux_cam: IoUReport,
    /// Decoder argmax.
    pub seg: IoUReport,
}

/// Label maps produced for one image.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub cam: Array2<u8>,
    pub aux_cam: Array2<u8>,
    pub seg: Array2<u8>,
}

/// CAMs are restricted to the classes the model predicts present
/// (positive logit, i.e. sigmoid above one half).
pub fn predict<T: Float>(model: &TocoModel<T>, image: ArrayView3<'_, f32>, bg_threshold: f64) -> Result<Predictions> {
    let (_, h, w) = image.dim();
    let img = image.mapv(|v| T::of(f64::from(v)));
    let inf = model.infer(img.view(), None)?;
    let to_labels = |cam: &ActivationMap<T>| cam_to_labels(&upsample_cam(cam, (h, w)), bg_threshold);
    Ok(Predictions {
        cam: to_labels(&inf.cam),
        aux_cam: to_labels(&inf.aux_cam),
        seg: argmax_labels(&inf.seg_logits),
    })
}

pub fn evaluate<T: Float>(model: &TocoModel<T>, dataset: &Dataset, bg_threshold: f64) -> Result<EvalReport> {
    evaluate_with(model, dataset, bg_threshold, |_, _| Ok(()))
}

/// Like [`evaluate`], handing each sample's predictions to `sink` (for
/// example to dump label PNGs).
pub fn evaluate_with<T: Float>(
    model: &TocoModel<T>,
    dataset: &Dataset,
    bg_threshold: f64,
    mut sink: impl FnMut(&str, &Predictions) -> Result<()>,
) -> Result<EvalReport> {
    if dataset.classes != model.classes() {
        return Err(Error::config(format!(
            "dataset has {} classes, checkpoint {}",
            dataset.classes,
            model.classes()
        )));
    }
    let mut conf = [
        Confusion::new(dataset.classes),
        Confusion::new(dataset.classes),
        Confusion::new(dataset.classes),
    ];
    for s in &dataset.samples {
        let gt = s
            .ground_truth()
            .ok_or_else(|| Error::config(format!("sample {} has no ground truth", s.id)))?
            .for_evaluation();
        let p = predict(model, s.image.view(), bg_threshold)?;
        conf[0].add(p.cam.view(), gt.view())?;
        conf[1].add(p.aux_cam.view(), gt.view())?;
        conf[2].add(p.seg.view(), gt.view())?;
        sink(&s.id, &p)?;
    }
    Ok(EvalReport {
        cam: conf[0].report(),
        aux_cam: conf[1].report(),
        seg: conf[2].report(),
    })
}

/// Synthetic train and held-out evaluation sets described by `cfg.data`.
pub fn shapes_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let size = cfg.model.image_size;
    let train = gen_shapes_dataset(cfg.data.train_samples, cfg.classes, size, cfg.data.seed)?;
    let eval = gen_shapes_dataset(cfg.data.eval_samples, cfg.classes, size, derive_seed(cfg.data.seed, 1, 0))?;
    Ok((train, eval))
}

/// Trains a fresh model, optionally logging metrics to `metrics_csv`.
pub fn train_model(cfg: &TrainConfig, train: &Dataset, metrics_csv: Option<&Path>) -> Result<TocoModel<f32>> {
    let mut trainer = Trainer::<f32>::new(cfg.clone())?;
    let mut writer = metrics_csv.map(MetricsWriter::create).transpose()?;
    trainer.run(train, |_, report| match writer.as_mut() {
        Some(w) => w.write(report),
        None => Ok(()),
    })?;
    if let Some(w) = writer {
        w.finish()?;
    }
    Ok(trainer.into_model())
}

pub const ABLATION_HEADER: &str = "# toco-ablation v1";
pub const ABLATION_COLUMNS: &str = "setting,pseudo_miou,seg_miou,final_similarity,status";

/// One ablation setting: config overrides applied over the base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub name: String,
    #[serde(default)]
    pub set: Vec<String>,
}

/// A sweep over one key, expanded to one point per value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<toml::Value>,
    /// Overrides shared by every point of the sweep.
    #[serde(default)]
    pub set: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    #[serde(default)]
    pub point: Vec<GridPoint>,
    #[serde(default)]
    pub sweep: Vec<Sweep>,
}

impl AblationGrid {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = self.point.clone();
        for s in &self.sweep {
            for v in &s.values {
                let mut set = s.set.clone();
                set.push(format!("{}={v}", s.key));
                out.push(GridPoint {
                    name: format!("{}={v}", s.key),
                    set,
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub pseudo_miou: f64,
    pub seg_miou: f64,
    pub final_similarity: f64,
    pub status: String,
}

impl AblationRow {
    pub fn csv_line(&self) -> String {
        let status = self.status.replace([',', '\n', '\r'], ";");
        format!(
            "{},{},{},{},{status}",
            self.setting.replace(',', ";"),
            self.pseudo_miou,
            self.seg_miou,
            self.final_similarity
        )
    }
}

/// Trains and evaluates one grid point.
pub fn run_point(base: &TrainConfig, point: &GridPoint, train: &Dataset, eval: &Dataset) -> Result<AblationRow> {
    let cfg = base.with_assignments(&point.set)?;
    let model = train_model(&cfg, train, None)?;
    let report = evaluate(&model, eval, cfg.eval_bg_threshold)?;
    let sim = blockwise_similarity(&model, eval, eval.len())?;
    Ok(AblationRow {
        setting: point.name.clone(),
        pseudo_miou: report.cam.miou,
        seg_miou: report.seg.miou,
        final_similarity: *sim.last().expect("depth ≥ 1"),
        status: "ok".into(),
    })
}

/// Runs every grid point in order, appending each row to `csv` as it
/// completes. Failed points are recorded with NaN metrics and the error.
pub fn run_ablation(
    base: &TrainConfig,
    grid: &AblationGrid,
    train: &Dataset,
    eval: &Dataset,
    csv: &Path,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for point in grid.points() {
        let row = run_point(base, &point, train, eval).unwrap_or_else(|e| {
            log::warn!("ablation point {} failed: {e}", point.name);
            AblationRow {
                setting: point.name.clone(),
                pseudo_miou: f64::NAN,
                seg_miou: f64::NAN,
                final_similarity: f64::NAN,
                status: format!("error: {e}"),
            }
        });
        append_row(csv, &row)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Rewrites `csv` with `row` appended through a temporary file and rename,
/// so readers never see a partial line.
pub fn append_row(csv: &Path, row: &AblationRow) -> Result<()> {
    let existing = match std::fs::read_to_string(csv) {
        Ok(text) => {
            if !text.starts_with(ABLATION_HEADER) {
                return Err(Error::data(csv, "not a toco ablation CSV (missing version header)"));
            }
            text
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => format!("{ABLATION_HEADER}\n{ABLATION_COLUMNS}\n"),
        Err(e) => return Err(Error::io(csv, e)),
    };
    let dir = csv.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(existing.as_bytes())
        .and_then(|_| writeln!(tmp, "{}", row.csv_line()))
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(csv).map_err(|e| Error::io(csv, e.error))?;
    Ok(())
}

/// Parses the data rows of an ablation CSV.
pub fn read_ablation_csv(csv: &Path) -> Result<Vec<AblationRow>> {
    let text = std::fs::read_to_string(csv).map_err(|e| Error::io(csv, e))?;
    let mut rows = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && *l != ABLATION_COLUMNS && !l.is_empty()) {
        let f: Vec<&str> = line.splitn(5, ',').collect();
        if f.len() != 5 {
            return Err(Error::data(csv, format!("malformed row {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::data(csv, format!("bad number {s:?}")));
        rows.push(AblationRow {
            setting: f[0].to_string(),
            pseudo_miou: num(f[1])?,
            seg_miou: num(f[2])?,
            final_similarity: num(f[3])?,
            status: f[4].to_string(),
        });
    }
    Ok(rows)
}
