//! End-to-end orchestration: corpora, the two training stages, the
//! sender/channel/receiver loop and the evaluation report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoenc::{train_autoencoders, AeEpochLog, AeError, AutoencoderPair, ModalityId, PairedImages};
use crate::config::{ConfigError, Precision, RunConfig};
use crate::image::{Image, ImageError};
use crate::lddm::{reconstruct, train_ldm, LatentCorpus, LatentDiffusion, LdmEpochLog, LdmError, NoiseSchedule, Target};
use crate::metrics::{classification_accuracy, detect_blobs, image_mse, label_components, miou, pixel_accuracy, psnr};
use crate::neural::{NeuralError, Scalar};
use crate::segmap::{ClassPalette, SegMap, SegMapError};
use crate::synthgen::{gen_corpus, load_corpus, write_corpus, ScenePair, SynthError};
use crate::wire::{decode_frame, encode_frame, measure_compression, CompressionReport, WireError};

pub const AE_WEIGHTS: &str = "ae.wts";
pub const LDM_WEIGHTS: &str = "ldm.wts";
pub const AE_LOG: &str = "ae_loss.txt";
pub const LDM_LOG: &str = "ldm_loss.txt";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_RECORDS: &str = "report.jsonl";
/// Wall-clock time lives apart from the report so reports stay
/// byte-identical across runs.
pub const RUNTIME_FILE: &str = "runtime.txt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing weights: {0}")]
    MissingWeights(PathBuf),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Autoencoder(#[from] AeError),
    #[error(transparent)]
    Diffusion(#[from] LdmError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    SegMap(#[from] SegMapError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("report {path}, line {line}: {reason}")]
    Report {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("corpus has {found} scenes, config asks for {wanted}")]
    CorpusSize { found: usize, wanted: usize },
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn corpus(path: &Option<PathBuf>, cfg: &RunConfig, count: usize, seed: u64) -> Result<Vec<ScenePair>> {
    match path {
        Some(dir) => {
            let scenes = load_corpus(dir)?;
            if scenes.len() < count {
                return Err(PipelineError::CorpusSize {
                    found: scenes.len(),
                    wanted: count,
                });
            }
            Ok(scenes.into_iter().take(count).collect())
        }
        None => Ok(gen_corpus(&cfg.scene_spec(), count, seed)?),
    }
}

/// Training scenes: loaded from `train_corpus` or generated from
/// `train_seed`.
pub fn training_corpus(cfg: &RunConfig) -> Result<Vec<ScenePair>> {
    corpus(&cfg.train_corpus, cfg, cfg.train_scenes, cfg.train_seed)
}

/// Evaluation scenes: loaded from `eval_corpus` or generated from
/// `eval_seed`.
pub fn eval_corpus(cfg: &RunConfig) -> Result<Vec<ScenePair>> {
    corpus(&cfg.eval_corpus, cfg, cfg.eval_scenes, cfg.eval_seed)
}

/// Palette of the evaluation corpus: its `palette.txt` when loaded from
/// disk, the generator's palette otherwise.
pub fn eval_palette(cfg: &RunConfig) -> Result<ClassPalette> {
    match &cfg.eval_corpus {
        Some(dir) => Ok(ClassPalette::load(dir.join("palette.txt"))?),
        None => Ok(cfg.scene_spec().palette),
    }
}

/// Writes both generated corpora. Paths default to `train` and `eval`
/// under the output directory. Returns the two directories.
pub fn gen_data(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let train_dir = cfg.train_corpus.clone().unwrap_or_else(|| cfg.output_dir.join("train"));
    let eval_dir = cfg.eval_corpus.clone().unwrap_or_else(|| cfg.output_dir.join("eval"));
    let spec = cfg.scene_spec();
    let train = gen_corpus(&spec, cfg.train_scenes, cfg.train_seed)?;
    write_corpus(&train_dir, &train, &spec, cfg.train_seed)?;
    let eval = gen_corpus(&spec, cfg.eval_scenes, cfg.eval_seed)?;
    write_corpus(&eval_dir, &eval, &spec, cfg.eval_seed)?;
    Ok((train_dir, eval_dir))
}

pub fn ae_log_text(log: &[AeEpochLog]) -> String {
    let mut s = String::from("# epoch total contrastive recon_rgb recon_ir\n");
    for (i, l) in log.iter().enumerate() {
        writeln!(
            s,
            "{i} {:.9e} {:.9e} {:.9e} {:.9e}",
            l.total, l.contrastive, l.recon_rgb, l.recon_ir
        )
        .unwrap();
    }
    s
}

pub fn ldm_log_text(log: &[LdmEpochLog]) -> String {
    let mut s = String::from("# epoch total rgb ir train\n");
    for (i, l) in log.iter().enumerate() {
        writeln!(s, "{i} {:.9e} {:.9e} {:.9e} {:.9e}", l.total, l.rgb, l.ir, l.train).unwrap();
    }
    s
}

fn train_ae_typed<T: Scalar>(cfg: &RunConfig, scenes: &[ScenePair]) -> Result<Vec<AeEpochLog>> {
    let data = PairedImages::<T>::from_images(scenes.iter().map(|s| (&s.rgb, &s.ir)));
    let (pair, log) = train_autoencoders(&data, &cfg.ae_train_config())?;
    std::fs::create_dir_all(&cfg.weights_dir).map_err(io_err(&cfg.weights_dir))?;
    pair.save(cfg.weights_dir.join(AE_WEIGHTS))?;
    write_file(&cfg.weights_dir.join(AE_LOG), ae_log_text(&log))?;
    Ok(log)
}

/// First stage: trains both autoencoders and writes `ae.wts` and the loss
/// log into the weights directory.
pub fn train_ae_stage(cfg: &RunConfig) -> Result<Vec<AeEpochLog>> {
    let scenes = training_corpus(cfg)?;
    match cfg.precision {
        Precision::F32 => train_ae_typed::<f32>(cfg, &scenes),
        Precision::F64 => train_ae_typed::<f64>(cfg, &scenes),
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(PipelineError::MissingWeights(path))
    }
}

pub fn load_autoencoders<T: Scalar>(cfg: &RunConfig) -> Result<AutoencoderPair<T>> {
    Ok(AutoencoderPair::load(require(cfg.weights_dir.join(AE_WEIGHTS))?)?)
}

pub fn load_diffusion<T: Scalar>(cfg: &RunConfig) -> Result<LatentDiffusion<T>> {
    let mut ldm = LatentDiffusion::<T>::load(require(cfg.weights_dir.join(LDM_WEIGHTS))?)?;
    ldm.denoiser.condition_on_modality = !cfg.disable_modality_condition;
    Ok(ldm)
}

fn train_ldm_typed<T: Scalar>(cfg: &RunConfig, scenes: &[ScenePair]) -> Result<Vec<LdmEpochLog>> {
    let ae = load_autoencoders::<T>(cfg)?;
    let latents = LatentCorpus::encode(&ae, scenes.iter().map(|s| (&s.seg, &s.rgb, &s.ir)))?;
    let (ldm, log) = train_ldm(&latents, &cfg.ldm_train_config())?;
    ldm.save(cfg.weights_dir.join(LDM_WEIGHTS))?;
    write_file(&cfg.weights_dir.join(LDM_LOG), ldm_log_text(&log))?;
    Ok(log)
}

/// Second stage: encodes the training corpus with the saved autoencoders,
/// trains the denoiser and writes `ldm.wts` and its loss log.
pub fn train_ldm_stage(cfg: &RunConfig) -> Result<Vec<LdmEpochLog>> {
    let scenes = training_corpus(cfg)?;
    match cfg.precision {
        Precision::F32 => train_ldm_typed::<f32>(cfg, &scenes),
        Precision::F64 => train_ldm_typed::<f64>(cfg, &scenes),
    }
}

/// Everything the receiver needs to turn a segmentation map into images.
pub struct Receiver<T> {
    pub ae: AutoencoderPair<T>,
    pub ldm: LatentDiffusion<T>,
    pub schedule: NoiseSchedule,
    pub target: Target,
}

impl<T: Scalar> Receiver<T> {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            ae: load_autoencoders(cfg)?,
            ldm: load_diffusion(cfg)?,
            schedule: cfg.ldm_train_config().schedule()?,
            target: cfg.target,
        })
    }

    pub fn reconstruct(&self, seg: &SegMap, m: ModalityId, seed: u64) -> Result<Image> {
        Ok(reconstruct(seg, m, &self.ae, &self.ldm, &self.schedule, self.target, seed)?)
    }
}

/// Sampling seed for scene `index` and modality `m`.
pub fn sample_seed(base: u64, index: usize, m: ModalityId) -> u64 {
    base.wrapping_add(2 * index as u64 + m.index() as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneStatus {
    Delivered,
    /// The channel dropped the frame.
    Dropped,
    /// The frame arrived but failed validation.
    Corrupt,
    /// The frame decoded but a later step failed.
    Failed,
}

/// Metrics of one reconstructed modality against the original rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityMetrics {
    pub modality: String,
    pub sample_seed: u64,
    pub mse: f64,
    pub psnr: f64,
    pub pixel_accuracy: f64,
    pub miou: f64,
    pub classification_accuracy: f64,
}

/// One line of `report.jsonl`. Fields are written in declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene: usize,
    pub status: SceneStatus,
    pub error: Option<String>,
    pub compression: CompressionReport,
    /// Whether the decoded map equals the sent one. `None` when nothing
    /// was decoded.
    pub seg_identical: Option<bool>,
    pub metrics: Vec<ModalityMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModalityAggregate {
    pub modality: String,
    pub scenes: usize,
    pub mse: f64,
    pub psnr: f64,
    pub pixel_accuracy: f64,
    pub miou: f64,
    pub classification_accuracy: f64,
}

/// Means over the per-scene records. Compression covers every scene, image
/// metrics cover delivered scenes only.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub scenes: usize,
    pub delivered: usize,
    pub dropped: usize,
    pub corrupt: usize,
    pub failed: usize,
    pub seg_identical: usize,
    pub mean_compressed_bytes: f64,
    pub mean_frame_bytes: f64,
    pub mean_ratio_onehot: f64,
    pub mean_ratio_packed: f64,
    pub modalities: Vec<ModalityAggregate>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut n, mut s) = (0usize, 0.0);
    for v in values {
        n += 1;
        s += v;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl Aggregate {
    pub fn from_scenes(scenes: &[SceneRecord]) -> Self {
        let count = |st| scenes.iter().filter(|s| s.status == st).count();
        let mut names: Vec<&str> = Vec::new();
        for s in scenes {
            for m in &s.metrics {
                if !names.contains(&m.modality.as_str()) {
                    names.push(&m.modality);
                }
            }
        }
        let modalities = names
            .into_iter()
            .map(|name| {
                let rows: Vec<&ModalityMetrics> = scenes
                    .iter()
                    .flat_map(|s| &s.metrics)
                    .filter(|m| m.modality == name)
                    .collect();
                let avg = |f: fn(&ModalityMetrics) -> f64| mean(rows.iter().map(|m| f(m)));
                ModalityAggregate {
                    modality: name.to_string(),
                    scenes: rows.len(),
                    mse: avg(|m| m.mse),
                    psnr: avg(|m| m.psnr),
                    pixel_accuracy: avg(|m| m.pixel_accuracy),
                    miou: avg(|m| m.miou),
                    classification_accuracy: avg(|m| m.classification_accuracy),
                }
            })
            .collect();
        Self {
            scenes: scenes.len(),
            delivered: count(SceneStatus::Delivered),
            dropped: count(SceneStatus::Dropped),
            corrupt: count(SceneStatus::Corrupt),
            failed: count(SceneStatus::Failed),
            seg_identical: scenes.iter().filter(|s| s.seg_identical == Some(true)).count(),
            mean_compressed_bytes: mean(scenes.iter().map(|s| s.compression.compressed_bytes as f64)),
            mean_frame_bytes: mean(scenes.iter().map(|s| s.compression.frame_bytes as f64)),
            mean_ratio_onehot: mean(scenes.iter().map(|s| s.compression.ratio_onehot)),
            mean_ratio_packed: mean(scenes.iter().map(|s| s.compression.ratio_packed)),
            modalities,
        }
    }

    pub fn modality(&self, m: ModalityId) -> Option<&ModalityAggregate> {
        self.modalities.iter().find(|a| a.modality == m.name())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "scenes {} delivered {} dropped {} corrupt {} failed {} seg_identical {}",
            self.scenes, self.delivered, self.dropped, self.corrupt, self.failed, self.seg_identical
        )
        .unwrap();
        writeln!(
            s,
            "payload {:.1} B  frame {:.1} B  ratio_onehot {:.2}  ratio_packed {:.2}",
            self.mean_compressed_bytes, self.mean_frame_bytes, self.mean_ratio_onehot, self.mean_ratio_packed
        )
        .unwrap();
        for m in &self.modalities {
            writeln!(
                s,
                "{:<4} n {:>4}  mse {:.6}  psnr {:.3} dB  pixel_acc {:.4}  miou {:.4}  cls_acc {:.4}",
                m.modality, m.scenes, m.mse, m.psnr, m.pixel_accuracy, m.miou, m.classification_accuracy
            )
            .unwrap();
        }
        s
    }
}

pub struct EvalReport {
    /// Canonical text of the configuration used, for provenance.
    pub config: String,
    pub scenes: Vec<SceneRecord>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn new(config: String, scenes: Vec<SceneRecord>) -> Self {
        let aggregate = Aggregate::from_scenes(&scenes);
        Self {
            config,
            scenes,
            aggregate,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# configuration\n");
        for line in self.config.lines() {
            writeln!(s, "#   {line}").unwrap();
        }
        s.push_str("\n# aggregate\n");
        s.push_str(&self.aggregate.to_text());
        s.push_str("\n# scenes\n");
        for r in &self.scenes {
            write!(
                s,
                "scene {:>4} {:<9} payload {:>5} B",
                r.scene,
                format!("{:?}", r.status).to_lowercase(),
                r.compression.compressed_bytes
            )
            .unwrap();
            for m in &r.metrics {
                write!(
                    s,
                    "  {} psnr {:.2} acc {:.3} miou {:.3} cls {:.3}",
                    m.modality, m.psnr, m.pixel_accuracy, m.miou, m.classification_accuracy
                )
                .unwrap();
            }
            if let Some(e) = &r.error {
                write!(s, "  error: {e}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// One JSON object per scene, one per line.
    pub fn to_records(&self) -> String {
        records_text(&self.scenes)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join(REPORT_TEXT), self.to_text())?;
        write_file(&dir.join(REPORT_RECORDS), self.to_records())
    }
}

pub fn records_text(scenes: &[SceneRecord]) -> String {
    let mut s = String::new();
    for r in scenes {
        s.push_str(&serde_json::to_string(r).expect("scene records serialize"));
        s.push('\n');
    }
    s
}

/// Reads `report.jsonl` back.
pub fn read_records(path: &Path) -> Result<Vec<SceneRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Report {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// What the receiver did with one scene.
pub struct SceneOutcome {
    pub record: SceneRecord,
    pub frame: Vec<u8>,
    pub images: Vec<(ModalityId, Image)>,
}

fn modality_metrics(
    scene: &ScenePair,
    palette: &ClassPalette,
    m: ModalityId,
    image: &Image,
    seed: u64,
) -> Result<ModalityMetrics> {
    let original = match m {
        ModalityId::Rgb => &scene.rgb,
        ModalityId::Ir => &scene.ir,
    };
    let shape = |e: crate::metrics::ShapeMismatch| PipelineError::Image(ImageError::Shape(e.0));
    let truth = label_components(scene.seg.labels(), scene.seg.width(), scene.seg.height());
    let pred = detect_blobs(image, palette, m).map_err(shape)?;
    Ok(ModalityMetrics {
        modality: m.name().to_string(),
        sample_seed: seed,
        mse: image_mse(image, original).map_err(shape)?,
        psnr: psnr(image, original).map_err(shape)?,
        pixel_accuracy: pixel_accuracy(image, &scene.seg, palette, m).map_err(shape)?,
        miou: miou(&pred, &truth),
        classification_accuracy: classification_accuracy(&pred, &truth),
    })
}

/// Sender, channel and receiver for one scene. Errors end up in the record.
pub fn process_scene<T: Scalar>(
    cfg: &RunConfig,
    rx: &Receiver<T>,
    palette: &ClassPalette,
    index: usize,
    scene: &ScenePair,
) -> SceneOutcome {
    let frame = encode_frame(&scene.seg, cfg.modality_mask());
    let mut record = SceneRecord {
        scene: index,
        status: SceneStatus::Delivered,
        error: None,
        compression: measure_compression(&scene.seg),
        seg_identical: None,
        metrics: Vec::new(),
    };
    let mut images = Vec::new();
    let Some(received) = cfg.channel.transmit(&frame, index as u64) else {
        record.status = SceneStatus::Dropped;
        return SceneOutcome { record, frame, images };
    };
    let (seg, mask) = match decode_frame(&received) {
        Ok(v) => v,
        Err(e) => {
            record.status = SceneStatus::Corrupt;
            record.error = Some(e.to_string());
            return SceneOutcome { record, frame, images };
        }
    };
    record.seg_identical = Some(seg == scene.seg);
    for m in ModalityId::ALL.into_iter().filter(|m| mask & m.mask_bit() != 0) {
        let seed = sample_seed(cfg.sample_seed, index, m);
        let result = rx
            .reconstruct(&seg, m, seed)
            .and_then(|img| Ok((modality_metrics(scene, palette, m, &img, seed)?, img)));
        match result {
            Ok((metrics, img)) => {
                record.metrics.push(metrics);
                images.push((m, img));
            }
            Err(e) => {
                record.status = SceneStatus::Failed;
                record.error = Some(format!("{m}: {e}"));
                record.metrics.clear();
                images.clear();
                break;
            }
        }
    }
    SceneOutcome { record, frame, images }
}

/// Runs every scene through the link. Scenes are independent and run in
/// parallel; the order of the output follows the input.
pub fn evaluate<T: Scalar>(
    cfg: &RunConfig,
    rx: &Receiver<T>,
    palette: &ClassPalette,
    scenes: &[ScenePair],
) -> Vec<SceneOutcome> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| process_scene(cfg, rx, palette, i, s))
        .collect()
}

fn run_typed<T: Scalar>(cfg: &RunConfig, scenes: &[ScenePair]) -> Result<EvalReport> {
    let rx = Receiver::<T>::load(cfg)?;
    let outcomes = evaluate(cfg, &rx, &eval_palette(cfg)?, scenes);
    let out = &cfg.output_dir;
    for o in &outcomes {
        let i = o.record.scene;
        write_file(&out.join("frames").join(format!("scene_{i}.frame")), &o.frame)?;
        for (m, img) in &o.images {
            let path = out.join("images").join(format!("scene_{i}.{}", m.extension()));
            std::fs::create_dir_all(path.parent().unwrap()).map_err(io_err(out))?;
            img.save(&path)?;
        }
    }
    let report = EvalReport::new(cfg.to_text(), outcomes.into_iter().map(|o| o.record).collect());
    report.write(out)?;
    Ok(report)
}

/// Evaluates the configured corpus with trained weights and writes frames,
/// reconstructions, the report and the runtime into the output directory.
pub fn run_end_to_end(cfg: &RunConfig) -> Result<EvalReport> {
    let start = std::time::Instant::now();
    let scenes = eval_corpus(cfg)?;
    let report = match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, &scenes)?,
        Precision::F64 => run_typed::<f64>(cfg, &scenes)?,
    };
    write_file(
        &cfg.output_dir.join(RUNTIME_FILE),
        format!("eval_seconds = {:.3}\n", start.elapsed().as_secs_f64()),
    )?;
    Ok(report)
}

/// Receiver side of the command line: decodes a frame file and writes one
/// image per modality the frame asks for. Returns the decoded map and the
/// paths written.
pub fn receive_frame(cfg: &RunConfig, frame: &[u8], out_dir: &Path, seed: u64) -> Result<(SegMap, Vec<PathBuf>)> {
    let (seg, mask) = decode_frame(frame)?;
    let mut written = Vec::new();
    macro_rules! run {
        ($t:ty) => {{
            let rx = Receiver::<$t>::load(cfg)?;
            for m in ModalityId::ALL.into_iter().filter(|m| mask & m.mask_bit() != 0) {
                let img = rx.reconstruct(&seg, m, sample_seed(seed, 0, m))?;
                let path = out_dir.join(format!("recon_{}.{}", m.name(), m.extension()));
                std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
                img.save(&path)?;
                written.push(path);
            }
        }};
    }
    match cfg.precision {
        Precision::F32 => run!(f32),
        Precision::F64 => run!(f64),
    }
    seg.save(out_dir.join("received.segmap"))?;
    Ok((seg, written))
}

impl From<NeuralError> for PipelineError {
    fn from(e: NeuralError) -> Self {
        PipelineError::Autoencoder(AeError::Neural(e))
    }
}
