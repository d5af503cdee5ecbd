//! Subcommand arguments and implementations.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use diss_core::checkpoint::checkpoint_path;
use diss_core::dataprep::{decode_png, encode_png, extract_sketch_stroke, load_dataset, to_rgb, write_dataset};
use diss_core::metrics::{median, realism_tradeoff_curve, sketch_consistency, stroke_distance, DEFAULT_SWEEP};
use diss_core::realism::{DEFAULT_DIVISOR, OBJECT_OFFSET};
use diss_core::sampler::{default_cutoff, sample_diss};
use diss_core::training::{
    stage_split, train_stage, JsonlLossLog, LossRecord, TrainObserver, DEFAULT_BATCH, DEFAULT_DROPOUT, DEFAULT_LR,
    DEFAULT_STAGE1_FRACTION, DEFAULT_VLB_WEIGHT,
};
use diss_core::{
    Checkpoint, GuidanceScales, ImageF32, RealismConfig, SampleRequest, ScheduleConfig, TrainConfig, UNetConfig, UNetF32,
};
use diss_service::job::{run, JobInputs};
use diss_service::{JobKind, Model, Service, ServiceConfig};

use crate::error::CliError;

type Result<T, E = CliError> = std::result::Result<T, E>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn required<T>(v: &Option<T>, flag: &str) -> Result<T>
where
    T: Clone,
{
    v.clone().ok_or_else(|| invalid(format!("missing required --{flag}")))
}

fn existing(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(invalid(format!("{what} not found: {}", path.display())))
    }
}

fn load_model(ckpt: &Path, sample_steps: Option<usize>) -> Result<Model> {
    existing(ckpt, "checkpoint")?;
    let mut model = Model::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    if let Some(k) = sample_steps {
        model.schedule = model.schedule.respaced(k)?;
    }
    Ok(model)
}

fn load_rgb(path: &Path, size: usize, what: &str) -> Result<ImageF32> {
    existing(path, what)?;
    let img = to_rgb(decode_png::<f32>(path)?)?;
    if img.height() != size || img.width() != size {
        return Err(invalid(format!(
            "{what} {} is {}x{}, model size is {size}x{size}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(img)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Image side in pixels (at least 16).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenDataArgs {
    pub fn with_defaults(mut self) -> Self {
        self.count.get_or_insert(2000);
        self.size.get_or_insert(32);
        self.seed.get_or_insert(0);
        self
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let out = required(&a.out, "out")?;
    let manifest = write_dataset(&out, a.seed.unwrap(), a.count.unwrap(), a.size.unwrap())?;
    print_json(&serde_json::to_value(&manifest)?);
    Ok(())
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// 1, 2, or "both" (stage one then stage two, split by --stage1-fraction).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Checkpoint to continue from; required for stage 2.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt_in: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt_out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vlb_weight: Option<f64>,
    /// Per-condition replacement probability in stage 2.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1_fraction: Option<f64>,
    /// Network size for a fresh model: "desk" or "tiny".
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<String>,
    /// Chain length T for a fresh model.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diffusion_steps: Option<usize>,
    /// First beta of the linear schedule; defaults to 1e-4 scaled by 1000 / T.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_start: Option<f64>,
    /// Last beta of the linear schedule; defaults to 0.02 scaled by 1000 / T.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_end: Option<f64>,
    /// Also save a checkpoint every this many steps (0 disables).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    /// Loss log; defaults to the output checkpoint path with a .losses.jsonl extension.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
}

impl TrainArgs {
    pub fn with_defaults(mut self) -> Self {
        self.stage.get_or_insert_with(|| "1".into());
        self.steps.get_or_insert(1000);
        self.seed.get_or_insert(0);
        self.batch_size.get_or_insert(DEFAULT_BATCH);
        self.lr.get_or_insert(DEFAULT_LR);
        self.vlb_weight.get_or_insert(DEFAULT_VLB_WEIGHT);
        self.dropout.get_or_insert(DEFAULT_DROPOUT);
        self.stage1_fraction.get_or_insert(DEFAULT_STAGE1_FRACTION);
        self.arch.get_or_insert_with(|| "desk".into());
        let scaled = ScheduleConfig::scaled_linear(*self.diffusion_steps.get_or_insert(1000));
        self.beta_start.get_or_insert(scaled.beta_start);
        self.beta_end.get_or_insert(scaled.beta_end);
        self.checkpoint_every.get_or_insert(0);
        if self.log.is_none() {
            self.log = self.ckpt_out.as_ref().map(|p| p.with_extension("losses.jsonl"));
        }
        self
    }
}

pub fn arch_config(name: &str, image_size: usize) -> Result<UNetConfig> {
    match name {
        "desk" => Ok(UNetConfig {
            image_size,
            ..UNetConfig::default()
        }),
        "tiny" => Ok(UNetConfig::tiny(image_size)),
        other => Err(invalid(format!("unknown --arch {other:?} (expected desk or tiny)"))),
    }
}

/// Forwards losses to the log and writes periodic checkpoints.
struct TrainSink {
    log: JsonlLossLog,
    ckpt_root: PathBuf,
    run: String,
    schedule: ScheduleConfig,
    step_offset: u64,
    stage_steps: usize,
    last: Option<LossRecord>,
}

impl TrainObserver<f32> for TrainSink {
    fn on_loss(&mut self, record: &LossRecord) -> diss_core::Result<()> {
        self.last = Some(*record);
        TrainObserver::<f32>::on_loss(&mut self.log, record)
    }

    fn on_checkpoint(&mut self, stage: u8, step: usize, net: &UNetF32) -> diss_core::Result<()> {
        let global = self.step_offset + step as u64;
        let path = checkpoint_path(&self.ckpt_root, &self.run, global);
        let completed = if step == self.stage_steps { stage } else { stage - 1 };
        Checkpoint::from_unet(net, self.schedule, completed, global).save(path)
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let data_dir = required(&a.data, "data")?;
    let ckpt_out = required(&a.ckpt_out, "ckpt-out")?;
    existing(&data_dir, "dataset")?;
    let stages: Vec<u8> = match a.stage.as_deref().unwrap() {
        "1" => vec![1],
        "2" => vec![2],
        "both" => vec![1, 2],
        other => return Err(invalid(format!("--stage must be 1, 2 or both, got {other:?}"))),
    };
    if stages == [2] && a.ckpt_in.is_none() {
        return Err(invalid("stage 2 needs --ckpt-in pointing at a stage-1 checkpoint"));
    }
    let fraction = a.stage1_fraction.unwrap();
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid(format!("--stage1-fraction must lie in [0, 1], got {fraction}")));
    }
    let dataset = load_dataset::<f32>(&data_dir)?;
    let size = dataset.manifest.size;

    let (mut net, schedule_cfg, mut completed, mut step) = match &a.ckpt_in {
        Some(p) => {
            existing(p, "checkpoint")?;
            let c = Checkpoint::load(p)?;
            (c.to_unet::<f32>()?, c.meta.schedule, c.meta.stage, c.meta.step)
        }
        None => {
            let cfg = arch_config(a.arch.as_deref().unwrap(), size)?;
            let net = UNetF32::new(cfg, a.seed.unwrap())?;
            let sc = ScheduleConfig {
                steps: a.diffusion_steps.unwrap(),
                beta_start: a.beta_start.unwrap(),
                beta_end: a.beta_end.unwrap(),
            };
            (net, sc, 0, 0)
        }
    };
    if net.config().image_size != size {
        return Err(invalid(format!(
            "dataset images are {size}x{size} but the model expects {0}x{0}",
            net.config().image_size
        )));
    }
    let schedule = schedule_cfg.build()?;
    let total = a.steps.unwrap();
    let budgets = if stages.len() == 2 {
        let (s1, s2) = stage_split(total, fraction);
        vec![s1, s2]
    } else {
        vec![total]
    };

    let log_path = a.log.clone().unwrap();
    if log_path.exists() {
        fs::remove_file(&log_path)?;
    }
    let mut sink = TrainSink {
        log: JsonlLossLog::open(&log_path)?,
        ckpt_root: ckpt_out.parent().map(Path::to_path_buf).unwrap_or_default(),
        run: ckpt_out
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into()),
        schedule: schedule_cfg,
        step_offset: step,
        stage_steps: 0,
        last: None,
    };
    for (&stage, &steps) in stages.iter().zip(&budgets) {
        if steps == 0 {
            continue;
        }
        let cfg = TrainConfig {
            batch_size: a.batch_size.unwrap(),
            learning_rate: a.lr.unwrap(),
            vlb_weight: a.vlb_weight.unwrap(),
            dropout: a.dropout.unwrap(),
            stage,
            steps,
            seed: a.seed.unwrap(),
            checkpoint_every: a.checkpoint_every.unwrap(),
        };
        sink.step_offset = step;
        sink.stage_steps = steps;
        net = train_stage(&dataset.examples, net, completed, &cfg, &schedule, &mut sink)?;
        completed = completed.max(stage);
        step += steps as u64;
    }
    let ckpt = Checkpoint::from_unet(&net, schedule_cfg, completed, step);
    ckpt.save(&ckpt_out)?;
    print_json(&json!({
        "checkpoint": ckpt_out,
        "payload_sha256": ckpt.payload_sha256(),
        "completed_stage": completed,
        "step": step,
        "final_loss": sink.last,
        "loss_log": log_path,
    }));
    Ok(())
}

/// Guidance and realism settings shared by the sampling commands.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SampleArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt: Option<PathBuf>,
    /// Combined drawing (black lines over colored strokes on white).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comb: Option<PathBuf>,
    /// Original image to edit (edit only).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub original: Option<PathBuf>,
    /// Drawing made on top of the original (edit only).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drawing: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_sketch: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_stroke: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_realism: Option<f64>,
    /// Low-pass divisor d in the realism formula.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divisor: Option<f64>,
    /// Low-pass offset k in the realism formula.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<u32>,
    /// Refinement stops once t reaches this value (edit and fill).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refine_cutoff: Option<usize>,
    /// Sample with a respaced chain of this many steps.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl SampleArgs {
    pub fn with_defaults(mut self) -> Self {
        self.s_sketch.get_or_insert(2.0);
        self.s_stroke.get_or_insert(2.0);
        self.s_realism.get_or_insert(RealismConfig::default().s_realism);
        self.divisor.get_or_insert(DEFAULT_DIVISOR);
        self.offset.get_or_insert(OBJECT_OFFSET);
        self.seed.get_or_insert(0);
        self
    }
}

/// Runs `sample`, `edit` or `fill`.
pub fn sample(a: &SampleArgs, kind: JobKind) -> Result<()> {
    let ckpt = required(&a.ckpt, "ckpt")?;
    let out = required(&a.out, "out")?;
    let model = load_model(&ckpt, a.sample_steps)?;
    let size = model.image_size();
    let steps = model.steps();
    let (comb, original) = match kind {
        JobKind::Edit => {
            if a.comb.is_some() {
                return Err(invalid("edit takes --original and --drawing, not --comb"));
            }
            let original = load_rgb(&required(&a.original, "original")?, size, "original image")?;
            let drawing = load_rgb(&required(&a.drawing, "drawing")?, size, "drawing")?;
            (drawing, Some(original))
        }
        _ => (load_rgb(&required(&a.comb, "comb")?, size, "drawing")?, None),
    };
    let realism = RealismConfig {
        s_realism: a.s_realism.unwrap(),
        divisor: a.divisor.unwrap(),
        offset: a.offset.unwrap(),
    };
    let n = realism.size_for(size)?;
    let cutoff = match kind {
        JobKind::Generate => 0,
        _ => a.refine_cutoff.unwrap_or_else(|| default_cutoff(steps)),
    };
    if cutoff > steps {
        return Err(invalid(format!("--refine-cutoff must lie in [0, {steps}], got {cutoff}")));
    }
    let inputs = JobInputs {
        kind,
        comb,
        original,
        scales: GuidanceScales::new(a.s_sketch.unwrap(), a.s_stroke.unwrap())?,
        realism,
        cutoff,
        seed: a.seed.unwrap(),
    };
    let output = run(&inputs, &model)?;
    encode_png(&output, &out)?;
    let (sketch, _) = extract_sketch_stroke(&inputs.comb)?;
    let reference = match &inputs.original {
        Some(o) => diss_core::dataprep::overlay_drawing(o, &inputs.comb)?,
        None => inputs.comb.clone(),
    };
    print_json(&json!({
        "out": out,
        "n": n,
        "refine_cutoff": cutoff,
        "sketch_consistency": sketch_consistency(&output, &sketch)?,
        "stroke_distance": stroke_distance(&output, &reference)?,
    }));
    Ok(())
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt: Option<PathBuf>,
    /// Dataset directory; conditions are taken from its examples.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Realism values, comma separated, sorted descending.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_realism: Option<Vec<f64>>,
    /// Guidance values for the s_sketch x s_stroke grid.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_scales: Option<Vec<f64>>,
    /// Realism used for the guidance grid.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_realism: Option<f64>,
    /// Number of seeds per setting.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<u64>,
    /// Index of the dataset example that supplies the conditions.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub example: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_steps: Option<usize>,
    /// Directory for report.jsonl and grid.json.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl EvalArgs {
    pub fn with_defaults(mut self) -> Self {
        self.sweep_realism.get_or_insert_with(|| DEFAULT_SWEEP.to_vec());
        self.grid_scales.get_or_insert_with(|| vec![0.0, 1.0, 2.0, 3.0]);
        self.s_realism.get_or_insert(RealismConfig::default().s_realism);
        self.seeds.get_or_insert(5);
        self.example.get_or_insert(0);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub s_sketch: f64,
    pub s_stroke: f64,
    pub median_sketch: f64,
    pub median_stroke: f64,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = required(&a.ckpt, "ckpt")?;
    let data = required(&a.data, "data")?;
    existing(&data, "dataset")?;
    let model = load_model(&ckpt, a.sample_steps)?;
    let dataset = load_dataset::<f32>(&data)?;
    let idx = a.example.unwrap();
    let ex = dataset
        .examples
        .get(idx)
        .ok_or_else(|| invalid(format!("--example {idx} out of range (dataset has {})", dataset.examples.len())))?;
    if ex.size() != model.image_size() {
        return Err(invalid(format!(
            "dataset images are {0}x{0}, model size is {1}x{1}",
            ex.size(),
            model.image_size()
        )));
    }
    let seeds: Vec<u64> = (0..a.seeds.unwrap()).collect();
    let base = SampleRequest::new(ex.sketch.clone(), ex.stroke.clone(), 0);
    let report = realism_tradeoff_curve(&model.net, &base, a.sweep_realism.as_ref().unwrap(), &seeds, &model.schedule)?;

    let scales = a.grid_scales.as_ref().unwrap();
    let reference = base.reference();
    let mut grid = Vec::new();
    for &sk in scales {
        for &st in scales {
            let mut sketch_d = Vec::new();
            let mut stroke_d = Vec::new();
            for &seed in &seeds {
                let req = SampleRequest {
                    scales: GuidanceScales::new(sk, st)?,
                    realism: Some(RealismConfig::new(a.s_realism.unwrap())),
                    seed,
                    ..base.clone()
                };
                let out = sample_diss(&req, &model.net, &model.schedule)?;
                sketch_d.push(sketch_consistency(&out, &ex.sketch)?);
                stroke_d.push(stroke_distance(&out, &reference)?);
            }
            grid.push(GridCell {
                s_sketch: sk,
                s_stroke: st,
                median_sketch: median(&sketch_d),
                median_stroke: median(&stroke_d),
            });
        }
    }

    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        diss_core::write_atomic(dir.join("report.jsonl"), report.to_jsonl()?.as_bytes())?;
        diss_core::write_atomic(dir.join("grid.json"), &serde_json::to_vec_pretty(&grid)?)?;
    }
    println!("s_realism\tN\tmedian_sketch\tmedian_stroke");
    for p in &report.points {
        println!("{}\t{}\t{:.4}\t{:.4}", p.s_realism, p.n, p.median_sketch, p.median_stroke);
    }
    println!(
        "stroke spearman {:.4}, inversions {}",
        report.stroke_spearman()?,
        report.stroke_inversions()
    );
    println!();
    print!("s_sketch \\ s_stroke");
    for st in scales {
        print!("\t{st}");
    }
    println!();
    for (i, sk) in scales.iter().enumerate() {
        print!("{sk}");
        for cell in &grid[i * scales.len()..(i + 1) * scales.len()] {
            print!("\t{:.3}/{:.3}", cell.median_sketch, cell.median_stroke);
        }
        println!();
    }
    Ok(())
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ServeArgs {
    /// Defaults to $DISS_CHECKPOINT.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt: Option<PathBuf>,
    /// Defaults to $DISS_PORT, then 8080. Port 0 picks a free port.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub host: Option<String>,
    /// Defaults to $DISS_DATA_DIR, then ./diss-data.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queue_capacity: Option<usize>,
}

impl ServeArgs {
    pub fn with_defaults(mut self) -> Result<Self> {
        let env = ServiceConfig::from_env()?;
        if self.ckpt.is_none() {
            self.ckpt = env.checkpoint;
        }
        self.port.get_or_insert(env.port);
        self.host.get_or_insert_with(|| "127.0.0.1".into());
        self.data_dir.get_or_insert(env.data_dir);
        self.workers.get_or_insert(env.workers);
        self.queue_capacity.get_or_insert(env.queue_capacity);
        Ok(self)
    }
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let ckpt = a
        .ckpt
        .clone()
        .ok_or_else(|| invalid("missing checkpoint: pass --ckpt or set DISS_CHECKPOINT"))?;
    existing(&ckpt, "checkpoint")?;
    let cfg = ServiceConfig {
        data_dir: a.data_dir.clone().unwrap(),
        checkpoint: Some(ckpt),
        port: a.port.unwrap(),
        workers: a.workers.unwrap(),
        queue_capacity: a.queue_capacity.unwrap(),
    };
    let service = Service::start_strict(&cfg)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_deref().unwrap(), cfg.port)).await?;
        println!("listening on http://{}", listener.local_addr()?);
        diss_service::serve(service, listener, diss_service::shutdown_signal()).await
    })?;
    Ok(())
}
