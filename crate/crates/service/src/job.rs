//! Job payloads, records, validation and execution.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use diss_core::dataprep::{decode_png_bytes, encode_png_bytes, extract_sketch_stroke, overlay_drawing, to_rgb};
use diss_core::sampler::{default_cutoff, local_edit, region_fill, sample_diss};
use diss_core::{Checkpoint, DissError, EditRequest, GuidanceScales, ImageF32, NoiseSchedule, RealismConfig, SampleRequest, UNetF32};

use crate::error::{Result, ServiceError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Generate,
    Edit,
    Fill,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            JobStatus::Queued => "queued",
            JobStatus::Running => "running",
            JobStatus::Done => "done",
            JobStatus::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

fn default_scale() -> f64 {
    2.0
}

fn default_realism() -> f64 {
    RealismConfig::default().s_realism
}

/// Body of `POST /api/jobs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobRequest {
    pub kind: String,
    pub comb_png_b64: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_png_b64: Option<String>,
    #[serde(default = "default_scale")]
    pub s_sketch: f64,
    #[serde(default = "default_scale")]
    pub s_stroke: f64,
    #[serde(default = "default_realism")]
    pub s_realism: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, rename = "refine_cutoff_R", skip_serializing_if = "Option::is_none")]
    pub refine_cutoff_r: Option<usize>,
}

impl JobRequest {
    pub fn generate(comb_png: &[u8], seed: u64) -> Self {
        JobRequest {
            kind: "generate".into(),
            comb_png_b64: B64.encode(comb_png),
            original_png_b64: None,
            s_sketch: default_scale(),
            s_stroke: default_scale(),
            s_realism: default_realism(),
            seed,
            refine_cutoff_r: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: JobKind,
    pub request: JobRequest,
    pub status: JobStatus,
    pub created: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl JobRecord {
    pub fn new(id: String, kind: JobKind, request: JobRequest) -> Self {
        JobRecord {
            id,
            kind,
            request,
            status: JobStatus::Queued,
            created: now(),
            finished: None,
            output: None,
            error: None,
        }
    }

    /// Applies a forward transition: queued -> running -> done | failed.
    pub fn advance(&mut self, to: JobStatus) -> Result<()> {
        let ok = matches!(
            (self.status, to),
            (JobStatus::Queued, JobStatus::Running) | (JobStatus::Running, JobStatus::Done) | (JobStatus::Running, JobStatus::Failed)
        );
        if !ok {
            return Err(ServiceError::Transition {
                from: self.status.as_str(),
                to: to.as_str(),
            });
        }
        self.status = to;
        if to.is_terminal() {
            self.finished = Some(now());
        }
        Ok(())
    }

    /// Recovery after a crash: unfinished jobs go back to the queue.
    pub fn requeue(&mut self) {
        if !self.status.is_terminal() {
            self.status = JobStatus::Queued;
        }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// A loaded checkpoint ready for sampling.
pub struct Model {
    pub net: UNetF32,
    pub schedule: NoiseSchedule,
    pub checkpoint_sha256: String,
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> diss_core::Result<Self> {
        Ok(Model {
            net: ckpt.to_unet()?,
            schedule: ckpt.meta.schedule.build()?,
            checkpoint_sha256: ckpt.payload_sha256().to_string(),
        })
    }

    pub fn image_size(&self) -> usize {
        self.net.config().image_size
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }
}

/// Decoded and checked inputs of a job.
#[derive(Debug)]
pub struct JobInputs {
    pub kind: JobKind,
    pub comb: ImageF32,
    pub original: Option<ImageF32>,
    pub scales: GuidanceScales,
    pub realism: RealismConfig,
    pub cutoff: usize,
    pub seed: u64,
}

fn field_error(e: DissError) -> ServiceError {
    match e {
        DissError::InvalidRange { name, reason } => ServiceError::validation(name, reason),
        other => ServiceError::Core(other),
    }
}

fn decode_image(field: &str, b64: &str, size: usize) -> Result<ImageF32> {
    let bytes = B64.decode(b64.trim()).map_err(|e| ServiceError::validation(field, format!("not valid base64: {e}")))?;
    let img = decode_png_bytes::<f32>(&bytes)
        .and_then(to_rgb)
        .map_err(|e| ServiceError::validation(field, format!("not a decodable PNG: {e}")))?;
    if img.height() != size || img.width() != size {
        return Err(ServiceError::validation(
            field,
            format!("image size {}x{} does not match model size {size}x{size}", img.width(), img.height()),
        ));
    }
    Ok(img)
}

/// Checks a request against a model of side `size` with `steps` timesteps.
pub fn validate(req: &JobRequest, size: usize, steps: usize) -> Result<JobInputs> {
    let kind = match req.kind.as_str() {
        "generate" => JobKind::Generate,
        "edit" => JobKind::Edit,
        "fill" => JobKind::Fill,
        other => {
            return Err(ServiceError::validation("kind", format!("expected generate, edit or fill, got {other:?}")));
        }
    };
    let scales = GuidanceScales::new(req.s_sketch, req.s_stroke).map_err(field_error)?;
    let realism = RealismConfig::new(req.s_realism);
    realism.size_for(size).map_err(field_error)?;
    let cutoff = req.refine_cutoff_r.unwrap_or_else(|| default_cutoff(steps));
    if cutoff > steps {
        return Err(ServiceError::validation("refine_cutoff_R", format!("must lie in [0, {steps}], got {cutoff}")));
    }
    let comb = decode_image("comb_png_b64", &req.comb_png_b64, size)?;
    let original = match (&req.original_png_b64, kind) {
        (Some(b64), _) => Some(decode_image("original_png_b64", b64, size)?),
        (None, JobKind::Edit) => return Err(ServiceError::validation("original_png_b64", "required for edit jobs")),
        (None, _) => None,
    };
    Ok(JobInputs {
        kind,
        comb,
        original,
        scales,
        realism,
        cutoff,
        seed: req.seed,
    })
}

/// Runs a job to completion and returns the output PNG bytes.
///
/// The output depends only on the request and the checkpoint.
pub fn execute(req: &JobRequest, model: &Model) -> Result<Vec<u8>> {
    let inputs = validate(req, model.image_size(), model.steps())?;
    let out = run(&inputs, model)?;
    Ok(encode_png_bytes(&out)?)
}

pub fn run(inputs: &JobInputs, model: &Model) -> diss_core::Result<ImageF32> {
    let (sketch, stroke) = extract_sketch_stroke(&inputs.comb)?;
    let mut sample = SampleRequest::new(sketch, stroke, inputs.seed);
    sample.scales = inputs.scales;
    sample.realism = Some(inputs.realism);
    match inputs.kind {
        JobKind::Generate => sample_diss(&sample, &model.net, &model.schedule),
        JobKind::Edit => {
            let original = inputs.original.as_ref().ok_or(DissError::Empty("original image"))?;
            sample.c_comb = Some(overlay_drawing(original, &inputs.comb)?);
            let req = EditRequest { sample, cutoff: inputs.cutoff };
            local_edit(&req, &model.net, &model.schedule)
        }
        JobKind::Fill => {
            let req = EditRequest { sample, cutoff: inputs.cutoff };
            region_fill(&req, &model.net, &model.schedule)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req() -> JobRequest {
        let img = ImageF32::filled(3, 8, 8, 1.0);
        JobRequest::generate(&encode_png_bytes(&img).unwrap(), 3)
    }

    fn field_of(e: ServiceError) -> String {
        match e {
            ServiceError::Validation { field, .. } => field,
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn valid_request_passes() {
        let inputs = validate(&req(), 8, 10).unwrap();
        assert_eq!(inputs.kind, JobKind::Generate);
        assert_eq!(inputs.cutoff, 2);
    }

    #[test]
    fn errors_name_the_field() {
        let mut r = req();
        r.s_realism = 1.5;
        assert_eq!(field_of(validate(&r, 8, 10).unwrap_err()), "s_realism");
        let mut r = req();
        r.s_stroke = -1.0;
        assert_eq!(field_of(validate(&r, 8, 10).unwrap_err()), "s_stroke");
        let mut r = req();
        r.kind = "paint".into();
        assert_eq!(field_of(validate(&r, 8, 10).unwrap_err()), "kind");
        let mut r = req();
        r.refine_cutoff_r = Some(11);
        assert_eq!(field_of(validate(&r, 8, 10).unwrap_err()), "refine_cutoff_R");
        let mut r = req();
        r.kind = "edit".into();
        assert_eq!(field_of(validate(&r, 8, 10).unwrap_err()), "original_png_b64");
        let mut r = req();
        r.comb_png_b64 = "!!".into();
        assert_eq!(field_of(validate(&r, 8, 10).unwrap_err()), "comb_png_b64");
    }

    #[test]
    fn wrong_size_is_rejected() {
        let e = validate(&req(), 16, 10).unwrap_err();
        assert!(e.to_string().contains("image size 8x8"), "{e}");
        assert_eq!(field_of(e), "comb_png_b64");
    }

    #[test]
    fn transitions_only_move_forward() {
        let mut rec = JobRecord::new("a".into(), JobKind::Generate, req());
        assert!(rec.advance(JobStatus::Done).is_err());
        rec.advance(JobStatus::Running).unwrap();
        assert!(rec.advance(JobStatus::Queued).is_err());
        rec.advance(JobStatus::Done).unwrap();
        assert!(rec.finished.is_some());
        assert!(rec.advance(JobStatus::Failed).is_err());
        rec.requeue();
        assert_eq!(rec.status, JobStatus::Done);
    }

    #[test]
    fn request_json_uses_wire_names() {
        let mut r = req();
        r.refine_cutoff_r = Some(4);
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["refine_cutoff_R"], 4);
        let back: JobRequest = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
        let bad = serde_json::json!({ "kind": "generate", "comb_png_b64": "", "bogus": 1 });
        assert!(serde_json::from_value::<JobRequest>(bad).is_err());
    }
}
