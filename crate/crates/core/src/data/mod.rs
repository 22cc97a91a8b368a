//! Dataset ingestion and synthetic data.

pub mod manifest;
pub mod synthetic;

use rayon::prelude::*;

pub use manifest::{load_manifest, parse_manifest, Manifest, MotionSource, Sample};
pub use synthetic::{generate_synthetic, LabelMode, Region, SyntheticOutput, SyntheticSpec};

use crate::config::Config;
use crate::error::Result;
use crate::model::PreparedSample;
use crate::preprocess::{
    au_token_indices, compute_flow, magnify_flow, render_flow_image, FlowField, Frame, Landmarks, LucasKanade,
};
use crate::task::AuTaskSpec;

/// Flow field of a sample, estimated from its frames or read from disk.
pub fn sample_flow(sample: &Sample) -> Result<FlowField> {
    match &sample.motion {
        MotionSource::Flow(path) => FlowField::load(path),
        MotionSource::Frames { onset, apex } => {
            compute_flow(&Frame::load(onset)?, &Frame::load(apex)?, &LucasKanade::default())
        }
    }
}

/// Flow, magnification, rendering and landmark-to-token mapping for one
/// sample. `grid` is the encoder's (h, w).
pub fn prepare_sample(sample: &Sample, config: &Config, task: &AuTaskSpec, grid: (usize, usize)) -> Result<PreparedSample> {
    let flow = sample_flow(sample)?;
    let flow = magnify_flow(&flow, config.magnification)?;
    let landmarks = Landmarks::load(&sample.landmarks)?;
    landmarks.check_bounds(flow.width, flow.height)?;
    let token_indices = au_token_indices(task, &landmarks, (flow.height, flow.width), grid)?;
    Ok(PreparedSample {
        id: sample.id.clone(),
        subject: sample.subject.clone(),
        image: render_flow_image(&flow, config.input_size),
        token_indices,
        labels: sample.labels.clone(),
        emotion: sample.emotion.clone(),
    })
}

/// Prepares every sample in parallel, keeping input order.
pub fn prepare_samples(
    samples: &[Sample],
    config: &Config,
    task: &AuTaskSpec,
    grid: (usize, usize),
) -> Result<Vec<PreparedSample>> {
    samples.par_iter().map(|s| prepare_sample(s, config, task, grid)).collect()
}
