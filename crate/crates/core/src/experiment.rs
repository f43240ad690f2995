//! Alignment experiments on the synthetic misalignment benchmark.

use crate::affine::AffineParams;
use crate::data::synth::{SynthDataset, SynthSample};
use crate::data::{AugConfig, ImageSet, Split};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, Metric};
use crate::exec::Exec;
use crate::losses::LossConfig;
use crate::model::{EpanModel, ModelConfig};
use crate::tensor::Tensor;
use crate::trainer::{self, EpochLog, OptimConfig, TrainOptions};

const BATCH: usize = 32;

fn split_samples(ds: &SynthDataset, split: Split) -> Vec<&SynthSample> {
    ds.split(split).collect()
}

fn retrieval(q_feats: &Tensor, g_feats: &Tensor, q: &[&SynthSample], g: &[&SynthSample], metric: Metric, exec: Exec) -> Result<EvalReport> {
    let d = eval::distance_matrix(q_feats, g_feats, metric, exec)?;
    let labels = |s: &[&SynthSample]| -> (Vec<i64>, Vec<u32>) {
        (s.iter().map(|x| x.pid as i64).collect(), s.iter().map(|x| x.camid).collect())
    };
    let (qp, qc) = labels(q);
    let (gp, gc) = labels(g);
    eval::evaluate(&d.matrix, &qp, &qc, &gp, &gc, 10.min(g.len()).max(1), metric, exec)
}

/// Alignment-branch embeddings of each sample warped by `thetas`.
fn align_features(model: &EpanModel, samples: &[&SynthSample], thetas: &[AffineParams], exec: Exec) -> Result<Tensor> {
    let mut rows = Vec::new();
    for (chunk, th) in samples.chunks(BATCH).zip(thetas.chunks(BATCH)) {
        let imgs: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        rows.extend_from_slice(model.align_embed_with(&imgs, th, exec)?.data());
    }
    Tensor::new(&[samples.len(), model.config.embed_dim], rows)
}

/// Nearest-neighbour retrieval on alignment-branch embeddings when every
/// query and gallery image is warped by its ground-truth inverse.
pub fn oracle_alignment(model: &EpanModel, ds: &SynthDataset, exec: Exec) -> Result<EvalReport> {
    let q = split_samples(ds, Split::Query);
    let g = split_samples(ds, Split::Gallery);
    let inv = |s: &[&SynthSample]| s.iter().map(|x| x.inverse).collect::<Vec<_>>();
    let qf = align_features(model, &q, &inv(&q), exec)?;
    let gf = align_features(model, &g, &inv(&g), exec)?;
    retrieval(&qf, &gf, &q, &g, Metric::Cosine, exec)
}

/// Same retrieval with identity warps: the misaligned reference point.
pub fn unaligned_retrieval(model: &EpanModel, ds: &SynthDataset, exec: Exec) -> Result<EvalReport> {
    let q = split_samples(ds, Split::Query);
    let g = split_samples(ds, Split::Gallery);
    let id = |s: &[&SynthSample]| vec![AffineParams::identity(); s.len()];
    let qf = align_features(model, &q, &id(&q), exec)?;
    let gf = align_features(model, &g, &id(&g), exec)?;
    retrieval(&qf, &gf, &q, &g, Metric::Cosine, exec)
}

/// Mean over samples of the mean absolute difference between the predicted
/// warp and the ground-truth inverse.
pub fn theta_error(model: &EpanModel, samples: &[&SynthSample], exec: Exec) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Usage("theta error over no samples".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(BATCH) {
        let imgs: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        for (p, s) in model.predict_theta(&imgs, exec)?.iter().zip(chunk) {
            total += p.mean_abs_diff(&s.inverse);
        }
    }
    Ok(total / samples.len() as f64)
}

/// Held-out samples: the query and gallery splits.
pub fn held_out(ds: &SynthDataset) -> Vec<&SynthSample> {
    ds.samples.iter().filter(|s| s.split != Split::Train).collect()
}

/// Fused-descriptor retrieval on the synthetic query/gallery splits.
pub fn descriptor_retrieval(model: &EpanModel, ds: &SynthDataset, metric: Metric, exec: Exec) -> Result<EvalReport> {
    let q = split_samples(ds, Split::Query);
    let g = split_samples(ds, Split::Gallery);
    let feats = |s: &[&SynthSample]| {
        let imgs: Vec<&Tensor> = s.iter().map(|x| &x.image).collect();
        model.infer_embedding(&imgs, BATCH, exec)
    };
    retrieval(&feats(&q)?, &feats(&g)?, &q, &g, metric, exec)
}

#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub aug: AugConfig,
    pub exec: Exec,
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub model: EpanModel,
    pub log: Vec<EpochLog>,
    pub theta_error_init: f64,
    pub theta_error_final: f64,
    pub rank1: f64,
    pub map: f64,
}

/// Trains on the synthetic training split and measures warp recovery and
/// retrieval on the held-out splits.
pub fn run_trial(ds: &SynthDataset, setup: &TrialSetup, seed: u64) -> Result<TrialOutcome> {
    let train = ImageSet::from_synth(ds, Split::Train);
    let (_, classes) = train.class_labels();
    let mut model = EpanModel::new(
        ModelConfig {
            num_classes: classes,
            ..setup.model.clone()
        },
        seed,
    )?;
    let held = held_out(ds);
    let theta_error_init = theta_error(&model, &held, setup.exec)?;
    let optim = OptimConfig {
        seed,
        ..setup.optim.clone()
    };
    let opts = TrainOptions {
        exec: setup.exec,
        record_wall_time: false,
    };
    let log = trainer::train(&mut model, &train, &setup.loss, &optim, &setup.aug, &opts, None)?;
    let theta_error_final = theta_error(&model, &held, setup.exec)?;
    let report = descriptor_retrieval(&model, ds, Metric::Euclidean, setup.exec)?;
    Ok(TrialOutcome {
        model,
        log,
        theta_error_init,
        theta_error_final,
        rank1: report.rank(1),
        map: report.map,
    })
}
