//! Model assembly, the training loop and proposal inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bmm::{loss_aei, Bmm, BmmConfig, BmmOutput, BoundaryMaps, LossReport};
use crate::dataio::{generate_labels, snippet_count, GroundTruthLabels, LabelConfig, SnippetFeatures, VideoRecord};
use crate::nn::{Adam, Graph, NnError, ParamStore};
use crate::postproc::{proposals_from_maps, PostprocConfig, Proposal};
use crate::pvr::{Pvr, PvrConfig};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
    #[error("{0}")]
    Mismatch(String),
}

/// Snippet representation followed by boundary matching.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub pvr: Pvr,
    pub bmm: Bmm,
}

impl Model {
    /// Parameters are drawn from a generator seeded with `seed`.
    pub fn new(
        pvr_cfg: &PvrConfig,
        bmm_cfg: &BmmConfig,
        env_dim: usize,
        actor_dim: usize,
        seed: u64,
    ) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pvr = Pvr::new(&mut store, pvr_cfg, env_dim, actor_dim, &mut rng)?;
        let bmm = Bmm::new(&mut store, bmm_cfg, pvr_cfg.feature_dim, &mut rng)?;
        Ok(Self { store, pvr, bmm })
    }

    pub fn max_duration(&self) -> usize {
        self.bmm.config().max_duration
    }

    pub fn forward(&self, g: &mut Graph, feats: &SnippetFeatures) -> Result<BmmOutput, NnError> {
        let f = self.pvr.represent_video(g, feats)?;
        self.bmm.forward(g, f)
    }

    pub fn boundary_maps(&self, feats: &SnippetFeatures) -> Result<BoundaryMaps, NnError> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, feats)?;
        Ok(out.maps(&g, self.max_duration()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// One step is one video; videos are visited in a fixed cyclic order.
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-3,
            lambda: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub video_id: String,
    pub loss: LossReport,
}

/// A video's features paired with its training targets.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub features: SnippetFeatures,
    pub labels: GroundTruthLabels,
}

/// Pairs features with annotations by video id and builds targets.
pub fn training_examples(
    records: &[VideoRecord],
    features: &[SnippetFeatures],
    labels: &LabelConfig,
) -> Result<Vec<TrainingExample>, PipelineError> {
    let mut out = Vec::with_capacity(features.len());
    for f in features {
        let record = records
            .iter()
            .find(|r| r.video_id == f.video_id)
            .ok_or_else(|| PipelineError::Mismatch(format!("no annotations for video {}", f.video_id)))?;
        let t = f.num_snippets();
        let expected = snippet_count(record.num_frames, f.delta as u64)?;
        if expected != t {
            return Err(PipelineError::Data(crate::dataio::DataError::DimensionMismatch {
                context: format!("snippet count of {}", f.video_id),
                expected,
                found: t,
            }));
        }
        out.push(TrainingExample {
            features: f.clone(),
            labels: generate_labels(record, t, f.delta, labels)?,
        });
    }
    Ok(out)
}

/// Runs `cfg.steps` Adam steps, one video each, reporting every step.
pub fn train(
    model: &mut Model,
    data: &[TrainingExample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(), PipelineError> {
    if cfg.steps > 0 && data.is_empty() {
        return Err(PipelineError::Mismatch("training set is empty".into()));
    }
    let adam = Adam::new(cfg.lr);
    for step in 0..cfg.steps {
        let ex = &data[step % data.len()];
        if ex.labels.max_duration != model.max_duration() {
            return Err(PipelineError::Mismatch(format!(
                "label max_duration {} differs from model max_duration {}",
                ex.labels.max_duration,
                model.max_duration()
            )));
        }
        let (report, grads) = {
            let mut g = Graph::new(&model.store);
            let out = model.forward(&mut g, &ex.features)?;
            let loss = loss_aei(&mut g, &out, &ex.labels, cfg.lambda)?;
            g.backward(loss.total)?;
            (loss.report(&g), g.param_grads())
        };
        for (id, grad) in grads {
            model.store.accumulate_grad(id, &grad);
        }
        model.store.adam_step(&adam);
        on_step(&StepLog {
            step: step + 1,
            video_id: ex.features.video_id.clone(),
            loss: report,
        });
    }
    Ok(())
}

/// Proposals for one video.
pub fn infer(
    model: &Model,
    feats: &SnippetFeatures,
    frame_rate: f64,
    cfg: &PostprocConfig,
) -> Result<Vec<Proposal>, NnError> {
    let maps = model.boundary_maps(feats)?;
    Ok(proposals_from_maps(
        &feats.video_id,
        &maps,
        feats.delta,
        frame_rate,
        cfg,
    ))
}

/// Proposals for every video with features, ordered by video id.
pub fn infer_all(
    model: &Model,
    records: &[VideoRecord],
    features: &[SnippetFeatures],
    cfg: &PostprocConfig,
) -> Result<Vec<Proposal>, PipelineError> {
    let mut sorted: Vec<&SnippetFeatures> = features.iter().collect();
    sorted.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let mut out = Vec::new();
    for f in sorted {
        let record = records
            .iter()
            .find(|r| r.video_id == f.video_id)
            .ok_or_else(|| PipelineError::Mismatch(format!("no frame rate known for video {}", f.video_id)))?;
        out.extend(infer(model, f, record.frame_rate, cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_dataset, SynthConfig};

    fn tiny() -> (PvrConfig, BmmConfig) {
        (
            PvrConfig {
                embed_dim: 8,
                mlp_hidden: 8,
                feature_dim: 8,
                ..PvrConfig::default()
            },
            BmmConfig {
                max_duration: 6,
                hidden_dim: 8,
                head_hidden: 8,
                num_samples: 4,
            },
        )
    }

    #[test]
    fn zero_steps_leaves_parameters_alone() {
        let (p, b) = tiny();
        let mut m = Model::new(&p, &b, 4, 4, 7).unwrap();
        let before = m.store.clone();
        train(
            &mut m,
            &[],
            &TrainConfig {
                steps: 0,
                ..TrainConfig::default()
            },
            |_| {},
        )
        .unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        before.write_checkpoint(&mut x).unwrap();
        m.store.write_checkpoint(&mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn training_lowers_the_loss() {
        let (p, b) = tiny();
        let synth = SynthConfig {
            num_videos: 1,
            env_dim: 4,
            actor_dim: 4,
            min_snippets: 12,
            max_snippets: 12,
            min_segments: 1,
            max_segments: 1,
            ..SynthConfig::default()
        };
        let (records, feats) = synth_dataset(&synth).unwrap();
        let data = training_examples(
            &records,
            &feats,
            &LabelConfig {
                max_duration: 6,
                ..LabelConfig::default()
            },
        )
        .unwrap();
        let mut m = Model::new(&p, &b, 4, 4, 1).unwrap();
        let mut losses = Vec::new();
        train(
            &mut m,
            &data,
            &TrainConfig {
                steps: 60,
                lr: 1e-2,
                lambda: 10.0,
            },
            |s| losses.push(s.loss.total),
        )
        .unwrap();
        assert!(losses[59] < 0.5 * losses[0], "{} -> {}", losses[0], losses[59]);
    }
}
