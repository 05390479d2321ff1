//! Videos, snippet features, ground-truth labels and their file formats.

mod files;
mod labels;
mod synth;

pub use files::{
    read_annotations, read_features, read_proposals, write_annotations, write_features, write_proposals, FEATURE_MAGIC,
    FEATURE_VERSION,
};
pub use labels::{generate_labels, GroundTruthLabels, LabelConfig};
pub use synth::{synth_dataset, SynthConfig};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{location}: field `{field}`: {message}")]
    Parse {
        location: String,
        field: String,
        message: String,
    },
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn parse(location: impl Into<String>, field: &str, message: impl Into<String>) -> Self {
        Self::Parse {
            location: location.into(),
            field: field.to_string(),
            message: message.into(),
        }
    }
}

/// Number of `delta`-frame snippets covering `num_frames` frames.
pub fn snippet_count(num_frames: u64, delta: u64) -> Result<usize, DataError> {
    if num_frames == 0 || delta == 0 {
        return Err(DataError::InvalidArgument(format!(
            "frame count ({num_frames}) and snippet length ({delta}) must be positive"
        )));
    }
    Ok(num_frames.div_ceil(delta) as usize)
}

/// An annotated action interval, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSegment {
    pub start: f64,
    pub end: f64,
    pub label: Option<String>,
}

impl ActionSegment {
    pub fn new(start: f64, end: f64) -> Self {
        Self {
            start,
            end,
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn is_valid(&self) -> bool {
        self.start >= 0.0 && self.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub num_frames: u64,
    pub frame_rate: f64,
    pub annotations: Vec<ActionSegment>,
}

impl VideoRecord {
    pub fn duration(&self) -> f64 {
        self.num_frames as f64 / self.frame_rate
    }

    /// Seconds covered by one snippet of `delta` frames.
    pub fn snippet_seconds(&self, delta: usize) -> f64 {
        delta as f64 / self.frame_rate
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_frames == 0 {
            return Err(DataError::InvalidArgument(format!(
                "{}: num_frames must be at least 1",
                self.video_id
            )));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(DataError::InvalidArgument(format!(
                "{}: frame_rate must be positive, got {}",
                self.video_id, self.frame_rate
            )));
        }
        for seg in &self.annotations {
            if !seg.is_valid() {
                return Err(DataError::InvalidArgument(format!(
                    "{}: segment [{}, {}] is not a valid interval",
                    self.video_id, seg.start, seg.end
                )));
            }
        }
        Ok(())
    }
}

/// Per-snippet environment vectors and a variable number of actor vectors.
///
/// Stored flat: `env` is `T x c_e` row-major; `actors` holds the actor rows
/// of snippet 0, then snippet 1, and so on, with `actor_counts[i]` rows for
/// snippet `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetFeatures {
    pub video_id: String,
    pub delta: usize,
    pub env_dim: usize,
    pub actor_dim: usize,
    pub env: Vec<f32>,
    pub actor_counts: Vec<usize>,
    pub actors: Vec<f32>,
}

impl SnippetFeatures {
    /// Builds from nested vectors, checking that dimensions agree.
    pub fn from_nested(
        video_id: impl Into<String>,
        delta: usize,
        env: &[Vec<f32>],
        actors: &[Vec<Vec<f32>>],
    ) -> Result<Self, DataError> {
        if env.len() != actors.len() {
            return Err(DataError::DimensionMismatch {
                context: "snippet count (env vs actors)".into(),
                expected: env.len(),
                found: actors.len(),
            });
        }
        let env_dim = env.first().map_or(0, Vec::len);
        let actor_dim = actors.iter().flatten().next().map_or(0, Vec::len);
        let mut flat_env = Vec::with_capacity(env.len() * env_dim);
        for (i, row) in env.iter().enumerate() {
            if row.len() != env_dim {
                return Err(DataError::DimensionMismatch {
                    context: format!("environment vector of snippet {i}"),
                    expected: env_dim,
                    found: row.len(),
                });
            }
            flat_env.extend_from_slice(row);
        }
        let mut flat_actors = Vec::new();
        let mut counts = Vec::with_capacity(actors.len());
        for (i, snippet) in actors.iter().enumerate() {
            counts.push(snippet.len());
            for (j, a) in snippet.iter().enumerate() {
                if a.len() != actor_dim {
                    return Err(DataError::DimensionMismatch {
                        context: format!("actor {j} of snippet {i}"),
                        expected: actor_dim,
                        found: a.len(),
                    });
                }
                flat_actors.extend_from_slice(a);
            }
        }
        Ok(Self {
            video_id: video_id.into(),
            delta,
            env_dim,
            actor_dim,
            env: flat_env,
            actor_counts: counts,
            actors: flat_actors,
        })
    }

    pub fn num_snippets(&self) -> usize {
        self.actor_counts.len()
    }

    pub fn env_row(&self, i: usize) -> &[f32] {
        &self.env[i * self.env_dim..(i + 1) * self.env_dim]
    }

    /// Actor rows of snippet `i`, each of length `actor_dim`.
    pub fn actors_of(&self, i: usize) -> impl Iterator<Item = &[f32]> {
        let start: usize = self.actor_counts[..i].iter().sum();
        let d = self.actor_dim;
        let n = self.actor_counts[i];
        self.actors[start * d..(start + n) * d].chunks_exact(d.max(1))
    }

    pub fn total_actors(&self) -> usize {
        self.actor_counts.iter().sum()
    }

    /// Restricts to the snippet range `[from, to)`.
    pub fn slice(&self, from: usize, to: usize) -> Self {
        let a0: usize = self.actor_counts[..from].iter().sum();
        let a1: usize = self.actor_counts[..to].iter().sum();
        Self {
            video_id: self.video_id.clone(),
            delta: self.delta,
            env_dim: self.env_dim,
            actor_dim: self.actor_dim,
            env: self.env[from * self.env_dim..to * self.env_dim].to_vec(),
            actor_counts: self.actor_counts[from..to].to_vec(),
            actors: self.actors[a0 * self.actor_dim..a1 * self.actor_dim].to_vec(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let t = self.num_snippets();
        if self.env.len() != t * self.env_dim {
            return Err(DataError::DimensionMismatch {
                context: "environment payload".into(),
                expected: t * self.env_dim,
                found: self.env.len(),
            });
        }
        if self.actors.len() != self.total_actors() * self.actor_dim {
            return Err(DataError::DimensionMismatch {
                context: "actor payload".into(),
                expected: self.total_actors() * self.actor_dim,
                found: self.actors.len(),
            });
        }
        if self.delta == 0 {
            return Err(DataError::InvalidArgument("delta must be positive".into()));
        }
        Ok(())
    }
}
