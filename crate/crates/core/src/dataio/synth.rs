use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ActionSegment, SnippetFeatures, VideoRecord};

/// Parameters of the planted-action generator. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_videos: usize,
    pub min_snippets: usize,
    pub max_snippets: usize,
    pub env_dim: usize,
    pub actor_dim: usize,
    pub min_actors: usize,
    pub max_actors: usize,
    pub noise_level: f64,
    pub min_segments: usize,
    pub max_segments: usize,
    /// Planted segment lengths, in snippets.
    pub min_segment_len: usize,
    pub max_segment_len: usize,
    pub num_classes: usize,
    pub delta: usize,
    pub frame_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_videos: 20,
            min_snippets: 16,
            max_snippets: 32,
            env_dim: 32,
            actor_dim: 32,
            min_actors: 0,
            max_actors: 4,
            noise_level: 0.1,
            min_segments: 1,
            max_segments: 4,
            min_segment_len: 2,
            max_segment_len: 8,
            num_classes: 3,
            delta: 16,
            frame_rate: 16.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), super::DataError> {
        let bad = |m: &str| Err(super::DataError::InvalidArgument(m.to_string()));
        if self.min_snippets < 4 || self.min_snippets > self.max_snippets {
            return bad("snippet range must satisfy 4 <= min <= max");
        }
        if self.min_actors > self.max_actors {
            return bad("actor range must satisfy min <= max");
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return bad("segment count range must satisfy 1 <= min <= max");
        }
        if self.min_segment_len == 0 || self.min_segment_len > self.max_segment_len {
            return bad("segment length range must satisfy 1 <= min <= max");
        }
        if self.min_segment_len + 2 > self.min_snippets {
            return bad("shortest video cannot hold a segment of minimum length");
        }
        if self.env_dim == 0 || self.actor_dim == 0 || self.num_classes == 0 {
            return bad("feature dimensions and class count must be positive");
        }
        if self.delta == 0 || !(self.frame_rate > 0.0) || !(self.noise_level >= 0.0) {
            return bad("delta and frame_rate must be positive, noise_level non-negative");
        }
        Ok(())
    }
}

struct Centers {
    env_background: Vec<f32>,
    actor_background: Vec<f32>,
    env_class: Vec<Vec<f32>>,
    actor_class: Vec<Vec<f32>>,
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn noisy(rng: &mut impl Rng, center: &[f32], noise: f32) -> Vec<f32> {
    center
        .iter()
        .map(|&c| c + noise * rng.sample::<f32, _>(StandardNormal))
        .collect()
}

/// Places `count` non-overlapping segments inside snippets `[1, t - 1]`,
/// separated by at least one snippet. Returns `(start, end)` snippet pairs.
fn place_segments(rng: &mut impl Rng, cfg: &SynthConfig, t: usize, count: usize) -> Vec<(usize, usize)> {
    let room = t - 2;
    let max_len = cfg.max_segment_len.min(room);
    let mut count = count;
    let mut lens: Vec<usize>;
    loop {
        lens = (0..count)
            .map(|_| rng.gen_range(cfg.min_segment_len.min(max_len)..=max_len))
            .collect();
        let need = lens.iter().sum::<usize>() + count - 1;
        if need <= room {
            break;
        }
        // Shrink towards the minimum before dropping a segment.
        let min_need = cfg.min_segment_len * count + count - 1;
        if min_need > room {
            count -= 1;
        }
    }
    let slack = room - (lens.iter().sum::<usize>() + count - 1);
    let mut cuts: Vec<usize> = (0..count).map(|_| rng.gen_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(count);
    let mut pos = 1;
    let mut prev_cut = 0;
    for (i, len) in lens.into_iter().enumerate() {
        pos += cuts[i] - prev_cut;
        prev_cut = cuts[i];
        out.push((pos, pos + len));
        pos += len + 1;
    }
    out
}

/// Deterministic dataset of videos with planted actions.
///
/// Inside an action of class `k`, the environment vector and one randomly
/// placed "main actor" are drawn around class-`k` centers; every other actor
/// and every snippet outside actions is drawn around background centers.
/// Snippets can have no actors at all, in which case only the environment
/// carries the action.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<(Vec<VideoRecord>, Vec<SnippetFeatures>), super::DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = Centers {
        env_background: gaussian_vec(&mut rng, cfg.env_dim),
        actor_background: gaussian_vec(&mut rng, cfg.actor_dim),
        env_class: (0..cfg.num_classes)
            .map(|_| gaussian_vec(&mut rng, cfg.env_dim))
            .collect(),
        actor_class: (0..cfg.num_classes)
            .map(|_| gaussian_vec(&mut rng, cfg.actor_dim))
            .collect(),
    };
    let noise = cfg.noise_level as f32;
    let unit = cfg.delta as f64 / cfg.frame_rate;

    let mut records = Vec::with_capacity(cfg.num_videos);
    let mut features = Vec::with_capacity(cfg.num_videos);
    for v in 0..cfg.num_videos {
        let video_id = format!("video_{v:04}");
        let t = rng.gen_range(cfg.min_snippets..=cfg.max_snippets);
        let count = rng.gen_range(cfg.min_segments..=cfg.max_segments);
        let spans = place_segments(&mut rng, cfg, t, count);
        let classes: Vec<usize> = spans.iter().map(|_| rng.gen_range(0..cfg.num_classes)).collect();
        let trailing = rng.gen_range(0..cfg.delta.div_ceil(2)) as u64;
        let num_frames = (t * cfg.delta) as u64 - trailing;

        let mut class_at = vec![None; t];
        for (&(s, e), &k) in spans.iter().zip(&classes) {
            class_at[s..e].iter_mut().for_each(|c| *c = Some(k));
        }

        let mut env = Vec::with_capacity(t);
        let mut actors = Vec::with_capacity(t);
        for class in class_at {
            let env_center = class.map_or(&centers.env_background, |k| &centers.env_class[k]);
            env.push(noisy(&mut rng, env_center, noise));
            let n = rng.gen_range(cfg.min_actors..=cfg.max_actors);
            let main = if n > 0 { Some(rng.gen_range(0..n)) } else { None };
            let snippet_actors: Vec<Vec<f32>> = (0..n)
                .map(|j| {
                    let center = match class {
                        Some(k) if main == Some(j) => &centers.actor_class[k],
                        _ => &centers.actor_background,
                    };
                    noisy(&mut rng, center, noise)
                })
                .collect();
            actors.push(snippet_actors);
        }

        records.push(VideoRecord {
            video_id: video_id.clone(),
            num_frames,
            frame_rate: cfg.frame_rate,
            annotations: spans
                .iter()
                .zip(&classes)
                .map(|(&(s, e), &k)| {
                    ActionSegment::new(s as f64 * unit, e as f64 * unit).with_label(format!("action_{k}"))
                })
                .collect(),
        });
        features.push(SnippetFeatures::from_nested(video_id, cfg.delta, &env, &actors)?);
    }
    Ok((records, features))
}
