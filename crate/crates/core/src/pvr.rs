//! Per-snippet visual representation from environment and actor features.
//!
//! Three spectators contribute to each snippet feature `f`:
//!
//! * the environment vector `f_e`, used as is;
//! * the actors, reduced to one vector `f_a` by the adaptive attention
//!   mechanism (AAM): every actor is scored by the norm of its embedding
//!   concatenated with the environment embedding, scores are softmax
//!   normalized, actors scoring at least `1 / N_B` are kept, and the kept
//!   actors are fused by self-attention and mean pooling;
//! * an interaction step that projects `f_e` and `f_a` to a common width,
//!   lets the two rows attend to each other and averages them into `f`.
//!
//! Snippets without any actor use a learned "no-actor" vector for `f_a`.
//! All snippets of a video are processed in one batch; attention never
//! crosses snippet boundaries, so the batch result equals the per-snippet
//! result row for row.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::SnippetFeatures;
use crate::nn::{Graph, Linear, Mlp, NnError, ParamId, ParamStore, SelfAttention, Tensor, Var};

/// Which spectators feed the snippet feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spectators {
    /// Environment, actors and their interaction.
    All,
    EnvironmentOnly,
    ActorsOnly,
    /// Environment and actors averaged instead of attended.
    NoInteraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PvrConfig {
    /// Common embedding width of the two AAM scoring MLPs.
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    /// Output width `C_f`.
    pub feature_dim: usize,
    pub num_heads: usize,
    pub spectators: Spectators,
    /// Keep only actors scoring at least `1 / N_B`; otherwise keep all.
    pub select_main_actors: bool,
    /// Fuse kept actors with self-attention; otherwise average them.
    pub fuse_with_attention: bool,
}

impl Default for PvrConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            mlp_hidden: 128,
            feature_dim: 256,
            num_heads: 1,
            spectators: Spectators::All,
            select_main_actors: true,
            fuse_with_attention: true,
        }
    }
}

/// Main-actor selection of one snippet.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorSelection {
    /// Softmax-normalized actor scores (empty without actors).
    pub scores: Vec<f64>,
    /// Adaptive threshold `1 / N_B` (`None` without actors).
    pub threshold: Option<f64>,
    pub selected: Vec<bool>,
}

/// AAM result for a single snippet.
#[derive(Debug, Clone)]
pub struct AamOutput {
    pub selection: ActorSelection,
    /// Fused actor feature, `[1, C_a]`.
    pub fused: Var,
}

/// Keeps every score `>= 1 / n`. The largest softmax score is never below
/// the mean, so at least one actor is always kept.
pub fn select_main_actors(scores: &[f64]) -> (Option<f64>, Vec<bool>) {
    if scores.is_empty() {
        return (None, Vec::new());
    }
    let tau = 1.0 / scores.len() as f64;
    (Some(tau), scores.iter().map(|&s| s >= tau).collect())
}

#[derive(Debug, Clone)]
pub struct Pvr {
    cfg: PvrConfig,
    env_dim: usize,
    actor_dim: usize,
    env_mlp: Mlp,
    actor_mlp: Mlp,
    actor_attention: SelfAttention,
    no_actor: ParamId,
    env_proj: Linear,
    actor_proj: Linear,
    interaction: SelfAttention,
}

impl Pvr {
    pub fn new(
        store: &mut ParamStore,
        cfg: &PvrConfig,
        env_dim: usize,
        actor_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        let e = cfg.embed_dim;
        let env_mlp = Mlp::new(store, "pvr.env_mlp", env_dim, cfg.mlp_hidden, e, rng)?;
        let actor_mlp = Mlp::new(store, "pvr.actor_mlp", actor_dim, cfg.mlp_hidden, e, rng)?;
        // Attention over raw actor features; one head when the width is not divisible.
        let actor_heads = if actor_dim.is_multiple_of(cfg.num_heads) {
            cfg.num_heads
        } else {
            1
        };
        let actor_attention = SelfAttention::new(store, "pvr.actor_attention", actor_dim, actor_heads, rng)?;
        let no_actor = store.add_uniform("pvr.no_actor", &[1, actor_dim], actor_dim, rng)?;
        let env_proj = Linear::new(store, "pvr.env_proj", env_dim, cfg.feature_dim, rng)?;
        let actor_proj = Linear::new(store, "pvr.actor_proj", actor_dim, cfg.feature_dim, rng)?;
        let interaction = SelfAttention::new(store, "pvr.interaction", cfg.feature_dim, cfg.num_heads, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            env_dim,
            actor_dim,
            env_mlp,
            actor_mlp,
            actor_attention,
            no_actor,
            env_proj,
            actor_proj,
            interaction,
        })
    }

    pub fn config(&self) -> &PvrConfig {
        &self.cfg
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    fn check_dims(&self, feats: &SnippetFeatures) -> Result<(), NnError> {
        if feats.env_dim != self.env_dim || (feats.total_actors() > 0 && feats.actor_dim != self.actor_dim) {
            return Err(NnError::ShapeMismatch {
                op: "pvr",
                left: vec![feats.env_dim, feats.actor_dim],
                right: vec![self.env_dim, self.actor_dim],
            });
        }
        Ok(())
    }

    fn env_input(&self, g: &mut Graph, feats: &SnippetFeatures) -> Result<Var, NnError> {
        Ok(g.input(Tensor::from_f32([feats.num_snippets(), feats.env_dim], &feats.env)?))
    }

    /// Actor representation `f_a` for every snippet (`[T, C_a]`) and the
    /// per-snippet selections.
    fn actor_features(
        &self,
        g: &mut Graph,
        feats: &SnippetFeatures,
        env: Var,
    ) -> Result<(Var, Vec<ActorSelection>), NnError> {
        let t = feats.num_snippets();
        let counts = &feats.actor_counts;
        let total = feats.total_actors();
        let owner: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(i, &n)| std::iter::repeat_n(i, n))
            .collect();

        let mut selections = Vec::with_capacity(t);
        let mut kept_rows: Vec<usize> = Vec::new();
        let mut kept_counts = vec![0usize; t];
        let mut rows_var = None;

        if total > 0 {
            let actors = g.input(Tensor::from_f32([total, self.actor_dim], &feats.actors)?);
            if self.cfg.select_main_actors {
                let env_emb = self.env_mlp.forward(g, env)?;
                let actor_emb = self.actor_mlp.forward(g, actors)?;
                let env_per_actor = g.gather_rows(env_emb, &owner)?;
                let joint = g.concat(&[actor_emb, env_per_actor], 1)?;
                let norms = g.row_norms(joint);
                let scores = g.segment_softmax(norms, counts)?;
                let values = g.value(scores).data().to_vec();
                let mut start = 0;
                for (i, &n) in counts.iter().enumerate() {
                    let s = values[start..start + n].to_vec();
                    let (threshold, selected) = select_main_actors(&s);
                    for (j, &keep) in selected.iter().enumerate() {
                        if keep {
                            kept_rows.push(start + j);
                            kept_counts[i] += 1;
                        }
                    }
                    selections.push(ActorSelection {
                        scores: s,
                        threshold,
                        selected,
                    });
                    start += n;
                }
                // Gate kept actors by their renormalized scores (mean gate 1),
                // which keeps the scoring MLPs in the gradient path.
                let scores_col = g.reshape(scores, &[total, 1])?;
                let kept_scores = g.gather_rows(scores_col, &kept_rows)?;
                let nonempty: Vec<usize> = (0..t).filter(|&i| kept_counts[i] > 0).collect();
                let group_counts: Vec<usize> = nonempty.iter().map(|&i| kept_counts[i]).collect();
                let sums = g.segment_sum(kept_scores, &group_counts)?;
                let group_of_row: Vec<usize> = group_counts
                    .iter()
                    .enumerate()
                    .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
                    .collect();
                let sums_per_row = g.gather_rows(sums, &group_of_row)?;
                let share = g.div(kept_scores, sums_per_row)?;
                let share = g.reshape(share, &[kept_rows.len()])?;
                let n_kept: Vec<f64> = group_of_row.iter().map(|&k| group_counts[k] as f64).collect();
                let n_kept = g.input(Tensor::vector(n_kept));
                let gate = g.mul(share, n_kept)?;
                let kept = g.gather_rows(actors, &kept_rows)?;
                rows_var = Some(g.scale_rows(kept, gate)?);
            } else {
                for &n in counts {
                    selections.push(ActorSelection {
                        scores: vec![1.0 / n as f64; n],
                        threshold: (n > 0).then(|| 1.0 / n as f64),
                        selected: vec![true; n],
                    });
                }
                kept_counts.clone_from(counts);
                rows_var = Some(actors);
            }
        } else {
            selections.extend((0..t).map(|_| ActorSelection {
                scores: Vec::new(),
                threshold: None,
                selected: Vec::new(),
            }));
        }

        let nonempty: Vec<usize> = (0..t).filter(|&i| kept_counts[i] > 0).collect();
        let group_counts: Vec<usize> = nonempty.iter().map(|&i| kept_counts[i]).collect();
        let no_actor = g.param(self.no_actor);
        let table = match rows_var {
            Some(rows) if !nonempty.is_empty() => {
                let fused = if self.cfg.fuse_with_attention {
                    self.actor_attention.forward(g, rows, &group_counts)?
                } else {
                    rows
                };
                let pooled = g.segment_mean(fused, &group_counts)?;
                g.concat(&[pooled, no_actor], 0)?
            }
            _ => no_actor,
        };
        let fallback = nonempty.len();
        let mut index = vec![fallback; t];
        for (k, &i) in nonempty.iter().enumerate() {
            index[i] = k;
        }
        let f_a = g.gather_rows(table, &index)?;
        Ok((f_a, selections))
    }

    /// Combines environment rows `[T, C_e]` and actor rows `[T, C_a]`
    /// according to the configured spectators; returns `[T, C_f]`.
    fn combine(&self, g: &mut Graph, env: Var, f_a: Option<Var>) -> Result<Var, NnError> {
        let t = g.value(env).shape()[0];
        match self.cfg.spectators {
            Spectators::EnvironmentOnly => self.env_proj.forward(g, env),
            Spectators::ActorsOnly => {
                let f_a = f_a.expect("actor features computed");
                self.actor_proj.forward(g, f_a)
            }
            Spectators::NoInteraction => {
                let pe = self.env_proj.forward(g, env)?;
                let pa = self.actor_proj.forward(g, f_a.expect("actor features computed"))?;
                let s = g.add(pe, pa)?;
                Ok(g.scale(s, 0.5))
            }
            Spectators::All => {
                let pe = self.env_proj.forward(g, env)?;
                let pa = self.actor_proj.forward(g, f_a.expect("actor features computed"))?;
                let stacked = g.concat(&[pe, pa], 0)?;
                let order: Vec<usize> = (0..t).flat_map(|i| [i, t + i]).collect();
                let pairs = g.gather_rows(stacked, &order)?;
                let segments = vec![2; t];
                let attended = self.interaction.forward(g, pairs, &segments)?;
                g.segment_mean(attended, &segments)
            }
        }
    }

    /// Snippet features `[T, C_f]` for a whole video, plus actor selections.
    pub fn represent_video_with_selection(
        &self,
        g: &mut Graph,
        feats: &SnippetFeatures,
    ) -> Result<(Var, Vec<ActorSelection>), NnError> {
        self.check_dims(feats)?;
        if feats.num_snippets() == 0 {
            return Err(NnError::EmptyInput("represent_video"));
        }
        let env = self.env_input(g, feats)?;
        if self.cfg.spectators == Spectators::EnvironmentOnly {
            return Ok((self.combine(g, env, None)?, Vec::new()));
        }
        let (f_a, selections) = self.actor_features(g, feats, env)?;
        Ok((self.combine(g, env, Some(f_a))?, selections))
    }

    pub fn represent_video(&self, g: &mut Graph, feats: &SnippetFeatures) -> Result<Var, NnError> {
        Ok(self.represent_video_with_selection(g, feats)?.0)
    }

    /// Same result as [`Pvr::represent_video`], one snippet at a time.
    pub fn represent_video_per_snippet(&self, g: &mut Graph, feats: &SnippetFeatures) -> Result<Var, NnError> {
        let rows = (0..feats.num_snippets())
            .map(|i| self.represent_video(g, &feats.slice(i, i + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        g.concat(&rows, 0)
    }

    /// AAM on a single snippet: environment vector and its actor vectors.
    pub fn aam(&self, g: &mut Graph, env: &[f32], actors: &[Vec<f32>]) -> Result<AamOutput, NnError> {
        let feats = single_snippet(env, actors)?;
        self.check_dims(&feats)?;
        let env = self.env_input(g, &feats)?;
        let (fused, mut selections) = self.actor_features(g, &feats, env)?;
        Ok(AamOutput {
            selection: selections.remove(0),
            fused,
        })
    }

    /// Interaction spectator on one environment row `[1, C_e]` and one actor
    /// row `[1, C_a]`; returns `[1, C_f]`.
    pub fn interaction(&self, g: &mut Graph, env: Var, actor: Var) -> Result<Var, NnError> {
        self.combine(g, env, Some(actor))
    }
}

fn single_snippet(env: &[f32], actors: &[Vec<f32>]) -> Result<SnippetFeatures, NnError> {
    SnippetFeatures::from_nested("snippet", 1, &[env.to_vec()], &[actors.to_vec()])
        .map_err(|e| NnError::InvalidArgument(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> PvrConfig {
        PvrConfig {
            embed_dim: 6,
            mlp_hidden: 8,
            feature_dim: 8,
            ..PvrConfig::default()
        }
    }

    fn build(cfg: &PvrConfig, seed: u64) -> (ParamStore, Pvr) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pvr = Pvr::new(&mut store, cfg, 4, 4, &mut rng).unwrap();
        (store, pvr)
    }

    fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn threshold_rule_examples() {
        assert_eq!(select_main_actors(&[1.0]), (Some(1.0), vec![true]));
        assert_eq!(select_main_actors(&[0.25; 4]), (Some(0.25), vec![true; 4]));
        assert_eq!(select_main_actors(&[0.50, 0.35, 0.15]).1, vec![true, true, false]);
        assert_eq!(select_main_actors(&[]), (None, vec![]));
    }

    #[test]
    fn single_actor_is_selected() {
        let (store, pvr) = build(&small_cfg(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new(&store);
        let out = pvr
            .aam(&mut g, &rand_vec(&mut rng, 4), &[rand_vec(&mut rng, 4)])
            .unwrap();
        assert_eq!(out.selection.scores, vec![1.0]);
        assert_eq!(out.selection.threshold, Some(1.0));
        assert_eq!(out.selection.selected, vec![true]);
        assert_eq!(g.value(out.fused).shape(), &[1, 4]);
    }

    #[test]
    fn identical_actors_share_scores() {
        let (store, pvr) = build(&small_cfg(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_vec(&mut rng, 4);
        let mut g = Graph::new(&store);
        let out = pvr.aam(&mut g, &rand_vec(&mut rng, 4), &vec![a; 4]).unwrap();
        assert_eq!(out.selection.scores, vec![0.25; 4]);
        assert_eq!(out.selection.selected, vec![true; 4]);
    }

    #[test]
    fn no_actors_uses_learned_fallback() {
        let (store, pvr) = build(&small_cfg(), 3);
        let mut g = Graph::new(&store);
        let out = pvr.aam(&mut g, &[0.1, 0.2, 0.3, 0.4], &[]).unwrap();
        assert!(out.selection.scores.is_empty());
        assert_eq!(g.value(out.fused).data(), store.tensor(pvr.no_actor).data());
    }

    #[test]
    fn interaction_is_asymmetric_and_deterministic() {
        let (store, pvr) = build(&small_cfg(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e = Tensor::new([1, 4], rand_vec(&mut rng, 4).iter().map(|&v| v as f64).collect()).unwrap();
        let a = Tensor::new([1, 4], rand_vec(&mut rng, 4).iter().map(|&v| v as f64).collect()).unwrap();
        let mut g = Graph::new(&store);
        let (ev, av) = (g.input(e.clone()), g.input(a.clone()));
        let y1 = pvr.interaction(&mut g, ev, av).unwrap();
        let y2 = pvr.interaction(&mut g, av, ev).unwrap();
        assert_ne!(g.value(y1), g.value(y2));
        let (ev2, av2) = (g.input(e), g.input(a));
        let y3 = pvr.interaction(&mut g, ev2, av2).unwrap();
        assert_eq!(g.value(y1), g.value(y3));
        assert_eq!(g.value(y1).shape(), &[1, 8]);
    }

    #[test]
    fn no_actor_interaction_depends_only_on_env() {
        let (store, pvr) = build(&small_cfg(), 8);
        let env = [0.3f32, -0.2, 0.9, 0.0];
        let run = || {
            let mut g = Graph::new(&store);
            let feats = single_snippet(&env, &[]).unwrap();
            let y = pvr.represent_video(&mut g, &feats).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
