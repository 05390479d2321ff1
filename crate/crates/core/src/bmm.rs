//! Boundary matching over a snippet feature sequence.
//!
//! A convolutional base module turns snippet features `[T, C_f]` into a
//! hidden sequence `[T, C_b]`. The temporal head scores every snippet as a
//! start and as an end; the proposal head scores every `(start i, duration
//! d)` cell by pooling the hidden sequence over the window `[i, i + d]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::GroundTruthLabels;
use crate::nn::{Conv1d, Graph, Linear, NnError, ParamStore, Tensor, Var};

/// Probabilities clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-6;

/// Start/end curves and the actionness map of one video.
///
/// `actionness` is `T x D` row-major; column `d - 1` holds duration `d`.
/// Cells with `i + d > T` are invalid and hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMaps {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub actionness: Vec<f64>,
    max_duration: usize,
}

impl BoundaryMaps {
    pub fn new(start: Vec<f64>, end: Vec<f64>, actionness: Vec<f64>, max_duration: usize) -> Result<Self, NnError> {
        let t = start.len();
        if end.len() != t || actionness.len() != t * max_duration || max_duration == 0 {
            return Err(NnError::ShapeMismatch {
                op: "boundary_maps",
                left: vec![start.len(), end.len(), actionness.len()],
                right: vec![t, t, t * max_duration],
            });
        }
        Ok(Self {
            start,
            end,
            actionness,
            max_duration,
        })
    }

    /// Every valid probability set to `p`, invalid cells to 0.
    pub fn filled(t: usize, max_duration: usize, p: f64) -> Self {
        let mut a = vec![0.0; t * max_duration];
        for i in 0..t {
            for d in 1..=max_duration.min(t - i) {
                a[i * max_duration + d - 1] = p;
            }
        }
        Self {
            start: vec![p; t],
            end: vec![p; t],
            actionness: a,
            max_duration,
        }
    }

    pub fn num_snippets(&self) -> usize {
        self.start.len()
    }

    pub fn max_duration(&self) -> usize {
        self.max_duration
    }

    pub fn is_valid(&self, i: usize, d: usize) -> bool {
        d >= 1 && d <= self.max_duration && i + d <= self.num_snippets()
    }

    pub fn actionness(&self, i: usize, d: usize) -> f64 {
        self.actionness[i * self.max_duration + d - 1]
    }

    pub fn set_actionness(&mut self, i: usize, d: usize, p: f64) {
        self.actionness[i * self.max_duration + d - 1] = p;
    }

    /// Row-major `T x D` validity.
    pub fn valid_mask(&self) -> Vec<bool> {
        valid_mask(self.num_snippets(), self.max_duration)
    }
}

pub fn valid_mask(t: usize, max_duration: usize) -> Vec<bool> {
    (0..t)
        .flat_map(|i| (1..=max_duration).map(move |d| i + d <= t))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BmmConfig {
    /// Longest proposal, in snippets (`D`).
    pub max_duration: usize,
    /// Base module width `C_b`.
    pub hidden_dim: usize,
    pub head_hidden: usize,
    /// Interpolated samples per proposal window.
    pub num_samples: usize,
}

impl Default for BmmConfig {
    fn default() -> Self {
        Self {
            max_duration: 32,
            hidden_dim: 128,
            head_hidden: 64,
            num_samples: 8,
        }
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BmmOutput {
    /// `[T]`
    pub start: Var,
    /// `[T]`
    pub end: Var,
    /// `[T, D]`, zero outside the valid mask.
    pub actionness: Var,
}

impl BmmOutput {
    pub fn maps(&self, g: &Graph, max_duration: usize) -> BoundaryMaps {
        BoundaryMaps {
            start: g.value(self.start).data().to_vec(),
            end: g.value(self.end).data().to_vec(),
            actionness: g.value(self.actionness).data().to_vec(),
            max_duration,
        }
    }
}

#[derive(Debug, Clone)]
struct Head {
    conv: Conv1d,
    out: Linear,
}

#[derive(Debug, Clone)]
pub struct Bmm {
    cfg: BmmConfig,
    in_dim: usize,
    base: [Conv1d; 2],
    start_head: Head,
    end_head: Head,
    proposal_hidden: Linear,
    proposal_out: Linear,
}

impl Bmm {
    pub fn new(store: &mut ParamStore, cfg: &BmmConfig, in_dim: usize, rng: &mut impl Rng) -> Result<Self, NnError> {
        if cfg.max_duration == 0 || cfg.num_samples == 0 {
            return Err(NnError::InvalidArgument(
                "max_duration and num_samples must be positive".into(),
            ));
        }
        let c = cfg.hidden_dim;
        let mut head = |name: &str, rng: &mut _| -> Result<Head, NnError> {
            Ok(Head {
                conv: Conv1d::new(store, &format!("bmm.{name}.conv"), c, cfg.head_hidden, 3, rng)?,
                out: Linear::new(store, &format!("bmm.{name}.out"), cfg.head_hidden, 1, rng)?,
            })
        };
        let start_head = head("start", rng)?;
        let end_head = head("end", rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            in_dim,
            base: [
                Conv1d::new(store, "bmm.base.0", in_dim, c, 3, rng)?,
                Conv1d::new(store, "bmm.base.1", c, c, 3, rng)?,
            ],
            start_head,
            end_head,
            proposal_hidden: Linear::new(store, "bmm.proposal.hidden", c, cfg.head_hidden, rng)?,
            proposal_out: Linear::new(store, "bmm.proposal.out", cfg.head_hidden, 1, rng)?,
        })
    }

    pub fn config(&self) -> &BmmConfig {
        &self.cfg
    }

    /// Two ReLU convolutions (kernel 3): `[T, C_f]` to `[T, C_b]`.
    pub fn base_module(&self, g: &mut Graph, features: Var) -> Result<Var, NnError> {
        let cols = g.value(features).shape().get(1).copied().unwrap_or(0);
        if cols != self.in_dim {
            return Err(NnError::ShapeMismatch {
                op: "base_module",
                left: g.value(features).shape().to_vec(),
                right: vec![0, self.in_dim],
            });
        }
        let mut h = features;
        for conv in &self.base {
            let y = conv.forward(g, h)?;
            h = g.relu(y);
        }
        Ok(h)
    }

    fn head(&self, g: &mut Graph, head: &Head, hidden: Var) -> Result<Var, NnError> {
        let t = g.value(hidden).rows();
        let y = head.conv.forward(g, hidden)?;
        let y = g.relu(y);
        let y = head.out.forward(g, y)?;
        let y = g.sigmoid(y);
        g.reshape(y, &[t])
    }

    /// Start and end probabilities, each `[T]`.
    pub fn temporal_eval(&self, g: &mut Graph, hidden: Var) -> Result<(Var, Var), NnError> {
        Ok((
            self.head(g, &self.start_head, hidden)?,
            self.head(g, &self.end_head, hidden)?,
        ))
    }

    /// Actionness map `[T, D]`; invalid cells are constant 0.
    pub fn proposal_eval(&self, g: &mut Graph, hidden: Var) -> Result<Var, NnError> {
        let t = g.value(hidden).rows();
        let dmax = self.cfg.max_duration;
        let sampling = sampling_matrix(t, dmax, self.cfg.num_samples);
        let n_valid = sampling.rows();
        let sampling = g.input(sampling);
        let pooled = g.matmul(sampling, hidden)?;
        let y = self.proposal_hidden.forward(g, pooled)?;
        let y = g.relu(y);
        let y = self.proposal_out.forward(g, y)?;
        let probs = g.sigmoid(y);
        let zero = g.input(Tensor::zeros([1, 1]));
        let table = g.concat(&[probs, zero], 0)?;
        let mut next = 0;
        let index: Vec<usize> = valid_mask(t, dmax)
            .into_iter()
            .map(|ok| {
                if ok {
                    next += 1;
                    next - 1
                } else {
                    n_valid
                }
            })
            .collect();
        let full = g.gather_rows(table, &index)?;
        g.reshape(full, &[t, dmax])
    }

    pub fn forward(&self, g: &mut Graph, features: Var) -> Result<BmmOutput, NnError> {
        let hidden = self.base_module(g, features)?;
        let (start, end) = self.temporal_eval(g, hidden)?;
        let actionness = self.proposal_eval(g, hidden)?;
        Ok(BmmOutput { start, end, actionness })
    }
}

/// Window pooling weights: one row per valid cell `(i, d)` in row-major
/// order, averaging `samples` linearly interpolated positions spread evenly
/// over snippets `i ..= i + d - 1`.
pub fn sampling_matrix(t: usize, max_duration: usize, samples: usize) -> Tensor {
    let mut rows = Vec::new();
    for i in 0..t {
        for d in 1..=max_duration.min(t - i) {
            let mut w = vec![0.0; t];
            for k in 0..samples {
                let x = if samples == 1 {
                    i as f64 + (d - 1) as f64 / 2.0
                } else {
                    i as f64 + k as f64 * (d - 1) as f64 / (samples - 1) as f64
                };
                let lo = x.floor() as usize;
                let frac = x - lo as f64;
                w[lo] += (1.0 - frac) / samples as f64;
                if frac > 0.0 {
                    w[lo + 1] += frac / samples as f64;
                }
            }
            rows.push(w);
        }
    }
    Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::zeros([0, t]))
}

/// Loss terms of one video. A `None` term was dropped because its label
/// tensor had no positives or no negatives.
#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub total: Var,
    pub start: Option<Var>,
    pub end: Option<Var>,
    pub actionness: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub start: Option<f64>,
    pub end: Option<f64>,
    pub actionness: Option<f64>,
}

impl LossOutput {
    pub fn report(&self, g: &Graph) -> LossReport {
        let v = |x: Option<Var>| x.map(|x| g.value(x).item());
        LossReport {
            total: g.value(self.total).item(),
            start: v(self.start),
            end: v(self.end),
            actionness: v(self.actionness),
        }
    }
}

/// Negated class-balanced log-likelihood over masked entries:
/// `-(1/N+) sum_pos log p - (1/N-) sum_neg log(1 - p)`.
fn weighted_bce(g: &mut Graph, p: Var, labels: &[f64], mask: &[bool], what: &str) -> Result<Option<Var>, NnError> {
    let n_pos: f64 = labels.iter().zip(mask).filter(|(_, &m)| m).map(|(l, _)| l).sum();
    let n_neg: f64 = labels.iter().zip(mask).filter(|(_, &m)| m).map(|(l, _)| 1.0 - l).sum();
    if n_pos == 0.0 || n_neg == 0.0 {
        log::warn!("{what} labels have {n_pos} positives and {n_neg} negatives; term dropped");
        return Ok(None);
    }
    let pc = g.clamp(p, EPS, 1.0 - EPS);
    let log_p = g.log(pc);
    let q = g.affine(pc, -1.0, 1.0);
    let log_q = g.log(q);
    let w_pos: Vec<f64> = labels
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { l / n_pos } else { 0.0 })
        .collect();
    let w_neg: Vec<f64> = labels
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (1.0 - l) / n_neg } else { 0.0 })
        .collect();
    let a = g.weighted_sum(log_p, &w_pos)?;
    let b = g.weighted_sum(log_q, &w_neg)?;
    let s = g.add(a, b)?;
    Ok(Some(g.scale(s, -1.0)))
}

/// `L_start + L_end + L_actionness`, where the actionness term adds
/// `lambda` times the mean squared error over valid cells.
pub fn loss_aei(
    g: &mut Graph,
    out: &BmmOutput,
    labels: &GroundTruthLabels,
    lambda: f64,
) -> Result<LossOutput, NnError> {
    let t = labels.num_snippets;
    let dmax = labels.max_duration;
    let pa_shape = g.value(out.actionness).shape().to_vec();
    if g.value(out.start).len() != t || g.value(out.end).len() != t || pa_shape != [t, dmax] {
        return Err(NnError::ShapeMismatch {
            op: "loss_aei",
            left: pa_shape,
            right: vec![t, dmax],
        });
    }
    if !(lambda >= 0.0) {
        return Err(NnError::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let all = vec![true; t];
    let mask = valid_mask(t, dmax);
    let start = weighted_bce(g, out.start, &labels.start, &all, "start")?;
    let end = weighted_bce(g, out.end, &labels.end, &all, "end")?;
    let wb = weighted_bce(g, out.actionness, &labels.actionness, &mask, "actionness")?;

    let n_valid = mask.iter().filter(|&&m| m).count() as f64;
    let target = g.input(Tensor::new([t, dmax], labels.actionness.clone())?);
    let diff = g.sub(out.actionness, target)?;
    let sq = g.square(diff);
    let w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / n_valid } else { 0.0 }).collect();
    let mse = g.weighted_sum(sq, &w)?;
    let mse = g.scale(mse, lambda);
    let actionness = match wb {
        Some(wb) => g.add(wb, mse)?,
        None => mse,
    };

    let mut total = actionness;
    for term in [start, end].into_iter().flatten() {
        total = g.add(total, term)?;
    }
    Ok(LossOutput {
        total,
        start,
        end,
        actionness: Some(actionness),
    })
}

/// [`loss_aei`] evaluated on fixed maps, without parameters.
pub fn loss_value(maps: &BoundaryMaps, labels: &GroundTruthLabels, lambda: f64) -> Result<LossReport, NnError> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let t = maps.num_snippets();
    let out = BmmOutput {
        start: g.input(Tensor::vector(maps.start.clone())),
        end: g.input(Tensor::vector(maps.end.clone())),
        actionness: g.input(Tensor::new([t, maps.max_duration], maps.actionness.clone())?),
    };
    Ok(loss_aei(&mut g, &out, labels, lambda)?.report(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(d: usize) -> BmmConfig {
        BmmConfig {
            max_duration: d,
            hidden_dim: 6,
            head_hidden: 4,
            num_samples: 8,
        }
    }

    fn build(d: usize, in_dim: usize, seed: u64) -> (ParamStore, Bmm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bmm = Bmm::new(&mut store, &small_cfg(d), in_dim, &mut rng).unwrap();
        (store, bmm)
    }

    fn random_input(t: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([t, c], (0..t * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_snippet_keeps_length() {
        let (store, bmm) = build(2, 3, 0);
        let mut g = Graph::new(&store);
        let x = g.input(random_input(1, 3, 1));
        let h = bmm.base_module(&mut g, x).unwrap();
        assert_eq!(g.value(h).shape(), &[1, 6]);
        let out = bmm.forward(&mut g, x).unwrap();
        let maps = out.maps(&g, 2);
        assert_eq!(maps.valid_mask(), vec![true, false]);
        assert_eq!(maps.actionness(0, 2), 0.0);
    }

    #[test]
    fn constant_input_gives_constant_interior() {
        let (store, bmm) = build(2, 3, 2);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new([9, 3], [0.3, -0.7, 0.2].repeat(9)).unwrap());
        let h = bmm.base_module(&mut g, x).unwrap();
        let v = g.value(h);
        // Two kernel-3 layers: padding reaches two snippets in from each edge.
        for i in 3..6 {
            assert_eq!(v.row(i), v.row(2));
        }
    }

    #[test]
    fn probabilities_in_open_unit_interval() {
        let (store, bmm) = build(4, 3, 3);
        let mut g = Graph::new(&store);
        let x = g.input(random_input(7, 3, 4));
        let maps = bmm.forward(&mut g, x).unwrap().maps(&g, 4);
        for &p in maps.start.iter().chain(&maps.end) {
            assert!(p > 0.0 && p < 1.0);
        }
        for (i, &ok) in maps.valid_mask().iter().enumerate() {
            let p = maps.actionness[i];
            assert!(if ok { p > 0.0 && p < 1.0 } else { p == 0.0 });
        }
    }

    #[test]
    fn zero_head_weights_give_one_half() {
        let (mut store, bmm) = build(3, 3, 5);
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).starts_with("bmm.start") || store.name(id).starts_with("bmm.end") {
                store.tensor_mut(id).data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new(&store);
        let x = g.input(random_input(5, 3, 6));
        let h = bmm.base_module(&mut g, x).unwrap();
        let (s, e) = bmm.temporal_eval(&mut g, h).unwrap();
        assert!(g.value(s).data().iter().chain(g.value(e).data()).all(|&p| p == 0.5));
    }

    #[test]
    fn unit_window_pools_exactly_one_snippet() {
        let m = sampling_matrix(5, 3, 8);
        // Row of cell (2, 1) is the 7th valid cell: (0,1..3), (1,1..3), (2,1).
        let row = m.row(6);
        assert_eq!(row, &[0.0, 0.0, 1.0, 0.0, 0.0]);
        for r in 0..m.rows() {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(m.rows(), valid_mask(5, 3).iter().filter(|&&v| v).count());
    }

    #[test]
    fn valid_mask_matches_definition() {
        let m = valid_mask(4, 3);
        for i in 0..4 {
            for d in 1..=3 {
                assert_eq!(m[i * 3 + d - 1], i + d <= 4);
            }
        }
    }

    fn labels(start: Vec<f64>, end: Vec<f64>, act: Vec<f64>, d: usize) -> GroundTruthLabels {
        GroundTruthLabels {
            num_snippets: start.len(),
            max_duration: d,
            start,
            end,
            actionness: act,
        }
    }

    #[test]
    fn half_probabilities_give_two_log_two() {
        let l = labels(vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0, 0.0, 0.0], 2);
        let maps = BoundaryMaps::filled(2, 2, 0.5);
        let r = loss_value(&maps, &l, 0.0).unwrap();
        let expected = -2.0 * 0.5f64.ln();
        assert!((r.start.unwrap() - expected).abs() < 1e-6);
        assert!((r.end.unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let act = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let l = labels(vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], act.clone(), 2);
        let maps = BoundaryMaps::new(l.start.clone(), l.end.clone(), act, 2).unwrap();
        let r = loss_value(&maps, &l, 10.0).unwrap();
        assert!(r.total.abs() < 1e-4, "{r:?}");
    }

    #[test]
    fn degenerate_labels_drop_terms() {
        let l = labels(vec![0.0, 0.0], vec![0.0, 1.0], vec![0.0; 4], 2);
        let maps = BoundaryMaps::filled(2, 2, 0.5);
        let r = loss_value(&maps, &l, 10.0).unwrap();
        assert!(r.start.is_none());
        assert!(r.end.is_some());
        // Actionness keeps only its MSE part: 10 * 0.25.
        assert!((r.actionness.unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_is_pure_log_likelihood() {
        let l = labels(vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0, 0.0, 0.0], 2);
        let mut maps = BoundaryMaps::filled(2, 2, 0.3);
        maps.set_actionness(0, 1, 0.8);
        let r = loss_value(&maps, &l, 0.0).unwrap();
        // Positive (0,1): log 0.8. Valid negatives (0,2), (1,1): mean log 0.7.
        let manual = -(0.8f64.ln() + 0.7f64.ln());
        assert!((r.actionness.unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_outside_valid_mask() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let l = labels(
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            2,
        );
        let out = BmmOutput {
            start: g.variable(Tensor::vector(vec![0.4, 0.5, 0.6])),
            end: g.variable(Tensor::vector(vec![0.3, 0.2, 0.7])),
            actionness: g.variable(Tensor::new([3, 2], vec![0.2, 0.7, 0.4, 0.3, 0.6, 0.9]).unwrap()),
        };
        let loss = loss_aei(&mut g, &out, &l, 10.0).unwrap();
        g.backward(loss.total).unwrap();
        let grad = g.grad(out.actionness).unwrap();
        assert_eq!(grad[5], 0.0);
        assert!(grad[..5].iter().all(|&v| v != 0.0));
    }

    #[test]
    fn duplicating_negatives_keeps_balance() {
        let base = labels(vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], 1);
        let maps = BoundaryMaps::new(vec![0.7, 0.2], vec![0.1, 0.6], vec![0.8, 0.0], 1).unwrap();
        let dup_labels = labels(vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 0.0], 1);
        let dup_maps = BoundaryMaps::new(vec![0.7, 0.2, 0.2], vec![0.1, 0.6, 0.6], vec![0.8, 0.0, 0.0], 1).unwrap();
        let a = loss_value(&maps, &base, 0.0).unwrap();
        let b = loss_value(&dup_maps, &dup_labels, 0.0).unwrap();
        assert!((a.start.unwrap() - b.start.unwrap()).abs() < 1e-12);
    }
}
