//! Copy head: attention of the last hidden state over earlier hidden
//! states, a token-level copy distribution, a sigmoid gate, and the final
//! vocab/copy mixture. Scores are plain dot products `h_n . h_i` with no
//! scaling factor.

use crate::linalg::{dot, Mat};
use crate::model::Model;
use crate::{Error, Result};

/// Which positions the copy attention may look at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopyMode {
    /// No copy head: the vocabulary distribution is used as-is.
    Off,
    /// Attend only over the utterance's token positions (default: slot
    /// values are utterance spans, so template words are not copy
    /// candidates).
    Utterance,
    /// Attend over every position produced so far.
    FullContext,
}

impl CopyMode {
    pub fn enabled(&self) -> bool {
        !matches!(self, CopyMode::Off)
    }
}

/// One step of the copy head, all distributions over the vocabulary.
pub struct CopyOutput {
    /// Dense attention weights per sequence position; zero off-source.
    pub alpha: Vec<f64>,
    pub p_copy: f64,
    pub copy_dist: Vec<f64>,
    pub final_dist: Vec<f64>,
}

/// Attention of `h_last` over `hidden[0..n]`, restricted to `source`
/// positions. Returns dense weights of length `n` (zeros off-source)
/// that sum to one.
pub fn copy_attention(
    h_last: &[f64],
    hidden: &Mat,
    n: usize,
    source: &[usize],
) -> Result<Vec<f64>> {
    if source.is_empty() {
        return Err(Error::Model("copy attention over an empty source".into()));
    }
    let mut scores: Vec<f64> = Vec::with_capacity(source.len());
    for &pos in source {
        if pos >= n {
            return Err(Error::Model(format!(
                "copy source position {pos} outside sequence of length {n}"
            )));
        }
        scores.push(dot(h_last, hidden.row(pos)));
    }
    crate::linalg::softmax_in_place(&mut scores);
    let mut alpha = vec![0.0; n];
    for (&pos, &w) in source.iter().zip(&scores) {
        alpha[pos] += w;
    }
    Ok(alpha)
}

/// Token-level copy distribution: each token accumulates the attention
/// mass of every position holding it.
pub fn copy_distribution(alpha: &[f64], ids: &[u32], vocab_size: usize) -> Vec<f64> {
    debug_assert!(alpha.len() <= ids.len());
    let mut dist = vec![0.0; vocab_size];
    for (i, &a) in alpha.iter().enumerate() {
        if a != 0.0 {
            dist[ids[i] as usize] += a;
        }
    }
    dist
}

/// Sigmoid copy gate from the last hidden state.
pub fn copy_gate(model: &Model, h_last: &[f64]) -> f64 {
    model.copy_gate(h_last)
}

/// Convex mixture of the vocab and copy distributions.
pub fn mix(p_vocab: &[f64], p_copy_dist: &[f64], p_copy: f64) -> Vec<f64> {
    debug_assert_eq!(p_vocab.len(), p_copy_dist.len());
    p_vocab
        .iter()
        .zip(p_copy_dist)
        .map(|(v, c)| (1.0 - p_copy) * v + p_copy * c)
        .collect()
}

/// Run the whole copy head for the position `n-1` of a sequence whose
/// post-norm hidden states are `hidden[0..n]` and whose token ids are
/// `ids[0..n]`.
pub fn copy_output(
    model: &Model,
    hidden: &Mat,
    n: usize,
    ids: &[u32],
    source: &[usize],
) -> Result<CopyOutput> {
    let h_last = hidden.row(n - 1);
    let alpha = copy_attention(h_last, hidden, n, source)?;
    let p_copy = model.copy_gate(h_last);
    let copy_dist = copy_distribution(&alpha, ids, model.cfg.vocab_size);
    let p_vocab = model.vocab_distribution(h_last);
    let final_dist = mix(&p_vocab, &copy_dist, p_copy);
    Ok(CopyOutput {
        alpha,
        p_copy,
        copy_dist,
        final_dist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use rand::Rng;

    fn mat_from_rows(rows: Vec<Vec<f64>>) -> Mat {
        let r = rows.len();
        let c = rows[0].len();
        Mat {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        }
    }

    fn tiny_model() -> crate::model::Model {
        init_model(&ModelConfig {
            layers: 1,
            heads: 2,
            hidden_dim: 8,
            context_window: 16,
            vocab_size: 12,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn identical_states_spread_uniformly() {
        let h = vec![0.3, -1.0, 0.5];
        let hidden = mat_from_rows(vec![h.clone(), h.clone(), h.clone(), h.clone()]);
        let alpha = copy_attention(&h, &hidden, 4, &[0, 2, 3]).unwrap();
        assert_eq!(alpha[1], 0.0);
        for &p in [0usize, 2, 3].iter() {
            assert!((alpha[p] - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_source_takes_all_mass() {
        let hidden = mat_from_rows(vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]]);
        let alpha = copy_attention(hidden.row(2), &hidden, 3, &[1]).unwrap();
        assert_eq!(alpha, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_source_is_an_error() {
        let hidden = mat_from_rows(vec![vec![1.0, 0.0]]);
        assert!(copy_attention(hidden.row(0), &hidden, 1, &[]).is_err());
    }

    #[test]
    fn argmax_matches_raw_dot_products() {
        let mut rng = crate::rng::substream(9, "copy-test");
        for _ in 0..50 {
            let n = rng.gen_range(2..10);
            let d = 6;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let hidden = mat_from_rows(rows);
            let source: Vec<usize> = (0..n).step_by(2).collect();
            let h_last = hidden.row(n - 1).to_vec();
            let alpha = copy_attention(&h_last, &hidden, n, &source).unwrap();
            let best_alpha = source
                .iter()
                .copied()
                .max_by(|&a, &b| alpha[a].partial_cmp(&alpha[b]).unwrap())
                .unwrap();
            let best_dot = source
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    dot(&h_last, hidden.row(a))
                        .partial_cmp(&dot(&h_last, hidden.row(b)))
                        .unwrap()
                })
                .unwrap();
            assert_eq!(best_alpha, best_dot);
            let sum: f64 = alpha.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_tokens_accumulate() {
        let alpha = [0.2, 0.3, 0.5];
        let ids = [4u32, 7, 4];
        let dist = copy_distribution(&alpha, &ids, 10);
        assert!((dist[4] - 0.7).abs() < 1e-12);
        assert!((dist[7] - 0.3).abs() < 1e-12);
        let total: f64 = dist.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_mass_on_single_position() {
        let alpha = [0.0, 1.0, 0.0];
        let dist = copy_distribution(&alpha, &[3, 8, 3], 10);
        assert_eq!(dist[8], 1.0);
        assert_eq!(dist.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn copy_distribution_matches_bruteforce() {
        let mut rng = crate::rng::substream(2, "copy-dist");
        for _ in 0..50 {
            let n = 20;
            let vocab = 15;
            let mut alpha: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let sum: f64 = alpha.iter().sum();
            alpha.iter_mut().for_each(|a| *a /= sum);
            let ids: Vec<u32> = (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect();
            let dist = copy_distribution(&alpha, &ids, vocab);
            for w in 0..vocab as u32 {
                let brute: f64 = (0..n).filter(|&i| ids[i] == w).map(|i| alpha[i]).sum();
                assert!((dist[w as usize] - brute).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_at_zero_weights_is_half() {
        let mut m = tiny_model();
        let (cw, cb) = (m.layout().copy_w.clone(), m.layout().copy_b.clone());
        m.params[cw].fill(0.0);
        m.params[cb].fill(0.0);
        let h = vec![0.7; 8];
        assert_eq!(copy_gate(&m, &h), 0.5);
    }

    #[test]
    fn gate_saturates_with_large_bias() {
        let mut m = tiny_model();
        let (cw, cb) = (m.layout().copy_w.clone(), m.layout().copy_b.clone());
        m.params[cw].fill(0.0);
        m.params[cb.clone()].fill(10.0);
        let h = vec![0.0; 8];
        assert!((copy_gate(&m, &h) - 1.0).abs() < 1e-4);
        m.params[cb].fill(-10.0);
        assert!(copy_gate(&m, &h) < 1e-4);
        assert!(copy_gate(&m, &h) > 0.0);
    }

    #[test]
    fn gate_gradient_matches_finite_difference() {
        let mut m = tiny_model();
        let h: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let p = copy_gate(&m, &h);
        let analytic: Vec<f64> = h.iter().map(|&x| p * (1.0 - p) * x).collect();
        let range = m.layout().copy_w.clone();
        let eps = 1e-6;
        for (k, idx) in range.clone().enumerate() {
            let orig = m.params[idx];
            m.params[idx] = orig + eps;
            let plus = copy_gate(&m, &h);
            m.params[idx] = orig - eps;
            let minus = copy_gate(&m, &h);
            m.params[idx] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            assert!((analytic[k] - fd).abs() < 1e-8, "component {k}");
        }
    }

    #[test]
    fn mix_identity_cases_are_exact() {
        let pv = vec![0.7, 0.2, 0.1];
        let pc = vec![0.0, 0.5, 0.5];
        assert_eq!(mix(&pv, &pc, 0.0), pv);
        assert_eq!(mix(&pv, &pc, 1.0), pc);
    }

    #[test]
    fn mix_toy_arithmetic() {
        let out = mix(&[0.9, 0.1], &[0.2, 0.8], 0.4);
        assert!((out[0] - 0.62).abs() < 1e-12);
        assert!((out[1] - 0.38).abs() < 1e-12);
    }

    #[test]
    fn mix_lower_bounds_hold() {
        let mut rng = crate::rng::substream(3, "mix");
        for _ in 0..200 {
            let k = 8;
            let norm = |mut v: Vec<f64>| {
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                v
            };
            let pv = norm((0..k).map(|_| rng.gen_range(0.01..1.0)).collect());
            let pc = norm((0..k).map(|_| rng.gen_range(0.0..1.0)).collect());
            let p: f64 = rng.gen_range(0.0..1.0);
            let out = mix(&pv, &pc, p);
            let sum: f64 = out.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for i in 0..k {
                assert!(out[i] >= p * pc[i] - 1e-15);
                assert!(out[i] >= (1.0 - p) * pv[i] - 1e-15);
            }
        }
    }

    #[test]
    fn forced_zero_gate_reproduces_the_copy_free_distribution() {
        let mut m = tiny_model();
        let (cw, cb) = (m.layout().copy_w.clone(), m.layout().copy_b.clone());
        m.params[cw].fill(0.0);
        m.params[cb].fill(-1e9); // sigmoid underflows to exactly 0
        let ids = [3u32, 5, 7, 2, 9];
        let cache = m.forward(&ids).unwrap();
        let out = copy_output(&m, &cache.states, ids.len(), &ids, &[0, 1, 2]).unwrap();
        assert_eq!(out.p_copy, 0.0);
        let plain = m.vocab_distribution(cache.states.row(ids.len() - 1));
        assert_eq!(out.final_dist, plain, "mixture with a zero gate must be bit-identical");
    }

    #[test]
    fn copy_output_support_is_source_tokens() {
        let m = tiny_model();
        let ids = [3u32, 5, 7, 2, 9];
        let cache = m.forward(&ids).unwrap();
        let source = vec![1usize, 2];
        let out = copy_output(&m, &cache.states, ids.len(), &ids, &source).unwrap();
        for (t, &mass) in out.copy_dist.iter().enumerate() {
            if mass > 0.0 {
                assert!(
                    source.iter().any(|&p| ids[p] as usize == t),
                    "token {t} has copy mass but is not in the source"
                );
            }
        }
        let s: f64 = out.final_dist.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}
