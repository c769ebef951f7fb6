//! Semantic-guided masking.
//!
//! Two learnable D×D query matrices score every token: the temporal query
//! keys each token against the same position in the previous frame, the
//! spatial query keys it against the current frame's mean token. The total
//! score is their sum. Low-scoring tokens are the masking candidates during
//! reconstruction training; the mask itself is drawn at random from a
//! low-score pool so masking stays stochastic.
//!
//! Queries are initialized near the negated identity: a token that matches
//! its previous-frame self (static content) or its frame mean (uniform
//! content) then starts with a strongly negative score, so temporally and
//! spatially redundant tokens are the first masking candidates.

use crate::encoder::FrameTokenGrid;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// The two learnable query matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SgmParams {
    /// [D, D], keys tokens against the previous frame.
    pub temp_query: Tensor,
    /// [D, D], keys tokens against the current frame's mean token.
    pub spatio_query: Tensor,
}

impl SgmParams {
    /// Negated identity plus small seeded noise.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "sgm-init");
        let noise = 0.01 / (dim as f64).sqrt();
        let mut make = |salt: f64| {
            let mut t = Tensor::zeros(vec![dim, dim]);
            for r in 0..dim {
                for c in 0..dim {
                    let mut v = rng.gen_range(-noise..noise) + salt * 0.0;
                    if r == c {
                        v -= 1.0;
                    }
                    t.data_mut()[r * dim + c] = v;
                }
            }
            t
        };
        SgmParams { temp_query: make(0.0), spatio_query: make(1.0) }
    }

    pub fn zeros(dim: usize) -> Self {
        SgmParams {
            temp_query: Tensor::zeros(vec![dim, dim]),
            spatio_query: Tensor::zeros(vec![dim, dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.temp_query.shape()[0]
    }
}

/// Per-token scores with their temporal and spatial components.
/// `scores` is elementwise exactly `score_temp + score_spa`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScores {
    pub scores: Tensor,
    pub score_temp: Tensor,
    pub score_spa: Tensor,
}

impl TokenScores {
    pub fn frames(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.scores.shape()[1]
    }
}

/// A concrete masking decision over a [T, N] grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    mask: Vec<bool>,
    frames: usize,
    tokens_per_frame: usize,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    /// No-op plan (nothing masked).
    pub fn empty(frames: usize, tokens_per_frame: usize) -> Self {
        MaskPlan {
            mask: vec![false; frames * tokens_per_frame],
            frames,
            tokens_per_frame,
            ratio: 0.0,
            seed: 0,
        }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn is_masked(&self, t: usize, i: usize) -> bool {
        self.mask[t * self.tokens_per_frame + i]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }
}

/// Emit the score computation onto a tape. Returns (total, temporal,
/// spatial) score vars of shape [T, N].
pub fn scores_on_tape(
    tape: &mut Tape,
    tokens: Var,
    temp_query: Var,
    spatio_query: Var,
) -> Result<(Var, Var, Var)> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("sgm_scores", format!("expected [T,N,D], got {shape:?}")));
    }
    let (t, n, d) = (shape[0], shape[1], shape[2]);
    if tape.shape(temp_query) != [d, d] || tape.shape(spatio_query) != [d, d] {
        return Err(Error::shape(
            "sgm_scores",
            format!(
                "token dim {d} but queries are {:?} / {:?}",
                tape.shape(temp_query),
                tape.shape(spatio_query)
            ),
        ));
    }
    // previous-frame tokens, zeros at frame 0
    let v_prev = tape.shift_frames(tokens)?;
    // per-frame mean token
    let v_mean = tape.mean_axis1(tokens)?;

    let prev_flat = tape.reshape(v_prev, vec![t * n, d])?;
    let s_temp_flat = tape.matmul(prev_flat, temp_query)?;
    let s_temp = tape.reshape(s_temp_flat, vec![t, n, d])?;

    let s_spa_rows = tape.matmul(v_mean, spatio_query)?;
    let s_spa = tape.repeat_axis1(s_spa_rows, n)?;

    let score_temp = tape.dot_lastdim(tokens, s_temp)?;
    let score_spa = tape.dot_lastdim(tokens, s_spa)?;
    let scores = tape.add(score_temp, score_spa)?;
    Ok((scores, score_temp, score_spa))
}

/// Score every token of a grid.
pub fn sgm_scores(grid: &FrameTokenGrid, params: &SgmParams) -> Result<TokenScores> {
    let mut tape = Tape::new();
    let tokens = tape.leaf(&grid.tokens);
    let tq = tape.leaf(&params.temp_query);
    let sq = tape.leaf(&params.spatio_query);
    let (scores, score_temp, score_spa) = scores_on_tape(&mut tape, tokens, tq, sq)?;
    Ok(TokenScores {
        scores: tape.value(scores),
        score_temp: tape.value(score_temp),
        score_spa: tape.value(score_spa),
    })
}

/// Size of the low-score candidate pool for a given ratio.
///
/// Nominally the bottom 2ρ fraction; capped so the pool never reaches into
/// the top half once ρ approaches 0.5 (a full-width pool would make the
/// draw uniform and lose low-score targeting), and floored at the mask
/// count so a plan always exists.
fn pool_size(total: usize, masked: usize, ratio: f64) -> usize {
    let nominal = (2.0 * ratio * total as f64).round() as usize;
    masked.max(nominal.min(total - masked))
}

/// Draw a mask plan: exactly round(ρ·T·N) tokens, sampled uniformly without
/// replacement from the low-score candidate pool. Ties in the score ranking
/// break toward lower (frame, token) index.
pub fn make_mask_plan(scores: &TokenScores, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Usage(format!("mask ratio must be in [0, 1), got {ratio}")));
    }
    let (frames, n) = (scores.frames(), scores.tokens_per_frame());
    let total = frames * n;
    let masked = (ratio * total as f64).round() as usize;
    let mut mask = vec![false; total];
    if masked > 0 {
        let mut order: Vec<usize> = (0..total).collect();
        order.sort_by(|&a, &b| {
            scores.scores.data()[a]
                .total_cmp(&scores.scores.data()[b])
                .then(a.cmp(&b))
        });
        let pool = pool_size(total, masked, ratio);
        let mut rng = substream(seed, "mask-plan");
        let candidates = &mut order[..pool];
        for i in 0..masked {
            let j = rng.gen_range(i..pool);
            candidates.swap(i, j);
        }
        for &idx in candidates[..masked].iter() {
            mask[idx] = true;
        }
    }
    Ok(MaskPlan { mask, frames, tokens_per_frame: n, ratio, seed })
}

/// Kept-vs-masked separation loss: mean score of masked tokens minus mean
/// score of kept tokens. Minimizing it pushes masked (low) scores further
/// below kept scores, so the ranking the plan acted on becomes stable.
/// Empty or full masks contribute nothing (returns None).
pub fn aux_loss_on_tape(tape: &mut Tape, scores: Var, plan: &MaskPlan) -> Result<Option<Var>> {
    let masked = plan.masked_indices();
    let kept = plan.kept_indices();
    if masked.is_empty() || kept.is_empty() {
        return Ok(None);
    }
    let masked_mean = tape.gather_mean(scores, &masked)?;
    let kept_mean = tape.gather_mean(scores, &kept)?;
    Ok(Some(tape.sub(masked_mean, kept_mean)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn grid(t: usize, n: usize, d: usize, seed: u64) -> FrameTokenGrid {
        let mut rng = seeded(seed);
        let tokens = Tensor::rand_uniform(vec![t, n, d], 1.0, &mut rng);
        FrameTokenGrid::new(tokens, (0..t).map(|x| x as f64).collect()).unwrap()
    }

    fn identity(dim: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![dim, dim]);
        for i in 0..dim {
            t.data_mut()[i * dim + i] = 1.0;
        }
        t
    }

    #[test]
    fn single_frame_has_zero_temporal_score() {
        let g = grid(1, 4, 8, 31);
        let scores = sgm_scores(&g, &SgmParams::init(8, 0)).unwrap();
        assert!(scores.score_temp.data().iter().all(|&v| v == 0.0));
        assert_eq!(scores.scores, scores.score_spa);
    }

    #[test]
    fn zero_queries_give_zero_scores() {
        let g = grid(3, 4, 8, 32);
        let scores = sgm_scores(&g, &SgmParams::zeros(8)).unwrap();
        assert!(scores.scores.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_queries_match_loop_oracle() {
        let g = grid(3, 4, 8, 33);
        let params = SgmParams { temp_query: identity(8), spatio_query: identity(8) };
        let scores = sgm_scores(&g, &params).unwrap();
        for t in 0..3 {
            let mut mean = vec![0.0; 8];
            for i in 0..4 {
                for k in 0..8 {
                    mean[k] += g.token(t, i)[k] / 4.0;
                }
            }
            for i in 0..4 {
                let tok = g.token(t, i);
                let temp: f64 = if t == 0 {
                    0.0
                } else {
                    tok.iter().zip(g.token(t - 1, i)).map(|(a, b)| a * b).sum()
                };
                let spa: f64 = tok.iter().zip(&mean).map(|(a, b)| a * b).sum();
                let got = scores.scores.at(&[t, i]);
                assert!(
                    (got - (temp + spa)).abs() < 1e-12,
                    "({t},{i}): {got} vs {}",
                    temp + spa
                );
            }
        }
    }

    #[test]
    fn additivity_is_exact() {
        let g = grid(4, 6, 16, 34);
        let s = sgm_scores(&g, &SgmParams::init(16, 5)).unwrap();
        for i in 0..s.scores.numel() {
            assert_eq!(
                s.scores.data()[i],
                s.score_temp.data()[i] + s.score_spa.data()[i]
            );
        }
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let g = grid(2, 4, 8, 35);
        assert!(sgm_scores(&g, &SgmParams::zeros(16)).is_err());
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        let g = grid(2, 4, 8, 36);
        let s = sgm_scores(&g, &SgmParams::init(8, 0)).unwrap();
        let plan = make_mask_plan(&s, 0.0, 7).unwrap();
        assert_eq!(plan.masked_count(), 0);
    }

    #[test]
    fn ratio_out_of_range_rejected() {
        let g = grid(2, 4, 8, 37);
        let s = sgm_scores(&g, &SgmParams::init(8, 0)).unwrap();
        assert!(make_mask_plan(&s, 1.0, 0).is_err());
        assert!(make_mask_plan(&s, -0.1, 0).is_err());
    }

    #[test]
    fn equal_scores_mask_exact_count_reproducibly() {
        let scores = TokenScores {
            scores: Tensor::zeros(vec![2, 4]),
            score_temp: Tensor::zeros(vec![2, 4]),
            score_spa: Tensor::zeros(vec![2, 4]),
        };
        let a = make_mask_plan(&scores, 0.25, 99).unwrap();
        let b = make_mask_plan(&scores, 0.25, 99).unwrap();
        assert_eq!(a.masked_count(), 2);
        assert_eq!(a, b);
        let c = make_mask_plan(&scores, 0.25, 100).unwrap();
        assert_eq!(c.masked_count(), 2);
    }

    #[test]
    fn quarter_ratio_draws_from_bottom_half_pool() {
        // one frame of 8 tokens scoring 0..7: pool is the bottom 4
        let scores = TokenScores {
            scores: Tensor::new(vec![1, 8], (0..8).map(|i| i as f64).collect()).unwrap(),
            score_temp: Tensor::zeros(vec![1, 8]),
            score_spa: Tensor::zeros(vec![1, 8]),
        };
        for seed in 0..50 {
            let plan = make_mask_plan(&scores, 0.25, seed).unwrap();
            assert_eq!(plan.masked_count(), 2);
            for idx in plan.masked_indices() {
                assert!(idx < 4, "masked index {idx} outside bottom-half pool");
            }
        }
    }

    #[test]
    fn half_ratio_masks_exactly_the_bottom_half() {
        let scores = TokenScores {
            scores: Tensor::new(vec![1, 8], vec![5.0, 1.0, 7.0, 0.0, 3.0, 6.0, 2.0, 4.0])
                .unwrap(),
            score_temp: Tensor::zeros(vec![1, 8]),
            score_spa: Tensor::zeros(vec![1, 8]),
        };
        for seed in 0..20 {
            let plan = make_mask_plan(&scores, 0.5, seed).unwrap();
            let masked = plan.masked_indices();
            assert_eq!(masked, vec![1, 3, 4, 6], "seed {seed}");
        }
    }

    #[test]
    fn mask_cardinality_is_exact_over_sweep() {
        let mut rng = seeded(40);
        for _ in 0..60 {
            let t = rng.gen_range(1..6);
            let n = rng.gen_range(1..12);
            let ratio: f64 = rng.gen_range(0.0..0.999);
            let scores = TokenScores {
                scores: Tensor::rand_uniform(vec![t, n], 1.0, &mut rng),
                score_temp: Tensor::zeros(vec![t, n]),
                score_spa: Tensor::zeros(vec![t, n]),
            };
            let plan = make_mask_plan(&scores, ratio, rng.gen()).unwrap();
            let want = (ratio * (t * n) as f64).round() as usize;
            assert_eq!(plan.masked_count(), want, "t={t} n={n} ratio={ratio}");
        }
    }

    #[test]
    fn masked_mean_score_not_above_global_mean() {
        let mut rng = seeded(41);
        for case in 0..80 {
            let t = rng.gen_range(2..6);
            let n = rng.gen_range(4..12);
            let ratio: f64 = rng.gen_range(0.05..0.95);
            let scores_t = Tensor::rand_uniform(vec![t, n], 1.0, &mut rng);
            let scores = TokenScores {
                scores: scores_t.clone(),
                score_temp: Tensor::zeros(vec![t, n]),
                score_spa: Tensor::zeros(vec![t, n]),
            };
            let plan = make_mask_plan(&scores, ratio, rng.gen()).unwrap();
            if plan.masked_count() == 0 {
                continue;
            }
            let global: f64 = scores_t.data().iter().sum::<f64>() / (t * n) as f64;
            let masked: f64 = plan
                .masked_indices()
                .iter()
                .map(|&i| scores_t.data()[i])
                .sum::<f64>()
                / plan.masked_count() as f64;
            assert!(
                masked <= global + 1e-12,
                "case {case}: masked mean {masked} > global {global} (ratio {ratio})"
            );
        }
    }

    #[test]
    fn aux_loss_gradient_matches_finite_differences() {
        let g = grid(3, 4, 8, 42);
        let params = SgmParams::init(8, 3);
        let scores = sgm_scores(&g, &params).unwrap();
        let plan = make_mask_plan(&scores, 0.25, 11).unwrap();

        let eval = |tq: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let tokens = tape.leaf(&g.tokens);
            let vtq = tape.leaf(tq);
            let vsq = tape.leaf(&params.spatio_query);
            let (s, _, _) = scores_on_tape(&mut tape, tokens, vtq, vsq).unwrap();
            let aux = aux_loss_on_tape(&mut tape, s, &plan).unwrap().unwrap();
            tape.scalar(aux)
        };

        let mut tape = Tape::new();
        let tokens = tape.leaf(&g.tokens);
        let vtq = tape.leaf(&params.temp_query);
        let vsq = tape.leaf(&params.spatio_query);
        let (s, _, _) = scores_on_tape(&mut tape, tokens, vtq, vsq).unwrap();
        let aux = aux_loss_on_tape(&mut tape, s, &plan).unwrap().unwrap();
        tape.backward(aux).unwrap();
        let analytic = tape.grad(vtq).to_vec();
        assert!(analytic.iter().any(|&g| g != 0.0), "gradient identically zero");

        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for i in 0..analytic.len() {
            let mut plus = params.temp_query.clone();
            plus.data_mut()[i] += h;
            let mut minus = params.temp_query.clone();
            minus.data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel <= 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn aux_loss_gradient_at_zero_queries_matches_bilinear_form() {
        // dscore/dTq[p,q] = prev[p]·tok[q]; the aux gradient is the masked
        // mean of those outer products minus the kept mean.
        let g = grid(3, 4, 8, 43);
        let params = SgmParams::zeros(8);
        let scores = sgm_scores(&g, &params).unwrap();
        let plan = make_mask_plan(&scores, 0.25, 5).unwrap();

        let mut tape = Tape::new();
        let tokens = tape.leaf(&g.tokens);
        let vtq = tape.leaf(&params.temp_query);
        let vsq = tape.leaf(&params.spatio_query);
        let (s, _, _) = scores_on_tape(&mut tape, tokens, vtq, vsq).unwrap();
        let aux = aux_loss_on_tape(&mut tape, s, &plan).unwrap().unwrap();
        tape.backward(aux).unwrap();

        let mut want = vec![0.0; 64];
        let mut accumulate = |idx: usize, w: f64| {
            let (t, i) = (idx / 4, idx % 4);
            let prev = if t == 0 { vec![0.0; 8] } else { g.token(t - 1, i).to_vec() };
            let tok = g.token(t, i);
            for p in 0..8 {
                for q in 0..8 {
                    want[p * 8 + q] += w * prev[p] * tok[q];
                }
            }
        };
        let masked = plan.masked_indices();
        let kept = plan.kept_indices();
        for &idx in &masked {
            accumulate(idx, 1.0 / masked.len() as f64);
        }
        for &idx in &kept {
            accumulate(idx, -1.0 / kept.len() as f64);
        }
        for (got, want) in tape.grad(vtq).iter().zip(&want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_ratio_contributes_no_aux_loss() {
        let g = grid(2, 4, 8, 44);
        let params = SgmParams::init(8, 0);
        let scores = sgm_scores(&g, &params).unwrap();
        let plan = make_mask_plan(&scores, 0.0, 0).unwrap();
        let mut tape = Tape::new();
        let tokens = tape.leaf(&g.tokens);
        let vtq = tape.leaf(&params.temp_query);
        let vsq = tape.leaf(&params.spatio_query);
        let (s, _, _) = scores_on_tape(&mut tape, tokens, vtq, vsq).unwrap();
        assert!(aux_loss_on_tape(&mut tape, s, &plan).unwrap().is_none());
    }

    #[test]
    fn mask_is_deterministic_in_scores_ratio_seed() {
        let g = grid(4, 8, 16, 45);
        let s = sgm_scores(&g, &SgmParams::init(16, 9)).unwrap();
        let a = make_mask_plan(&s, 0.4, 123).unwrap();
        let b = make_mask_plan(&s, 0.4, 123).unwrap();
        assert_eq!(a, b);
        let c = make_mask_plan(&s, 0.4, 124).unwrap();
        assert_ne!(a.masked_indices(), c.masked_indices());
    }
}
