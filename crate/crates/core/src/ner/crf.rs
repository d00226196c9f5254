//! Linear-chain CRF over `T` tags: forward algorithm, forward-backward
//! gradients and Viterbi decoding with an optional BIO mask.

use serde::{Deserialize, Serialize};

use crate::corpus::{is_bio_valid, Tag, TagSequence};
use crate::error::{Error, Result};
use crate::math::log_sum_exp;

/// Row-major `L×T` emission scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Emissions {
    pub num_tags: usize,
    pub scores: Vec<f64>,
}

impl Emissions {
    pub fn new(num_tags: usize, scores: Vec<f64>) -> Result<Self> {
        if num_tags == 0 || scores.len() % num_tags != 0 {
            return Err(Error::DimensionMismatch {
                expected: num_tags,
                actual: scores.len(),
            });
        }
        Ok(Emissions { num_tags, scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len() / self.num_tags
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn at(&self, i: usize, t: usize) -> f64 {
        self.scores[i * self.num_tags + t]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    pub num_tags: usize,
    /// `transitions[prev * T + next]`.
    pub transitions: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl CrfParams {
    pub fn zeros(num_tags: usize) -> Self {
        CrfParams {
            num_tags,
            transitions: vec![0.0; num_tags * num_tags],
            start: vec![0.0; num_tags],
            end: vec![0.0; num_tags],
        }
    }

    pub fn trans(&self, prev: usize, next: usize) -> f64 {
        self.transitions[prev * self.num_tags + next]
    }

    /// Flat parameter vector: transitions, start, end.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.transitions.clone();
        v.extend_from_slice(&self.start);
        v.extend_from_slice(&self.end);
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let t = self.num_tags;
        self.transitions.copy_from_slice(&v[..t * t]);
        self.start.copy_from_slice(&v[t * t..t * t + t]);
        self.end.copy_from_slice(&v[t * t + t..t * t + 2 * t]);
    }

    pub fn num_params(&self) -> usize {
        self.num_tags * (self.num_tags + 2)
    }

    fn check(&self, em: &Emissions) -> Result<()> {
        if em.num_tags != self.num_tags {
            return Err(Error::DimensionMismatch {
                expected: self.num_tags,
                actual: em.num_tags,
            });
        }
        if em.is_empty() {
            return Err(Error::InvalidArgument("CRF input must have at least one position".into()));
        }
        Ok(())
    }
}

/// Score of one tag path.
pub fn path_score(em: &Emissions, crf: &CrfParams, tags: &[usize]) -> f64 {
    let mut s = crf.start[tags[0]] + crf.end[tags[tags.len() - 1]];
    for (i, &t) in tags.iter().enumerate() {
        s += em.at(i, t);
        if i > 0 {
            s += crf.trans(tags[i - 1], t);
        }
    }
    s
}

fn forward(em: &Emissions, crf: &CrfParams) -> Vec<f64> {
    let t_n = crf.num_tags;
    let l = em.len();
    let mut alpha = vec![0.0; l * t_n];
    for t in 0..t_n {
        alpha[t] = crf.start[t] + em.at(0, t);
    }
    let mut buf = vec![0.0; t_n];
    for i in 1..l {
        for t in 0..t_n {
            for p in 0..t_n {
                buf[p] = alpha[(i - 1) * t_n + p] + crf.trans(p, t);
            }
            alpha[i * t_n + t] = log_sum_exp(&buf) + em.at(i, t);
        }
    }
    alpha
}

fn backward(em: &Emissions, crf: &CrfParams) -> Vec<f64> {
    let t_n = crf.num_tags;
    let l = em.len();
    let mut beta = vec![0.0; l * t_n];
    beta[(l - 1) * t_n..].copy_from_slice(&crf.end);
    let mut buf = vec![0.0; t_n];
    for i in (0..l - 1).rev() {
        for t in 0..t_n {
            for n in 0..t_n {
                buf[n] = crf.trans(t, n) + em.at(i + 1, n) + beta[(i + 1) * t_n + n];
            }
            beta[i * t_n + t] = log_sum_exp(&buf);
        }
    }
    beta
}

fn log_z_from_alpha(alpha: &[f64], crf: &CrfParams, l: usize) -> f64 {
    let t_n = crf.num_tags;
    let last: Vec<f64> = (0..t_n).map(|t| alpha[(l - 1) * t_n + t] + crf.end[t]).collect();
    log_sum_exp(&last)
}

/// `log Σ_paths exp(score)` by the forward algorithm.
pub fn crf_log_partition(em: &Emissions, crf: &CrfParams) -> Result<f64> {
    crf.check(em)?;
    Ok(log_z_from_alpha(&forward(em, crf), crf, em.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfNll {
    pub loss: f64,
    /// Same layout as the emissions.
    pub emission_grad: Vec<f64>,
    /// Same layout as [`CrfParams::flat`].
    pub param_grad: Vec<f64>,
}

/// Negative log-likelihood of a gold path, unmasked, with analytic gradients
/// from forward-backward marginals.
pub fn crf_nll_indices(em: &Emissions, crf: &CrfParams, gold: &[usize]) -> Result<CrfNll> {
    crf.check(em)?;
    let t_n = crf.num_tags;
    let l = em.len();
    if gold.len() != l {
        return Err(Error::DimensionMismatch { expected: l, actual: gold.len() });
    }
    if let Some(&bad) = gold.iter().find(|&&t| t >= t_n) {
        return Err(Error::InvalidArgument(format!("tag index {bad} out of range")));
    }
    let alpha = forward(em, crf);
    let beta = backward(em, crf);
    let log_z = log_z_from_alpha(&alpha, crf, l);
    let loss = log_z - path_score(em, crf, gold);

    let mut emission_grad = vec![0.0; l * t_n];
    for i in 0..l {
        for t in 0..t_n {
            emission_grad[i * t_n + t] = (alpha[i * t_n + t] + beta[i * t_n + t] - log_z).exp();
        }
        emission_grad[i * t_n + gold[i]] -= 1.0;
    }
    let mut param_grad = vec![0.0; crf.num_params()];
    let (trans_g, rest) = param_grad.split_at_mut(t_n * t_n);
    let (start_g, end_g) = rest.split_at_mut(t_n);
    for i in 0..l - 1 {
        for p in 0..t_n {
            for n in 0..t_n {
                let lp = alpha[i * t_n + p] + crf.trans(p, n) + em.at(i + 1, n) + beta[(i + 1) * t_n + n];
                trans_g[p * t_n + n] += (lp - log_z).exp();
            }
        }
        trans_g[gold[i] * t_n + gold[i + 1]] -= 1.0;
    }
    for t in 0..t_n {
        start_g[t] = emission_grad[t] + if gold[0] == t { 1.0 } else { 0.0 };
        end_g[t] = (alpha[(l - 1) * t_n + t] + crf.end[t] - log_z).exp();
    }
    start_g[gold[0]] -= 1.0;
    end_g[gold[l - 1]] -= 1.0;
    Ok(CrfNll {
        loss,
        emission_grad,
        param_grad,
    })
}

/// BIO-tagged NLL; the gold sequence must be BIO-valid.
pub fn crf_nll(em: &Emissions, crf: &CrfParams, gold: &[Tag]) -> Result<CrfNll> {
    if !is_bio_valid(gold) {
        return Err(Error::InvalidArgument("gold tags are not BIO-valid".into()));
    }
    let idx: Vec<usize> = gold.iter().map(|t| t.index()).collect();
    crf_nll_indices(em, crf, &idx)
}

/// Max-scoring path over the transitions permitted by `allowed(prev, next)`
/// (`prev = None` at the first position). Ties go to the lower tag index.
pub fn viterbi_with<F>(em: &Emissions, crf: &CrfParams, allowed: F) -> Result<Vec<usize>>
where
    F: Fn(Option<usize>, usize) -> bool,
{
    crf.check(em)?;
    let t_n = crf.num_tags;
    let l = em.len();
    let mut delta = vec![f64::NEG_INFINITY; l * t_n];
    let mut back = vec![0usize; l * t_n];
    for t in 0..t_n {
        if allowed(None, t) {
            delta[t] = crf.start[t] + em.at(0, t);
        }
    }
    for i in 1..l {
        for t in 0..t_n {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for p in 0..t_n {
                if !allowed(Some(p), t) {
                    continue;
                }
                let s = delta[(i - 1) * t_n + p] + crf.trans(p, t);
                if s > best {
                    best = s;
                    arg = p;
                }
            }
            delta[i * t_n + t] = best + em.at(i, t);
            back[i * t_n + t] = arg;
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for t in 0..t_n {
        let s = delta[(l - 1) * t_n + t] + crf.end[t];
        if s > best {
            best = s;
            last = t;
        }
    }
    let mut path = vec![last; l];
    for i in (1..l).rev() {
        path[i - 1] = back[i * t_n + path[i]];
    }
    Ok(path)
}

/// `I` may not start a sequence or follow `O`.
pub fn bio_allowed(prev: Option<usize>, next: usize) -> bool {
    !(next == Tag::I.index() && prev.is_none_or(|p| p == Tag::O.index()))
}

/// BIO-masked Viterbi over the three tags.
pub fn viterbi(em: &Emissions, crf: &CrfParams) -> Result<TagSequence> {
    if crf.num_tags != Tag::ALL.len() {
        return Err(Error::DimensionMismatch {
            expected: Tag::ALL.len(),
            actual: crf.num_tags,
        });
    }
    Ok(viterbi_with(em, crf, bio_allowed)?
        .into_iter()
        .map(Tag::from_index)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Every tag path of length `l` over `t` tags.
    fn all_paths(l: usize, t: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..l {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..t).map(move |x| {
                        let mut q = p.clone();
                        q.push(x);
                        q
                    })
                })
                .collect();
        }
        out
    }

    fn random_instance(rng: &mut ChaCha8Rng, l: usize, t: usize) -> (Emissions, CrfParams) {
        let em = Emissions::new(t, (0..l * t).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let mut crf = CrfParams::zeros(t);
        let flat: Vec<f64> = (0..crf.num_params()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        crf.set_flat(&flat);
        (em, crf)
    }

    #[test]
    fn single_position_two_tags() {
        let em = Emissions::new(2, vec![0.0, 0.0]).unwrap();
        let z = crf_log_partition(&em, &CrfParams::zeros(2)).unwrap();
        assert!((z - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_positions_all_zero() {
        let em = Emissions::new(2, vec![0.0; 4]).unwrap();
        let z = crf_log_partition(&em, &CrfParams::zeros(2)).unwrap();
        assert!((z - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn partition_matches_enumeration_for_81_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (em, crf) = random_instance(&mut rng, 4, 3);
        let scores: Vec<f64> = all_paths(4, 3).iter().map(|p| path_score(&em, &crf, p)).collect();
        assert_eq!(scores.len(), 81);
        let brute = log_sum_exp(&scores);
        assert!((crf_log_partition(&em, &crf).unwrap() - brute).abs() < 1e-10);
    }

    #[test]
    fn viterbi_follows_strong_emissions() {
        let em = Emissions::new(3, vec![5.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 5.0]).unwrap();
        let path = viterbi(&em, &CrfParams::zeros(3)).unwrap();
        assert_eq!(path, vec![Tag::O, Tag::B, Tag::I]);
    }

    #[test]
    fn viterbi_never_emits_i_after_o() {
        let em = Emissions::new(3, vec![9.0, 0.0, 0.0, 0.0, 1.0, 5.0]).unwrap();
        let path = viterbi(&em, &CrfParams::zeros(3)).unwrap();
        assert!(is_bio_valid(&path));
        assert_eq!(path, vec![Tag::O, Tag::B]);
    }

    #[test]
    fn ties_prefer_lower_tags() {
        let em = Emissions::new(3, vec![0.0; 6]).unwrap();
        let path = viterbi(&em, &CrfParams::zeros(3)).unwrap();
        assert_eq!(path, vec![Tag::O, Tag::O]);
    }

    #[test]
    fn viterbi_matches_enumerated_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let l = rng.gen_range(1..=6);
            let (em, crf) = random_instance(&mut rng, l, 3);
            let best = all_paths(l, 3)
                .into_iter()
                .filter(|p| p.iter().enumerate().all(|(i, &t)| bio_allowed(if i == 0 { None } else { Some(p[i - 1]) }, t)))
                .map(|p| (path_score(&em, &crf, &p), p))
                .fold((f64::NEG_INFINITY, vec![]), |a, b| if b.0 > a.0 { b } else { a });
            let got: Vec<usize> = viterbi(&em, &crf).unwrap().iter().map(|t| t.index()).collect();
            assert_eq!(got, best.1);
        }
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (em, crf) = random_instance(&mut rng, 5, 3);
        let gold = [Tag::O, Tag::B, Tag::I, Tag::O, Tag::B];
        let n_em = em.scores.len();
        let mut x0 = em.scores.clone();
        x0.extend(crf.flat());
        let f = |x: &[f64]| {
            let e = Emissions::new(3, x[..n_em].to_vec()).unwrap();
            let mut c = CrfParams::zeros(3);
            c.set_flat(&x[n_em..]);
            let r = crf_nll(&e, &c, &gold).unwrap();
            let mut g = r.emission_grad;
            g.extend(r.param_grad);
            (r.loss, g)
        };
        let report = grad_check(f, &x0, 1e-5, 1e-6, None, 0);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn invalid_gold_is_rejected() {
        let em = Emissions::new(3, vec![0.0; 6]).unwrap();
        assert!(crf_nll(&em, &CrfParams::zeros(3), &[Tag::O, Tag::I]).is_err());
    }

    #[test]
    fn nll_is_non_negative_and_viterbi_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let l = rng.gen_range(1..=6);
            let (em, crf) = random_instance(&mut rng, l, 3);
            let path = viterbi(&em, &crf).unwrap();
            assert!(is_bio_valid(&path));
            assert!(crf_nll(&em, &crf, &path).unwrap().loss >= -1e-12);
            let mut shifted = em.clone();
            let pos = rng.gen_range(0..l);
            let c = rng.gen_range(-4.0..4.0);
            for t in 0..3 {
                shifted.scores[pos * 3 + t] += c;
            }
            assert_eq!(viterbi(&shifted, &crf).unwrap(), path);
        }
    }
}
