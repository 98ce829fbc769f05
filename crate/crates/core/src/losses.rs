//! Objective terms for synthesis training and recognizer fine-tuning.
//!
//! Each term has a graph form (used inside training steps, differentiable)
//! and a value form on plain tensors that runs the same graph on constants.
//! All expectations reduce by the mean over batch, patch and pixel axes.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::Recognizer;
use crate::params::Bound;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_ip: f64,
    pub lambda_im: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            lambda_ip: 3.0e7,
            lambda_im: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_ip", self.lambda_ip),
            ("lambda_im", self.lambda_im),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    pub margin_alpha: f64,
    pub hard_k: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin_alpha: 0.1,
            hard_k: 4,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin_alpha > 0.0) || !self.margin_alpha.is_finite() {
            return Err(Error::Config("margin_alpha must be positive".into()));
        }
        if self.hard_k < 1 {
            return Err(Error::Config("hard_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// How discriminator scores enter the adversarial terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialMode {
    /// Scores are compared to targets 1 (real) and 0 (fake) in squared error.
    #[default]
    LeastSquares,
    /// Scores are logits; `D = sigmoid(score)` and the terms are log-likelihoods.
    Log,
}

/// Which image each generator sees in the identity-mapping term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdentityMappingInput {
    /// `G_X(x)` against `x` and `G_Y(y)` against `y`.
    #[default]
    SourceDomain,
    /// `G_X(y)` against `y` and `G_Y(x)` against `x`.
    TargetDomain,
}

fn finite(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Loss the discriminator minimizes on real and fake score maps.
pub fn discriminator_adversarial(g: &Graph, real: Var, fake: Var, mode: AdversarialMode) -> Result<Var> {
    finite(g, real, "real scores")?;
    finite(g, fake, "fake scores")?;
    match mode {
        AdversarialMode::Log => {
            let neg = g.scale(real, -1.0);
            let r = g.mean(g.softplus(neg));
            let f = g.mean(g.softplus(fake));
            g.add(r, f)
        }
        AdversarialMode::LeastSquares => {
            let r = g.mean(g.square(g.add_scalar(real, -1.0)));
            let f = g.mean(g.square(fake));
            Ok(g.scale(g.add(r, f)?, 0.5))
        }
    }
}

/// Non-saturating generator term on the scores its fakes receive.
pub fn generator_adversarial(g: &Graph, fake: Var, mode: AdversarialMode) -> Result<Var> {
    finite(g, fake, "fake scores")?;
    Ok(match mode {
        AdversarialMode::Log => {
            let neg = g.scale(fake, -1.0);
            g.mean(g.softplus(neg))
        }
        AdversarialMode::LeastSquares => g.mean(g.square(g.add_scalar(fake, -1.0))),
    })
}

fn mean_l1(g: &Graph, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Shape(format!("L1 operands {sa:?} and {sb:?}")));
    }
    Ok(g.mean(g.abs(g.sub(a, b)?)))
}

/// Mean absolute reconstruction error of both cycles.
pub fn cycle(g: &Graph, x: Var, cyc_x: Var, y: Var, cyc_y: Var) -> Result<Var> {
    let a = mean_l1(g, cyc_x, x)?;
    let b = mean_l1(g, cyc_y, y)?;
    g.add(a, b)
}

/// Mean absolute deviation of both generators from the identity on their
/// identity-mapping inputs.
pub fn identity_mapping(g: &Graph, gx_out: Var, gx_in: Var, gy_out: Var, gy_in: Var) -> Result<Var> {
    let a = mean_l1(g, gx_out, gx_in)?;
    let b = mean_l1(g, gy_out, gy_in)?;
    g.add(a, b)
}

/// Batch mean of squared Euclidean distances between paired embedding rows.
pub fn embedding_distance(g: &Graph, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Shape(format!("embedding dims {sa:?} and {sb:?} differ")));
    }
    let d = g.sub(a, b)?;
    Ok(g.mean(g.sum_rows(g.square(d))))
}

/// Identity perception on precomputed embeddings.
pub fn identity_perception_embeddings(
    g: &Graph,
    fake_photo: Var,
    real_photo: Var,
    fake_sketch: Var,
    real_sketch: Var,
) -> Result<Var> {
    let p = embedding_distance(g, fake_photo, real_photo)?;
    let s = embedding_distance(g, fake_sketch, real_sketch)?;
    g.add(p, s)
}

/// A recognizer together with its (normally frozen) graph binding.
pub struct BoundRecognizer<'a> {
    pub net: &'a Recognizer,
    pub params: &'a Bound,
}

/// Identity perception through the photo and sketch recognizers. Real images
/// are embedded detached; gradients reach only the fakes (and the
/// recognizer weights only if they were bound trainable).
pub fn identity_perception(
    g: &Graph,
    fake_photo: Var,
    real_photo: Var,
    fake_sketch: Var,
    real_sketch: Var,
    phi_p: &BoundRecognizer,
    phi_s: &BoundRecognizer,
) -> Result<Var> {
    let rp = g.detach(real_photo);
    let rs = g.detach(real_sketch);
    let ep_fake = phi_p.net.embed_var(g, phi_p.params, fake_photo)?;
    let ep_real = phi_p.net.embed_var(g, phi_p.params, rp)?;
    let es_fake = phi_s.net.embed_var(g, phi_s.params, fake_sketch)?;
    let es_real = phi_s.net.embed_var(g, phi_s.params, rs)?;
    identity_perception_embeddings(g, ep_fake, ep_real, es_fake, es_real)
}

/// Graph handles of every generator-side term.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub gan_x: Var,
    pub gan_y: Var,
    pub cyc: Var,
    /// Absent when the identity-perception branch is disabled.
    pub ip: Option<Var>,
    pub im: Var,
}

/// `L_GAN_X + L_GAN_Y + λcyc L_cyc + λip L_ip + λim L_im`.
pub fn total_generator(g: &Graph, t: &GeneratorTerms, w: &LossWeights) -> Result<Var> {
    for (name, v) in [("gan_x", Some(t.gan_x)), ("gan_y", Some(t.gan_y)), ("cyc", Some(t.cyc)), ("ip", t.ip), ("im", Some(t.im))] {
        if let Some(v) = v {
            finite(g, v, name)?;
        }
    }
    let mut total = g.add(t.gan_x, t.gan_y)?;
    total = g.add(total, g.scale(t.cyc, w.lambda_cyc))?;
    if let Some(ip) = t.ip {
        total = g.add(total, g.scale(ip, w.lambda_ip))?;
    }
    g.add(total, g.scale(t.im, w.lambda_im))
}

/// Per-negative hinge values `[d(a,p) - d(a,n_j) + alpha]_+` as a graph node
/// over rows of the embedding matrix `emb`.
pub fn triplet_hinges(
    g: &Graph,
    emb: Var,
    anchor: usize,
    positive: usize,
    negatives: &[usize],
    margin: f64,
) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::Invalid("triplet loss needs at least one negative".into()));
    }
    let n = negatives.len();
    let a = g.gather(emb, &vec![anchor; n])?;
    let p = g.gather(emb, &vec![positive; n])?;
    let neg = g.gather(emb, negatives)?;
    let d_ap = g.sum_rows(g.square(g.sub(a, p)?));
    let d_an = g.sum_rows(g.square(g.sub(a, neg)?));
    let diff = g.sub(d_ap, d_an)?;
    Ok(g.relu(g.add_scalar(diff, margin)))
}

/// Indices of the `k` largest values, ties resolved toward the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // + 0.0 folds -0.0 into 0.0 so the two tie
    order.sort_by(|&i, &j| (values[j] + 0.0).total_cmp(&(values[i] + 0.0)).then(i.cmp(&j)));
    order.truncate(k);
    order
}

/// Hard-mined triplet loss of one anchor: the sum of its `hard_k` largest hinges.
pub fn triplet_mined(
    g: &Graph,
    emb: Var,
    anchor: usize,
    positive: usize,
    negatives: &[usize],
    config: &TripletConfig,
) -> Result<Var> {
    let hinges = triplet_hinges(g, emb, anchor, positive, negatives, config.margin_alpha)?;
    let keep = {
        let v = g.value(hinges);
        top_k_indices(v.data(), config.hard_k)
    };
    Ok(g.sum(g.gather(hinges, &keep)?))
}

// ---------------------------------------------------------------------------
// Value forms

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

pub fn adversarial_loss_discriminator(real: &Tensor, fake: &Tensor, mode: AdversarialMode) -> Result<f64> {
    check_finite(real, "real scores")?;
    check_finite(fake, "fake scores")?;
    let g = Graph::new();
    let (r, f) = (g.constant(real.clone()), g.constant(fake.clone()));
    let l = discriminator_adversarial(&g, r, f, mode)?;
    Ok(g.scalar(l))
}

pub fn adversarial_loss_generator(fake: &Tensor, mode: AdversarialMode) -> Result<f64> {
    check_finite(fake, "fake scores")?;
    let g = Graph::new();
    let f = g.constant(fake.clone());
    let l = generator_adversarial(&g, f, mode)?;
    Ok(g.scalar(l))
}

pub fn cycle_loss(x: &Tensor, cyc_x: &Tensor, y: &Tensor, cyc_y: &Tensor) -> Result<f64> {
    let g = Graph::new();
    let v: Vec<Var> = [x, cyc_x, y, cyc_y].iter().map(|t| g.constant((*t).clone())).collect();
    let l = cycle(&g, v[0], v[1], v[2], v[3])?;
    Ok(g.scalar(l))
}

pub fn identity_mapping_loss(gx_out: &Tensor, gx_in: &Tensor, gy_out: &Tensor, gy_in: &Tensor) -> Result<f64> {
    let g = Graph::new();
    let v: Vec<Var> = [gx_out, gx_in, gy_out, gy_in]
        .iter()
        .map(|t| g.constant((*t).clone()))
        .collect();
    let l = identity_mapping(&g, v[0], v[1], v[2], v[3])?;
    Ok(g.scalar(l))
}

/// Identity perception on images, through frozen copies of both recognizers.
pub fn identity_perception_loss(
    fake_photo: &Tensor,
    real_photo: &Tensor,
    fake_sketch: &Tensor,
    real_sketch: &Tensor,
    phi_p: &Recognizer,
    phi_s: &Recognizer,
) -> Result<f64> {
    let g = Graph::new();
    let (bp, bs) = (phi_p.params().bind(&g, false), phi_s.params().bind(&g, false));
    let v: Vec<Var> = [fake_photo, real_photo, fake_sketch, real_sketch]
        .iter()
        .map(|t| g.constant((*t).clone()))
        .collect();
    let l = identity_perception(
        &g,
        v[0],
        v[1],
        v[2],
        v[3],
        &BoundRecognizer { net: phi_p, params: &bp },
        &BoundRecognizer { net: phi_s, params: &bs },
    )?;
    Ok(g.scalar(l))
}

/// Scalar values of every generator-side term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub gan_x: f64,
    pub gan_y: f64,
    pub cyc: f64,
    pub ip: f64,
    pub im: f64,
}

pub fn total_generator_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("gan_x", parts.gan_x),
        ("gan_y", parts.gan_y),
        ("cyc", parts.cyc),
        ("ip", parts.ip),
        ("im", parts.im),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(parts.gan_x + parts.gan_y + w.lambda_cyc * parts.cyc + w.lambda_ip * parts.ip + w.lambda_im * parts.im)
}

/// Hard-mined triplet loss for one anchor on plain vectors.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], config: &TripletConfig) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Invalid("triplet loss needs at least one negative".into()));
    }
    let d = anchor.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(Error::Shape("triplet embeddings differ in dimension".into()));
    }
    let mut rows = Vec::with_capacity((negatives.len() + 2) * d);
    rows.extend_from_slice(anchor);
    rows.extend_from_slice(positive);
    negatives.iter().for_each(|n| rows.extend_from_slice(n));
    let g = Graph::new();
    let emb = g.constant(Tensor::new(vec![negatives.len() + 2, d], rows)?);
    let negs: Vec<usize> = (2..negatives.len() + 2).collect();
    let l = triplet_mined(&g, emb, 0, 1, &negs, config)?;
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: f64) -> Tensor {
        Tensor::full(shape, v)
    }

    #[test]
    fn log_mode_discriminator_values() {
        // logit 0 is D = 0.5
        let l = adversarial_loss_discriminator(&t(&[1, 1, 3, 3], 0.0), &t(&[1, 1, 3, 3], 0.0), AdversarialMode::Log).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let l = adversarial_loss_discriminator(&t(&[1, 1, 2, 2], 40.0), &t(&[1, 1, 2, 2], -40.0), AdversarialMode::Log).unwrap();
        assert!(l < 1e-15);
    }

    #[test]
    fn least_squares_values() {
        let l = adversarial_loss_discriminator(&t(&[2, 1, 2, 2], 1.0), &t(&[2, 1, 2, 2], 0.0), AdversarialMode::LeastSquares).unwrap();
        assert_eq!(l, 0.0);
        let l = adversarial_loss_generator(&t(&[1, 1, 2, 2], 0.5), AdversarialMode::LeastSquares).unwrap();
        assert_eq!(l, 0.25);
        let l = adversarial_loss_generator(&t(&[1, 1, 2, 2], 0.0), AdversarialMode::Log).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let bad = t(&[1, 1, 1, 1], f64::NAN);
        assert!(matches!(
            adversarial_loss_generator(&bad, AdversarialMode::Log),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn cycle_loss_arithmetic() {
        let x = Tensor::from_fn(&[1, 3, 4, 4], |k| k as f64 / 48.0);
        assert_eq!(cycle_loss(&x, &x, &x, &x).unwrap(), 0.0);
        let mut cx = x.clone();
        cx.data_mut()[5] += 0.5;
        let l = cycle_loss(&x, &cx, &x, &x).unwrap();
        assert!((l - 0.5 / 48.0).abs() < 1e-15);
        assert_eq!(l, cycle_loss(&x, &x, &x, &cx).unwrap());
        assert!(cycle_loss(&x, &t(&[1, 3, 2, 2], 0.0), &x, &x).is_err());
    }

    #[test]
    fn identity_mapping_offset() {
        let x = t(&[1, 3, 4, 4], 0.2);
        let shifted = x.map(|v| v + 0.1);
        let l = identity_mapping_loss(&shifted, &x, &x, &x).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
    }

    #[test]
    fn total_with_paper_weights() {
        let parts = LossParts {
            gan_x: 1.0,
            gan_y: 1.0,
            cyc: 1.0,
            ip: 1.0,
            im: 1.0,
        };
        assert_eq!(total_generator_loss(&parts, &LossWeights::default()).unwrap(), 30_000_017.0);
        assert_eq!(total_generator_loss(&LossParts::default(), &LossWeights::default()).unwrap(), 0.0);
        let bad = LossParts { cyc: f64::INFINITY, ..parts };
        match total_generator_loss(&bad, &LossWeights::default()) {
            Err(Error::NonFinite(term)) => assert_eq!(term, "cyc"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn triplet_examples() {
        let cfg = TripletConfig::default();
        // d(a,p) = 0, d(a,n) = 0.2
        let a = vec![0.0, 0.0];
        let n = vec![(0.2f64).sqrt(), 0.0];
        assert_eq!(triplet_loss(&a, &a, &[n], &cfg).unwrap(), 0.0);
        // d(a,p) = 0.25, d(a,n) = 0.04
        let p = vec![0.5, 0.0];
        let n = vec![0.0, 0.2];
        let l = triplet_loss(&a, &p, &[n], &cfg).unwrap();
        assert!((l - 0.31).abs() < 1e-9);
        assert!(triplet_loss(&a, &p, &[], &cfg).is_err());
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 0.5, 3.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[1.0], 4), vec![0]);
        assert_eq!(top_k_indices(&[-0.0, 0.0, -1.0], 3), vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn adding_a_negative_never_decreases_the_loss(
            a in prop::collection::vec(-1.0f64..1.0, 3),
            p in prop::collection::vec(-1.0f64..1.0, 3),
            negs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..8),
            extra in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            let cfg = TripletConfig::default();
            let base = triplet_loss(&a, &p, &negs, &cfg).unwrap();
            let mut more = negs.clone();
            more.push(extra);
            let grown = triplet_loss(&a, &p, &more, &cfg).unwrap();
            prop_assert!(grown >= base);
            prop_assert!(base >= 0.0);
        }

        #[test]
        fn l1_terms_are_nonnegative(vals in prop::collection::vec(-1.0f64..1.0, 48)) {
            let x = Tensor::new(vec![1, 3, 4, 4], vals.clone()).unwrap();
            let y = x.map(|v| v * 0.3 - 0.1);
            prop_assert!(cycle_loss(&x, &y, &y, &x).unwrap() >= 0.0);
            prop_assert!(identity_mapping_loss(&x, &y, &x, &x).unwrap() >= 0.0);
        }
    }
}
