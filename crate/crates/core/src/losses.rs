//! Training objectives.
//!
//! All L1 terms are means over every element of the batch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::networks::discriminator::{DiscDomain, DiscOutput, Discriminator, Signal};
use crate::networks::{EpsilonPredictor, Vocoder};
use crate::tensor::Tensor;

pub fn l1_mean(a: &Tensor, b: &Tensor) -> Tensor {
    a.sub(b).abs().mean_all()
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Mean L1 between the injected noise and the denoiser's prediction of it.
pub fn ddpm_loss(
    denoiser: &dyn EpsilonPredictor,
    sched: &NoiseSchedule,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    s: &Tensor,
    p: &Tensor,
) -> Result<Tensor> {
    let x_t = sched.diffuse(x0, t, eps)?;
    let pred = denoiser.predict_eps(&x_t, t, s, p)?;
    ensure_finite(&pred, "denoiser output")?;
    Ok(l1_mean(eps, &pred))
}

/// Presents a mel batch to a discriminator of the given domain, vocoding
/// first for waveform discriminators.
pub fn to_signal(mel: &Tensor, domain: DiscDomain, vocoder: Option<&dyn Vocoder>) -> Result<Signal> {
    match domain {
        DiscDomain::Mel => Ok(Signal::Mel(mel.clone())),
        DiscDomain::Waveform => {
            let v = vocoder.ok_or_else(|| {
                Error::Config("waveform discriminator requires a vocoder".into())
            })?;
            Ok(Signal::Waveform(v.vocode(mel)?))
        }
    }
}

fn mean_over(terms: Vec<Tensor>) -> Tensor {
    let n = terms.len() as f64;
    let mut it = terms.into_iter();
    let first = it.next().expect("at least one sub-discriminator");
    it.fold(first, |acc, t| acc.add(&t)).mul_scalar(1.0 / n)
}

/// `E[(D(real) - 1)^2] + E[D(gen)^2]` from precomputed scores.
pub fn lsgan_discriminator(real: &DiscOutput, gen: &DiscOutput) -> Tensor {
    let terms = real
        .scores
        .iter()
        .zip(&gen.scores)
        .map(|(r, g)| r.add_scalar(-1.0).sqr().mean_all().add(&g.sqr().mean_all()))
        .collect();
    mean_over(terms)
}

/// `E[(D(gen) - 1)^2]` from precomputed scores.
pub fn lsgan_generator(gen: &DiscOutput) -> Tensor {
    mean_over(
        gen.scores
            .iter()
            .map(|g| g.add_scalar(-1.0).sqr().mean_all())
            .collect(),
    )
}

/// Least-squares discriminator loss; the generated input is detached.
pub fn adv_loss_discriminator(disc: &dyn Discriminator, real: &Signal, gen: &Signal) -> Result<Tensor> {
    let r = disc.discriminate(real)?;
    let g = disc.discriminate(&gen.detach())?;
    Ok(lsgan_discriminator(&r, &g))
}

/// Least-squares generator loss. Only generator parameters should be
/// updated from its gradients.
pub fn adv_loss_generator(disc: &dyn Discriminator, gen: &Signal) -> Result<Tensor> {
    Ok(lsgan_generator(&disc.discriminate(gen)?))
}

/// Mean over taps of the mean L1 between features; reference features are
/// detached.
pub fn feature_matching(gen: &DiscOutput, reference: &DiscOutput) -> Result<Tensor> {
    if gen.features.len() != reference.features.len() || gen.features.is_empty() {
        return Err(Error::Config(format!(
            "feature tap mismatch: {} vs {}",
            gen.features.len(),
            reference.features.len()
        )));
    }
    Ok(mean_over(
        gen.features
            .iter()
            .zip(&reference.features)
            .map(|(g, r)| l1_mean(g, &r.detach()))
            .collect(),
    ))
}

pub fn feature_matching_loss(disc: &dyn Discriminator, gen: &Signal, reference: &Signal) -> Result<Tensor> {
    let g = disc.discriminate(gen)?;
    let r = disc.discriminate(reference)?;
    feature_matching(&g, &r)
}

/// The teacher's one-step denoised version of the re-diffused (and
/// stop-gradient) student sample, itself detached.
pub fn teacher_target(
    x_student: &Tensor,
    s_cond: &Tensor,
    p_cond: &Tensor,
    teacher: &dyn EpsilonPredictor,
    sched: &NoiseSchedule,
    t: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    let x_t = sched.diffuse(&x_student.detach(), t, eps)?;
    let eps_hat = teacher.predict_eps(&x_t, t, s_cond, &p_cond.detach())?;
    ensure_finite(&eps_hat, "teacher output")?;
    Ok(sched.denoise_step(&x_t, t, &eps_hat)?.detach())
}

/// `sqrt(alpha_bar_t) * |x_student - x_teacher|`, averaged.
pub fn weighted_distance(
    x_student: &Tensor,
    x_teacher: &Tensor,
    sched: &NoiseSchedule,
    t: &[usize],
) -> Result<Tensor> {
    let w = sched.sqrt_alpha_bar_weights(t, x_student.ndim())?;
    Ok(x_student.sub(x_teacher).abs().mul(&w).mean_all())
}

#[allow(clippy::too_many_arguments)]
pub fn score_distillation_loss(
    x_student: &Tensor,
    s_cond: &Tensor,
    p_cond: &Tensor,
    teacher: &dyn EpsilonPredictor,
    sched: &NoiseSchedule,
    t: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    let target = teacher_target(x_student, s_cond, p_cond, teacher, sched, t, eps)?;
    weighted_distance(x_student, &target, sched, t)
}

/// Rows of `a` and `b` that are bit-identical.
fn colliding_rows(a: &Tensor, b: &Tensor) -> Vec<usize> {
    let d = a.shape()[1];
    let (av, bv) = (a.to_vec(), b.to_vec());
    (0..a.shape()[0])
        .filter(|&i| av[i * d..(i + 1) * d] == bv[i * d..(i + 1) * d])
        .collect()
}

/// Negated score distillation toward a non-target speaker `s_inv`.
#[allow(clippy::too_many_arguments)]
pub fn inverse_score_distillation_loss(
    x_student: &Tensor,
    s_inv: &Tensor,
    s_tgt: &Tensor,
    p_cond: &Tensor,
    teacher: &dyn EpsilonPredictor,
    sched: &NoiseSchedule,
    t: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    if s_inv.shape() != s_tgt.shape() {
        return Err(Error::Shape {
            expected: s_tgt.shape().to_vec(),
            actual: s_inv.shape().to_vec(),
        });
    }
    let hits = colliding_rows(s_inv, s_tgt);
    if !hits.is_empty() {
        return Err(Error::Conditioning(format!(
            "inverse speaker equals target speaker at rows {hits:?}"
        )));
    }
    Ok(score_distillation_loss(x_student, s_inv, p_cond, teacher, sched, t, eps)?.neg())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_fm: f64,
    pub lambda_dist: f64,
    pub lambda_inv: f64,
    /// Content alignment weight of direct distillation.
    pub lambda_align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_fm: 2.0,
            lambda_dist: 45.0,
            lambda_inv: 22.5,
            lambda_align: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_fm, self.lambda_dist, self.lambda_inv, self.lambda_align];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    FastVoiceGrad,
    Adcd,
}

/// Generator loss components of one step. In fastvoicegrad mode `dist`
/// is the reconstruction form; in adcd mode it is the conversion form.
#[derive(Clone, Debug, Default)]
pub struct GeneratorTerms {
    pub adv: Option<Tensor>,
    pub fm: Option<Tensor>,
    pub dist: Option<Tensor>,
    pub dist_cv2: Option<Tensor>,
    pub inv: Option<Tensor>,
    pub inv_cv2: Option<Tensor>,
    pub align: Option<Tensor>,
}

/// Named scalar terms plus the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
    /// Discriminator loss of the same step, when one was taken.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disc: Option<f64>,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }

    pub fn all_finite(&self) -> bool {
        self.total.is_finite() && self.terms.values().all(|v| v.is_finite())
    }
}

/// Weighted generator objective and its report.
pub fn total_generator_loss(
    terms: &GeneratorTerms,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<(Tensor, LossReport)> {
    weights.validate()?;
    if mode == LossMode::FastVoiceGrad
        && (terms.dist_cv2.is_some() || terms.inv.is_some() || terms.inv_cv2.is_some())
    {
        return Err(Error::Config(
            "reconstruction objective has no reconversion or inverse terms".into(),
        ));
    }
    let parts: [(&str, &Option<Tensor>, f64); 7] = [
        ("adv", &terms.adv, 1.0),
        ("fm", &terms.fm, weights.lambda_fm),
        ("dist", &terms.dist, weights.lambda_dist),
        ("dist_cv2", &terms.dist_cv2, weights.lambda_dist),
        ("inv", &terms.inv, weights.lambda_inv),
        ("inv_cv2", &terms.inv_cv2, weights.lambda_inv),
        ("align", &terms.align, weights.lambda_align),
    ];
    let mut report = LossReport::default();
    let mut total: Option<Tensor> = None;
    let mut scalar_total = 0.0;
    for (name, term, w) in parts {
        let Some(term) = term else { continue };
        let v = term.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
        report.terms.insert(name.to_string(), v);
        scalar_total += w * v;
        let weighted = term.mul_scalar(w);
        total = Some(match total {
            None => weighted,
            Some(acc) => acc.add(&weighted),
        });
    }
    let total = total.unwrap_or_else(|| Tensor::scalar(0.0));
    report.total = scalar_total;
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};

    fn unit() -> Tensor {
        Tensor::scalar(1.0)
    }

    #[test]
    fn unit_components_with_default_weights_total_138() {
        let terms = GeneratorTerms {
            adv: Some(unit()),
            fm: Some(unit()),
            dist: Some(unit()),
            dist_cv2: Some(unit()),
            inv: Some(unit()),
            inv_cv2: Some(unit()),
            align: None,
        };
        let (t, r) = total_generator_loss(&terms, &LossWeights::default(), LossMode::Adcd).unwrap();
        assert_eq!(t.item(), 138.0);
        assert_eq!(r.total, 138.0);
    }

    #[test]
    fn zero_weights_leave_adversarial_only() {
        let terms = GeneratorTerms {
            adv: Some(Tensor::scalar(0.3)),
            fm: Some(unit()),
            dist: Some(unit()),
            ..Default::default()
        };
        let w = LossWeights {
            lambda_fm: 0.0,
            lambda_dist: 0.0,
            lambda_inv: 0.0,
            lambda_align: 0.0,
        };
        let (t, _) = total_generator_loss(&terms, &w, LossMode::FastVoiceGrad).unwrap();
        assert_eq!(t.item(), 0.3);
    }

    #[test]
    fn reconstruction_mode_rejects_conversion_terms() {
        let terms = GeneratorTerms {
            inv: Some(unit()),
            ..Default::default()
        };
        assert!(total_generator_loss(&terms, &LossWeights::default(), LossMode::FastVoiceGrad).is_err());
    }

    #[test]
    fn weighted_distance_uses_sqrt_alpha_bar() {
        let sched = make_schedule(2, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        let x = Tensor::ones(&[1, 2, 3]);
        let y = Tensor::zeros(&[1, 2, 3]);
        assert!((weighted_distance(&x, &y, &sched, &[2]).unwrap().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights {
            lambda_fm: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
