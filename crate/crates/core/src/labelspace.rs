//! The four-token tooth label vocabulary and the conditional label-flip
//! machinery used to build contrastive denoising queries.
//!
//! Labels factor into a position attribute (anterior vs posterior) and an
//! optional diagnosis attribute (FD vs no FD); posterior teeth and
//! undiagnosed anterior teeth carry no diagnosis. Denoising negatives are
//! drawn from a conditional transition distribution that only produces
//! label corruptions a reader could plausibly confuse: a position flip, or
//! a diagnosis flip between the two diagnosed anterior labels. In
//! particular it never invents a diagnosis for an undiagnosed tooth, which
//! is what keeps diagnosed negatives off undiagnosed ground truth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{jitter_box, BoxCXCYWH, BoxXYXY};
use crate::{real, Real};

/// Number of labels in the vocabulary.
pub const VOCAB_SIZE: usize = 4;

/// Tolerance to which a transition distribution must sum to one.
pub const TRANSITION_SUM_TOL: f64 = 1e-12;

/// The detection vocabulary. Serialized with the exact prompt strings used
/// in annotation files ("Posterior Teeth", "Anterior Teeth", "Anterior
/// Teeth No FD", "Anterior Teeth FD").
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ToothLabel {
    #[serde(rename = "Posterior Teeth")]
    PosteriorTeeth,
    #[serde(rename = "Anterior Teeth")]
    AnteriorTeeth,
    #[serde(rename = "Anterior Teeth No FD")]
    AnteriorNoFd,
    #[serde(rename = "Anterior Teeth FD")]
    AnteriorFd,
}

/// Position attribute of a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Posterior,
    Anterior,
}

/// Diagnosis attribute of a label; absent for undiagnosed labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Diagnosis {
    NoFd,
    Fd,
}

impl ToothLabel {
    /// All labels in token order. The index of a label in this array is its
    /// classification token index everywhere in the crate.
    pub const ALL: [ToothLabel; VOCAB_SIZE] = [
        ToothLabel::PosteriorTeeth,
        ToothLabel::AnteriorTeeth,
        ToothLabel::AnteriorNoFd,
        ToothLabel::AnteriorFd,
    ];

    /// Token index in [`ToothLabel::ALL`].
    pub fn token_index(self) -> usize {
        match self {
            ToothLabel::PosteriorTeeth => 0,
            ToothLabel::AnteriorTeeth => 1,
            ToothLabel::AnteriorNoFd => 2,
            ToothLabel::AnteriorFd => 3,
        }
    }

    pub fn from_token_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// The annotation prompt string for this label.
    pub fn prompt(self) -> &'static str {
        match self {
            ToothLabel::PosteriorTeeth => "Posterior Teeth",
            ToothLabel::AnteriorTeeth => "Anterior Teeth",
            ToothLabel::AnteriorNoFd => "Anterior Teeth No FD",
            ToothLabel::AnteriorFd => "Anterior Teeth FD",
        }
    }

    /// Parses an annotation prompt string. Exact match only.
    pub fn from_prompt(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.prompt() == s)
    }

    pub fn position(self) -> Position {
        match self {
            ToothLabel::PosteriorTeeth => Position::Posterior,
            _ => Position::Anterior,
        }
    }

    /// `None` for posterior and undiagnosed anterior labels. Note that an
    /// unknown diagnosis never compares equal to a known one.
    pub fn diagnosis(self) -> Option<Diagnosis> {
        match self {
            ToothLabel::AnteriorNoFd => Some(Diagnosis::NoFd),
            ToothLabel::AnteriorFd => Some(Diagnosis::Fd),
            _ => None,
        }
    }

    pub fn is_anterior(self) -> bool {
        self.position() == Position::Anterior
    }

    pub fn is_diagnosed(self) -> bool {
        self.diagnosis().is_some()
    }

    /// The diagnosed anterior label with the opposite diagnosis, if any.
    fn diagnosis_flip(self) -> Option<Self> {
        match self {
            ToothLabel::AnteriorNoFd => Some(ToothLabel::AnteriorFd),
            ToothLabel::AnteriorFd => Some(ToothLabel::AnteriorNoFd),
            _ => None,
        }
    }
}

impl std::fmt::Display for ToothLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.prompt())
    }
}

/// Transition probabilities over the vocabulary for one source label and
/// flip probability.
///
/// Invariants: every probability is in [0, 1] and they sum to 1 within
/// [`TRANSITION_SUM_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDistribution<F: Real> {
    source: ToothLabel,
    flip_p: F,
    probs: [F; VOCAB_SIZE],
}

impl<F: Real> TransitionDistribution<F> {
    fn build(source: ToothLabel, flip_p: F, probs: [F; VOCAB_SIZE]) -> Result<Self> {
        let sum: F = probs.iter().copied().sum();
        let tol = real::<F>(TRANSITION_SUM_TOL);
        if (sum - F::one()).abs() > tol || probs.iter().any(|p| *p < F::zero()) {
            return Err(Error::InvalidArgument(format!(
                "transition distribution does not normalize: {probs:?}"
            )));
        }
        Ok(Self { source, flip_p, probs })
    }

    pub fn source(&self) -> ToothLabel {
        self.source
    }

    pub fn flip_p(&self) -> F {
        self.flip_p
    }

    /// Probability of transitioning to `label`.
    pub fn prob(&self, label: ToothLabel) -> F {
        self.probs[label.token_index()]
    }

    /// Probabilities in token order.
    pub fn probs(&self) -> &[F; VOCAB_SIZE] {
        &self.probs
    }

    /// Draws one label by inverse-CDF over token order. Consumes exactly
    /// one RNG draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ToothLabel {
        let u = real::<F>(rng.gen::<f64>());
        let mut cum = F::zero();
        for (i, p) in self.probs.iter().enumerate() {
            cum += *p;
            if u < cum {
                return ToothLabel::ALL[i];
            }
        }
        // Rounding can leave cum a hair below 1; attribute the sliver to the
        // last label with nonzero mass.
        *self
            .probs
            .iter()
            .zip(ToothLabel::ALL.iter())
            .filter(|(p, _)| **p > F::zero())
            .map(|(_, l)| l)
            .last()
            .expect("distribution has nonzero mass")
    }
}

fn check_flip_p<F: Real>(p: F) -> Result<()> {
    if !p.is_finite() || p < F::zero() || p > F::one() {
        return Err(Error::InvalidArgument(format!(
            "flip probability must lie in [0, 1], got {p}"
        )));
    }
    Ok(())
}

/// Conditional transition distribution for denoising-label corruption.
///
/// With flip probability `p`, the source label keeps mass `1 - p` and the
/// flip mass `p` goes only to plausible confusions:
///
/// * diagnosed anterior labels split it evenly between the opposite
///   diagnosis and the (undiagnosed) posterior label;
/// * the undiagnosed anterior label sends all of it to posterior;
/// * the posterior label sends all of it to undiagnosed anterior.
///
/// Transitions that would add a diagnosis to an undiagnosed source, or drop
/// a diagnosis onto the undiagnosed anterior label, get probability zero.
pub fn transition_distribution<F: Real>(
    y: ToothLabel,
    p: F,
) -> Result<TransitionDistribution<F>> {
    check_flip_p(p)?;
    let half = real::<F>(0.5);
    let mut probs = [F::zero(); VOCAB_SIZE];
    probs[y.token_index()] = F::one() - p;
    match y {
        ToothLabel::AnteriorFd | ToothLabel::AnteriorNoFd => {
            let flip = y.diagnosis_flip().expect("diagnosed label has a flip");
            probs[flip.token_index()] = p * half;
            probs[ToothLabel::PosteriorTeeth.token_index()] = p * half;
        }
        ToothLabel::AnteriorTeeth => {
            probs[ToothLabel::PosteriorTeeth.token_index()] = p;
        }
        ToothLabel::PosteriorTeeth => {
            probs[ToothLabel::AnteriorTeeth.token_index()] = p;
        }
    }
    TransitionDistribution::build(y, p, probs)
}

/// Indiscriminate ablation baseline: with probability `p` the label flips
/// uniformly over the other three labels, ignoring the attribute structure.
/// Unlike [`transition_distribution`], this can and does put diagnosed
/// labels on undiagnosed sources.
pub fn uniform_flip_distribution<F: Real>(
    y: ToothLabel,
    p: F,
) -> Result<TransitionDistribution<F>> {
    check_flip_p(p)?;
    let third = p / real::<F>(3.0);
    let mut probs = [third; VOCAB_SIZE];
    probs[y.token_index()] = F::one() - p;
    TransitionDistribution::build(y, p, probs)
}

/// Whether a denoising query reconstructs its ground-truth object or is
/// trained as background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryRole {
    /// Label survived the flip: the query targets the GT label and box.
    Positive,
    /// Label was corrupted: the query targets background.
    Negative,
}

/// One noised query derived from a ground-truth object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoisingQuery<F: Real> {
    /// Possibly corrupted label presented to the model.
    pub label: ToothLabel,
    /// Jittered copy of the ground-truth box.
    pub bbox: BoxCXCYWH<F>,
    pub role: QueryRole,
    /// Which denoising group this query belongs to.
    pub group_index: usize,
    /// Index into the ground-truth list this query was derived from.
    pub source_gt_index: usize,
}

/// How denoising labels are corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipRule {
    /// Attribute-aware conditional transitions ([`transition_distribution`]).
    Conditional,
    /// Uniform flips over the other three labels
    /// ([`uniform_flip_distribution`]); ablation baseline only.
    Uniform,
}

/// Samples `num_groups` independent denoising groups from a ground-truth
/// list.
///
/// Each group contains one query per GT object, in GT order; groups are
/// emitted consecutively, so the output has exactly `num_groups * gt.len()`
/// queries in a deterministic order. Per query, one RNG draw picks the
/// label and four more jitter the box (see
/// [`jitter_box`](crate::geometry::jitter_box)); a jitter that collapses
/// under clamping falls back to the unjittered GT box so the draw count
/// stays fixed.
///
/// Requires `num_groups >= 1`, nonempty `gt`, and `p` in [0, 1].
pub fn sample_denoising_queries<F: Real, R: Rng + ?Sized>(
    gt: &[(ToothLabel, BoxXYXY<F>)],
    p: F,
    num_groups: usize,
    lambda1: F,
    lambda2: F,
    rule: FlipRule,
    rng: &mut R,
) -> Result<Vec<DenoisingQuery<F>>> {
    check_flip_p(p)?;
    if num_groups == 0 {
        return Err(Error::InvalidArgument(
            "num_groups must be at least 1".into(),
        ));
    }
    if gt.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot sample denoising queries from empty ground truth".into(),
        ));
    }
    let mut out = Vec::with_capacity(num_groups * gt.len());
    for group_index in 0..num_groups {
        for (source_gt_index, (y, gt_box)) in gt.iter().enumerate() {
            let dist = match rule {
                FlipRule::Conditional => transition_distribution(*y, p)?,
                FlipRule::Uniform => uniform_flip_distribution(*y, p)?,
            };
            let label = dist.sample(rng);
            let center = gt_box.to_cxcywh();
            let bbox = match jitter_box(&center, lambda1, lambda2, rng) {
                Ok(b) => b,
                Err(Error::DegenerateBox(_)) => center,
                Err(e) => return Err(e),
            };
            let role = if label == *y {
                QueryRole::Positive
            } else {
                QueryRole::Negative
            };
            out.push(DenoisingQuery { label, bbox, role, group_index, source_gt_index });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prompt_strings_are_exact() {
        assert_eq!(ToothLabel::PosteriorTeeth.prompt(), "Posterior Teeth");
        assert_eq!(ToothLabel::AnteriorTeeth.prompt(), "Anterior Teeth");
        assert_eq!(ToothLabel::AnteriorNoFd.prompt(), "Anterior Teeth No FD");
        assert_eq!(ToothLabel::AnteriorFd.prompt(), "Anterior Teeth FD");
        for l in ToothLabel::ALL {
            assert_eq!(ToothLabel::from_prompt(l.prompt()), Some(l));
            let json = serde_json::to_string(&l).unwrap();
            assert_eq!(json, format!("\"{}\"", l.prompt()));
            assert_eq!(serde_json::from_str::<ToothLabel>(&json).unwrap(), l);
        }
        assert_eq!(ToothLabel::from_prompt("anterior teeth"), None);
    }

    #[test]
    fn attributes_factor_as_position_and_diagnosis() {
        use Diagnosis::*;
        use Position::*;
        assert_eq!(ToothLabel::PosteriorTeeth.position(), Posterior);
        assert_eq!(ToothLabel::PosteriorTeeth.diagnosis(), None);
        assert_eq!(ToothLabel::AnteriorTeeth.position(), Anterior);
        assert_eq!(ToothLabel::AnteriorTeeth.diagnosis(), None);
        assert_eq!(ToothLabel::AnteriorNoFd.diagnosis(), Some(NoFd));
        assert_eq!(ToothLabel::AnteriorFd.diagnosis(), Some(Fd));
    }

    #[test]
    fn diagnosed_source_splits_flip_mass_between_diagnosis_and_position() {
        let d = transition_distribution::<f64>(ToothLabel::AnteriorFd, 0.4).unwrap();
        assert!((d.prob(ToothLabel::AnteriorFd) - 0.6).abs() < 1e-15);
        assert!((d.prob(ToothLabel::AnteriorNoFd) - 0.2).abs() < 1e-15);
        assert!((d.prob(ToothLabel::PosteriorTeeth) - 0.2).abs() < 1e-15);
        assert_eq!(d.prob(ToothLabel::AnteriorTeeth), 0.0);
    }

    #[test]
    fn undiagnosed_anterior_source_never_gains_a_diagnosis() {
        let d = transition_distribution::<f64>(ToothLabel::AnteriorTeeth, 0.4).unwrap();
        assert!((d.prob(ToothLabel::AnteriorTeeth) - 0.6).abs() < 1e-15);
        assert!((d.prob(ToothLabel::PosteriorTeeth) - 0.4).abs() < 1e-15);
        assert_eq!(d.prob(ToothLabel::AnteriorNoFd), 0.0);
        assert_eq!(d.prob(ToothLabel::AnteriorFd), 0.0);
    }

    #[test]
    fn posterior_source_flips_only_to_undiagnosed_anterior() {
        let d = transition_distribution::<f64>(ToothLabel::PosteriorTeeth, 0.25).unwrap();
        assert!((d.prob(ToothLabel::PosteriorTeeth) - 0.75).abs() < 1e-15);
        assert!((d.prob(ToothLabel::AnteriorTeeth) - 0.25).abs() < 1e-15);
        assert_eq!(d.prob(ToothLabel::AnteriorNoFd), 0.0);
        assert_eq!(d.prob(ToothLabel::AnteriorFd), 0.0);
    }

    #[test]
    fn zero_flip_probability_is_the_identity() {
        for l in ToothLabel::ALL {
            let d = transition_distribution::<f64>(l, 0.0).unwrap();
            assert_eq!(d.prob(l), 1.0);
        }
    }

    #[test]
    fn transition_masses_sum_to_one_on_a_probability_grid() {
        for l in ToothLabel::ALL {
            for i in 0..=10 {
                let p = i as f64 / 10.0;
                let d = transition_distribution::<f64>(l, p).unwrap();
                let sum: f64 = d.probs().iter().sum();
                assert!((sum - 1.0).abs() <= TRANSITION_SUM_TOL);
                let u = uniform_flip_distribution::<f64>(l, p).unwrap();
                let usum: f64 = u.probs().iter().sum();
                assert!((usum - 1.0).abs() <= TRANSITION_SUM_TOL);
            }
        }
    }

    #[test]
    fn flip_probability_outside_unit_interval_is_rejected() {
        assert!(transition_distribution::<f64>(ToothLabel::AnteriorFd, -0.1).is_err());
        assert!(transition_distribution::<f64>(ToothLabel::AnteriorFd, 1.1).is_err());
        assert!(transition_distribution::<f64>(ToothLabel::AnteriorFd, f64::NAN).is_err());
    }

    #[test]
    fn sample_frequencies_match_probabilities() {
        let d = transition_distribution::<f64>(ToothLabel::AnteriorFd, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut counts = [0usize; VOCAB_SIZE];
        let n = 20_000;
        for _ in 0..n {
            counts[d.sample(&mut rng).token_index()] += 1;
        }
        for (i, l) in ToothLabel::ALL.into_iter().enumerate() {
            let freq = counts[i] as f64 / n as f64;
            assert!(
                (freq - d.prob(l)).abs() < 0.02,
                "label {l}: freq {freq} vs prob {}",
                d.prob(l)
            );
        }
    }

    fn toy_gt() -> Vec<(ToothLabel, BoxXYXY<f64>)> {
        vec![
            (
                ToothLabel::AnteriorTeeth,
                BoxXYXY::new(0.3, 0.4, 0.4, 0.6).unwrap(),
            ),
            (
                ToothLabel::PosteriorTeeth,
                BoxXYXY::new(0.1, 0.45, 0.2, 0.55).unwrap(),
            ),
        ]
    }

    #[test]
    fn sampler_emits_groups_in_deterministic_order() {
        let gt = toy_gt();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let qs =
            sample_denoising_queries(&gt, 0.5, 3, 1.0, 0.4, FlipRule::Conditional, &mut rng)
                .unwrap();
        assert_eq!(qs.len(), 6);
        for (k, q) in qs.iter().enumerate() {
            assert_eq!(q.group_index, k / 2);
            assert_eq!(q.source_gt_index, k % 2);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let qs2 =
            sample_denoising_queries(&gt, 0.5, 3, 1.0, 0.4, FlipRule::Conditional, &mut rng2)
                .unwrap();
        assert_eq!(qs, qs2);
    }

    #[test]
    fn conditional_sampler_never_diagnoses_undiagnosed_sources() {
        let gt = toy_gt();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let qs =
            sample_denoising_queries(&gt, 0.9, 500, 1.0, 0.4, FlipRule::Conditional, &mut rng)
                .unwrap();
        assert!(qs.iter().all(|q| !q.label.is_diagnosed()));
        assert!(qs.iter().any(|q| q.role == QueryRole::Negative));
    }

    #[test]
    fn uniform_baseline_does_diagnose_undiagnosed_sources() {
        let gt = toy_gt();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qs = sample_denoising_queries(&gt, 0.9, 200, 1.0, 0.4, FlipRule::Uniform, &mut rng)
            .unwrap();
        assert!(qs.iter().any(|q| q.label.is_diagnosed()));
    }

    #[test]
    fn sampler_roles_track_label_survival() {
        let gt = toy_gt();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let qs =
            sample_denoising_queries(&gt, 0.5, 100, 1.0, 0.4, FlipRule::Conditional, &mut rng)
                .unwrap();
        for q in &qs {
            let source = gt[q.source_gt_index].0;
            match q.role {
                QueryRole::Positive => assert_eq!(q.label, source),
                QueryRole::Negative => assert_ne!(q.label, source),
            }
        }
    }

    #[test]
    fn sampler_validates_arguments() {
        let gt = toy_gt();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(
            sample_denoising_queries(&gt, 1.5, 1, 1.0, 0.4, FlipRule::Conditional, &mut rng)
                .is_err()
        );
        assert!(
            sample_denoising_queries(&gt, 0.5, 0, 1.0, 0.4, FlipRule::Conditional, &mut rng)
                .is_err()
        );
        let empty: Vec<(ToothLabel, BoxXYXY<f64>)> = vec![];
        assert!(
            sample_denoising_queries(&empty, 0.5, 1, 1.0, 0.4, FlipRule::Conditional, &mut rng)
                .is_err()
        );
    }
}
