//! Toy open-set detection pipeline: a small perceptron detector over the
//! synthetic feature vectors, a deterministic gradient-descent trainer that
//! composes matching, denoising, and the losses, and dataset evaluation.
//!
//! The detector maps a scene feature vector through one tanh hidden layer
//! to Q query embeddings plus Q box parameter vectors. Class logits are dot
//! products of query embeddings with a fixed table of unit-norm text
//! embeddings (one row per vocabulary prompt), so classification is
//! open-set in the same sense as the full-scale architecture this stands in
//! for: adding a prompt row adds a class without touching the perceptron.
//!
//! Box parameters are squashed so any real-valued logits yield a valid box:
//! `w = sigmoid(tw)`, `cx = sigmoid(tcx) * (1 - w) + w / 2` (same for y/h),
//! which keeps every corner strictly inside the unit square and maps
//! all-zero logits to the centered box (0.5, 0.5, 0.5, 0.5).
//!
//! Denoising queries are fed through the same perceptron with the query's
//! label and noised box added to the input features through a fixed random
//! projection; query slot `i % Q` provides the output read for denoising
//! query `i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{classes_present, coco_ap, exclude_posterior, DetectionRecord, EvalReport, GroundTruth};
use crate::geometry::{BoxCXCYWH, BoxXYXY};
use crate::labelspace::{
    sample_denoising_queries, DenoisingQuery, FlipRule, ToothLabel, VOCAB_SIZE,
};
use crate::losses::{total_loss, LogitMatrix, LossConfig, TotalLoss};
use crate::matching::{
    anterior_extremities, match_predictions, posterior_mask, CostWeights, Prediction,
};
use crate::num::{logit, sigmoid};
use crate::synthdata::Scene;
use crate::{real, Real};

/// Width of the denoising conditioning vector: a label one-hot plus the
/// noised box parameters.
const DN_INPUT: usize = VOCAB_SIZE + 4;

/// The detection head: feature vector in, Q scored boxes out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDetector<F: Real> {
    /// Number of query slots.
    pub q: usize,
    /// Query/text embedding width.
    pub d: usize,
    pub feature_dim: usize,
    /// Hidden layer width.
    pub hidden: usize,
    /// Vocabulary embedding table, VOCAB_SIZE x d, orthonormal rows. Fixed
    /// after initialization; it receives no gradient.
    pub text: Vec<Vec<F>>,
    /// Denoising conditioning projection, feature_dim x DN_INPUT. Fixed.
    pub dn_embed: Vec<Vec<F>>,
    /// Hidden layer weights, hidden x feature_dim.
    pub w1: Vec<Vec<F>>,
    pub b1: Vec<F>,
    /// Output layer weights, (q * d + q * 4) x hidden.
    pub w2: Vec<Vec<F>>,
    pub b2: Vec<F>,
}

/// Gradients with respect to the trainable weights of a [`ToyDetector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<F: Real> {
    pub w1: Vec<Vec<F>>,
    pub b1: Vec<F>,
    pub w2: Vec<Vec<F>>,
    pub b2: Vec<F>,
}

impl<F: Real> Grads<F> {
    fn zeros(model: &ToyDetector<F>) -> Self {
        Self {
            w1: vec![vec![F::zero(); model.feature_dim]; model.hidden],
            b1: vec![F::zero(); model.hidden],
            w2: vec![vec![F::zero(); model.hidden]; model.out_dim()],
            b2: vec![F::zero(); model.out_dim()],
        }
    }

    fn add(&mut self, other: &Grads<F>) {
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        for (x, y) in self.b1.iter_mut().zip(&other.b1) {
            *x += *y;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        for (x, y) in self.b2.iter_mut().zip(&other.b2) {
            *x += *y;
        }
    }

    fn scale(&mut self, s: F) {
        for row in self.w1.iter_mut() {
            for x in row.iter_mut() {
                *x *= s;
            }
        }
        for x in self.b1.iter_mut() {
            *x *= s;
        }
        for row in self.w2.iter_mut() {
            for x in row.iter_mut() {
                *x *= s;
            }
        }
        for x in self.b2.iter_mut() {
            *x *= s;
        }
    }
}

/// Activations one forward pass caches for backpropagation.
struct ForwardCache<F: Real> {
    /// The input the pass actually consumed (scene features, possibly with
    /// the denoising conditioning added).
    x: Vec<F>,
    /// Hidden tanh activations.
    h: Vec<F>,
    /// Per touched query: raw sigmoids (scx, scy, sw, sh) of the box head.
    squash: Vec<[F; 4]>,
}

/// Per-query upstream gradients fed back through one cached pass.
struct QueryGrad<'a, F: Real> {
    qi: usize,
    squash: [F; 4],
    dlogits: &'a [F],
    dbox: [F; 4],
}

impl<F: Real> ToyDetector<F> {
    /// Output width: q embeddings of size d, then 4 box logits per query.
    pub fn out_dim(&self) -> usize {
        self.q * self.d + self.q * 4
    }

    /// Fresh random detector. Draw order from the seed, for
    /// reproducibility: text table, denoising projection, hidden layer,
    /// output layer, box anchor logits. Text rows are Gram-Schmidt
    /// orthonormalized; box biases are initialized so the Q boxes start
    /// scattered over the canvas (centers in (0.1, 0.9), sizes in
    /// (0.1, 0.3)) instead of stacked at the center.
    pub fn new(q: usize, d: usize, feature_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if q == 0 || hidden == 0 || feature_dim == 0 {
            return Err(Error::InvalidArgument(
                "q, hidden, and feature_dim must be >= 1".into(),
            ));
        }
        if d < VOCAB_SIZE {
            return Err(Error::InvalidArgument(format!(
                "embedding width {d} cannot hold {VOCAB_SIZE} orthonormal text rows"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |scale: f64| -> F {
            real::<F>(scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
        };

        let mut text: Vec<Vec<F>> = (0..VOCAB_SIZE)
            .map(|_| (0..d).map(|_| gauss(1.0)).collect())
            .collect();
        for t in 0..VOCAB_SIZE {
            for s in 0..t {
                let dot: F = text[t].iter().zip(&text[s]).map(|(a, b)| *a * *b).sum();
                for k in 0..d {
                    let sub = dot * text[s][k];
                    text[t][k] -= sub;
                }
            }
            let norm = text[t].iter().map(|a| *a * *a).sum::<F>().sqrt();
            if norm < real(1e-8) {
                return Err(Error::InvalidArgument(
                    "text table degenerated during orthonormalization".into(),
                ));
            }
            for a in text[t].iter_mut() {
                *a /= norm;
            }
        }

        let dn_scale = 1.0 / (DN_INPUT as f64).sqrt();
        let dn_embed = (0..feature_dim)
            .map(|_| (0..DN_INPUT).map(|_| gauss(dn_scale)).collect())
            .collect();
        let w1_scale = 1.0 / (feature_dim as f64).sqrt();
        let w1 = (0..hidden)
            .map(|_| (0..feature_dim).map(|_| gauss(w1_scale)).collect())
            .collect();
        let out = q * d + q * 4;
        let w2_scale = 1.0 / (hidden as f64).sqrt();
        let w2: Vec<Vec<F>> = (0..out)
            .map(|_| (0..hidden).map(|_| gauss(w2_scale)).collect())
            .collect();

        let mut b2 = vec![F::zero(); out];
        for qi in 0..q {
            let cx = rng.gen_range(0.1..0.9);
            let cy = rng.gen_range(0.1..0.9);
            let w = rng.gen_range(0.1..0.3);
            let h = rng.gen_range(0.1..0.3);
            let base = q * d + 4 * qi;
            b2[base] = logit(real::<F>(cx));
            b2[base + 1] = logit(real::<F>(cy));
            b2[base + 2] = logit(real::<F>(w));
            b2[base + 3] = logit(real::<F>(h));
        }

        Ok(Self {
            q,
            d,
            feature_dim,
            hidden,
            text,
            dn_embed,
            w1,
            b1: vec![F::zero(); hidden],
            w2,
            b2,
        })
    }

    fn check_features(&self, features: &[F]) -> Result<()> {
        if features.len() != self.feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "scene has {} features, model expects {}",
                features.len(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    fn hidden_layer(&self, x: &[F]) -> Vec<F> {
        self.w1
            .iter()
            .zip(&self.b1)
            .map(|(row, b)| {
                let z = row.iter().zip(x).map(|(w, v)| *w * *v).sum::<F>() + *b;
                z.tanh()
            })
            .collect()
    }

    fn output_row(&self, h: &[F], r: usize) -> F {
        self.w2[r].iter().zip(h).map(|(w, v)| *w * *v).sum::<F>() + self.b2[r]
    }

    /// Logits row, squashed box, and raw sigmoids for one query slot.
    ///
    /// Box validity needs a positive extent, so a fully saturated width or
    /// height sigmoid (exactly 0 in floating point) is clamped to the
    /// smallest positive value; the gradient there is 0 anyway. Fails only
    /// when the weights have stopped being finite.
    fn query_head(&self, h: &[F], qi: usize) -> Result<(Vec<F>, BoxCXCYWH<F>, [F; 4])> {
        let emb: Vec<F> = (0..self.d).map(|k| self.output_row(h, qi * self.d + k)).collect();
        let logits = self
            .text
            .iter()
            .map(|t| t.iter().zip(&emb).map(|(a, b)| *a * *b).sum())
            .collect();
        let base = self.q * self.d + 4 * qi;
        let squash = [
            sigmoid(self.output_row(h, base)),
            sigmoid(self.output_row(h, base + 1)),
            sigmoid(self.output_row(h, base + 2)),
            sigmoid(self.output_row(h, base + 3)),
        ];
        let half = real::<F>(0.5);
        let w = squash[2].max(F::min_positive_value());
        let hh = squash[3].max(F::min_positive_value());
        let bbox = BoxCXCYWH::new(
            squash[0] * (F::one() - w) + w * half,
            squash[1] * (F::one() - hh) + hh * half,
            w,
            hh,
        )?;
        Ok((logits, bbox, squash))
    }

    fn forward_cached(&self, features: &[F]) -> Result<(LogitMatrix<F>, Vec<BoxCXCYWH<F>>, ForwardCache<F>)> {
        self.check_features(features)?;
        let h = self.hidden_layer(features);
        let mut logits = Vec::with_capacity(self.q);
        let mut boxes = Vec::with_capacity(self.q);
        let mut squash = Vec::with_capacity(self.q);
        for qi in 0..self.q {
            let (row, bbox, s) = self.query_head(&h, qi)?;
            logits.push(row);
            boxes.push(bbox);
            squash.push(s);
        }
        Ok((logits, boxes, ForwardCache { x: features.to_vec(), h, squash }))
    }

    /// One denoising pass: the conditioning vector (label one-hot, noised
    /// box) is projected into feature space and added to the scene
    /// features; query slot `slot` provides the output.
    fn dn_forward_cached(
        &self,
        features: &[F],
        query: &DenoisingQuery<F>,
        slot: usize,
    ) -> Result<(Vec<F>, BoxCXCYWH<F>, ForwardCache<F>)> {
        self.check_features(features)?;
        let mut u = [F::zero(); DN_INPUT];
        u[query.label.token_index()] = F::one();
        u[VOCAB_SIZE] = query.bbox.cx();
        u[VOCAB_SIZE + 1] = query.bbox.cy();
        u[VOCAB_SIZE + 2] = query.bbox.w();
        u[VOCAB_SIZE + 3] = query.bbox.h();
        let x: Vec<F> = features
            .iter()
            .zip(&self.dn_embed)
            .map(|(f, row)| *f + row.iter().zip(&u).map(|(a, b)| *a * *b).sum::<F>())
            .collect();
        let h = self.hidden_layer(&x);
        let (row, bbox, s) = self.query_head(&h, slot)?;
        Ok((row, bbox, ForwardCache { x, h, squash: vec![s] }))
    }

    /// Backpropagates per-query upstream gradients through one cached pass,
    /// accumulating into `grads`. Only the listed queries' output rows are
    /// touched, which keeps denoising passes (one query each) cheap.
    fn backward(&self, cache: &ForwardCache<F>, queries: &[QueryGrad<F>], grads: &mut Grads<F>) {
        let half = real::<F>(0.5);
        let mut dh = vec![F::zero(); self.hidden];
        let mut push_row = |r: usize, g: F, dh: &mut Vec<F>| {
            if g == F::zero() {
                return;
            }
            grads.b2[r] += g;
            for (c, hv) in cache.h.iter().enumerate() {
                grads.w2[r][c] += g * *hv;
            }
            for (c, w) in self.w2[r].iter().enumerate() {
                dh[c] += g * *w;
            }
        };
        for qg in queries {
            // Embedding rows via the fixed text table.
            for k in 0..self.d {
                let g = qg
                    .dlogits
                    .iter()
                    .zip(&self.text)
                    .map(|(dl, t)| *dl * t[k])
                    .sum::<F>();
                push_row(qg.qi * self.d + k, g, &mut dh);
            }
            // Box rows through the squash: w = sw, cx = scx(1 - sw) + sw/2.
            let [scx, scy, sw, sh] = qg.squash;
            let [dcx, dcy, dw, dhh] = qg.dbox;
            let base = self.q * self.d + 4 * qg.qi;
            push_row(base, dcx * scx * (F::one() - scx) * (F::one() - sw), &mut dh);
            push_row(base + 1, dcy * scy * (F::one() - scy) * (F::one() - sh), &mut dh);
            push_row(base + 2, (dw + dcx * (half - scx)) * sw * (F::one() - sw), &mut dh);
            push_row(base + 3, (dhh + dcy * (half - scy)) * sh * (F::one() - sh), &mut dh);
        }
        for (c, (dhc, hv)) in dh.iter().zip(&cache.h).enumerate() {
            let dz = *dhc * (F::one() - *hv * *hv);
            if dz == F::zero() {
                continue;
            }
            grads.b1[c] += dz;
            for (k, xv) in cache.x.iter().enumerate() {
                grads.w1[c][k] += dz * *xv;
            }
        }
    }

    /// Class logits and squashed boxes for one scene.
    pub fn forward(&self, scene: &Scene<F>) -> Result<(LogitMatrix<F>, Vec<BoxCXCYWH<F>>)> {
        let (logits, boxes, _) = self.forward_cached(&scene.features)?;
        Ok((logits, boxes))
    }

    /// Scored predictions for one scene: per-class sigmoid scores plus the
    /// box in corner form.
    pub fn predict(&self, scene: &Scene<F>) -> Result<Vec<Prediction<F>>> {
        let (logits, boxes) = self.forward(scene)?;
        logits
            .iter()
            .zip(&boxes)
            .map(|(row, bbox)| {
                let mut scores = [F::zero(); VOCAB_SIZE];
                for (s, l) in scores.iter_mut().zip(row) {
                    *s = sigmoid(*l);
                }
                Ok(Prediction { scores, bbox: bbox.to_xyxy()? })
            })
            .collect()
    }

    fn all_finite(&self) -> bool {
        self.w1.iter().flatten().all(|x| x.is_finite())
            && self.b1.iter().all(|x| x.is_finite())
            && self.w2.iter().flatten().all(|x| x.is_finite())
            && self.b2.iter().all(|x| x.is_finite())
    }

    fn sgd_step(&mut self, grads: &Grads<F>, lr: F) {
        for (row, grow) in self.w1.iter_mut().zip(&grads.w1) {
            for (w, g) in row.iter_mut().zip(grow) {
                *w -= lr * *g;
            }
        }
        for (b, g) in self.b1.iter_mut().zip(&grads.b1) {
            *b -= lr * *g;
        }
        for (row, grow) in self.w2.iter_mut().zip(&grads.w2) {
            for (w, g) in row.iter_mut().zip(grow) {
                *w -= lr * *g;
            }
        }
        for (b, g) in self.b2.iter_mut().zip(&grads.b2) {
            *b -= lr * *g;
        }
    }
}

/// Training hyperparameters. Serde defaults make every field optional in
/// config files, and unknown keys are rejected so typos fail loudly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig<F: Real> {
    pub learning_rate: F,
    /// Per-step multiplicative learning-rate decay; 1 disables it.
    pub lr_decay: F,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Denoising label-flip probability.
    pub p: F,
    pub num_denoising_groups: usize,
    /// Ignore unmatched predictions inside the posterior mask on partially
    /// annotated scenes instead of training them as background.
    pub tma_enabled: bool,
    /// Conditional label flips; false falls back to uniform flips over the
    /// other labels.
    pub ccdn_enabled: bool,
    /// Denoising box center jitter bound.
    pub lambda1: F,
    /// Denoising box scale jitter bound.
    pub lambda2: F,
    /// Weight of the denoising loss against the matching losses.
    pub dn_weight: F,
    pub num_queries: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub loss: LossConfig<F>,
    pub cost_weights: CostWeights<F>,
}

impl<F: Real> Default for TrainConfig<F> {
    fn default() -> Self {
        Self {
            learning_rate: real(1e-2),
            lr_decay: F::one(),
            steps: 1500,
            batch_size: 8,
            seed: 0,
            p: real(0.5),
            num_denoising_groups: 2,
            tma_enabled: true,
            ccdn_enabled: true,
            lambda1: real(1.0),
            lambda2: real(0.4),
            dn_weight: F::one(),
            num_queries: 20,
            embed_dim: 32,
            hidden_dim: 64,
            loss: LossConfig::default(),
            cost_weights: CostWeights::default(),
        }
    }
}

impl<F: Real> TrainConfig<F> {
    fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < F::zero() {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !self.lr_decay.is_finite() || self.lr_decay <= F::zero() || self.lr_decay > F::one() {
            return Err(Error::InvalidArgument(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "steps and batch_size must be >= 1".into(),
            ));
        }
        if self.num_denoising_groups == 0 {
            return Err(Error::InvalidArgument(
                "num_denoising_groups must be >= 1".into(),
            ));
        }
        if !self.dn_weight.is_finite() || self.dn_weight < F::zero() {
            return Err(Error::InvalidArgument(format!(
                "dn_weight must be finite and >= 0, got {}",
                self.dn_weight
            )));
        }
        Ok(())
    }
}

/// One averaged training step in the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow<F: Real> {
    pub step: usize,
    pub total: F,
    pub classification: F,
    pub localization: F,
    pub denoising: F,
}

/// Result of [`train`]: the fitted model, the per-step loss trace, and the
/// evaluation report on the held-out test split.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<F: Real> {
    pub model: ToyDetector<F>,
    pub trace: Vec<TraceRow<F>>,
    pub report: EvalReport<F>,
}

/// Index ranges of the 70/10/20 train/validation/test split.
pub fn split_indices(n: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
    let n_train = ((n as f64) * 0.7).round().max(1.0) as usize;
    let n_train = n_train.min(n);
    let n_val = (((n as f64) * 0.1).round() as usize).min(n - n_train);
    (0..n_train, n_train..n_train + n_val, n_train + n_val..n)
}

/// Loss and weight gradients of one scene under the full composition:
/// forward, matching (with the posterior-mask carve-out when enabled and
/// the scene is partially annotated), the given denoising queries, and the
/// total loss. Deterministic given its inputs; the trainer samples the
/// denoising queries, so this function is also the hook for gradient
/// checking the composed pipeline.
pub fn scene_loss<F: Real>(
    model: &ToyDetector<F>,
    scene: &Scene<F>,
    dn_queries: &[DenoisingQuery<F>],
    cfg: &TrainConfig<F>,
) -> Result<(TotalLoss<F>, Grads<F>)> {
    let (logits, boxes, cache) = model.forward_cached(&scene.features)?;
    let mut preds = Vec::with_capacity(model.q);
    for (row, bbox) in logits.iter().zip(&boxes) {
        let mut scores = [F::zero(); VOCAB_SIZE];
        for (s, l) in scores.iter_mut().zip(row) {
            *s = sigmoid(*l);
        }
        preds.push(Prediction { scores, bbox: bbox.to_xyxy()? });
    }
    let assignment = match_predictions(
        &preds,
        &scene.annotations,
        &cfg.cost_weights,
        cfg.tma_enabled,
        scene.fully_annotated(),
    )?;

    let mut dn_logits = Vec::with_capacity(dn_queries.len());
    let mut dn_boxes = Vec::with_capacity(dn_queries.len());
    let mut dn_caches = Vec::with_capacity(dn_queries.len());
    for (i, dq) in dn_queries.iter().enumerate() {
        let (row, bbox, c) = model.dn_forward_cached(&scene.features, dq, i % model.q)?;
        dn_logits.push(row);
        dn_boxes.push(bbox);
        dn_caches.push(c);
    }

    let parts = total_loss(
        &logits,
        &boxes,
        &assignment,
        &scene.annotations,
        dn_queries,
        &dn_logits,
        &dn_boxes,
        &cfg.loss,
        cfg.dn_weight,
    )?;

    let mut grads = Grads::zeros(model);
    let scene_queries: Vec<QueryGrad<F>> = (0..model.q)
        .map(|qi| QueryGrad {
            qi,
            squash: cache.squash[qi],
            dlogits: &parts.grad_logits[qi],
            dbox: parts.grad_boxes[qi],
        })
        .collect();
    model.backward(&cache, &scene_queries, &mut grads);
    for (i, c) in dn_caches.iter().enumerate() {
        let qg = QueryGrad {
            qi: i % model.q,
            squash: c.squash[0],
            dlogits: &parts.dn_grad_logits[i],
            dbox: parts.dn_grad_boxes[i],
        };
        model.backward(c, std::slice::from_ref(&qg), &mut grads);
    }
    Ok((parts, grads))
}

/// Trains a fresh detector on the 70% train split with plain gradient
/// descent and reports on the 20% test split (on the whole dataset when it
/// is too small to leave a test remainder).
///
/// Deterministic: the model is initialized from `cfg.seed` and denoising
/// queries are drawn from a dedicated stream of the same seed, so
/// same-seeded runs produce bit-identical outcomes. Aborts with
/// [`Error::Diverged`] when the loss or any weight stops being finite.
pub fn train<F: Real>(scenes: &[Scene<F>], cfg: &TrainConfig<F>) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let feature_dim = scenes[0].features.len();
    for s in scenes {
        if s.features.len() != feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "scene {} has {} features, scene {} has {feature_dim}",
                s.image_id,
                s.features.len(),
                scenes[0].image_id
            )));
        }
    }

    let (train_range, _val_range, test_range) = split_indices(scenes.len());
    let train_scenes = &scenes[train_range];
    let test_scenes = if test_range.is_empty() { scenes } else { &scenes[test_range] };

    let mut model = ToyDetector::<F>::new(
        cfg.num_queries,
        cfg.embed_dim,
        feature_dim,
        cfg.hidden_dim,
        cfg.seed,
    )?;
    // Model init consumed the seed's default stream; denoising sampling
    // gets its own.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);

    let rule = if cfg.ccdn_enabled { FlipRule::Conditional } else { FlipRule::Uniform };
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut lr = cfg.learning_rate;
    let batch = cfg.batch_size.min(train_scenes.len());
    for step in 0..cfg.steps {
        if !model.all_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        let mut batch_grads = Grads::zeros(&model);
        let (mut total, mut cls, mut loc, mut dn) = (F::zero(), F::zero(), F::zero(), F::zero());
        for j in 0..batch {
            let scene = &train_scenes[(step * batch + j) % train_scenes.len()];
            let dn_queries = if scene.annotations.is_empty() {
                Vec::new()
            } else {
                sample_denoising_queries(
                    &scene.annotations,
                    cfg.p,
                    cfg.num_denoising_groups,
                    cfg.lambda1,
                    cfg.lambda2,
                    rule,
                    &mut rng,
                )?
            };
            // Configs and shapes were validated up front, so box or score
            // validity errors here mean the numerics blew up.
            let (parts, grads) = match scene_loss(&model, scene, &dn_queries, cfg) {
                Ok(r) => r,
                Err(Error::InvalidBox(_)) | Err(Error::InvalidArgument(_)) => {
                    return Err(Error::Diverged { step, loss: f64::NAN });
                }
                Err(e) => return Err(e),
            };
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: parts.total.to_f64().unwrap_or(f64::NAN),
                });
            }
            batch_grads.add(&grads);
            total += parts.total;
            cls += parts.classification;
            loc += parts.localization;
            dn += parts.denoising;
        }
        let inv = F::one() / real::<F>(batch as f64);
        batch_grads.scale(inv);
        model.sgd_step(&batch_grads, lr);
        lr *= cfg.lr_decay;
        trace.push(TraceRow {
            step,
            total: total * inv,
            classification: cls * inv,
            localization: loc * inv,
            denoising: dn * inv,
        });
    }
    if !model.all_finite() {
        return Err(Error::Diverged { step: cfg.steps, loss: f64::NAN });
    }

    let (_, report) = evaluate(&model, test_scenes)?;
    Ok(TrainOutcome { model, trace, report })
}

/// Runs the detector over the scenes and scores the detections against the
/// scene annotations.
///
/// Every query emits one record per vocabulary class. When the posterior
/// class is absent from the ground truth (the partially annotated task),
/// posterior detections are excluded rather than punished as false
/// positives.
pub fn evaluate<F: Real>(
    model: &ToyDetector<F>,
    scenes: &[Scene<F>],
) -> Result<(Vec<DetectionRecord<F>>, EvalReport<F>)> {
    let mut gts = Vec::new();
    for scene in scenes {
        for (label, bbox) in &scene.annotations {
            gts.push(GroundTruth { image_id: scene.image_id, label: *label, bbox: *bbox });
        }
    }
    if gts.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate on scenes without annotations".into(),
        ));
    }
    let classes = classes_present(&gts);

    let mut records = Vec::new();
    for scene in scenes {
        for pred in model.predict(scene)? {
            for label in ToothLabel::ALL {
                records.push(DetectionRecord {
                    image_id: scene.image_id,
                    label,
                    score: pred.scores[label.token_index()],
                    bbox: pred.bbox,
                });
            }
        }
    }
    if !classes.contains(&ToothLabel::PosteriorTeeth) {
        records = exclude_posterior(&records);
    }
    let report = coco_ap(&records, &gts, &classes)?;
    Ok((records, report))
}

/// Mean over all predictions inside the posterior mask of their maximum
/// class score; `None` when no prediction falls inside any scene's mask.
///
/// The mask of each scene comes from the extremities of its annotated
/// anterior boxes, so scenes without anterior annotations contribute
/// nothing.
pub fn posterior_mask_mean_score<F: Real>(
    model: &ToyDetector<F>,
    scenes: &[Scene<F>],
) -> Result<Option<F>> {
    let mut sum = F::zero();
    let mut count = 0usize;
    for scene in scenes {
        let anterior: Vec<BoxXYXY<F>> = scene
            .annotations
            .iter()
            .filter(|(l, _)| l.is_anterior())
            .map(|(_, b)| *b)
            .collect();
        if anterior.is_empty() {
            continue;
        }
        let ext = anterior_extremities(&anterior)?;
        for pred in model.predict(scene)? {
            if posterior_mask(&pred.bbox, &ext) {
                sum += pred.scores.iter().copied().fold(F::zero(), F::max);
                count += 1;
            }
        }
    }
    Ok(if count == 0 { None } else { Some(sum / real::<F>(count as f64)) })
}

/// Versioned on-disk model dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile<F: Real> {
    pub format_version: u32,
    pub q: usize,
    pub d: usize,
    /// Vocabulary size of the text table.
    pub t: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub text: Vec<Vec<F>>,
    pub dn_embed: Vec<Vec<F>>,
    pub w1: Vec<Vec<F>>,
    pub b1: Vec<F>,
    pub w2: Vec<Vec<F>>,
    pub b2: Vec<F>,
}

/// Current model file format version.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Writes the model as versioned JSON.
pub fn save_model<F: Real + serde::Serialize>(
    model: &ToyDetector<F>,
    path: &std::path::Path,
) -> Result<()> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        q: model.q,
        d: model.d,
        t: VOCAB_SIZE,
        feature_dim: model.feature_dim,
        hidden: model.hidden,
        text: model.text.clone(),
        dn_embed: model.dn_embed.clone(),
        w1: model.w1.clone(),
        b1: model.b1.clone(),
        w2: model.w2.clone(),
        b2: model.b2.clone(),
    };
    let mut text = serde_json::to_string(&file)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a model written by [`save_model`], validating version and shapes.
pub fn load_model<F: Real + serde::de::DeserializeOwned>(
    path: &std::path::Path,
) -> Result<ToyDetector<F>> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile<F> = serde_json::from_str(&text)?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::InvalidFile(format!(
            "model format version {} not supported (expected {MODEL_FORMAT_VERSION})",
            file.format_version
        )));
    }
    let model = ToyDetector {
        q: file.q,
        d: file.d,
        feature_dim: file.feature_dim,
        hidden: file.hidden,
        text: file.text,
        dn_embed: file.dn_embed,
        w1: file.w1,
        b1: file.b1,
        w2: file.w2,
        b2: file.b2,
    };
    let out = model.out_dim();
    let shapes_ok = file.t == VOCAB_SIZE
        && model.text.len() == VOCAB_SIZE
        && model.text.iter().all(|r| r.len() == model.d)
        && model.dn_embed.len() == model.feature_dim
        && model.dn_embed.iter().all(|r| r.len() == DN_INPUT)
        && model.w1.len() == model.hidden
        && model.w1.iter().all(|r| r.len() == model.feature_dim)
        && model.b1.len() == model.hidden
        && model.w2.len() == out
        && model.w2.iter().all(|r| r.len() == model.hidden)
        && model.b2.len() == out;
    if !shapes_ok {
        return Err(Error::InvalidFile("model weight shapes are inconsistent".into()));
    }
    Ok(model)
}
