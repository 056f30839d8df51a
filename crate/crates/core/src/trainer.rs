//! Alternating minibatch optimization and hash-code extraction.
//!
//! Every iteration runs four phases in a fixed order: the outer critics
//! ascend their objective, the outer generators (and text encoder) descend
//! theirs, then the same for the inner cycle. The inner phases see the
//! common representations recomputed after the outer generator update and
//! held constant.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{
    adversarial_pair, cycle_total, forward_inner, forward_outer_from, inner_terms, outer_terms,
    CycleTerms, LossBreakdown, LossWeights,
};
use crate::ndcore::{Graph, Matrix, ParamKey, Var};
use crate::networks::{
    Critic, Direction, Modality, NetKind, NetSet, NetworkBundle, NetworkDims, CODE_BITS,
};
use crate::retrieval::CodeMatrix;

pub const MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    SgdMomentum,
    /// Bias-corrected first/second moment scaling (0.9, 0.999, 1e-8).
    Adam,
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub code_bits: usize,
    pub batch_size: usize,
    pub max_iters: usize,
    pub lr_image: f64,
    pub lr_text: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Include the generator-side adversarial term in generator updates.
    pub gen_adv: bool,
    pub optimizer: Optimizer,
    pub weights: LossWeights,
    pub text_embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            code_bits: 16,
            batch_size: 128,
            max_iters: 1000,
            lr_image: 1e-4,
            lr_text: 1e-2,
            weight_decay: 0.1,
            seed: 0,
            gen_adv: true,
            optimizer: Optimizer::SgdMomentum,
            weights: LossWeights::default(),
            text_embed_dim: 300,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !CODE_BITS.contains(&self.code_bits) {
            return Err(Error::contract(format!(
                "code length must be one of {CODE_BITS:?}, got {}",
                self.code_bits
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::contract(format!(
                "batch size must be >= 2, got {}",
                self.batch_size
            )));
        }
        for (name, lr) in [("image", self.lr_image), ("text", self.lr_text)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::contract(format!(
                    "{name} learning rate must be > 0, got {lr}"
                )));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::contract(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.text_embed_dim == 0 {
            return Err(Error::contract("text embedding width must be positive"));
        }
        Ok(())
    }

    fn lr(&self, kind: NetKind) -> f64 {
        match kind.modality() {
            Modality::Image => self.lr_image,
            Modality::Text => self.lr_text,
        }
    }
}

/// One of the four updates of an iteration, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    OuterCritics,
    OuterGenerators,
    InnerCritics,
    InnerGenerators,
}

impl Phase {
    pub const ORDER: [Phase; 4] = [
        Phase::OuterCritics,
        Phase::OuterGenerators,
        Phase::InnerCritics,
        Phase::InnerGenerators,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::OuterCritics => "outer critic objective",
            Phase::OuterGenerators => "outer generator objective",
            Phase::InnerCritics => "inner critic objective",
            Phase::InnerGenerators => "inner generator objective",
        }
    }

    pub fn nets(self) -> NetSet {
        NetSet::of(match self {
            Phase::OuterCritics => &[NetKind::OuterDiscImage, NetKind::OuterDiscText],
            Phase::OuterGenerators => &[
                NetKind::TextEncoder,
                NetKind::OuterGenImageToText,
                NetKind::OuterGenTextToImage,
            ],
            Phase::InnerCritics => &[NetKind::InnerDiscImage, NetKind::InnerDiscText],
            Phase::InnerGenerators => &[NetKind::InnerGenImageToText, NetKind::InnerGenTextToImage],
        })
    }

    /// Critic phases maximize their objective.
    pub fn ascends(self) -> bool {
        matches!(self, Phase::OuterCritics | Phase::InnerCritics)
    }
}

/// Common representations `(Z_image, Z_text)` of a batch.
pub fn common_representations(
    bundle: &NetworkBundle,
    images: &Matrix,
    texts: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let mut g = Graph::new();
    let iv = g.constant(images.clone());
    let tv = g.constant(texts.clone());
    let fi = bundle.encode_image(&g, iv)?;
    let ft = bundle.encode_text(&mut g, tv, false)?;
    let (_, zi) = bundle.gen_outer(&mut g, Direction::ImageToText, fi, false)?;
    let (_, zt) = bundle.gen_outer(&mut g, Direction::TextToImage, ft, false)?;
    Ok((g.value(zi).clone(), g.value(zt).clone()))
}

/// A phase's objective on the tape.
struct PhaseGraph {
    objective: Var,
    /// Named scalar parts, checked for finiteness before the update.
    parts: Vec<(&'static str, Var)>,
    /// Full cycle terms; generator phases only.
    terms: Option<CycleTerms>,
}

/// Builds the objective a phase optimizes. Critic objectives are returned
/// un-negated. Inner phases use `common` as the fixed `(Z_image, Z_text)`
/// when given.
#[allow(clippy::too_many_arguments)]
fn phase_graph(
    g: &mut Graph,
    bundle: &NetworkBundle,
    phase: Phase,
    images: &Matrix,
    texts: &Matrix,
    common: Option<&(Matrix, Matrix)>,
    weights: &LossWeights,
    gen_adv: bool,
) -> Result<PhaseGraph> {
    let trainable = phase.nets();
    let (real_i, real_t) = match phase {
        Phase::OuterCritics | Phase::OuterGenerators => {
            let iv = g.constant(images.clone());
            let tv = g.constant(texts.clone());
            (
                bundle.encode_image(g, iv)?,
                bundle.encode_text(g, tv, trainable.contains(NetKind::TextEncoder))?,
            )
        }
        Phase::InnerCritics | Phase::InnerGenerators => {
            let (zi, zt) = match common {
                Some((zi, zt)) => (zi.clone(), zt.clone()),
                None => common_representations(bundle, images, texts)?,
            };
            (g.constant(zi), g.constant(zt))
        }
    };
    let outer = matches!(phase, Phase::OuterCritics | Phase::OuterGenerators);
    if phase.ascends() {
        let (critic_i, critic_t) = if outer {
            (Critic::FeatureImage, Critic::FeatureText)
        } else {
            (Critic::CommonImage, Critic::CommonText)
        };
        let gen = |g: &mut Graph, dir, x| {
            if outer {
                bundle.gen_outer(g, dir, x, false)
            } else {
                bundle.gen_inner(g, dir, x, false)
            }
        };
        let (fake_t, _) = gen(g, Direction::ImageToText, real_i)?;
        let (fake_i, _) = gen(g, Direction::TextToImage, real_t)?;
        let (di, _) = adversarial_pair(g, bundle, critic_i, real_i, fake_i, trainable)?;
        let (dt, _) = adversarial_pair(g, bundle, critic_t, real_t, fake_t, trainable)?;
        return Ok(PhaseGraph {
            objective: g.add(di, dt)?,
            parts: vec![
                ("adversarial (image critic)", di),
                ("adversarial (text critic)", dt),
            ],
            terms: None,
        });
    }
    let terms = if outer {
        let f = forward_outer_from(g, bundle, real_i, real_t, trainable)?;
        outer_terms(g, bundle, &f, trainable)?
    } else {
        let f = forward_inner(g, bundle, real_i, real_t, trainable)?;
        inner_terms(g, bundle, &f, trainable)?
    };
    let objective = if gen_adv {
        cycle_total(g, &terms, weights)?
    } else {
        let rec = g.scale(terms.rec, weights.reconstruction);
        let sim = g.scale(terms.sim, weights.similarity);
        g.add(rec, sim)?
    };
    Ok(PhaseGraph {
        objective,
        parts: vec![
            ("generator adversarial (image critic)", terms.gen_image),
            ("generator adversarial (text critic)", terms.gen_text),
            ("reconstruction", terms.rec),
            ("similarity", terms.sim),
        ],
        terms: Some(terms),
    })
}

/// Value of the objective `phase` optimizes, at the bundle's current
/// parameters.
pub fn phase_objective(
    bundle: &NetworkBundle,
    phase: Phase,
    images: &Matrix,
    texts: &Matrix,
    config: &TrainConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let pg = phase_graph(
        &mut g,
        bundle,
        phase,
        images,
        texts,
        None,
        &config.weights,
        config.gen_adv,
    )?;
    g.value(pg.objective).item()
}

/// Bundle plus optimizer state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub bundle: NetworkBundle,
    pub config: TrainConfig,
    velocity: BTreeMap<ParamKey, Matrix>,
    /// Second-moment estimates and update counts, Adam only.
    second: BTreeMap<ParamKey, (Matrix, i32)>,
    iteration: usize,
}

impl TrainState {
    pub fn new(bundle: NetworkBundle, config: TrainConfig) -> Self {
        Self {
            bundle,
            config,
            velocity: BTreeMap::new(),
            second: BTreeMap::new(),
            iteration: 0,
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn diverged(&self, term: impl Into<String>) -> Error {
        Error::Divergence {
            iteration: self.iteration,
            term: term.into(),
        }
    }

    /// Runs one phase on a batch. Returns the objective before the update,
    /// and for generator phases the cycle's terms.
    pub fn run_phase(
        &mut self,
        phase: Phase,
        images: &Matrix,
        texts: &Matrix,
    ) -> Result<PhaseValues> {
        self.run_phase_with(phase, images, texts, None)
    }

    fn run_phase_with(
        &mut self,
        phase: Phase,
        images: &Matrix,
        texts: &Matrix,
        common: Option<&(Matrix, Matrix)>,
    ) -> Result<PhaseValues> {
        let mut g = Graph::new();
        let pg = phase_graph(
            &mut g,
            &self.bundle,
            phase,
            images,
            texts,
            common,
            &self.config.weights,
            self.config.gen_adv,
        )?;
        for (name, v) in &pg.parts {
            if !g.value(*v).is_finite() {
                return Err(self.diverged(format!("{name} in {}", phase.name())));
            }
        }
        let objective = g.value(pg.objective).item()?;
        if !objective.is_finite() {
            return Err(self.diverged(phase.name()));
        }
        let terms = pg.terms.map(|t| CycleTermValues::read(&g, &t));
        let grads = g.backward(pg.objective)?;
        drop(g);

        let sign = if phase.ascends() { -1.0 } else { 1.0 };
        for (key, grad) in grads.iter() {
            let (kind, _, _) = NetKind::from_param_key(key).expect("bundle keys decode");
            let lr = self.config.lr(kind);
            let decay = 1.0 - lr * self.config.weight_decay;
            let step: Matrix = match self.config.optimizer {
                Optimizer::Sgd => grad.map(|x| sign * x),
                Optimizer::SgdMomentum => {
                    let v = self
                        .velocity
                        .entry(key)
                        .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
                    for (vi, &gi) in v.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                        *vi = MOMENTUM * *vi + sign * gi;
                    }
                    v.clone()
                }
                Optimizer::Adam => {
                    let m = self
                        .velocity
                        .entry(key)
                        .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
                    let (v, t) = self
                        .second
                        .entry(key)
                        .or_insert_with(|| (Matrix::zeros(grad.rows(), grad.cols()), 0));
                    *t += 1;
                    let c1 = 1.0 - MOMENTUM.powi(*t);
                    let c2 = 1.0 - ADAM_BETA2.powi(*t);
                    let mut step = Matrix::zeros(grad.rows(), grad.cols());
                    for (((mi, vi), &gi), si) in m
                        .as_mut_slice()
                        .iter_mut()
                        .zip(v.as_mut_slice())
                        .zip(grad.as_slice())
                        .zip(step.as_mut_slice())
                    {
                        let g = sign * gi;
                        *mi = MOMENTUM * *mi + (1.0 - MOMENTUM) * g;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                        *si = (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                    }
                    step
                }
            };
            let p = self
                .bundle
                .param_mut(key)
                .expect("gradient keys are bundle keys");
            for (pi, &si) in p.as_mut_slice().iter_mut().zip(step.as_slice()) {
                *pi = ((*pi * decay) - lr * si) as f32 as f64;
            }
            if let Some((row, col)) = p.first_non_finite() {
                return Err(self.diverged(format!("{} parameter at ({row}, {col})", kind.name())));
            }
        }
        Ok(PhaseValues { objective, terms })
    }

    /// One full iteration. Returns the loss row assembled from the outer
    /// generator phase and the inner generator phase forwards.
    pub fn train_step(&mut self, images: &Matrix, texts: &Matrix) -> Result<LossBreakdown> {
        if images.rows() != texts.rows() {
            return Err(Error::Shape {
                op: "train_step batch",
                left: images.shape(),
                right: texts.shape(),
            });
        }
        self.run_phase_with(Phase::OuterCritics, images, texts, None)?;
        let outer = self.run_phase_with(Phase::OuterGenerators, images, texts, None)?;
        // Inner critics leave the outer generators alone, so one
        // computation serves both inner phases.
        let common = common_representations(&self.bundle, images, texts)?;
        self.run_phase_with(Phase::InnerCritics, images, texts, Some(&common))?;
        let inner = self.run_phase_with(Phase::InnerGenerators, images, texts, Some(&common))?;
        self.iteration += 1;
        let (outer, inner) = (
            outer.terms.expect("generator phase"),
            inner.terms.expect("generator phase"),
        );
        Ok(LossBreakdown {
            adv_f_image: outer.gen_image,
            adv_f_text: outer.gen_text,
            rec_f: outer.rec,
            sim_f: outer.sim,
            adv_z_image: inner.gen_image,
            adv_z_text: inner.gen_text,
            rec_z: inner.rec,
            sim_z: inner.sim,
            ..Default::default()
        }
        .with_totals(&self.config.weights))
    }
}

/// Result of one phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseValues {
    /// Objective value before the update.
    pub objective: f64,
    pub terms: Option<CycleTermValues>,
}

/// Scalar values of a [`CycleTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CycleTermValues {
    pub disc_image: f64,
    pub disc_text: f64,
    pub gen_image: f64,
    pub gen_text: f64,
    pub rec: f64,
    pub sim: f64,
}

impl CycleTermValues {
    fn read(g: &Graph, t: &CycleTerms) -> Self {
        let v = |x: Var| g.value(x).as_slice()[0];
        Self {
            disc_image: v(t.disc_image),
            disc_text: v(t.disc_text),
            gen_image: v(t.gen_image),
            gen_text: v(t.gen_text),
            rec: v(t.rec),
            sim: v(t.sim),
        }
    }
}

/// Per-iteration loss rows, iteration numbers starting at 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LossBreakdown>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(LossBreakdown::CSV_HEADER);
        s.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            s.push_str(&r.csv_row(i + 1));
            s.push('\n');
        }
        s
    }
}

/// Training stopped early; carries whatever was logged before the failure.
#[derive(Debug)]
pub struct Interrupted {
    pub error: Error,
    pub log: TrainLog,
}

impl fmt::Display for Interrupted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} iterations logged)", self.error, self.log.len())
    }
}

impl std::error::Error for Interrupted {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for Interrupted {
    fn from(error: Error) -> Self {
        Self {
            error,
            log: TrainLog::default(),
        }
    }
}

/// Network sizes implied by the feature widths and the config.
pub fn dims_for(images: &Matrix, texts: &Matrix, config: &TrainConfig) -> NetworkDims {
    NetworkDims {
        image_dim: images.cols(),
        text_dim: texts.cols(),
        text_embed_dim: config.text_embed_dim,
        code_bits: config.code_bits,
    }
}

/// Seeded epoch-wise minibatch sampler over `0..n`; a trailing partial
/// batch is dropped and the order reshuffled.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let batch = batch.min(n);
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
            batch,
        }
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let b = &self.order[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        b
    }
}

const SHUFFLE_SALT: u64 = 0x5eed_ba7c_4e5f_0001;

/// Trains a freshly initialized bundle on aligned features for
/// `config.max_iters` iterations.
pub fn fit(
    images: &Matrix,
    texts: &Matrix,
    config: &TrainConfig,
) -> std::result::Result<(NetworkBundle, TrainLog), Interrupted> {
    config.validate()?;
    if images.rows() != texts.rows() {
        return Err(Error::Data(format!(
            "{} images but {} texts",
            images.rows(),
            texts.rows()
        ))
        .into());
    }
    if images.rows() < 2 {
        return Err(Error::contract("training needs at least two items").into());
    }
    let bundle = NetworkBundle::init(dims_for(images, texts, config), config.seed)?;
    let mut state = TrainState::new(bundle, config.clone());
    let mut sampler =
        BatchSampler::new(images.rows(), config.batch_size, config.seed ^ SHUFFLE_SALT);
    let mut log = TrainLog::default();
    for _ in 0..config.max_iters {
        let idx = sampler.next_batch();
        let bi = images.select_rows(idx);
        let bt = texts.select_rows(idx);
        match state.train_step(&bi, &bt) {
            Ok(row) => log.rows.push(row),
            Err(error) => return Err(Interrupted { error, log }),
        }
    }
    Ok((state.bundle, log))
}

/// Which features a code is computed from.
#[derive(Clone, Copy, Debug)]
pub enum CodeSource<'a> {
    /// `sign(H_image + H_text)` for aligned pairs.
    Paired {
        images: &'a Matrix,
        texts: &'a Matrix,
    },
    Images(&'a Matrix),
    Texts(&'a Matrix),
}

const CODE_CHUNK: usize = 512;

fn hash_tap(
    bundle: &NetworkBundle,
    g: &mut Graph,
    dir: Direction,
    features: &Matrix,
) -> Result<Var> {
    let x = g.constant(features.clone());
    let f = match dir {
        Direction::ImageToText => bundle.encode_image(g, x)?,
        Direction::TextToImage => bundle.encode_text(g, x, false)?,
    };
    let (_, z) = bundle.gen_outer(g, dir, f, false)?;
    let (_, h) = bundle.gen_inner(g, dir, z, false)?;
    Ok(h)
}

/// Real-valued relaxed codes (before the sign).
pub fn relaxed_codes(bundle: &NetworkBundle, source: CodeSource<'_>) -> Result<Matrix> {
    let n = match source {
        CodeSource::Paired { images, texts } => {
            if images.rows() != texts.rows() {
                return Err(Error::Shape {
                    op: "paired codes",
                    left: images.shape(),
                    right: texts.shape(),
                });
            }
            images.rows()
        }
        CodeSource::Images(m) | CodeSource::Texts(m) => m.rows(),
    };
    let k = bundle.dims().code_bits;
    let mut values = Vec::with_capacity(n * k);
    for start in (0..n).step_by(CODE_CHUNK) {
        let end = (start + CODE_CHUNK).min(n);
        let mut g = Graph::new();
        let h = match source {
            CodeSource::Paired { images, texts } => {
                let hi = hash_tap(
                    bundle,
                    &mut g,
                    Direction::ImageToText,
                    &images.row_range(start, end),
                )?;
                let ht = hash_tap(
                    bundle,
                    &mut g,
                    Direction::TextToImage,
                    &texts.row_range(start, end),
                )?;
                g.add(hi, ht)?
            }
            CodeSource::Images(m) => hash_tap(
                bundle,
                &mut g,
                Direction::ImageToText,
                &m.row_range(start, end),
            )?,
            CodeSource::Texts(m) => hash_tap(
                bundle,
                &mut g,
                Direction::TextToImage,
                &m.row_range(start, end),
            )?,
        };
        values.extend_from_slice(g.value(h).as_slice());
    }
    Matrix::new(n, k, values)
}

/// Bit-packed sign codes; entries equal to zero map to +1.
pub fn extract_codes(bundle: &NetworkBundle, source: CodeSource<'_>) -> Result<CodeMatrix> {
    CodeMatrix::from_real(&relaxed_codes(bundle, source)?)
}
