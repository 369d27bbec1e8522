//! Adversarial and cycle-consistency objectives for the three-domain cycle
//! and the alternating discriminator/generator optimisation loop.
//!
//! Domains are indexed `X = 0`, `Y = 1`, `Z = 2`. `G` advances a domain
//! (`X -> Y -> Z -> X`) and `F` walks the cycle backwards.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{TriDomain, TripleBatch, TripleBatcher};
use crate::error::{Error, Result};
use crate::model::{
    save_checkpoint, ArchConfig, Checkpoint, CycleModels, DiscriminatorNet, GeneratorNet, LastTermDiscriminator,
    TrainingMeta,
};
use crate::tensor::ops::Mode;
use crate::tensor::{Graph, Tensor, Trace};

/// A batched image-to-image map.
pub trait ImageMap {
    fn apply(&self, batch: &Tensor) -> Result<Tensor>;
}

/// A batched image-to-probability map.
pub trait Critic {
    fn score(&self, batch: &Tensor) -> Result<Vec<f32>>;
}

impl ImageMap for GeneratorNet {
    fn apply(&self, batch: &Tensor) -> Result<Tensor> {
        self.infer(batch)
    }
}

impl Critic for DiscriminatorNet {
    fn score(&self, batch: &Tensor) -> Result<Vec<f32>> {
        self.scores(batch)
    }
}

/// Adapts a closure into an [`ImageMap`].
pub struct FnMap<F>(pub F);

impl<F: Fn(&Tensor) -> Result<Tensor>> ImageMap for FnMap<F> {
    fn apply(&self, batch: &Tensor) -> Result<Tensor> {
        (self.0)(batch)
    }
}

/// Adapts a closure into a [`Critic`].
pub struct FnCritic<F>(pub F);

impl<F: Fn(&Tensor) -> Result<Vec<f32>>> Critic for FnCritic<F> {
    fn score(&self, batch: &Tensor) -> Result<Vec<f32>> {
        (self.0)(batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gen {
    G,
    F,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disc {
    X,
    Y,
    Z,
}

/// One adversarial term: `gen` maps domain `source` and `disc` separates
/// the result from real samples of domain `real`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdvTerm {
    pub gen: Gen,
    pub source: usize,
    pub disc: Disc,
    pub real: usize,
    pub name: &'static str,
}

/// The six adversarial terms in their canonical order.
pub fn adversarial_terms(last: LastTermDiscriminator) -> [AdvTerm; 6] {
    let t = |gen, source, disc, real, name| AdvTerm {
        gen,
        source,
        disc,
        real,
        name,
    };
    let last_disc = match last {
        LastTermDiscriminator::AsPrinted => Disc::X,
        LastTermDiscriminator::FigureConsistent => Disc::Z,
    };
    [
        t(Gen::G, 0, Disc::Y, 1, "adv_G_XY"),
        t(Gen::F, 1, Disc::X, 0, "adv_F_YX"),
        t(Gen::G, 1, Disc::Z, 2, "adv_G_YZ"),
        t(Gen::F, 2, Disc::Y, 1, "adv_F_ZY"),
        t(Gen::G, 2, Disc::X, 0, "adv_G_ZX"),
        t(Gen::F, 0, last_disc, 2, "adv_F_XZ"),
    ]
}

/// The six cycle terms: `(outer, inner, domain)` meaning `outer(inner(v))` vs `v`.
pub const CYCLE_TERMS: [(Gen, Gen, usize, &str); 6] = [
    (Gen::F, Gen::G, 0, "cyc_FG_x"),
    (Gen::G, Gen::F, 1, "cyc_GF_y"),
    (Gen::F, Gen::G, 1, "cyc_FG_y"),
    (Gen::G, Gen::F, 2, "cyc_GF_z"),
    (Gen::F, Gen::G, 2, "cyc_FG_z"),
    (Gen::G, Gen::F, 0, "cyc_GF_x"),
];

fn clamp_prob(p: f32, eps: f32) -> f64 {
    (p as f64).clamp(eps as f64, 1.0 - eps as f64)
}

/// `mean log D(real) + mean log(1 - D(fake))`, probabilities clamped to `[eps, 1 - eps]`.
pub fn gan_loss(d: &impl Critic, real: &Tensor, fake: &Tensor, eps: f32) -> Result<f64> {
    if real.batch_len() == 0 || fake.batch_len() == 0 {
        return Err(Error::invalid("gan_loss needs non-empty batches"));
    }
    let pr = d.score(real)?;
    let pf = d.score(fake)?;
    Ok(gan_value(&pr, &pf, eps))
}

fn gan_value(pr: &[f32], pf: &[f32], eps: f32) -> f64 {
    let r = pr.iter().map(|&p| clamp_prob(p, eps).ln()).sum::<f64>() / pr.len() as f64;
    let f = pf.iter().map(|&p| (1.0 - clamp_prob(p, eps)).ln()).sum::<f64>() / pf.len() as f64;
    r + f
}

/// A total with its per-term decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Breakdown {
    pub terms: [f64; 6],
    pub total: f64,
}

impl Breakdown {
    fn from_terms(terms: [f64; 6]) -> Self {
        Self {
            terms,
            total: terms.iter().sum(),
        }
    }
}

/// The five networks as seen by the value-only loss kernels.
pub struct Players<'a, M: ImageMap, C: Critic> {
    pub g: &'a M,
    pub f: &'a M,
    pub d_x: &'a C,
    pub d_y: &'a C,
    pub d_z: &'a C,
}

impl<'a> Players<'a, GeneratorNet, DiscriminatorNet> {
    pub fn from_models(m: &'a CycleModels) -> Self {
        Self {
            g: &m.g,
            f: &m.f,
            d_x: &m.d_x,
            d_y: &m.d_y,
            d_z: &m.d_z,
        }
    }
}

impl<M: ImageMap, C: Critic> Players<'_, M, C> {
    fn gen(&self, g: Gen) -> &M {
        match g {
            Gen::G => self.g,
            Gen::F => self.f,
        }
    }

    fn disc(&self, d: Disc) -> &C {
        match d {
            Disc::X => self.d_x,
            Disc::Y => self.d_y,
            Disc::Z => self.d_z,
        }
    }
}

fn domain(batch: &TripleBatch, i: usize) -> &Tensor {
    match i {
        0 => &batch.x,
        1 => &batch.y,
        _ => &batch.z,
    }
}

/// Sum of the six adversarial terms.
pub fn adversarial_loss_total<M: ImageMap, C: Critic>(
    p: &Players<'_, M, C>,
    batch: &TripleBatch,
    eps: f32,
    last: LastTermDiscriminator,
) -> Result<Breakdown> {
    let mut terms = [0.0; 6];
    for (out, t) in terms.iter_mut().zip(adversarial_terms(last)) {
        let fake = p.gen(t.gen).apply(domain(batch, t.source))?;
        *out = gan_loss(p.disc(t.disc), domain(batch, t.real), &fake, eps)?;
    }
    Ok(Breakdown::from_terms(terms))
}

/// Mean absolute error between two equal-shaped batches.
fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "cycle reconstruction {:?} vs original {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&u, &v)| (u as f64 - v as f64).abs())
        .sum::<f64>()
        / a.len() as f64)
}

/// Sum of the six cycle terms, each the batch mean of the per-pixel L1 distance.
pub fn cycle_loss<M: ImageMap>(g: &M, f: &M, batch: &TripleBatch) -> Result<Breakdown> {
    if batch.is_empty() {
        return Err(Error::invalid("cycle_loss needs a non-empty batch"));
    }
    let pick = |which: Gen| if which == Gen::G { g } else { f };
    let mut terms = [0.0; 6];
    for (out, (outer, inner, d, _)) in terms.iter_mut().zip(CYCLE_TERMS) {
        let v = domain(batch, d);
        let rec = pick(outer).apply(&pick(inner).apply(v)?)?;
        *out = mean_abs_diff(&rec, v)?;
    }
    Ok(Breakdown::from_terms(terms))
}

/// Full objective value with its two components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub adversarial: Breakdown,
    pub cycle: Breakdown,
    pub total: f64,
}

pub fn total_loss<M: ImageMap, C: Critic>(
    p: &Players<'_, M, C>,
    batch: &TripleBatch,
    lambda: f64,
    eps: f32,
    last: LastTermDiscriminator,
) -> Result<LossReport> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let adversarial = adversarial_loss_total(p, batch, eps, last)?;
    let cycle = cycle_loss(p.g, p.f, batch)?;
    Ok(LossReport {
        adversarial,
        cycle,
        total: combine(adversarial.total, cycle.total, lambda),
    })
}

pub fn combine(adversarial: f64, cycle: f64, lambda: f64) -> f64 {
    adversarial + lambda * cycle
}

/// Adaptive-moment optimiser settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Moment buffers for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
}

impl AdamState {
    pub fn new(graph: &Graph) -> Self {
        let zeros = || graph.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, cfg: &AdamConfig, graph: &mut Graph, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (((p, g), m), v) in graph.params_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let step = cfg.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + cfg.epsilon);
                *w -= step;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub eps_log: f32,
    pub arch: ArchConfig,
    pub last_term: LastTermDiscriminator,
    /// Write `checkpoint_epoch{n}.ccgn` every this many epochs when `checkpoint_dir` is set.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            epochs: 300,
            batch_size: 10,
            adam: AdamConfig::default(),
            seed: 1,
            eps_log: 1e-7,
            arch: ArchConfig::default(),
            last_term: LastTermDiscriminator::AsPrinted,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.eps_log > 0.0 && self.eps_log <= 1e-3) {
            return Err(Error::invalid(format!("eps_log {} outside (0, 1e-3]", self.eps_log)));
        }
        let a = &self.adam;
        if !(a.learning_rate >= 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::invalid("optimizer hyperparameters out of range"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::invalid("checkpoint interval must be positive"));
        }
        self.arch.validate()
    }
}

/// Loss values observed during one training step (discriminators before their update).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub adversarial: [f64; 6],
    pub cycle: [f64; 6],
}

/// Per-epoch means of the step losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub epoch: usize,
    pub adv_total: f64,
    pub cyc_total: f64,
    pub adversarial: [f64; 6],
    pub cycle: [f64; 6],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub models: CycleModels,
    adam: [AdamState; 5],
    pub epoch: usize,
    pub history: Vec<EpochLosses>,
    rng: ChaCha8Rng,
}

fn adam_for(m: &CycleModels) -> [AdamState; 5] {
    [
        AdamState::new(m.g.graph()),
        AdamState::new(m.f.graph()),
        AdamState::new(m.d_x.graph()),
        AdamState::new(m.d_y.graph()),
        AdamState::new(m.d_z.graph()),
    ]
}

struct GenPasses {
    /// `G` on `[x; y; z]`
    g_on: Trace,
    /// `F` on `[x; y; z]`
    f_on: Trace,
    /// `F` on `G([x; y; z])`
    fg: Trace,
    /// `G` on `F([x; y; z])`
    gf: Trace,
}

fn rows(t: &Tensor, block: usize, b: usize) -> Tensor {
    t.slice_batch(block * b, (block + 1) * b)
}

fn add_rows(acc: &mut [f32], block: usize, item: usize, b: usize, g: &[f32]) {
    let start = block * b * item;
    for (a, &v) in acc[start..start + b * item].iter_mut().zip(g) {
        *a += v;
    }
}

fn clamp_grad(p: f32, eps: f32) -> bool {
    p > eps && p < 1.0 - eps
}

fn disc_of(m: &CycleModels, d: Disc) -> &DiscriminatorNet {
    match d {
        Disc::X => &m.d_x,
        Disc::Y => &m.d_y,
        Disc::Z => &m.d_z,
    }
}

fn finite(grads: &[Tensor]) -> bool {
    grads.iter().all(Tensor::is_finite)
}

impl TrainState {
    pub fn new(config: &TrainConfig, image_shape: [usize; 3]) -> Result<Self> {
        config.validate()?;
        let models = CycleModels::new(&config.arch, image_shape, config.seed)?;
        Ok(Self::from_models(models, config.seed))
    }

    pub fn from_models(models: CycleModels, seed: u64) -> Self {
        let adam = adam_for(&models);
        Self {
            models,
            adam,
            epoch: 0,
            history: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03),
        }
    }

    pub fn adam_steps(&self) -> i32 {
        self.adam[0].steps()
    }


    fn disc_slot(d: Disc) -> usize {
        match d {
            Disc::X => 2,
            Disc::Y => 3,
            Disc::Z => 4,
        }
    }

    fn disc_net_mut(&mut self, d: Disc) -> (&mut Graph, &mut AdamState) {
        let net = match d {
            Disc::X => &mut self.models.d_x,
            Disc::Y => &mut self.models.d_y,
            Disc::Z => &mut self.models.d_z,
        };
        (net.graph_mut(), &mut self.adam[Self::disc_slot(d)])
    }

    /// One discriminator ascent step on the adversarial sum followed by one
    /// generator descent step on the full objective. On error the state is
    /// left exactly as it was before the call.
    pub fn train_step(&mut self, batch: &TripleBatch, config: &TrainConfig) -> Result<StepLosses> {
        let backup = self.clone();
        let out = self.train_step_inner(batch, config);
        if out.is_err() {
            *self = backup;
        }
        out
    }

    fn train_step_inner(&mut self, batch: &TripleBatch, config: &TrainConfig) -> Result<StepLosses> {
        let b = batch.len();
        if b == 0 || batch.y.batch_len() != b || batch.z.batch_len() != b {
            return Err(Error::invalid("triple batch must have three equal non-empty parts"));
        }
        let passes = self.generator_passes(batch)?;
        let (adversarial, disc_grads) = self.discriminator_gradients(&passes, batch, config)?;
        let mut losses = StepLosses {
            adversarial,
            ..Default::default()
        };
        for (d, grads) in disc_grads {
            let (graph, adam) = self.disc_net_mut(d);
            adam.update(&config.adam, graph, &grads);
        }

        let (g_grads, f_grads, cycle) = self.generator_gradients(&passes, batch, config)?;
        losses.cycle = cycle;
        if !finite(&g_grads) || !finite(&f_grads) || losses.cycle.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged("generator gradient".into()));
        }
        let [a_g, a_f, ..] = &mut self.adam;
        a_g.update(&config.adam, self.models.g.graph_mut(), &g_grads);
        a_f.update(&config.adam, self.models.f.graph_mut(), &f_grads);
        Ok(losses)
    }

    fn generator_passes(&mut self, batch: &TripleBatch) -> Result<GenPasses> {
        let xyz = Tensor::concat(&[&batch.x, &batch.y, &batch.z])?;
        let rng = &mut self.rng;
        let g = self.models.g.graph();
        let f = self.models.f.graph();
        let g_on = g.trace(&xyz, Mode::Train, rng)?;
        let f_on = f.trace(&xyz, Mode::Train, rng)?;
        let fg = f.trace(g_on.output(), Mode::Train, rng)?;
        let gf = g.trace(f_on.output(), Mode::Train, rng)?;
        Ok(GenPasses { g_on, f_on, fg, gf })
    }

    /// Gradients of the negated adversarial sum for each discriminator, plus the
    /// six term values seen by the current discriminators.
    #[allow(clippy::type_complexity)]
    fn discriminator_gradients(
        &mut self,
        passes: &GenPasses,
        batch: &TripleBatch,
        config: &TrainConfig,
    ) -> Result<([f64; 6], Vec<(Disc, Vec<Tensor>)>)> {
        let b = batch.len();
        let eps = config.eps_log;
        let terms = adversarial_terms(config.last_term);
        let fake = |t: &AdvTerm| -> Tensor {
            let src = if t.gen == Gen::G { passes.g_on.output() } else { passes.f_on.output() };
            rows(src, t.source, b)
        };

        let mut adversarial = [0.0; 6];
        let mut disc_grads = Vec::new();
        for d in [Disc::X, Disc::Y, Disc::Z] {
            let mine: Vec<(usize, &AdvTerm)> = terms.iter().enumerate().filter(|(_, t)| t.disc == d).collect();
            if mine.is_empty() {
                continue;
            }
            let fakes: Vec<Tensor> = mine.iter().map(|(_, t)| fake(t)).collect();
            let mut parts: Vec<&Tensor> = Vec::new();
            for ((_, t), fk) in mine.iter().zip(&fakes) {
                parts.push(domain(batch, t.real));
                parts.push(fk);
            }
            let input = Tensor::concat(&parts)?;
            let trace = disc_of(&self.models, d).graph().trace(&input, Mode::Train, &mut self.rng)?;
            let p = trace.output().data();
            let mut up = vec![0.0f32; p.len()];
            let inv_b = 1.0 / b as f32;
            for (k, (ti, _)) in mine.iter().enumerate() {
                let real = &p[2 * k * b..(2 * k + 1) * b];
                let fk = &p[(2 * k + 1) * b..(2 * k + 2) * b];
                adversarial[*ti] = gan_value(real, fk, eps);
                for (j, &pj) in real.iter().enumerate() {
                    if clamp_grad(pj, eps) {
                        up[2 * k * b + j] = -inv_b / pj;
                    }
                }
                for (j, &pj) in fk.iter().enumerate() {
                    if clamp_grad(pj, eps) {
                        up[(2 * k + 1) * b + j] = inv_b / (1.0 - pj);
                    }
                }
            }
            let up = Tensor::from_raw(trace.output().shape().to_vec(), up);
            let grads = disc_of(&self.models, d).graph().backward(&trace, &up)?;
            if !finite(&grads.params) {
                return Err(Error::Diverged(format!("discriminator {d:?} gradient")));
            }
            disc_grads.push((d, grads.params));
        }
        if adversarial.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged("adversarial loss".into()));
        }
        Ok((adversarial, disc_grads))
    }

    /// Parameter gradients of the generator objective (non-saturating adversarial
    /// terms plus `lambda` times the cycle terms) for `G` and `F`.
    fn generator_gradients(
        &mut self,
        passes: &GenPasses,
        batch: &TripleBatch,
        config: &TrainConfig,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>, [f64; 6])> {
        let b = batch.len();
        let item = batch.x.item_len();
        let eps = config.eps_log;
        let terms = adversarial_terms(config.last_term);
        let fake = |t: &AdvTerm| -> Tensor {
            let src = if t.gen == Gen::G { passes.g_on.output() } else { passes.f_on.output() };
            rows(src, t.source, b)
        };
        let mut cycle = [0.0; 6];
        let mut g_out_grad = vec![0.0f32; passes.g_on.output().len()];
        let mut f_out_grad = vec![0.0f32; passes.f_on.output().len()];
        for d in [Disc::X, Disc::Y, Disc::Z] {
            let mine: Vec<&AdvTerm> = terms.iter().filter(|t| t.disc == d).collect();
            if mine.is_empty() {
                continue;
            }
            let fakes: Vec<Tensor> = mine.iter().map(|t| fake(t)).collect();
            let input = Tensor::concat(&fakes.iter().collect::<Vec<_>>())?;
            let trace = disc_of(&self.models, d).graph().trace(&input, Mode::Train, &mut self.rng)?;
            let p = trace.output().data();
            let inv_b = 1.0 / b as f32;
            let up: Vec<f32> = p
                .iter()
                .map(|&pj| if clamp_grad(pj, eps) { -inv_b / pj } else { 0.0 })
                .collect();
            let up = Tensor::from_raw(trace.output().shape().to_vec(), up);
            let gin = disc_of(&self.models, d).graph().backward(&trace, &up)?.input;
            for (k, t) in mine.iter().enumerate() {
                let g = &gin.data()[k * b * item..(k + 1) * b * item];
                let acc = if t.gen == Gen::G { &mut g_out_grad } else { &mut f_out_grad };
                add_rows(acc, t.source, item, b, g);
            }
        }

        let n_cyc = (b * item) as f32;
        let lambda = config.lambda;
        let mut fg_up = vec![0.0f32; passes.fg.output().len()];
        let mut gf_up = vec![0.0f32; passes.gf.output().len()];
        for (ci, (outer, _, d, _)) in CYCLE_TERMS.iter().enumerate() {
            let (rec, up) = if *outer == Gen::F {
                (passes.fg.output(), &mut fg_up)
            } else {
                (passes.gf.output(), &mut gf_up)
            };
            let start = d * b * item;
            let orig = domain(batch, *d).data();
            let rec = &rec.data()[start..start + b * item];
            let mut sum = 0.0f64;
            for ((u, &r), &o) in up[start..start + b * item].iter_mut().zip(rec).zip(orig) {
                let diff = r - o;
                sum += (diff as f64).abs();
                *u = lambda * sign(diff) / n_cyc;
            }
            cycle[ci] = sum / n_cyc as f64;
        }

        let g_graph = self.models.g.graph();
        let f_graph = self.models.f.graph();
        let fg = f_graph.backward(&passes.fg, &Tensor::from_raw(passes.fg.output().shape().to_vec(), fg_up))?;
        let gf = g_graph.backward(&passes.gf, &Tensor::from_raw(passes.gf.output().shape().to_vec(), gf_up))?;
        g_out_grad.iter_mut().zip(fg.input.data()).for_each(|(a, &v)| *a += v);
        f_out_grad.iter_mut().zip(gf.input.data()).for_each(|(a, &v)| *a += v);
        let g_main = g_graph.backward(&passes.g_on, &Tensor::from_raw(passes.g_on.output().shape().to_vec(), g_out_grad))?;
        let f_main = f_graph.backward(&passes.f_on, &Tensor::from_raw(passes.f_on.output().shape().to_vec(), f_out_grad))?;

        let sum_grads = |a: Vec<Tensor>, b: &[Tensor]| -> Vec<Tensor> {
            a.into_iter()
                .zip(b)
                .map(|(mut x, y)| {
                    x.data_mut().iter_mut().zip(y.data()).for_each(|(u, &v)| *u += v);
                    x
                })
                .collect()
        };
        let g_grads = sum_grads(g_main.params, &gf.params);
        let f_grads = sum_grads(f_main.params, &fg.params);
        Ok((g_grads, f_grads, cycle))
    }

    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint {
            models: self.models.clone(),
            meta: TrainingMeta {
                epochs: self.epoch as u32,
                seed: config.seed,
                lambda: config.lambda,
                last_term: config.last_term,
            },
        }
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLosses>,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }
}

/// Runs `epochs` passes of [`TrainState::train_step`] over the tri-domain.
///
/// `progress` is called after every epoch.
pub fn train(config: &TrainConfig, tri: &TriDomain, mut progress: impl FnMut(&EpochLosses)) -> Result<TrainOutcome> {
    config.validate()?;
    let shape = tri
        .image_shape()
        .ok_or_else(|| Error::invalid("training data is empty"))?;
    let mut state = TrainState::new(config, shape)?;
    let mut batcher = TripleBatcher::new(tri, config.batch_size, config.seed ^ 0x5851_F42D_4C95_7F2D)?;
    for _ in 0..config.epochs {
        let batches = batcher.next_epoch()?;
        let mut acc = StepLosses::default();
        for batch in &batches {
            let l = state.train_step(batch, config)?;
            for i in 0..6 {
                acc.adversarial[i] += l.adversarial[i];
                acc.cycle[i] += l.cycle[i];
            }
        }
        let n = batches.len() as f64;
        let adversarial = acc.adversarial.map(|v| v / n);
        let cycle = acc.cycle.map(|v| v / n);
        state.epoch += 1;
        let e = EpochLosses {
            epoch: state.epoch,
            adv_total: adversarial.iter().sum(),
            cyc_total: cycle.iter().sum(),
            adversarial,
            cycle,
        };
        state.history.push(e);
        progress(&e);
        if let (Some(every), Some(dir)) = (config.checkpoint_every, &config.checkpoint_dir) {
            if state.epoch % every == 0 {
                save_checkpoint(dir.join(format!("checkpoint_epoch{}.ccgn", state.epoch)), &state.checkpoint(config))?;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: state.checkpoint(config),
        history: state.history,
    })
}

/// `epoch, adv_total, cyc_total`, six adversarial terms, six cycle terms.
pub fn history_csv(history: &[EpochLosses]) -> String {
    let mut s = String::from("epoch,adv_total,cyc_total");
    for t in adversarial_terms(LastTermDiscriminator::AsPrinted) {
        s.push(',');
        s.push_str(t.name);
    }
    for (.., name) in CYCLE_TERMS {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for e in history {
        write!(s, "{},{:.9},{:.9}", e.epoch, e.adv_total, e.cyc_total).unwrap();
        for v in e.adversarial.iter().chain(&e.cycle) {
            write!(s, ",{v:.9}").unwrap();
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_tridomain;
    use rand::Rng;

    fn const_critic(p: f32) -> FnCritic<impl Fn(&Tensor) -> Result<Vec<f32>>> {
        FnCritic(move |t: &Tensor| Ok(vec![p; t.batch_len()]))
    }

    fn identity() -> FnMap<impl Fn(&Tensor) -> Result<Tensor>> {
        FnMap(|t: &Tensor| Ok(t.clone()))
    }

    fn shift(c: f32) -> FnMap<impl Fn(&Tensor) -> Result<Tensor>> {
        FnMap(move |t: &Tensor| Ok(Tensor::from_fn(t.shape(), |i| t.data()[i] + c)))
    }

    fn noise_batch(seed: u64, b: usize) -> TripleBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = || Tensor::from_fn(&[b, 8, 8, 1], |_| rng.gen_range(-1.0..1.0));
        TripleBatch { x: t(), y: t(), z: t() }
    }

    #[test]
    fn constant_discriminator_value() {
        let d = const_critic(0.5);
        let b = noise_batch(0, 3);
        let v = gan_loss(&d, &b.x, &b.y, 1e-7).unwrap();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((v + 1.3863).abs() < 1e-4);
    }

    #[test]
    fn perfect_discriminator_limit() {
        let eps = 1e-7f32;
        let real = FnCritic(move |t: &Tensor| Ok(vec![1.0 - eps; t.batch_len()]));
        let fake = FnCritic(move |t: &Tensor| Ok(vec![eps; t.batch_len()]));
        let b = noise_batch(1, 2);
        let pr = real.score(&b.x).unwrap();
        let pf = fake.score(&b.y).unwrap();
        let v = gan_value(&pr, &pf, eps);
        // 1 - 1e-7 is not representable in f32; the nearest value sits 1.9e-8 lower
        assert!((v + 2e-7).abs() < 3e-8, "{v}");
        assert!(v < 0.0);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let d = const_critic(0.5);
        let empty = Tensor::from_raw(vec![0, 8, 8, 1], vec![]);
        let b = noise_batch(0, 1);
        assert!(gan_loss(&d, &empty, &b.x, 1e-7).is_err());
    }

    #[test]
    fn constant_discriminators_give_six_times_log_quarter() {
        let (g, f) = (identity(), identity());
        let d = const_critic(0.5);
        let p = Players { g: &g, f: &f, d_x: &d, d_y: &d, d_z: &d };
        let br = adversarial_loss_total(&p, &noise_batch(2, 4), 1e-7, LastTermDiscriminator::AsPrinted).unwrap();
        assert!((br.total + 8.3178).abs() < 1e-4);
        assert_eq!(br.terms.iter().sum::<f64>(), br.total);
    }

    #[test]
    fn inverse_pairs_have_zero_cycle_loss() {
        let b = noise_batch(3, 4);
        let (i1, i2) = (identity(), identity());
        assert_eq!(cycle_loss(&i1, &i2, &b).unwrap().total, 0.0);
        // quarter-step shifts are exact in binary floating point
        let (up, down) = (shift(0.25), shift(-0.25));
        let b = TripleBatch {
            x: Tensor::from_fn(&[2, 8, 8, 1], |i| (i % 8) as f32 * 0.125),
            y: Tensor::full(&[2, 8, 8, 1], 0.5),
            z: Tensor::full(&[2, 8, 8, 1], -0.5),
        };
        let c = cycle_loss(&up, &down, &b).unwrap();
        assert_eq!(c.total, 0.0);
        let c = cycle_loss(&up, &up, &b).unwrap();
        assert!(c.terms.iter().all(|&t| (t - 0.5).abs() < 1e-7));
    }

    #[test]
    fn total_combines_with_lambda() {
        assert!((combine(-8.3178, 0.2, 10.0) + 6.3178).abs() < 1e-12);
        let (g, f) = (shift(0.1), shift(0.1));
        let d = const_critic(0.3);
        let p = Players { g: &g, f: &f, d_x: &d, d_y: &d, d_z: &d };
        let b = noise_batch(4, 2);
        let last = LastTermDiscriminator::AsPrinted;
        let r0 = total_loss(&p, &b, 0.0, 1e-7, last).unwrap();
        assert_eq!(r0.total, r0.adversarial.total);
        let r1 = total_loss(&p, &b, 3.0, 1e-7, last).unwrap();
        let r2 = total_loss(&p, &b, 6.0, 1e-7, last).unwrap();
        assert!(((r2.total - r1.total) - 3.0 * r1.cycle.total).abs() < 1e-12);
    }

    #[test]
    fn last_term_switch_changes_discriminator() {
        assert_eq!(adversarial_terms(LastTermDiscriminator::AsPrinted)[5].disc, Disc::X);
        assert_eq!(adversarial_terms(LastTermDiscriminator::FigureConsistent)[5].disc, Disc::Z);
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 5,
            arch: ArchConfig {
                base_channels: 4,
                n_resblocks: 1,
                n_downsamples: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut cfg = tiny_config();
        cfg.adam.learning_rate = 0.0;
        let mut state = TrainState::new(&cfg, [8, 8, 1]).unwrap();
        let before = state.models.clone();
        state.train_step(&noise_batch(5, 5), &cfg).unwrap();
        let bits = |m: &CycleModels| {
            m.named_tensors()
                .into_iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&before), bits(&state.models));
    }

    #[test]
    fn train_step_is_deterministic() {
        let cfg = tiny_config();
        let run = || {
            let mut s = TrainState::new(&cfg, [8, 8, 1]).unwrap();
            let l = s.train_step(&noise_batch(6, 5), &cfg).unwrap();
            (s, l)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn step_losses_match_value_kernels_without_dropout() {
        let mut cfg = tiny_config();
        cfg.arch.dropout_rate = 0.0;
        cfg.adam.learning_rate = 0.0;
        let mut s = TrainState::new(&cfg, [8, 8, 1]).unwrap();
        let batch = noise_batch(7, 5);
        let p = Players::from_models(&s.models);
        let want = total_loss(&p, &batch, cfg.lambda as f64, cfg.eps_log, cfg.last_term).unwrap();
        let got = s.train_step(&batch, &cfg).unwrap();
        for i in 0..6 {
            assert!((got.adversarial[i] - want.adversarial.terms[i]).abs() < 1e-5);
            assert!((got.cycle[i] - want.cycle.terms[i]).abs() < 1e-5);
        }
    }

    fn generator_objective(m: &CycleModels, batch: &TripleBatch, cfg: &TrainConfig) -> f64 {
        let p = Players::from_models(m);
        let mut adv = 0.0;
        for t in adversarial_terms(cfg.last_term) {
            let fake = p.gen(t.gen).apply(domain(batch, t.source)).unwrap();
            let s = p.disc(t.disc).score(&fake).unwrap();
            adv -= s.iter().map(|&q| clamp_prob(q, cfg.eps_log).ln()).sum::<f64>() / s.len() as f64;
        }
        adv + cfg.lambda as f64 * cycle_loss(p.g, p.f, batch).unwrap().total
    }

    #[test]
    fn generator_gradient_matches_directional_difference() {
        let mut cfg = tiny_config();
        cfg.arch.dropout_rate = 0.0;
        let mut s = TrainState::new(&cfg, [8, 8, 1]).unwrap();
        let batch = noise_batch(9, 3);
        let passes = s.generator_passes(&batch).unwrap();
        let (gg, fg, _) = s.generator_gradients(&passes, &batch, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dir_g: Vec<Vec<f32>> = gg.iter().map(|t| (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let dir_f: Vec<Vec<f32>> = fg.iter().map(|t| (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let analytic: f64 = gg
            .iter()
            .zip(&dir_g)
            .chain(fg.iter().zip(&dir_f))
            .map(|(g, d)| g.data().iter().zip(d).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>())
            .sum();
        let h = 1e-3f32;
        let shifted = |sign: f32| {
            let mut m = s.models.clone();
            for (p, d) in m.g.graph_mut().params_mut().iter_mut().zip(&dir_g) {
                p.data_mut().iter_mut().zip(d).for_each(|(w, &v)| *w += sign * h * v);
            }
            for (p, d) in m.f.graph_mut().params_mut().iter_mut().zip(&dir_f) {
                p.data_mut().iter_mut().zip(d).for_each(|(w, &v)| *w += sign * h * v);
            }
            generator_objective(&m, &batch, &cfg)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h as f64);
        let rel = (numeric - analytic).abs() / analytic.abs().max(1e-3);
        assert!(rel < 2e-2, "numeric {numeric} analytic {analytic}");
    }

    #[test]
    fn discriminator_gradient_matches_directional_difference() {
        let mut cfg = tiny_config();
        cfg.arch.dropout_rate = 0.0;
        let mut s = TrainState::new(&cfg, [8, 8, 1]).unwrap();
        let batch = noise_batch(11, 3);
        let passes = s.generator_passes(&batch).unwrap();
        let (_, grads) = s.discriminator_gradients(&passes, &batch, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut dirs = Vec::new();
        let mut analytic = 0.0f64;
        for (d, g) in &grads {
            let dir: Vec<Vec<f32>> = g.iter().map(|t| (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            analytic += g
                .iter()
                .zip(&dir)
                .map(|(g, v)| g.data().iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>())
                .sum::<f64>();
            dirs.push((*d, dir));
        }
        let h = 1e-3f32;
        let shifted = |sign: f32| {
            let mut m = s.models.clone();
            for (d, dir) in &dirs {
                let net = match d {
                    Disc::X => &mut m.d_x,
                    Disc::Y => &mut m.d_y,
                    Disc::Z => &mut m.d_z,
                };
                for (p, v) in net.graph_mut().params_mut().iter_mut().zip(dir) {
                    p.data_mut().iter_mut().zip(v).for_each(|(w, &u)| *w += sign * h * u);
                }
            }
            let mut fixed = Players::from_models(&m);
            fixed.g = &s.models.g;
            fixed.f = &s.models.f;
            -adversarial_loss_total(&fixed, &batch, cfg.eps_log, cfg.last_term).unwrap().total
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h as f64);
        let rel = (numeric - analytic).abs() / analytic.abs().max(1e-3);
        assert!(rel < 2e-2, "numeric {numeric} analytic {analytic}");
    }

    #[test]
    fn failed_step_preserves_state() {
        let cfg = tiny_config();
        let mut s = TrainState::new(&cfg, [8, 8, 1]).unwrap();
        let before = s.clone();
        let mut bad = noise_batch(8, 5);
        bad.y = bad.y.slice_batch(0, 3);
        assert!(s.train_step(&bad, &cfg).is_err());
        assert_eq!(s, before);
    }

    #[test]
    fn one_epoch_training_yields_loadable_checkpoint() {
        let (tri, _) = synth_tridomain(10, 0, 8, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.checkpoint_every = Some(1);
        cfg.checkpoint_dir = Some(dir.path().to_path_buf());
        let out = train(&cfg, &tri, |_| {}).unwrap();
        assert_eq!(out.history.len(), 1);
        let ck = crate::model::load_checkpoint(dir.path().join("checkpoint_epoch1.ccgn")).unwrap();
        assert_eq!(ck, out.checkpoint);
        let csv = out.history_csv();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 15);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.lambda = 0.0;
        assert!(c.validate().is_err());
        c = TrainConfig { eps_log: 1e-2, ..Default::default() };
        assert!(c.validate().is_err());
        c = TrainConfig { epochs: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
