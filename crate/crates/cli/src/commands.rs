//! One function per subcommand; each resolves its configuration, runs the
//! library pipeline and writes its artifacts plus a manifest.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cyclechaos::data::{byte_to_pixel, load_idx, pixel_to_byte, select_tridomain, synth_tridomain, write_idx, LabeledImages, Split, TriDomain};
use cyclechaos::dynamics::{
    direct_divergence, divergence_csv, ensemble_csv, generator_map, henon, iterate, logistic, lyapunov_dimension,
    spectrum_csv, spectrum_ensemble, DynMap,
};
use cyclechaos::evaluation::{
    embed, feature_csv, pca_csv, pca_project, pr_k_csv, pr_stats_csv, pr_step_csv, pr_vs_k, pr_vs_step,
    trajectory_pr_vs_k, Embedder, FeatureSource,
};
use cyclechaos::model::{load_checkpoint, ArchConfig, Checkpoint, GeneratorNet, LastTermDiscriminator};
use cyclechaos::training::{history_csv, train, AdamConfig, ImageMap, TrainConfig, adversarial_terms};
use cyclechaos::Tensor;

use crate::config::{ConfigError, KeySpec, RunConfig};
use crate::manifest::Manifest;
use crate::pgm;
use crate::svg::{self, Series};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 1.
    Usage(String),
    /// Failure while running; exit code 2.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o: {e}"))
    }
}

trait Context<T> {
    fn ctx(self, what: &str) -> Result<T, CliError>;
}

impl<T> Context<T> for cyclechaos::Result<T> {
    fn ctx(self, what: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(format!("{what}: {e}")))
    }
}

pub type CmdResult = Result<(), CliError>;

const DATA_KEYS: &[KeySpec] = &[
    ("data", None),
    ("data_seed", Some("1")),
    ("synth_size", Some("16")),
    ("synth_train", Some("1000")),
    ("synth_test", Some("200")),
];

const MODEL_KEYS: &[KeySpec] = &[("checkpoint", None), ("generator", Some("G"))];

const BENCH_KEYS: &[KeySpec] = &[
    ("benchmark", None),
    ("henon_a", Some("1.4")),
    ("henon_b", Some("0.3")),
    ("logistic_r", Some("4")),
];

fn schema(parts: &[&[KeySpec]]) -> Vec<KeySpec> {
    let mut v: Vec<KeySpec> = vec![("seed", Some("1"))];
    for p in parts {
        v.extend_from_slice(p);
    }
    v
}

pub fn schema_for(command: &str) -> Option<Vec<KeySpec>> {
    Some(match command {
        "dataset" => schema(&[
            DATA_KEYS,
            &[
                ("source", Some("synth")),
                ("idx_train_images", None),
                ("idx_train_labels", None),
                ("idx_test_images", None),
                ("idx_test_labels", None),
                ("categories", Some("0,7,8")),
            ],
        ]),
        "train" => schema(&[
            DATA_KEYS,
            &[
                ("epochs", Some("300")),
                ("lambda", Some("10")),
                ("batch_size", Some("10")),
                ("learning_rate", Some("0.0002")),
                ("beta1", Some("0.5")),
                ("beta2", Some("0.999")),
                ("adam_epsilon", Some("1e-7")),
                ("eps_log", Some("1e-7")),
                ("base_channels", Some("16")),
                ("n_downsamples", Some("2")),
                ("n_resblocks", Some("4")),
                ("dropout_rate", Some("0.3")),
                ("leaky_slope", Some("0.2")),
                ("eq7_last_term_discriminator", Some("as_printed")),
                ("checkpoint_every", None),
            ],
        ]),
        "generate" => schema(&[DATA_KEYS, MODEL_KEYS, &[("steps", Some("10")), ("n_images", Some("3")), ("scale", Some("4"))]]),
        "lyapunov" => schema(&[
            DATA_KEYS,
            MODEL_KEYS,
            BENCH_KEYS,
            &[
                ("n_trajectories", Some("100")),
                ("transient", Some("500")),
                ("steps", Some("500")),
                ("m", None),
                ("histograms", Some("5")),
                ("bins", Some("20")),
            ],
        ]),
        "diverge" => schema(&[
            DATA_KEYS,
            MODEL_KEYS,
            BENCH_KEYS,
            &[("n_points", Some("100")), ("transient", Some("500")), ("steps", Some("40")), ("epsilon", Some("1e-5"))],
        ]),
        "pr" => schema(&[
            DATA_KEYS,
            MODEL_KEYS,
            &[
                ("embedder", Some("pixels")),
                ("features_real", None),
                ("features_generated", None),
                ("k_range", Some("1..10")),
                ("k", Some("7")),
                ("steps", Some("10")),
                ("n_initial", Some("100")),
            ],
        ]),
        "project" => schema(&[DATA_KEYS, MODEL_KEYS, &[("embedder", Some("pixels")), ("transient", Some("0"))]]),
        _ => return None,
    })
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub manifest: Manifest,
}

impl Ctx {
    pub fn new(cfg: RunConfig, out: PathBuf) -> Result<Self, CliError> {
        std::fs::create_dir_all(&out)?;
        let seed = cfg.get::<u64>("seed")?;
        let manifest = Manifest::new(cfg.command(), Some(seed), cfg.resolved());
        Ok(Self { cfg, out, manifest })
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> CmdResult {
        self.manifest.write(&self.out, name, bytes.as_ref())?;
        Ok(())
    }

    fn note(&mut self, line: String) {
        println!("{line}");
        self.manifest.notes.push(line);
    }

    pub fn finish(self) -> CmdResult {
        self.manifest.finish(&self.out)?;
        Ok(())
    }
}

const IDX_FILES: [&str; 4] = [
    "train-images.idx3-ubyte",
    "train-labels.idx1-ubyte",
    "test-images.idx3-ubyte",
    "test-labels.idx1-ubyte",
];

/// Train and test tri-domains: IDX files from a `dataset` run, or synthetic.
fn load_data(ctx: &mut Ctx) -> Result<(TriDomain, TriDomain), CliError> {
    let c = &ctx.cfg;
    if c.has("data") {
        let dir = c.path("data")?;
        let p: Vec<PathBuf> = IDX_FILES.iter().map(|f| dir.join(f)).collect();
        for f in &p {
            ctx.manifest.input(f).map_err(|e| CliError::Runtime(format!("{}: {e}", f.display())))?;
        }
        let train = load_idx(&p[0], &p[1], Split::Train).ctx("loading training data")?;
        let test = load_idx(&p[2], &p[3], Split::Test).ctx("loading test data")?;
        let tri = |s: &LabeledImages| select_tridomain(s, (0, 1, 2)).ctx("selecting categories");
        return Ok((tri(&train)?, tri(&test)?));
    }
    let size = c.get::<usize>("synth_size")?;
    synth_tridomain(c.get("synth_train")?, c.get("synth_test")?, size, c.get("data_seed")?).ctx("synthesising shapes")
}

fn relabel(tri: &TriDomain, split: Split) -> LabeledImages {
    let mut out = LabeledImages::empty(split);
    for (c, d) in tri.domains().iter().enumerate() {
        out.images.extend(d.images.iter().cloned());
        out.labels.extend(std::iter::repeat_n(c as u8, d.len()));
    }
    out
}

pub fn cmd_dataset(mut ctx: Ctx) -> CmdResult {
    let source = ctx.cfg.raw("source").unwrap_or("synth").to_string();
    let (train, test) = match source.as_str() {
        "synth" => load_data(&mut ctx)?,
        "idx" => {
            let cats = ctx.cfg.list_usize("categories")?;
            let cats: Vec<u8> = cats.into_iter().map(|c| c as u8).collect();
            if cats.len() != 3 {
                return Err(ctx.cfg.reject("categories", "expected three labels").into());
            }
            let mut load = |img: &str, lbl: &str, split| -> Result<TriDomain, CliError> {
                let (pi, pl) = (ctx.cfg.path(img)?, ctx.cfg.path(lbl)?);
                ctx.manifest.input(&pi)?;
                ctx.manifest.input(&pl)?;
                let set = load_idx(&pi, &pl, split).ctx("loading IDX")?;
                select_tridomain(&set, (cats[0], cats[1], cats[2])).ctx("selecting categories")
            };
            let train = load("idx_train_images", "idx_train_labels", Split::Train)?;
            let test = load("idx_test_images", "idx_test_labels", Split::Test)?;
            (train, test)
        }
        other => return Err(ctx.cfg.reject("source", format!("`{other}` is not synth or idx")).into()),
    };
    let sets = [relabel(&train, Split::Train), relabel(&test, Split::Test)];
    for (i, set) in sets.iter().enumerate() {
        let (img, lbl) = (ctx.out.join(IDX_FILES[2 * i]), ctx.out.join(IDX_FILES[2 * i + 1]));
        write_idx(set, &img, &lbl).ctx("writing IDX")?;
        let back = load_idx(&img, &lbl, set.split).ctx("re-reading IDX")?;
        let same = back.images.iter().zip(&set.images).all(|(a, b)| {
            a.data().iter().zip(b.data()).all(|(&u, &v)| u == byte_to_pixel(pixel_to_byte(v)))
        });
        if !same || back.images.len() != set.images.len() || back.labels != set.labels {
            return Err(CliError::Runtime("IDX round trip changed the data".into()));
        }
        for name in [IDX_FILES[2 * i], IDX_FILES[2 * i + 1]] {
            let bytes = std::fs::read(ctx.out.join(name))?;
            ctx.write(name, bytes)?;
        }
    }
    ctx.note(format!(
        "wrote {} training and {} test images; round trip verified",
        sets[0].len(),
        sets[1].len()
    ));
    ctx.finish()
}

fn parse_last_term(cfg: &RunConfig) -> Result<LastTermDiscriminator, CliError> {
    match cfg.raw("eq7_last_term_discriminator").unwrap_or("as_printed") {
        "as_printed" => Ok(LastTermDiscriminator::AsPrinted),
        "figure_consistent" => Ok(LastTermDiscriminator::FigureConsistent),
        v => Err(cfg.reject("eq7_last_term_discriminator", format!("`{v}` is not as_printed or figure_consistent")).into()),
    }
}

pub fn train_config(cfg: &RunConfig, out: &Path) -> Result<TrainConfig, CliError> {
    let every = cfg.get_opt::<usize>("checkpoint_every")?;
    let tc = TrainConfig {
        lambda: cfg.get("lambda")?,
        epochs: cfg.get("epochs")?,
        batch_size: cfg.get("batch_size")?,
        adam: AdamConfig {
            learning_rate: cfg.get("learning_rate")?,
            beta1: cfg.get("beta1")?,
            beta2: cfg.get("beta2")?,
            epsilon: cfg.get("adam_epsilon")?,
        },
        seed: cfg.get("seed")?,
        eps_log: cfg.get("eps_log")?,
        arch: ArchConfig {
            base_channels: cfg.get("base_channels")?,
            n_downsamples: cfg.get("n_downsamples")?,
            n_resblocks: cfg.get("n_resblocks")?,
            dropout_rate: cfg.get("dropout_rate")?,
            leaky_slope: cfg.get("leaky_slope")?,
        },
        last_term: parse_last_term(cfg)?,
        checkpoint_every: every,
        checkpoint_dir: every.map(|_| out.join("checkpoints")),
    };
    tc.validate().map_err(|e| CliError::Usage(format!("invalid training configuration: {e}")))?;
    Ok(tc)
}

pub fn cmd_train(mut ctx: Ctx) -> CmdResult {
    let tc = train_config(&ctx.cfg, &ctx.out)?;
    let (tri, _) = load_data(&mut ctx)?;
    if let Some(dir) = &tc.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let started = std::time::Instant::now();
    let outcome = train(&tc, &tri, |e| {
        eprintln!(
            "epoch {:>4}  adv {:>9.4}  cyc {:>7.4}  {:>7.1}s",
            e.epoch,
            e.adv_total,
            e.cyc_total,
            started.elapsed().as_secs_f64()
        )
    })
    .ctx("training")?;
    ctx.write("checkpoint.ccgn", outcome.checkpoint.to_bytes())?;
    let csv = history_csv(&outcome.history);
    ctx.write("losses.csv", &csv)?;
    let pts = |f: &dyn Fn(&cyclechaos::training::EpochLosses) -> f64| {
        outcome.history.iter().map(|e| (e.epoch as f64, f(e))).collect::<Vec<_>>()
    };
    let mut series = vec![Series::new("cycle total", pts(&|e| e.cyc_total))];
    for (i, t) in adversarial_terms(tc.last_term).iter().enumerate() {
        series.push(Series::new(t.name, pts(&|e| e.adversarial[i])).dashed());
    }
    ctx.write("losses.svg", svg::line_plot("Training losses", "epoch", "loss", &series))?;
    if let Some(dir) = &tc.checkpoint_dir {
        let mut names: Vec<String> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect();
        names.sort();
        for n in names {
            let bytes = std::fs::read(dir.join(&n))?;
            ctx.manifest.write(&ctx.out, &format!("checkpoints/{n}"), &bytes)?;
        }
    }
    let last = outcome.history.last().expect("at least one epoch");
    ctx.note(format!(
        "{} epochs; final adversarial {:.4}, cycle {:.4}",
        last.epoch, last.adv_total, last.cyc_total
    ));
    ctx.finish()
}

fn load_model(ctx: &mut Ctx) -> Result<Checkpoint, CliError> {
    let p = ctx.cfg.path("checkpoint")?;
    ctx.manifest.input(&p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
    load_checkpoint(&p).ctx("loading checkpoint")
}

fn pick_generator<'a>(cfg: &RunConfig, ck: &'a Checkpoint) -> Result<&'a GeneratorNet, CliError> {
    match cfg.raw("generator").unwrap_or("G") {
        "G" => Ok(&ck.models.g),
        "F" => Ok(&ck.models.f),
        v => Err(cfg.reject("generator", format!("`{v}` is not G or F")).into()),
    }
}

/// `n` test images cycling through the three domains.
fn initial_images(test: &TriDomain, n: usize) -> Vec<Tensor> {
    let d = test.domains();
    (0..n)
        .filter_map(|i| {
            let dom = d[i % 3];
            (!dom.is_empty()).then(|| dom.images[(i / 3) % dom.len()].clone())
        })
        .collect()
}

struct Identity;

impl ImageMap for Identity {
    fn apply(&self, batch: &Tensor) -> cyclechaos::Result<Tensor> {
        Ok(batch.clone())
    }
}

pub fn cmd_generate(mut ctx: Ctx) -> CmdResult {
    let steps: usize = ctx.cfg.get("steps")?;
    let n: usize = ctx.cfg.get("n_images")?;
    let scale: usize = ctx.cfg.get("scale")?;
    let (_, test) = load_data(&mut ctx)?;
    let ck;
    let map: &dyn ImageMap = if ctx.cfg.raw("generator") == Some("identity") {
        &Identity
    } else {
        ck = load_model(&mut ctx)?;
        pick_generator(&ctx.cfg, &ck)?
    };
    let starts = initial_images(&test, n);
    let mut rows = Vec::new();
    for (r, x0) in starts.iter().enumerate() {
        let mut row = vec![x0.clone()];
        let mut x = Tensor::stack(std::slice::from_ref(x0)).ctx("batching")?;
        for _ in 0..steps {
            x = map.apply(&x).ctx("generator step")?;
            row.push(x.unstack().swap_remove(0));
        }
        for (s, img) in row.iter().enumerate() {
            ctx.write(&format!("frames/row{r}_step{s:03}.pgm"), pgm::encode(img))?;
        }
        rows.push(row);
    }
    ctx.write("grid.pgm", pgm::encode_grid(&rows))?;
    ctx.write("grid.svg", svg::image_grid(&rows, scale))?;
    ctx.note(format!("{} rows × {} columns; leftmost column holds the initial images", rows.len(), steps + 1));
    ctx.finish()
}

enum Source<'a> {
    Generator(cyclechaos::dynamics::GeneratorMap<'a>),
    Henon(cyclechaos::dynamics::Henon),
    Logistic(cyclechaos::dynamics::Logistic),
}

impl Source<'_> {
    fn map(&self) -> &dyn DynMap {
        match self {
            Source::Generator(g) => g,
            Source::Henon(h) => h,
            Source::Logistic(l) => l,
        }
    }
}

/// Either a benchmark map with seeded starting points, or the checkpoint's
/// generator started from test images.
fn dynamics_source<'a>(ctx: &mut Ctx, ck: &'a Option<Checkpoint>, n: usize) -> Result<(Source<'a>, Vec<Vec<f64>>), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.get("seed")?);
    if let Some(b) = ctx.cfg.raw("benchmark").map(str::to_string) {
        return match b.as_str() {
            "henon" => {
                let h = henon(ctx.cfg.get("henon_a")?, ctx.cfg.get("henon_b")?).ctx("henon")?;
                let pts = (0..n).map(|_| vec![rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)]).collect();
                Ok((Source::Henon(h), pts))
            }
            "logistic" => {
                let l = logistic(ctx.cfg.get("logistic_r")?).ctx("logistic")?;
                let pts = (0..n).map(|_| vec![rng.gen_range(0.05..0.95)]).collect();
                Ok((Source::Logistic(l), pts))
            }
            other => Err(ctx.cfg.reject("benchmark", format!("`{other}` is not henon or logistic")).into()),
        };
    }
    let Some(ck) = ck else {
        return Err(CliError::Usage("either `checkpoint` or `benchmark` must be set".into()));
    };
    let (_, test) = load_data(ctx)?;
    let g = generator_map(pick_generator(&ctx.cfg, ck)?);
    let pool = test.union().images;
    if pool.is_empty() {
        return Err(CliError::Runtime("test set is empty".into()));
    }
    let stride = (pool.len() / n.max(1)).max(1);
    let pts = (0..n)
        .map(|i| g.flatten(&pool[(i * stride) % pool.len()]))
        .collect::<cyclechaos::Result<Vec<_>>>()
        .ctx("flattening")?;
    Ok((Source::Generator(g), pts))
}

fn maybe_checkpoint(ctx: &mut Ctx) -> Result<Option<Checkpoint>, CliError> {
    if ctx.cfg.has("benchmark") {
        return Ok(None);
    }
    if !ctx.cfg.has("checkpoint") {
        return Err(CliError::Usage("either `checkpoint` or `benchmark` must be set".into()));
    }
    load_model(ctx).map(Some)
}

pub fn cmd_lyapunov(mut ctx: Ctx) -> CmdResult {
    let n: usize = ctx.cfg.get("n_trajectories")?;
    let transient: usize = ctx.cfg.get("transient")?;
    let steps: usize = ctx.cfg.get("steps")?;
    let ck = maybe_checkpoint(&mut ctx)?;
    let (src, starts) = dynamics_source(&mut ctx, &ck, n)?;
    let map = src.map();
    let m = ctx.cfg.get_opt::<usize>("m")?.unwrap_or(map.dim().min(32));
    if m == 0 || m > map.dim() {
        return Err(ctx.cfg.reject("m", format!("must lie in 1..={}", map.dim())).into());
    }
    let e = spectrum_ensemble(map, &starts, transient, steps, m).ctx("spectrum ensemble")?;
    ctx.write("spectrum.csv", spectrum_csv(&e.mean))?;
    ctx.write("ensemble.csv", ensemble_csv(&e))?;
    let pts: Vec<(f64, f64)> = e.mean.iter().enumerate().map(|(i, v)| ((i + 1) as f64, *v)).collect();
    ctx.write(
        "spectrum.svg",
        svg::line_plot("Lyapunov spectrum", "index", "exponent", &[Series::new("mean", pts), Series::new("zero", vec![(1.0, 0.0), (m as f64, 0.0)]).dashed()]),
    )?;
    let bins: usize = ctx.cfg.get("bins")?;
    for i in 0..ctx.cfg.get::<usize>("histograms")?.min(m) {
        let title = format!("Histogram of exponent {}", i + 1);
        ctx.write(&format!("hist_lambda{}.svg", i + 1), svg::histogram(&title, "exponent", &e.exponent_samples(i), bins))?;
    }
    ctx.note(format!("lambda_1 = {:.6} +- {:.6} over {} trajectories", e.mean[0], e.std_dev[0], e.per_trajectory.len()));
    ctx.note(format!("sum of exponents = {:.6}", e.mean.iter().sum::<f64>()));
    match lyapunov_dimension(&e.mean) {
        Ok(d) if d.saturated => ctx.note(format!("D_L >= {:.4} (all {m} partial sums non-negative)", d.value)),
        Ok(d) => ctx.note(format!("D_L = {:.4}", d.value)),
        Err(err) => ctx.note(format!("D_L unavailable: {err}")),
    }
    for (i, why) in &e.failures {
        ctx.note(format!("trajectory {i} excluded: {why}"));
    }
    ctx.finish()
}

pub fn cmd_diverge(mut ctx: Ctx) -> CmdResult {
    let n: usize = ctx.cfg.get("n_points")?;
    let transient: usize = ctx.cfg.get("transient")?;
    let steps: usize = ctx.cfg.get("steps")?;
    let eps: f64 = ctx.cfg.get("epsilon")?;
    let ck = maybe_checkpoint(&mut ctx)?;
    let (src, starts) = dynamics_source(&mut ctx, &ck, n)?;
    let map = src.map();
    let base = starts
        .iter()
        .map(|x0| {
            if transient == 0 {
                Ok(x0.clone())
            } else {
                iterate(map, x0, 1, transient - 1).map(|t| t.states[0].clone())
            }
        })
        .collect::<cyclechaos::Result<Vec<_>>>()
        .ctx("transient")?;
    let c = direct_divergence(map, &base, eps, steps).ctx("direct divergence")?;
    ctx.write("divergence.csv", divergence_csv(&c))?;
    let curve: Vec<(f64, f64)> = c.mean_log.iter().enumerate().map(|(i, v)| (i as f64, *v)).collect();
    let fit: Vec<(f64, f64)> = [c.window.0, c.window.1 - 1]
        .iter()
        .map(|&i| (i as f64, c.intercept + c.slope * i as f64))
        .collect();
    ctx.write(
        "divergence.svg",
        svg::line_plot(
            "Mean log separation",
            "step",
            "mean ln d",
            &[Series::new("mean ln d", curve), Series::new(format!("fit, slope {:.4}", c.slope), fit).dashed()],
        ),
    )?;
    ctx.note(format!(
        "slope = {:.6} over steps {}..{} ({} pairs, {} skipped)",
        c.slope,
        c.window.0,
        c.window.1,
        c.pairs.len(),
        c.skipped.len()
    ));
    ctx.finish()
}

fn embedder<'a>(cfg: &RunConfig, ck: Option<&'a Checkpoint>) -> Result<Embedder<'a>, CliError> {
    let name = cfg.raw("embedder").unwrap_or("pixels");
    let disc = |which: &str| -> Result<Embedder<'a>, CliError> {
        let ck = ck.ok_or_else(|| CliError::Usage("discriminator features need a checkpoint".into()))?;
        let net = match which {
            "disc_x" => &ck.models.d_x,
            "disc_y" => &ck.models.d_y,
            _ => &ck.models.d_z,
        };
        Ok(Embedder::DiscFeature {
            net,
            name: which.to_string(),
        })
    };
    match name {
        "pixels" => Ok(Embedder::Pixels),
        "disc_x" | "disc_y" | "disc_z" => disc(name),
        other => Err(cfg.reject("embedder", format!("`{other}` is not pixels, disc_x, disc_y, disc_z or external")).into()),
    }
}

fn pr_plot(title: &str, x: &str, rows: &[(f64, f64, f64)]) -> String {
    let p = rows.iter().map(|r| (r.0, r.1)).collect();
    let q = rows.iter().map(|r| (r.0, r.2)).collect();
    svg::line_plot(title, x, "value", &[Series::new("precision", p), Series::new("recall", q)])
}

pub fn cmd_pr(mut ctx: Ctx) -> CmdResult {
    let ks = ctx.cfg.list_usize("k_range")?;
    if ctx.cfg.raw("embedder") == Some("external") {
        let (pr, pg) = (ctx.cfg.path("features_real")?, ctx.cfg.path("features_generated")?);
        ctx.manifest.input(&pr)?;
        ctx.manifest.input(&pg)?;
        let real = embed(&[], &Embedder::External(pr), FeatureSource::Real).ctx("real features")?;
        let generated = embed(&[], &Embedder::External(pg), FeatureSource::Generated).ctx("generated features")?;
        let rows = pr_vs_k(&real, &generated, &ks).ctx("precision/recall")?;
        ctx.write("pr_vs_k.csv", pr_k_csv(&rows))?;
        let pts: Vec<_> = rows.iter().map(|r| (r.k as f64, r.precision, r.recall)).collect();
        ctx.write("pr_vs_k.svg", pr_plot("Precision and recall vs k", "k", &pts))?;
        return ctx.finish();
    }
    let k: usize = ctx.cfg.get("k")?;
    let steps: usize = ctx.cfg.get("steps")?;
    let n_initial: usize = ctx.cfg.get("n_initial")?;
    let ck = load_model(&mut ctx)?;
    let (_, test) = load_data(&mut ctx)?;
    let g = pick_generator(&ctx.cfg, &ck)?;
    let emb = embedder(&ctx.cfg, Some(&ck))?;
    let images = test.union().images;
    let init = initial_images(&test, n_initial);
    let rows = trajectory_pr_vs_k(&images, g, &init, &ks, &emb).ctx("precision/recall vs k")?;
    ctx.write("pr_vs_k.csv", pr_stats_csv(&rows))?;
    let pts: Vec<_> = rows.iter().map(|r| (r.k as f64, r.precision_mean, r.recall_mean)).collect();
    ctx.write("pr_vs_k.svg", pr_plot("Precision and recall vs k", "k", &pts))?;
    let st = pr_vs_step(&images, g, steps, k, &emb).ctx("precision/recall vs step")?;
    ctx.write("pr_vs_step.csv", pr_step_csv(&st))?;
    let pts: Vec<_> = st.iter().map(|r| (r.step as f64, r.precision, r.recall)).collect();
    ctx.write("pr_vs_step.svg", pr_plot("Precision and recall vs step", "step", &pts))?;
    ctx.finish()
}

pub fn cmd_project(mut ctx: Ctx) -> CmdResult {
    let transient: usize = ctx.cfg.get("transient")?;
    let ck = load_model(&mut ctx)?;
    let (train, _) = load_data(&mut ctx)?;
    let g = pick_generator(&ctx.cfg, &ck)?;
    let emb = embedder(&ctx.cfg, Some(&ck))?;
    let real_imgs = train.union();
    let n = real_imgs.len();
    let mut x = Tensor::stack(&initial_images(&train, 1)).ctx("batching")?;
    for _ in 0..transient {
        x = g.apply(&x).ctx("generator step")?;
    }
    let mut orbit = Vec::with_capacity(n);
    for _ in 0..n {
        x = g.apply(&x).ctx("generator step")?;
        orbit.push(x.unstack().swap_remove(0));
    }
    let real = embed(&real_imgs.images, &emb, FeatureSource::Real).ctx("embedding training images")?;
    let generated = embed(&orbit, &emb, FeatureSource::Generated).ctx("embedding orbit")?;
    let mut all = real.vectors.clone();
    all.extend(generated.vectors.iter().cloned());
    let p = pca_project(&all, 2).ctx("PCA")?;
    let names = ["X", "Y", "Z"];
    let mut labels: Vec<String> = real_imgs.labels.iter().map(|&l| format!("train_{}", names[l as usize % 3])).collect();
    labels.extend(std::iter::repeat_n("generated".to_string(), orbit.len()));
    ctx.write("pca.csv", pca_csv(&p.points, &labels))?;
    let mut groups = Vec::new();
    for name in ["train_X", "train_Y", "train_Z", "generated"] {
        let pts = p.points.iter().zip(&labels).filter(|(_, l)| *l == name).map(|(q, _)| (q[0], q[1])).collect();
        groups.push(Series::new(name, pts));
    }
    ctx.write("pca.svg", svg::scatter_plot("PCA of training images and orbit", "pc1", "pc2", &groups))?;
    ctx.write("vectors_real.csv", feature_csv(&real.vectors))?;
    ctx.write("vectors_generated.csv", feature_csv(&generated.vectors))?;
    ctx.note(format!(
        "explained variance ratios: {}",
        p.explained_ratio.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
    ));
    if let Some(w) = &p.rank_warning {
        ctx.note(format!("warning: {w}"));
    }
    ctx.finish()
}
