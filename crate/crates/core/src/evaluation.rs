//! Generation-quality metrics: k-NN hypersphere manifolds with precision and
//! recall, pluggable feature embedders, a linear category probe for checking
//! cyclic translation, and a PCA projection for distribution plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::TriDomain;
use crate::dynamics::parallel_map;
use crate::error::{Error, Result};
use crate::model::DiscriminatorNet;
use crate::tensor::Tensor;
use crate::training::ImageMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Real,
    Generated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub vectors: Vec<Vec<f64>>,
    pub source: FeatureSource,
    pub embedder: String,
}

impl FeatureSet {
    pub fn new(vectors: Vec<Vec<f64>>, source: FeatureSource, embedder: impl Into<String>) -> Result<Self> {
        if let Some(first) = vectors.first() {
            let d = first.len();
            if let Some(i) = vectors.iter().position(|v| v.len() != d) {
                return Err(Error::shape(format!(
                    "feature vector {i} has dimension {}, expected {d}",
                    vectors[i].len()
                )));
            }
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vectors must be finite".into()));
        }
        Ok(Self {
            vectors,
            source,
            embedder: embedder.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }
}

pub enum Embedder<'a> {
    /// Row-major flattened pixels.
    Pixels,
    /// Post-pooling activations of a discriminator.
    DiscFeature { net: &'a DiscriminatorNet, name: String },
    /// Vectors stored in a CSV file, one per row, in image order.
    External(PathBuf),
}

impl Embedder<'_> {
    pub fn id(&self) -> String {
        match self {
            Embedder::Pixels => "pixels".into(),
            Embedder::DiscFeature { name, .. } => format!("disc_feature:{name}"),
            Embedder::External(p) => format!("external:{}", p.display()),
        }
    }
}

pub fn embed(images: &[Tensor], embedder: &Embedder<'_>, source: FeatureSource) -> Result<FeatureSet> {
    let vectors = match embedder {
        Embedder::Pixels => images
            .iter()
            .map(|t| t.data().iter().map(|&v| v as f64).collect())
            .collect(),
        Embedder::DiscFeature { net, .. } => {
            if images.is_empty() {
                Vec::new()
            } else {
                let f = net.features(&Tensor::stack(images)?)?;
                f.unstack().iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect()
            }
        }
        Embedder::External(path) => {
            let v = read_feature_csv(path)?;
            if !images.is_empty() && v.len() != images.len() {
                return Err(Error::Length(format!(
                    "{} holds {} feature rows for {} images",
                    path.display(),
                    v.len(),
                    images.len()
                )));
            }
            v
        }
    };
    FeatureSet::new(vectors, source, embedder.id())
}

pub fn parse_feature_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", ln + 1)))?;
        if let Some(first) = out.first() {
            if first.len() != row.len() {
                return Err(Error::Format(format!(
                    "line {}: {} columns, expected {}",
                    ln + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        out.push(row);
    }
    Ok(out)
}

pub fn read_feature_csv(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_csv(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn feature_csv(vectors: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for v in vectors {
        let row: Vec<String> = v.iter().map(|x| format!("{x:.9}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Hyperspheres around each base point reaching its `k`-th nearest other point.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldEstimate {
    pub base: Vec<Vec<f64>>,
    pub k: usize,
    pub radii: Vec<f64>,
    radii_sq: Vec<f64>,
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k + 1 > n {
        return Err(Error::invalid(format!("k = {k} needs 1 <= k <= {}", n.saturating_sub(1))));
    }
    Ok(())
}

/// Sorted squared distances from every point to every other point.
fn neighbour_table(base: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let idx: Vec<usize> = (0..base.len()).collect();
    parallel_map(&idx, |&i| {
        let mut d: Vec<f64> = base
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, q)| dist_sq(&base[i], q))
            .collect();
        d.sort_by(f64::total_cmp);
        d
    })
}

fn manifold_from_table(base: &[Vec<f64>], table: &[Vec<f64>], k: usize) -> ManifoldEstimate {
    let radii_sq: Vec<f64> = table.iter().map(|d| d[k - 1]).collect();
    ManifoldEstimate {
        base: base.to_vec(),
        k,
        radii: radii_sq.iter().map(|r| r.sqrt()).collect(),
        radii_sq,
    }
}

pub fn knn_radii(phi: &FeatureSet, k: usize) -> Result<ManifoldEstimate> {
    check_k(k, phi.len())?;
    Ok(manifold_from_table(&phi.vectors, &neighbour_table(&phi.vectors), k))
}

pub fn in_manifold(phi: &[f64], m: &ManifoldEstimate) -> bool {
    m.base.iter().zip(&m.radii_sq).any(|(b, &r)| dist_sq(phi, b) <= r)
}

fn coverage(queries: &[Vec<f64>], m: &ManifoldEstimate) -> f64 {
    let hits = parallel_map(queries, |q| in_manifold(q, m)).into_iter().filter(|&h| h).count();
    hits as f64 / queries.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PRResult {
    pub precision: f64,
    pub recall: f64,
    pub k: usize,
    pub n_real: usize,
    pub n_generated: usize,
}

fn check_pair(real: &FeatureSet, generated: &FeatureSet) -> Result<()> {
    if real.len() != generated.len() {
        return Err(Error::Length(format!(
            "real and generated sets must be equal in size ({} vs {})",
            real.len(),
            generated.len()
        )));
    }
    if real.dim() != generated.dim() {
        return Err(Error::shape(format!(
            "feature dimensions differ ({} vs {})",
            real.dim(),
            generated.dim()
        )));
    }
    Ok(())
}

/// Fraction of generated vectors inside the real manifold.
pub fn precision(real: &FeatureSet, generated: &FeatureSet, k: usize) -> Result<f64> {
    Ok(precision_recall(real, generated, k)?.precision)
}

/// Fraction of real vectors inside the generated manifold.
pub fn recall(real: &FeatureSet, generated: &FeatureSet, k: usize) -> Result<f64> {
    Ok(precision_recall(real, generated, k)?.recall)
}

pub fn precision_recall(real: &FeatureSet, generated: &FeatureSet, k: usize) -> Result<PRResult> {
    Ok(pr_vs_k(real, generated, &[k])?[0])
}

/// One row per `k`, sharing the neighbour tables across rows.
pub fn pr_vs_k(real: &FeatureSet, generated: &FeatureSet, ks: &[usize]) -> Result<Vec<PRResult>> {
    check_pair(real, generated)?;
    for &k in ks {
        check_k(k, real.len())?;
    }
    let rt = neighbour_table(&real.vectors);
    let gt = neighbour_table(&generated.vectors);
    Ok(ks
        .iter()
        .map(|&k| PRResult {
            precision: coverage(&generated.vectors, &manifold_from_table(&real.vectors, &rt, k)),
            recall: coverage(&real.vectors, &manifold_from_table(&generated.vectors, &gt, k)),
            k,
            n_real: real.len(),
            n_generated: generated.len(),
        })
        .collect())
}

/// The default sweep `1..=10`.
pub fn default_k_range() -> Vec<usize> {
    (1..=10).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPR {
    pub step: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Row `n` compares the `n`-fold image of the test set against the test set itself.
pub fn pr_vs_step(
    test_images: &[Tensor],
    g: &impl ImageMap,
    n_steps: usize,
    k: usize,
    embedder: &Embedder<'_>,
) -> Result<Vec<StepPR>> {
    if test_images.is_empty() {
        return Err(Error::invalid("pr_vs_step needs a non-empty test set"));
    }
    let real = embed(test_images, embedder, FeatureSource::Real)?;
    check_k(k, real.len())?;
    let mut rows = vec![StepPR {
        step: 0,
        precision: 1.0,
        recall: 1.0,
    }];
    let mut current = Tensor::stack(test_images)?;
    for step in 1..=n_steps {
        current = g.apply(&current)?;
        let generated = embed(&current.unstack(), embedder, FeatureSource::Generated)?;
        let r = precision_recall(&real, &generated, k)?;
        rows.push(StepPR {
            step,
            precision: r.precision,
            recall: r.recall,
        });
    }
    Ok(rows)
}

/// Mean and standard deviation of P/R across several generated sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PRStats {
    pub k: usize,
    pub precision_mean: f64,
    pub precision_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub n_sets: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Generated sets are single orbits `x_1 .. x_M` of `g`, `M` = test-set size,
/// started from each image in `initial`.
pub fn trajectory_pr_vs_k(
    test_images: &[Tensor],
    g: &impl ImageMap,
    initial: &[Tensor],
    ks: &[usize],
    embedder: &Embedder<'_>,
) -> Result<Vec<PRStats>> {
    if initial.is_empty() {
        return Err(Error::invalid("need at least one initial image"));
    }
    let real = embed(test_images, embedder, FeatureSource::Real)?;
    let m = test_images.len();
    // all orbits advance together as one batch
    let mut orbits: Vec<Vec<Tensor>> = vec![Vec::with_capacity(m); initial.len()];
    let mut x = Tensor::stack(initial)?;
    for _ in 0..m {
        x = g.apply(&x)?;
        orbits.iter_mut().zip(x.unstack()).for_each(|(o, t)| o.push(t));
    }
    let mut per_set: Vec<Vec<PRResult>> = Vec::with_capacity(initial.len());
    for orbit in &orbits {
        let generated = embed(orbit, embedder, FeatureSource::Generated)?;
        per_set.push(pr_vs_k(&real, &generated, ks)?);
    }
    Ok(ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let p: Vec<f64> = per_set.iter().map(|r| r[i].precision).collect();
            let r: Vec<f64> = per_set.iter().map(|r| r[i].recall).collect();
            let (pm, ps) = mean_std(&p);
            let (rm, rs) = mean_std(&r);
            PRStats {
                k,
                precision_mean: pm,
                precision_std: ps,
                recall_mean: rm,
                recall_std: rs,
                n_sets: per_set.len(),
            }
        })
        .collect())
}

trait ItemTensor {
    fn item_tensor(&self) -> Tensor;
}

impl ItemTensor for Tensor {
    /// The single item of a batch of one.
    fn item_tensor(&self) -> Tensor {
        self.unstack().swap_remove(0)
    }
}

pub fn pr_stats_csv(rows: &[PRStats]) -> String {
    let mut s = String::from("k,precision,recall,precision_std,recall_std\n");
    for r in rows {
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.k, r.precision_mean, r.recall_mean, r.precision_std, r.recall_std
        )
        .unwrap();
    }
    s
}

pub fn pr_k_csv(rows: &[PRResult]) -> String {
    let mut s = String::from("k,precision,recall\n");
    for r in rows {
        writeln!(s, "{},{:.6},{:.6}", r.k, r.precision, r.recall).unwrap();
    }
    s
}

pub fn pr_step_csv(rows: &[StepPR]) -> String {
    let mut s = String::from("step,precision,recall\n");
    for r in rows {
        writeln!(s, "{},{:.6},{:.6}", r.step, r.precision, r.recall).unwrap();
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    X,
    Y,
    Z,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::X, Category::Y, Category::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Successor under `X -> Y -> Z -> X`.
    pub fn next(self) -> Self {
        Self::ALL[(self.index() + 1) % 3]
    }

    pub fn name(self) -> &'static str {
        ["X", "Y", "Z"][self.index()]
    }
}

/// Multinomial logistic regression on pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryProbe {
    /// `[3, N]` row-major.
    weights: Vec<f64>,
    bias: [f64; 3],
    dim: usize,
    pub train_accuracy: f64,
    pub held_out_accuracy: Option<f64>,
}

const PROBE_EPOCHS: usize = 300;
const PROBE_RATE: f64 = 0.5;
const PROBE_L2: f64 = 1e-4;

fn labelled(tri: &TriDomain) -> (Vec<&Tensor>, Vec<usize>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (c, d) in tri.domains().iter().enumerate() {
        for img in &d.images {
            xs.push(img);
            ys.push(c);
        }
    }
    (xs, ys)
}

fn softmax(z: [f64; 3]) -> [f64; 3] {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

impl CategoryProbe {
    fn logits(&self, x: &[f32]) -> [f64; 3] {
        let mut z = self.bias;
        for (c, zc) in z.iter_mut().enumerate() {
            let w = &self.weights[c * self.dim..(c + 1) * self.dim];
            *zc += w.iter().zip(x).map(|(a, &b)| a * b as f64).sum::<f64>();
        }
        z
    }

    pub fn classify(&self, image: &Tensor) -> Result<Category> {
        if image.len() != self.dim {
            return Err(Error::shape(format!("probe expects {} pixels, got {}", self.dim, image.len())));
        }
        let z = self.logits(image.data());
        let best = (0..3).fold(0, |b, c| if z[c] > z[b] { c } else { b });
        Ok(Category::ALL[best])
    }

    pub fn accuracy(&self, tri: &TriDomain) -> Result<f64> {
        let (xs, ys) = labelled(tri);
        if xs.is_empty() {
            return Err(Error::invalid("accuracy needs labelled images"));
        }
        let mut hits = 0;
        for (x, &y) in xs.iter().zip(&ys) {
            hits += usize::from(self.classify(x)?.index() == y);
        }
        Ok(hits as f64 / xs.len() as f64)
    }
}

/// Full-batch gradient descent from zero weights; deterministic.
///
/// Fails when the probe cannot beat chance on its own training data.
pub fn train_probe(tri: &TriDomain, held_out: Option<&TriDomain>) -> Result<CategoryProbe> {
    let (xs, ys) = labelled(tri);
    if tri.domains().iter().any(|d| d.is_empty()) {
        return Err(Error::invalid("probe training needs images in all three domains"));
    }
    let dim = xs[0].len();
    let n = xs.len() as f64;
    let mut probe = CategoryProbe {
        weights: vec![0.0; 3 * dim],
        bias: [0.0; 3],
        dim,
        train_accuracy: 0.0,
        held_out_accuracy: None,
    };
    for _ in 0..PROBE_EPOCHS {
        let mut gw = vec![0.0; 3 * dim];
        let mut gb = [0.0; 3];
        for (x, &y) in xs.iter().zip(&ys) {
            let p = softmax(probe.logits(x.data()));
            for c in 0..3 {
                let err = p[c] - if c == y { 1.0 } else { 0.0 };
                gb[c] += err;
                for (g, &v) in gw[c * dim..(c + 1) * dim].iter_mut().zip(x.data()) {
                    *g += err * v as f64;
                }
            }
        }
        for (w, g) in probe.weights.iter_mut().zip(&gw) {
            *w -= PROBE_RATE * (g / n + PROBE_L2 * *w);
        }
        for (b, g) in probe.bias.iter_mut().zip(gb) {
            *b -= PROBE_RATE * g / n;
        }
    }
    probe.train_accuracy = probe.accuracy(tri)?;
    if probe.train_accuracy < 0.5 {
        return Err(Error::Diverged(format!(
            "category probe reached only {:.3} training accuracy",
            probe.train_accuracy
        )));
    }
    if let Some(h) = held_out {
        probe.held_out_accuracy = Some(probe.accuracy(h)?);
    }
    Ok(probe)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CyclicityReport {
    /// Category of each orbit state after the transient.
    pub labels: Vec<Category>,
    /// Fraction of consecutive pairs that advance `X -> Y -> Z -> X`.
    pub fraction: f64,
}

/// Classifies `x_{T+1} .. x_{T+n}` of the orbit of `g` from `x0`.
pub fn cyclicity(probe: &CategoryProbe, g: &impl ImageMap, x0: &Tensor, n_steps: usize, transient: usize) -> Result<CyclicityReport> {
    if n_steps < 2 {
        return Err(Error::invalid("cyclicity needs at least two recorded steps"));
    }
    let mut x = Tensor::stack(std::slice::from_ref(x0))?;
    for _ in 0..transient {
        x = g.apply(&x)?;
    }
    let mut labels = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        x = g.apply(&x)?;
        labels.push(probe.classify(&x.item_tensor())?);
    }
    let good = labels.windows(2).filter(|w| w[1] == w[0].next()).count();
    Ok(CyclicityReport {
        fraction: good as f64 / (labels.len() - 1) as f64,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// One `out_dim`-vector per input.
    pub points: Vec<Vec<f64>>,
    pub explained_ratio: Vec<f64>,
    /// Unit principal directions, one per output coordinate.
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Set when fewer than `out_dim` directions carry variance; the
    /// remaining coordinates are zero.
    pub rank_warning: Option<String>,
}

impl PcaProjection {
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(v).zip(&self.mean).map(|((a, b), m)| a * (b - m)).sum())
            .collect()
    }
}

/// Mean-centred projection onto the top principal directions, each signed so
/// its largest-magnitude entry is positive.
pub fn pca_project(vectors: &[Vec<f64>], out_dim: usize) -> Result<PcaProjection> {
    if out_dim == 0 {
        return Err(Error::invalid("out_dim must be positive"));
    }
    if vectors.len() < out_dim {
        return Err(Error::invalid(format!(
            "PCA to {out_dim} dimensions needs at least {out_dim} samples, got {}",
            vectors.len()
        )));
    }
    let set = FeatureSet::new(vectors.to_vec(), FeatureSource::Real, "pca")?;
    let d = set.dim();
    if out_dim > d {
        return Err(Error::invalid(format!("cannot project {d}-dimensional data to {out_dim} dimensions")));
    }
    let n = vectors.len();
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let centred = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = centred.transpose() * &centred / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = eig.eigenvalues.iter().filter(|&&v| v > 1e-12 * top.max(f64::MIN_POSITIVE)).count();
    let rank = if top <= 0.0 { 0 } else { rank };

    let mut components = Vec::with_capacity(out_dim);
    let mut explained_ratio = Vec::with_capacity(out_dim);
    for (slot, &c) in order.iter().take(out_dim).enumerate() {
        if slot >= rank {
            components.push(vec![0.0; d]);
            explained_ratio.push(0.0);
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().cloned().collect();
        let lead = v.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_ratio.push(eig.eigenvalues[c].max(0.0) / total);
    }
    let rank_warning = (rank < out_dim).then(|| format!("data has rank {rank} < {out_dim}; extra coordinates set to zero"));
    let mut p = PcaProjection {
        points: Vec::new(),
        explained_ratio,
        components,
        mean,
        rank_warning,
    };
    p.points = vectors.iter().map(|v| p.project(v)).collect();
    Ok(p)
}

/// `label,pc1,pc2,..` with one row per point.
pub fn pca_csv(points: &[Vec<f64>], labels: &[String]) -> String {
    let dims = points.first().map_or(0, Vec::len);
    let mut s = String::from("label");
    for i in 0..dims {
        write!(s, ",pc{}", i + 1).unwrap();
    }
    s.push('\n');
    for (p, l) in points.iter().zip(labels) {
        s.push_str(l);
        for v in p {
            write!(s, ",{v:.9}").unwrap();
        }
        s.push('\n');
    }
    s
}
