//! Self-maps as discrete-time dynamical systems: orbits, Lyapunov spectra by
//! tangent propagation with Gram–Schmidt reorthonormalisation, the Lyapunov
//! dimension, and direct divergence of nearby trajectories.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::GeneratorNet;
use crate::tensor::{jacobian, Tensor, DEFAULT_JACOBIAN_CAP};

/// A map `R^N -> R^N` with its derivative.
pub trait DynMap: Sync {
    fn dim(&self) -> usize;

    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Row-major `N x N` Jacobian at `x`.
    fn jacobian_at(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// `J(x) v` for each `v`.
    fn tangent_map(&self, x: &[f64], vs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let n = self.dim();
        let j = self.jacobian_at(x)?;
        Ok(vs
            .iter()
            .map(|v| (0..n).map(|r| j[r * n..(r + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum()).collect())
            .collect())
    }

    /// `(f(x), J(x) v ..)` in one call; maps with a fused forward-mode pass override this.
    fn step_with_tangents(&self, x: &[f64], vs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        Ok((self.evaluate(x)?, self.tangent_map(x, vs)?))
    }
}

fn check_dim(map: &dyn DynMap, x: &[f64]) -> Result<()> {
    if x.len() != map.dim() {
        return Err(Error::shape(format!("state has dimension {}, map expects {}", x.len(), map.dim())));
    }
    Ok(())
}

/// The Hénon map `(x, y) -> (1 - a x^2 + y, b x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Henon {
    pub a: f64,
    pub b: f64,
}

pub fn henon(a: f64, b: f64) -> Result<Henon> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::invalid("Hénon parameters must be finite"));
    }
    Ok(Henon { a, b })
}

impl DynMap for Henon {
    fn dim(&self) -> usize {
        2
    }

    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self, x)?;
        Ok(vec![1.0 - self.a * x[0] * x[0] + x[1], self.b * x[0]])
    }

    fn jacobian_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self, x)?;
        Ok(vec![-2.0 * self.a * x[0], 1.0, self.b, 0.0])
    }
}

/// The logistic map `x -> r x (1 - x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Logistic {
    pub r: f64,
}

pub fn logistic(r: f64) -> Result<Logistic> {
    if !r.is_finite() {
        return Err(Error::invalid("logistic parameter must be finite"));
    }
    Ok(Logistic { r })
}

impl DynMap for Logistic {
    fn dim(&self) -> usize {
        1
    }

    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self, x)?;
        Ok(vec![self.r * x[0] * (1.0 - x[0])])
    }

    fn jacobian_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self, x)?;
        Ok(vec![self.r * (1.0 - 2.0 * x[0])])
    }
}

/// A generator viewed as a map on flattened images.
///
/// The network runs in 32-bit; states are widened to `f64` after every step
/// so an orbit is reproducible from its stored states.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorMap<'a> {
    net: &'a GeneratorNet,
    jacobian_cap: usize,
}

pub fn generator_map(net: &GeneratorNet) -> GeneratorMap<'_> {
    GeneratorMap {
        net,
        jacobian_cap: DEFAULT_JACOBIAN_CAP,
    }
}

impl<'a> GeneratorMap<'a> {
    pub fn with_jacobian_cap(mut self, cap: usize) -> Self {
        self.jacobian_cap = cap;
        self
    }

    pub fn net(&self) -> &'a GeneratorNet {
        self.net
    }

    pub fn flatten(&self, image: &Tensor) -> Result<Vec<f64>> {
        if image.shape() != self.net.image_shape() {
            return Err(Error::shape(format!(
                "image shape {:?} does not match generator {:?}",
                image.shape(),
                self.net.image_shape()
            )));
        }
        Ok(image.data().iter().map(|&v| v as f64).collect())
    }

    pub fn unflatten(&self, x: &[f64]) -> Result<Tensor> {
        check_dim(self, x)?;
        Tensor::new(self.net.image_shape().to_vec(), x.iter().map(|&v| v as f32).collect())
    }
}

impl DynMap for GeneratorMap<'_> {
    fn dim(&self) -> usize {
        self.net.image_shape().iter().product()
    }

    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        let out = self.net.infer(&self.unflatten(x)?)?;
        Ok(out.data().iter().map(|&v| v as f64).collect())
    }

    fn jacobian_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        let j = jacobian(self.net.graph(), &self.unflatten(x)?, self.jacobian_cap)?;
        Ok(j.data.iter().map(|&v| v as f64).collect())
    }

    fn tangent_map(&self, x: &[f64], vs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.step_with_tangents(x, vs)?.1)
    }

    fn step_with_tangents(&self, x: &[f64], vs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let n = self.dim();
        if vs.iter().any(|v| v.len() != n) {
            return Err(Error::shape("tangent vectors must match the state dimension"));
        }
        let mut shape = vec![vs.len()];
        shape.extend_from_slice(&self.net.image_shape());
        let tangents = Tensor::new(shape, vs.iter().flatten().map(|&v| v as f32).collect())?;
        let (out, tout) = self.net.graph().jvp(&self.unflatten(x)?, &tangents)?;
        let out = out.data().iter().map(|&v| v as f64).collect();
        let tout = tout.data().chunks(n).map(|c| c.iter().map(|&v| v as f64).collect()).collect();
        Ok((out, tout))
    }
}

/// States `f^{T+1}(x0) .. f^{T+n}(x0)` after discarding `T` transient steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub transient_skipped: usize,
}

fn step_checked(map: &dyn DynMap, x: &[f64], step: usize) -> Result<Vec<f64>> {
    let y = map.evaluate(x)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("state became non-finite at step {step}")));
    }
    Ok(y)
}

pub fn iterate(map: &dyn DynMap, x0: &[f64], n_steps: usize, n_transient: usize) -> Result<Trajectory> {
    check_dim(map, x0)?;
    let mut x = x0.to_vec();
    for k in 0..n_transient {
        x = step_checked(map, &x, k + 1)?;
    }
    let mut states = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        x = step_checked(map, &x, n_transient + k + 1)?;
        states.push(x.clone());
    }
    Ok(Trajectory {
        states,
        transient_skipped: n_transient,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovSpectrum {
    /// Descending.
    pub exponents: Vec<f64>,
    pub n_steps: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Modified Gram–Schmidt in place; returns the normalisation factors.
/// `Err(i)` names the first direction whose norm vanished.
pub fn gram_schmidt(vs: &mut [Vec<f64>]) -> std::result::Result<Vec<f64>, usize> {
    let mut r = Vec::with_capacity(vs.len());
    for i in 0..vs.len() {
        let (done, rest) = vs.split_at_mut(i);
        let v = &mut rest[0];
        for q in done.iter() {
            let p = dot(v, q);
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
        }
        let norm = dot(v, v).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(i);
        }
        v.iter_mut().for_each(|a| *a /= norm);
        r.push(norm);
    }
    Ok(r)
}

/// The first `m` standard basis vectors of `R^n`.
pub fn standard_basis(n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            e
        })
        .collect()
}

pub fn lyapunov_spectrum(
    map: &dyn DynMap,
    x0: &[f64],
    n_transient: usize,
    n_steps: usize,
    m: usize,
) -> Result<LyapunovSpectrum> {
    if m > map.dim() {
        return Err(Error::invalid(format!("{m} exponents requested from a {}-dimensional map", map.dim())));
    }
    lyapunov_spectrum_with_basis(map, x0, n_transient, n_steps, standard_basis(map.dim(), m))
}

/// As [`lyapunov_spectrum`] but starting from the given tangent vectors,
/// which are orthonormalised first.
pub fn lyapunov_spectrum_with_basis(
    map: &dyn DynMap,
    x0: &[f64],
    n_transient: usize,
    n_steps: usize,
    mut basis: Vec<Vec<f64>>,
) -> Result<LyapunovSpectrum> {
    check_dim(map, x0)?;
    let m = basis.len();
    if m == 0 || m > map.dim() || basis.iter().any(|v| v.len() != map.dim()) {
        return Err(Error::invalid(format!(
            "tangent basis must hold 1..={} vectors of that dimension",
            map.dim()
        )));
    }
    if n_steps == 0 {
        return Err(Error::invalid("spectrum needs at least one step"));
    }
    gram_schmidt(&mut basis).map_err(|direction| Error::RankCollapse { step: 0, direction })?;
    let mut x = x0.to_vec();
    for k in 0..n_transient {
        x = step_checked(map, &x, k + 1)?;
    }
    let mut sums = vec![0.0; m];
    for k in 0..n_steps {
        let step = n_transient + k + 1;
        let (next, mut vs) = map.step_with_tangents(&x, &basis)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("state became non-finite at step {step}")));
        }
        let r = gram_schmidt(&mut vs).map_err(|direction| Error::RankCollapse { step, direction })?;
        sums.iter_mut().zip(&r).for_each(|(s, ri)| *s += ri.ln());
        basis = vs;
        x = next;
    }
    let mut exponents: Vec<f64> = sums.iter().map(|s| s / n_steps as f64).collect();
    exponents.sort_by(|a, b| b.total_cmp(a));
    Ok(LyapunovSpectrum { exponents, n_steps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumEnsemble {
    pub mean: Vec<f64>,
    /// Sample standard deviation per exponent (zero for a single trajectory).
    pub std_dev: Vec<f64>,
    /// `(input index, spectrum)` for every successful trajectory, in input order.
    pub per_trajectory: Vec<(usize, LyapunovSpectrum)>,
    /// `(input index, reason)` for excluded trajectories.
    pub failures: Vec<(usize, String)>,
}

impl SpectrumEnsemble {
    /// Values of exponent `i` across trajectories.
    pub fn exponent_samples(&self, i: usize) -> Vec<f64> {
        self.per_trajectory.iter().map(|(_, s)| s.exponents[i]).collect()
    }
}

/// Runs `f` over `items` on all available cores, preserving input order.
pub(crate) fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

pub fn spectrum_ensemble(
    map: &dyn DynMap,
    initial_set: &[Vec<f64>],
    n_transient: usize,
    n_steps: usize,
    m: usize,
) -> Result<SpectrumEnsemble> {
    if initial_set.is_empty() {
        return Err(Error::invalid("spectrum ensemble needs at least one initial point"));
    }
    if m == 0 || m > map.dim() {
        return Err(Error::invalid(format!("{m} exponents requested from a {}-dimensional map", map.dim())));
    }
    let results = parallel_map(initial_set, |x0| lyapunov_spectrum(map, x0, n_transient, n_steps, m));
    let mut per_trajectory = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => per_trajectory.push((i, s)),
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    if per_trajectory.is_empty() {
        return Err(Error::Diverged(format!(
            "all {} trajectories failed; first: {}",
            failures.len(),
            failures[0].1
        )));
    }
    let n = per_trajectory.len() as f64;
    let mut mean = vec![0.0; m];
    for (_, s) in &per_trajectory {
        mean.iter_mut().zip(&s.exponents).for_each(|(a, v)| *a += v / n);
    }
    let std_dev = (0..m)
        .map(|i| {
            if per_trajectory.len() < 2 {
                return 0.0;
            }
            let ss: f64 = per_trajectory.iter().map(|(_, s)| (s.exponents[i] - mean[i]).powi(2)).sum();
            (ss / (n - 1.0)).sqrt()
        })
        .collect();
    Ok(SpectrumEnsemble {
        mean,
        std_dev,
        per_trajectory,
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovDimension {
    pub value: f64,
    /// Every partial sum was non-negative, so `value` is only a lower bound.
    pub saturated: bool,
}

pub fn lyapunov_dimension(exponents: &[f64]) -> Result<LyapunovDimension> {
    if exponents.is_empty() {
        return Err(Error::invalid("empty spectrum"));
    }
    if exponents.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spectrum contains non-finite exponents".into()));
    }
    if exponents.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::invalid("spectrum must be sorted in descending order"));
    }
    if exponents[0] < 0.0 {
        return Ok(LyapunovDimension {
            value: 0.0,
            saturated: false,
        });
    }
    let mut sum = 0.0;
    for (j, &l) in exponents.iter().enumerate() {
        if sum + l < 0.0 {
            return Ok(LyapunovDimension {
                value: j as f64 + sum / l.abs(),
                saturated: false,
            });
        }
        sum += l;
    }
    Ok(LyapunovDimension {
        value: exponents.len() as f64,
        saturated: true,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceCurve {
    /// `mean_log[n]` is the mean over pairs of `ln d_n`, for `n = 0..=n_steps`.
    pub mean_log: Vec<f64>,
    /// `distances[j][n]` for each retained pair.
    pub distances: Vec<Vec<f64>>,
    /// Base-point indices of the retained pairs.
    pub pairs: Vec<usize>,
    /// Base points skipped because their nearest peer coincides with them.
    pub skipped: Vec<usize>,
    pub slope: f64,
    pub intercept: f64,
    /// Steps `window.0..window.1` entered the fit.
    pub window: (usize, usize),
    pub diameter: f64,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Least squares `y = slope * x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Perturbs each base point by `epsilon` toward its nearest peer, iterates
/// both copies and fits the growth rate of the mean log separation over the
/// steps where it stays below `ln(0.1 * diameter)`.
pub fn direct_divergence(map: &dyn DynMap, base_points: &[Vec<f64>], epsilon: f64, n_steps: usize) -> Result<DivergenceCurve> {
    if base_points.len() < 2 {
        return Err(Error::invalid("direct divergence needs at least two base points"));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("perturbation must be positive, got {epsilon}")));
    }
    for p in base_points {
        check_dim(map, p)?;
    }
    let mut diameter = 0.0f64;
    let mut starts = Vec::new();
    let mut skipped = Vec::new();
    for (j, p) in base_points.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (i, q) in base_points.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = distance(p, q);
            diameter = diameter.max(d);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        let (d, i) = best.expect("at least one peer");
        if d == 0.0 {
            skipped.push(j);
            continue;
        }
        let q = &base_points[i];
        let twin: Vec<f64> = p.iter().zip(q).map(|(a, b)| a + epsilon * (b - a) / d).collect();
        starts.push((j, twin));
    }
    if starts.is_empty() {
        return Err(Error::invalid("every base point coincides with its nearest peer"));
    }

    let runs = parallel_map(&starts, |(j, twin)| -> Result<Vec<f64>> {
        let mut a = base_points[*j].clone();
        let mut b = twin.clone();
        let mut d = Vec::with_capacity(n_steps + 1);
        d.push(distance(&a, &b));
        for _ in 0..n_steps {
            a = map.evaluate(&a)?;
            b = map.evaluate(&b)?;
            let dist = distance(&a, &b);
            if !dist.is_finite() {
                break;
            }
            d.push(dist);
        }
        Ok(d)
    });
    let mut distances = Vec::with_capacity(runs.len());
    for r in runs {
        distances.push(r?);
    }
    let valid = distances.iter().map(Vec::len).min().unwrap_or(0);
    distances.iter_mut().for_each(|d| d.truncate(valid));
    let mean_log: Vec<f64> = (0..valid)
        .map(|n| distances.iter().map(|d| d[n].ln()).sum::<f64>() / distances.len() as f64)
        .collect();

    let ceiling = (0.1 * diameter).ln();
    let end = mean_log.iter().position(|&v| v.partial_cmp(&ceiling) != Some(std::cmp::Ordering::Less)).unwrap_or(mean_log.len());
    if end < 2 {
        return Err(Error::invalid(format!(
            "fit window holds {end} steps; decrease epsilon or add base points"
        )));
    }
    let xs: Vec<f64> = (0..end).map(|n| n as f64).collect();
    let (slope, intercept) = linear_fit(&xs, &mean_log[..end]);
    Ok(DivergenceCurve {
        mean_log,
        distances,
        pairs: starts.into_iter().map(|(j, _)| j).collect(),
        skipped,
        slope,
        intercept,
        window: (0, end),
        diameter,
    })
}

/// `index,exponent` with one-based indices.
pub fn spectrum_csv(exponents: &[f64]) -> String {
    let mut s = String::from("index,exponent\n");
    for (i, v) in exponents.iter().enumerate() {
        writeln!(s, "{},{v:.9}", i + 1).unwrap();
    }
    s
}

/// `index,mean,std_dev` followed by one column per trajectory.
pub fn ensemble_csv(e: &SpectrumEnsemble) -> String {
    let mut s = String::from("index,mean,std_dev");
    for (i, _) in &e.per_trajectory {
        write!(s, ",traj_{i}").unwrap();
    }
    s.push('\n');
    for k in 0..e.mean.len() {
        write!(s, "{},{:.9},{:.9}", k + 1, e.mean[k], e.std_dev[k]).unwrap();
        for (_, t) in &e.per_trajectory {
            write!(s, ",{:.9}", t.exponents[k]).unwrap();
        }
        s.push('\n');
    }
    s
}

/// `step,mean_log_d` followed by one distance column per pair.
pub fn divergence_csv(c: &DivergenceCurve) -> String {
    let mut s = String::from("step,mean_log_d");
    for j in &c.pairs {
        write!(s, ",pair_{j}").unwrap();
    }
    s.push('\n');
    for (n, m) in c.mean_log.iter().enumerate() {
        write!(s, "{n},{m:.9}").unwrap();
        for d in &c.distances {
            write!(s, ",{:.6e}", d[n]).unwrap();
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Linear {
        a: Vec<f64>,
        n: usize,
    }

    impl DynMap for Linear {
        fn dim(&self) -> usize {
            self.n
        }
        fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok((0..self.n).map(|r| dot(&self.a[r * self.n..(r + 1) * self.n], x)).collect())
        }
        fn jacobian_at(&self, _: &[f64]) -> Result<Vec<f64>> {
            Ok(self.a.clone())
        }
    }

    fn identity(n: usize) -> Linear {
        let mut a = vec![0.0; n * n];
        (0..n).for_each(|i| a[i * n + i] = 1.0);
        Linear { a, n }
    }

    fn henon_points(count: usize) -> Vec<Vec<f64>> {
        let h = henon(1.4, 0.3).unwrap();
        iterate(&h, &[0.1, 0.1], count, 1000).unwrap().states
    }

    #[test]
    fn identity_orbit_is_constant() {
        let t = iterate(&identity(3), &[0.5, -1.0, 2.0], 5, 2).unwrap();
        assert!(t.states.iter().all(|s| s == &[0.5, -1.0, 2.0]));
        assert_eq!(t.transient_skipped, 2);
    }

    #[test]
    fn logistic_hand_iteration() {
        let t = iterate(&logistic(4.0).unwrap(), &[0.3], 3, 0).unwrap();
        let want = [0.84, 0.5376, 0.99434496];
        for (s, w) in t.states.iter().zip(want) {
            assert!((s[0] - w).abs() < 1e-12);
        }
        assert!(iterate(&logistic(4.0).unwrap(), &[0.3], 0, 3).unwrap().states.is_empty());
    }

    #[test]
    fn iterate_reports_blowup_step() {
        let m = Linear { a: vec![1e200], n: 1 };
        let e = iterate(&m, &[1e200], 5, 0).unwrap_err();
        assert!(e.to_string().contains("step 1"), "{e}");
    }

    #[test]
    fn benchmark_values_and_jacobians() {
        let h = henon(1.4, 0.3).unwrap();
        assert_eq!(h.jacobian_at(&[0.7, -0.2]).unwrap(), vec![-2.8 * 0.7, 1.0, 0.3, 0.0]);
        assert_eq!(logistic(4.0).unwrap().evaluate(&[0.5]).unwrap(), vec![1.0]);
        assert!(henon(f64::NAN, 0.3).is_err());
        assert!(h.evaluate(&[1.0]).is_err());
    }

    #[test]
    fn logistic_exponent_is_ln2() {
        let s = lyapunov_spectrum(&logistic(4.0).unwrap(), &[0.3], 100, 100_000, 1).unwrap();
        assert!((s.exponents[0] - 2f64.ln()).abs() < 0.01, "{:?}", s.exponents);
    }

    #[test]
    fn henon_exponents_sum_to_log_b() {
        let s = lyapunov_spectrum(&henon(1.4, 0.3).unwrap(), &[0.1, 0.1], 1000, 100_000, 2).unwrap();
        assert!((s.exponents.iter().sum::<f64>() - 0.3f64.ln()).abs() < 1e-3);
        assert!((s.exponents[0] - 0.419).abs() < 0.01, "{:?}", s.exponents);
        let d = lyapunov_dimension(&s.exponents).unwrap();
        assert!((d.value - 1.26).abs() < 0.01, "{d:?}");
    }

    #[test]
    fn exponent_sum_matches_mean_log_det() {
        let h = henon(1.4, 0.3).unwrap();
        let s = lyapunov_spectrum(&h, &[0.1, 0.1], 500, 20_000, 2).unwrap();
        // the Jacobians used are taken at f^500(x0) .. f^20499(x0)
        let traj = iterate(&h, &[0.1, 0.1], 20_000, 499).unwrap();
        let mut logdet = 0.0;
        for state in &traj.states {
            let j = h.jacobian_at(state).unwrap();
            logdet += (j[0] * j[3] - j[1] * j[2]).abs().ln();
        }
        logdet /= traj.states.len() as f64;
        assert!((s.exponents.iter().sum::<f64>() - logdet).abs() < 1e-3);
    }

    #[test]
    fn rank_collapse_names_step() {
        let m = Linear { a: vec![1.0, 0.0, 0.0, 0.0], n: 2 };
        match lyapunov_spectrum(&m, &[0.0, 0.0], 0, 5, 2).unwrap_err() {
            Error::RankCollapse { step, direction } => assert_eq!((step, direction), (1, 1)),
            e => panic!("{e}"),
        }
        assert!(lyapunov_spectrum(&m, &[0.0, 0.0], 0, 5, 3).is_err());
        assert!(lyapunov_spectrum(&m, &[0.0, 0.0], 0, 0, 1).is_err());
    }

    #[test]
    fn ensemble_of_logistic_orbits() {
        let l = logistic(4.0).unwrap();
        let starts: Vec<Vec<f64>> = (0..10).map(|i| vec![0.1 + 0.07 * i as f64]).collect();
        let e = spectrum_ensemble(&l, &starts, 100, 100_000, 1).unwrap();
        assert!((e.mean[0] - 2f64.ln()).abs() < 0.01);
        assert!(e.std_dev[0] < 0.01);
        assert_eq!(e.per_trajectory.len(), 10);
        let single = spectrum_ensemble(&l, &starts[..1], 100, 1000, 1).unwrap();
        assert_eq!(single.mean, lyapunov_spectrum(&l, &starts[0], 100, 1000, 1).unwrap().exponents);
        assert_eq!(single.std_dev, vec![0.0]);
    }

    #[test]
    fn ensemble_records_failures() {
        let m = Linear { a: vec![2.0], n: 1 };
        // the 1e308 start overflows; the others stay finite for 10 steps
        let starts = vec![vec![1.0], vec![1e308], vec![0.5]];
        let e = spectrum_ensemble(&m, &starts, 0, 10, 1).unwrap();
        assert_eq!(e.failures.len(), 1);
        assert_eq!(e.failures[0].0, 1);
        assert_eq!(e.per_trajectory.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![0, 2]);
        assert!(spectrum_ensemble(&m, &starts[1..2], 0, 10, 1).is_err());
        assert!(spectrum_ensemble(&m, &[], 0, 10, 1).is_err());
    }

    #[test]
    fn dimension_formula() {
        let d = lyapunov_dimension(&[0.1, -0.2]).unwrap();
        assert!((d.value - 1.5).abs() < 1e-12 && !d.saturated);
        assert_eq!(lyapunov_dimension(&[-0.5, -1.0]).unwrap().value, 0.0);
        let sat = lyapunov_dimension(&[0.3, 0.1]).unwrap();
        assert!(sat.saturated && sat.value == 2.0);
        assert!(lyapunov_dimension(&[-0.2, 0.1]).is_err());
    }

    #[test]
    fn divergence_of_identity_and_doubling() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]];
        let c = direct_divergence(&identity(2), &pts, 1e-4, 20).unwrap();
        assert!(c.distances.iter().flatten().all(|&d| (d - 1e-4).abs() < 1e-15));
        assert!(c.slope.abs() < 1e-9);

        let dbl = Linear { a: vec![2.0], n: 1 };
        let c = direct_divergence(&dbl, &[vec![0.1], vec![0.3]], 1e-9, 60).unwrap();
        assert!((c.slope - 2f64.ln()).abs() < 1e-9, "{}", c.slope);
        assert!(c.window.1 < 30);
    }

    #[test]
    fn divergence_skips_coincident_points() {
        let pts = vec![vec![0.0], vec![0.0], vec![1.0]];
        let c = direct_divergence(&identity(1), &pts, 1e-3, 5).unwrap();
        assert_eq!(c.skipped, vec![0, 1]);
        assert_eq!(c.pairs, vec![2]);
        assert!(direct_divergence(&identity(1), &pts[..1], 1e-3, 5).is_err());
        assert!(direct_divergence(&identity(1), &pts, 0.0, 5).is_err());
    }

    #[test]
    fn henon_divergence_agrees_with_spectrum() {
        let h = henon(1.4, 0.3).unwrap();
        let c = direct_divergence(&h, &henon_points(500), 1e-5, 40).unwrap();
        let s = lyapunov_spectrum(&h, &[0.1, 0.1], 1000, 100_000, 1).unwrap();
        assert!((c.slope - s.exponents[0]).abs() < 0.02, "{} vs {}", c.slope, s.exponents[0]);
    }

    #[test]
    fn csv_layouts() {
        assert_eq!(spectrum_csv(&[0.5, -1.0]), "index,exponent\n1,0.500000000\n2,-1.000000000\n");
        let c = direct_divergence(&identity(1), &[vec![0.0], vec![1.0]], 1e-3, 2).unwrap();
        let csv = divergence_csv(&c);
        assert_eq!(csv.lines().next().unwrap(), "step,mean_log_d,pair_0,pair_1");
        assert_eq!(csv.lines().count(), 4);
    }

    fn small_generator() -> GeneratorNet {
        let arch = crate::model::ArchConfig {
            base_channels: 2,
            n_resblocks: 1,
            n_downsamples: 1,
            ..Default::default()
        };
        crate::model::build_generator(&arch, [4, 4, 1], 3).unwrap()
    }

    #[test]
    fn generator_flatten_round_trip() {
        let net = small_generator();
        let map = generator_map(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::from_fn(&[4, 4, 1], |_| rng.gen_range(-1.0..1.0));
        let flat = map.flatten(&img).unwrap();
        assert_eq!(map.unflatten(&flat).unwrap(), img);
        assert_eq!(map.dim(), 16);
        assert!(map.flatten(&Tensor::zeros(&[4, 4, 2])).is_err());
        let stepped = map.evaluate(&flat).unwrap();
        assert_eq!(map.unflatten(&stepped).unwrap(), net.infer(&img).unwrap());
    }

    #[test]
    fn generator_tangents_match_jacobian() {
        let net = small_generator();
        let map = generator_map(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let basis = random_orthonormal(&mut rng, 16, 3);
        let (y, fused) = map.step_with_tangents(&x, &basis).unwrap();
        assert_eq!(y, map.evaluate(&x).unwrap());
        let j = map.jacobian_at(&x).unwrap();
        for (v, t) in basis.iter().zip(&fused) {
            for r in 0..16 {
                let want = dot(&j[r * 16..(r + 1) * 16], v);
                assert!((want - t[r]).abs() < 1e-5, "{want} vs {}", t[r]);
            }
        }
        assert!(map.with_jacobian_cap(10).jacobian_at(&x).is_err());
    }

    #[test]
    fn generator_orbit_is_reproducible() {
        let net = small_generator();
        let map = generator_map(&net);
        let x0 = vec![0.1; 16];
        let t = iterate(&map, &x0, 20, 5).unwrap();
        for w in t.states.windows(2) {
            assert_eq!(map.evaluate(&w[0]).unwrap(), w[1]);
        }
        let s = lyapunov_spectrum(&map, &x0, 5, 50, 4).unwrap();
        assert_eq!(s.exponents.len(), 4);
        assert!(s.exponents.windows(2).all(|w| w[0] >= w[1]));
    }

    fn random_orthonormal(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
        let mut v: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        gram_schmidt(&mut v).unwrap();
        v
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gram_schmidt_is_orthonormal(seed in any::<u64>(), n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.gen_range(1..=n);
            let mut v: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
            let orig = v.clone();
            let r = gram_schmidt(&mut v).unwrap();
            for i in 0..m {
                for j in 0..m {
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot(&v[i], &v[j]) - want).abs() < 1e-4);
                }
            }
            prop_assert!((r[0] - dot(&orig[0], &orig[0]).sqrt()).abs() < 1e-9);
        }

        #[test]
        fn spectrum_independent_of_initial_basis(seed in any::<u64>()) {
            let h = henon(1.4, 0.3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = lyapunov_spectrum_with_basis(&h, &[0.1, 0.1], 500, 20_000, random_orthonormal(&mut rng, 2, 2)).unwrap();
            let b = lyapunov_spectrum(&h, &[0.1, 0.1], 500, 20_000, 2).unwrap();
            for (x, y) in a.exponents.iter().zip(&b.exponents) {
                prop_assert!((x - y).abs() < 0.02);
            }
            prop_assert!(a.exponents[0] >= a.exponents[1]);
        }

        #[test]
        fn dimension_is_scale_invariant(mut ls in proptest::collection::vec(-2.0f64..1.0, 1..8), c in 0.01f64..100.0) {
            ls.sort_by(|a, b| b.total_cmp(a));
            let d = lyapunov_dimension(&ls).unwrap();
            let scaled: Vec<f64> = ls.iter().map(|v| v * c).collect();
            let e = lyapunov_dimension(&scaled).unwrap();
            prop_assert!((d.value - e.value).abs() < 1e-9);
            prop_assert_eq!(d.saturated, e.saturated);
        }
    }
}
