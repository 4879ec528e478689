//! Batch AuxIVA over a whole spectrogram.
//!
//! Used as a convergence reference for the online engine. Three sweep
//! variants are offered: IP, ISS driven by weighted covariance matrices, and
//! ISS operating directly on the separated signals (Laplace prior only).
//! All three start from `W_f = I` and re-estimate the source activities
//! once at the start of every sweep.

use num_complex::Complex64;

use crate::error::{contract, Error, Result};
use crate::linalg::{self, CMat, CVec};
use crate::separator::{self, ContrastKind, ContrastModel, UpdateMethod};
use crate::stft::Spectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMethod {
    Ip,
    /// ISS with `v` computed from the weighted covariances.
    Iss,
    /// ISS with `v` computed from the separated signals, which are updated
    /// in place; the demixing matrices are tracked alongside for reporting.
    IssInplace,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchProblem<'a> {
    pub spec: &'a Spectrogram,
    pub model: ContrastModel,
    /// Number of full sweeps over all sources.
    pub n_iter: usize,
}

impl BatchProblem<'_> {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let k = self.spec.channels();
        if k == 0 || k > linalg::MAX_K {
            return Err(contract(format!("channel count {k} unsupported")));
        }
        if self.spec.frames() < k {
            return Err(contract(format!(
                "{} frames are too few to estimate {k}x{k} covariances",
                self.spec.frames()
            )));
        }
        if self.model.bins != self.spec.bins() {
            return Err(contract(
                "contrast model bin count differs from the spectrogram",
            ));
        }
        if !self.spec.is_finite() {
            return Err(contract("spectrogram contains non-finite values"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub demix: Vec<CMat>,
    /// Cost before the first sweep followed by the cost after each sweep.
    pub cost_trace: Vec<f64>,
    pub separated: Spectrogram,
}

/// Source activities `r_kt` of `Y = W X`, floored.
fn activities(demix: &[CMat], spec: &Spectrogram, model: &ContrastModel) -> Vec<Vec<f64>> {
    let (k_n, t_n, f_n) = (spec.channels(), spec.frames(), spec.bins());
    let mut power = vec![vec![0.0; t_n]; k_n];
    let mut x = CVec::zeros(k_n);
    for t in 0..t_n {
        for (f, w) in demix.iter().enumerate().take(f_n) {
            for c in 0..k_n {
                x[c] = spec.get(c, t, f);
            }
            let y = w.mul_vec(&x);
            for k in 0..k_n {
                power[k][t] += y[k].norm_sqr();
            }
        }
    }
    power
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|p| p.sqrt().max(model.r_floor))
                .collect()
        })
        .collect()
}

/// `J = Σ_k (1/T) Σ_t G(r_kt) − 2 Σ_f log|det W_f|`.
pub fn cost(demix: &[CMat], spec: &Spectrogram, model: &ContrastModel) -> Result<f64> {
    if demix.len() != spec.bins() {
        return Err(contract("one demixing matrix per bin is required"));
    }
    let r = activities(demix, spec, model);
    let t_n = spec.frames() as f64;
    let data: f64 = r
        .iter()
        .map(|rk| rk.iter().map(|&v| model.contrast(v)).sum::<f64>() / t_n)
        .sum();
    let mut logdet = 0.0;
    for (f, w) in demix.iter().enumerate() {
        logdet += linalg::log_abs_det(w).map_err(|_| Error::Singular {
            frame: None,
            bin: f,
        })?;
    }
    Ok(data - 2.0 * logdet)
}

fn weighted_covariance(spec: &Spectrogram, phi: &[f64], f: usize) -> CMat {
    let k_n = spec.channels();
    let t_n = spec.frames();
    let mut u = CMat::zeros(k_n);
    let mut x = [Complex64::new(0.0, 0.0); linalg::MAX_K];
    for (t, &p) in phi.iter().enumerate() {
        for (c, xc) in x.iter_mut().enumerate().take(k_n) {
            *xc = spec.get(c, t, f);
        }
        for i in 0..k_n {
            let xi = x[i] * p;
            for j in 0..k_n {
                u[(i, j)] += xi * x[j].conj();
            }
        }
    }
    let mut u = u.scale(Complex64::new(1.0 / t_n as f64, 0.0));
    for i in 0..k_n {
        u[(i, i)] = Complex64::new(u[(i, i)].re, 0.0);
        for j in i + 1..k_n {
            let s = (u[(i, j)] + u[(j, i)].conj()) * 0.5;
            u[(i, j)] = s;
            u[(j, i)] = s.conj();
        }
    }
    u
}

/// `U_kf = (1/T) Σ_t φ(r_kt) x_ft x_ft^H` with `r` taken from `demix`.
pub fn batch_weighted_covariance(
    spec: &Spectrogram,
    demix: &[CMat],
    model: &ContrastModel,
    k: usize,
    f: usize,
) -> Result<CMat> {
    if demix.len() != spec.bins() || k >= spec.channels() || f >= spec.bins() {
        return Err(contract("source or bin index out of range"));
    }
    let r = activities(demix, spec, model);
    let phi: Vec<f64> = r[k].iter().map(|&v| model.weight(v)).collect();
    Ok(weighted_covariance(spec, &phi, f))
}

/// Iterative batch solver; one [`sweep`](Self::sweep) updates every source once.
pub struct BatchAuxIva<'a> {
    problem: BatchProblem<'a>,
    method: BatchMethod,
    demix: Vec<CMat>,
    /// In-place separated signals for [`BatchMethod::IssInplace`].
    outputs: Option<Spectrogram>,
    sweeps: usize,
}

impl<'a> BatchAuxIva<'a> {
    pub fn new(problem: BatchProblem<'a>, method: BatchMethod) -> Result<Self> {
        problem.validate()?;
        if method == BatchMethod::IssInplace && problem.model.kind != ContrastKind::Laplace {
            return Err(contract(
                "in-place ISS weights outputs by 1/r and is defined for the Laplace model only",
            ));
        }
        let k_n = problem.spec.channels();
        let outputs = (method == BatchMethod::IssInplace).then(|| problem.spec.clone());
        Ok(BatchAuxIva {
            problem,
            method,
            demix: vec![CMat::identity(k_n); problem.spec.bins()],
            outputs,
            sweeps: 0,
        })
    }

    pub fn demixing(&self) -> &[CMat] {
        &self.demix
    }

    pub fn sweeps(&self) -> usize {
        self.sweeps
    }

    pub fn cost(&self) -> Result<f64> {
        cost(&self.demix, self.problem.spec, &self.problem.model)
    }

    /// Current separated spectrogram `Y = W X`.
    pub fn separated(&self) -> Spectrogram {
        if let Some(y) = &self.outputs {
            return y.clone();
        }
        let spec = self.problem.spec;
        let (k_n, t_n) = (spec.channels(), spec.frames());
        let mut out = Spectrogram::zeros(k_n, t_n, spec.bins());
        let mut x = CVec::zeros(k_n);
        for (f, w) in self.demix.iter().enumerate() {
            for t in 0..t_n {
                for c in 0..k_n {
                    x[c] = spec.get(c, t, f);
                }
                let y = w.mul_vec(&x);
                for k in 0..k_n {
                    out.set(k, t, f, y[k]);
                }
            }
        }
        out
    }

    /// Runs one sweep and returns the cost afterwards.
    pub fn sweep(&mut self) -> Result<f64> {
        let sweep = self.sweeps;
        let wrap = |e: Error| Error::BatchStep {
            sweep,
            inner: Box::new(e),
        };
        match self.method {
            BatchMethod::Ip => self.sweep_covariance(UpdateMethod::Ip).map_err(wrap)?,
            BatchMethod::Iss => self.sweep_covariance(UpdateMethod::Iss).map_err(wrap)?,
            BatchMethod::IssInplace => self.sweep_inplace().map_err(wrap)?,
        }
        self.sweeps += 1;
        self.cost()
    }

    fn sweep_covariance(&mut self, method: UpdateMethod) -> Result<()> {
        let spec = self.problem.spec;
        let model = &self.problem.model;
        let (k_n, f_n) = (spec.channels(), spec.bins());
        let r = activities(&self.demix, spec, model);
        let phi: Vec<Vec<f64>> = r
            .iter()
            .map(|rk| rk.iter().map(|&v| model.weight(v)).collect())
            .collect();
        // cov[f][k]
        let cov: Vec<Vec<CMat>> = (0..f_n)
            .map(|f| {
                phi.iter()
                    .map(|p| weighted_covariance(spec, p, f))
                    .collect()
            })
            .collect();
        for k in 0..k_n {
            for (f, w) in self.demix.iter_mut().enumerate() {
                separator::update_source(method, w, &cov[f], k).map_err(|e| e.at(f, None))?;
            }
        }
        Ok(())
    }

    fn sweep_inplace(&mut self) -> Result<()> {
        let model = self.problem.model;
        let y = self.outputs.as_mut().expect("in-place outputs");
        let (k_n, t_n, f_n) = (y.channels(), y.frames(), y.bins());

        let mut inv_r = vec![vec![0.0; t_n]; k_n];
        for t in 0..t_n {
            for (k, ir) in inv_r.iter_mut().enumerate() {
                let p: f64 = y.frame_slice(k, t).iter().map(|z| z.norm_sqr()).sum();
                ir[t] = 1.0 / p.sqrt().max(model.r_floor);
            }
        }

        for k in 0..k_n {
            for f in 0..f_n {
                let mut v = CVec::zeros(k_n);
                for m in 0..k_n {
                    let mut num = Complex64::new(0.0, 0.0);
                    let mut den = 0.0;
                    for t in 0..t_n {
                        let yk = y.get(k, t, f);
                        let w = inv_r[m][t];
                        num += y.get(m, t, f) * yk.conj() * w;
                        den += yk.norm_sqr() * w;
                    }
                    if !(den > separator::ISS_DENOMINATOR_FLOOR) {
                        return Err(Error::Degenerate {
                            kind: crate::error::DegeneracyKind::NonPositiveDenominator,
                            frame: None,
                            bin: f,
                            source_index: k,
                            other: Some(m),
                        });
                    }
                    v[m] = if m == k {
                        // φ = 1/(2r): the k-th entry uses (1/T) Σ_t |y_k|² / (2 r_k)
                        let norm = den / (2.0 * t_n as f64);
                        Complex64::new(1.0 - norm.sqrt().recip(), 0.0)
                    } else {
                        num / den
                    };
                }
                self.demix[f] =
                    separator::iss_apply(&self.demix[f], &v, k).map_err(|e| e.at(f, None))?;
                for t in 0..t_n {
                    let yk = y.get(k, t, f);
                    for m in 0..k_n {
                        let cur = y.get(m, t, f);
                        y.set(m, t, f, cur - v[m] * yk);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Runs `problem.n_iter` sweeps from `W = I`.
pub fn batch_auxiva(problem: BatchProblem<'_>, method: BatchMethod) -> Result<BatchResult> {
    let mut solver = BatchAuxIva::new(problem, method)?;
    let mut cost_trace = Vec::with_capacity(problem.n_iter + 1);
    cost_trace.push(solver.cost()?);
    for _ in 0..problem.n_iter {
        cost_trace.push(solver.sweep()?);
    }
    Ok(BatchResult {
        separated: solver.separated(),
        demix: solver.demix,
        cost_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_spec(seed: u64, k_n: usize, t_n: usize, f_n: usize) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Spectrogram::zeros(k_n, t_n, f_n);
        for k in 0..k_n {
            for t in 0..t_n {
                for f in 0..f_n {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    s.set(k, t, f, c(re, im));
                }
            }
        }
        s
    }

    fn random_w(rng: &mut impl Rng, dim: usize) -> CMat {
        let mut m = CMat::identity(dim);
        for z in m.as_mut_slice() {
            *z += c(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        }
        m
    }

    #[test]
    fn cost_at_identity_is_mean_activity() {
        let spec = random_spec(1, 2, 10, 3);
        let model = ContrastModel::laplace(3);
        let w = vec![CMat::identity(2); 3];
        let mut expected = 0.0;
        for k in 0..2 {
            for t in 0..10 {
                let p: f64 = spec.frame_slice(k, t).iter().map(|z| z.norm_sqr()).sum();
                expected += p.sqrt() / 10.0;
            }
        }
        assert_abs_diff_eq!(cost(&w, &spec, &model).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn cost_scalar_case() {
        let mut spec = Spectrogram::zeros(1, 1, 1);
        spec.set(0, 0, 0, c(2.0, 0.0));
        let j = cost(&[CMat::identity(1)], &spec, &ContrastModel::laplace(1)).unwrap();
        assert_eq!(j, 2.0);
    }

    #[test]
    fn cost_scaling_relation() {
        let (k_n, f_n) = (3, 4);
        let spec = random_spec(2, k_n, 20, f_n);
        let model = ContrastModel::laplace(f_n);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<CMat> = (0..f_n).map(|_| random_w(&mut rng, k_n)).collect();
        let logdet: f64 = w.iter().map(|m| linalg::log_abs_det(m).unwrap()).sum();
        let data = cost(&w, &spec, &model).unwrap() + 2.0 * logdet;
        let scale = 1.7;
        let scaled: Vec<CMat> = w.iter().map(|m| m.scale(c(scale, 0.0))).collect();
        let expected = scale * data - 2.0 * (f_n * k_n) as f64 * scale.ln() - 2.0 * logdet;
        assert_abs_diff_eq!(
            cost(&scaled, &spec, &model).unwrap(),
            expected,
            epsilon = 1e-10
        );
    }

    #[test]
    fn weighted_covariance_examples() {
        // single frame with phi forced to 1: r = 0.5 under Laplace gives phi = 1
        let mut spec = Spectrogram::zeros(2, 1, 1);
        spec.set(0, 0, 0, c(0.3, 0.4));
        spec.set(1, 0, 0, c(0.0, 0.0));
        let u = batch_weighted_covariance(
            &spec,
            &[CMat::identity(2)],
            &ContrastModel::laplace(1),
            0,
            0,
        )
        .unwrap();
        assert_abs_diff_eq!(u[(0, 0)].re, 0.25, epsilon = 1e-15);

        let mut spec = Spectrogram::zeros(2, 5, 1);
        for t in 0..5 {
            spec.set(0, t, 0, c(1.0, 0.0));
        }
        let u = batch_weighted_covariance(
            &spec,
            &[CMat::identity(2)],
            &ContrastModel::laplace(1),
            0,
            0,
        )
        .unwrap();
        assert_eq!(u, CMat::diag(&[0.5, 0.0]).unwrap());
    }

    #[test]
    fn weighted_covariance_matches_literal_loop() {
        let (k_n, t_n, f_n) = (3, 12, 4);
        let spec = random_spec(3, k_n, t_n, f_n);
        let model = ContrastModel::laplace(f_n);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w: Vec<CMat> = (0..f_n).map(|_| random_w(&mut rng, k_n)).collect();
        let (k, f) = (1, 2);
        let u = batch_weighted_covariance(&spec, &w, &model, k, f).unwrap();
        let mut oracle = [[c(0.0, 0.0); 3]; 3];
        for t in 0..t_n {
            let mut r2 = 0.0;
            for ff in 0..f_n {
                let mut y = c(0.0, 0.0);
                for ch in 0..k_n {
                    y += w[ff][(k, ch)] * spec.get(ch, t, ff);
                }
                r2 += y.norm_sqr();
            }
            let phi = 1.0 / (2.0 * r2.sqrt());
            for i in 0..k_n {
                for j in 0..k_n {
                    oracle[i][j] += spec.get(i, t, f) * spec.get(j, t, f).conj() * phi / t_n as f64;
                }
            }
        }
        for i in 0..k_n {
            for j in 0..k_n {
                assert!((u[(i, j)] - oracle[i][j]).norm() <= 1e-14 * (1.0 + oracle[i][j].norm()));
            }
        }
    }

    #[test]
    fn problem_validation() {
        let spec = random_spec(4, 3, 2, 4);
        let p = BatchProblem {
            spec: &spec,
            model: ContrastModel::laplace(4),
            n_iter: 1,
        };
        assert!(p.validate().is_err());
        let spec = random_spec(4, 2, 8, 4);
        let p = BatchProblem {
            spec: &spec,
            model: ContrastModel::gaussian(4),
            n_iter: 1,
        };
        assert!(BatchAuxIva::new(p, BatchMethod::IssInplace).is_err());
        assert!(BatchAuxIva::new(p, BatchMethod::Iss).is_ok());
    }

    #[test]
    fn inplace_matches_covariance_iss() {
        let spec = random_spec(9, 2, 40, 5);
        let p = BatchProblem {
            spec: &spec,
            model: ContrastModel::laplace(5),
            n_iter: 4,
        };
        let a = batch_auxiva(p, BatchMethod::Iss).unwrap();
        let b = batch_auxiva(p, BatchMethod::IssInplace).unwrap();
        for (x, y) in a.separated.as_slice().iter().zip(b.separated.as_slice()) {
            assert!((x - y).norm() <= 1e-8 * (1.0 + x.norm()));
        }
        assert_eq!(a.cost_trace.len(), 5);
    }

    #[test]
    fn gaussian_model_descends() {
        let spec = random_spec(12, 2, 60, 4);
        let p = BatchProblem {
            spec: &spec,
            model: ContrastModel::gaussian(4),
            n_iter: 6,
        };
        for method in [BatchMethod::Ip, BatchMethod::Iss] {
            let res = batch_auxiva(p, method).unwrap();
            for pair in res.cost_trace.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-9, "{method:?}: {pair:?}");
            }
        }
    }
}
