//! Scale-invariant SDR, segmental SDR, permutation alignment and SDR
//! improvement reports.

use std::io::Write;

use serde::Serialize;

use crate::error::{contract, Result};
use crate::scenario::GroundTruth;

/// Reported value for a perfect (or empty) estimate.
pub const SDR_CAP_DB: f64 = 100.0;
/// Residual-to-target energy ratio below which the cap applies.
pub const SDR_CAP_RATIO: f64 = 1e-10;
/// Default segment length in samples.
pub const DEFAULT_SEGMENT_LEN: usize = 32000;
/// Largest source count for exhaustive permutation search.
pub const MAX_PERMUTATION_K: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SdrFlag {
    Finite,
    /// Residual below the cap threshold; reported as +100 dB.
    CappedHigh,
    /// No target component in the estimate; reported as −100 dB.
    CappedLow,
    /// Silent reference segment; reported as NaN and skipped in averages.
    Undefined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sdr {
    pub db: f64,
    pub flag: SdrFlag,
}

impl Sdr {
    pub fn is_capped(&self) -> bool {
        matches!(self.flag, SdrFlag::CappedHigh | SdrFlag::CappedLow)
    }

    pub fn is_defined(&self) -> bool {
        self.flag != SdrFlag::Undefined
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SDR of `estimate` against `reference`.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<Sdr> {
    if reference.len() != estimate.len() {
        return Err(contract(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    let ref_energy = dot(reference, reference);
    if !(ref_energy > 0.0) {
        return Err(contract("reference signal is zero"));
    }
    let beta = dot(estimate, reference) / ref_energy;
    let target = beta * beta * ref_energy;
    let residual: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(s, y)| (y - beta * s).powi(2))
        .sum();
    if !(target > 0.0) {
        return Ok(Sdr {
            db: -SDR_CAP_DB,
            flag: SdrFlag::CappedLow,
        });
    }
    if residual <= SDR_CAP_RATIO * target {
        return Ok(Sdr {
            db: SDR_CAP_DB,
            flag: SdrFlag::CappedHigh,
        });
    }
    let db = 10.0 * (target / residual).log10();
    if db <= -SDR_CAP_DB {
        return Ok(Sdr {
            db: -SDR_CAP_DB,
            flag: SdrFlag::CappedLow,
        });
    }
    Ok(Sdr {
        db,
        flag: SdrFlag::Finite,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentedSdr {
    pub segment_len: usize,
    pub segments: Vec<Sdr>,
    pub overall: Sdr,
}

/// [`si_sdr`] over `floor(N / L)` non-overlapping segments plus the whole
/// signal. Segments whose reference is silent are flagged
/// [`SdrFlag::Undefined`].
pub fn seg_sdr(reference: &[f64], estimate: &[f64], segment_len: usize) -> Result<SegmentedSdr> {
    if segment_len == 0 {
        return Err(contract("segment length must be positive"));
    }
    if reference.len() != estimate.len() {
        return Err(contract("reference and estimate differ in length"));
    }
    if reference.len() < segment_len {
        return Err(contract(format!(
            "signal of {} samples is shorter than one segment ({segment_len})",
            reference.len()
        )));
    }
    let segments = reference
        .chunks_exact(segment_len)
        .zip(estimate.chunks_exact(segment_len))
        .map(|(s, y)| {
            if s.iter().all(|&v| v == 0.0) {
                Ok(Sdr {
                    db: f64::NAN,
                    flag: SdrFlag::Undefined,
                })
            } else {
                si_sdr(s, y)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentedSdr {
        segment_len,
        segments,
        overall: si_sdr(reference, estimate)?,
    })
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

/// Returns `perm` with `perm[k]` the estimate assigned to reference `k`,
/// maximizing the summed overall SI-SDR. Ties keep the first permutation in
/// lexicographic order, so identical scores resolve to the identity.
pub fn resolve_permutation<R: AsRef<[f64]>, E: AsRef<[f64]>>(
    references: &[R],
    estimates: &[E],
) -> Result<Vec<usize>> {
    let k = references.len();
    if k != estimates.len() {
        return Err(contract(format!(
            "{k} references but {} estimates",
            estimates.len()
        )));
    }
    if k == 0 || k > MAX_PERMUTATION_K {
        return Err(contract(format!(
            "permutation search supports 1..={MAX_PERMUTATION_K} sources, got {k}"
        )));
    }
    let mut score = vec![vec![0.0; k]; k];
    for (i, r) in references.iter().enumerate() {
        for (j, e) in estimates.iter().enumerate() {
            score[i][j] = si_sdr(r.as_ref(), e.as_ref())?.db;
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for p in permutations(k) {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| score[i][j]).sum();
        if total > best.0 {
            best = (total, p);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Serialize)]
pub struct SourceImprovement {
    /// 1-based source index.
    pub source: usize,
    /// Estimate channel assigned to this source (0-based).
    pub estimate: usize,
    pub output: SegmentedSdr,
    pub input: SegmentedSdr,
    /// Per-segment improvement in dB (NaN for undefined segments).
    pub segment_improvement: Vec<f64>,
    pub overall_improvement: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImprovementReport {
    pub segment_len: usize,
    pub sample_rate: u32,
    pub permutation: Vec<usize>,
    pub sources: Vec<SourceImprovement>,
    /// Mean over sources of the overall improvement.
    pub overall_improvement: f64,
}

impl ImprovementReport {
    pub fn segments(&self) -> usize {
        self.sources
            .first()
            .map_or(0, |s| s.segment_improvement.len())
    }

    /// Mean improvement over all sources of the segments in `range`,
    /// ignoring undefined segments.
    pub fn mean_segment_improvement(&self, range: std::ops::Range<usize>) -> f64 {
        let vals: Vec<f64> = self
            .sources
            .iter()
            .flat_map(|s| s.segment_improvement[range.clone()].iter().copied())
            .filter(|v| v.is_finite())
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// Mean improvement of one (0-based) source over `range`.
    pub fn source_segment_mean(&self, source: usize, range: std::ops::Range<usize>) -> f64 {
        let vals: Vec<f64> = self.sources[source].segment_improvement[range]
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// SDR improvement of `separated` over the microphone-1 mixture, measured
/// against the microphone-1 source images after global permutation
/// alignment.
pub fn sdr_improvement<E: AsRef<[f64]>>(
    truth: &GroundTruth,
    separated: &[E],
    segment_len: usize,
) -> Result<ImprovementReport> {
    let n = truth.len();
    if separated.len() != truth.images.len() {
        return Err(contract(format!(
            "{} estimates for {} sources",
            separated.len(),
            truth.images.len()
        )));
    }
    if let Some(e) = separated.iter().find(|e| e.as_ref().len() != n) {
        return Err(contract(format!(
            "estimate has {} samples, reference {n}",
            e.as_ref().len()
        )));
    }
    let mic1 = &truth.mixtures[0];
    let permutation = resolve_permutation(&truth.images, separated)?;
    let sources = truth
        .images
        .iter()
        .zip(&permutation)
        .enumerate()
        .map(|(k, (image, &j))| {
            let output = seg_sdr(image, separated[j].as_ref(), segment_len)?;
            let input = seg_sdr(image, mic1, segment_len)?;
            let segment_improvement = output
                .segments
                .iter()
                .zip(&input.segments)
                .map(|(o, i)| o.db - i.db)
                .collect();
            let overall_improvement = output.overall.db - input.overall.db;
            Ok(SourceImprovement {
                source: k + 1,
                estimate: j,
                output,
                input,
                segment_improvement,
                overall_improvement,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let overall_improvement =
        sources.iter().map(|s| s.overall_improvement).sum::<f64>() / sources.len() as f64;
    Ok(ImprovementReport {
        segment_len,
        sample_rate: truth.sample_rate,
        permutation,
        sources,
        overall_improvement,
    })
}

/// One CSV row of a segmental report.
#[derive(Debug, Clone, Serialize)]
pub struct CsvRow<'a> {
    pub method: &'a str,
    pub segment_index: usize,
    pub time_s: f64,
    pub source: usize,
    pub sdr_db: f64,
    pub sdr_improvement_db: f64,
}

/// Writes labelled reports as CSV (`method, segment_index, time_s, source,
/// sdr_db, sdr_improvement_db`), one row per method × segment × source.
/// `time_s` is the segment start.
pub fn write_csv<W: Write>(out: W, reports: &[(String, ImprovementReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (label, report) in reports {
        for seg in 0..report.segments() {
            for s in &report.sources {
                w.serialize(CsvRow {
                    method: label,
                    segment_index: seg,
                    time_s: (seg * report.segment_len) as f64 / report.sample_rate as f64,
                    source: s.source,
                    sdr_db: s.output.segments[seg].db,
                    sdr_improvement_db: s.segment_improvement[seg],
                })
                .map_err(|e| crate::Error::Io(std::io::Error::other(e)))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// `n` orthogonalized against `s` and scaled to `ratio · ‖s‖²`.
    fn orthogonal_noise(s: &[f64], seed: u64, ratio: f64) -> Vec<f64> {
        let mut n = noise(seed, s.len());
        let c = dot(&n, s) / dot(s, s);
        n.iter_mut().zip(s).for_each(|(v, x)| *v -= c * x);
        let g = (ratio * dot(s, s) / dot(&n, &n)).sqrt();
        n.iter().map(|v| v * g).collect()
    }

    #[test]
    fn identical_and_scaled_are_capped() {
        let s = noise(1, 1000);
        let a = si_sdr(&s, &s).unwrap();
        assert_eq!((a.db, a.flag), (SDR_CAP_DB, SdrFlag::CappedHigh));
        let y: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&s, &y).unwrap().flag, SdrFlag::CappedHigh);
        let y: Vec<f64> = s.iter().map(|v| -0.3 * v).collect();
        assert_eq!(si_sdr(&s, &y).unwrap().flag, SdrFlag::CappedHigh);
    }

    #[test]
    fn orthogonal_perturbation_gives_twenty_db() {
        let s = noise(2, 4000);
        let n = orthogonal_noise(&s, 3, 0.01);
        let y: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + b).collect();
        let v = si_sdr(&s, &y).unwrap();
        assert!((v.db - 20.0).abs() < 1e-6, "{}", v.db);
        assert_eq!(v.flag, SdrFlag::Finite);
    }

    #[test]
    fn degenerate_inputs() {
        let s = noise(4, 10);
        let z = vec![0.0; 10];
        assert!(si_sdr(&z, &s).is_err());
        let v = si_sdr(&s, &z).unwrap();
        assert_eq!((v.db, v.flag), (-SDR_CAP_DB, SdrFlag::CappedLow));
        assert!(si_sdr(&s, &s[..9]).is_err());
    }

    #[test]
    fn segment_counts_and_piecewise_values() {
        let l = 500;
        let s = noise(5, 2 * l);
        let two = seg_sdr(&s, &s, l).unwrap();
        assert_eq!(two.segments.len(), 2);
        assert!(two.segments.iter().all(|v| v.flag == SdrFlag::CappedHigh));
        assert_eq!(
            seg_sdr(&s[..2 * l - 1], &s[..2 * l - 1], l)
                .unwrap()
                .segments
                .len(),
            1
        );
        assert!(seg_sdr(&s, &s, 0).is_err());
        assert!(seg_sdr(&s[..l - 1], &s[..l - 1], l).is_err());

        let n2 = orthogonal_noise(&s[l..], 6, 0.01);
        let mut y = s.clone();
        y[l..].iter_mut().zip(&n2).for_each(|(a, b)| *a += b);
        let seg = seg_sdr(&s, &y, l).unwrap();
        assert_eq!(seg.segments[0].flag, SdrFlag::CappedHigh);
        assert!((seg.segments[1].db - 20.0).abs() < 1e-6);
    }

    #[test]
    fn permutation_recovery() {
        let refs: Vec<Vec<f64>> = (0..3).map(|i| noise(10 + i, 2000)).collect();
        assert_eq!(resolve_permutation(&refs, &refs).unwrap(), vec![0, 1, 2]);
        let swapped = vec![refs[1].clone(), refs[0].clone()];
        assert_eq!(
            resolve_permutation(&refs[..2], &swapped).unwrap(),
            vec![1, 0]
        );

        let shuffle = [2, 0, 1];
        let mut est = vec![Vec::new(); 3];
        for (k, &j) in shuffle.iter().enumerate() {
            let n = noise(20 + k as u64, 2000);
            let g = (0.1 * dot(&refs[k], &refs[k]) / dot(&n, &n)).sqrt();
            est[j] = refs[k].iter().zip(&n).map(|(a, b)| a + g * b).collect();
        }
        assert_eq!(resolve_permutation(&refs, &est).unwrap(), shuffle.to_vec());
        let scaled: Vec<Vec<f64>> = est
            .iter()
            .zip([0.1, 7.0, 2.5])
            .map(|(e, c)| e.iter().map(|v| v * c).collect())
            .collect();
        assert_eq!(
            resolve_permutation(&refs, &scaled).unwrap(),
            shuffle.to_vec()
        );
    }

    fn toy_truth() -> GroundTruth {
        let sources: Vec<Vec<f64>> = (0..2).map(|i| noise(30 + i, 4000)).collect();
        let images: Vec<Vec<f64>> = vec![
            sources[0].iter().map(|v| 0.9 * v).collect(),
            sources[1].iter().map(|v| 0.4 * v).collect(),
        ];
        let mic1: Vec<f64> = images[0]
            .iter()
            .zip(&images[1])
            .map(|(a, b)| a + b)
            .collect();
        let mic2: Vec<f64> = sources[0]
            .iter()
            .zip(&sources[1])
            .map(|(a, b)| 0.3 * a + b)
            .collect();
        GroundTruth {
            sample_rate: 1000,
            sources,
            mixtures: vec![mic1, mic2],
            images,
        }
    }

    #[test]
    fn improvement_of_mixture_is_zero_and_of_images_positive() {
        let gt = toy_truth();
        let mix = vec![gt.mixtures[0].clone(), gt.mixtures[0].clone()];
        let rep = sdr_improvement(&gt, &mix, 1000).unwrap();
        assert_eq!(rep.overall_improvement, 0.0);
        assert!(rep
            .sources
            .iter()
            .all(|s| s.segment_improvement.iter().all(|&v| v == 0.0)));

        let rep = sdr_improvement(&gt, &gt.images, 1000).unwrap();
        for s in &rep.sources {
            assert_eq!(s.output.overall.flag, SdrFlag::CappedHigh);
            assert!((s.overall_improvement - (SDR_CAP_DB - s.input.overall.db)).abs() < 1e-12);
            assert!(s.overall_improvement > 0.0);
        }
        assert!(sdr_improvement(&gt, &[gt.images[0].clone()], 1000).is_err());
    }

    #[test]
    fn csv_shape() {
        let gt = toy_truth();
        let rep = sdr_improvement(&gt, &gt.images, 1000).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &[("a".into(), rep.clone()), ("b".into(), rep)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "method,segment_index,time_s,source,sdr_db,sdr_improvement_db"
        );
        assert_eq!(lines.len(), 1 + 2 * 4 * 2);
        assert!(lines[3].starts_with("a,1,1.0,1,100.0,"));
    }

    proptest::proptest! {
        #[test]
        fn segments_are_independent(seed in 0u64..1000, segs in 1usize..5, c in 0.01f64..100.0, neg in proptest::bool::ANY) {
            let l = 64;
            let s = noise(seed, segs * l + 17);
            let y = noise(seed + 1, s.len());
            let seg = seg_sdr(&s, &y, l).unwrap();
            proptest::prop_assert_eq!(seg.segments.len(), segs);
            for (i, v) in seg.segments.iter().enumerate() {
                let r = i * l..(i + 1) * l;
                proptest::prop_assert_eq!(*v, si_sdr(&s[r.clone()], &y[r]).unwrap());
            }
            let c = if neg { -c } else { c };
            let scaled: Vec<f64> = s.iter().map(|v| c * v).collect();
            proptest::prop_assert_eq!(si_sdr(&s, &scaled).unwrap().flag, SdrFlag::CappedHigh);
        }
    }
}
