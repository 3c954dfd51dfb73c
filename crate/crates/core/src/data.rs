//! In-memory time-series datasets, synthetic tasks, standardization and
//! batching.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;
use crate::{seeded_rng, SeedRng};

const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    None,
    Regression(Vec<f64>),
    Classes { labels: Vec<usize>, n_classes: usize },
}

/// Equal-length `(T, C)` series stored contiguously; shorter series are
/// zero padded and keep their true length.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub t: usize,
    pub c: usize,
    /// `N · T · C` values.
    pub values: Vec<f64>,
    pub lengths: Vec<usize>,
    pub ids: Vec<String>,
    pub targets: Targets,
}

impl TimeSeriesDataset {
    /// Checks internal consistency.
    pub fn new(
        t: usize,
        c: usize,
        values: Vec<f64>,
        lengths: Vec<usize>,
        ids: Vec<String>,
        targets: Targets,
    ) -> Result<Self> {
        let n = lengths.len();
        if t == 0 || c == 0 {
            return Err(Error::Data(format!("series shape ({t}, {c}) is empty")));
        }
        if values.len() != n * t * c || ids.len() != n {
            return Err(Error::Data(format!(
                "{} values and {} ids for {n} series of shape ({t}, {c})",
                values.len(),
                ids.len()
            )));
        }
        if let Some(i) = lengths.iter().position(|&l| l == 0 || l > t) {
            return Err(Error::Data(format!(
                "series {} has length {} outside 1..={t}",
                ids[i], lengths[i]
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value in series {}", ids[i / (t * c)])));
        }
        match &targets {
            Targets::None => {}
            Targets::Regression(y) if y.len() != n => {
                return Err(Error::Data(format!("{} targets for {n} series", y.len())));
            }
            Targets::Regression(y) if y.iter().any(|v| !v.is_finite()) => {
                return Err(Error::Data("non-finite regression target".into()));
            }
            Targets::Regression(_) => {}
            Targets::Classes { labels, n_classes } => {
                if labels.len() != n {
                    return Err(Error::Data(format!("{} labels for {n} series", labels.len())));
                }
                if let Some(&label) = labels.iter().find(|&&l| l >= *n_classes) {
                    return Err(Error::LabelOutOfRange {
                        label,
                        n_classes: *n_classes,
                    });
                }
            }
        }
        Ok(TimeSeriesDataset {
            t,
            c,
            values,
            lengths,
            ids,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Whether any series is shorter than `t`.
    pub fn is_padded(&self) -> bool {
        self.lengths.iter().any(|&l| l < self.t)
    }

    pub fn series(&self, i: usize) -> &[f64] {
        let w = self.t * self.c;
        &self.values[i * w..(i + 1) * w]
    }

    /// Stacks the selected series into `(B, T, C)` with their lengths.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * self.t * self.c);
        for &i in idx {
            data.extend_from_slice(self.series(i));
        }
        let lengths = idx.iter().map(|&i| self.lengths[i]).collect();
        (Tensor::from_parts(vec![idx.len(), self.t, self.c], data), lengths)
    }

    pub fn regression_targets(&self, idx: &[usize]) -> Result<Vec<f64>> {
        match &self.targets {
            Targets::Regression(y) => Ok(idx.iter().map(|&i| y[i]).collect()),
            _ => Err(Error::Data("dataset has no regression targets".into())),
        }
    }

    pub fn class_labels(&self, idx: &[usize]) -> Result<Vec<usize>> {
        match &self.targets {
            Targets::Classes { labels, .. } => Ok(idx.iter().map(|&i| labels[i]).collect()),
            _ => Err(Error::Data("dataset has no class labels".into())),
        }
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self.targets {
            Targets::Classes { n_classes, .. } => Some(n_classes),
            _ => None,
        }
    }

    /// The selected series, in the given order.
    pub fn subset(&self, idx: &[usize]) -> TimeSeriesDataset {
        let (x, lengths) = self.gather(idx);
        let targets = match &self.targets {
            Targets::None => Targets::None,
            Targets::Regression(y) => Targets::Regression(idx.iter().map(|&i| y[i]).collect()),
            Targets::Classes { labels, n_classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
        };
        TimeSeriesDataset {
            t: self.t,
            c: self.c,
            values: x.into_data(),
            lengths,
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            targets,
        }
    }
}

/// Partition of `0..n` into batches of `b` (last one possibly short),
/// shuffled with `rng` when `shuffle` is set.
pub fn batchify(n: usize, b: usize, shuffle: bool, rng: Option<&mut SeedRng>) -> Result<Vec<Vec<usize>>> {
    if b == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let rng = rng.ok_or_else(|| Error::Config("shuffling needs a generator".into()))?;
        order.shuffle(rng);
    }
    Ok(order.chunks(b).map(<[usize]>::to_vec).collect())
}

/// Randomly moves `fraction` of `ds` into a validation set.
pub fn split_validation(
    ds: &TimeSeriesDataset,
    fraction: f64,
    rng: &mut SeedRng,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {fraction} outside (0, 1)")));
    }
    let n_valid = libm::round(ds.len() as f64 * fraction) as usize;
    if n_valid == 0 || n_valid == ds.len() {
        return Err(Error::Data(format!(
            "cannot split {} series at fraction {fraction}",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    let (valid, train) = order.split_at(n_valid);
    let (mut train, mut valid) = (train.to_vec(), valid.to_vec());
    train.sort_unstable();
    valid.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&valid)))
}

/// Per-channel affine map fitted on the valid steps of a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &TimeSeriesDataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot standardize from an empty training set".into()));
        }
        let c = train.c;
        let (mut sum, mut count) = (vec![0.0; c], 0usize);
        for i in 0..train.len() {
            for step in train.series(i).chunks_exact(c).take(train.lengths[i]) {
                sum.iter_mut().zip(step).for_each(|(s, v)| *s += v);
            }
            count += train.lengths[i];
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; c];
        for i in 0..train.len() {
            for step in train.series(i).chunks_exact(c).take(train.lengths[i]) {
                for ch in 0..c {
                    sq[ch] += (step[ch] - mean[ch]) * (step[ch] - mean[ch]);
                }
            }
        }
        let std = sq.iter().map(|s| math::sqrt(s / count as f64).max(STD_FLOOR)).collect();
        Ok(Standardizer { mean, std })
    }

    /// Applies the map to valid steps; padding stays zero.
    pub fn apply(&self, ds: &TimeSeriesDataset) -> TimeSeriesDataset {
        let mut out = ds.clone();
        let (t, c) = (ds.t, ds.c);
        for i in 0..ds.len() {
            let series = &mut out.values[i * t * c..(i + 1) * t * c];
            for step in series.chunks_exact_mut(c).take(ds.lengths[i]) {
                for ((v, m), s) in step.iter_mut().zip(&self.mean).zip(&self.std) {
                    *v = (*v - m) / s;
                }
            }
        }
        out
    }
}

/// Fits on `train` and transforms every given split.
pub fn standardize(
    train: &TimeSeriesDataset,
    others: &[&TimeSeriesDataset],
) -> Result<(TimeSeriesDataset, Vec<TimeSeriesDataset>)> {
    let s = Standardizer::fit(train)?;
    Ok((s.apply(train), others.iter().map(|d| s.apply(d)).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SynthKind {
    /// Class `k` is a sinusoid with `1 + 3k` cycles per series.
    #[default]
    FreqClass,
    /// Sinusoid whose amplitude is the regression target.
    NoisySineRegress,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::FreqClass => "freq-class",
            Self::NoisySineRegress => "noisy-sine-regress",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::FreqClass, Self::NoisySineRegress]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub t: usize,
    pub c: usize,
    pub n_classes: usize,
    pub noise: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            kind: SynthKind::FreqClass,
            t: 64,
            c: 2,
            n_classes: 4,
            noise: 0.1,
            n_train: 800,
            n_test: 200,
            seed: 0,
        }
    }
}

/// Cycles per series of class `k`.
pub fn class_frequency(k: usize) -> f64 {
    1.0 + 3.0 * k as f64
}

fn synth_split(spec: &SynthSpec, n: usize, prefix: &str, rng: &mut SeedRng) -> Result<TimeSeriesDataset> {
    let (t, c) = (spec.t, spec.c);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(format!("noise σ: {e}")))?;
    let mut values = Vec::with_capacity(n * t * c);
    let mut labels = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let two_pi = 2.0 * core::f64::consts::PI;
    for i in 0..n {
        let (freq, amp) = match spec.kind {
            SynthKind::FreqClass => {
                let k = i % spec.n_classes;
                labels.push(k);
                (class_frequency(k), 1.0)
            }
            SynthKind::NoisySineRegress => {
                let amp = rng.random_range(0.5..2.0);
                targets.push(amp);
                (rng.random_range(1..=4) as f64, amp)
            }
        };
        let phases: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..two_pi)).collect();
        for step in 0..t {
            for phase in &phases {
                let x = amp * math::sin(two_pi * freq * step as f64 / t as f64 + phase);
                values.push(x + noise.sample(rng));
            }
        }
    }
    let targets = match spec.kind {
        SynthKind::FreqClass => Targets::Classes {
            labels,
            n_classes: spec.n_classes,
        },
        SynthKind::NoisySineRegress => Targets::Regression(targets),
    };
    let ids = (0..n).map(|i| format!("{prefix}{i}")).collect();
    TimeSeriesDataset::new(t, c, values, vec![t; n], ids, targets)
}

/// Generates `(train, test)` deterministically from `spec.seed`. Class
/// labels cycle, so every class gets the same count when it divides the
/// split size.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    if spec.t == 0 || spec.c == 0 || spec.n_train == 0 {
        return Err(Error::Config(
            "synthetic spec needs positive T, C and train count".into(),
        ));
    }
    if spec.kind == SynthKind::FreqClass && spec.n_classes < 2 {
        return Err(Error::Config(
            "synthetic classification needs at least 2 classes".into(),
        ));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config(format!(
            "noise σ = {} must be finite and nonnegative",
            spec.noise
        )));
    }
    let mut rng = seeded_rng(spec.seed);
    let train = synth_split(spec, spec.n_train, "train-", &mut rng)?;
    let test = if spec.n_test == 0 {
        TimeSeriesDataset {
            values: Vec::new(),
            lengths: Vec::new(),
            ids: Vec::new(),
            targets: match &train.targets {
                Targets::Classes { n_classes, .. } => Targets::Classes {
                    labels: Vec::new(),
                    n_classes: *n_classes,
                },
                _ => Targets::Regression(Vec::new()),
            },
            ..train.clone()
        }
    } else {
        synth_split(spec, spec.n_test, "test-", &mut rng)?
    };
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn tiny(values: &[f64], lengths: &[usize], t: usize) -> TimeSeriesDataset {
        let ids = (0..lengths.len()).map(|i| i.to_string()).collect();
        TimeSeriesDataset::new(t, 1, values.to_vec(), lengths.to_vec(), ids, Targets::None).unwrap()
    }

    #[test]
    fn batch_sizes_and_order() {
        let b = batchify(10, 4, false, None).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
        assert_eq!(b[0], [0, 1, 2, 3]);
        let s1 = batchify(10, 4, true, Some(&mut seeded_rng(3))).unwrap();
        let s2 = batchify(10, 4, true, Some(&mut seeded_rng(3))).unwrap();
        assert_eq!(s1, s2);
        let mut all: Vec<usize> = s1.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(batchify(3, 0, false, None).is_err());
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let spec = SynthSpec::default();
        let (train, test) = synth_dataset(&spec).unwrap();
        assert_eq!((train.len(), test.len()), (800, 200));
        let labels = train.class_labels(&(0..800).collect::<Vec<_>>()).unwrap();
        for k in 0..4 {
            assert_eq!(labels.iter().filter(|&&l| l == k).count(), 200);
        }
        assert_eq!(synth_dataset(&spec).unwrap().0, train);
    }

    #[test]
    fn noiseless_classes_separate_by_dominant_frequency() {
        let spec = SynthSpec {
            n_classes: 2,
            noise: 0.0,
            c: 1,
            t: 32,
            n_train: 20,
            n_test: 0,
            ..Default::default()
        };
        let (train, _) = synth_dataset(&spec).unwrap();
        for i in 0..train.len() {
            let x = train.series(i);
            // DFT power at 1 and 4 cycles
            let power = |f: f64| {
                let (mut re, mut im) = (0.0, 0.0);
                for (s, v) in x.iter().enumerate() {
                    let a = 2.0 * core::f64::consts::PI * f * s as f64 / 32.0;
                    re += v * math::cos(a);
                    im += v * math::sin(a);
                }
                re * re + im * im
            };
            let dominant = if power(1.0) > power(4.0) { 0 } else { 1 };
            assert_eq!(dominant, i % 2);
        }
    }

    #[test]
    fn standardize_moments() {
        let (train, test) = synth_dataset(&SynthSpec {
            n_train: 40,
            n_test: 8,
            ..Default::default()
        })
        .unwrap();
        let (z, others) = standardize(&train, &[&test]).unwrap();
        let s = Standardizer::fit(&z).unwrap();
        for ch in 0..2 {
            assert!(s.mean[ch].abs() <= 1e-9 && (s.std[ch] - 1.0).abs() <= 1e-6);
        }
        assert_eq!(others[0].len(), 8);
        let again = Standardizer::fit(&z).unwrap().apply(&z);
        assert!(again.values.iter().zip(&z.values).all(|(a, b)| (a - b).abs() <= 1e-9));
    }

    #[test]
    fn constant_channel_and_padding() {
        let d = tiny(&[3.0, 3.0, 3.0, 3.0], &[2, 2], 2);
        let z = Standardizer::fit(&d).unwrap().apply(&d);
        assert_eq!(z.values, [0.0; 4]);
        // padded steps do not enter the statistics and stay zero
        let d = tiny(&[1.0, 3.0, 0.0, 2.0, 2.0, 2.0], &[2, 3], 3);
        let s = Standardizer::fit(&d).unwrap();
        assert!((s.mean[0] - 2.0).abs() < 1e-15);
        assert_eq!(s.apply(&d).values[2], 0.0);
    }

    #[test]
    fn validation_split_sizes() {
        let (train, _) = synth_dataset(&SynthSpec {
            n_train: 800,
            n_test: 0,
            ..Default::default()
        })
        .unwrap();
        let (tr, va) = split_validation(&train, 0.3, &mut seeded_rng(1)).unwrap();
        assert_eq!((tr.len(), va.len()), (560, 240));
    }

    #[test]
    fn invalid_datasets_rejected() {
        assert!(TimeSeriesDataset::new(2, 1, vec![0.0; 3], vec![2], vec!["a".into()], Targets::None).is_err());
        assert!(TimeSeriesDataset::new(2, 1, vec![0.0, f64::NAN], vec![2], vec!["a".into()], Targets::None).is_err());
        let bad = Targets::Classes {
            labels: vec![3],
            n_classes: 2,
        };
        assert!(matches!(
            TimeSeriesDataset::new(1, 1, vec![0.0], vec![1], vec!["a".into()], bad),
            Err(Error::LabelOutOfRange { .. })
        ));
    }
}
