//! Seeded two-class synthetic corpus for desk-scale end-to-end runs.
//!
//! "bonafide" utterances are harmonic tone mixtures with fundamentals in
//! 120–300 Hz (all partials below 1 kHz); "spoof" utterances are white noise
//! band-limited to 2–6 kHz. Every file is 16 kHz, 16-bit, mono.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::{write_wav_pcm16, DEFAULT_WINDOW, SAMPLE_RATE};
use crate::dataset::Label;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub seed: u64,
    pub duration_samples: usize,
    /// Range of the tone fundamental, Hz.
    pub fundamental_hz: (f64, f64),
    pub partials: usize,
    /// Pass band of the noise class, Hz.
    pub noise_band_hz: (f64, f64),
    /// Peak amplitude range; the upper end must not exceed 0.9.
    pub peak: (f64, f64),
    /// Prepended to utterance ids, so corpora with different prefixes can share a cache.
    pub id_prefix: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            seed: 7,
            duration_samples: DEFAULT_WINDOW,
            fundamental_hz: (120.0, 300.0),
            partials: 3,
            noise_band_hz: (2000.0, 6000.0),
            peak: (0.3, 0.9),
            id_prefix: "synth".into(),
        }
    }
}

impl SynthSpec {
    pub fn new(n_per_class: usize, seed: u64) -> Self {
        Self {
            n_per_class,
            seed,
            id_prefix: format!("synth{seed}"),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        let (f_lo, f_hi) = self.fundamental_hz;
        let (b_lo, b_hi) = self.noise_band_hz;
        let ok = self.n_per_class > 0
            && self.duration_samples > 0
            && self.partials > 0
            && 0.0 < f_lo
            && f_lo <= f_hi
            && f_hi * (self.partials as f64) < b_lo
            && b_lo < b_hi
            && b_hi <= nyquist
            && 0.0 < self.peak.0
            && self.peak.0 <= self.peak.1
            && self.peak.1 <= 0.9;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "invalid synthetic spec {self:?}"
            )))
        }
    }
}

fn normalize_peak(samples: &mut [f64], peak: f64) {
    let max = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        for s in samples {
            *s *= peak / max;
        }
    }
}

fn tone(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let f0 = rng.gen_range(spec.fundamental_hz.0..=spec.fundamental_hz.1);
    let phases: Vec<f64> = (0..spec.partials)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let sr = SAMPLE_RATE as f64;
    (0..spec.duration_samples)
        .map(|n| {
            let t = n as f64 / sr;
            phases
                .iter()
                .enumerate()
                .map(|(k, &ph)| {
                    let harmonic = (k + 1) as f64;
                    (std::f64::consts::TAU * f0 * harmonic * t + ph).sin() / harmonic
                })
                .sum()
        })
        .collect()
}

fn band_noise(spec: &SynthSpec, rng: &mut ChaCha8Rng, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = spec.duration_samples;
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(rng.gen_range(-1.0..1.0), 0.0))
        .collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let bin_hz = SAMPLE_RATE as f64 / n as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let freq = k.min(n - k) as f64 * bin_hz;
        if freq < spec.noise_band_hz.0 || freq > spec.noise_band_hz.1 {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// One generated utterance, before quantization.
pub struct SynthUtterance {
    pub utt_id: String,
    pub label: Label,
    pub samples: Vec<f32>,
}

/// Generates every utterance in memory. Bonafide first, then spoof.
pub fn generate_utterances(spec: &SynthSpec) -> Result<Vec<SynthUtterance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut planner = FftPlanner::new();
    let mut out = Vec::with_capacity(2 * spec.n_per_class);
    for label in [Label::Bonafide, Label::Spoof] {
        for i in 0..spec.n_per_class {
            let mut samples = match label {
                Label::Bonafide => tone(spec, &mut rng),
                Label::Spoof => band_noise(spec, &mut rng, &mut planner),
            };
            let peak = rng.gen_range(spec.peak.0..=spec.peak.1);
            normalize_peak(&mut samples, peak);
            out.push(SynthUtterance {
                utt_id: format!("{}_{}_{i:04}", spec.id_prefix, label.as_str()),
                label,
                samples: samples.into_iter().map(|v| v as f32).collect(),
            });
        }
    }
    Ok(out)
}

/// Writes `<utt_id>.wav` files and a two-field `protocol.txt` into `out_dir`.
/// Returns the protocol path.
pub fn generate_corpus(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut protocol = String::new();
    for utt in generate_utterances(spec)? {
        write_wav_pcm16(out_dir.join(format!("{}.wav", utt.utt_id)), &utt.samples)?;
        writeln!(protocol, "{} {}", utt.utt_id, utt.label).unwrap();
    }
    let path = out_dir.join("protocol.txt");
    fs::write(&path, protocol).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
