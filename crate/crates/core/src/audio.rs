//! WAV decoding and fixed-length windowing.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Default window: about four seconds at 16 kHz.
pub const DEFAULT_WINDOW: usize = 64_600;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioSegment {
    pub utt_id: String,
    /// Normalized amplitude in `[-1, 1]`.
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioSegment {
    pub fn new(utt_id: impl Into<String>, samples: Vec<f32>) -> Result<Self> {
        let utt_id = utt_id.into();
        if samples.is_empty() {
            return Err(Error::Audio(format!("{utt_id}: zero-length audio")));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{utt_id}: sample {i}")));
        }
        Ok(Self {
            utt_id,
            samples,
            sample_rate: SAMPLE_RATE,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Decodes 16-bit PCM or 32-bit float WAV at 16 kHz, averaging channels.
///
/// Integer samples are divided by 32768. Float samples are clamped to `[-1, 1]`.
pub fn decode_wav(path: impl AsRef<Path>, utt_id: &str) -> Result<AudioSegment> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRateMismatch {
            expected: SAMPLE_RATE,
            actual: spec.sample_rate,
        });
    }
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| if v.is_finite() { v.clamp(-1.0, 1.0) } else { v }))
            .collect::<std::result::Result<_, _>>(),
        (format, bits) => {
            return Err(Error::Audio(format!(
                "{}: unsupported codec {format:?} {bits}-bit (16-bit PCM or 32-bit float only)",
                path.display()
            )))
        }
    }
    .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;

    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    AudioSegment::new(utt_id, samples)
}

/// Writes mono 16-bit PCM at 16 kHz.
pub fn write_wav_pcm16(path: impl AsRef<Path>, samples: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio(format!("{}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0)
            .round()
            .clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CropMode {
    /// Random window, drawn from the caller's seeded stream.
    TrainRandom,
    /// Window anchored at sample 0.
    EvalStart,
    /// Whole utterance, untouched.
    Full,
}

/// Where a fixed-length window sits on the self-tiled signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CropWindow {
    Full,
    Window { start: usize, len: usize },
}

impl CropWindow {
    /// Stable text form, used in cache keys.
    pub fn descriptor(&self) -> String {
        match self {
            CropWindow::Full => "full".to_string(),
            CropWindow::Window { start, len } => format!("w{start}+{len}"),
        }
    }
}

/// Chooses the window for a signal of `signal_len` samples. Signals shorter
/// than `target_len` are tiled until at least `target_len` long first.
pub fn choose_window<R: Rng + ?Sized>(
    signal_len: usize,
    target_len: usize,
    mode: CropMode,
    rng: &mut R,
) -> Result<CropWindow> {
    if target_len == 0 {
        return Err(Error::Validation("target_len must be positive".into()));
    }
    if signal_len == 0 {
        return Err(Error::Audio("cannot crop zero-length audio".into()));
    }
    let tiled_len = tiled_length(signal_len, target_len);
    let start = match mode {
        CropMode::Full => return Ok(CropWindow::Full),
        CropMode::EvalStart => 0,
        CropMode::TrainRandom => rng.gen_range(0..=tiled_len - target_len),
    };
    Ok(CropWindow::Window {
        start,
        len: target_len,
    })
}

/// True when [`choose_window`] cannot depend on the random stream, so the
/// window (and the features computed from it) may be reused.
pub fn window_is_fixed(signal_len: usize, target_len: usize, mode: CropMode) -> bool {
    match mode {
        CropMode::Full | CropMode::EvalStart => true,
        CropMode::TrainRandom => tiled_length(signal_len, target_len) == target_len,
    }
}

fn tiled_length(signal_len: usize, target_len: usize) -> usize {
    signal_len * target_len.div_ceil(signal_len).max(1)
}

pub fn apply_window(segment: &AudioSegment, window: CropWindow) -> AudioSegment {
    match window {
        CropWindow::Full => segment.clone(),
        CropWindow::Window { start, len } => {
            let n = segment.samples.len();
            let samples = (0..len).map(|i| segment.samples[(start + i) % n]).collect();
            AudioSegment {
                utt_id: segment.utt_id.clone(),
                samples,
                sample_rate: segment.sample_rate,
            }
        }
    }
}

/// Crops long inputs and repeat-pads short ones to exactly `target_len`
/// (except in [`CropMode::Full`]).
pub fn crop_or_pad<R: Rng + ?Sized>(
    segment: &AudioSegment,
    target_len: usize,
    mode: CropMode,
    rng: &mut R,
) -> Result<AudioSegment> {
    let window = choose_window(segment.samples.len(), target_len, mode, rng)?;
    Ok(apply_window(segment, window))
}
