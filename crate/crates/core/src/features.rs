//! Log-mel filterbank features and frame stacking.

use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelSpec {
    fn default() -> Self {
        Self::for_rate(8000)
    }
}

impl MelSpec {
    pub fn for_rate(sample_rate: u32) -> Self {
        let window = (sample_rate as f64 * 0.010).round() as usize;
        Self {
            sample_rate,
            n_mels: 23,
            window_ms: 10.0,
            hop_ms: 10.0,
            fft_size: window.max(1).next_power_of_two(),
            fmin: 0.0,
            fmax: sample_rate as f64 / 2.0,
        }
    }

    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    /// Samples consumed per analysis frame: the window zero-extended to
    /// the FFT size.
    pub fn frame_len(&self) -> usize {
        self.fft_size.max(self.window_samples())
    }

    pub fn num_frames(&self, samples: usize) -> usize {
        let n = self.frame_len();
        if samples < n {
            0
        } else {
            (samples - n) / self.hop_samples() + 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.n_mels == 0 {
            return Err(Error::InvalidArgument("n_mels must be ≥ 1".into()));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(Error::InvalidArgument(format!(
                "need 0 ≤ fmin < fmax ≤ {nyquist}, got {}..{}",
                self.fmin, self.fmax
            )));
        }
        if self.window_samples() == 0 || self.hop_samples() == 0 {
            return Err(Error::InvalidArgument("window and hop must span at least one sample".into()));
        }
        if self.fft_size < self.window_samples() {
            return Err(Error::InvalidArgument("fft_size shorter than the window".into()));
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies of the `n_mels` triangular filters.
pub fn mel_centers(spec: &MelSpec) -> Vec<f64> {
    let lo = hz_to_mel(spec.fmin);
    let hi = hz_to_mel(spec.fmax);
    let step = (hi - lo) / (spec.n_mels + 1) as f64;
    (1..=spec.n_mels).map(|i| mel_to_hz(lo + step * i as f64)).collect()
}

/// `n_mels × (fft_size/2 + 1)` triangular filterbank.
pub fn mel_filterbank(spec: &MelSpec) -> Vec<Vec<f64>> {
    let lo = hz_to_mel(spec.fmin);
    let hi = hz_to_mel(spec.fmax);
    let step = (hi - lo) / (spec.n_mels + 1) as f64;
    let edges: Vec<f64> = (0..spec.n_mels + 2).map(|i| mel_to_hz(lo + step * i as f64)).collect();
    let bins = spec.fft_size / 2 + 1;
    let bin_hz = spec.sample_rate as f64 / spec.fft_size as f64;
    (0..spec.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// `F × n_mels` log-mel features of a mono waveform.
pub fn log_mel(wave: &[f64], spec: &MelSpec) -> Result<Tensor> {
    spec.validate()?;
    if wave.is_empty() {
        return Err(Error::EmptyInput("waveform has no samples".into()));
    }
    let frames = spec.num_frames(wave.len());
    if frames == 0 {
        return Err(Error::EmptyInput(format!(
            "{} samples is shorter than one {}-sample frame",
            wave.len(),
            spec.frame_len()
        )));
    }
    let n = spec.frame_len();
    let fft_n = n.next_power_of_two();
    let win = hann(spec.window_samples());
    let bank = mel_filterbank(spec);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_n);
    let hop = spec.hop_samples();
    let mut buf = vec![Complex::new(0.0, 0.0); fft_n];
    let mut out = Vec::with_capacity(frames * spec.n_mels);
    for f in 0..frames {
        let start = f * hop;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, w) in win.iter().enumerate() {
            buf[i].re = wave[start + i] * w;
        }
        fft.process(&mut buf);
        let mags: Vec<f64> = buf[..fft_n / 2 + 1].iter().map(|c| c.norm()).collect();
        for filt in &bank {
            let e: f64 = filt.iter().zip(&mags).map(|(a, b)| a * b).sum();
            out.push((e + LOG_FLOOR).ln());
        }
    }
    Tensor::new(vec![frames, spec.n_mels], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameStack {
    pub context: usize,
    pub hop: usize,
}

impl Default for FrameStack {
    fn default() -> Self {
        Self { context: 15, hop: 10 }
    }
}

impl FrameStack {
    pub fn num_frames(&self, mel_frames: usize) -> usize {
        if mel_frames < self.context {
            0
        } else {
            (mel_frames - self.context) / self.hop + 1
        }
    }
}

/// Concatenates `context` consecutive rows every `hop` rows.
pub fn stack_frames(mel: &Tensor, cfg: FrameStack) -> Result<Tensor> {
    if cfg.context == 0 || cfg.hop == 0 {
        return Err(Error::InvalidArgument("context and hop must be ≥ 1".into()));
    }
    let (f, d) = mel.dims2();
    let t = cfg.num_frames(f);
    if t == 0 {
        return Err(Error::TooShort(format!(
            "{f} mel frames, stacking needs at least {}",
            cfg.context
        )));
    }
    let width = d * cfg.context;
    let mut out = Vec::with_capacity(t * width);
    for i in 0..t {
        let start = i * cfg.hop * d;
        out.extend_from_slice(&mel.data()[start..start + width]);
    }
    Tensor::new(vec![t, width], out)
}

/// 16-bit PCM mono WAV, samples scaled to `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<(u32, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes).map_err(|msg| Error::Format(format!("{}: {msg}", path.display())))
}

fn parse_wav(b: &[u8]) -> std::result::Result<(u32, Vec<f64>), String> {
    if b.len() < 12 || &b[0..4] != b"RIFF" || &b[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let u16le = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
    let u32le = |i: usize| u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
    let mut pos = 12;
    let mut rate = None;
    while pos + 8 <= b.len() {
        let id = &b[pos..pos + 4];
        let len = u32le(pos + 4) as usize;
        let body = pos + 8;
        if body + len > b.len() {
            return Err("truncated chunk".into());
        }
        if id == b"fmt " {
            if len < 16 {
                return Err("short fmt chunk".into());
            }
            let (format, channels, bits) = (u16le(body), u16le(body + 2), u16le(body + 14));
            if format != 1 || channels != 1 || bits != 16 {
                return Err(format!(
                    "only 16-bit mono PCM is supported (format {format}, {channels} channels, {bits} bits)"
                ));
            }
            rate = Some(u32le(body + 4));
        } else if id == b"data" {
            let rate = rate.ok_or("data chunk before fmt chunk")?;
            let samples = b[body..body + len]
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                .collect();
            return Ok((rate, samples));
        }
        pos = body + len + (len & 1);
    }
    Err("no data chunk".into())
}

pub fn write_wav(path: &Path, sample_rate: u32, samples: &[f64]) -> Result<()> {
    let data_len = samples.len() as u32 * 2;
    let mut b = Vec::with_capacity(44 + data_len as usize);
    b.extend_from_slice(b"RIFF");
    b.extend_from_slice(&(36 + data_len).to_le_bytes());
    b.extend_from_slice(b"WAVEfmt ");
    b.extend_from_slice(&16u32.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&sample_rate.to_le_bytes());
    b.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    b.extend_from_slice(&2u16.to_le_bytes());
    b.extend_from_slice(&16u16.to_le_bytes());
    b.extend_from_slice(b"data");
    b.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        b.extend_from_slice(&q.to_le_bytes());
    }
    crate::checkpoint::write_atomic(path, &b)
}

/// Headerless little-endian `f32` samples.
pub fn read_raw_f32(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("{}: length not a multiple of 4", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Reads `.wav` as PCM and anything else as raw `f32`; raw files are
/// assumed to be at `default_rate`.
pub fn read_audio(path: &Path, default_rate: u32) -> Result<(u32, Vec<f64>)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("wav") => read_wav(path),
        _ => Ok((default_rate, read_raw_f32(path)?)),
    }
}

/// Waveform to stacked `T × (n_mels·context)` features.
pub fn extract(wave: &[f64], spec: &MelSpec, stack: FrameStack) -> Result<Tensor> {
    stack_frames(&log_mel(wave, spec)?, stack)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sine(freq: f64, rate: u32, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect()
    }

    /// Naive DFT magnitude of one windowed frame.
    fn dft_mags(frame: &[f64], n: usize) -> Vec<f64> {
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, x) in frame.iter().enumerate() {
                    let a = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn default_spec_sizes() {
        let s = MelSpec::default();
        assert_eq!((s.window_samples(), s.hop_samples(), s.fft_size), (80, 80, 128));
    }

    #[test]
    fn silence_is_log_floor() {
        let m = log_mel(&vec![0.0; 4000], &MelSpec::default()).unwrap();
        assert!(m.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn one_second_gives_99_frames() {
        let m = log_mel(&sine(440.0, 8000, 8000), &MelSpec::default()).unwrap();
        assert_eq!(m.shape(), &[99, 23]);
    }

    #[test]
    fn too_short_and_empty() {
        let s = MelSpec::default();
        assert!(matches!(log_mel(&[], &s), Err(Error::EmptyInput(_))));
        assert!(matches!(log_mel(&[0.0; 127], &s), Err(Error::EmptyInput(_))));
        assert_eq!(log_mel(&[0.0; 128], &s).unwrap().rows(), 1);
    }

    #[test]
    fn sine_at_band_center_peaks_in_that_band() {
        let spec = MelSpec::default();
        let centers = mel_centers(&spec);
        let bank = mel_filterbank(&spec);
        let win = hann(spec.window_samples());
        for band in [8, 12, 16, 20] {
            let wave = sine(centers[band], spec.sample_rate, 4000);
            // oracle: naive DFT of the first frame through the filterbank
            let frame: Vec<f64> = (0..spec.fft_size)
                .map(|i| if i < win.len() { wave[i] * win[i] } else { 0.0 })
                .collect();
            let mags = dft_mags(&frame, spec.fft_size);
            let energies: Vec<f64> = bank.iter().map(|f| f.iter().zip(&mags).map(|(a, b)| a * b).sum()).collect();
            let oracle = argmax(&energies);
            assert_eq!(oracle, band, "oracle disagrees for band {band}");
            let m = log_mel(&wave, &spec).unwrap();
            for r in 0..m.rows() {
                assert_eq!(argmax(m.row(r)), band, "frame {r}");
            }
            assert!((m.at(0, band) - (energies[band] + LOG_FLOOR).ln()).abs() < 1e-9);
        }
    }

    fn argmax(v: &[f64]) -> usize {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
    }

    #[test]
    fn filterbank_triangles_peak_below_one() {
        let bank = mel_filterbank(&MelSpec::default());
        assert_eq!(bank.len(), 23);
        assert!(bank.iter().all(|f| f.len() == 65));
        assert!(bank.iter().flatten().all(|&w| (0.0..=1.0).contains(&w)));
        assert!(MelSpec { fmax: 5000.0, ..MelSpec::default() }.validate().is_err());
        assert!(MelSpec { n_mels: 0, ..MelSpec::default() }.validate().is_err());
    }

    #[test]
    fn mel_scale_roundtrip() {
        for f in [0.0, 100.0, 700.0, 3999.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn stack_single_window() {
        let mel = Tensor::new(vec![15, 23], (0..345).map(|i| i as f64).collect()).unwrap();
        let s = stack_frames(&mel, FrameStack::default()).unwrap();
        assert_eq!(s.shape(), &[1, 345]);
        assert_eq!(s.data(), mel.data());
    }

    #[test]
    fn stack_counts_and_index_rows() {
        let mut mel = Tensor::zeros(&[1000, 23]);
        for r in 0..1000 {
            for c in 0..23 {
                mel.set(r, c, r as f64);
            }
        }
        let s = stack_frames(&mel, FrameStack::default()).unwrap();
        assert_eq!(s.shape(), &[99, 345]);
        for t in 0..99 {
            assert!(s.row(t)[..23].iter().all(|&v| v == (10 * t) as f64));
        }
        assert!(matches!(
            stack_frames(&Tensor::zeros(&[14, 23]), FrameStack::default()),
            Err(Error::TooShort(_))
        ));
    }

    #[test]
    fn wav_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w: Vec<f64> = sine(300.0, 8000, 1000).iter().map(|x| x * 0.5).collect();
        write_wav(&p, 8000, &w).unwrap();
        let (rate, r) = read_audio(&p, 16000).unwrap();
        assert_eq!(rate, 8000);
        assert_eq!(r.len(), 1000);
        assert!(r.iter().zip(&w).all(|(a, b)| (a - b).abs() < 1.0 / 32768.0));
        std::fs::write(&p, b"RIFF0000WAVE").unwrap();
        assert!(matches!(read_wav(&p), Err(Error::Format(_))));
    }

    #[test]
    fn raw_f32_reader() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f32");
        let bytes: Vec<u8> = [0.5f32, -0.25].iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&p, bytes).unwrap();
        assert_eq!(read_raw_f32(&p).unwrap(), vec![0.5, -0.25]);
        std::fs::write(&p, [0u8; 3]).unwrap();
        assert!(read_raw_f32(&p).is_err());
    }

    proptest! {
        #[test]
        fn stacking_is_a_gather(f in 1usize..60, d in 1usize..5, ctx in 1usize..8, hop in 1usize..6) {
            let mel = Tensor::new(vec![f, d], (0..f * d).map(|i| i as f64 * 0.5 + 0.25).collect()).unwrap();
            let cfg = FrameStack { context: ctx, hop };
            match stack_frames(&mel, cfg) {
                Ok(s) => {
                    prop_assert_eq!(s.rows(), (f - ctx) / hop + 1);
                    for t in 0..s.rows() {
                        for (j, &v) in s.row(t).iter().enumerate() {
                            prop_assert_eq!(v, mel.data()[t * hop * d + j]);
                        }
                    }
                }
                Err(_) => prop_assert!(f < ctx),
            }
        }
    }
}
