use std::path::Path;

use crate::error::{Error, Result};

/// Sample encodings accepted by [`Waveform::write_wav`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

/// A stereo signal: two equal-length channels at a fixed sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    channels: [Vec<f64>; 2],
    sample_rate: u32,
}

impl Waveform {
    pub fn new(left: Vec<f64>, right: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if left.len() != right.len() {
            return Err(Error::Shape(format!(
                "stereo channels differ in length ({} vs {})",
                left.len(),
                right.len()
            )));
        }
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if !left.iter().chain(&right).all(|x| x.is_finite()) {
            return Err(Error::Numeric("waveform contains non-finite samples".into()));
        }
        Ok(Self { channels: [left, right], sample_rate })
    }

    /// Duplicates a single channel into both sides.
    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(samples.clone(), samples, sample_rate)
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self { channels: [vec![0.0; len], vec![0.0; len]], sample_rate }
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>; 2] {
        &self.channels
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Right-pads both channels with zeros to the next multiple of `m`.
    pub fn padded_to_multiple(&self, m: usize) -> Waveform {
        let len = self.len().div_ceil(m) * m;
        self.resized(len)
    }

    /// Truncates or zero-pads to exactly `len` frames.
    pub fn resized(&self, len: usize) -> Waveform {
        let fit = |c: &Vec<f64>| {
            let mut c = c.clone();
            c.resize(len, 0.0);
            c
        };
        Waveform { channels: [fit(&self.channels[0]), fit(&self.channels[1])], sample_rate: self.sample_rate }
    }

    pub fn slice(&self, start: usize, len: usize) -> Waveform {
        let end = (start + len).min(self.len());
        Waveform {
            channels: [self.channels[0][start..end].to_vec(), self.channels[1][start..end].to_vec()],
            sample_rate: self.sample_rate,
        }
    }

    /// Elementwise sum of equal-length, equal-rate signals.
    pub fn mix(parts: &[&Waveform]) -> Result<Waveform> {
        let first = parts.first().ok_or_else(|| Error::Data("cannot mix zero stems".into()))?;
        let mut out = Waveform::silence(first.len(), first.sample_rate);
        for p in parts {
            if p.len() != first.len() {
                return Err(Error::Data(format!("stem lengths differ ({} vs {})", p.len(), first.len())));
            }
            if p.sample_rate != first.sample_rate {
                return Err(Error::Data("stem sample rates differ".into()));
            }
            for ch in 0..2 {
                for (o, x) in out.channels[ch].iter_mut().zip(&p.channels[ch]) {
                    *o += x;
                }
            }
        }
        Ok(out)
    }

    /// Reads 16-bit PCM or 32-bit float WAV (mono is duplicated to stereo).
    /// When `expected_rate` is given, a different file rate is an error.
    pub fn read_wav(path: impl AsRef<Path>, expected_rate: Option<u32>) -> Result<Waveform> {
        let path = path.as_ref();
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if let Some(rate) = expected_rate {
            if rate != spec.sample_rate {
                return Err(Error::Data(format!(
                    "{}: sample rate {} Hz, expected {} Hz",
                    path.display(),
                    spec.sample_rate,
                    rate
                )));
            }
        }
        let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f64 / 32768.0))
                .collect::<std::result::Result<_, _>>()?,
            (hound::SampleFormat::Float, 32) => {
                reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>()?
            }
            (fmt, bits) => {
                return Err(Error::Format(format!("{}: unsupported sample format {fmt:?}/{bits}", path.display())))
            }
        };
        match spec.channels {
            1 => Waveform::mono(interleaved, spec.sample_rate),
            2 => {
                let left = interleaved.iter().step_by(2).copied().collect();
                let right = interleaved.iter().skip(1).step_by(2).copied().collect();
                Waveform::new(left, right, spec.sample_rate)
            }
            n => Err(Error::Format(format!("{}: {n} channels, expected mono or stereo", path.display()))),
        }
    }

    /// Writes interleaved stereo. PCM16 output is clipped to [-1, 1].
    pub fn write_wav(&self, path: impl AsRef<Path>, format: SampleFormat) -> Result<()> {
        let (bits, sample_format) = match format {
            SampleFormat::Pcm16 => (16, hound::SampleFormat::Int),
            SampleFormat::Float32 => (32, hound::SampleFormat::Float),
        };
        let spec = hound::WavSpec { channels: 2, sample_rate: self.sample_rate, bits_per_sample: bits, sample_format };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for i in 0..self.len() {
            for ch in &self.channels {
                match format {
                    SampleFormat::Pcm16 => writer.write_sample((ch[i].clamp(-1.0, 1.0) * 32767.0).round() as i16)?,
                    SampleFormat::Float32 => writer.write_sample(ch[i] as f32)?,
                }
            }
        }
        writer.finalize()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unequal_channels_and_nan() {
        assert!(matches!(Waveform::new(vec![0.0; 3], vec![0.0; 2], 8000), Err(Error::Shape(_))));
        assert!(matches!(Waveform::new(vec![f64::NAN], vec![0.0], 8000), Err(Error::Numeric(_))));
    }

    #[test]
    fn wav_round_trip_float_and_pcm() {
        let dir = tempfile::tempdir().unwrap();
        let left: Vec<f64> = (0..100).map(|i| (i as f64 * 0.1).sin() * 0.5).collect();
        let right: Vec<f64> = left.iter().map(|x| -x).collect();
        let w = Waveform::new(left, right, 22050).unwrap();

        let p = dir.path().join("f.wav");
        w.write_wav(&p, SampleFormat::Float32).unwrap();
        let back = Waveform::read_wav(&p, Some(22050)).unwrap();
        for ch in 0..2 {
            for (a, b) in w.channel(ch).iter().zip(back.channel(ch)) {
                assert_eq!(*a as f32, *b as f32);
            }
        }

        let p = dir.path().join("i.wav");
        w.write_wav(&p, SampleFormat::Pcm16).unwrap();
        let back = Waveform::read_wav(&p, None).unwrap();
        for (a, b) in w.channel(1).iter().zip(back.channel(1)) {
            assert!((a - b).abs() < 1.0 / 16000.0);
        }
        assert!(matches!(Waveform::read_wav(&p, Some(44100)), Err(Error::Data(_))));
    }

    #[test]
    fn padding_to_multiple() {
        let w = Waveform::silence(1000, 16000);
        assert_eq!(w.padded_to_multiple(256).len(), 1024);
        assert_eq!(w.padded_to_multiple(250).len(), 1000);
    }
}
