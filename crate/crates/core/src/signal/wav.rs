use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use hound::{SampleFormat, WavReader};

use super::{shipsear, Recording, ShipType, SignalError};

/// Raw decoded audio before a label is attached.
#[derive(Debug, Clone)]
pub struct WavAudio {
    pub id: u32,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// Recording id from a file name: the leading decimal digits of the stem
/// (`95.wav`, `6__10_07_13_marDeOnza.wav`). Other names get a stable id
/// derived from the stem, with the top bit set so it cannot collide with
/// dataset ids.
pub fn recording_id(path: &Path) -> u32 {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let digits: String = stem.chars().take_while(|c| c.is_ascii_digit()).collect();
    if let Ok(id) = digits.parse::<u32>() {
        if id < 1 << 31 {
            return id;
        }
    }
    crc32fast::hash(stem.as_bytes()) | 1 << 31
}

fn map_hound(path: &Path, e: hound::Error) -> SignalError {
    let p = path.display().to_string();
    match e {
        // the file itself opened fine, so read failures mean a short or broken body
        hound::Error::IoError(io) => SignalError::Format(p, io.to_string()),
        hound::Error::Unsupported => SignalError::UnsupportedFormat(p),
        other => SignalError::Format(p, other.to_string()),
    }
}

/// Decodes a PCM (8/16/24/32-bit integer) or 32-bit float WAV file. Only
/// channel 0 is kept; integer samples are scaled by `2^(bits-1)`, float
/// samples are divided by their peak if it exceeds 1.
pub fn read_wav(path: &Path) -> Result<WavAudio, SignalError> {
    let file = File::open(path).map_err(|e| SignalError::Io(path.display().to_string(), e.to_string()))?;
    let mut reader = WavReader::new(BufReader::new(file)).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let mut samples = Vec::with_capacity(reader.duration() as usize);
    match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ 1..=32) => {
            let scale = (1u64 << (bits - 1)) as f64;
            for (i, s) in reader.samples::<i32>().enumerate() {
                let s = s.map_err(|e| map_hound(path, e))?;
                if i % channels == 0 {
                    samples.push(s as f64 / scale);
                }
            }
        }
        (SampleFormat::Float, 32) => {
            for (i, s) in reader.samples::<f32>().enumerate() {
                let s = s.map_err(|e| map_hound(path, e))?;
                if i % channels == 0 {
                    samples.push(s as f64);
                }
            }
            let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > 1.0 {
                samples.iter_mut().for_each(|v| *v /= peak);
            }
        }
        _ => return Err(SignalError::UnsupportedFormat(path.display().to_string())),
    }
    if samples.is_empty() {
        return Err(SignalError::EmptyInput(path.display().to_string()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(SignalError::Format(
            path.display().to_string(),
            "non-finite sample".into(),
        ));
    }
    Ok(WavAudio {
        id: recording_id(path),
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Loads a dataset recording; the type label is looked up from the
/// published split table by recording id.
pub fn load_wav(path: &Path) -> Result<Recording, SignalError> {
    let audio = read_wav(path)?;
    let label = shipsear::type_of(audio.id)
        .ok_or_else(|| SignalError::UnknownLabel(format!("no type known for recording {}", audio.id)))?;
    Recording::new(audio.id, audio.samples, audio.sample_rate, label)
}

pub fn load_wav_labeled(path: &Path, type_label: ShipType) -> Result<Recording, SignalError> {
    let audio = read_wav(path)?;
    Recording::new(audio.id, audio.samples, audio.sample_rate, type_label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hound::{WavSpec, WavWriter};

    fn write(path: &Path, spec: WavSpec, n: usize, value: i32) {
        let mut w = WavWriter::create(path, spec).unwrap();
        for _ in 0..n * spec.channels as usize {
            match spec.sample_format {
                SampleFormat::Int => w.write_sample(value).unwrap(),
                SampleFormat::Float => w.write_sample(value as f32).unwrap(),
            }
        }
        w.finalize().unwrap();
    }

    fn pcm(bits: u16, channels: u16, rate: u32) -> WavSpec {
        WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: bits,
            sample_format: SampleFormat::Int,
        }
    }

    #[test]
    fn full_scale_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("95.wav");
        write(&p, pcm(16, 1, 8000), 8000, 32767);
        let rec = load_wav(&p).unwrap();
        assert_eq!(rec.id, 95);
        assert_eq!(rec.type_label, ShipType::Dredger);
        assert_eq!(rec.samples.len(), 8000);
        assert_eq!(rec.sample_rate, 8000);
        assert!((rec.duration() - 1.0).abs() < 1e-12);
        assert!(rec.samples.iter().all(|&v| (v - 1.0).abs() < 1e-4));
    }

    #[test]
    fn first_channel_of_stereo_24_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clip.wav");
        let mut w = WavWriter::create(&p, pcm(24, 2, 1000)).unwrap();
        for _ in 0..10 {
            w.write_sample(1 << 22).unwrap();
            w.write_sample(-(1 << 23)).unwrap();
        }
        w.finalize().unwrap();
        let a = read_wav(&p).unwrap();
        assert_eq!(a.samples, vec![0.5; 10]);
        assert!(a.id >= 1 << 31);
        assert!(load_wav(&p).is_err());
        let rec = load_wav_labeled(&p, ShipType::Sailboat).unwrap();
        assert_eq!(rec.type_label, ShipType::Sailboat);
    }

    #[test]
    fn float_wav() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("7.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 100,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut w = WavWriter::create(&p, spec).unwrap();
        for v in [0.25f32, -0.5, 0.75] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        assert_eq!(read_wav(&p).unwrap().samples, vec![0.25, -0.5, 0.75]);
    }

    #[test]
    fn error_paths() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("1.wav");
        write(&empty, pcm(16, 1, 8000), 0, 0);
        assert!(matches!(read_wav(&empty), Err(SignalError::EmptyInput(_))));

        let junk = dir.path().join("2.wav");
        std::fs::write(&junk, b"RIFF\x04\x00\x00\x00WAVEjunk").unwrap();
        assert!(matches!(read_wav(&junk), Err(SignalError::Format(..))));
        let not_riff = dir.path().join("3.wav");
        std::fs::write(&not_riff, b"RIFX\x24\x00\x00\x00WAVEfmt ").unwrap();
        assert!(matches!(read_wav(&not_riff), Err(SignalError::Format(..))));

        let missing = dir.path().join("none.wav");
        assert!(matches!(read_wav(&missing), Err(SignalError::Io(..))));
    }

    #[test]
    fn ids_from_names() {
        assert_eq!(recording_id(Path::new("/x/95.wav")), 95);
        assert_eq!(recording_id(Path::new("06__10_07_13.wav")), 6);
        assert_eq!(recording_id(Path::new("abc.wav")), recording_id(Path::new("abc.wav")));
    }
}
