use std::f64::consts::PI;

use super::DspError;

/// One second-order section, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

/// Q factors of the two sections of a 4th-order Butterworth response.
const BUTTER4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_5];

impl Biquad {
    fn lowpass(fs: f64, fc: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        let a0 = 1.0 + alpha;
        Biquad {
            b: [(1.0 - c) / 2.0 / a0, (1.0 - c) / a0, (1.0 - c) / 2.0 / a0],
            a: [1.0, -2.0 * c / a0, (1.0 - alpha) / a0],
        }
    }

    fn highpass(fs: f64, fc: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        let a0 = 1.0 + alpha;
        Biquad {
            b: [(1.0 + c) / 2.0 / a0, -(1.0 + c) / a0, (1.0 + c) / 2.0 / a0],
            a: [1.0, -2.0 * c / a0, (1.0 - alpha) / a0],
        }
    }

    /// Direct form II transposed.
    fn run(&self, x: &mut [f64]) {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let input = *v;
            let out = self.b[0] * input + z1;
            z1 = self.b[1] * input - self.a[1] * out + z2;
            z2 = self.b[2] * input - self.a[2] * out;
            *v = out;
        }
    }

    /// `|H(e^{jw})|` at `w = 2 pi f / fs`.
    fn magnitude(&self, w: f64) -> f64 {
        let eval = |c: &[f64; 3]| {
            let re = c[0] + c[1] * w.cos() + c[2] * (2.0 * w).cos();
            let im = -c[1] * w.sin() - c[2] * (2.0 * w).sin();
            (re * re + im * im).sqrt()
        };
        eval(&self.b) / eval(&self.a)
    }
}

/// 4th-order Butterworth band-pass (high-pass at `f_lo` cascaded with
/// low-pass at `f_hi`), run forward and backward for zero phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Bandpass {
    sections: Vec<Biquad>,
    sample_rate: f64,
}

impl Bandpass {
    pub fn new(sample_rate: f64, f_lo: f64, f_hi: f64) -> Result<Self, DspError> {
        let nyquist = sample_rate / 2.0;
        if !(f_lo > 0.0 && f_lo < f_hi && f_hi <= nyquist) {
            return Err(DspError::InvalidBand { f_lo, f_hi, nyquist });
        }
        let mut sections: Vec<Biquad> = BUTTER4_Q
            .iter()
            .map(|&q| Biquad::highpass(sample_rate, f_lo, q))
            .collect();
        // a cutoff exactly at Nyquist passes everything
        if f_hi < nyquist {
            sections.extend(BUTTER4_Q.iter().map(|&q| Biquad::lowpass(sample_rate, f_hi, q)));
        }
        Ok(Bandpass { sections, sample_rate })
    }

    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    /// Magnitude response of a single (one-directional) pass.
    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / self.sample_rate;
        self.sections.iter().map(|s| s.magnitude(w)).product()
    }

    fn pass(&self, x: &mut [f64]) {
        for s in &self.sections {
            s.run(x);
        }
    }

    /// Zero-phase filtering with odd reflection padding at both ends.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.pass(&mut ext);
        ext.reverse();
        self.pass(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_validation() {
        assert!(Bandpass::new(52734.0, 10.0, 26360.0).is_ok());
        assert!(Bandpass::new(52734.0, 10.0, 26367.0).is_ok());
        assert!(matches!(
            Bandpass::new(8000.0, 10.0, 26360.0),
            Err(DspError::InvalidBand { .. })
        ));
        assert!(Bandpass::new(8000.0, 0.0, 100.0).is_err());
        assert!(Bandpass::new(8000.0, 200.0, 100.0).is_err());
    }

    #[test]
    fn butterworth_corners() {
        let bp = Bandpass::new(8000.0, 100.0, 3000.0).unwrap();
        // -3 dB per 4th-order Butterworth edge at the cutoff, flat in between
        let m_lo = bp.magnitude(100.0);
        assert!((m_lo - 0.5f64.sqrt()).abs() < 0.01, "{m_lo}");
        assert!((bp.magnitude(700.0) - 1.0).abs() < 0.01);
        assert!(bp.magnitude(10.0) < 1e-3);
    }
}
