//! Binary checkpoint format.
//!
//! ```text
//! b"RLCPCKPT"            magic
//! u32 LE                  format version
//! u64 LE                  header length in bytes
//! JSON header             dtype, schedule, architecture, param_count, provenance
//! param_count × dtype LE  flat parameter vector
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, DenoiserArch};
use super::schedule::{NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"RLCPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub schedule: ScheduleParams,
    pub arch: DenoiserArch,
    pub param_count: usize,
    /// Free-form JSON describing how the parameters were produced.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

/// A model plus the schedule it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Denoiser<T>,
    pub schedule: ScheduleParams,
    pub provenance: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: Denoiser<T>, schedule: &NoiseSchedule<T>) -> Self {
        Self {
            model,
            schedule: schedule.params(),
            provenance: serde_json::Value::Null,
        }
    }

    pub fn with_provenance(mut self, provenance: serde_json::Value) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            dtype: T::DTYPE.to_string(),
            schedule: self.schedule,
            arch: self.model.arch().clone(),
            param_count: self.model.param_count(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + self.model.param_count() * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for &p in self.model.params() {
            p.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(Error::Incompatible(format!(
                "checkpoint stores {} parameters, expected {}",
                header.dtype,
                T::DTYPE
            )));
        }
        header.arch.validate()?;
        if header.param_count != header.arch.param_count() {
            return Err(bad("parameter count disagrees with architecture"));
        }
        if header.schedule.steps != header.arch.steps {
            return Err(Error::Incompatible(format!(
                "schedule has {} steps, architecture {}",
                header.schedule.steps, header.arch.steps
            )));
        }
        let data = &body[hlen..];
        if data.len() != header.param_count * T::BYTES {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                header.param_count * T::BYTES,
                data.len()
            )));
        }
        let params: Vec<T> = data
            .chunks_exact(T::BYTES)
            .map(|c| T::read_le(c).expect("chunk has dtype width"))
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("checkpoint contains non-finite parameters".into()));
        }
        Ok(Self {
            model: Denoiser::from_params(header.arch, params)?,
            schedule: header.schedule,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the schedule this checkpoint was trained with.
    pub fn schedule(&self) -> Result<NoiseSchedule<T>> {
        NoiseSchedule::from_params(&self.schedule)
    }

    /// Errors naming the first difference from an expected configuration.
    pub fn check_compatible(&self, schedule: &ScheduleParams, arch: &DenoiserArch) -> Result<()> {
        if &self.schedule != schedule {
            return Err(Error::Incompatible(format!(
                "schedule mismatch: checkpoint {:?}, config {:?}",
                self.schedule, schedule
            )));
        }
        if self.model.arch() != arch {
            return Err(Error::Incompatible(format!(
                "architecture mismatch: checkpoint {:?}, config {:?}",
                self.model.arch(),
                arch
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::make_schedule;

    fn ckpt() -> Checkpoint<f64> {
        let arch = DenoiserArch {
            image_shape: (4, 4, 3),
            hidden: 4,
            template_hidden: 2,
            steps: 5,
            ..DenoiserArch::default()
        };
        let s = make_schedule(5, 1e-3, 0.1).unwrap();
        Checkpoint::new(Denoiser::new(arch, 3).unwrap(), &s).with_provenance(serde_json::json!({"stage": "test"}))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = ckpt();
        let bytes = c.to_bytes();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn f32_round_trip_and_dtype_check() {
        let arch = DenoiserArch {
            image_shape: (2, 2, 1),
            hidden: 3,
            template_hidden: 2,
            steps: 4,
            ..DenoiserArch::default()
        };
        let s = make_schedule::<f32>(4, 1e-3, 0.1).unwrap();
        let c = Checkpoint::new(Denoiser::<f32>::new(arch, 1).unwrap(), &s);
        let bytes = c.to_bytes();
        assert_eq!(Checkpoint::<f32>::from_bytes(&bytes).unwrap(), c);
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = ckpt().to_bytes();
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f64>::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[25] ^= 0xff;
        assert!(Checkpoint::<f64>::from_bytes(&bad).is_err());
        assert!(Checkpoint::<f64>::from_bytes(b"short").is_err());
    }

    #[test]
    fn compatibility_names_the_mismatch() {
        let c = ckpt();
        let arch = c.model.arch().clone();
        let mut other = c.schedule;
        other.beta_end = 0.2;
        let err = c.check_compatible(&other, &arch).unwrap_err().to_string();
        assert!(err.contains("schedule"), "{err}");
        let mut a2 = arch.clone();
        a2.hidden = 9;
        let err = c.check_compatible(&c.schedule, &a2).unwrap_err().to_string();
        assert!(err.contains("architecture"), "{err}");
    }
}
