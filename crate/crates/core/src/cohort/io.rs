//! Bag-file persistence.
//!
//! Binary layout: magic "PKTB", version u16 LE, d u32, bag count u32, then
//! per bag: bag_id and patient_id as u16-length-prefixed UTF-8, M u32, and
//! M*d row-major f32 LE features. Labels and registry metadata live in a
//! JSON sidecar next to the bag file (same path, `.json` extension).

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cohort, InstanceBag};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::survival::SurvivalLabel;

const MAGIC: &[u8; 4] = b"PKTB";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRecord {
    pub bag_id: String,
    pub patient_id: String,
    pub cancer: String,
    pub time_bin: usize,
    pub event: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub cancer: String,
    pub t_bins: usize,
    pub d: usize,
    pub labels: Vec<LabelRecord>,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// Features are stored as 32-bit floats; computation stays 64-bit.
pub fn save_bags(path: &Path, cohort: &Cohort) -> Result<()> {
    cohort.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(cohort.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(cohort.bags.len() as u32).to_le_bytes());
    for bag in &cohort.bags {
        write_str(&mut buf, &bag.bag_id)?;
        write_str(&mut buf, &bag.patient_id)?;
        buf.extend_from_slice(&(bag.n_instances() as u32).to_le_bytes());
        for &v in bag.features.values() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))?;

    let sidecar = Sidecar {
        cancer: cohort.cancer_code.clone(),
        t_bins: cohort.t_bins,
        d: cohort.dim(),
        labels: cohort
            .bags
            .iter()
            .zip(&cohort.labels)
            .map(|(b, l)| LabelRecord {
                bag_id: b.bag_id.clone(),
                patient_id: b.patient_id.clone(),
                cancer: b.cancer_code.clone(),
                time_bin: l.time_bin,
                event: l.event,
            })
            .collect(),
    };
    let sc_path = sidecar_path(path);
    let json = serde_json::to_vec_pretty(&sidecar)?;
    fs::write(&sc_path, json).map_err(|e| Error::io(sc_path.display().to_string(), e))?;
    Ok(())
}

fn write_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::Contract(format!("identifier too long: {s}")));
    }
    buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(bytes);
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                detail: format!(
                    "truncated file while reading {what}: expected {} bytes, {} available",
                    n,
                    self.data.len() - self.pos
                ),
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let offset = self.pos as u64;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Parse {
            offset,
            detail: format!("invalid UTF-8 in {what}"),
        })
    }
}

pub fn load_bags(path: &Path) -> Result<Cohort> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cur = Cursor { data: &data, pos: 0 };

    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: format!("malformed header: bad magic {magic:?}"),
        });
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let d = cur.u32("feature dimension")? as usize;
    let n_bags = cur.u32("bag count")? as usize;

    let sc_path = sidecar_path(path);
    let sc_json = fs::read(&sc_path).map_err(|e| Error::io(sc_path.display().to_string(), e))?;
    let sidecar: Sidecar = serde_json::from_slice(&sc_json)?;
    if sidecar.d != d {
        return Err(Error::Dimension {
            op_index: 0,
            detail: format!("bag file d={} but registry sidecar d={}", d, sidecar.d),
        });
    }
    if sidecar.labels.len() != n_bags {
        return Err(Error::Integrity(format!(
            "bag file holds {} bags but sidecar lists {} labels",
            n_bags,
            sidecar.labels.len()
        )));
    }

    let mut bags = Vec::with_capacity(n_bags);
    let mut labels = Vec::with_capacity(n_bags);
    for i in 0..n_bags {
        let bag_id = cur.string("bag_id")?;
        let patient_id = cur.string("patient_id")?;
        let m = cur.u32("instance count")? as usize;
        let payload = cur.take(m * d * 4, "feature payload")?;
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let features = DenseMatrix::from_vec(m, d, values)?;
        let rec = &sidecar.labels[i];
        if rec.bag_id != bag_id {
            return Err(Error::Integrity(format!(
                "sidecar label order mismatch at record {i}: {} vs {}",
                rec.bag_id, bag_id
            )));
        }
        bags.push(InstanceBag {
            bag_id,
            patient_id,
            cancer_code: rec.cancer.clone(),
            features,
        });
        labels.push(SurvivalLabel::new(rec.time_bin, rec.event));
    }
    let cohort = Cohort {
        cancer_code: sidecar.cancer,
        bags,
        labels,
        t_bins: sidecar.t_bins,
    };
    cohort.validate()?;
    Ok(cohort)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::synth::{synth_cohorts, SynthSpec};
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_lossless() {
        let (cohorts, _) = synth_cohorts(&SynthSpec::desk(1, 10, 17)).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("c0.pktb");
        // f32 storage: quantize through f32 first so the round trip is bitwise
        let mut original = cohorts[0].clone();
        for bag in &mut original.bags {
            for v in bag.features.values_mut() {
                *v = *v as f32 as f64;
            }
        }
        save_bags(&path, &original).unwrap();
        let loaded = load_bags(&path).unwrap();
        assert_eq!(loaded.cancer_code, original.cancer_code);
        assert_eq!(loaded.labels, original.labels);
        for (a, b) in loaded.bags.iter().zip(&original.bags) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.bag_id, b.bag_id);
        }
    }

    #[test]
    fn truncated_file_reports_expected_vs_actual() {
        let (cohorts, _) = synth_cohorts(&SynthSpec::desk(1, 4, 3)).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("c0.pktb");
        save_bags(&path, &cohorts[0]).unwrap();
        let mut data = std::fs::read(&path).unwrap();
        data.truncate(data.len() - 10);
        std::fs::write(&path, data).unwrap();
        match load_bags(&path) {
            Err(Error::Parse { detail, .. }) => {
                assert!(detail.contains("expected") && detail.contains("available"), "{detail}")
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_with_sidecar() {
        let (cohorts, _) = synth_cohorts(&SynthSpec::desk(1, 4, 3)).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("c0.pktb");
        save_bags(&path, &cohorts[0]).unwrap();
        let sc = sidecar_path(&path);
        let mut sidecar: Sidecar =
            serde_json::from_slice(&std::fs::read(&sc).unwrap()).unwrap();
        sidecar.d += 1;
        std::fs::write(&sc, serde_json::to_vec(&sidecar).unwrap()).unwrap();
        assert!(matches!(load_bags(&path), Err(Error::Dimension { .. })));
    }

    #[test]
    fn bad_magic_is_malformed_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.pktb");
        std::fs::write(&path, b"NOPE rest").unwrap();
        assert!(matches!(load_bags(&path), Err(Error::Parse { offset: 0, .. })));
    }
}
