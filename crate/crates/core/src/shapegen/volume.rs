//! Scalar volumes and their raw + JSON-sidecar file format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A C-ordered H×W×D scalar grid. Voxel (i, j, k) lies at `data[(i*W + j)*D + k]`
/// and has its center at coordinates (i, j, k).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub order: String,
}

impl Volume {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_data(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::Shape(format!(
                "volume data has {} values, dims {:?} need {}",
                data.len(),
                dims,
                dims[0] * dims[1] * dims[2]
            )));
        }
        Ok(Self {
            dims,
            spacing: [1.0; 3],
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Block-average downsampling by an integer factor per axis.
    pub fn downsample(&self, factor: usize) -> Volume {
        if factor <= 1 {
            return self.clone();
        }
        let nd = [
            self.dims[0].div_ceil(factor),
            self.dims[1].div_ceil(factor),
            self.dims[2].div_ceil(factor),
        ];
        let mut sum = vec![0.0; nd[0] * nd[1] * nd[2]];
        let mut cnt = vec![0u32; sum.len()];
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                for k in 0..self.dims[2] {
                    let t = ((i / factor) * nd[1] + j / factor) * nd[2] + k / factor;
                    sum[t] += self.get(i, j, k);
                    cnt[t] += 1;
                }
            }
        }
        let data = sum.iter().zip(&cnt).map(|(s, &c)| s / c as f64).collect();
        Volume {
            dims: nd,
            spacing: [
                self.spacing[0] * factor as f64,
                self.spacing[1] * factor as f64,
                self.spacing[2] * factor as f64,
            ],
            data,
        }
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader {
            dims: self.dims,
            spacing: self.spacing,
            dtype: "f32".into(),
            order: "C".into(),
        }
    }

    /// Sidecar path for a raw volume file: `x.raw` → `x.json`.
    pub fn sidecar_path(raw: &Path) -> PathBuf {
        raw.with_extension("json")
    }

    /// Writes little-endian f32 values plus a JSON sidecar.
    pub fn write(&self, raw: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::write(raw, bytes).map_err(|e| Error::io(raw, e))?;
        let side = Self::sidecar_path(raw);
        let json = serde_json::to_string_pretty(&self.header()).expect("header serializes");
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn read(raw: &Path) -> Result<Self> {
        let side = Self::sidecar_path(raw);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let header: VolumeHeader =
            serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        if header.dtype != "f32" || header.order != "C" {
            return Err(Error::format(
                &side,
                format!("unsupported dtype/order {}/{}", header.dtype, header.order),
            ));
        }
        let bytes = std::fs::read(raw).map_err(|e| Error::io(raw, e))?;
        let n = header.dims.iter().product::<usize>();
        if bytes.len() != n * 4 {
            return Err(Error::format(
                raw,
                format!("expected {} bytes, found {}", n * 4, bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Volume {
            dims: header.dims,
            spacing: header.spacing,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_roundtrip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        let data: Vec<f64> = (0..24).map(|i| (i as f32 * 0.37) as f64).collect();
        let v = Volume::from_data([2, 3, 4], data).unwrap();
        v.write(&path).unwrap();
        assert_eq!(Volume::read(&path).unwrap(), v);
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("v.json")).unwrap())
                .unwrap();
        assert_eq!(side["dims"], serde_json::json!([2, 3, 4]));
        assert_eq!(side["dtype"], "f32");
        assert_eq!(side["order"], "C");
        // first value little-endian
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[4..8], &(0.37f32).to_le_bytes());
    }

    #[test]
    fn downsample_averages_blocks() {
        let v = Volume::from_data([2, 2, 2], (0..8).map(|i| i as f64).collect()).unwrap();
        let d = v.downsample(2);
        assert_eq!(d.dims, [1, 1, 1]);
        assert_eq!(d.data, vec![3.5]);
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(Volume::from_data([2, 2, 2], vec![0.0; 7]).is_err());
    }
}
