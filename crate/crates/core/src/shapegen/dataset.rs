//! Supershape dataset generation: config, per-sample pipeline, manifest.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::image::{synthesize_image, IntensityConfig};
use super::mesh::SurfaceMesh;
use super::points::{template_mesh, PointModel};
use super::superformula::SupershapeParams;
use super::volume::Volume;
use super::voxel::voxelize;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEMPLATE_FILE: &str = "template.off";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub dims: [usize; 3],
    pub num_points: usize,
    /// (longitudes, latitude rings) of the surface mesh grid.
    pub mesh_resolution: [usize; 2],
    pub blur_range: [f64; 2],
    pub intensity: IntensityConfig,
    pub max_retries: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl DatasetConfig {
    /// 300/50/50 split, 64 points, 32³ volumes.
    pub fn desk_scale() -> Self {
        Self {
            seed: 0,
            train: 300,
            val: 50,
            test: 50,
            dims: [32, 32, 32],
            num_points: 64,
            mesh_resolution: [64, 32],
            blur_range: [1.0, 8.0],
            intensity: IntensityConfig::default(),
            max_retries: 100,
        }
    }

    /// 1000/100/100 split with 128 correspondence points.
    pub fn paper_scale() -> Self {
        Self {
            train: 1000,
            val: 100,
            test: 100,
            num_points: 128,
            dims: [64, 64, 64],
            mesh_resolution: [96, 48],
            ..Self::desk_scale()
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn validate(&self) -> Result<()> {
        if self.train < 2 {
            return Err(Error::Config("need at least 2 training samples".into()));
        }
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::Config(format!("volume dims {:?} below 8", self.dims)));
        }
        if self.num_points < 4 {
            return Err(Error::Config("need at least 4 correspondence points".into()));
        }
        if self.mesh_resolution.iter().any(|&r| r < 8) {
            return Err(Error::Config(format!(
                "mesh resolution {:?} below 8",
                self.mesh_resolution
            )));
        }
        let [lo, hi] = self.blur_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("blur range {:?} invalid", self.blur_range)));
        }
        if self.intensity.foreground_mean == self.intensity.background_mean
            && !self.intensity.allow_zero_contrast
        {
            return Err(Error::Config("zero intensity contrast".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    ShapeOutlier,
    ImageOutlier,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::ShapeOutlier => "shape_outlier",
            Split::ImageOutlier => "image_outlier",
        }
    }

    pub fn is_test_like(&self) -> bool {
        matches!(self, Split::Test | Split::ShapeOutlier | Split::ImageOutlier)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub index: usize,
    pub split: Split,
    pub image: String,
    pub points: String,
    pub mesh: String,
    pub params: SupershapeParams,
    pub blur_size: f64,
    /// Stream of the dataset-seeded ChaCha generator that produced this sample.
    pub rng_stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub config: DatasetConfig,
    pub template: String,
    pub samples: Vec<SampleRecord>,
    /// Set when outlier splits overlap.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.ids(split).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }

    /// Loads and validates a manifest: config hash, split disjointness, and
    /// existence of every referenced file.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.config.hash() != m.config_hash {
            return Err(Error::format(&path, "config hash does not match config"));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &m.samples {
            if !seen.insert(&s.id) {
                return Err(Error::format(&path, format!("sample {} listed twice", s.id)));
            }
            for rel in [&s.image, &s.points, &s.mesh] {
                let p = root.join(rel);
                if !p.exists() {
                    return Err(Error::format(&path, format!("missing file {}", p.display())));
                }
            }
        }
        Ok(m)
    }
}

/// Raw generated shape before placement in the voxel grid.
#[derive(Debug, Clone)]
pub struct GeneratedShape {
    pub params: SupershapeParams,
    pub mesh: SurfaceMesh,
    pub points: PointModel,
}

/// Samples supershape parameters and builds the surface mesh and the point
/// model at the shared parameter locations.
pub fn generate_shape<R: Rng + ?Sized>(
    rng: &mut R,
    resolution: [usize; 2],
    num_points: usize,
    max_retries: usize,
) -> Result<GeneratedShape> {
    if resolution.iter().any(|&r| r < 8) {
        return Err(Error::Config(format!("grid resolution {resolution:?} below 8")));
    }
    let params = SupershapeParams::sample(rng, max_retries)?;
    let mesh = SurfaceMesh::supershape(&params, resolution[0], resolution[1])?;
    let points = PointModel::on_supershape(&params, num_points)?;
    Ok(GeneratedShape {
        params,
        mesh,
        points,
    })
}

/// Generator for sample `index`: the dataset seed selects the key, the index
/// selects the stream, so samples are independent of generation order.
pub fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One fully generated sample in voxel space.
#[derive(Debug, Clone)]
pub struct Sample {
    pub params: SupershapeParams,
    pub mesh: SurfaceMesh,
    pub points: PointModel,
    pub image: Volume,
    pub blur_size: f64,
}

pub fn generate_sample(cfg: &DatasetConfig, index: usize) -> Result<Sample> {
    let mut rng = sample_rng(cfg.seed, index as u64);
    let shape = generate_shape(&mut rng, cfg.mesh_resolution, cfg.num_points, cfg.max_retries)?;
    let t = shape.mesh.grid_transform(cfg.dims)?;
    let mesh = shape.mesh.transformed(&t);
    let points = PointModel {
        points: shape.points.points.iter().map(|&p| t.apply(p)).collect(),
    };
    let mask = voxelize(&mesh, cfg.dims)?;
    let [lo, hi] = cfg.blur_range;
    let blur_size = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let image = synthesize_image(&mask, &cfg.intensity, blur_size, &mut rng)?;
    Ok(Sample {
        params: shape.params,
        mesh,
        points,
        image,
        blur_size,
    })
}

/// Seeded random assignment of sample indices to train/val/test.
pub fn assign_splits(cfg: &DatasetConfig) -> Vec<Split> {
    let mut order: Vec<usize> = (0..cfg.total()).collect();
    order.shuffle(&mut sample_rng(cfg.seed, u64::MAX));
    let mut splits = vec![Split::Train; cfg.total()];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < cfg.train {
            Split::Train
        } else if rank < cfg.train + cfg.val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

pub fn sample_id(index: usize) -> String {
    format!("ss_{index:04}")
}

/// Generates every sample, writes images / points / meshes under `root`, and
/// writes the manifest last.
pub fn build_dataset(cfg: &DatasetConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    for sub in ["images", "points", "meshes"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let template = template_mesh(cfg.num_points)?;
    template.write_off(&root.join(TEMPLATE_FILE))?;
    let splits = assign_splits(cfg);
    let records = (0..cfg.total())
        .into_par_iter()
        .map(|index| -> Result<SampleRecord> {
            let s = generate_sample(cfg, index)?;
            let id = sample_id(index);
            let image = format!("images/{id}.raw");
            let points = format!("points/{id}.particles");
            let mesh = format!("meshes/{id}.off");
            s.image.write(&root.join(&image))?;
            s.points.write_particles(&root.join(&points))?;
            s.mesh.write_off(&root.join(&mesh))?;
            Ok(SampleRecord {
                id,
                index,
                split: splits[index],
                image,
                points,
                mesh,
                params: s.params,
                blur_size: s.blur_size,
                rng_stream: index as u64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        template: TEMPLATE_FILE.into(),
        samples: records,
        flags: Vec::new(),
    };
    manifest.write(root)?;
    Ok(manifest)
}

/// A dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub images: Vec<Volume>,
    pub points: Vec<PointModel>,
    pub template: SurfaceMesh,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(root)?;
        let images = manifest
            .samples
            .par_iter()
            .map(|s| Volume::read(&root.join(&s.image)))
            .collect::<Result<Vec<_>>>()?;
        let points = manifest
            .samples
            .iter()
            .map(|s| PointModel::read_particles(&root.join(&s.points)))
            .collect::<Result<Vec<_>>>()?;
        let template = SurfaceMesh::read_off(&root.join(&manifest.template))?;
        for (s, img) in manifest.samples.iter().zip(&images) {
            if img.dims != manifest.config.dims {
                return Err(Error::Shape(format!(
                    "{}: image dims {:?} differ from config {:?}",
                    s.id, img.dims, manifest.config.dims
                )));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            images,
            points,
            template,
        })
    }

    /// Positions (into `manifest.samples`) of the samples in `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn mesh(&self, pos: usize) -> Result<SurfaceMesh> {
        SurfaceMesh::read_off(&self.root.join(&self.manifest.samples[pos].mesh))
    }
}
