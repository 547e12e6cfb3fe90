//! Synthetic multi-view dataset generation and the CSV manifest.

use std::path::{Path, PathBuf};

use thiserror::Error;
use uvforge_core::fit::Landmarks;
use uvforge_core::image::{Image, UvMap};
use uvforge_core::model::{bake_texture, instantiate_texture, sample_identity, Camera, FitParams, MorphableModel};
use uvforge_core::raster::render;
use uvforge_core::recognition::ViewRequest;
use uvforge_core::rng::derive_seed;

use crate::formats::{self, FormatError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("{0}")]
    Generation(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Identities `0..n_train` train, the rest test; at least one of each.
pub fn train_count(n_identities: usize) -> usize {
    (n_identities * 9 / 10).min(n_identities.saturating_sub(1)).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub identity: usize,
    pub view: usize,
    /// Degrees.
    pub yaw: f64,
    pub image: PathBuf,
    pub landmarks: PathBuf,
    pub uv: PathBuf,
    pub split: Split,
}

/// Records with paths relative to `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_NAME: &str = "manifest.csv";
const HEADER: [&str; 7] = ["identity", "view", "yaw", "image", "landmarks", "uv", "split"];

impl DatasetManifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_NAME)
    }

    pub fn identities(&self, split: Split) -> Vec<usize> {
        let mut ids: Vec<usize> = self.records.iter().filter(|r| r.split == split).map(|r| r.identity).collect();
        ids.dedup();
        ids
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn write(&self) -> Result<(), FormatError> {
        let rows: Vec<Vec<String>> = self
            .records
            .iter()
            .map(|r| {
                vec![
                    r.identity.to_string(),
                    r.view.to_string(),
                    format!("{:?}", r.yaw),
                    r.image.display().to_string(),
                    r.landmarks.display().to_string(),
                    r.uv.display().to_string(),
                    r.split.name().to_string(),
                ]
            })
            .collect();
        formats::write_csv(&self.path(), &HEADER, &rows)
    }

    /// Reads `path` (a manifest file or the directory holding one).
    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let file = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let err = |message: String| DatasetError::Manifest { path: file.display().to_string(), message };
        let mut reader = csv::Reader::from_path(&file).map_err(|e| err(e.to_string()))?;
        let header = reader.headers().map_err(|e| err(e.to_string()))?.clone();
        if header.iter().ne(HEADER) {
            return Err(err(format!("expected header {}", HEADER.join(","))));
        }
        let mut records = Vec::new();
        for (n, row) in reader.records().enumerate() {
            let row = row.map_err(|e| err(e.to_string()))?;
            let bad = |field: &str| err(format!("row {}: bad {field}", n + 1));
            records.push(ManifestRecord {
                identity: row[0].parse().map_err(|_| bad("identity"))?,
                view: row[1].parse().map_err(|_| bad("view"))?,
                yaw: row[2].parse().map_err(|_| bad("yaw"))?,
                image: PathBuf::from(&row[3]),
                landmarks: PathBuf::from(&row[4]),
                uv: PathBuf::from(&row[5]),
                split: Split::parse(&row[6]).ok_or_else(|| bad("split"))?,
            });
        }
        let m = DatasetManifest { root, records };
        m.check_splits().map_err(err)?;
        Ok(m)
    }

    fn check_splits(&self) -> Result<(), String> {
        for r in &self.records {
            if self.records.iter().any(|o| o.identity == r.identity && o.split != r.split) {
                return Err(format!("identity {} appears in both splits", r.identity));
            }
        }
        Ok(())
    }

    /// Every referenced file exists and parses.
    pub fn verify(&self) -> Result<(), DatasetError> {
        for r in &self.records {
            self.load(r)?;
        }
        Ok(())
    }

    pub fn load(&self, r: &ManifestRecord) -> Result<LoadedSample, DatasetError> {
        let image = formats::read_ppm(&self.root.join(&r.image))?;
        let (indices, points) = formats::read_landmarks(&self.root.join(&r.landmarks))?;
        let landmarks = Landmarks::new(points, indices).map_err(|e| DatasetError::Generation(format!("{}: {e}", r.landmarks.display())))?;
        let uv = formats::read_ppm(&self.root.join(&r.uv))?;
        Ok(LoadedSample { image, landmarks, uv })
    }
}

#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub image: Image,
    pub landmarks: Landmarks,
    pub uv: UvMap,
}

/// Ground-truth parameters and texture of one synthetic identity.
pub fn identity(model: &MorphableModel, seed: u64, id: usize, image_size: usize, uv_size: usize) -> Result<(FitParams, UvMap), DatasetError> {
    let mut p = sample_identity(model, derive_seed(seed, id as u64));
    p.camera = Camera::frontal(image_size, image_size);
    let colors = instantiate_texture(model, &p.lambda).map_err(|e| DatasetError::Generation(e.to_string()))?;
    Ok((p, formats::quantize(&bake_texture(model, &colors, uv_size, uv_size))))
}

/// Renders `params` at `yaw` degrees, warning on a blank frame.
pub fn render_view(model: &MorphableModel, params: &FitParams, uv: &UvMap, yaw: f64, size: usize) -> Result<(FitParams, Image), DatasetError> {
    let p = FitParams { camera: params.camera.with_yaw(yaw.to_radians()), ..params.clone() };
    let r = render(model, &p, uv, size, size).map_err(|e| DatasetError::Generation(e.to_string()))?;
    if r.is_blank() {
        eprintln!("warning: mesh falls outside the {size}x{size} frame at yaw {yaw}");
    }
    Ok((p, formats::quantize(&r.image)))
}

/// Renders `views` seeded random yaws of each of `n_identities` identities
/// and writes images, landmarks, ground-truth UVs and the manifest under
/// `out`. Rerunning with the same arguments rewrites identical bytes.
pub fn gen_dataset(
    model: &MorphableModel,
    n_identities: usize,
    views: usize,
    seed: u64,
    image_size: usize,
    uv_size: usize,
    out: &Path,
) -> Result<DatasetManifest, DatasetError> {
    if n_identities < 2 || views == 0 {
        return Err(DatasetError::Generation("need at least 2 identities and 1 view".into()));
    }
    let n_train = train_count(n_identities);
    let mut records = Vec::with_capacity(n_identities * views);
    for id in 0..n_identities {
        let (params, uv) = identity(model, seed, id, image_size, uv_size)?;
        let uv_path = PathBuf::from(format!("uv/id{id:04}.ppm"));
        formats::write_ppm(&out.join(&uv_path), &uv)?;
        let yaws = ViewRequest::Random { count: views, seed: derive_seed(seed, 0x7E00_0000 + id as u64) }
            .yaws()
            .map_err(|e| DatasetError::Generation(e.to_string()))?;
        for (view, &yaw) in yaws.iter().enumerate() {
            let (p, image) = render_view(model, &params, &uv, yaw, image_size)?;
            let lm = Landmarks::project(model, &p).map_err(|e| DatasetError::Generation(e.to_string()))?;
            let image_path = PathBuf::from(format!("images/id{id:04}_v{view:02}.ppm"));
            let lm_path = PathBuf::from(format!("landmarks/id{id:04}_v{view:02}.txt"));
            formats::write_ppm(&out.join(&image_path), &image)?;
            formats::write_landmarks(&out.join(&lm_path), lm.indices(), lm.points())?;
            records.push(ManifestRecord {
                identity: id,
                view,
                yaw,
                image: image_path,
                landmarks: lm_path,
                uv: uv_path.clone(),
                split: if id < n_train { Split::Train } else { Split::Test },
            });
        }
    }
    let manifest = DatasetManifest { root: out.to_path_buf(), records };
    manifest.write()?;
    Ok(manifest)
}
