//! `.vsnf` checkpoints.
//!
//! Layout: magic `VSNF`, format version (u32 LE), header length (u64 LE), a
//! JSON header, then every tensor as little-endian f32 in header order.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};
use crate::field::{Aabb, Decomposition, FieldConfig, GridLayout};
use crate::model::{Model, ModelConfig};
use crate::render::MaskVolume;
use crate::train::TrainSchedule;

pub const MAGIC: &[u8; 4] = b"VSNF";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "vsnf";

/// Free-form context stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub param_names: Vec<String>,
    pub background: [f64; 3],
    /// σ cutoff used for occupancy masks during training.
    pub sigma_threshold: f64,
    /// Samples per ray at the end of training.
    pub render_samples: usize,
    /// Width and height of the training images.
    pub image_size: Option<[usize; 2]>,
    /// Focal length divided by image width.
    pub focal_ratio: Option<f64>,
    /// Parameter tuples seen in training; the occupancy mask is rebuilt over these.
    pub param_samples: Vec<Vec<f64>>,
    pub schedule: Option<TrainSchedule>,
    pub dataset_fingerprint: Option<String>,
}

impl CheckpointMeta {
    /// Recomputes the occupancy mask at the model's grid resolution, or `None`
    /// when no threshold or parameter samples were recorded.
    pub fn rebuild_mask(&self, model: &Model<f32>) -> Result<Option<MaskVolume>> {
        if !(self.sigma_threshold > 0.0) || self.param_samples.is_empty() {
            return Ok(None);
        }
        MaskVolume::build(model, model.field.resolution(), self.sigma_threshold, &self.param_samples).map(Some)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub density_rank: usize,
    pub appearance_rank: usize,
    pub param_rank: usize,
    pub resolution: [usize; 3],
    pub param_resolutions: Vec<usize>,
    pub param_ranges: Vec<(f64, f64)>,
    pub aabb: Aabb,
    pub frame: Aabb,
    pub decomposition: Decomposition,
    pub layout: GridLayout,
    pub hidden: usize,
    pub encoding: EncodingConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub architecture: Architecture,
    pub tensors: Vec<TensorEntry>,
    pub parameter_count: usize,
    pub meta: CheckpointMeta,
}

fn architecture(model: &Model<f32>) -> Architecture {
    let f = &model.field;
    Architecture {
        density_rank: f.density.rank,
        appearance_rank: f.appearance.as_ref().map_or(0, |a| a.rank),
        param_rank: f.density_params.rank,
        resolution: f.resolution(),
        param_resolutions: f.density_params.vectors.iter().map(|v| v.len).collect(),
        param_ranges: f.density_params.ranges.clone(),
        aabb: f.aabb,
        frame: f.frame,
        decomposition: f.density.decomposition,
        layout: f.layout(),
        hidden: model.decoders.density.hidden,
        encoding: model.decoders.encoding,
    }
}

fn header_for(model: &Model<f32>, meta: &CheckpointMeta) -> Header {
    Header {
        architecture: architecture(model),
        tensors: model
            .tensor_infos()
            .into_iter()
            .map(|i| TensorEntry {
                name: i.name,
                shape: i.kind.shape(),
            })
            .collect(),
        parameter_count: model.count_parameters(),
        meta: meta.clone(),
    }
}

/// Serializes `model` and `meta`; identical inputs give identical bytes.
pub fn to_bytes(model: &Model<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&header_for(model, meta))?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * model.count_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in model.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(model: &Model<f32>, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model, meta)?)?;
    Ok(())
}

/// Parses only the header, validating magic and version.
pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 {
        return Err(Error::Format("file shorter than the fixed preamble".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic number".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version} (expected {VERSION})")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = 16usize
        .checked_add(usize::try_from(len).map_err(|_| Error::Format("header length overflows".into()))?)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    Ok((header, end))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model<f32>, CheckpointMeta)> {
    let (header, offset) = read_header(bytes)?;
    let a = &header.architecture;
    let config = ModelConfig {
        field: FieldConfig {
            density_rank: a.density_rank,
            appearance_rank: a.appearance_rank,
            param_rank: a.param_rank,
            resolution: a.resolution,
            param_resolutions: a.param_resolutions.clone(),
            param_ranges: a.param_ranges.clone(),
            aabb: a.aabb,
            decomposition: a.decomposition,
            layout: a.layout,
            init_scale: 0.1,
        },
        hidden: a.hidden,
        encoding: a.encoding,
    };
    if a.layout == GridLayout::Unified && a.appearance_rank != 0 {
        return Err(Error::Format("unified layout stores its full rank as density_rank".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::<f32>::new(&config, &mut rng).map_err(|e| Error::Format(format!("inconsistent architecture: {e}")))?;
    model.field.frame = a.frame;

    let expected: Vec<TensorEntry> = model
        .tensor_infos()
        .into_iter()
        .map(|i| TensorEntry {
            name: i.name,
            shape: i.kind.shape(),
        })
        .collect();
    if expected != header.tensors {
        return Err(Error::Format("tensor table does not match the declared architecture".into()));
    }
    let declared: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if declared != header.parameter_count || declared != model.count_parameters() {
        return Err(Error::Format(format!(
            "parameter count {} disagrees with tensor shapes ({declared})",
            header.parameter_count
        )));
    }
    let payload = &bytes[offset..];
    if payload.len() != 4 * declared {
        return Err(Error::Format(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            4 * declared
        )));
    }
    let mut chunks = payload.chunks_exact(4);
    for t in model.tensors_mut() {
        for (v, c) in t.iter_mut().zip(&mut chunks) {
            *v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        }
    }
    if model.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::Format("payload contains non-finite weights".into()));
    }
    Ok((model, header.meta))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model<f32>, CheckpointMeta)> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn model(layout: GridLayout) -> Model<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = ModelConfig {
            field: FieldConfig {
                density_rank: 2,
                appearance_rank: 3,
                param_rank: 2,
                resolution: [5, 6, 7],
                param_resolutions: vec![3],
                param_ranges: vec![(0.0, 2.0)],
                layout,
                ..FieldConfig::default()
            },
            hidden: 8,
            encoding: EncodingConfig::default(),
        };
        Model::new(&config, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for layout in [GridLayout::Split, GridLayout::Unified] {
            let m = model(layout);
            let meta = CheckpointMeta {
                param_names: vec!["time".into()],
                background: [1.0; 3],
                ..CheckpointMeta::default()
            };
            let a = to_bytes(&m, &meta).unwrap();
            let (m2, meta2) = from_bytes(&a).unwrap();
            assert_eq!(m2, m);
            assert_eq!(meta2, meta);
            assert_eq!(to_bytes(&m2, &meta2).unwrap(), a);
        }
    }

    #[test]
    fn header_count_matches_model() {
        let m = model(GridLayout::Split);
        let (h, _) = read_header(&to_bytes(&m, &CheckpointMeta::default()).unwrap()).unwrap();
        let mlp = m.decoders.count_parameters();
        assert_eq!(h.parameter_count, m.field.count_parameters() + mlp);
    }

    #[test]
    fn corruption_rejected() {
        let bytes = to_bytes(&model(GridLayout::Split), &CheckpointMeta::default()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(from_bytes(&bytes[..20]), Err(Error::Format(_))));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(from_bytes(&longer), Err(Error::Format(_))));
    }
}
