//! A trainable model: factorized field plus decoders, with a flat view over
//! every weight tensor for the optimizer, regularizers, and serialization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderPair, Mlp};
use crate::encoding::EncodingConfig;
use crate::error::Result;
use crate::field::{Aabb, FactorizedField, FactorizedGrid, FeatureKind, FieldConfig, ParameterAxes};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    SpatialMatrix { rows: usize, cols: usize, rank: usize },
    SpatialVector { len: usize, rank: usize },
    ParamVector { len: usize, rank: usize },
    MlpWeight { rows: usize, cols: usize },
    MlpBias { len: usize },
}

impl TensorKind {
    pub fn is_grid(&self) -> bool {
        !matches!(self, TensorKind::MlpWeight { .. } | TensorKind::MlpBias { .. })
    }

    pub fn shape(&self) -> Vec<usize> {
        match *self {
            TensorKind::SpatialMatrix { rows, cols, rank } => vec![rows, cols, rank],
            TensorKind::SpatialVector { len, rank } | TensorKind::ParamVector { len, rank } => vec![len, rank],
            TensorKind::MlpWeight { rows, cols } => vec![rows, cols],
            TensorKind::MlpBias { len } => vec![len],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub kind: TensorKind,
}

fn grid_infos<T>(prefix: &str, g: &FactorizedGrid<T>, out: &mut Vec<TensorInfo>) {
    for (k, m) in g.matrices.iter().enumerate() {
        out.push(TensorInfo {
            name: format!("{prefix}.matrix.{k}"),
            kind: TensorKind::SpatialMatrix {
                rows: m.rows,
                cols: m.cols,
                rank: m.rank,
            },
        });
    }
    for (k, v) in g.vectors.iter().enumerate() {
        out.push(TensorInfo {
            name: format!("{prefix}.vector.{k}"),
            kind: TensorKind::SpatialVector { len: v.len, rank: v.rank },
        });
    }
}

fn param_infos<T>(prefix: &str, p: &ParameterAxes<T>, out: &mut Vec<TensorInfo>) {
    for (k, v) in p.vectors.iter().enumerate() {
        out.push(TensorInfo {
            name: format!("{prefix}.param.{k}"),
            kind: TensorKind::ParamVector { len: v.len, rank: v.rank },
        });
    }
}

fn mlp_infos<T>(prefix: &str, m: &Mlp<T>, out: &mut Vec<TensorInfo>) {
    out.push(TensorInfo {
        name: format!("{prefix}.w1"),
        kind: TensorKind::MlpWeight {
            rows: m.hidden,
            cols: m.input,
        },
    });
    out.push(TensorInfo {
        name: format!("{prefix}.b1"),
        kind: TensorKind::MlpBias { len: m.hidden },
    });
    out.push(TensorInfo {
        name: format!("{prefix}.w2"),
        kind: TensorKind::MlpWeight {
            rows: m.output,
            cols: m.hidden,
        },
    });
    out.push(TensorInfo {
        name: format!("{prefix}.b2"),
        kind: TensorKind::MlpBias { len: m.output },
    });
}

impl<T: Real> FactorizedField<T> {
    pub fn tensor_infos(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        grid_infos("density", &self.density, &mut out);
        if let Some(a) = &self.appearance {
            grid_infos("appearance", a, &mut out);
        }
        param_infos("density", &self.density_params, &mut out);
        if let Some(a) = &self.appearance_params {
            param_infos("appearance", a, &mut out);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        push_grid(&self.density, &mut out);
        if let Some(a) = &self.appearance {
            push_grid(a, &mut out);
        }
        out.extend(self.density_params.vectors.iter().map(|v| v.data.as_slice()));
        if let Some(a) = &self.appearance_params {
            out.extend(a.vectors.iter().map(|v| v.data.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        push_grid_mut(&mut self.density, &mut out);
        if let Some(a) = &mut self.appearance {
            push_grid_mut(a, &mut out);
        }
        out.extend(self.density_params.vectors.iter_mut().map(|v| v.data.as_mut_slice()));
        if let Some(a) = &mut self.appearance_params {
            out.extend(a.vectors.iter_mut().map(|v| v.data.as_mut_slice()));
        }
        out
    }
}

fn push_grid<'a, T>(g: &'a FactorizedGrid<T>, out: &mut Vec<&'a [T]>) {
    out.extend(g.matrices.iter().map(|m| m.data.as_slice()));
    out.extend(g.vectors.iter().map(|v| v.data.as_slice()));
}

fn push_grid_mut<'a, T>(g: &'a mut FactorizedGrid<T>, out: &mut Vec<&'a mut [T]>) {
    out.extend(g.matrices.iter_mut().map(|m| m.data.as_mut_slice()));
    out.extend(g.vectors.iter_mut().map(|v| v.data.as_mut_slice()));
}

fn push_mlp<'a, T>(m: &'a Mlp<T>, out: &mut Vec<&'a [T]>) {
    out.extend([m.w1.as_slice(), m.b1.as_slice(), m.w2.as_slice(), m.b2.as_slice()]);
}

fn push_mlp_mut<'a, T>(m: &'a mut Mlp<T>, out: &mut Vec<&'a mut [T]>) {
    out.push(m.w1.as_mut_slice());
    out.push(m.b1.as_mut_slice());
    out.push(m.w2.as_mut_slice());
    out.push(m.b2.as_mut_slice());
}

/// Everything needed to build a fresh [`Model`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub field: FieldConfig,
    pub hidden: usize,
    #[serde(default)]
    pub encoding: EncodingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            field: FieldConfig::default(),
            hidden: 128,
            encoding: EncodingConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small model for CPU runs: ranks 8/16/4, a 32³ starting grid, width-64 decoders.
    /// `param_nodes[k]` is the node count of parameter axis k.
    pub fn desk(aabb: Aabb, param_ranges: Vec<(f64, f64)>, param_nodes: Vec<usize>) -> Self {
        Self {
            field: FieldConfig {
                density_rank: 8,
                appearance_rank: 16,
                param_rank: 4,
                resolution: [32; 3],
                param_resolutions: param_nodes,
                param_ranges,
                aabb,
                ..FieldConfig::default()
            },
            hidden: 64,
            encoding: EncodingConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub field: FactorizedField<T>,
    pub decoders: DecoderPair<T>,
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let field = FactorizedField::new(&config.field, rng)?;
        let decoders = DecoderPair::new(
            field.feature_len(FeatureKind::Density),
            field.feature_len(FeatureKind::Appearance),
            config.hidden,
            config.encoding,
            rng,
        )?;
        Ok(Self { field, decoders })
    }

    pub fn tensor_infos(&self) -> Vec<TensorInfo> {
        let mut out = self.field.tensor_infos();
        mlp_infos("density_mlp", &self.decoders.density, &mut out);
        mlp_infos("color_mlp", &self.decoders.color, &mut out);
        out
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = self.field.tensors();
        push_mlp(&self.decoders.density, &mut out);
        push_mlp(&self.decoders.color, &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = self.field.tensors_mut();
        push_mlp_mut(&mut self.decoders.density, &mut out);
        push_mlp_mut(&mut self.decoders.color, &mut out);
        out
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            field: self.field.zeros_like(),
            decoders: self.decoders.zeros_like(),
        }
    }

    pub fn count_parameters(&self) -> usize {
        self.field.count_parameters() + self.decoders.count_parameters()
    }

    /// Converts every weight to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            field: cast_field(&self.field),
            decoders: DecoderPair {
                density: cast_mlp(&self.decoders.density),
                color: cast_mlp(&self.decoders.color),
                encoding: self.decoders.encoding,
            },
        }
    }
}

fn cast_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter().map(|x| U::lit(x.as_f64())).collect()
}

fn cast_mlp<T: Real, U: Real>(m: &Mlp<T>) -> Mlp<U> {
    Mlp {
        input: m.input,
        hidden: m.hidden,
        output: m.output,
        w1: cast_vec(&m.w1),
        b1: cast_vec(&m.b1),
        w2: cast_vec(&m.w2),
        b2: cast_vec(&m.b2),
    }
}

fn cast_grid<T: Real, U: Real>(g: &FactorizedGrid<T>) -> FactorizedGrid<U> {
    use crate::field::{Line, Plane};
    FactorizedGrid {
        decomposition: g.decomposition,
        rank: g.rank,
        resolution: g.resolution,
        matrices: g
            .matrices
            .iter()
            .map(|m| Plane {
                rows: m.rows,
                cols: m.cols,
                rank: m.rank,
                data: cast_vec(&m.data),
            })
            .collect(),
        vectors: g
            .vectors
            .iter()
            .map(|v| Line {
                len: v.len,
                rank: v.rank,
                data: cast_vec(&v.data),
            })
            .collect(),
    }
}

fn cast_params<T: Real, U: Real>(p: &ParameterAxes<T>) -> ParameterAxes<U> {
    use crate::field::Line;
    ParameterAxes {
        rank: p.rank,
        vectors: p
            .vectors
            .iter()
            .map(|v| Line {
                len: v.len,
                rank: v.rank,
                data: cast_vec(&v.data),
            })
            .collect(),
        ranges: p.ranges.clone(),
    }
}

fn cast_field<T: Real, U: Real>(f: &FactorizedField<T>) -> FactorizedField<U> {
    FactorizedField {
        density: cast_grid(&f.density),
        appearance: f.appearance.as_ref().map(cast_grid),
        density_params: cast_params(&f.density_params),
        appearance_params: f.appearance_params.as_ref().map(cast_params),
        aabb: f.aabb,
        frame: f.frame,
    }
}
