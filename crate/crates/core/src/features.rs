//! Frozen feature extractors and the cosine distance between feature vectors.

use std::path::PathBuf;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{self, Graph, Var};
use crate::seed;
use crate::tensor::ImageTensor;

/// A fixed, differentiable image-to-vector map.
///
/// `forward` must only use constant leaves: gradients flow through the
/// extractor to its input but never into its own weights.
pub trait FeatureExtractor: Sync {
    fn dim(&self) -> usize;

    /// Expected `(C, H, W)` of inputs.
    fn input_shape(&self) -> (usize, usize, usize);

    fn forward(&self, g: &mut Graph, image: Var) -> Result<Var>;

    fn extract(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        check_shape(self, image)?;
        let (c, h, w) = image.shape();
        let mut g = Graph::new();
        let x = g.constant(image.as_slice().to_vec(), &[c, h, w]);
        let out = self.forward(&mut g, x)?;
        Ok(g.value(out).to_vec())
    }
}

pub fn extract<E: FeatureExtractor + ?Sized>(
    extractor: &E,
    image: &ImageTensor,
) -> Result<Vec<f64>> {
    extractor.extract(image)
}

fn check_shape<E: FeatureExtractor + ?Sized>(e: &E, image: &ImageTensor) -> Result<()> {
    if image.shape() != e.input_shape() {
        return Err(Error::Shape(format!(
            "extractor expects {:?}, got {:?}",
            e.input_shape(),
            image.shape()
        )));
    }
    Ok(())
}

/// `1 - u.v / (|u| |v|)`, in `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "feature lengths {} vs {}",
            u.len(),
            v.len()
        )));
    }
    graph::cosine_distance_raw(u, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    ToyRandomProjection,
    SmallTrainedCnn,
    External,
}

/// Extractor entry of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub kind: ExtractorKind,
    pub dim: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::ToyRandomProjection,
            dim: 256,
            seed: None,
            checkpoint: None,
        }
    }
}

/// Strided 3x3 convolutions with `tanh`, flattened and linearly projected.
#[derive(Debug, Clone)]
pub struct ConvFeatureExtractor {
    kind: ExtractorKind,
    input: (usize, usize, usize),
    dim: usize,
    convs: Vec<(Vec<f64>, Vec<usize>, Vec<f64>)>,
    proj_w: Vec<f64>,
    proj_b: Vec<f64>,
}

const TOY_WIDTHS: [usize; 4] = [8, 16, 32, 32];

/// Layer shapes for an input of `(c, h, w)`: one stride-2 stage per halving
/// while the side stays above 8, at least one and at most four.
fn conv_stack_shapes(input: (usize, usize, usize)) -> (Vec<Vec<usize>>, usize) {
    let (mut c, mut h, mut w) = input;
    let mut shapes = Vec::new();
    for &width in &TOY_WIDTHS {
        if !shapes.is_empty() && h.min(w) <= 8 {
            break;
        }
        shapes.push(vec![width, c, 3, 3]);
        c = width;
        h = (h - 1) / 2 + 1;
        w = (w - 1) / 2 + 1;
    }
    (shapes, c * h * w)
}

impl ConvFeatureExtractor {
    /// Random-weight extractor drawn from `seed`.
    pub fn random(input: (usize, usize, usize), dim: usize, seed: u64) -> Result<Self> {
        validate_dims(input, dim)?;
        let mut rng = seed::rng(seed);
        let (shapes, flat) = conv_stack_shapes(input);
        let convs = shapes
            .into_iter()
            .map(|s| {
                let fan_in = (s[1] * 9) as f64;
                let bound = (3.0 / fan_in).sqrt();
                let n: usize = s.iter().product();
                let w = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                let b = (0..s[0]).map(|_| rng.random_range(-0.1..0.1)).collect();
                (w, s, b)
            })
            .collect();
        let bound = (3.0 / flat as f64).sqrt();
        let proj_w = (0..dim * flat)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let proj_b = (0..dim).map(|_| rng.random_range(-0.1..0.1)).collect();
        Ok(Self {
            kind: ExtractorKind::ToyRandomProjection,
            input,
            dim,
            convs,
            proj_w,
            proj_b,
        })
    }

    /// Builds an extractor of the conv-stack architecture from stored arrays
    /// named `conv{i}.weight`, `conv{i}.bias`, `proj.weight`, `proj.bias`.
    pub fn from_arrays(
        kind: ExtractorKind,
        input: (usize, usize, usize),
        dim: usize,
        arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
    ) -> Result<Self> {
        validate_dims(input, dim)?;
        let (shapes, flat) = conv_stack_shapes(input);
        let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, s) in shapes.iter().enumerate() {
            expected.push((format!("conv{i}.weight"), s.clone()));
            expected.push((format!("conv{i}.bias"), vec![s[0]]));
        }
        expected.push(("proj.weight".into(), vec![dim, flat]));
        expected.push(("proj.bias".into(), vec![dim]));
        if arrays.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "extractor needs {} arrays, found {}",
                expected.len(),
                arrays.len()
            )));
        }
        for ((name, shape, values), (en, es)) in arrays.iter().zip(&expected) {
            if name != en || shape != es || values.len() != es.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "extractor array `{name}` {shape:?}, expected `{en}` {es:?}"
                )));
            }
        }
        let mut it = arrays.into_iter().map(|(_, _, v)| v);
        let convs = shapes
            .into_iter()
            .map(|s| {
                let w = it.next().unwrap();
                let b = it.next().unwrap();
                (w, s, b)
            })
            .collect();
        Ok(Self {
            kind,
            input,
            dim,
            convs,
            proj_w: it.next().unwrap(),
            proj_b: it.next().unwrap(),
        })
    }

    pub fn kind(&self) -> ExtractorKind {
        self.kind
    }

    /// Arrays in the order `from_arrays` expects.
    pub fn to_arrays(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, (w, s, b)) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), s.clone(), w.clone()));
            out.push((format!("conv{i}.bias"), vec![s[0]], b.clone()));
        }
        let flat = self.proj_w.len() / self.dim;
        out.push((
            "proj.weight".into(),
            vec![self.dim, flat],
            self.proj_w.clone(),
        ));
        out.push(("proj.bias".into(), vec![self.dim], self.proj_b.clone()));
        out
    }
}

fn validate_dims(input: (usize, usize, usize), dim: usize) -> Result<()> {
    if dim == 0 {
        return Err(Error::param("dim", "must be positive"));
    }
    if input.0 == 0 || input.1 == 0 || input.2 == 0 {
        return Err(Error::param("input_shape", "dimensions must be positive"));
    }
    Ok(())
}

impl FeatureExtractor for ConvFeatureExtractor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    fn forward(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let shape = g.shape(image);
        if shape != [self.input.0, self.input.1, self.input.2] {
            return Err(Error::Shape(format!(
                "extractor expects {:?}, got {shape:?}",
                self.input
            )));
        }
        let mut h = image;
        for (w, s, b) in &self.convs {
            let wv = g.constant(w.clone(), s);
            let bv = g.constant(b.clone(), &[s[0]]);
            h = g.conv2d(h, wv, Some(bv), 2, 1);
            h = g.tanh(h);
        }
        let n = g.value(h).len();
        let flat = g.reshape(h, &[n]);
        let pw = g.constant(self.proj_w.clone(), &[self.dim, n]);
        let pb = g.constant(self.proj_b.clone(), &[self.dim]);
        Ok(g.linear(flat, pw, pb))
    }
}
