//! Landmark feature encodings.
//!
//! All distance-based encodings use only the image-plane coordinates; `z` is
//! read by [`Encoding::Raw3D`] alone. Pairwise encodings visit each pair of
//! landmarks once, as `(i, j)` with `i < j` in row-major order, and store
//! `p_i - p_j`. The entry for `(j, i)` is implied by antisymmetry.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{HandFrame, N_LANDMARKS, WRIST};
use crate::error::{Error, Result};

const N_PAIRS: usize = N_LANDMARKS * (N_LANDMARKS - 1) / 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Encoding {
    #[serde(rename = "raw2d")]
    Raw2D,
    #[serde(rename = "raw3d")]
    Raw3D,
    #[serde(rename = "wrist-diff")]
    WristDiff,
    #[serde(rename = "wrist-euclidean")]
    WristEuclidean,
    #[serde(rename = "all-euclidean")]
    AllEuclidean,
    #[serde(rename = "all-diff")]
    AllDiff,
    /// `AllEuclidean ++ WristDiff ++ AllDiff`.
    #[serde(rename = "combined")]
    Combined,
}

impl Encoding {
    pub const ALL: [Encoding; 7] = [
        Encoding::Raw2D,
        Encoding::Raw3D,
        Encoding::WristDiff,
        Encoding::WristEuclidean,
        Encoding::AllEuclidean,
        Encoding::AllDiff,
        Encoding::Combined,
    ];

    pub const fn dim(self) -> usize {
        match self {
            Encoding::Raw2D => N_LANDMARKS * 2,
            Encoding::Raw3D => N_LANDMARKS * 3,
            Encoding::WristDiff => (N_LANDMARKS - 1) * 2,
            Encoding::WristEuclidean => N_LANDMARKS - 1,
            Encoding::AllEuclidean => N_PAIRS,
            Encoding::AllDiff => N_PAIRS * 2,
            Encoding::Combined => N_PAIRS + (N_LANDMARKS - 1) * 2 + N_PAIRS * 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Encoding::Raw2D => "raw2d",
            Encoding::Raw3D => "raw3d",
            Encoding::WristDiff => "wrist-diff",
            Encoding::WristEuclidean => "wrist-euclidean",
            Encoding::AllEuclidean => "all-euclidean",
            Encoding::AllDiff => "all-diff",
            Encoding::Combined => "combined",
        }
    }
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['_', '-'], "");
        Encoding::ALL
            .into_iter()
            .find(|e| e.name().replace('-', "") == norm || format!("{e:?}").to_ascii_lowercase() == norm)
            .ok_or_else(|| Error::Config(format!("unknown encoding `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub encoding: Encoding,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

fn push_wrist_diff(frame: &HandFrame, out: &mut Vec<f64>) {
    let lm = frame.landmarks();
    let w = lm[WRIST];
    for p in &lm[1..] {
        out.push(p[0] - w[0]);
        out.push(p[1] - w[1]);
    }
}

fn push_all_pairs(frame: &HandFrame, out: &mut Vec<f64>, euclidean: bool) {
    let lm = frame.landmarks();
    for (i, a) in lm.iter().enumerate() {
        for b in &lm[i + 1..] {
            let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
            if euclidean {
                out.push(dx.hypot(dy));
            } else {
                out.push(dx);
                out.push(dy);
            }
        }
    }
}

/// Appends the encoding of `frame` to `out`.
pub fn encode_into(frame: &HandFrame, encoding: Encoding, out: &mut Vec<f64>) {
    let lm = frame.landmarks();
    match encoding {
        Encoding::Raw2D => lm.iter().for_each(|p| out.extend_from_slice(&p[..2])),
        Encoding::Raw3D => lm.iter().for_each(|p| out.extend_from_slice(p)),
        Encoding::WristDiff => push_wrist_diff(frame, out),
        Encoding::WristEuclidean => {
            let w = lm[WRIST];
            out.extend(lm[1..].iter().map(|p| (p[0] - w[0]).hypot(p[1] - w[1])));
        }
        Encoding::AllEuclidean => push_all_pairs(frame, out, true),
        Encoding::AllDiff => push_all_pairs(frame, out, false),
        Encoding::Combined => {
            push_all_pairs(frame, out, true);
            push_wrist_diff(frame, out);
            push_all_pairs(frame, out, false);
        }
    }
}

pub fn encode(frame: &HandFrame, encoding: Encoding) -> FeatureVector {
    let mut values = Vec::with_capacity(encoding.dim());
    encode_into(frame, encoding, &mut values);
    debug_assert_eq!(values.len(), encoding.dim());
    FeatureVector { encoding, values }
}

/// Encodes frames into the rows of a matrix.
pub fn encode_matrix<'a>(
    frames: impl IntoIterator<Item = &'a HandFrame>,
    encoding: Encoding,
) -> Array2<f64> {
    let mut flat = Vec::new();
    let mut rows = 0;
    for f in frames {
        encode_into(f, encoding, &mut flat);
        rows += 1;
    }
    Array2::from_shape_vec((rows, encoding.dim()), flat).expect("row length is the encoding dim")
}

/// Stacks feature vectors into the rows of a matrix. All vectors must share
/// one length.
pub fn stack_features<'a>(vectors: impl IntoIterator<Item = &'a FeatureVector>) -> Result<Array2<f64>> {
    let mut flat = Vec::new();
    let mut rows = 0;
    let mut dim = None;
    for v in vectors {
        match dim {
            None => dim = Some(v.dim()),
            Some(d) if d != v.dim() => return Err(Error::shape(d, v.dim())),
            _ => {}
        }
        flat.extend_from_slice(&v.values);
        rows += 1;
    }
    Array2::from_shape_vec((rows, dim.unwrap_or(0)), flat).map_err(|e| Error::shape("rectangular rows", e))
}
