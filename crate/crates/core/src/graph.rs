//! Message passing over the object / relation / geometry graph.
//!
//! Each frame holds one hidden vector per object and one per ordered object
//! pair (relation). Geometry nodes hold a fixed encoding of the pair's
//! ellipsoids and are never updated. A round computes every message from the
//! state at the start of the round and only then applies the GRU updates.
//!
//! Gates are scalars: a weight vector of length `2d` dotted with the
//! concatenation of two hidden vectors, passed through a sigmoid.

use crate::geometry::Ellipsoid3D;
use crate::solver::{FrameId, ObjectId};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Length of a pair feature: 7 keypoints x 3 coordinates x 2 objects.
pub const PAIR_FEATURE_LEN: usize = 42;

pub type RelationKey = (ObjectId, ObjectId);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("relation {0:?} links an object to itself")]
    SelfRelation(RelationKey),
    #[error("relation {key:?} in frame {frame} refers to a missing object")]
    DanglingRelation { frame: FrameId, key: RelationKey },
    #[error("no geometry node for relation {0:?}")]
    MissingGeometry(RelationKey),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("number of rounds must be non-negative, got {0}")]
    NegativeRounds(i64),
    #[error("weight bundle: {0}")]
    Weights(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_dim(what: impl Into<String>, v: &DVector<f64>, expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(GraphError::Dimension {
            what: what.into(),
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

/// `sigmoid(w . [x, y])`.
pub fn gate(w: &DVector<f64>, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let d = x.len();
    let dot = w.rows(0, d).dot(x) + w.rows(d, d).dot(y);
    sigmoid(dot)
}

/// Center followed by the six axis extremities `t +- a r1`, `t +- b r2`,
/// `t +- c r3`, each as (x, y, z).
pub fn ellipsoid_keypoints(e: &Ellipsoid3D) -> [[f64; 3]; 7] {
    let mut out = [[0.0; 3]; 7];
    out[0] = [e.center.x, e.center.y, e.center.z];
    for k in 0..3 {
        let axis = e.rotation.column(k) * e.semi_axes[k];
        let plus = e.center + axis;
        let minus = e.center - axis;
        out[1 + 2 * k] = [plus.x, plus.y, plus.z];
        out[2 + 2 * k] = [minus.x, minus.y, minus.z];
    }
    out
}

/// Keypoints of `ei` then of `ej`, flattened.
pub fn pair_geometric_feature(ei: &Ellipsoid3D, ej: &Ellipsoid3D) -> [f64; PAIR_FEATURE_LEN] {
    let mut out = [0.0; PAIR_FEATURE_LEN];
    let points = ellipsoid_keypoints(ei)
        .into_iter()
        .chain(ellipsoid_keypoints(ej));
    for (k, p) in points.enumerate() {
        out[3 * k..3 * k + 3].copy_from_slice(&p);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Feed-forward encoder with ReLU after every layer, mapping pair features
/// to the hidden dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricEncoder {
    pub layers: Vec<DenseLayer>,
}

impl GeometricEncoder {
    /// Uniform weights in `+-1/sqrt(fan_in)`, zero biases. `dims` lists the
    /// layer widths starting with the input, e.g. `[42, 100, 512]`.
    pub fn random(dims: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                DenseLayer {
                    weight: DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..=bound)),
                    bias: DVector::zeros(w[1]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn encode(&self, input: &[f64]) -> Result<DVector<f64>> {
        let mut x = DVector::from_column_slice(input);
        for (k, layer) in self.layers.iter().enumerate() {
            check_dim(format!("encoder layer {k} input"), &x, layer.weight.ncols())?;
            x = (&layer.weight * x + &layer.bias).map(|v| v.max(0.0));
        }
        Ok(x)
    }
}

/// Standard GRU cell: `z = s(Wz m + Uz h + bz)`, `r = s(Wr m + Ur h + br)`,
/// `h~ = tanh(Wh m + Uh (r * h) + bh)`, `h' = (1 - z) * h + z * h~`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub w_z: DMatrix<f64>,
    pub u_z: DMatrix<f64>,
    pub b_z: DVector<f64>,
    pub w_r: DMatrix<f64>,
    pub u_r: DMatrix<f64>,
    pub b_r: DVector<f64>,
    pub w_h: DMatrix<f64>,
    pub u_h: DMatrix<f64>,
    pub b_h: DVector<f64>,
}

impl GruWeights {
    pub fn zeros(d: usize) -> Self {
        Self {
            w_z: DMatrix::zeros(d, d),
            u_z: DMatrix::zeros(d, d),
            b_z: DVector::zeros(d),
            w_r: DMatrix::zeros(d, d),
            u_r: DMatrix::zeros(d, d),
            b_r: DVector::zeros(d),
            w_h: DMatrix::zeros(d, d),
            u_h: DMatrix::zeros(d, d),
            b_h: DVector::zeros(d),
        }
    }

    pub fn random(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut m = || DMatrix::from_fn(d, d, |_, _| rng.random_range(-bound..=bound));
        let (w_z, u_z, w_r, u_r, w_h, u_h) = (m(), m(), m(), m(), m(), m());
        let mut v = || DVector::from_fn(d, |_, _| rng.random_range(-bound..=bound));
        let (b_z, b_r, b_h) = (v(), v(), v());
        Self {
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        }
    }

    pub fn dim(&self) -> usize {
        self.b_z.len()
    }

    fn check(&self, d: usize, family: &str) -> Result<()> {
        for (name, m) in [
            ("w_z", &self.w_z),
            ("u_z", &self.u_z),
            ("w_r", &self.w_r),
            ("u_r", &self.u_r),
            ("w_h", &self.w_h),
            ("u_h", &self.u_h),
        ] {
            if m.shape() != (d, d) {
                return Err(GraphError::Dimension {
                    what: format!("{family}.{name}"),
                    expected: d,
                    got: if m.nrows() != d { m.nrows() } else { m.ncols() },
                });
            }
        }
        for (name, b) in [("b_z", &self.b_z), ("b_r", &self.b_r), ("b_h", &self.b_h)] {
            check_dim(format!("{family}.{name}"), b, d)?;
        }
        Ok(())
    }
}

pub fn gru_update(h: &DVector<f64>, m: &DVector<f64>, gru: &GruWeights) -> Result<DVector<f64>> {
    let d = gru.dim();
    gru.check(d, "gru")?;
    check_dim("gru state", h, d)?;
    check_dim("gru message", m, d)?;
    let z = (&gru.w_z * m + &gru.u_z * h + &gru.b_z).map(sigmoid);
    let r = (&gru.w_r * m + &gru.u_r * h + &gru.b_r).map(sigmoid);
    let candidate = (&gru.w_h * m + &gru.u_h * r.component_mul(h) + &gru.b_h).map(f64::tanh);
    Ok(h + z.component_mul(&(candidate - h)))
}

/// Gate vectors and the two GRU families (objects, relations).
#[derive(Debug, Clone, PartialEq)]
pub struct MessageWeights {
    pub dim: usize,
    pub a1: DVector<f64>,
    pub a2: DVector<f64>,
    pub b1: DVector<f64>,
    pub b2: DVector<f64>,
    pub b3: DVector<f64>,
    pub c1: DVector<f64>,
    pub c2: DVector<f64>,
    pub object_gru: GruWeights,
    pub relation_gru: GruWeights,
}

impl MessageWeights {
    pub fn zeros(d: usize) -> Self {
        let z = || DVector::zeros(2 * d);
        Self {
            dim: d,
            a1: z(),
            a2: z(),
            b1: z(),
            b2: z(),
            b3: z(),
            c1: z(),
            c2: z(),
            object_gru: GruWeights::zeros(d),
            relation_gru: GruWeights::zeros(d),
        }
    }

    pub fn random(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / ((2 * d) as f64).sqrt();
        let mut g = || DVector::from_fn(2 * d, |_, _| rng.random_range(-bound..=bound));
        let (a1, a2, b1, b2, b3, c1, c2) = (g(), g(), g(), g(), g(), g(), g());
        Self {
            dim: d,
            a1,
            a2,
            b1,
            b2,
            b3,
            c1,
            c2,
            object_gru: GruWeights::random(d, &mut rng),
            relation_gru: GruWeights::random(d, &mut rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        for (name, v) in self.gates() {
            check_dim(name, v, 2 * d)?;
        }
        self.object_gru.check(d, "object_gru")?;
        self.relation_gru.check(d, "relation_gru")
    }

    fn gates(&self) -> [(&'static str, &DVector<f64>); 7] {
        [
            ("a1", &self.a1),
            ("a2", &self.a2),
            ("b1", &self.b1),
            ("b2", &self.b2),
            ("b3", &self.b3),
            ("c1", &self.c1),
            ("c2", &self.c2),
        ]
    }
}

/// Hidden states of one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameGraph {
    pub objects: BTreeMap<ObjectId, DVector<f64>>,
    pub relations: BTreeMap<RelationKey, DVector<f64>>,
}

/// Hidden states of every frame plus the fixed geometry nodes, already
/// encoded to the hidden dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphState {
    pub dim: usize,
    pub frames: BTreeMap<FrameId, FrameGraph>,
    pub geometry: BTreeMap<RelationKey, DVector<f64>>,
}

impl GraphState {
    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        for (&f, frame) in &self.frames {
            for (id, h) in &frame.objects {
                check_dim(format!("object {id} in frame {f}"), h, d)?;
            }
            for (&key, h) in &frame.relations {
                if key.0 == key.1 {
                    return Err(GraphError::SelfRelation(key));
                }
                if !frame.objects.contains_key(&key.0) || !frame.objects.contains_key(&key.1) {
                    return Err(GraphError::DanglingRelation { frame: f, key });
                }
                if !self.geometry.contains_key(&key) {
                    return Err(GraphError::MissingGeometry(key));
                }
                check_dim(format!("relation {key:?} in frame {f}"), h, d)?;
            }
        }
        for (key, g) in &self.geometry {
            check_dim(format!("geometry {key:?}"), g, d)?;
        }
        Ok(())
    }

    fn frame(&self, f: FrameId) -> Result<&FrameGraph> {
        self.frames
            .get(&f)
            .ok_or_else(|| GraphError::UnknownNode(format!("frame {f}")))
    }
}

fn lookup<'a, K: Ord + std::fmt::Debug>(
    map: &'a BTreeMap<K, DVector<f64>>,
    key: &K,
    what: &str,
) -> Result<&'a DVector<f64>> {
    map.get(key)
        .ok_or_else(|| GraphError::UnknownNode(format!("{what} {key:?}")))
}

/// Message to object `i`: gated sum over relations where `i` is the subject
/// (gate `a1`) and where it is the object (gate `a2`).
pub fn object_message(frame: &FrameGraph, i: ObjectId, w: &MessageWeights) -> Result<DVector<f64>> {
    let h_i = lookup(&frame.objects, &i, "object")?;
    check_dim(format!("object {i}"), h_i, w.dim)?;
    let mut m = DVector::zeros(w.dim);
    for (&(s, o), h_rel) in &frame.relations {
        check_dim(format!("relation ({s}, {o})"), h_rel, w.dim)?;
        if s == i {
            m += h_rel * gate(&w.a1, h_i, h_rel);
        }
        if o == i {
            m += h_rel * gate(&w.a2, h_i, h_rel);
        }
    }
    Ok(m)
}

/// Message to relation `i -> j` from its two objects and its geometry node.
pub fn relation_message(
    frame: &FrameGraph,
    key: RelationKey,
    g: &DVector<f64>,
    w: &MessageWeights,
) -> Result<DVector<f64>> {
    let h_rel = lookup(&frame.relations, &key, "relation")?;
    let h_i = lookup(&frame.objects, &key.0, "object")?;
    let h_j = lookup(&frame.objects, &key.1, "object")?;
    for (what, v) in [
        ("relation", h_rel),
        ("subject", h_i),
        ("object", h_j),
        ("geometry", g),
    ] {
        check_dim(what, v, w.dim)?;
    }
    Ok(h_i * gate(&w.b1, h_i, h_rel) + h_j * gate(&w.b2, h_j, h_rel) + g * gate(&w.b3, g, h_rel))
}

/// Cross-frame message to relation `key` in frame `f`: gated sum of the same
/// relation's hidden state in every other frame.
pub fn relation_fusion_message(
    state: &GraphState,
    f: FrameId,
    key: RelationKey,
    w: &MessageWeights,
) -> Result<DVector<f64>> {
    let here = lookup(&state.frame(f)?.relations, &key, "relation")?;
    let mut m = DVector::zeros(w.dim);
    for (&l, other) in &state.frames {
        if l == f {
            continue;
        }
        if let Some(h) = other.relations.get(&key) {
            m += h * gate(&w.c1, here, h);
        }
    }
    Ok(m)
}

/// Cross-frame message to object `i` in frame `f`, averaged over the number
/// of frames in the sequence.
pub fn object_fusion_message(
    state: &GraphState,
    f: FrameId,
    i: ObjectId,
    w: &MessageWeights,
) -> Result<DVector<f64>> {
    let here = lookup(&state.frame(f)?.objects, &i, "object")?;
    let mut m = DVector::zeros(w.dim);
    for (&l, other) in &state.frames {
        if l == f {
            continue;
        }
        if let Some(h) = other.objects.get(&i) {
            m += h * gate(&w.c2, here, h);
        }
    }
    Ok(m / state.frames.len() as f64)
}

/// Fusion messages for every relation and object of frame `f`.
#[allow(clippy::type_complexity)]
pub fn fusion_messages(
    state: &GraphState,
    f: FrameId,
    w: &MessageWeights,
) -> Result<(
    BTreeMap<RelationKey, DVector<f64>>,
    BTreeMap<ObjectId, DVector<f64>>,
)> {
    let frame = state.frame(f)?;
    let relations = frame
        .relations
        .keys()
        .map(|&k| Ok((k, relation_fusion_message(state, f, k, w)?)))
        .collect::<Result<_>>()?;
    let objects = frame
        .objects
        .keys()
        .map(|&i| Ok((i, object_fusion_message(state, f, i, w)?)))
        .collect::<Result<_>>()?;
    Ok((relations, objects))
}

fn round(state: &GraphState, w: &MessageWeights) -> Result<GraphState> {
    let frames = state
        .frames
        .par_iter()
        .map(|(&f, frame)| {
            let (rel_fusion, obj_fusion) = fusion_messages(state, f, w)?;
            let objects = frame
                .objects
                .iter()
                .map(|(&i, h)| {
                    let m = object_message(frame, i, w)? + &obj_fusion[&i];
                    Ok((i, gru_update(h, &m, &w.object_gru)?))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            let relations = frame
                .relations
                .iter()
                .map(|(&key, h)| {
                    let g = lookup(&state.geometry, &key, "geometry")?;
                    let m = relation_message(frame, key, g, w)? + &rel_fusion[&key];
                    Ok((key, gru_update(h, &m, &w.relation_gru)?))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok((f, FrameGraph { objects, relations }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GraphState {
        dim: state.dim,
        frames: frames.into_iter().collect(),
        geometry: state.geometry.clone(),
    })
}

/// Runs `rounds` synchronous rounds. Within a round, local and cross-frame
/// messages are summed into one message per node before the GRU step.
pub fn run_message_passing(
    state: &GraphState,
    w: &MessageWeights,
    rounds: i64,
) -> Result<GraphState> {
    if rounds < 0 {
        return Err(GraphError::NegativeRounds(rounds));
    }
    if w.dim != state.dim {
        return Err(GraphError::Dimension {
            what: "hidden size".into(),
            expected: state.dim,
            got: w.dim,
        });
    }
    w.validate()?;
    state.validate()?;
    let mut current = state.clone();
    for _ in 0..rounds {
        current = round(&current, w)?;
    }
    Ok(current)
}

/// Serialized tensor: shape plus row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn vector(v: &DVector<f64>) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.iter().copied().collect(),
        }
    }

    fn matrix(m: &DMatrix<f64>) -> Self {
        Self {
            shape: vec![m.nrows(), m.ncols()],
            data: m.transpose().iter().copied().collect(),
        }
    }

    fn to_vector(&self, name: &str) -> Result<DVector<f64>> {
        if self.shape.len() != 1 || self.shape[0] != self.data.len() {
            return Err(GraphError::Weights(format!(
                "{name}: expected a vector, shape {:?} with {} values",
                self.shape,
                self.data.len()
            )));
        }
        Ok(DVector::from_vec(self.data.clone()))
    }

    fn to_matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        if self.shape.len() != 2 || self.shape[0] * self.shape[1] != self.data.len() {
            return Err(GraphError::Weights(format!(
                "{name}: expected a matrix, shape {:?} with {} values",
                self.shape,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(
            self.shape[0],
            self.shape[1],
            &self.data,
        ))
    }
}

/// JSON weight container: `{"format", "version", "hidden_dim", "tensors"}`
/// with tensors named `a1`..`c2`, `object_gru.<w_z|u_z|b_z|...>`,
/// `relation_gru.<...>` and optionally `encoder.<k>.weight` /
/// `encoder.<k>.bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightBundle {
    pub format: String,
    pub version: u32,
    pub hidden_dim: usize,
    pub tensors: BTreeMap<String, Tensor>,
}

pub const WEIGHT_FORMAT: &str = "vgfm-weights";

impl WeightBundle {
    pub fn new(weights: &MessageWeights, encoder: Option<&GeometricEncoder>) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, v) in weights.gates() {
            tensors.insert(name.to_string(), Tensor::vector(v));
        }
        for (family, gru) in [
            ("object_gru", &weights.object_gru),
            ("relation_gru", &weights.relation_gru),
        ] {
            for (name, m) in [
                ("w_z", &gru.w_z),
                ("u_z", &gru.u_z),
                ("w_r", &gru.w_r),
                ("u_r", &gru.u_r),
                ("w_h", &gru.w_h),
                ("u_h", &gru.u_h),
            ] {
                tensors.insert(format!("{family}.{name}"), Tensor::matrix(m));
            }
            for (name, b) in [("b_z", &gru.b_z), ("b_r", &gru.b_r), ("b_h", &gru.b_h)] {
                tensors.insert(format!("{family}.{name}"), Tensor::vector(b));
            }
        }
        if let Some(enc) = encoder {
            for (k, layer) in enc.layers.iter().enumerate() {
                tensors.insert(format!("encoder.{k}.weight"), Tensor::matrix(&layer.weight));
                tensors.insert(format!("encoder.{k}.bias"), Tensor::vector(&layer.bias));
            }
        }
        Self {
            format: WEIGHT_FORMAT.to_string(),
            version: 1,
            hidden_dim: weights.dim,
            tensors,
        }
    }

    fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| GraphError::Weights(format!("missing tensor '{name}'")))
    }

    pub fn message_weights(&self) -> Result<MessageWeights> {
        if self.format != WEIGHT_FORMAT {
            return Err(GraphError::Weights(format!(
                "unknown format '{}'",
                self.format
            )));
        }
        let v = |n: &str| self.get(n)?.to_vector(n);
        let gru = |family: &str| -> Result<GruWeights> {
            let m = |n: &str| {
                let name = format!("{family}.{n}");
                self.get(&name)?.to_matrix(&name)
            };
            let b = |n: &str| {
                let name = format!("{family}.{n}");
                self.get(&name)?.to_vector(&name)
            };
            Ok(GruWeights {
                w_z: m("w_z")?,
                u_z: m("u_z")?,
                b_z: b("b_z")?,
                w_r: m("w_r")?,
                u_r: m("u_r")?,
                b_r: b("b_r")?,
                w_h: m("w_h")?,
                u_h: m("u_h")?,
                b_h: b("b_h")?,
            })
        };
        let w = MessageWeights {
            dim: self.hidden_dim,
            a1: v("a1")?,
            a2: v("a2")?,
            b1: v("b1")?,
            b2: v("b2")?,
            b3: v("b3")?,
            c1: v("c1")?,
            c2: v("c2")?,
            object_gru: gru("object_gru")?,
            relation_gru: gru("relation_gru")?,
        };
        w.validate()?;
        Ok(w)
    }

    /// The encoder layers, if the bundle carries any.
    pub fn encoder(&self) -> Result<Option<GeometricEncoder>> {
        let mut layers = Vec::new();
        loop {
            let k = layers.len();
            let wname = format!("encoder.{k}.weight");
            let Some(weight) = self.tensors.get(&wname) else {
                break;
            };
            let bname = format!("encoder.{k}.bias");
            let layer = DenseLayer {
                weight: weight.to_matrix(&wname)?,
                bias: self.get(&bname)?.to_vector(&bname)?,
            };
            if layer.bias.len() != layer.weight.nrows() {
                return Err(GraphError::Weights(format!(
                    "{bname} does not match {wname}"
                )));
            }
            layers.push(layer);
        }
        Ok((!layers.is_empty()).then_some(GeometricEncoder { layers }))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("weights serialise")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| GraphError::Weights(e.to_string()))
    }
}

#[cfg(test)]
#[allow(clippy::neg_multiply)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Vector3};

    fn vec_of(vals: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(vals)
    }

    fn random_state(d: usize, objects: &[ObjectId], frames: usize, seed: u64) -> GraphState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let mut geometry = BTreeMap::new();
        for &i in objects {
            for &j in objects {
                if i != j {
                    geometry.insert((i, j), v());
                }
            }
        }
        let frames = (0..frames as FrameId)
            .map(|f| {
                let objects_map: BTreeMap<_, _> = objects.iter().map(|&i| (i, v())).collect();
                let relations = geometry.keys().map(|&k| (k, v())).collect();
                (
                    f,
                    FrameGraph {
                        objects: objects_map,
                        relations,
                    },
                )
            })
            .collect();
        GraphState {
            dim: d,
            frames,
            geometry,
        }
    }

    #[test]
    fn keypoints_of_unit_sphere() {
        let e = Ellipsoid3D::sphere(Vector3::zeros(), 1.0).unwrap();
        let k = ellipsoid_keypoints(&e);
        assert_eq!(k[0], [0.0; 3]);
        assert_eq!(k[1], [1.0, 0.0, 0.0]);
        assert_eq!(k[2], [-1.0, 0.0, 0.0]);
        assert_eq!(k[3], [0.0, 1.0, 0.0]);
        assert_eq!(k[4], [0.0, -1.0, 0.0]);
        assert_eq!(k[5], [0.0, 0.0, 1.0]);
        assert_eq!(k[6], [0.0, 0.0, -1.0]);
    }

    #[test]
    fn keypoints_of_axis_aligned_ellipsoid() {
        let e = Ellipsoid3D::new(Vector3::zeros(), [2.0, 1.0, 0.5], Matrix3::identity()).unwrap();
        let k = ellipsoid_keypoints(&e);
        assert_eq!(
            &k[1..],
            &[
                [2.0, 0.0, 0.0],
                [-2.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, -1.0, 0.0],
                [0.0, 0.0, 0.5],
                [0.0, 0.0, -0.5]
            ]
        );
    }

    #[test]
    fn pair_feature_swaps_blocks() {
        let a = Ellipsoid3D::sphere(Vector3::new(1.0, 2.0, 3.0), 0.5).unwrap();
        let b = Ellipsoid3D::new(Vector3::zeros(), [2.0, 1.0, 0.5], Matrix3::identity()).unwrap();
        let ab = pair_geometric_feature(&a, &b);
        let ba = pair_geometric_feature(&b, &a);
        assert_eq!(ab[..21], ba[21..]);
        assert_eq!(ab[21..], ba[..21]);
    }

    #[test]
    fn zero_gates_average_incident_relations() {
        let d = 3;
        let w = MessageWeights::zeros(d);
        let mut frame = FrameGraph::default();
        for i in 0..3 {
            frame.objects.insert(i, vec_of(&[i as f64, 1.0, -1.0]));
        }
        frame.relations.insert((0, 1), vec_of(&[1.0, 2.0, 3.0]));
        frame.relations.insert((2, 0), vec_of(&[0.5, 0.0, -4.0]));
        frame.relations.insert((1, 2), vec_of(&[9.0, 9.0, 9.0]));
        let m = object_message(&frame, 0, &w).unwrap();
        assert_eq!(m, vec_of(&[0.75, 1.0, -0.5]));

        let lonely = FrameGraph {
            objects: [(5, vec_of(&[1.0, 1.0, 1.0]))].into_iter().collect(),
            relations: BTreeMap::new(),
        };
        assert_eq!(object_message(&lonely, 5, &w).unwrap(), DVector::zeros(3));
    }

    #[test]
    fn object_gate_matches_scalar_arithmetic() {
        let mut w = MessageWeights::zeros(2);
        w.a1 = vec_of(&[0.5, -1.0, 2.0, 0.25]);
        let mut frame = FrameGraph::default();
        frame.objects.insert(0, vec_of(&[1.0, 2.0]));
        frame.objects.insert(1, vec_of(&[0.0, 0.0]));
        frame.relations.insert((0, 1), vec_of(&[-1.0, 3.0]));
        let dot: f64 = 0.5 * 1.0 - 1.0 * 2.0 + 2.0 * -1.0 + 0.25 * 3.0;
        let g = 1.0 / (1.0 + (-dot).exp());
        let m = object_message(&frame, 0, &w).unwrap();
        assert_relative_eq!(m[0], -g, epsilon = 1e-15);
        assert_relative_eq!(m[1], 3.0 * g, epsilon = 1e-15);
    }

    #[test]
    fn relation_message_closed_forms() {
        let w = MessageWeights::zeros(2);
        let mut frame = FrameGraph::default();
        frame.objects.insert(0, vec_of(&[1.0, 2.0]));
        frame.objects.insert(1, vec_of(&[3.0, -2.0]));
        frame.relations.insert((0, 1), vec_of(&[0.3, 0.3]));
        let g = vec_of(&[4.0, 4.0]);
        let m = relation_message(&frame, (0, 1), &g, &w).unwrap();
        assert_eq!(m, vec_of(&[4.0, 2.0]));

        let mut w = MessageWeights::random(2, 3);
        let zero_g = DVector::zeros(2);
        let with_b3 = relation_message(&frame, (0, 1), &zero_g, &w).unwrap();
        w.b3 = vec_of(&[10.0, -3.0, 7.0, 1.0]);
        assert_eq!(
            relation_message(&frame, (0, 1), &zero_g, &w).unwrap(),
            with_b3
        );
    }

    #[test]
    fn relation_message_matches_scalar_arithmetic() {
        let mut w = MessageWeights::zeros(1);
        w.b1 = vec_of(&[0.2, -0.4]);
        w.b2 = vec_of(&[1.0, 0.5]);
        w.b3 = vec_of(&[-0.3, 0.9]);
        let mut frame = FrameGraph::default();
        frame.objects.insert(0, vec_of(&[2.0]));
        frame.objects.insert(1, vec_of(&[-1.0]));
        frame.relations.insert((0, 1), vec_of(&[0.5]));
        let g = vec_of(&[3.0]);
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expected = s(0.2 * 2.0 - 0.4 * 0.5) * 2.0
            + s(1.0 * -1.0 + 0.5 * 0.5) * -1.0
            + s(-0.3 * 3.0 + 0.9 * 0.5) * 3.0;
        let m = relation_message(&frame, (0, 1), &g, &w).unwrap();
        assert_relative_eq!(m[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn fusion_closed_forms() {
        let d = 4;
        let w = MessageWeights::zeros(d);
        let h = vec_of(&[1.0, -2.0, 0.5, 3.0]);
        for nf in [1usize, 2, 3, 5] {
            let mut state = GraphState {
                dim: d,
                frames: BTreeMap::new(),
                geometry: [((0, 1), DVector::zeros(d))].into_iter().collect(),
            };
            for f in 0..nf as FrameId {
                let mut frame = FrameGraph::default();
                frame.objects.insert(0, h.clone());
                frame.objects.insert(1, h.clone());
                frame.relations.insert((0, 1), h.clone());
                state.frames.insert(f, frame);
            }
            let (rel, obj) = fusion_messages(&state, 0, &w).unwrap();
            let n = nf as f64;
            assert_relative_eq!(obj[&0], &h * ((n - 1.0) / (2.0 * n)), epsilon = 1e-15);
            assert_relative_eq!(rel[&(0, 1)], &h * (0.5 * (n - 1.0)), epsilon = 1e-15);
        }
    }

    #[test]
    fn fusion_matches_scalar_arithmetic() {
        let mut w = MessageWeights::zeros(1);
        w.c1 = vec_of(&[0.7, -0.2]);
        let vals = [0.4, -1.3, 2.2];
        let mut state = GraphState {
            dim: 1,
            frames: BTreeMap::new(),
            geometry: [((0, 1), vec_of(&[0.0]))].into_iter().collect(),
        };
        for (f, &v) in vals.iter().enumerate() {
            let mut frame = FrameGraph::default();
            frame.objects.insert(0, vec_of(&[0.0]));
            frame.objects.insert(1, vec_of(&[0.0]));
            frame.relations.insert((0, 1), vec_of(&[v]));
            state.frames.insert(f as FrameId, frame);
        }
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expected = s(0.7 * 0.4 - 0.2 * -1.3) * -1.3 + s(0.7 * 0.4 - 0.2 * 2.2) * 2.2;
        let m = relation_fusion_message(&state, 0, (0, 1), &w).unwrap();
        assert_relative_eq!(m[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn gru_closed_forms() {
        let gru = GruWeights::zeros(3);
        let h = vec_of(&[2.0, -4.0, 0.5]);
        let m = vec_of(&[7.0, 1.0, -1.0]);
        assert_eq!(
            gru_update(&h, &m, &gru).unwrap(),
            vec_of(&[1.0, -2.0, 0.25])
        );
        assert_eq!(
            gru_update(&DVector::zeros(3), &m, &gru).unwrap(),
            DVector::zeros(3)
        );
        assert!(gru_update(&vec_of(&[1.0]), &m, &gru).is_err());
    }

    #[test]
    fn gru_matches_scalar_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let gru = GruWeights::random(4, &mut rng);
        let h = vec_of(&[0.3, -0.8, 1.5, 0.0]);
        let m = vec_of(&[-0.2, 0.9, 0.4, 2.0]);
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let lin = |w: &DMatrix<f64>,
                   u: &DMatrix<f64>,
                   b: &DVector<f64>,
                   x: &[f64],
                   y: &[f64],
                   k: usize| {
            let mut acc = b[k];
            for c in 0..4 {
                acc += w[(k, c)] * x[c] + u[(k, c)] * y[c];
            }
            acc
        };
        let (hv, mv) = (h.as_slice(), m.as_slice());
        let r: Vec<f64> = (0..4)
            .map(|k| s(lin(&gru.w_r, &gru.u_r, &gru.b_r, mv, hv, k)))
            .collect();
        let rh: Vec<f64> = (0..4).map(|k| r[k] * hv[k]).collect();
        let got = gru_update(&h, &m, &gru).unwrap();
        for k in 0..4 {
            let z = s(lin(&gru.w_z, &gru.u_z, &gru.b_z, mv, hv, k));
            let cand = lin(&gru.w_h, &gru.u_h, &gru.b_h, mv, &rh, k).tanh();
            assert_relative_eq!(got[k], (1.0 - z) * hv[k] + z * cand, epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_rounds_is_identity_and_negative_rejected() {
        let state = random_state(8, &[0, 1, 2], 2, 1);
        let w = MessageWeights::random(8, 2);
        assert_eq!(run_message_passing(&state, &w, 0).unwrap(), state);
        assert_eq!(
            run_message_passing(&state, &w, -1),
            Err(GraphError::NegativeRounds(-1))
        );
    }

    #[test]
    fn zero_weights_halve_every_hidden() {
        let state = random_state(8, &[0, 1, 2, 3], 3, 5);
        let out = run_message_passing(&state, &MessageWeights::zeros(8), 1).unwrap();
        for (f, frame) in &state.frames {
            for (i, h) in &frame.objects {
                assert_eq!(out.frames[f].objects[i], h * 0.5);
            }
            for (k, h) in &frame.relations {
                assert_eq!(out.frames[f].relations[k], h * 0.5);
            }
        }
        assert_eq!(out.geometry, state.geometry);
    }

    #[test]
    fn invalid_graphs_rejected() {
        let mut state = random_state(4, &[0, 1], 1, 3);
        let w = MessageWeights::zeros(4);
        state
            .frames
            .get_mut(&0)
            .unwrap()
            .relations
            .insert((1, 1), DVector::zeros(4));
        assert_eq!(
            run_message_passing(&state, &w, 1),
            Err(GraphError::SelfRelation((1, 1)))
        );
        let state = random_state(4, &[0, 1], 1, 3);
        assert!(matches!(
            run_message_passing(&state, &MessageWeights::zeros(5), 1),
            Err(GraphError::Dimension { .. })
        ));
    }

    #[test]
    fn weight_bundle_round_trip() {
        let w = MessageWeights::random(3, 8);
        let enc = GeometricEncoder::random(&[PAIR_FEATURE_LEN, 5, 3], 1);
        let bundle = WeightBundle::new(&w, Some(&enc));
        let back = WeightBundle::from_json(&bundle.to_json()).unwrap();
        assert_eq!(back.message_weights().unwrap(), w);
        assert_eq!(back.encoder().unwrap().unwrap(), enc);
        assert_eq!(back.tensors["object_gru.w_z"].shape, vec![3, 3]);
        assert_eq!(
            back.tensors["object_gru.w_z"].data[1],
            w.object_gru.w_z[(0, 1)]
        );
    }

    #[test]
    fn weight_bundle_rejects_bad_shapes() {
        let mut bundle = WeightBundle::new(&MessageWeights::zeros(2), None);
        bundle.tensors.get_mut("a1").unwrap().shape = vec![3];
        assert!(bundle.message_weights().is_err());
        let mut bundle = WeightBundle::new(&MessageWeights::zeros(2), None);
        bundle.tensors.remove("c2");
        assert!(bundle.message_weights().is_err());
        assert!(bundle.encoder().unwrap().is_none());
    }

    #[test]
    fn encoder_output_has_hidden_dim() {
        let enc = GeometricEncoder::random(&[PAIR_FEATURE_LEN, 100, 16], 4);
        let a = Ellipsoid3D::sphere(Vector3::zeros(), 1.0).unwrap();
        let g = enc.encode(&pair_geometric_feature(&a, &a)).unwrap();
        assert_eq!(g.len(), 16);
        assert!(g.iter().all(|&x| x >= 0.0));
        assert!(enc.encode(&[1.0; 3]).is_err());
    }
}
