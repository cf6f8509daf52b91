//! Batch evaluation of the localisation methods on synthetic scenes.
//!
//! Every scene draws from its own random stream, derived from the master
//! seed and the scene index, so results do not depend on how scenes are
//! scheduled across threads.

use crate::metrics::{baseline_angle, iou_3d, pose_metrics, DEFAULT_IOU_SAMPLES};
use crate::scene::{
    generate_scene, mix_seed, perturb_bboxes, SceneConfig, SceneError, SyntheticScene,
};
use crate::solver::{localize, Method, ObjectId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub scenes: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub noise_px: f64,
    /// When set, each scene draws its arc span uniformly from this range and
    /// `scene.span_deg` is ignored.
    pub span_range_deg: Option<[f64; 2]>,
    pub iou_samples: usize,
    /// Edges of the baseline-angle bins, in degrees.
    pub angle_bin_edges: Vec<f64>,
    pub scene: SceneConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scenes: 20,
            seed: 0,
            methods: Method::ALL.to_vec(),
            noise_px: 0.0,
            span_range_deg: None,
            iou_samples: DEFAULT_IOU_SAMPLES,
            angle_bin_edges: (0..=10).map(f64::from).collect(),
            scene: SceneConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidConfig(m));
        if !(self.noise_px >= 0.0) || !self.noise_px.is_finite() {
            return bad(format!("noise_px must be >= 0, got {}", self.noise_px));
        }
        if let Some([lo, hi]) = self.span_range_deg {
            if !(lo > 0.0 && hi >= lo && hi < 360.0) {
                return bad(format!("span range [{lo}, {hi}] is invalid"));
            }
        }
        if self.iou_samples == 0 {
            return bad("iou_samples must be positive".into());
        }
        if self.angle_bin_edges.len() < 2 || self.angle_bin_edges.windows(2).any(|w| !(w[1] > w[0]))
        {
            return bad("angle_bin_edges must be strictly increasing with at least 2 edges".into());
        }
        let unique: BTreeSet<_> = self.methods.iter().collect();
        if unique.len() != self.methods.len() {
            return bad("methods must not repeat".into());
        }
        self.scene.validate()
    }

    /// The scene drawn at `index`, with its detections already perturbed.
    pub fn scene(&self, index: usize) -> Result<SyntheticScene, SceneError> {
        let stream = mix_seed(self.seed, index as u64);
        let mut cfg = self.scene.clone();
        if let Some([lo, hi]) = self.span_range_deg {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(stream, 0));
            cfg.span_deg = if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            };
        }
        let exact = generate_scene(&cfg, mix_seed(stream, 1))?;
        perturb_bboxes(&exact, self.noise_px, mix_seed(stream, 2))
    }
}

/// One (scene, object, method) evaluation. Accuracy fields are `None` when
/// the estimate is not a valid ellipsoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scene: usize,
    pub object: ObjectId,
    pub method: Method,
    pub valid: bool,
    pub o3d: Option<f64>,
    pub trans_err: Option<f64>,
    pub axis_err: Option<f64>,
    pub span_deg: f64,
}

/// Evaluates every method on one scene.
pub fn evaluate_scene(
    scene_index: usize,
    scene: &SyntheticScene,
    methods: &[Method],
    iou_samples: usize,
    iou_seed: u64,
) -> Vec<MetricsRecord> {
    let mut records = Vec::new();
    let spans: BTreeMap<ObjectId, f64> = scene
        .tracks
        .iter()
        .map(|t| {
            let gt = scene.ground_truth(t.object_id).map(|e| e.center);
            let span = match (t.cameras(&scene.cameras), gt) {
                (Ok(cams), Some(c)) => baseline_angle(&cams, &c).unwrap_or(f64::NAN),
                _ => f64::NAN,
            };
            (t.object_id, span)
        })
        .collect();
    for &method in methods {
        for solve in localize(method, &scene.tracks, &scene.cameras) {
            let gt = scene.ground_truth(solve.object_id);
            let est = solve.result.as_ref().ok().and_then(|r| r.ellipsoid());
            let (valid, o3d, trans_err, axis_err) = match (est, gt) {
                (Some(e), Some(g)) => {
                    let (t, a) = pose_metrics(e, g);
                    let seed = mix_seed(iou_seed, solve.object_id as u64);
                    (
                        true,
                        Some(iou_3d(e, g, iou_samples, seed)),
                        Some(t),
                        Some(a),
                    )
                }
                (Some(_), None) => (true, None, None, None),
                _ => (false, None, None, None),
            };
            records.push(MetricsRecord {
                scene: scene_index,
                object: solve.object_id,
                method,
                valid,
                o3d,
                trans_err,
                axis_err,
                span_deg: spans.get(&solve.object_id).copied().unwrap_or(f64::NAN),
            });
        }
    }
    records
}

/// Generates, perturbs and evaluates `config.scenes` scenes. Records are in
/// (scene, method, object) order.
pub fn evaluate(config: &EvalConfig) -> Result<Vec<MetricsRecord>, SceneError> {
    config.validate()?;
    let per_scene: Vec<Result<Vec<MetricsRecord>, SceneError>> = (0..config.scenes)
        .into_par_iter()
        .map(|i| {
            let scene = config.scene(i)?;
            let iou_seed = mix_seed(mix_seed(config.seed, i as u64), 3);
            Ok(evaluate_scene(
                i,
                &scene,
                &config.methods,
                config.iou_samples,
                iou_seed,
            ))
        })
        .collect();
    let mut out = Vec::new();
    for r in per_scene {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub objects: usize,
    pub mean_o3d: Option<f64>,
    pub mean_trans_err: Option<f64>,
    pub mean_axis_err: Option<f64>,
    pub median_trans_err: Option<f64>,
    pub median_axis_err: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub objects: usize,
    pub valid: usize,
    pub validity_rate: Option<f64>,
    /// Accuracy over the objects valid under every evaluated method.
    pub common: Accuracy,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub lo_deg: f64,
    pub hi_deg: f64,
    pub methods: BTreeMap<Method, BinMethod>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BinMethod {
    pub objects: usize,
    pub validity_rate: Option<f64>,
    pub common: Accuracy,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub records: usize,
    /// Objects valid under every method.
    pub common_valid: usize,
    pub methods: BTreeMap<Method, MethodSummary>,
    /// `validity(lfdc) - validity(lfd)` when both methods were run.
    pub validity_gap: Option<f64>,
    pub bins: Vec<BinSummary>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    })
}

fn accuracy(records: &[&MetricsRecord]) -> Accuracy {
    let o3d: Vec<f64> = records.iter().filter_map(|r| r.o3d).collect();
    let trans: Vec<f64> = records.iter().filter_map(|r| r.trans_err).collect();
    let axis: Vec<f64> = records.iter().filter_map(|r| r.axis_err).collect();
    Accuracy {
        objects: records.len(),
        mean_o3d: mean(&o3d),
        mean_trans_err: mean(&trans),
        mean_axis_err: mean(&axis),
        median_trans_err: median(&trans),
        median_axis_err: median(&axis),
    }
}

fn rate(valid: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| valid as f64 / total as f64)
}

/// Validity over all records; accuracy only over objects every method found
/// valid; both again per baseline-angle bin.
pub fn summarize(records: &[MetricsRecord], bin_edges: &[f64]) -> Summary {
    let methods: BTreeSet<Method> = records.iter().map(|r| r.method).collect();
    let mut by_object: BTreeMap<(usize, ObjectId), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        by_object.entry((r.scene, r.object)).or_default().push(r);
    }
    let common: BTreeSet<(usize, ObjectId)> = by_object
        .iter()
        .filter(|(_, rs)| rs.len() == methods.len() && rs.iter().all(|r| r.valid))
        .map(|(k, _)| *k)
        .collect();
    let in_common = |r: &MetricsRecord| common.contains(&(r.scene, r.object));

    let per_method = |subset: &dyn Fn(&MetricsRecord) -> bool, m: Method| {
        let all: Vec<&MetricsRecord> = records
            .iter()
            .filter(|r| r.method == m && subset(r))
            .collect();
        let valid = all.iter().filter(|r| r.valid).count();
        let shared: Vec<&MetricsRecord> = all.iter().copied().filter(|r| in_common(r)).collect();
        (all.len(), valid, accuracy(&shared))
    };

    let mut method_summaries = BTreeMap::new();
    for &m in &methods {
        let (objects, valid, common) = per_method(&|_| true, m);
        method_summaries.insert(
            m,
            MethodSummary {
                objects,
                valid,
                validity_rate: rate(valid, objects),
                common,
            },
        );
    }
    let validity_gap = match (
        method_summaries
            .get(&Method::Lfdc)
            .and_then(|s| s.validity_rate),
        method_summaries
            .get(&Method::Lfd)
            .and_then(|s| s.validity_rate),
    ) {
        (Some(c), Some(d)) => Some(c - d),
        _ => None,
    };

    let bins = bin_edges
        .windows(2)
        .map(|w| {
            let (lo, hi) = (w[0], w[1]);
            let inside = move |r: &MetricsRecord| r.span_deg >= lo && r.span_deg < hi;
            let methods = methods
                .iter()
                .map(|&m| {
                    let (objects, valid, common) = per_method(&inside, m);
                    (
                        m,
                        BinMethod {
                            objects,
                            validity_rate: rate(valid, objects),
                            common,
                        },
                    )
                })
                .collect();
            BinSummary {
                lo_deg: lo,
                hi_deg: hi,
                methods,
            }
        })
        .collect();

    Summary {
        records: records.len(),
        common_valid: common.len(),
        methods: method_summaries,
        validity_gap,
        bins,
    }
}

/// CSV with columns `scene,object,method,valid,o3d,trans_err,axis_err,span_deg`;
/// missing accuracy values are left empty.
pub fn write_csv<W: std::io::Write>(records: &[MetricsRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scene",
        "object",
        "method",
        "valid",
        "o3d",
        "trans_err",
        "axis_err",
        "span_deg",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
    for r in records {
        w.write_record([
            r.scene.to_string(),
            r.object.to_string(),
            r.method.to_string(),
            r.valid.to_string(),
            opt(r.o3d),
            opt(r.trans_err),
            opt(r.axis_err),
            format!("{:.6}", r.span_deg),
        ])?;
    }
    w.flush()?;
    Ok(())
}
