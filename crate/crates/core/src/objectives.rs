//! Policy evaluation: accuracy, FLOPs and communication cost of a merge
//! schedule over a fixed evaluation set.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::{send_tokens, ChannelConfig, TokenCodec};
use crate::encoder::{EncoderWeights, PrototypeHead, TokenMatrix, ToyImage};
use crate::merging::{FixedRatioMerge, LayerMerge, RandomDropMerge, ThresholdMerge};
use crate::{Error, Execution, Result};

pub const TAU_MIN: f64 = 0.5;
pub const TAU_MAX: f64 = 1.0;

/// Per-layer similarity thresholds, each in `[0.5, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MergePolicy {
    thresholds: Vec<f64>,
}

impl MergePolicy {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::Config("policy needs at least one layer".into()));
        }
        for (layer, &value) in thresholds.iter().enumerate() {
            if !(TAU_MIN..=TAU_MAX).contains(&value) {
                return Err(Error::PolicyBounds { layer, value });
            }
        }
        Ok(Self { thresholds })
    }

    /// Every layer at `tau0`.
    pub fn constant(layers: usize, tau0: f64) -> Result<Self> {
        Self::new(vec![tau0; layers])
    }

    /// Maps a point of the unit cube affinely onto `[0.5, 1]^L`.
    pub fn from_unit(u: &[f64]) -> Result<Self> {
        Self::new(
            u.iter()
                .map(|&x| TAU_MIN + (TAU_MAX - TAU_MIN) * x.clamp(0.0, 1.0))
                .collect(),
        )
    }

    pub fn to_unit(&self) -> Vec<f64> {
        self.thresholds
            .iter()
            .map(|t| (t - TAU_MIN) / (TAU_MAX - TAU_MIN))
            .collect()
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    /// Parses a comma- or whitespace-separated list such as `0.9,0.85,1.0`.
    pub fn parse(text: &str) -> Result<Self> {
        let vals = text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad threshold {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(vals)
    }
}

impl TryFrom<Vec<f64>> for MergePolicy {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MergePolicy> for Vec<f64> {
    fn from(p: MergePolicy) -> Self {
        p.thresholds
    }
}

/// `τ0` at every layer.
pub fn constant_threshold_policy(layers: usize, tau0: f64) -> Result<MergePolicy> {
    MergePolicy::constant(layers, tau0)
}

/// Fixed merge count `r` at every layer.
pub fn uniform_ratio_schedule(r: usize) -> MergeSchedule {
    MergeSchedule::FixedRatio { r }
}

/// Everything that can be evaluated end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MergeSchedule {
    Threshold { policy: MergePolicy },
    FixedRatio { r: usize },
    RandomDrop { per_layer: usize, seed: u64 },
}

impl MergeSchedule {
    pub fn threshold(policy: MergePolicy) -> Self {
        MergeSchedule::Threshold { policy }
    }

    pub fn policy(&self) -> Option<&MergePolicy> {
        match self {
            MergeSchedule::Threshold { policy } => Some(policy),
            _ => None,
        }
    }

    pub(crate) fn with_merger<R>(&self, f: impl FnOnce(&dyn LayerMerge) -> R) -> R {
        match self {
            MergeSchedule::Threshold { policy } => f(&ThresholdMerge::new(policy)),
            MergeSchedule::FixedRatio { r } => f(&FixedRatioMerge::new(*r)),
            MergeSchedule::RandomDrop { per_layer, seed } => f(&RandomDropMerge::new(*per_layer, *seed)),
        }
    }
}

/// The minimised triple `(-A, F, C)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector {
    pub neg_accuracy: f64,
    /// Floating-point operations per image.
    pub flops: f64,
    /// Mean final token count `N_L`.
    pub comm_cost: f64,
}

impl ObjectiveVector {
    pub fn new(accuracy: f64, flops: f64, comm_cost: f64) -> Self {
        Self {
            neg_accuracy: -accuracy,
            flops,
            comm_cost,
        }
    }

    pub fn accuracy(&self) -> f64 {
        -self.neg_accuracy
    }

    pub fn gflops(&self) -> f64 {
        self.flops * 1e-9
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.neg_accuracy, self.flops, self.comm_cost]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            neg_accuracy: a[0],
            flops: a[1],
            comm_cost: a[2],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// One observation of the search.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub schedule: MergeSchedule,
    pub objectives: ObjectiveVector,
    pub snr_db: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub wall_time: f64,
}

impl EvalRecord {
    pub fn policy(&self) -> Option<&MergePolicy> {
        self.schedule.policy()
    }
}

/// FLOPs of one forward pass from its per-layer token counts `[N_0, .., N_L]`.
///
/// Layer `l` runs attention on `N_{l-1}` tokens and its MLP on `N_l` tokens:
/// `4 N d^2` for the four projections, `2 N^2 d` for scores and mixing, and
/// `2 r N d^2` multiply-accumulates for the MLP counted as two operations each.
pub fn flops_forward(token_counts: &[usize], dim: usize, mlp_ratio: usize) -> f64 {
    let d = dim as f64;
    let r = mlp_ratio as f64;
    token_counts
        .windows(2)
        .map(|w| {
            let n_in = w[0] as f64;
            let n_out = w[1] as f64;
            4.0 * n_in * d * d + 2.0 * n_in * n_in * d + 2.0 * r * n_out * d * d * 2.0
        })
        .sum()
}

/// Images plus stable message ids used to derive per-image channel noise.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub images: Vec<ToyImage>,
    pub ids: Vec<u64>,
}

impl EvalSet {
    pub fn new(images: Vec<ToyImage>, ids: Vec<u64>) -> Result<Self> {
        if images.len() != ids.len() {
            return Err(Error::Shape("one message id per image required".into()));
        }
        Ok(Self { images, ids })
    }

    pub fn from_indices(all: &[ToyImage], indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| all[i].clone()).collect(),
            ids: indices.iter().map(|&i| i as u64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Per-image outcome of the full pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageOutcome {
    pub predicted: usize,
    pub label: usize,
    pub token_counts: Vec<usize>,
    pub flops: f64,
}

/// Frozen encoder, calibrated head and channel.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub encoder: EncoderWeights,
    pub head: PrototypeHead,
    pub codec: TokenCodec,
    pub channel: ChannelConfig,
    pub exec: Execution,
}

impl Pipeline {
    pub fn new(encoder: EncoderWeights, head: PrototypeHead, channel: ChannelConfig, exec: Execution) -> Result<Self> {
        let codec = TokenCodec::new(channel.codec, encoder.dim())?;
        Ok(Self {
            encoder,
            head,
            codec,
            channel,
            exec,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.encoder.n_layers()
    }

    pub fn with_snr(&self, snr_db: f64) -> Self {
        let mut p = self.clone();
        p.channel.snr_db = snr_db;
        p
    }

    pub fn with_exec(&self, exec: Execution) -> Self {
        let mut p = self.clone();
        p.exec = exec;
        p
    }

    pub fn with_channel_seed(&self, seed: u64) -> Self {
        let mut p = self.clone();
        p.channel.seed = seed;
        p
    }

    /// Tokens as the receiver reconstructs them.
    pub fn received_tokens(&self, img: &ToyImage, merge: &dyn LayerMerge, message: u64) -> Result<TokenMatrix> {
        let pass = self.encoder.forward(img, merge)?;
        send_tokens(&pass.tokens, &self.codec, &self.channel, message)
    }

    /// forward -> encode -> normalise -> AWGN -> decode -> classify.
    pub fn run_image(&self, img: &ToyImage, merge: &dyn LayerMerge, message: u64) -> Result<ImageOutcome> {
        let pass = self.encoder.forward(img, merge)?;
        let received = send_tokens(&pass.tokens, &self.codec, &self.channel, message)?;
        let cfg = self.encoder.config();
        Ok(ImageOutcome {
            predicted: self.head.classify(&received),
            label: img.label,
            flops: flops_forward(&pass.token_counts, cfg.dim, cfg.mlp_ratio),
            token_counts: pass.token_counts,
        })
    }

    pub fn outcomes(&self, schedule: &MergeSchedule, set: &EvalSet) -> Result<Vec<ImageOutcome>> {
        schedule.with_merger(|merge| {
            self.exec
                .try_map(&set.images, |i, img| self.run_image(img, merge, set.ids[i]))
        })
    }

    pub fn evaluate(&self, schedule: &MergeSchedule, set: &EvalSet) -> Result<EvalRecord> {
        if set.is_empty() {
            return Err(Error::Config("empty evaluation set".into()));
        }
        let start = Instant::now();
        let outcomes = self.outcomes(schedule, set)?;
        let n = outcomes.len() as f64;
        let correct = outcomes.iter().filter(|o| o.predicted == o.label).count() as f64;
        let flops = outcomes.iter().map(|o| o.flops).sum::<f64>() / n;
        let comm = outcomes
            .iter()
            .map(|o| *o.token_counts.last().expect("N_0 present") as f64)
            .sum::<f64>()
            / n;
        Ok(EvalRecord {
            schedule: schedule.clone(),
            objectives: ObjectiveVector::new(correct / n, flops, comm),
            snr_db: self.channel.snr_db,
            n_samples: outcomes.len(),
            seed: self.channel.seed,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }
}

/// Evaluates a threshold policy end to end.
pub fn evaluate_policy(policy: &MergePolicy, set: &EvalSet, pipeline: &Pipeline) -> Result<EvalRecord> {
    if policy.len() != pipeline.n_layers() {
        return Err(Error::Shape(format!(
            "policy has {} thresholds, encoder has {} layers",
            policy.len(),
            pipeline.n_layers()
        )));
    }
    pipeline.evaluate(&MergeSchedule::threshold(policy.clone()), set)
}

/// Black-box objective used by the search loops.
pub trait Evaluator: Sync {
    fn evaluate(&self, schedule: &MergeSchedule) -> Result<EvalRecord>;

    /// Policy dimension `L`.
    fn n_layers(&self) -> usize;

    /// `N_0`, used for the fixed-ratio sweep range.
    fn n_tokens(&self) -> usize;
}

/// A pipeline bound to an evaluation set.
pub struct PipelineEvaluator<'a> {
    pub pipeline: &'a Pipeline,
    pub set: &'a EvalSet,
}

impl Evaluator for PipelineEvaluator<'_> {
    fn evaluate(&self, schedule: &MergeSchedule) -> Result<EvalRecord> {
        if let Some(p) = schedule.policy() {
            return evaluate_policy(p, self.set, self.pipeline);
        }
        self.pipeline.evaluate(schedule, self.set)
    }

    fn n_layers(&self) -> usize {
        self.pipeline.n_layers()
    }

    fn n_tokens(&self) -> usize {
        self.pipeline.encoder.config().n_tokens()
    }
}

/// JSON-lines row of the persisted evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRow {
    pub policy: Option<Vec<f64>>,
    pub fixed_ratio: Option<usize>,
    #[serde(rename = "A")]
    pub accuracy: f64,
    /// FLOPs per image.
    #[serde(rename = "F")]
    pub flops: f64,
    #[serde(rename = "C")]
    pub comm_cost: f64,
    /// `null` for a noiseless channel.
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub n_samples: usize,
    pub wall_time: Option<f64>,
}

impl EvalRow {
    pub fn from_record(r: &EvalRecord, include_wall_time: bool) -> Self {
        let (policy, fixed_ratio) = match &r.schedule {
            MergeSchedule::Threshold { policy } => (Some(policy.thresholds().to_vec()), None),
            MergeSchedule::FixedRatio { r } => (None, Some(*r)),
            MergeSchedule::RandomDrop { .. } => (None, None),
        };
        Self {
            policy,
            fixed_ratio,
            accuracy: r.objectives.accuracy(),
            flops: r.objectives.flops,
            comm_cost: r.objectives.comm_cost,
            snr_db: r.snr_db.is_finite().then_some(r.snr_db),
            seed: r.seed,
            n_samples: r.n_samples,
            wall_time: include_wall_time.then_some(r.wall_time),
        }
    }

    pub fn to_record(&self) -> Result<EvalRecord> {
        let schedule = match (&self.policy, self.fixed_ratio) {
            (Some(p), None) => MergeSchedule::threshold(MergePolicy::new(p.clone())?),
            (None, Some(r)) => MergeSchedule::FixedRatio { r },
            _ => return Err(Error::Config("row must carry exactly one of policy / fixed_ratio".into())),
        };
        Ok(EvalRecord {
            schedule,
            objectives: ObjectiveVector::new(self.accuracy, self.flops, self.comm_cost),
            snr_db: self.snr_db.unwrap_or(f64::INFINITY),
            n_samples: self.n_samples,
            seed: self.seed,
            wall_time: self.wall_time.unwrap_or(0.0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Codec;
    use crate::encoder::{generate_dataset, DatasetParams, EncoderConfig};

    #[test]
    fn policy_bounds() {
        assert!(MergePolicy::new(vec![0.5, 1.0, 0.75]).is_ok());
        assert!(matches!(
            MergePolicy::new(vec![0.5, 1.01]),
            Err(Error::PolicyBounds { layer: 1, .. })
        ));
        assert!(matches!(MergePolicy::new(vec![0.49]), Err(Error::PolicyBounds { layer: 0, .. })));
        assert!(MergePolicy::new(vec![f64::NAN]).is_err());
        assert_eq!(MergePolicy::parse("0.9, 1.0").unwrap().thresholds(), &[0.9, 1.0]);
        assert!(MergePolicy::parse("0.9,x").is_err());
        let p = MergePolicy::from_unit(&[0.0, 1.0, 0.5]).unwrap();
        assert_eq!(p.thresholds(), &[0.5, 1.0, 0.75]);
        assert_eq!(p.to_unit(), vec![0.0, 1.0, 0.5]);
        assert!(serde_json::from_str::<MergePolicy>("[0.3]").is_err());
    }

    #[test]
    fn flops_hand_example() {
        assert_eq!(flops_forward(&[2, 2], 4, 4), 672.0);
    }

    #[test]
    fn flops_homogeneity() {
        let full = [16, 16, 8, 8];
        let half = [8, 8, 4, 4];
        let d = 32;
        let lin = |c: &[usize]| -> f64 {
            c.windows(2)
                .map(|w| 4.0 * w[0] as f64 * 1024.0 + 16.0 * w[1] as f64 * 1024.0)
                .sum()
        };
        let quad = |c: &[usize]| -> f64 { c.windows(2).map(|w| 2.0 * (w[0] * w[0]) as f64 * 32.0).sum() };
        assert_eq!(flops_forward(&full, d, 4), lin(&full) + quad(&full));
        assert_eq!(lin(&half) * 2.0, lin(&full));
        assert_eq!(quad(&half) * 4.0, quad(&full));
    }

    fn small_pipeline(snr_db: f64) -> (Pipeline, EvalSet) {
        let w = EncoderWeights::random(EncoderConfig::default(), 1).unwrap();
        let imgs = generate_dataset(&DatasetParams::new(2, 48, 4, 0.7)).unwrap();
        let head = PrototypeHead::calibrate(&w, &imgs[..24], 4, Execution::Parallel).unwrap();
        let cfg = ChannelConfig {
            snr_db,
            seed: 5,
            codec: Codec::Identity,
        };
        let set = EvalSet::from_indices(&imgs, &(24..48).collect::<Vec<_>>());
        (Pipeline::new(w, head, cfg, Execution::Parallel).unwrap(), set)
    }

    #[test]
    fn identity_policy_noiseless_matches_plain_forward() {
        let (p, set) = small_pipeline(f64::INFINITY);
        let rec = evaluate_policy(&MergePolicy::constant(6, 1.0).unwrap(), &set, &p).unwrap();
        let plain = set
            .images
            .iter()
            .filter(|img| p.head.classify(&p.encoder.forward(img, &crate::merging::NoMerge).unwrap().tokens) == img.label)
            .count() as f64
            / set.len() as f64;
        assert_eq!(rec.objectives.accuracy(), plain);
        assert_eq!(rec.objectives.comm_cost, 17.0);
        assert_eq!(rec.objectives.flops, flops_forward(&[17; 7], 32, 4));
    }

    #[test]
    fn costs_never_exceed_identity_and_evaluation_is_repeatable() {
        let (p, set) = small_pipeline(10.0);
        let ident = evaluate_policy(&MergePolicy::constant(6, 1.0).unwrap(), &set, &p).unwrap();
        for tau in [0.5, 0.7, 0.9] {
            let pol = MergePolicy::constant(6, tau).unwrap();
            let a = evaluate_policy(&pol, &set, &p).unwrap();
            let b = evaluate_policy(&pol, &set, &p).unwrap();
            assert_eq!(a.objectives, b.objectives);
            assert!(a.objectives.comm_cost <= 17.0);
            assert!(a.objectives.flops <= ident.objectives.flops);
            assert!((0.0..=1.0).contains(&a.objectives.accuracy()));
        }
        let seq = p.with_exec(Execution::Sequential);
        let pol = MergePolicy::constant(6, 0.8).unwrap();
        assert_eq!(
            evaluate_policy(&pol, &set, &seq).unwrap().objectives,
            evaluate_policy(&pol, &set, &p).unwrap().objectives
        );
    }

    #[test]
    fn wrong_policy_length_is_rejected() {
        let (p, set) = small_pipeline(10.0);
        assert!(matches!(
            evaluate_policy(&MergePolicy::constant(5, 0.9).unwrap(), &set, &p),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_ratio_is_merge_free() {
        let (p, set) = small_pipeline(10.0);
        let a = p.evaluate(&uniform_ratio_schedule(0), &set).unwrap();
        let b = evaluate_policy(&constant_threshold_policy(6, 1.0).unwrap(), &set, &p).unwrap();
        assert_eq!(a.objectives, b.objectives);
    }

    #[test]
    fn eval_row_round_trip() {
        let rec = EvalRecord {
            schedule: MergeSchedule::threshold(MergePolicy::new(vec![0.6, 0.9]).unwrap()),
            objectives: ObjectiveVector::new(0.75, 1.5e6, 9.25),
            snr_db: f64::INFINITY,
            n_samples: 200,
            seed: 4,
            wall_time: 0.5,
        };
        let row = EvalRow::from_record(&rec, false);
        assert_eq!(row.snr_db, None);
        assert_eq!(row.wall_time, None);
        let text = serde_json::to_string(&row).unwrap();
        let back: EvalRow = serde_json::from_str(&text).unwrap();
        let mut expect = rec.clone();
        expect.wall_time = 0.0;
        assert_eq!(back.to_record().unwrap(), expect);
    }
}
