//! Group-comparison methods, filtering strategies and the per-step verdict.
//!
//! A method is a window shape plus an aggregation over the per-demonstration
//! costs of one group. A strategy pairs the method used against the safe
//! group with the method used against the unsafe group. The running
//! trajectory passes only while its safe cost is strictly below its unsafe
//! cost.
//!
//! Method ids follow `<Agg><Shape>[W<w>]`: `MinFull`, `MaxEqual`,
//! `MeanTrajW5`, `MinDemoW10`, `MeanBothW5`, ... Strategy ids join the safe
//! and unsafe method ids with `/`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dtw::{dtw_alignment, CostNormalization, PrefixDtw};
use crate::error::{Error, Result};
use crate::types::{
    encode_step, episode_to_trajectory, DemoSet, FeatureVector, Normalizer, Trajectory,
    TrajectoryMode,
};

/// Fixed window sizes, in transitions.
pub const WINDOW_SIZES: [usize; 2] = [5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WindowShape {
    /// Whole trajectory against whole demonstration.
    Full,
    /// Whole trajectory against the demonstration suffix of the same length.
    EqualLength,
    /// Trajectory suffix of `w` against the whole demonstration.
    FixedTraj(usize),
    /// Whole trajectory against the demonstration suffix of `w`.
    FixedDemo(usize),
    /// Suffixes of `w` on both sides.
    FixedBoth(usize),
}

impl WindowShape {
    pub fn all() -> Vec<WindowShape> {
        let mut shapes = vec![WindowShape::Full, WindowShape::EqualLength];
        for ctor in [
            WindowShape::FixedTraj as fn(usize) -> WindowShape,
            WindowShape::FixedDemo,
            WindowShape::FixedBoth,
        ] {
            shapes.extend(WINDOW_SIZES.iter().map(|&w| ctor(w)));
        }
        shapes
    }

    fn label(self) -> String {
        match self {
            WindowShape::Full => "Full".into(),
            WindowShape::EqualLength => "Equal".into(),
            WindowShape::FixedTraj(w) => format!("TrajW{w}"),
            WindowShape::FixedDemo(w) => format!("DemoW{w}"),
            WindowShape::FixedBoth(w) => format!("BothW{w}"),
        }
    }

    fn parse_label(s: &str) -> Option<WindowShape> {
        match s {
            "Full" => return Some(WindowShape::Full),
            "Equal" => return Some(WindowShape::EqualLength),
            _ => {}
        }
        let (side, w) = s.split_once('W')?;
        let w: usize = w.parse().ok()?;
        if !WINDOW_SIZES.contains(&w) {
            return None;
        }
        match side {
            "Traj" => Some(WindowShape::FixedTraj(w)),
            "Demo" => Some(WindowShape::FixedDemo(w)),
            "Both" => Some(WindowShape::FixedBoth(w)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Aggregation {
    Min,
    Max,
    Mean,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::Min, Aggregation::Max, Aggregation::Mean];

    fn label(self) -> &'static str {
        match self {
            Aggregation::Min => "Min",
            Aggregation::Max => "Max",
            Aggregation::Mean => "Mean",
        }
    }

    /// Reduces a non-empty cost set; values are folded in order.
    pub fn apply(self, costs: &[f64]) -> Result<f64> {
        if costs.is_empty() {
            return Err(Error::Empty("demonstration group".into()));
        }
        Ok(match self {
            Aggregation::Min => costs.iter().copied().fold(f64::INFINITY, f64::min),
            Aggregation::Max => costs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Mean => costs.iter().sum::<f64>() / costs.len() as f64,
        })
    }
}

/// How one trajectory is compared against one demonstration group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MethodSpec {
    pub shape: WindowShape,
    pub agg: Aggregation,
}

impl MethodSpec {
    pub fn new(agg: Aggregation, shape: WindowShape) -> Self {
        Self { shape, agg }
    }

    pub fn id(&self) -> String {
        format!("{}{}", self.agg.label(), self.shape.label())
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        for agg in Aggregation::ALL {
            if let Some(rest) = s.strip_prefix(agg.label()) {
                if let Some(shape) = WindowShape::parse_label(rest) {
                    return Ok(MethodSpec { shape, agg });
                }
            }
        }
        Err(Error::UnknownMethod(s.to_string()))
    }
}

impl Serialize for MethodSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.id())
    }
}

impl<'de> Deserialize<'de> for MethodSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// All 24 methods, shape-major and aggregation-minor.
pub fn enumerate_methods() -> Vec<MethodSpec> {
    WindowShape::all()
        .into_iter()
        .flat_map(|shape| Aggregation::ALL.map(|agg| MethodSpec { shape, agg }))
        .collect()
}

/// An ordered (safe-group method, unsafe-group method) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrategySpec {
    pub safe_method: MethodSpec,
    pub unsafe_method: MethodSpec,
}

impl StrategySpec {
    pub fn new(safe_method: MethodSpec, unsafe_method: MethodSpec) -> Self {
        Self {
            safe_method,
            unsafe_method,
        }
    }

    pub fn id(&self) -> String {
        format!("{}/{}", self.safe_method.id(), self.unsafe_method.id())
    }

    /// Canonical order: lexicographic on (safe id, unsafe id).
    pub fn cmp_ids(&self, other: &Self) -> Ordering {
        (self.safe_method.id(), self.unsafe_method.id())
            .cmp(&(other.safe_method.id(), other.unsafe_method.id()))
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.safe_method, self.unsafe_method)
    }
}

impl FromStr for StrategySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (safe, unsafe_) = s
            .split_once('/')
            .ok_or_else(|| Error::UnknownMethod(format!("{s} (expected SAFE/UNSAFE)")))?;
        Ok(Self::new(safe.parse()?, unsafe_.parse()?))
    }
}

/// All 576 strategies, safe-method-major.
pub fn enumerate_strategies() -> Vec<StrategySpec> {
    let methods = enumerate_methods();
    methods
        .iter()
        .flat_map(|&s| methods.iter().map(move |&u| StrategySpec::new(s, u)))
        .collect()
}

fn suffix(seq: &[FeatureVector], w: usize) -> &[FeatureVector] {
    &seq[seq.len() - w.min(seq.len())..]
}

/// Selects the compared parts of trajectory and demonstration. Windows are
/// trailing suffixes clamped to the available length.
pub fn apply_window<'a>(
    traj: &'a [FeatureVector],
    demo: &'a [FeatureVector],
    shape: WindowShape,
) -> (&'a [FeatureVector], &'a [FeatureVector]) {
    match shape {
        WindowShape::Full => (traj, demo),
        WindowShape::EqualLength => (traj, suffix(demo, traj.len())),
        WindowShape::FixedTraj(w) => (suffix(traj, w), demo),
        WindowShape::FixedDemo(w) => (traj, suffix(demo, w)),
        WindowShape::FixedBoth(w) => (suffix(traj, w), suffix(demo, w)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Safe,
    Unsafe,
}

/// Demonstration trajectories in comparison space (encoded and, optionally,
/// z-scored), ready to be shared read-only across workers.
#[derive(Debug, Clone)]
pub struct DemoGroups {
    mode: TrajectoryMode,
    safe: Vec<Trajectory>,
    unsafe_: Vec<Trajectory>,
    normalizer: Option<Normalizer>,
    cost_norm: CostNormalization,
}

impl DemoGroups {
    pub fn new(demos: &DemoSet, normalize_features: bool) -> Result<Self> {
        Self::with_options(demos, normalize_features, CostNormalization::None)
    }

    pub fn with_options(
        demos: &DemoSet,
        normalize_features: bool,
        cost_norm: CostNormalization,
    ) -> Result<Self> {
        let normalizer = if normalize_features {
            Some(Normalizer::fit(demos)?)
        } else {
            None
        };
        let convert = |records: &[crate::types::EpisodeRecord]| -> Result<Vec<Trajectory>> {
            records
                .iter()
                .map(|r| {
                    let mut t = episode_to_trajectory(r, demos.mode)?;
                    if let Some(n) = &normalizer {
                        n.apply_trajectory(&mut t)?;
                    }
                    Ok(t)
                })
                .collect()
        };
        let safe = convert(&demos.safe)?;
        let unsafe_ = convert(&demos.unsafe_demos)?;
        if safe.is_empty() || unsafe_.is_empty() {
            return Err(Error::InvalidDemoSet("both groups must be non-empty".into()));
        }
        Ok(Self {
            mode: demos.mode,
            safe,
            unsafe_,
            normalizer,
            cost_norm,
        })
    }

    /// Groups built directly from trajectories already in comparison space.
    pub fn from_trajectories(
        mode: TrajectoryMode,
        safe: Vec<Trajectory>,
        unsafe_: Vec<Trajectory>,
    ) -> Result<Self> {
        if safe.is_empty() || unsafe_.is_empty() {
            return Err(Error::InvalidDemoSet("both groups must be non-empty".into()));
        }
        Ok(Self {
            mode,
            safe,
            unsafe_,
            normalizer: None,
            cost_norm: CostNormalization::None,
        })
    }

    pub fn mode(&self) -> TrajectoryMode {
        self.mode
    }

    pub fn group(&self, g: Group) -> &[Trajectory] {
        match g {
            Group::Safe => &self.safe,
            Group::Unsafe => &self.unsafe_,
        }
    }

    pub fn cost_normalization(&self) -> CostNormalization {
        self.cost_norm
    }

    /// Encodes one step per the groups' mode and maps it into comparison space.
    pub fn featurize(&self, state: &[f64], action: &[f64]) -> Result<FeatureVector> {
        let mut step = encode_step(state, action, self.mode);
        if let Some(n) = &self.normalizer {
            n.apply(&mut step)?;
        }
        Ok(step)
    }
}

/// Aggregated cost of `traj` against every demonstration of a group.
pub fn group_cost(
    traj: &[FeatureVector],
    demos: &[Trajectory],
    method: MethodSpec,
    norm: CostNormalization,
) -> Result<f64> {
    if demos.is_empty() {
        return Err(Error::Empty("demonstration group".into()));
    }
    let costs = demos
        .iter()
        .map(|d| {
            let (t, dm) = apply_window(traj, d.steps(), method.shape);
            dtw_alignment(t, dm).map(|al| al.value(norm))
        })
        .collect::<Result<Vec<f64>>>()?;
    method.agg.apply(&costs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Filter,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterDecision {
    pub verdict: Verdict,
    pub safe_cost: f64,
    pub unsafe_cost: f64,
}

impl FilterDecision {
    /// Passes only on a strict `safe < unsafe`; ties filter.
    pub fn from_costs(safe_cost: f64, unsafe_cost: f64) -> Self {
        let verdict = if safe_cost < unsafe_cost {
            Verdict::Pass
        } else {
            Verdict::Filter
        };
        Self {
            verdict,
            safe_cost,
            unsafe_cost,
        }
    }

    pub fn is_filter(&self) -> bool {
        self.verdict == Verdict::Filter
    }
}

/// Verdict for a trajectory already in the groups' comparison space.
pub fn evaluate(
    strategy: &StrategySpec,
    traj: &Trajectory,
    demos: &DemoGroups,
) -> Result<FilterDecision> {
    if traj.is_empty() {
        return Err(Error::Empty("trajectory".into()));
    }
    let norm = demos.cost_norm;
    let safe = group_cost(traj.steps(), &demos.safe, strategy.safe_method, norm)?;
    let unsafe_ = group_cost(traj.steps(), &demos.unsafe_, strategy.unsafe_method, norm)?;
    Ok(FilterDecision::from_costs(safe, unsafe_))
}

enum DemoTracker<'d> {
    Prefix(PrefixDtw<'d>),
    Direct(&'d [FeatureVector]),
}

/// Per-demonstration costs of a growing trajectory for one window shape.
///
/// Shapes whose demonstration side is fixed (`Full`, `FixedDemo`) advance one
/// DP row per step; the rest are recomputed on their (short or
/// length-matched) windows. Results are bit-identical to [`group_cost`].
pub(crate) struct ShapeTracker<'d> {
    shape: WindowShape,
    norm: CostNormalization,
    demos: Vec<DemoTracker<'d>>,
}

impl<'d> ShapeTracker<'d> {
    pub(crate) fn new(
        shape: WindowShape,
        demos: &'d [Trajectory],
        norm: CostNormalization,
    ) -> Result<Self> {
        let demos = demos
            .iter()
            .map(|d| {
                Ok(match shape {
                    WindowShape::Full => DemoTracker::Prefix(PrefixDtw::new(d.steps())?),
                    WindowShape::FixedDemo(w) => {
                        DemoTracker::Prefix(PrefixDtw::new(suffix(d.steps(), w))?)
                    }
                    _ => DemoTracker::Direct(d.steps()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { shape, norm, demos })
    }

    /// `traj` must be the previous trajectory plus exactly one new step.
    pub(crate) fn advance(&mut self, traj: &[FeatureVector], out: &mut Vec<f64>) -> Result<()> {
        let step = traj
            .last()
            .ok_or_else(|| Error::Empty("trajectory".into()))?;
        out.clear();
        for tracker in &mut self.demos {
            let al = match tracker {
                DemoTracker::Prefix(p) => {
                    debug_assert_eq!(p.len() + 1, traj.len());
                    p.push(step)?
                }
                DemoTracker::Direct(demo) => {
                    let (t, d) = apply_window(traj, demo, self.shape);
                    dtw_alignment(t, d)?
                }
            };
            out.push(al.value(self.norm));
        }
        Ok(())
    }
}

/// Incremental verdicts for one episode under one strategy.
pub struct StepEvaluator<'d> {
    strategy: StrategySpec,
    demos: &'d DemoGroups,
    traj: Trajectory,
    safe: ShapeTracker<'d>,
    unsafe_: ShapeTracker<'d>,
    buf: Vec<f64>,
}

impl<'d> StepEvaluator<'d> {
    pub fn new(strategy: StrategySpec, demos: &'d DemoGroups) -> Result<Self> {
        let norm = demos.cost_norm;
        Ok(Self {
            strategy,
            demos,
            traj: Trajectory::new(demos.mode),
            safe: ShapeTracker::new(strategy.safe_method.shape, &demos.safe, norm)?,
            unsafe_: ShapeTracker::new(strategy.unsafe_method.shape, &demos.unsafe_, norm)?,
            buf: Vec::new(),
        })
    }

    pub fn strategy(&self) -> &StrategySpec {
        &self.strategy
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.traj
    }

    /// Appends a comparison-space step and returns the verdict on the extended trajectory.
    pub fn push(&mut self, step: FeatureVector) -> Result<FilterDecision> {
        self.traj.push(step)?;
        self.safe.advance(self.traj.steps(), &mut self.buf)?;
        let safe = self.strategy.safe_method.agg.apply(&self.buf)?;
        self.unsafe_.advance(self.traj.steps(), &mut self.buf)?;
        let unsafe_ = self.strategy.unsafe_method.agg.apply(&self.buf)?;
        Ok(FilterDecision::from_costs(safe, unsafe_))
    }

    /// Encodes a raw (state, action) pair and pushes it.
    pub fn push_raw(&mut self, state: &[f64], action: &[f64]) -> Result<FilterDecision> {
        let step = self.demos.featurize(state, action)?;
        self.push(step)
    }

    /// Fresh evaluator for the next episode, sharing the same demonstrations.
    pub fn restart(&self) -> Result<StepEvaluator<'d>> {
        Self::new(self.strategy, self.demos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn seq(vals: &[f64]) -> Vec<FeatureVector> {
        vals.iter().map(|&v| vec![v]).collect()
    }

    fn traj(vals: &[f64]) -> Trajectory {
        Trajectory::from_steps(TrajectoryMode::StateOnly, seq(vals)).unwrap()
    }

    #[test]
    fn method_space_cardinality() {
        let methods = enumerate_methods();
        assert_eq!(methods.len(), 24);
        let ids: HashSet<String> = methods.iter().map(MethodSpec::id).collect();
        assert_eq!(ids.len(), 24);
        assert!(ids.contains("MinDemoW5"));
        assert!(ids.contains("MeanBothW10"));
        assert!(ids.contains("MaxEqual"));
        assert!(ids.contains("MinFull"));
        let strategies = enumerate_strategies();
        assert_eq!(strategies.len(), 576);
        let sids: HashSet<String> = strategies.iter().map(StrategySpec::id).collect();
        assert_eq!(sids.len(), 576);
    }

    #[test]
    fn canonical_order_is_shape_major() {
        let ids: Vec<String> = enumerate_methods().iter().map(MethodSpec::id).collect();
        assert_eq!(&ids[..4], ["MinFull", "MaxFull", "MeanFull", "MinEqual"]);
        assert_eq!(ids[23], "MeanBothW10");
    }

    #[test]
    fn ids_round_trip() {
        for m in enumerate_methods() {
            assert_eq!(m.id().parse::<MethodSpec>().unwrap(), m);
        }
        let s: StrategySpec = "MeanDemoW5/MeanDemoW10".parse().unwrap();
        assert_eq!(s.safe_method.shape, WindowShape::FixedDemo(5));
        assert_eq!(s.unsafe_method.agg, Aggregation::Mean);
        for bad in ["MinBoth", "MinDemoW7", "MedianFull", "Full", ""] {
            assert!(bad.parse::<MethodSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn window_examples() {
        let t = seq(&[1.0, 2.0, 3.0]);
        let d = seq(&(0..100).map(f64::from).collect::<Vec<_>>());
        let (wt, wd) = apply_window(&t, &d, WindowShape::EqualLength);
        assert_eq!(wt.len(), 3);
        assert_eq!(wd, &d[97..]);

        let t2 = seq(&[1.0, 2.0]);
        let (wt, wd) = apply_window(&t2, &d, WindowShape::FixedBoth(5));
        assert_eq!(wt, &t2[..]);
        assert_eq!(wd, &d[95..]);

        let (wt, wd) = apply_window(&t, &d, WindowShape::Full);
        assert_eq!((wt, wd), (&t[..], &d[..]));

        let long = seq(&(0..12).map(f64::from).collect::<Vec<_>>());
        let (wt, wd) = apply_window(&long, &t, WindowShape::FixedTraj(10));
        assert_eq!(wt, &long[2..]);
        assert_eq!(wd, &t[..]);
        let (wt, wd) = apply_window(&long, &t, WindowShape::FixedDemo(10));
        assert_eq!((wt.len(), wd.len()), (12, 3));
    }

    #[test]
    fn group_cost_aggregations() {
        let t = seq(&[0.0]);
        let demos = vec![traj(&[3.0]), traj(&[5.0]), traj(&[10.0])];
        let cost = |agg| {
            group_cost(&t, &demos, MethodSpec::new(agg, WindowShape::Full), CostNormalization::None)
                .unwrap()
        };
        assert_eq!(cost(Aggregation::Min), 3.0);
        assert_eq!(cost(Aggregation::Mean), 6.0);
        assert_eq!(cost(Aggregation::Max), 10.0);

        let same = seq(&[3.0]);
        let min_full = MethodSpec::new(Aggregation::Min, WindowShape::Full);
        assert_eq!(group_cost(&same, &demos, min_full, CostNormalization::None).unwrap(), 0.0);
        assert!(group_cost(&same, &[], min_full, CostNormalization::None).is_err());
    }

    #[test]
    fn verdict_is_strict() {
        assert_eq!(FilterDecision::from_costs(1.2, 3.4).verdict, Verdict::Pass);
        assert_eq!(FilterDecision::from_costs(2.0, 2.0).verdict, Verdict::Filter);
        assert_eq!(FilterDecision::from_costs(3.0, 2.0).verdict, Verdict::Filter);
    }

    #[test]
    fn trajectory_matching_unsafe_demo_is_filtered() {
        let unsafe_demo = [0.0, 0.3, 0.7, 1.2];
        let groups = DemoGroups::from_trajectories(
            TrajectoryMode::StateOnly,
            vec![traj(&[0.0, 0.1, 0.1, 0.2]), traj(&[0.0, -0.2, -0.3])],
            vec![traj(&unsafe_demo), traj(&[5.0, 6.0])],
        )
        .unwrap();
        let min_full = MethodSpec::new(Aggregation::Min, WindowShape::Full);
        let strategy = StrategySpec::new(min_full, min_full);
        let decision = evaluate(&strategy, &traj(&unsafe_demo), &groups).unwrap();
        assert_eq!(decision.unsafe_cost, 0.0);
        // direct check: the closest safe demo is the first one
        let expected_safe = crate::dtw::dtw_cost(&seq(&unsafe_demo), &seq(&[0.0, 0.1, 0.1, 0.2])).unwrap();
        assert_eq!(decision.safe_cost, expected_safe);
        assert!(decision.safe_cost > 0.0);
        assert_eq!(decision.verdict, Verdict::Filter);
    }

    fn scalar_seq(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0..3.0f64, 1..=max_len)
    }

    proptest! {
        #[test]
        fn aggregation_ordering(t in scalar_seq(8), ds in prop::collection::vec(scalar_seq(12), 1..5), si in 0usize..8) {
            let demos: Vec<Trajectory> = ds.iter().map(|d| traj(d)).collect();
            let shape = WindowShape::all()[si];
            let c = |agg| group_cost(&seq(&t), &demos, MethodSpec::new(agg, shape), CostNormalization::None).unwrap();
            let (lo, mid, hi) = (c(Aggregation::Min), c(Aggregation::Mean), c(Aggregation::Max));
            prop_assert!(lo <= mid + 1e-12 && mid <= hi + 1e-12);
        }

        #[test]
        fn verdict_scale_invariant(
            t in scalar_seq(8),
            safe in prop::collection::vec(scalar_seq(10), 1..4),
            unsafe_ in prop::collection::vec(scalar_seq(10), 1..4),
            si in 0usize..576,
            c in 0.1..10.0f64,
        ) {
            let strategy = enumerate_strategies()[si];
            let build = |k: f64| {
                let sc = |v: &Vec<f64>| traj(&v.iter().map(|x| x * k).collect::<Vec<_>>());
                let g = DemoGroups::from_trajectories(
                    TrajectoryMode::StateOnly,
                    safe.iter().map(sc).collect(),
                    unsafe_.iter().map(sc).collect(),
                ).unwrap();
                (g, sc(&t))
            };
            let (g1, t1) = build(1.0);
            let (gc, tc) = build(c);
            let d1 = evaluate(&strategy, &t1, &g1).unwrap();
            let dc = evaluate(&strategy, &tc, &gc).unwrap();
            let gap = (d1.unsafe_cost - d1.safe_cost).abs();
            // skip near-ties where rounding can flip the sign
            prop_assume!(gap > 1e-9 * (1.0 + d1.safe_cost.abs()));
            prop_assert_eq!(d1.verdict, dc.verdict);
            prop_assert!((dc.safe_cost - c * d1.safe_cost).abs() <= 1e-9 * (1.0 + c * d1.safe_cost));
        }

        #[test]
        fn window_lengths_bounded(tl in 1usize..30, dl in 1usize..30, si in 0usize..8) {
            let t = seq(&vec![0.0; tl]);
            let d = seq(&vec![1.0; dl]);
            let shape = WindowShape::all()[si];
            let (wt, wd) = apply_window(&t, &d, shape);
            prop_assert!(wt.len() <= tl && wd.len() <= dl);
            prop_assert!(!wt.is_empty() && !wd.is_empty());
            match shape {
                WindowShape::FixedTraj(w) => prop_assert!(wt.len() <= w),
                WindowShape::FixedDemo(w) => prop_assert!(wd.len() <= w),
                WindowShape::FixedBoth(w) => prop_assert!(wt.len() <= w && wd.len() <= w),
                _ => {}
            }
        }

        #[test]
        fn incremental_matches_direct(
            t in scalar_seq(16),
            safe in prop::collection::vec(scalar_seq(14), 1..4),
            unsafe_ in prop::collection::vec(scalar_seq(14), 1..4),
            si in 0usize..576,
        ) {
            let strategy = enumerate_strategies()[si];
            let groups = DemoGroups::from_trajectories(
                TrajectoryMode::StateOnly,
                safe.iter().map(|v| traj(v)).collect(),
                unsafe_.iter().map(|v| traj(v)).collect(),
            ).unwrap();
            let mut inc = StepEvaluator::new(strategy, &groups).unwrap();
            for k in 1..=t.len() {
                let got = inc.push(vec![t[k - 1]]).unwrap();
                let want = evaluate(&strategy, &traj(&t[..k]), &groups).unwrap();
                prop_assert_eq!(got.safe_cost.to_bits(), want.safe_cost.to_bits());
                prop_assert_eq!(got.unsafe_cost.to_bits(), want.unsafe_cost.to_bits());
                prop_assert_eq!(got.verdict, want.verdict);
            }
        }
    }
}
