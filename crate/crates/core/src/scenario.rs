//! Declarative scenario simulator and Monte Carlo validation harness.
//!
//! A scenario is a seeded list of steps driving one robot (the map's
//! anchor): sensing new objects, moving, re-sensing known objects through
//! a chi-square gate, imposing rectangle constraints, and querying
//! relations. The runner maintains exact ground truth alongside the
//! estimated map — all estimation error stems from the injected noise —
//! and emits one serializable snapshot per step. Every random draw is a
//! pure function of (seed, step index, draw index), so equal seeds give
//! identical snapshot streams.
//!
//! The Monte Carlo harness pushes sampled inputs through the exact
//! nonlinear compounding chain and compares sample moments against the
//! first-order (optionally second-order) propagation.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{
    mahalanobis_gate, EntityId, EntityKind, MapMode, MapState, StochasticMap,
};
use crate::propagate::{
    chi_square_quantile, confidence_ellipse, default_hessian_steps, finite_difference_hessians,
    propagate_second_order, Ellipse, Gaussian,
};
use crate::rng::{sampling_factor, CounterRng};
use crate::sensors::{self, SensorModel};
use crate::transforms2d::{compose2, jac_compose2, tail_to_tail2, wrap_angle, Pose2};
use crate::transforms3d::{compose3, tail_to_tail3, Pose3};

/// Name under which the map's anchor pose is addressable in scenarios.
pub const ROBOT_NAME: &str = "robot";

const DEFAULT_GATE_P: f64 = 0.999;

fn default_gate_p() -> f64 {
    DEFAULT_GATE_P
}

/// A seeded, ordered list of simulation steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub mode: MapMode,
    pub seed: u64,
    pub steps: Vec<Step>,
}

/// One simulation step. Relations and controls are coordinate vectors
/// (angles in radians); covariances are row-major squares.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Step {
    /// The robot senses a not-yet-mapped object. The measurement is drawn
    /// around `true_relation` (expressed in the robot's true frame) and the
    /// object enters the map relative to the robot. Existing entities of
    /// the same kind are gated against the measurement first, recording
    /// the association decisions.
    SenseNew {
        name: String,
        true_relation: Vec<f64>,
        noise_cov: Vec<f64>,
        #[serde(default = "default_gate_p")]
        gate_p: f64,
    },
    /// A pose entity makes an uncertain relative motion. The true motion
    /// is drawn around `control_mean`; the map is extrapolated with the
    /// commanded mean and the noise covariance.
    Move {
        actor: String,
        control_mean: Vec<f64>,
        noise_cov: Vec<f64>,
    },
    /// The actor re-observes a mapped entity. The measurement is drawn
    /// from ground truth, gated against the predicted relation, and (if
    /// accepted) folded in with an iterated EKF update.
    SenseKnown {
        actor: String,
        target: String,
        noise_cov: Vec<f64>,
        #[serde(default = "default_gate_p")]
        gate_p: f64,
    },
    /// Impose a geometric pseudo-measurement with value zero.
    Constraint {
        constraint: ConstraintKind,
        targets: Vec<String>,
        noise_cov: Vec<f64>,
    },
    /// Record the relation of `j` in `i`'s frame.
    Query { i: String, j: String },
}

impl Step {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Step::SenseNew { .. } => "sense_new",
            Step::Move { .. } => "move",
            Step::SenseKnown { .. } => "sense_known",
            Step::Constraint { .. } => "constraint",
            Step::Query { .. } => "query",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Rectangle,
}

/// Outcome of one chi-square association test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateRecord {
    pub target: String,
    pub d_squared: f64,
    pub threshold: f64,
    pub accepted: bool,
}

/// Filter-update summary kept in snapshots (gain matrices are omitted).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateSummary {
    pub iterations: usize,
    pub converged: bool,
    pub mahalanobis_sq: f64,
    pub innovation: Vec<f64>,
}

/// What happened during a step.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepDiagnostics {
    Init,
    SenseNew {
        name: String,
        measurement: Vec<f64>,
        gates: Vec<GateRecord>,
    },
    Move {
        actor: String,
    },
    SenseKnown {
        actor: String,
        target: String,
        measurement: Vec<f64>,
        gate: GateRecord,
        /// Present when the gate accepted and the update was applied.
        update: Option<UpdateSummary>,
    },
    Constraint {
        targets: Vec<String>,
        residual_before: f64,
        residual_after: f64,
        update: UpdateSummary,
    },
    Query {
        i: String,
        j: String,
        mean: Vec<f64>,
        cov: Vec<f64>,
        ellipse: Option<Ellipse>,
    },
}

/// Registry row of one mapped entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMeta {
    pub name: String,
    pub kind: EntityKind,
    pub offset: usize,
}

/// Full state after one step: the serialized map, display ellipses,
/// simulator-only ground truth, and step diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub confidence: f64,
    pub entities: Vec<EntityMeta>,
    pub map: MapState,
    pub ellipses: Vec<Option<Ellipse>>,
    pub ground_truth: Vec<Vec<f64>>,
    /// Uncertain pose entities whose orientation sits close to the
    /// parameterization's singularity; covariance estimates degrade there.
    pub warnings: Vec<String>,
    pub diagnostics: StepDiagnostics,
}

/// A runtime failure, annotated with the step that raised it.
#[derive(Debug, Clone)]
pub struct StepError {
    pub step: usize,
    pub kind: String,
    pub error: Error,
}

impl fmt::Display for StepError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {} ({}): {}", self.step, self.kind, self.error)
    }
}

impl std::error::Error for StepError {}

fn cov_from_row_major(data: &[f64], dim: usize, what: &str) -> Result<DMatrix<f64>> {
    if data.len() != dim * dim {
        return Err(Error::Schema(format!(
            "{what}: expected {}-entry row-major covariance, got {}",
            dim * dim,
            data.len()
        )));
    }
    let m = DMatrix::from_row_slice(dim, dim, data);
    // Delegates symmetry and PSD validation.
    Gaussian::new(DVector::zeros(dim), m.clone())
        .map_err(|e| Error::Schema(format!("{what}: {e}")))?;
    Ok(m)
}

impl Scenario {
    /// Structural and referential validation: covariances symmetric PSD of
    /// the right dimension, names declared before use, kinds compatible
    /// with the mode. Runs before execution.
    pub fn validate(&self) -> Result<()> {
        let pose_dim = self.mode.pose_kind().dim();
        let mut kinds: HashMap<&str, EntityKind> = HashMap::new();
        kinds.insert(ROBOT_NAME, self.mode.pose_kind());
        for (idx, step) in self.steps.iter().enumerate() {
            let at = |field: &str| format!("steps[{idx}].{field}");
            let declared = |kinds: &HashMap<&str, EntityKind>, name: &str, field: &str| {
                kinds.get(name).copied().ok_or_else(|| {
                    Error::Schema(format!("{}: undeclared name {name:?}", at(field)))
                })
            };
            match step {
                Step::SenseNew {
                    name,
                    true_relation,
                    noise_cov,
                    gate_p,
                } => {
                    if kinds.contains_key(name.as_str()) {
                        return Err(Error::Schema(format!(
                            "{}: name {name:?} already declared",
                            at("name")
                        )));
                    }
                    let kind = match (self.mode, true_relation.len()) {
                        (MapMode::Planar, 2) => EntityKind::Point2,
                        (MapMode::Planar, 3) => EntityKind::Pose2,
                        (MapMode::Euler3 | MapMode::Rpy3, 6) => EntityKind::Pose3,
                        (_, n) => {
                            return Err(Error::Schema(format!(
                                "{}: {n} components do not name an entity kind in {:?} mode",
                                at("true_relation"),
                                self.mode
                            )))
                        }
                    };
                    cov_from_row_major(noise_cov, kind.dim(), &at("noise_cov"))?;
                    check_gate_p(*gate_p, &at("gate_p"))?;
                    kinds.insert(name, kind);
                }
                Step::Move {
                    actor,
                    control_mean,
                    noise_cov,
                } => {
                    let kind = declared(&kinds, actor, "actor")?;
                    if !kind.is_pose() {
                        return Err(Error::Schema(format!(
                            "{}: {actor:?} is not a pose entity",
                            at("actor")
                        )));
                    }
                    if control_mean.len() != pose_dim {
                        return Err(Error::Schema(format!(
                            "{}: expected {pose_dim} components, got {}",
                            at("control_mean"),
                            control_mean.len()
                        )));
                    }
                    cov_from_row_major(noise_cov, pose_dim, &at("noise_cov"))?;
                }
                Step::SenseKnown {
                    actor,
                    target,
                    noise_cov,
                    gate_p,
                } => {
                    let actor_kind = declared(&kinds, actor, "actor")?;
                    if !actor_kind.is_pose() {
                        return Err(Error::Schema(format!(
                            "{}: {actor:?} is not a pose entity",
                            at("actor")
                        )));
                    }
                    let target_kind = declared(&kinds, target, "target")?;
                    if actor == target {
                        return Err(Error::Schema(format!(
                            "{}: actor and target are both {actor:?}",
                            at("target")
                        )));
                    }
                    cov_from_row_major(noise_cov, target_kind.dim(), &at("noise_cov"))?;
                    check_gate_p(*gate_p, &at("gate_p"))?;
                }
                Step::Constraint {
                    constraint: ConstraintKind::Rectangle,
                    targets,
                    noise_cov,
                } => {
                    if targets.len() != 4 {
                        return Err(Error::Schema(format!(
                            "{}: rectangle needs 4 targets, got {}",
                            at("targets"),
                            targets.len()
                        )));
                    }
                    for (n, t) in targets.iter().enumerate() {
                        let kind = declared(&kinds, t, "targets")?;
                        if kind != EntityKind::Point2 {
                            return Err(Error::Schema(format!(
                                "{}: {t:?} is not a Point2 entity",
                                at("targets")
                            )));
                        }
                        if targets[..n].contains(t) {
                            return Err(Error::Schema(format!(
                                "{}: duplicate target {t:?}",
                                at("targets")
                            )));
                        }
                    }
                    cov_from_row_major(noise_cov, 3, &at("noise_cov"))?;
                }
                Step::Query { i, j } => {
                    let ki = declared(&kinds, i, "i")?;
                    if !ki.is_pose() {
                        return Err(Error::Schema(format!(
                            "{}: {i:?} is not a pose entity",
                            at("i")
                        )));
                    }
                    declared(&kinds, j, "j")?;
                }
            }
        }
        Ok(())
    }
}

fn check_gate_p(p: f64, field: &str) -> Result<()> {
    if !(0.0 < p && p < 1.0) {
        return Err(Error::Schema(format!("{field}: probability {p} not in (0, 1)")));
    }
    Ok(())
}

/// An exactly-zero measurement noise is floored the same way the sensor
/// models do, keeping gates well-defined in the noiseless limit.
fn floored_noise(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if cov.iter().all(|&v| v == 0.0) {
        DMatrix::identity(cov.nrows(), cov.ncols()) * sensors::DEFAULT_NOISE_FLOOR
    } else {
        cov.clone()
    }
}

/// Parse and fully validate a scenario document. Unknown fields anywhere
/// are rejected with their path.
pub fn parse_scenario(json: &str) -> Result<Scenario> {
    let value: serde_json::Value =
        serde_json::from_str(json).map_err(|e| Error::Schema(format!("invalid JSON: {e}")))?;
    reject_unknown_fields(&value)?;
    let scenario: Scenario =
        serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
    scenario.validate()?;
    Ok(scenario)
}

fn reject_unknown_fields(value: &serde_json::Value) -> Result<()> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Schema("top level must be an object".into()))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "mode" | "seed" | "steps") {
            return Err(Error::Schema(format!("unknown field {key:?}")));
        }
    }
    let steps = obj
        .get("steps")
        .and_then(|s| s.as_array())
        .ok_or_else(|| Error::Schema("steps: expected an array".into()))?;
    for (idx, step) in steps.iter().enumerate() {
        let sobj = step
            .as_object()
            .ok_or_else(|| Error::Schema(format!("steps[{idx}]: expected an object")))?;
        let kind = sobj
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| Error::Schema(format!("steps[{idx}].kind: missing")))?;
        let allowed: &[&str] = match kind {
            "sense_new" => &["kind", "name", "true_relation", "noise_cov", "gate_p"],
            "move" => &["kind", "actor", "control_mean", "noise_cov"],
            "sense_known" => &["kind", "actor", "target", "noise_cov", "gate_p"],
            "constraint" => &["kind", "constraint", "targets", "noise_cov"],
            "query" => &["kind", "i", "j"],
            other => {
                return Err(Error::Schema(format!(
                    "steps[{idx}].kind: unknown step kind {other:?}"
                )))
            }
        };
        for key in sobj.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Schema(format!(
                    "steps[{idx}].{key}: unknown field for {kind:?} step"
                )));
            }
        }
    }
    Ok(())
}

/// Exact (noise-free) location of one entity, kept by the simulator only.
#[derive(Debug, Clone)]
enum Truth {
    Pose2(Pose2),
    Pose3(Pose3),
    Point2([f64; 2]),
}

impl Truth {
    fn to_vec(&self) -> Vec<f64> {
        match self {
            Truth::Pose2(p) => vec![p.x(), p.y(), p.phi()],
            Truth::Pose3(p) => p.to_vector().as_slice().to_vec(),
            Truth::Point2(p) => p.to_vec(),
        }
    }
}

struct Runner {
    map: StochasticMap,
    names: Vec<String>,
    ids: HashMap<String, EntityId>,
    truth: Vec<Truth>,
    rng_seed: u64,
    confidence: f64,
}

impl Runner {
    fn new(sc: &Scenario, confidence: f64) -> Self {
        let map = StochasticMap::new(sc.mode);
        let anchor_truth = match sc.mode {
            MapMode::Planar => Truth::Pose2(Pose2::identity()),
            mode => Truth::Pose3(Pose3::identity(mode.convention().expect("3d"))),
        };
        let mut ids = HashMap::new();
        ids.insert(ROBOT_NAME.to_string(), map.anchor());
        Runner {
            map,
            names: vec![ROBOT_NAME.to_string()],
            ids,
            truth: vec![anchor_truth],
            rng_seed: sc.seed,
            confidence,
        }
    }

    fn id(&self, name: &str) -> Result<EntityId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    fn snapshot(&self, step: usize, diagnostics: StepDiagnostics) -> Snapshot {
        let entities = self
            .names
            .iter()
            .map(|name| {
                let id = self.ids[name];
                EntityMeta {
                    name: name.clone(),
                    kind: self.map.kind(id).expect("registered entity"),
                    offset: self.map.offset(id).expect("registered entity"),
                }
            })
            .collect();
        let ellipses = self
            .names
            .iter()
            .map(|name| {
                let id = self.ids[name];
                let xy = self.map.entity_xy_gaussian(id).expect("registered entity");
                confidence_ellipse(&xy, self.confidence).ok()
            })
            .collect();
        let ground_truth = self.truth.iter().map(Truth::to_vec).collect();
        Snapshot {
            step,
            confidence: self.confidence,
            entities,
            map: self.map.to_state(),
            ellipses,
            ground_truth,
            warnings: self.singularity_warnings(),
            diagnostics,
        }
    }

    /// Pose entities with orientation uncertainty whose mean orientation is
    /// within [`transforms3d::SINGULARITY_WARN`] of the convention's
    /// singularity.
    fn singularity_warnings(&self) -> Vec<String> {
        let Some(convention) = self.map.mode().convention() else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for name in &self.names {
            let id = self.ids[name];
            if self.map.kind(id) != Ok(EntityKind::Pose3) {
                continue;
            }
            let mean = self.map.entity_mean(id).expect("registered entity");
            let cov = self.map.entity_cov(id).expect("registered entity");
            let angle_var: f64 = (3..6).map(|i| cov[(i, i)]).sum();
            if angle_var == 0.0 {
                continue;
            }
            let Ok(pose) = Pose3::from_slice(mean.as_slice(), convention) else {
                continue;
            };
            let margin = crate::transforms3d::singularity_margin(&pose);
            if margin < crate::transforms3d::SINGULARITY_WARN {
                out.push(format!(
                    "entity {name:?}: orientation margin {margin:.4} below {}",
                    crate::transforms3d::SINGULARITY_WARN
                ));
            }
        }
        out
    }

    /// Draw a mean-zero sample with the given covariance from the step's
    /// stream, starting at counter `draw0`.
    fn noise_sample(
        &self,
        step: usize,
        draw0: u64,
        cov: &DMatrix<f64>,
    ) -> Result<DVector<f64>> {
        let factor = sampling_factor(cov)
            .ok_or_else(|| Error::InvalidValue("non-finite noise covariance".into()))?;
        let rng = CounterRng::new(self.rng_seed, step as u64);
        let (g, _) = rng.gauss_vector(draw0, cov.nrows());
        Ok(factor * g)
    }

    /// True relation of `target` in `actor`'s frame, exact algebra.
    fn true_relation(&self, actor: EntityId, target: EntityId) -> Result<DVector<f64>> {
        match (&self.truth[actor.index()], &self.truth[target.index()]) {
            (Truth::Pose2(a), Truth::Pose2(t)) => {
                let (rel, _) = tail_to_tail2(*a, *t);
                Ok(DVector::from_vec(vec![rel.x(), rel.y(), rel.phi()]))
            }
            (Truth::Pose2(a), Truth::Point2(p)) => {
                let (s, c) = a.phi().sin_cos();
                let dx = p[0] - a.x();
                let dy = p[1] - a.y();
                Ok(DVector::from_vec(vec![c * dx + s * dy, -s * dx + c * dy]))
            }
            (Truth::Pose3(a), Truth::Pose3(t)) => {
                let (rel, _) = tail_to_tail3(a, t)?;
                Ok(DVector::from_column_slice(rel.to_vector().as_slice()))
            }
            _ => Err(Error::KindMismatch {
                expected: "compatible truth kinds".into(),
                got: "mixed".into(),
            }),
        }
    }

    fn wrap_relation_angles(kind: EntityKind, v: &mut DVector<f64>) {
        for &i in kind.angle_offsets() {
            v[i] = wrap_angle(v[i]);
        }
    }

    fn run_step(&mut self, index: usize, step: &Step) -> Result<StepDiagnostics> {
        match step {
            Step::SenseNew {
                name,
                true_relation,
                noise_cov,
                gate_p,
            } => {
                let actor = self.map.anchor();
                let kind = match (self.map.mode(), true_relation.len()) {
                    (MapMode::Planar, 2) => EntityKind::Point2,
                    (MapMode::Planar, 3) => EntityKind::Pose2,
                    (_, 6) => EntityKind::Pose3,
                    (_, n) => {
                        return Err(Error::ShapeMismatch {
                            expected: "2, 3, or 6 relation components".into(),
                            got: format!("{n}"),
                        })
                    }
                };
                let d = kind.dim();
                let cov = DMatrix::from_row_slice(d, d, noise_cov);
                let mut z = DVector::from_column_slice(true_relation)
                    + self.noise_sample(index, 0, &cov)?;
                Self::wrap_relation_angles(kind, &mut z);

                // Association record: can the measurement be any entity we
                // already know about?
                let mut gates = Vec::new();
                let threshold = chi_square_quantile(*gate_p, d)?;
                for (n, candidate_name) in self.names.iter().enumerate() {
                    let candidate = self.ids[candidate_name];
                    if candidate == actor || self.map.kind(candidate)? != kind {
                        continue;
                    }
                    let expected = self.map.extract_relation(actor, candidate)?;
                    let (accepted, d2) = mahalanobis_gate(
                        &expected,
                        &z,
                        &floored_noise(&cov),
                        *gate_p,
                        kind.angle_offsets(),
                    )?;
                    gates.push(GateRecord {
                        target: self.names[n].clone(),
                        d_squared: d2,
                        threshold,
                        accepted,
                    });
                }

                // Ground truth of the newcomer.
                let new_truth = match (&self.truth[actor.index()], kind) {
                    (Truth::Pose2(a), EntityKind::Pose2) => {
                        let rel = Pose2::new(true_relation[0], true_relation[1], true_relation[2])?;
                        Truth::Pose2(compose2(*a, rel))
                    }
                    (Truth::Pose2(a), EntityKind::Point2) => {
                        let (s, c) = a.phi().sin_cos();
                        Truth::Point2([
                            true_relation[0] * c - true_relation[1] * s + a.x(),
                            true_relation[0] * s + true_relation[1] * c + a.y(),
                        ])
                    }
                    (Truth::Pose3(a), EntityKind::Pose3) => {
                        let rel = Pose3::from_slice(
                            true_relation,
                            self.map.mode().convention().expect("3d"),
                        )?;
                        Truth::Pose3(compose3(a, &rel)?)
                    }
                    _ => unreachable!("validated kinds"),
                };

                let rel = Gaussian::new(z.clone(), cov)?;
                let id = self.map.add_object_relative(actor, &rel, kind)?;
                debug_assert_eq!(id.index(), self.truth.len());
                self.truth.push(new_truth);
                self.names.push(name.clone());
                self.ids.insert(name.clone(), id);

                Ok(StepDiagnostics::SenseNew {
                    name: name.clone(),
                    measurement: z.iter().copied().collect(),
                    gates,
                })
            }
            Step::Move {
                actor,
                control_mean,
                noise_cov,
            } => {
                let id = self.id(actor)?;
                let kind = self.map.kind(id)?;
                let d = kind.dim();
                let cov = DMatrix::from_row_slice(d, d, noise_cov);
                let noise = self.noise_sample(index, 0, &cov)?;

                // The true motion actually executed.
                match (&self.truth[id.index()], kind) {
                    (Truth::Pose2(p), EntityKind::Pose2) => {
                        let actual = Pose2::new(
                            control_mean[0] + noise[0],
                            control_mean[1] + noise[1],
                            control_mean[2] + noise[2],
                        )?;
                        self.truth[id.index()] = Truth::Pose2(compose2(*p, actual));
                    }
                    (Truth::Pose3(p), EntityKind::Pose3) => {
                        let mut v = [0.0; 6];
                        for (k, value) in v.iter_mut().enumerate() {
                            *value = control_mean[k] + noise[k];
                        }
                        let actual =
                            Pose3::from_slice(&v, self.map.mode().convention().expect("3d"))?;
                        self.truth[id.index()] = Truth::Pose3(compose3(p, &actual)?);
                    }
                    _ => unreachable!("validated kinds"),
                }

                let control = Gaussian::new(DVector::from_column_slice(control_mean), cov)?;
                self.map.move_entity(id, &control)?;
                Ok(StepDiagnostics::Move {
                    actor: actor.clone(),
                })
            }
            Step::SenseKnown {
                actor,
                target,
                noise_cov,
                gate_p,
            } => {
                let actor_id = self.id(actor)?;
                let target_id = self.id(target)?;
                let target_kind = self.map.kind(target_id)?;
                let d = target_kind.dim();
                let cov = DMatrix::from_row_slice(d, d, noise_cov);

                let mut z = self.true_relation(actor_id, target_id)?
                    + self.noise_sample(index, 0, &cov)?;
                Self::wrap_relation_angles(target_kind, &mut z);

                let expected = self.map.extract_relation(actor_id, target_id)?;
                let (accepted, d2) = mahalanobis_gate(
                    &expected,
                    &z,
                    &floored_noise(&cov),
                    *gate_p,
                    target_kind.angle_offsets(),
                )?;
                let gate = GateRecord {
                    target: target.clone(),
                    d_squared: d2,
                    threshold: chi_square_quantile(*gate_p, d)?,
                    accepted,
                };

                let update = if accepted {
                    let sensor = match target_kind {
                        EntityKind::Point2 => sensors::relative_point_sensor(
                            &self.map, actor_id, target_id, cov,
                        )?,
                        _ => sensors::relative_pose_sensor(&self.map, actor_id, target_id, cov)?,
                    };
                    let diag = self.map.iekf_update(&sensor, &z, 1e-9, 25)?;
                    Some(UpdateSummary {
                        iterations: diag.iterations,
                        converged: diag.converged,
                        mahalanobis_sq: diag.mahalanobis_sq,
                        innovation: diag.innovation.iter().copied().collect(),
                    })
                } else {
                    None
                };

                Ok(StepDiagnostics::SenseKnown {
                    actor: actor.clone(),
                    target: target.clone(),
                    measurement: z.iter().copied().collect(),
                    gate,
                    update,
                })
            }
            Step::Constraint {
                constraint: ConstraintKind::Rectangle,
                targets,
                noise_cov,
            } => {
                let ids: Vec<EntityId> = targets
                    .iter()
                    .map(|t| self.id(t))
                    .collect::<Result<_>>()?;
                let cov = DMatrix::from_row_slice(3, 3, noise_cov);
                let sensor = sensors::rectangle_sensor(
                    &self.map,
                    [ids[0], ids[1], ids[2], ids[3]],
                    cov,
                )?;
                let residual = |map: &StochasticMap, s: &SensorModel| -> Result<f64> {
                    Ok(s.measure(&map.gather_substate(s.touched())?)?.norm())
                };
                let residual_before = residual(&self.map, &sensor)?;
                let z = DVector::zeros(3);
                let diag = self.map.iekf_update(&sensor, &z, 1e-10, 50)?;
                let residual_after = residual(&self.map, &sensor)?;
                Ok(StepDiagnostics::Constraint {
                    targets: targets.clone(),
                    residual_before,
                    residual_after,
                    update: UpdateSummary {
                        iterations: diag.iterations,
                        converged: diag.converged,
                        mahalanobis_sq: diag.mahalanobis_sq,
                        innovation: diag.innovation.iter().copied().collect(),
                    },
                })
            }
            Step::Query { i, j } => {
                let rel = self
                    .map
                    .extract_relation(self.id(i)?, self.id(j)?)?;
                let ellipse = if rel.dim() >= 2 {
                    let xy = Gaussian::from_parts(
                        rel.mean().rows(0, 2).clone_owned(),
                        rel.cov().view((0, 0), (2, 2)).clone_owned(),
                    );
                    confidence_ellipse(&xy, self.confidence).ok()
                } else {
                    None
                };
                let n = rel.dim();
                let mut cov = Vec::with_capacity(n * n);
                for r in 0..n {
                    for c in 0..n {
                        cov.push(rel.cov()[(r, c)]);
                    }
                }
                Ok(StepDiagnostics::Query {
                    i: i.clone(),
                    j: j.clone(),
                    mean: rel.mean().iter().copied().collect(),
                    cov,
                    ellipse,
                })
            }
        }
    }
}

/// Execute a scenario, producing the initial snapshot plus one per step.
pub fn run(sc: &Scenario, confidence: f64) -> std::result::Result<Vec<Snapshot>, StepError> {
    let wrap_init = |error: Error| StepError {
        step: 0,
        kind: "init".into(),
        error,
    };
    sc.validate().map_err(wrap_init)?;
    if !(0.0 < confidence && confidence < 1.0) {
        return Err(wrap_init(Error::InvalidValue(format!(
            "confidence {confidence}"
        ))));
    }
    let mut runner = Runner::new(sc, confidence);
    let mut snapshots = Vec::with_capacity(sc.steps.len() + 1);
    snapshots.push(runner.snapshot(0, StepDiagnostics::Init));
    for (i, step) in sc.steps.iter().enumerate() {
        let index = i + 1;
        let diagnostics = runner.run_step(index, step).map_err(|error| StepError {
            step: index,
            kind: step.kind_name().to_string(),
            error,
        })?;
        snapshots.push(runner.snapshot(index, diagnostics));
    }
    Ok(snapshots)
}

/// Specification of a compounding chain for Monte Carlo validation: poses
/// with independent noise covariances, composed left to right.
#[derive(Debug, Clone)]
pub struct McConfig {
    pub chain: Vec<(Pose2, DMatrix<f64>)>,
    pub n_samples: usize,
    pub seed: u64,
    /// Also compute the second-order mean estimate (numeric Hessians).
    pub second_order: bool,
    /// Worker threads; 0 picks the available parallelism.
    pub threads: usize,
}

/// One tracked quantity: analytic estimate vs. Monte Carlo reference.
#[derive(Debug, Clone, Serialize)]
pub struct McComponent {
    pub name: String,
    pub analytic: f64,
    pub monte_carlo: f64,
    pub rel_err: f64,
    pub mc_std_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct McReport {
    pub n_samples: usize,
    pub seed: u64,
    pub mean: Vec<McComponent>,
    pub variance: Vec<McComponent>,
    /// Second-order mean estimates, when requested.
    pub second_order_mean: Option<Vec<McComponent>>,
    /// Largest relative error over the tracked first-order mean and
    /// variance components.
    pub max_rel_err: f64,
}

fn rel_err(analytic: f64, reference: f64) -> f64 {
    (analytic - reference).abs() / reference.abs().max(1e-12)
}

/// First-order moments of the chain, composed pairwise.
fn first_order_chain(chain: &[(Pose2, DMatrix<f64>)]) -> (Pose2, DMatrix<f64>) {
    let (mut pose, mut cov) = chain[0].clone();
    for (next, next_cov) in &chain[1..] {
        let result = compose2(pose, *next);
        let j = jac_compose2(pose, *next, result);
        let j1 = DMatrix::from_fn(3, 3, |r, c| j[(r, c)]);
        let j2 = DMatrix::from_fn(3, 3, |r, c| j[(r, c + 3)]);
        cov = &j1 * &cov * j1.transpose() + &j2 * next_cov * j2.transpose();
        pose = result;
    }
    (pose, cov)
}

/// Exact chain value for stacked inputs (3 per link).
fn chain_value(chain_len: usize, stacked: &DVector<f64>) -> DVector<f64> {
    let mut pose = Pose2::new(stacked[0], stacked[1], stacked[2]).expect("finite");
    for k in 1..chain_len {
        let next =
            Pose2::new(stacked[3 * k], stacked[3 * k + 1], stacked[3 * k + 2]).expect("finite");
        pose = compose2(pose, next);
    }
    DVector::from_vec(vec![pose.x(), pose.y(), pose.phi()])
}

/// Push samples through the exact nonlinear chain and compare moments
/// against first-order (and optionally second-order) propagation.
pub fn monte_carlo_validate(cfg: &McConfig) -> Result<McReport> {
    if cfg.chain.is_empty() {
        return Err(Error::InvalidValue("empty chain".into()));
    }
    if cfg.n_samples < 10_000 {
        return Err(Error::InvalidValue(format!(
            "{} samples is below the 10^4 minimum",
            cfg.n_samples
        )));
    }
    for (_, cov) in &cfg.chain {
        if cov.nrows() != 3 || cov.ncols() != 3 {
            return Err(Error::ShapeMismatch {
                expected: "3x3 noise covariance".into(),
                got: format!("{}x{}", cov.nrows(), cov.ncols()),
            });
        }
    }

    let (first_pose, first_cov) = first_order_chain(&cfg.chain);
    let reference = DVector::from_vec(vec![first_pose.x(), first_pose.y(), first_pose.phi()]);

    let factors: Vec<DMatrix<f64>> = cfg
        .chain
        .iter()
        .map(|(_, cov)| {
            sampling_factor(cov).ok_or_else(|| Error::InvalidValue("non-finite covariance".into()))
        })
        .collect::<Result<_>>()?;
    let means: Vec<Pose2> = cfg.chain.iter().map(|(p, _)| *p).collect();

    // Fixed chunking: partial sums are combined in chunk order, so the
    // result is independent of the worker count.
    let n = cfg.n_samples;
    let chunks = 64.min(n);
    let threads = if cfg.threads == 0 {
        std::thread::available_parallelism()
            .map(|p| p.get())
            .unwrap_or(1)
    } else {
        cfg.threads
    }
    .clamp(1, chunks);

    let seed = cfg.seed;
    let chain_len = cfg.chain.len();
    let sample_one = |s: usize| -> DVector<f64> {
        let rng = CounterRng::new(seed, s as u64);
        let mut pose = None;
        let mut draw = 0u64;
        for (mean, factor) in means.iter().zip(factors.iter()) {
            let (g, next) = rng.gauss_vector(draw, 3);
            draw = next;
            let noise = factor * g;
            let p = Pose2::new(
                mean.x() + noise[0],
                mean.y() + noise[1],
                mean.phi() + noise[2],
            )
            .expect("finite sample");
            pose = Some(match pose {
                None => p,
                Some(prev) => compose2(prev, p),
            });
        }
        let w = pose.expect("nonempty chain");
        // Deviation from the first-order mean, angles wrapped.
        DVector::from_vec(vec![
            w.x() - reference[0],
            w.y() - reference[1],
            wrap_angle(w.phi() - reference[2]),
        ])
    };

    let mut partials: Vec<(DVector<f64>, DMatrix<f64>)> =
        vec![(DVector::zeros(3), DMatrix::zeros(3, 3)); chunks];
    let next_chunk = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for _ in 0..threads {
            let next_chunk = &next_chunk;
            let sample_one = &sample_one;
            handles.push(scope.spawn(move || {
                let mut results = Vec::new();
                loop {
                    let c = next_chunk.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if c >= chunks {
                        return results;
                    }
                    let lo = c * n / chunks;
                    let hi = (c + 1) * n / chunks;
                    let mut sum = DVector::zeros(3);
                    let mut outer = DMatrix::zeros(3, 3);
                    for s in lo..hi {
                        let d = sample_one(s);
                        sum += &d;
                        outer += &d * d.transpose();
                    }
                    results.push((c, sum, outer));
                }
            }));
        }
        for handle in handles {
            for (c, sum, outer) in handle.join().expect("worker panicked") {
                partials[c] = (sum, outer);
            }
        }
    });

    let mut sum = DVector::zeros(3);
    let mut outer = DMatrix::zeros(3, 3);
    for (s, o) in partials {
        sum += s;
        outer += o;
    }
    let n_f = n as f64;
    let mc_dev = sum / n_f;
    let mc_cov = outer / n_f - &mc_dev * mc_dev.transpose();
    let mc_mean = &reference + &mc_dev;

    let names = ["x", "y", "phi"];
    let mut mean_rows = Vec::new();
    let mut var_rows = Vec::new();
    let mut max_rel = 0.0f64;
    for i in 0..3 {
        let mc_se = (mc_cov[(i, i)] / n_f).sqrt();
        let re = rel_err(reference[i], mc_mean[i]);
        max_rel = max_rel.max(re);
        mean_rows.push(McComponent {
            name: format!("mean.{}", names[i]),
            analytic: reference[i],
            monte_carlo: mc_mean[i],
            rel_err: re,
            mc_std_err: mc_se,
        });
        let mc_var_se = mc_cov[(i, i)] * (2.0 / n_f).sqrt();
        let re = rel_err(first_cov[(i, i)], mc_cov[(i, i)]);
        max_rel = max_rel.max(re);
        var_rows.push(McComponent {
            name: format!("var.{}", names[i]),
            analytic: first_cov[(i, i)],
            monte_carlo: mc_cov[(i, i)],
            rel_err: re,
            mc_std_err: mc_var_se,
        });
    }

    let second_order_mean = if cfg.second_order {
        let dim = 3 * chain_len;
        let mut stacked = DVector::zeros(dim);
        let mut block_cov = DMatrix::zeros(dim, dim);
        for (k, (pose, cov)) in cfg.chain.iter().enumerate() {
            stacked[3 * k] = pose.x();
            stacked[3 * k + 1] = pose.y();
            stacked[3 * k + 2] = pose.phi();
            block_cov
                .view_mut((3 * k, 3 * k), (3, 3))
                .copy_from(cov);
        }
        let g = Gaussian::new(stacked.clone(), block_cov)?;
        let f = |v: &DVector<f64>| chain_value(chain_len, v);
        let jf = crate::propagate::finite_difference_jacobian_wrapped(
            f,
            &stacked,
            &crate::propagate::default_fd_steps(&stacked),
            &[2],
        )?;
        let hessians = finite_difference_hessians(f, &stacked, &default_hessian_steps(&stacked), &[2])?;
        let second = propagate_second_order(f, &jf, &hessians, &g)?;
        let rows = (0..3)
            .map(|i| McComponent {
                name: format!("mean2.{}", names[i]),
                analytic: second.mean()[i],
                monte_carlo: mc_mean[i],
                rel_err: rel_err(second.mean()[i], mc_mean[i]),
                mc_std_err: (mc_cov[(i, i)] / n_f).sqrt(),
            })
            .collect();
        Some(rows)
    } else {
        None
    };

    Ok(McReport {
        n_samples: n,
        seed: cfg.seed,
        mean: mean_rows,
        variance: var_rows,
        second_order_mean,
        max_rel_err: max_rel,
    })
}
