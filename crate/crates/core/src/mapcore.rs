//! Global object database: matching observations against tracked records via
//! a location-aware distance over multi-view latent features, confidence
//! weighted location fusion, mobility prediction, eviction, and broadcast
//! deltas.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::WorldPoint;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("record {0} has an empty latent set")]
    EmptyLatentSet(u64),
    #[error("combine group is empty")]
    EmptyGroup,
    #[error("all observation confidences are zero")]
    DegenerateWeights,
    #[error("latent has dimension {got}, database expects {want}")]
    LatentDimension { got: usize, want: usize },
    #[error("unknown record id {0}")]
    UnknownRecord(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Person,
    Bicycle,
    Car,
    Motorcycle,
    Bus,
    Truck,
    TrafficLight,
    Other,
}

impl ObjectClass {
    /// Candidate-gating radius: records farther than this from the
    /// observation are not considered for matching. 100 m for motor
    /// vehicles, 10 m for pedestrians, 30 m otherwise.
    pub fn match_radius_m(self) -> f64 {
        match self {
            ObjectClass::Car | ObjectClass::Motorcycle | ObjectClass::Bus | ObjectClass::Truck => {
                100.0
            }
            ObjectClass::Person => 10.0,
            _ => 30.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Person => "person",
            ObjectClass::Bicycle => "bicycle",
            ObjectClass::Car => "car",
            ObjectClass::Motorcycle => "motorcycle",
            ObjectClass::Bus => "bus",
            ObjectClass::Truck => "truck",
            ObjectClass::TrafficLight => "traffic_light",
            ObjectClass::Other => "other",
        }
    }
}

/// Latent object descriptor produced by the autoencoder encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn dist_sq(&self, other: &LatentVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

/// One detection reported by a vehicle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Observation {
    pub class: ObjectClass,
    pub confidence: f64,
    pub location: WorldPoint,
    pub latent: LatentVector,
    pub source_vehicle: u32,
    pub timestamp_ms: i64,
}

/// One tracked object in the database: identity, geometry, kinematics and
/// the accumulated multi-view latent set.
#[derive(Debug, Clone)]
pub struct ObjectRecord {
    pub object_id: u64,
    pub class: ObjectClass,
    pub geo_location: WorldPoint,
    pub confidence: f64,
    pub speed_mps: f64,
    pub direction: (f64, f64),
    pub update_time_ms: i64,
    pub latents: VecDeque<LatentVector>,
    pub history: VecDeque<(i64, WorldPoint)>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MapConfig {
    /// Weight of the squared geographic distance term.
    pub match_weight: f64,
    /// Distances above this create a new record instead of matching.
    pub match_threshold: f64,
    pub ttl_ms: i64,
    /// Oldest latents are evicted beyond this bound.
    pub latent_cap: usize,
    /// History ring length; also the window of the velocity fit.
    pub history_len: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            match_weight: 0.5,
            match_threshold: 5.0,
            ttl_ms: 3_600_000,
            latent_cap: 16,
            history_len: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    Matched(u64),
    New,
}

/// Constant-velocity extrapolation of a record to time `t_ms`, using the
/// least-squares velocity over the stored history window. A single history
/// point is returned unchanged.
pub fn predict_location(rec: &ObjectRecord, t_ms: i64) -> WorldPoint {
    let n = rec.history.len();
    if n <= 1 {
        return rec.history.back().map(|(_, p)| *p).unwrap_or(rec.geo_location);
    }
    let t_mean = rec.history.iter().map(|(t, _)| *t as f64).sum::<f64>() / n as f64;
    let mut mean = [0.0; 3];
    for (_, p) in &rec.history {
        mean[0] += p.x;
        mean[1] += p.y;
        mean[2] += p.z;
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut denom = 0.0;
    let mut num = [0.0; 3];
    for (t, p) in &rec.history {
        let dt = *t as f64 - t_mean;
        denom += dt * dt;
        num[0] += dt * (p.x - mean[0]);
        num[1] += dt * (p.y - mean[1]);
        num[2] += dt * (p.z - mean[2]);
    }
    if denom < 1e-9 {
        return rec.history.back().map(|(_, p)| *p).unwrap_or(rec.geo_location);
    }
    let dt = t_ms as f64 - t_mean;
    WorldPoint::new(
        mean[0] + num[0] / denom * dt,
        mean[1] + num[1] / denom * dt,
        mean[2] + num[2] / denom * dt,
    )
}

/// Location-aware matching distance: minimum squared latent distance over
/// the record's multi-view set plus `w` times the squared geographic
/// distance to the record's predicted location.
pub fn distance(
    obs: &Observation,
    rec: &ObjectRecord,
    t_ms: i64,
    w: f64,
) -> Result<f64, MapError> {
    let feat = rec
        .latents
        .iter()
        .map(|z| obs.latent.dist_sq(z))
        .min_by(|a, b| a.total_cmp(b))
        .ok_or(MapError::EmptyLatentSet(rec.object_id))?;
    let predicted = predict_location(rec, t_ms);
    Ok(feat + w * obs.location.dist_sq(&predicted))
}

#[derive(Debug, Default)]
pub struct MapDatabase {
    records: BTreeMap<u64, ObjectRecord>,
    next_id: u64,
    pub config: MapConfig,
}

impl MapDatabase {
    pub fn new(config: MapConfig) -> Self {
        Self { records: BTreeMap::new(), next_id: 1, config }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&ObjectRecord> {
        self.records.get(&id)
    }

    pub fn records(&self) -> impl Iterator<Item = &ObjectRecord> {
        self.records.values()
    }

    /// Finds the matching record for an observation, or `New`. Candidates
    /// are same-class records whose predicted location lies within the class
    /// gating radius; the argmin of `distance` wins if it clears the
    /// threshold. Iteration in id order makes ties resolve to the lowest id.
    pub fn match_observation(&self, obs: &Observation, t_ms: i64) -> Result<MatchOutcome, MapError> {
        let radius = obs.class.match_radius_m();
        let mut best: Option<(u64, f64)> = None;
        for rec in self.records.values() {
            if rec.class != obs.class {
                continue;
            }
            let predicted = predict_location(rec, t_ms);
            if obs.location.dist(&predicted) > radius {
                continue;
            }
            let d = distance(obs, rec, t_ms, self.config.match_weight)?;
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((rec.object_id, d));
            }
        }
        match best {
            Some((id, d)) if d <= self.config.match_threshold => Ok(MatchOutcome::Matched(id)),
            _ => Ok(MatchOutcome::New),
        }
    }

    /// Creates a record from a first observation and returns its id.
    pub fn insert_new(&mut self, obs: &Observation) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        let mut history = VecDeque::with_capacity(self.config.history_len);
        history.push_back((obs.timestamp_ms, obs.location));
        let mut latents = VecDeque::with_capacity(self.config.latent_cap);
        latents.push_back(obs.latent.clone());
        self.records.insert(
            id,
            ObjectRecord {
                object_id: id,
                class: obs.class,
                geo_location: obs.location,
                confidence: obs.confidence,
                speed_mps: 0.0,
                direction: (0.0, 0.0),
                update_time_ms: obs.timestamp_ms,
                latents,
                history,
            },
        );
        id
    }

    /// Fuses a group of observations matched to `id` into the record.
    ///
    /// Location is the confidence-weighted mean of the group, confidence the
    /// group maximum; every group latent is appended (oldest evicted beyond
    /// the cap); kinematics refresh from the last two fused locations.
    pub fn combine(&mut self, id: u64, group: &[Observation]) -> Result<(), MapError> {
        if group.is_empty() {
            return Err(MapError::EmptyGroup);
        }
        let rec = self.records.get_mut(&id).ok_or(MapError::UnknownRecord(id))?;
        let weight_sum: f64 = group.iter().map(|o| o.confidence).sum();
        if weight_sum <= 0.0 {
            return Err(MapError::DegenerateWeights);
        }
        let mut fused = WorldPoint::default();
        for o in group {
            fused.x += o.confidence * o.location.x;
            fused.y += o.confidence * o.location.y;
            fused.z += o.confidence * o.location.z;
        }
        fused.x /= weight_sum;
        fused.y /= weight_sum;
        fused.z /= weight_sum;

        let t = group.iter().map(|o| o.timestamp_ms).max().unwrap();
        rec.geo_location = fused;
        rec.confidence = group.iter().map(|o| o.confidence).fold(0.0, f64::max);
        rec.update_time_ms = rec.update_time_ms.max(t);
        for o in group {
            if rec.latents.len() == self.config.latent_cap {
                rec.latents.pop_front();
            }
            rec.latents.push_back(o.latent.clone());
        }
        if rec.history.len() == self.config.history_len {
            rec.history.pop_front();
        }
        rec.history.push_back((t, fused));
        refresh_kinematics(rec);
        Ok(())
    }

    /// Matches and fuses a batch of observations (one uplink payload).
    /// Matching predicts each record to the observation's own acquisition
    /// time; groups targeting the same record are fused together. Returns
    /// (record id, was_new) per observation in input order.
    pub fn ingest(&mut self, observations: &[Observation]) -> Result<Vec<(u64, bool)>, MapError> {
        let mut outcome = Vec::with_capacity(observations.len());
        let mut groups: BTreeMap<u64, Vec<Observation>> = BTreeMap::new();
        for obs in observations {
            match self.match_observation(obs, obs.timestamp_ms)? {
                MatchOutcome::Matched(id) => {
                    groups.entry(id).or_default().push(obs.clone());
                    outcome.push((id, false));
                }
                MatchOutcome::New => {
                    let id = self.insert_new(obs);
                    outcome.push((id, true));
                }
            }
        }
        for (id, group) in groups {
            self.combine(id, &group)?;
        }
        Ok(outcome)
    }

    /// Removes records not observed for strictly more than `ttl_ms`.
    pub fn evict(&mut self, now_ms: i64, ttl_ms: i64) -> usize {
        let before = self.records.len();
        self.records.retain(|_, rec| now_ms - rec.update_time_ms <= ttl_ms);
        before - self.records.len()
    }

    /// Records updated strictly after `t_ms`, the broadcast delta set.
    pub fn delta_since(&self, t_ms: i64) -> Vec<&ObjectRecord> {
        self.records.values().filter(|r| r.update_time_ms > t_ms).collect()
    }

    /// Line-per-record snapshot: id, class, x, y, z, confidence,
    /// update_time, latent count.
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for rec in self.records.values() {
            writeln!(
                w,
                "{},{},{:.4},{:.4},{:.4},{:.4},{},{}",
                rec.object_id,
                rec.class.as_str(),
                rec.geo_location.x,
                rec.geo_location.y,
                rec.geo_location.z,
                rec.confidence,
                rec.update_time_ms,
                rec.latents.len()
            )?;
        }
        Ok(())
    }
}

fn refresh_kinematics(rec: &mut ObjectRecord) {
    let n = rec.history.len();
    if n < 2 {
        rec.speed_mps = 0.0;
        rec.direction = (0.0, 0.0);
        return;
    }
    let (t0, p0) = rec.history[n - 2];
    let (t1, p1) = rec.history[n - 1];
    let dt_s = (t1 - t0) as f64 / 1000.0;
    let (dx, dy) = (p1.x - p0.x, p1.y - p0.y);
    let planar = (dx * dx + dy * dy).sqrt();
    if dt_s <= 0.0 || planar < 1e-9 {
        rec.speed_mps = 0.0;
        rec.direction = (0.0, 0.0);
    } else {
        rec.speed_mps = planar / dt_s;
        rec.direction = (dx / planar, dy / planar);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn latent(values: &[f64]) -> LatentVector {
        let mut v = values.to_vec();
        v.resize(25, 0.0);
        LatentVector(v)
    }

    fn obs_at(x: f64, y: f64, conf: f64, t: i64) -> Observation {
        Observation {
            class: ObjectClass::Person,
            confidence: conf,
            location: WorldPoint::new(x, y, 0.0),
            latent: latent(&[]),
            source_vehicle: 0,
            timestamp_ms: t,
        }
    }

    fn record_with_history(points: &[(i64, (f64, f64))]) -> ObjectRecord {
        let mut history = VecDeque::new();
        for (t, (x, y)) in points {
            history.push_back((*t, WorldPoint::new(*x, *y, 0.0)));
        }
        let (t, p) = *history.back().unwrap();
        ObjectRecord {
            object_id: 1,
            class: ObjectClass::Person,
            geo_location: p,
            confidence: 0.9,
            speed_mps: 0.0,
            direction: (0.0, 0.0),
            update_time_ms: t,
            latents: VecDeque::from([latent(&[])]),
            history,
        }
    }

    #[test]
    fn predict_stationary_history() {
        let rec = record_with_history(&[(0, (5.0, 2.0)), (1000, (5.0, 2.0)), (2000, (5.0, 2.0))]);
        let p = predict_location(&rec, 5000);
        assert_relative_eq!(p.x, 5.0, epsilon = 1e-9);
        assert_relative_eq!(p.y, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn predict_linear_extrapolation() {
        let rec = record_with_history(&[(0, (0.0, 0.0)), (1000, (1.0, 0.0))]);
        let p = predict_location(&rec, 2000);
        assert_relative_eq!(p.x, 2.0, epsilon = 1e-9);
        assert_relative_eq!(p.y, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn predict_single_point_identity() {
        let rec = record_with_history(&[(500, (3.0, -1.0))]);
        let p = predict_location(&rec, 99_000);
        assert_eq!(p, WorldPoint::new(3.0, -1.0, 0.0));
    }

    #[test]
    fn distance_zero_for_identical() {
        let rec = record_with_history(&[(0, (1.0, 1.0))]);
        let mut obs = obs_at(1.0, 1.0, 0.8, 0);
        obs.latent = rec.latents[0].clone();
        assert_relative_eq!(distance(&obs, &rec, 0, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn distance_min_over_multiview_latents() {
        let mut rec = record_with_history(&[(0, (0.0, 0.0))]);
        rec.latents = VecDeque::from([latent(&[0.0]), latent(&[1.0])]);
        let mut obs = obs_at(0.0, 0.0, 0.8, 0);
        obs.latent = latent(&[1.0]);
        assert_relative_eq!(distance(&obs, &rec, 0, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn distance_hand_evaluated_sum() {
        // Nearest latent squared distance 4, squared geo distance 9, w 0.5.
        let mut rec = record_with_history(&[(0, (0.0, 0.0))]);
        rec.latents = VecDeque::from([latent(&[2.0]), latent(&[5.0])]);
        let mut obs = obs_at(3.0, 0.0, 0.8, 0);
        obs.latent = latent(&[0.0]);
        assert_relative_eq!(distance(&obs, &rec, 0, 0.5).unwrap(), 4.0 + 0.5 * 9.0);
    }

    #[test]
    fn distance_errors_on_empty_latents() {
        let mut rec = record_with_history(&[(0, (0.0, 0.0))]);
        rec.latents.clear();
        let obs = obs_at(0.0, 0.0, 0.8, 0);
        assert_eq!(distance(&obs, &rec, 0, 0.5), Err(MapError::EmptyLatentSet(1)));
    }

    #[test]
    fn distance_weight_zero_is_pure_feature_distance() {
        let mut rec = record_with_history(&[(0, (0.0, 0.0))]);
        rec.latents = VecDeque::from([latent(&[2.0])]);
        let mut obs = obs_at(50.0, 0.0, 0.8, 0);
        obs.latent = latent(&[0.0]);
        assert_relative_eq!(distance(&obs, &rec, 0, 0.0).unwrap(), 4.0);
    }

    #[test]
    fn match_empty_db_is_new() {
        let db = MapDatabase::new(MapConfig::default());
        let obs = obs_at(0.0, 0.0, 0.8, 0);
        assert_eq!(db.match_observation(&obs, 0).unwrap(), MatchOutcome::New);
    }

    #[test]
    fn match_exact_record() {
        let mut db = MapDatabase::new(MapConfig::default());
        let obs = obs_at(0.0, 0.0, 0.8, 0);
        let id = db.insert_new(&obs);
        assert_eq!(db.match_observation(&obs, 0).unwrap(), MatchOutcome::Matched(id));
    }

    #[test]
    fn match_picks_argmin_within_threshold() {
        // Brute-force candidate distances: 3.0 and 7.0 by construction
        // (latents 0 apart, geo offsets sqrt(6) and sqrt(14), w = 0.5).
        let mut cfg = MapConfig::default();
        cfg.match_threshold = 5.0;
        let mut db = MapDatabase::new(cfg);
        let near = obs_at(6.0_f64.sqrt(), 0.0, 0.8, 0);
        let far = obs_at(-(14.0_f64.sqrt()), 0.0, 0.8, 0);
        let id_near = db.insert_new(&near);
        let _id_far = db.insert_new(&far);
        let probe = obs_at(0.0, 0.0, 0.8, 0);

        // Independent brute force over the candidate set.
        let mut dists: Vec<(u64, f64)> = db
            .records()
            .map(|r| (r.object_id, distance(&probe, r, 0, 0.5).unwrap()))
            .collect();
        dists.sort_by(|a, b| a.1.total_cmp(&b.1));
        assert_relative_eq!(dists[0].1, 3.0, epsilon = 1e-9);
        assert_relative_eq!(dists[1].1, 7.0, epsilon = 1e-9);

        assert_eq!(db.match_observation(&probe, 0).unwrap(), MatchOutcome::Matched(id_near));
        let mut tight = MapDatabase::new(MapConfig { match_threshold: 2.0, ..MapConfig::default() });
        tight.insert_new(&near);
        tight.insert_new(&far);
        assert_eq!(tight.match_observation(&probe, 0).unwrap(), MatchOutcome::New);
    }

    #[test]
    fn match_gates_by_class_radius() {
        let mut db = MapDatabase::new(MapConfig::default());
        // A person 11 m away is outside the 10 m person radius even with an
        // identical latent.
        let anchor = obs_at(0.0, 0.0, 0.8, 0);
        db.insert_new(&anchor);
        let probe = obs_at(11.0, 0.0, 0.8, 0);
        assert_eq!(db.match_observation(&probe, 0).unwrap(), MatchOutcome::New);
    }

    #[test]
    fn combine_equal_confidence_midpoint() {
        let mut db = MapDatabase::new(MapConfig::default());
        let id = db.insert_new(&obs_at(0.0, 0.0, 0.8, 0));
        let group = vec![obs_at(0.0, 0.0, 0.8, 100), obs_at(2.0, 0.0, 0.8, 100)];
        db.combine(id, &group).unwrap();
        let rec = db.get(id).unwrap();
        assert_relative_eq!(rec.geo_location.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(rec.geo_location.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn combine_confidence_weighted_mean() {
        let mut db = MapDatabase::new(MapConfig::default());
        let id = db.insert_new(&obs_at(0.0, 0.0, 0.9, 0));
        let group = vec![obs_at(0.0, 0.0, 0.9, 100), {
            let mut o = obs_at(3.0, 3.0, 0.6, 100);
            o.location.z = 0.0;
            o
        }];
        db.combine(id, &group).unwrap();
        let rec = db.get(id).unwrap();
        assert_relative_eq!(rec.geo_location.x, 1.2, epsilon = 1e-12);
        assert_relative_eq!(rec.geo_location.y, 1.2, epsilon = 1e-12);
        assert_relative_eq!(rec.confidence, 0.9);
    }

    #[test]
    fn combine_single_observation_keeps_location() {
        let mut db = MapDatabase::new(MapConfig::default());
        let id = db.insert_new(&obs_at(0.0, 0.0, 0.5, 0));
        db.combine(id, &[obs_at(4.0, -2.0, 0.5, 100)]).unwrap();
        let rec = db.get(id).unwrap();
        assert_relative_eq!(rec.geo_location.x, 4.0);
        assert_relative_eq!(rec.geo_location.y, -2.0);
    }

    #[test]
    fn combine_rejects_all_zero_confidence() {
        let mut db = MapDatabase::new(MapConfig::default());
        let id = db.insert_new(&obs_at(0.0, 0.0, 0.5, 0));
        let err = db.combine(id, &[obs_at(1.0, 0.0, 0.0, 100)]).unwrap_err();
        assert_eq!(err, MapError::DegenerateWeights);
    }

    #[test]
    fn combine_location_in_convex_hull() {
        let mut db = MapDatabase::new(MapConfig::default());
        let id = db.insert_new(&obs_at(0.0, 0.0, 0.5, 0));
        let group = vec![
            obs_at(1.0, 5.0, 0.3, 100),
            obs_at(-2.0, 1.0, 0.9, 100),
            obs_at(4.0, -3.0, 0.2, 100),
        ];
        db.combine(id, &group).unwrap();
        let g = db.get(id).unwrap().geo_location;
        assert!(g.x >= -2.0 && g.x <= 4.0);
        assert!(g.y >= -3.0 && g.y <= 5.0);
    }

    #[test]
    fn combine_grows_latent_set_and_caps_it() {
        let mut db = MapDatabase::new(MapConfig::default());
        let id = db.insert_new(&obs_at(0.0, 0.0, 0.5, 0));
        let mut group = Vec::new();
        for i in 0..4 {
            let mut o = obs_at(0.0, 0.0, 0.5, 100);
            o.latent = latent(&[i as f64 + 1.0]);
            group.push(o);
        }
        db.combine(id, &group).unwrap();
        let rec = db.get(id).unwrap();
        // Superset of previous latents plus the group's.
        assert_eq!(rec.latents.len(), 5);
        for o in &group {
            assert!(rec.latents.contains(&o.latent));
        }

        // Exceed the cap: oldest evicted, size bounded.
        for _ in 0..10 {
            db.combine(id, &group).unwrap();
        }
        assert_eq!(db.get(id).unwrap().latents.len(), MapConfig::default().latent_cap);
    }

    #[test]
    fn combine_refreshes_kinematics() {
        let mut db = MapDatabase::new(MapConfig::default());
        let id = db.insert_new(&obs_at(0.0, 0.0, 0.8, 0));
        db.combine(id, &[obs_at(3.0, 4.0, 0.8, 1000)]).unwrap();
        let rec = db.get(id).unwrap();
        assert_relative_eq!(rec.speed_mps, 5.0, epsilon = 1e-9);
        assert_relative_eq!(rec.direction.0, 0.6, epsilon = 1e-9);
        assert_relative_eq!(rec.direction.1, 0.8, epsilon = 1e-9);
    }

    #[test]
    fn evict_boundary_behavior() {
        let mut db = MapDatabase::new(MapConfig::default());
        db.insert_new(&obs_at(0.0, 0.0, 0.8, 0));
        db.insert_new(&obs_at(5.0, 0.0, 0.8, 500));
        let ttl = 1000;
        // All fresh.
        assert_eq!(db.evict(900, ttl), 0);
        // Record aged exactly ttl is retained (strict inequality).
        assert_eq!(db.evict(1000, ttl), 0);
        assert_eq!(db.len(), 2);
        // One record aged ttl + 1 goes.
        assert_eq!(db.evict(1001, ttl), 1);
        assert_eq!(db.len(), 1);
    }

    #[test]
    fn delta_since_filters_by_update_time() {
        let mut db = MapDatabase::new(MapConfig::default());
        assert!(db.delta_since(0).is_empty());
        db.insert_new(&obs_at(0.0, 0.0, 0.8, 100));
        db.insert_new(&obs_at(5.0, 0.0, 0.8, 200));
        db.insert_new(&obs_at(9.0, 0.0, 0.8, 300));
        assert_eq!(db.delta_since(0).len(), 3);
        // Filter oracle: strictly newer than t.
        let expect: Vec<u64> = db
            .records()
            .filter(|r| r.update_time_ms > 150)
            .map(|r| r.object_id)
            .collect();
        let got: Vec<u64> = db.delta_since(150).iter().map(|r| r.object_id).collect();
        assert_eq!(got, expect);
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn ingest_keeps_ids_unique_and_deterministic() {
        let run = || {
            let mut db = MapDatabase::new(MapConfig::default());
            let batch: Vec<Observation> = (0..6)
                .map(|i| obs_at(i as f64 * 20.0, 0.0, 0.8, 100))
                .collect();
            db.ingest(&batch).unwrap();
            db.ingest(&batch).unwrap();
            let mut ids: Vec<u64> = db.records().map(|r| r.object_id).collect();
            let n = db.len();
            ids.dedup();
            assert_eq!(ids.len(), n, "duplicate object ids");
            ids
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn snapshot_is_line_per_record() {
        let mut db = MapDatabase::new(MapConfig::default());
        db.insert_new(&obs_at(1.0, 2.0, 0.8, 100));
        db.insert_new(&obs_at(3.0, 4.0, 0.9, 200));
        let mut buf = Vec::new();
        db.write_snapshot(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("1,person,1.0000,2.0000,"));
        assert_eq!(lines[0].split(',').count(), 8);
    }
}
