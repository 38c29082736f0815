//! Constant-velocity Kalman tracking of per-frame localization results on
//! the virtual ground plane, with greedy gated data association.
//!
//! The filter state is planar: (x, z, vx, vz). Camera attitude is estimated
//! per frame by the solver and is not filtered. The tracker is a
//! single-writer component: one frame at a time, in time order.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Lost,
}

impl TrackStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TrackStatus::Tentative => "tentative",
            TrackStatus::Confirmed => "confirmed",
            TrackStatus::Lost => "lost",
        }
    }
}

/// One person's filtered trajectory.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    /// State mean (x, z, vx, vz): position in meters, velocity in m/s.
    pub mean: Vector4<f64>,
    pub covariance: Matrix4<f64>,
    pub last_update_time: f64,
    pub missed_count: u32,
    pub hit_streak: u32,
    pub status: TrackStatus,
}

impl Track {
    /// Fresh tentative track at a detection. Position uncertainty starts at
    /// the measurement noise, velocity is unknown (wide prior).
    pub fn spawn(id: u64, position: (f64, f64), time: f64, measurement_noise: f64) -> Self {
        let mut covariance = Matrix4::zeros();
        covariance[(0, 0)] = measurement_noise;
        covariance[(1, 1)] = measurement_noise;
        covariance[(2, 2)] = 4.0;
        covariance[(3, 3)] = 4.0;
        Self {
            id,
            mean: Vector4::new(position.0, position.1, 0.0, 0.0),
            covariance,
            last_update_time: time,
            missed_count: 0,
            hit_streak: 1,
            status: TrackStatus::Tentative,
        }
    }

    pub fn position(&self) -> (f64, f64) {
        (self.mean[0], self.mean[1])
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.mean[2], self.mean[3])
    }
}

/// Constant-velocity prediction over `dt` seconds with white-acceleration
/// process noise of standard deviation `process_noise_accel`.
pub fn predict(track: &Track, dt: f64, process_noise_accel: f64) -> Track {
    let mut transition = Matrix4::identity();
    transition[(0, 2)] = dt;
    transition[(1, 3)] = dt;

    let q = process_noise_accel * process_noise_accel;
    let dt2 = dt * dt;
    let mut process = Matrix4::zeros();
    for axis in 0..2 {
        let (p, v) = (axis, axis + 2);
        process[(p, p)] = q * dt2 * dt2 / 4.0;
        process[(p, v)] = q * dt2 * dt / 2.0;
        process[(v, p)] = q * dt2 * dt / 2.0;
        process[(v, v)] = q * dt2;
    }

    let mean = transition * track.mean;
    let covariance = transition * track.covariance * transition.transpose() + process;
    Track {
        mean,
        covariance: symmetrize(covariance),
        ..track.clone()
    }
}

/// Position-only Kalman update. Resets the miss counter and extends the hit
/// streak.
pub fn update(track: &Track, measurement: (f64, f64), measurement_noise: f64) -> Track {
    let observation = Matrix2x4::<f64>::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let noise = Matrix2::identity() * measurement_noise;

    let innovation_cov = observation * track.covariance * observation.transpose() + noise;
    let inv = innovation_cov
        .try_inverse()
        .expect("innovation covariance is positive definite");
    let gain: Matrix4x2<f64> = track.covariance * observation.transpose() * inv;

    let z = Vector2::new(measurement.0, measurement.1);
    let innovation = z - observation * track.mean;
    let mean = track.mean + gain * innovation;
    let identity = Matrix4::identity();
    let covariance = (identity - gain * observation) * track.covariance;

    Track {
        mean,
        covariance: symmetrize(covariance),
        missed_count: 0,
        hit_streak: track.hit_streak + 1,
        ..track.clone()
    }
}

fn symmetrize(m: Matrix4<f64>) -> Matrix4<f64> {
    (m + m.transpose()) * 0.5
}

/// Result of gated greedy assignment: index pairs are (detection, track).
#[derive(Debug, Clone, Default)]
pub struct Association {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_tracks: Vec<usize>,
}

/// Greedy nearest-neighbor association, globally sorted by plane distance.
/// Pairs farther apart than `gate_radius` are never matched; every detection
/// and track is used at most once.
pub fn associate(
    detections: &[(f64, f64)],
    tracks: &[Track],
    gate_radius: f64,
) -> Association {
    let mut pairs = Vec::new();
    for (d, det) in detections.iter().enumerate() {
        for (t, track) in tracks.iter().enumerate() {
            if track.status == TrackStatus::Lost {
                continue;
            }
            let (tx, tz) = track.position();
            let dist = ((det.0 - tx).powi(2) + (det.1 - tz).powi(2)).sqrt();
            if dist <= gate_radius {
                pairs.push((dist, d, t));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut used_detections = vec![false; detections.len()];
    let mut used_tracks = vec![false; tracks.len()];
    let mut matches = Vec::new();
    for (_, d, t) in pairs {
        if !used_detections[d] && !used_tracks[t] {
            used_detections[d] = true;
            used_tracks[t] = true;
            matches.push((d, t));
        }
    }
    Association {
        matches,
        unmatched_detections: (0..detections.len())
            .filter(|&d| !used_detections[d])
            .collect(),
        unmatched_tracks: (0..tracks.len()).filter(|&t| !used_tracks[t]).collect(),
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    /// White-acceleration process noise, m/s^2.
    pub process_noise_accel: f64,
    /// Position measurement variance, m^2.
    pub measurement_noise: f64,
    /// Association gate, meters.
    pub gate_radius: f64,
    /// Consecutive misses before a track is lost.
    pub miss_limit: u32,
    /// Consecutive hits before a track is confirmed.
    pub confirm_hits: u32,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            process_noise_accel: 2.0,
            measurement_noise: 0.01,
            gate_radius: 1.0,
            miss_limit: 15,
            confirm_hits: 3,
        }
    }
}

/// Multi-object tracker: owns the track list and processes one frame of
/// detections at a time.
#[derive(Debug)]
pub struct Tracker {
    config: TrackingConfig,
    tracks: Vec<Track>,
    next_id: u64,
    last_time: Option<f64>,
}

impl Tracker {
    pub fn new(config: TrackingConfig) -> Self {
        Self {
            config,
            tracks: Vec::new(),
            next_id: 0,
            last_time: None,
        }
    }

    /// Advances the tracker to `time`, associates the detections, and updates
    /// the track list. Tracks marked lost on a previous step are dropped
    /// here, so they stay visible for exactly one snapshot.
    pub fn step(&mut self, time: f64, detections: &[(f64, f64)]) {
        self.tracks.retain(|t| t.status != TrackStatus::Lost);

        let dt = self
            .last_time
            .map(|prev| (time - prev).max(0.0))
            .unwrap_or(0.0);
        self.last_time = Some(time);

        for track in &mut self.tracks {
            *track = predict(track, dt, self.config.process_noise_accel);
        }

        let assoc = associate(detections, &self.tracks, self.config.gate_radius);
        for (d, t) in &assoc.matches {
            let mut updated = update(
                &self.tracks[*t],
                detections[*d],
                self.config.measurement_noise,
            );
            updated.last_update_time = time;
            if updated.hit_streak >= self.config.confirm_hits {
                updated.status = TrackStatus::Confirmed;
            }
            self.tracks[*t] = updated;
        }
        for t in &assoc.unmatched_tracks {
            let track = &mut self.tracks[*t];
            track.missed_count += 1;
            track.hit_streak = 0;
            if track.missed_count > self.config.miss_limit {
                track.status = TrackStatus::Lost;
            }
        }
        for d in &assoc.unmatched_detections {
            let track = Track::spawn(
                self.next_id,
                detections[*d],
                time,
                self.config.measurement_noise,
            );
            self.next_id += 1;
            self.tracks.push(track);
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn track_at(x: f64, z: f64) -> Track {
        Track::spawn(0, (x, z), 0.0, 0.01)
    }

    #[test]
    fn prediction_moves_with_constant_velocity() {
        let mut track = track_at(0.0, 4.0);
        track.mean[2] = 1.0;
        let predicted = predict(&track, 0.5, 2.0);
        assert_abs_diff_eq!(predicted.mean[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(predicted.mean[1], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(predicted.mean[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_dt_prediction_changes_nothing() {
        let track = track_at(1.0, 2.0);
        let predicted = predict(&track, 0.0, 2.0);
        assert_eq!(predicted.mean, track.mean);
        assert_eq!(predicted.covariance, track.covariance);
    }

    #[test]
    fn prediction_inflates_covariance() {
        let track = track_at(0.0, 4.0);
        let predicted = predict(&track, 0.1, 2.0);
        assert!(predicted.covariance.trace() > track.covariance.trace());
    }

    #[test]
    fn update_at_predicted_position_barely_moves_the_mean() {
        let track = track_at(0.0, 4.0);
        let updated = update(&track, (0.0, 4.0), 1e-12);
        assert!((updated.mean[0]).abs() < 1e-9);
        assert!((updated.mean[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn repeated_measurements_converge_to_the_measurement() {
        // Oracle: the scalar Kalman recursion for one position axis with the
        // same noise values must produce the same variance sequence.
        let r = 0.01;
        let mut track = track_at(0.0, 0.0);
        track.mean[0] = 1.0; // start offset from the measured position
        let mut scalar_var = track.covariance[(0, 0)];
        let mut prev_var = f64::INFINITY;
        for _ in 0..50 {
            track = update(&track, (0.0, 0.0), r);
            scalar_var = scalar_var * r / (scalar_var + r);
            assert_abs_diff_eq!(track.covariance[(0, 0)], scalar_var, epsilon = 1e-12);
            assert!(track.covariance[(0, 0)] < prev_var);
            prev_var = track.covariance[(0, 0)];
        }
        assert!(track.mean[0].abs() < 1e-6);
    }

    #[test]
    fn uninformative_measurement_keeps_the_prior() {
        let track = track_at(0.3, 2.5);
        let updated = update(&track, (5.0, 5.0), 1e12);
        assert_abs_diff_eq!(updated.mean[0], track.mean[0], epsilon = 1e-6);
        assert_abs_diff_eq!(updated.mean[1], track.mean[1], epsilon = 1e-6);
    }

    #[test]
    fn nearby_pair_is_matched() {
        let tracks = vec![track_at(0.1, 4.0)];
        let assoc = associate(&[(0.0, 4.0)], &tracks, 1.0);
        assert_eq!(assoc.matches, vec![(0, 0)]);
        assert!(assoc.unmatched_detections.is_empty());
        assert!(assoc.unmatched_tracks.is_empty());
    }

    #[test]
    fn gate_blocks_distant_pairs() {
        let tracks = vec![track_at(0.0, 4.0)];
        let assoc = associate(&[(5.0, 4.0)], &tracks, 1.0);
        assert!(assoc.matches.is_empty());
        assert_eq!(assoc.unmatched_detections, vec![0]);
        assert_eq!(assoc.unmatched_tracks, vec![0]);
    }

    #[test]
    fn greedy_matches_globally_closest_first() {
        // Oracle: exhaustive enumeration over all one-to-one assignments of
        // this 2x2 case confirms which pairing greedy must pick.
        let tracks = vec![track_at(0.0, 0.0), track_at(1.0, 0.0)];
        let detections = [(0.4, 0.0), (0.95, 0.0)];
        // Pair distances: d0-t0 0.4, d0-t1 0.6, d1-t0 0.95, d1-t1 0.05.
        // Greedy takes (1, 1) first, then (0, 0).
        let assoc = associate(&detections, &tracks, 2.0);
        let mut matches = assoc.matches.clone();
        matches.sort();
        assert_eq!(matches, vec![(0, 0), (1, 1)]);

        // Enumeration of both perfect matchings agrees that the greedy choice
        // contains the globally closest pair.
        let dist = |d: (f64, f64), t: &Track| {
            let (tx, tz) = t.position();
            ((d.0 - tx).powi(2) + (d.1 - tz).powi(2)).sqrt()
        };
        let closest = [
            (dist(detections[0], &tracks[0]), (0, 0)),
            (dist(detections[0], &tracks[1]), (0, 1)),
            (dist(detections[1], &tracks[0]), (1, 0)),
            (dist(detections[1], &tracks[1]), (1, 1)),
        ]
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap()
        .1;
        assert!(assoc.matches.contains(&closest));
    }

    #[test]
    fn association_is_injective_and_gated() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let tracks: Vec<Track> = (0..rng.gen_range(0..5))
                .map(|i| Track::spawn(i, (rng.gen_range(-5.0..5.0), rng.gen_range(0.0..8.0)), 0.0, 0.01))
                .collect();
            let detections: Vec<(f64, f64)> = (0..rng.gen_range(0..5))
                .map(|_| (rng.gen_range(-5.0..5.0), rng.gen_range(0.0..8.0)))
                .collect();
            let gate = 1.5;
            let assoc = associate(&detections, &tracks, gate);
            let mut seen_d = std::collections::HashSet::new();
            let mut seen_t = std::collections::HashSet::new();
            for (d, t) in &assoc.matches {
                assert!(seen_d.insert(*d));
                assert!(seen_t.insert(*t));
                let (tx, tz) = tracks[*t].position();
                let dist =
                    ((detections[*d].0 - tx).powi(2) + (detections[*d].1 - tz).powi(2)).sqrt();
                assert!(dist <= gate);
            }
        }
    }

    #[test]
    fn noiseless_constant_velocity_is_tracked_to_tolerance() {
        let config = TrackingConfig::default();
        let mut tracker = Tracker::new(config);
        let dt = 1.0 / 30.0;
        let (vx, vz) = (0.7, -0.3);
        let mut truth = (0.0, 6.0);
        for k in 0..=50 {
            let t = k as f64 * dt;
            truth = (vx * t, 6.0 + vz * t);
            tracker.step(t, &[truth]);
        }
        let track = &tracker.tracks()[0];
        let (x, z) = track.position();
        let (evx, evz) = track.velocity();
        assert!(((x - truth.0).powi(2) + (z - truth.1).powi(2)).sqrt() < 1e-3);
        assert!((evx - vx).abs() < 1e-2 && (evz - vz).abs() < 1e-2);
        assert_eq!(track.status, TrackStatus::Confirmed);
    }

    #[test]
    fn covariance_stays_spd_under_random_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut track = track_at(0.0, 4.0);
        for _ in 0..10_000 {
            if rng.gen_bool(0.5) {
                track = predict(&track, rng.gen_range(0.0..0.2), 2.0);
            } else {
                track = update(
                    &track,
                    (rng.gen_range(-5.0..5.0), rng.gen_range(0.1..8.0)),
                    rng.gen_range(1e-4..1.0),
                );
            }
            assert!(
                track.covariance.cholesky().is_some(),
                "covariance lost positive definiteness"
            );
        }
    }

    #[test]
    fn missed_tracks_become_lost_and_are_pruned() {
        let config = TrackingConfig {
            miss_limit: 2,
            ..TrackingConfig::default()
        };
        let mut tracker = Tracker::new(config);
        tracker.step(0.0, &[(0.0, 4.0)]);
        for k in 1..=3 {
            tracker.step(k as f64 * 0.1, &[]);
        }
        assert_eq!(tracker.tracks()[0].status, TrackStatus::Lost);
        tracker.step(0.4, &[]);
        assert!(tracker.tracks().is_empty());
    }
}
