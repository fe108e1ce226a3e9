//! The per-packet odometry loop: predict, compensate, enhance, track,
//! estimate, then maintain landmarks and the depth prior.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use super::{ransac_pose, refine_pose, triangulate, Correspondence, FrameState, Landmark};
use crate::config::{PacketMode, PipelineConfig, WarpDepth};
use crate::depth_prior::{
    estimate_scale, roi_mean_depth, smooth_depth, DepthMap, DepthObservation, DepthResidualTerm, DepthSource, DepthState,
    ScaleSample,
};
use crate::error::{Error, Result};
use crate::event_stream::{
    integrate_gyro, packetize_by_count, sync_imu, AugmentedPacket, Event, EventPacket, ImuSample, Nanos, TimeWindows,
};
use crate::features::{TrackRow, TrackStatus, Tracker};
use crate::frame_enhance::enhance_event_frame;
use crate::geometry::{se3_exp, se3_log, Camera, Pose, Rotation, Vec2, Vec3};
use crate::image::GrayImage;
use crate::motion_compensation::{
    accumulate_frame, compensate_packet, update_alignment, AlignmentCorrection, EventDepth, EventFrame, RefTime,
    ALIGN_SEARCH,
};

/// Frames used for the constant-velocity prediction.
const VELOCITY_WINDOW: usize = 5;

/// Wall time spent per stage, summed over all packets.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub warp: Duration,
    pub accumulate: Duration,
    pub enhance: Duration,
    pub track: Duration,
    pub estimate: Duration,
    pub depth: Duration,
    pub events: usize,
    pub frames: usize,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.warp + self.accumulate + self.enhance + self.track + self.estimate + self.depth
    }

    pub fn warp_events_per_sec(&self) -> f64 {
        self.events as f64 / self.warp.as_secs_f64().max(1e-12)
    }

    pub fn frames_per_sec(&self) -> f64 {
        self.frames as f64 / self.total().as_secs_f64().max(1e-12)
    }
}

/// Consecutive frames whose pose came from prediction only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrackingGap {
    pub start: Nanos,
    pub end: Nanos,
    pub frames: usize,
}

#[derive(Clone, Debug, Default)]
pub struct OdometryOutput {
    pub frames: Vec<FrameState>,
    pub gaps: Vec<TrackingGap>,
    /// Final global scale of the depth prior.
    pub scale: f64,
    pub timings: StageTimings,
}

/// What one processed packet produced, for tools that inspect the stages.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub state: FrameState,
    pub frame: EventFrame,
    pub enhanced: GrayImage,
    /// Tracker rows in true pixel coordinates (alignment correction removed).
    pub tracks: Vec<TrackRow>,
    pub inliers: usize,
    pub lost: bool,
}

pub struct Odometry<'a> {
    cam: Camera,
    cfg: PipelineConfig,
    depth: Option<&'a dyn DepthSource>,
    imu: &'a [ImuSample],
    tracker: Tracker,
    landmarks: BTreeMap<u64, Landmark>,
    frames: Vec<FrameState>,
    depth_state: DepthState,
    scale: f64,
    samples: Vec<ScaleSample>,
    prev_frame: Option<EventFrame>,
    /// Correction applied to the current and previous frame.
    correction: AlignmentCorrection,
    prev_correction: AlignmentCorrection,
    gaps: Vec<TrackingGap>,
    timings: StageTimings,
}

fn scaled_map(map: &DepthMap, factor: f64) -> DepthMap {
    if factor == 1.0 {
        return map.clone();
    }
    let data = map.data().iter().map(|&d| (d as f64 * factor) as f32).collect();
    DepthMap::new(map.width(), map.height(), data).expect("same dims")
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl<'a> Odometry<'a> {
    /// `depth` is ignored when the depth prior is disabled in `cfg`.
    pub fn new(cam: Camera, cfg: PipelineConfig, depth: Option<&'a dyn DepthSource>, imu: &'a [ImuSample]) -> Result<Self> {
        cfg.validate()?;
        cam.validate()?;
        let depth_state = DepthState::new(cfg.depth.alpha, cfg.depth.d_min, cfg.depth.d_max)?;
        let depth = if cfg.depth.enabled { depth } else { None };
        Ok(Self {
            cam,
            tracker: Tracker::new(cfg.tracker.clone()),
            cfg,
            depth,
            imu,
            landmarks: BTreeMap::new(),
            frames: Vec::new(),
            depth_state,
            scale: 1.0,
            samples: Vec::new(),
            prev_frame: None,
            correction: AlignmentCorrection::zero(),
            prev_correction: AlignmentCorrection::zero(),
            gaps: Vec::new(),
            timings: StageTimings::default(),
        })
    }

    pub fn frames(&self) -> &[FrameState] {
        &self.frames
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn landmarks(&self) -> impl Iterator<Item = &Landmark> {
        self.landmarks.values()
    }

    pub fn finish(self) -> OdometryOutput {
        OdometryOutput { frames: self.frames, gaps: self.gaps, scale: self.scale, timings: self.timings }
    }

    fn reference_time(&self, ap: &AugmentedPacket) -> Nanos {
        match self.cfg.compensation.ref_time {
            RefTime::Start => ap.packet.t0,
            RefTime::Mid => ap.packet.t0 + ap.packet.duration() / 2,
        }
    }

    /// Linear velocity (world) and angular velocity (body) from the recent
    /// frames. The linear part is a least-squares slope: with the warp
    /// referenced to the packet start, the frame position depends on the
    /// predicted velocity, and a two-frame difference makes that loop unstable.
    fn velocities(&self) -> (Vec3, Vec3) {
        let n = self.frames.len().min(VELOCITY_WINDOW);
        if n < 2 {
            return (Vec3::zeros(), Vec3::zeros());
        }
        let recent = &self.frames[self.frames.len() - n..];
        let (a, b) = (&recent[0], &recent[n - 1]);
        let sec = |f: &FrameState| (f.timestamp - b.timestamp) as f64 * 1e-9;
        let t_mean = recent.iter().map(sec).sum::<f64>() / n as f64;
        let p_mean = recent.iter().map(|f| f.pose.translation).sum::<Vec3>() / n as f64;
        let (mut num, mut den) = (Vec3::zeros(), 0.0);
        for f in recent {
            let dt = sec(f) - t_mean;
            num += (f.pose.translation - p_mean) * dt;
            den += dt * dt;
        }
        let w = (a.pose.rotation.inverse() * b.pose.rotation).log() / (sec(b) - sec(a));
        (num / den, w)
    }

    fn gyro_rotation(&self, ta: Nanos, tb: Nanos, omega: &Vec3) -> Rotation {
        if self.cfg.estimator.use_imu {
            if let Ok(r) = integrate_gyro(self.imu, ta, tb) {
                return r;
            }
        }
        Rotation::exp(&(omega * ((tb - ta) as f64 * 1e-9)))
    }

    /// Processes one packet. Packets must arrive with increasing reference times.
    pub fn process(&mut self, ap: &AugmentedPacket) -> Result<FrameState> {
        Ok(self.process_frame(ap)?.state)
    }

    pub fn process_frame(&mut self, ap: &AugmentedPacket) -> Result<FrameOutput> {
        let t_ref = self.reference_time(ap);
        if let Some(last) = self.frames.last() {
            if t_ref <= last.timestamp {
                return Err(Error::NonMonotonicTimestamp { line: self.frames.len() + 1 });
            }
        }
        let frame_id = self.frames.len() as u64;
        let cam = self.cam;

        // prediction
        let (v, omega) = self.velocities();
        let pose_pred = match self.frames.last() {
            None => Pose::identity(),
            Some(last) => {
                let dt = (t_ref - last.timestamp) as f64 * 1e-9;
                let dr = self.gyro_rotation(last.timestamp, t_ref, &omega);
                Pose::new(last.pose.rotation * dr, last.pose.translation + v * dt)
            }
        };
        let dur = ap.packet.duration() as f64 * 1e-9;
        let packet_rot = if self.cfg.estimator.use_imu && !ap.imu.is_empty() {
            ap.rotation_prior
        } else {
            Rotation::exp(&(omega * dur))
        };
        let motion = Pose::new(packet_rot, pose_pred.rotation.inverse().rotate(&(v * dur)));
        let pose0 = match self.cfg.compensation.ref_time {
            RefTime::Start => pose_pred,
            RefTime::Mid => pose_pred * se3_exp(&se3_log(&motion)?.scaled(-0.5)),
        };
        let pose1 = pose0 * motion;

        // depth prior
        let clock = Instant::now();
        let observation = match self.depth {
            Some(src) => Some(src.observe(t_ref)?),
            None => None,
        };
        let scene_depth = match &observation {
            Some(obs) => {
                if let Ok(d_bar) = roi_mean_depth(obs, self.cfg.depth.roi_fraction) {
                    smooth_depth(d_bar, &mut self.depth_state);
                }
                self.depth_state.d_prev
            }
            None => None,
        };
        let metric_scene = scene_depth.map_or(self.cfg.estimator.init_depth, |d| d / self.scale);
        let metric_map = match &observation {
            Some(DepthObservation::Map(m)) => Some(scaled_map(m, 1.0 / self.scale)),
            _ => None,
        };
        self.timings.depth += clock.elapsed();

        // compensation
        let clock = Instant::now();
        let landmark_depth = match self.cfg.compensation.warp_depth {
            WarpDepth::Landmarks => median(
                self.landmarks
                    .values()
                    .map(|l| pose_pred.inverse_transform_point(&l.position).z)
                    .filter(|z| *z > 0.0)
                    .collect(),
            ),
            WarpDepth::Scene => None,
        };
        let event_depth = match (landmark_depth, &metric_map) {
            (Some(d), _) => EventDepth::Scene(d),
            (None, Some(map)) => EventDepth::Map { map, fallback: metric_scene },
            (None, None) => EventDepth::Scene(metric_scene),
        };
        let corr = if self.cfg.compensation.align { self.correction } else { AlignmentCorrection::zero() };
        let comp = compensate_packet(ap, &pose0, &pose1, event_depth, &cam, &corr, self.cfg.compensation.ref_time)?;
        self.timings.warp += clock.elapsed();
        self.timings.events += ap.packet.len();

        let clock = Instant::now();
        let frame = accumulate_frame(&comp.events, &cam, self.cfg.compensation.frame_mode, t_ref);
        let next_correction = match (&self.prev_frame, self.cfg.compensation.align) {
            (Some(prev), true) => {
                let d = update_alignment(prev, &frame)?.delta;
                // raw frame-to-frame shift, reused for the next frame
                let raw = corr.delta + d - self.prev_correction.delta;
                let lim = ALIGN_SEARCH as f64;
                AlignmentCorrection::new(raw.x.clamp(-lim, lim), raw.y.clamp(-lim, lim))
            }
            _ => AlignmentCorrection::zero(),
        };
        self.timings.accumulate += clock.elapsed();

        let clock = Instant::now();
        let enhanced = enhance_event_frame(&frame.to_gray(), &self.cfg.enhance)?;
        self.timings.enhance += clock.elapsed();

        // tracking, in the corrected coordinates of each frame
        let clock = Instant::now();
        let shift_prev = self.prev_correction.delta;
        let shift = corr.delta;
        let landmarks = &self.landmarks;
        let mut rows = self.tracker.process(frame_id, &enhanced, |id, last| match landmarks.get(&id) {
            Some(l) => cam
                .project(&pose_pred.inverse_transform_point(&l.position))
                .map_or(last + shift_prev - shift, |p| p - shift),
            None => last + shift_prev - shift,
        });
        for r in &mut rows {
            r.x += shift.x;
            r.y += shift.y;
        }
        self.timings.track += clock.elapsed();

        // pose
        let clock = Instant::now();
        let observed: Vec<(u64, Vec2)> =
            rows.iter().filter(|r| r.status == TrackStatus::Live).map(|r| (r.track_id, Vec2::new(r.x, r.y))).collect();
        let with_landmark: Vec<(u64, Correspondence)> = observed
            .iter()
            .filter_map(|(id, px)| self.landmarks.get(id).map(|l| (*id, Correspondence { point: l.position, pixel: *px })))
            .collect();
        let is_keyframe = frame_id % self.cfg.depth.keyframe_interval as u64 == 0;
        let (pose, inliers, lost) = if self.frames.is_empty() {
            (Pose::identity(), Vec::new(), false)
        } else {
            let corr: Vec<Correspondence> = with_landmark.iter().map(|(_, c)| *c).collect();
            match ransac_pose(&corr, &cam, &pose_pred, &self.cfg.ransac) {
                Ok(res) => {
                    let inl: Vec<Correspondence> = res.inliers.iter().map(|&i| corr[i]).collect();
                    let term = match (is_keyframe, scene_depth, self.samples.is_empty()) {
                        (true, Some(d), false) => Some(DepthResidualTerm {
                            rho_bar: 0.0,
                            rho_roi: 1.0 / d,
                            s: self.scale,
                            sigma: self.cfg.depth.sigma_for(d),
                        }),
                        _ => None,
                    };
                    let pose = refine_pose(&res.pose, &inl, &cam, term.as_ref()).map_or(res.pose, |r| r.pose);
                    let inlier_ids: BTreeSet<u64> = res.inliers.iter().map(|&i| with_landmark[i].0).collect();
                    for (id, _) in &with_landmark {
                        if !inlier_ids.contains(id) {
                            self.tracker.retire(*id);
                            self.landmarks.remove(id);
                        }
                    }
                    (pose, inlier_ids.into_iter().collect::<Vec<_>>(), false)
                }
                Err(Error::InsufficientInliers { found, required }) => {
                    log::warn!("tracking lost at t = {t_ref} ns: {found} of {required} inliers");
                    (pose_pred, Vec::new(), true)
                }
                Err(e) => return Err(e),
            }
        };
        if lost {
            match self.gaps.last_mut() {
                Some(g) if g.end == self.frames.last().map_or(i64::MIN, |f| f.timestamp) => {
                    g.end = t_ref;
                    g.frames += 1;
                }
                _ => self.gaps.push(TrackingGap { start: t_ref, end: t_ref, frames: 1 }),
            }
        }
        let state = FrameState { pose, timestamp: t_ref, is_keyframe };
        self.frames.push(state);
        self.timings.estimate += clock.elapsed();

        // landmarks
        let clock = Instant::now();
        let live: BTreeSet<u64> = self.tracker.live_tracks().map(|t| t.id).collect();
        self.landmarks.retain(|id, _| live.contains(id));
        for (id, px) in &observed {
            if !live.contains(id) {
                continue;
            }
            match self.landmarks.get_mut(id) {
                Some(l) => {
                    l.observations.insert(frame_id, *px);
                    if !l.triangulated {
                        let anchor = self.frames[l.anchor_frame as usize].pose;
                        let a_px = l.observations[&l.anchor_frame];
                        let ra = anchor.rotation.rotate(&cam.normalized_ray(&a_px));
                        let rb = pose.rotation.rotate(&cam.normalized_ray(px));
                        let angle = ra.angle(&rb).to_degrees();
                        if angle >= self.cfg.estimator.triangulation_min_angle_deg {
                            if let Ok(tri) = triangulate(&a_px, px, &anchor, &pose, &cam) {
                                let z = anchor.inverse_transform_point(&tri.point).z;
                                if tri.reprojection_error <= self.cfg.estimator.max_triangulation_error && z > 0.0 {
                                    l.position = tri.point;
                                    l.inverse_depth = 1.0 / z;
                                    l.triangulated = true;
                                }
                            }
                        }
                    }
                }
                None => {
                    let (d, exact) = match metric_map.as_ref().and_then(|m| m.at(px)) {
                        Some(d) if d > 0.0 => (d, true),
                        _ => (metric_scene, false),
                    };
                    let Ok(xc) = cam.backproject(px, d) else { continue };
                    self.landmarks.insert(
                        *id,
                        Landmark {
                            id: *id,
                            position: pose.transform_point(&xc),
                            inverse_depth: 1.0 / d,
                            anchor_frame: frame_id,
                            observations: BTreeMap::from([(frame_id, *px)]),
                            // per-pixel depth is as good as a triangulation
                            triangulated: exact,
                        },
                    );
                }
            }
        }

        // scale refit at keyframes
        if let (true, Some(d)) = (is_keyframe, scene_depth) {
            let inv: Vec<f64> = observed
                .iter()
                .filter_map(|(id, _)| self.landmarks.get(id))
                .map(|l| pose.inverse_transform_point(&l.position).z)
                .filter(|z| *z > 0.0)
                .map(|z| 1.0 / z)
                .collect();
            if !inv.is_empty() {
                let rho_bar = inv.iter().sum::<f64>() / inv.len() as f64;
                self.samples.push(ScaleSample { rho_bar, rho_roi: 1.0 / d, sigma: self.cfg.depth.sigma_for(d) });
                if let Ok(s) = estimate_scale(&self.samples) {
                    self.scale = s;
                }
            }
        }
        self.timings.depth += clock.elapsed();
        self.timings.frames += 1;

        self.prev_correction = corr;
        self.correction = next_correction;
        let out = FrameOutput { state, frame: frame.clone(), enhanced, tracks: rows, inliers: inliers.len(), lost };
        self.prev_frame = Some(frame);
        Ok(out)
    }
}

/// Packets of the stream per the configured packet mode, each synchronized
/// with the IMU (identity rotation prior when no IMU covers it).
pub fn packet_stream<'e>(
    events: &'e [Event],
    imu: &'e [ImuSample],
    cfg: &PipelineConfig,
) -> Result<impl Iterator<Item = Result<AugmentedPacket>> + 'e> {
    cfg.validate()?;
    let packets: Box<dyn Iterator<Item = EventPacket> + 'e> = match cfg.packet.mode {
        PacketMode::Time => Box::new(
            TimeWindows::new(events, cfg.packet.window_ns(), cfg.packet.overlap_ns())?
                .map(move |w| EventPacket { t0: w.t0, t1: w.t1, events: events[w.range].to_vec() }),
        ),
        PacketMode::Count => Box::new(packetize_by_count(events, cfg.packet.count, cfg.packet.count_overlap)?.into_iter()),
    };
    Ok(packets.filter(|p| p.t1 > p.t0).map(move |p| match integrate_gyro(imu, p.t0, p.t1) {
        Ok(_) => sync_imu(p, imu),
        Err(Error::ImuGap { .. }) => Ok(AugmentedPacket { packet: p, imu: Vec::new(), rotation_prior: Rotation::identity() }),
        Err(e) => Err(e),
    }))
}

/// Runs the full loop over an event stream.
pub fn run_odometry(
    events: &[Event],
    imu: &[ImuSample],
    cam: &Camera,
    cfg: &PipelineConfig,
    depth: Option<&dyn DepthSource>,
) -> Result<OdometryOutput> {
    let mut odo = Odometry::new(*cam, cfg.clone(), depth, imu)?;
    for ap in packet_stream(events, imu, cfg)? {
        odo.process(&ap?)?;
    }
    Ok(odo.finish())
}
