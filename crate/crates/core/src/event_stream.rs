//! Event and IMU ingestion, time-windowed packetization and IMU synchronization.
//!
//! Timestamps are integer nanoseconds internally. Decimal seconds only appear
//! at the text-file boundary (`events.txt`, `imu.txt`).

use std::io::{BufRead, Write};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::geometry::{Rotation, Vec3};

/// Timestamp in integer nanoseconds.
pub type Nanos = i64;

pub const NANOS_PER_SEC: i64 = 1_000_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> i32 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }

    pub fn from_sign(s: i32) -> Self {
        if s < 0 {
            Polarity::Negative
        } else {
            Polarity::Positive
        }
    }

    /// File encoding: 0 = negative, 1 = positive.
    pub fn bit(self) -> u8 {
        match self {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: Nanos,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: Nanos, x: u16, y: u16, polarity: Polarity) -> Self {
        Self { t, x, y, polarity }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: Nanos,
    /// m/s²
    pub accel: Vec3,
    /// rad/s
    pub gyro: Vec3,
}

/// Events inside the half-open window `[t0, t1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventPacket {
    pub t0: Nanos,
    pub t1: Nanos,
    pub events: Vec<Event>,
}

impl EventPacket {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn duration(&self) -> Nanos {
        self.t1 - self.t0
    }
}

/// A packet with the IMU samples over its window and the integrated gyro rotation.
#[derive(Clone, Debug)]
pub struct AugmentedPacket {
    pub packet: EventPacket,
    pub imu: Vec<ImuSample>,
    /// Body rotation from `t0` to `t1`, i.e. `R(t0)⁻¹ R(t1)`.
    pub rotation_prior: Rotation,
}

/// Converts decimal seconds to integer nanoseconds, rounding half to even.
///
/// Plain decimals are converted exactly digit by digit; exponent notation
/// falls back to a float parse.
pub fn parse_seconds(s: &str) -> Option<Nanos> {
    let s = s.trim();
    if s.is_empty() || s.starts_with('-') {
        return None;
    }
    if s.contains(['e', 'E']) {
        let v: f64 = s.parse().ok()?;
        if !v.is_finite() || v < 0.0 {
            return None;
        }
        return Some((v * 1e9).round_ties_even() as i64);
    }
    let s = s.strip_prefix('+').unwrap_or(s);
    let (int_part, frac_part) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let secs: i64 = if int_part.is_empty() { 0 } else { int_part.parse().ok()? };
    let mut ns: i64 = 0;
    let digits = frac_part.as_bytes();
    for i in 0..9 {
        let d = digits.get(i).map_or(0, |b| (b - b'0') as i64);
        ns = ns * 10 + d;
    }
    if digits.len() > 9 {
        let rest = &digits[9..];
        let first = rest[0] - b'0';
        let tail_nonzero = rest[1..].iter().any(|&b| b != b'0');
        let round_up = first > 5 || (first == 5 && (tail_nonzero || ns % 2 == 1));
        if round_up {
            ns += 1;
        }
    }
    secs.checked_mul(NANOS_PER_SEC)?.checked_add(ns)
}

/// Formats nanoseconds as decimal seconds with nine fractional digits.
pub fn format_seconds(t: Nanos) -> String {
    let sign = if t < 0 { "-" } else { "" };
    let a = t.unsigned_abs();
    format!("{sign}{}.{:09}", a / NANOS_PER_SEC as u64, a % NANOS_PER_SEC as u64)
}

fn data_lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String)>> {
    reader.lines().enumerate().filter_map(|(i, line)| match line {
        Ok(l) => {
            let trimmed = l.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                None
            } else {
                Some(Ok((i + 1, trimmed.to_string())))
            }
        }
        Err(e) => Some(Err(Error::parse(i + 1, e.to_string()))),
    })
}

/// Parses `t_sec x y p` lines into events, checking sensor bounds and time order.
pub fn ingest_events<R: BufRead>(reader: R, width: u32, height: u32) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    let mut last_t = i64::MIN;
    for item in data_lines(reader) {
        let (line_no, line) = item?;
        let mut fields = line.split_whitespace();
        let (Some(ts), Some(xs), Some(ys), Some(ps), None) =
            (fields.next(), fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::parse(line_no, "expected `t_sec x y p`"));
        };
        let t = parse_seconds(ts).ok_or_else(|| Error::parse(line_no, format!("bad timestamp `{ts}`")))?;
        let x: u32 = xs.parse().map_err(|_| Error::parse(line_no, format!("bad x `{xs}`")))?;
        let y: u32 = ys.parse().map_err(|_| Error::parse(line_no, format!("bad y `{ys}`")))?;
        if x >= width || y >= height {
            return Err(Error::parse(line_no, format!("pixel ({x}, {y}) outside {width}x{height} sensor")));
        }
        let polarity = match ps {
            "0" => Polarity::Negative,
            "1" => Polarity::Positive,
            _ => return Err(Error::parse(line_no, format!("polarity must be 0 or 1, got `{ps}`"))),
        };
        if t < last_t {
            return Err(Error::NonMonotonicTimestamp { line: line_no });
        }
        last_t = t;
        events.push(Event { t, x: x as u16, y: y as u16, polarity });
    }
    Ok(events)
}

pub fn write_events<W: Write>(mut w: W, events: &[Event]) -> std::io::Result<()> {
    for e in events {
        writeln!(w, "{} {} {} {}", format_seconds(e.t), e.x, e.y, e.polarity.bit())?;
    }
    Ok(())
}

/// Parses `t_sec ax ay az gx gy gz` lines.
pub fn ingest_imu<R: BufRead>(reader: R) -> Result<Vec<ImuSample>> {
    let mut samples = Vec::new();
    let mut last_t = i64::MIN;
    for item in data_lines(reader) {
        let (line_no, line) = item?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(Error::parse(line_no, "expected `t_sec ax ay az gx gy gz`"));
        }
        let t = parse_seconds(fields[0])
            .ok_or_else(|| Error::parse(line_no, format!("bad timestamp `{}`", fields[0])))?;
        let mut v = [0.0f64; 6];
        for (slot, s) in v.iter_mut().zip(&fields[1..]) {
            *slot = s.parse().map_err(|_| Error::parse(line_no, format!("bad number `{s}`")))?;
            if !slot.is_finite() {
                return Err(Error::parse(line_no, "non-finite IMU value"));
            }
        }
        if t < last_t {
            return Err(Error::NonMonotonicTimestamp { line: line_no });
        }
        last_t = t;
        samples.push(ImuSample {
            t,
            accel: Vec3::new(v[0], v[1], v[2]),
            gyro: Vec3::new(v[3], v[4], v[5]),
        });
    }
    Ok(samples)
}

pub fn write_imu<W: Write>(mut w: W, samples: &[ImuSample]) -> std::io::Result<()> {
    for s in samples {
        writeln!(
            w,
            "{} {} {} {} {} {} {}",
            format_seconds(s.t),
            s.accel.x,
            s.accel.y,
            s.accel.z,
            s.gyro.x,
            s.gyro.y,
            s.gyro.z
        )?;
    }
    Ok(())
}

/// One time window of a packetization: bounds plus the index range of its events.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub t0: Nanos,
    pub t1: Nanos,
    pub range: Range<usize>,
}

/// Iterator over overlapping windows `[first_t + k·hop, first_t + k·hop + window)`.
///
/// Stops after the first window that reaches past the last event.
pub struct TimeWindows<'a> {
    events: &'a [Event],
    window: Nanos,
    hop: Nanos,
    next_start: Nanos,
    done: bool,
}

impl<'a> TimeWindows<'a> {
    pub fn new(events: &'a [Event], window: Nanos, overlap: Nanos) -> Result<Self> {
        if window <= 0 || overlap < 0 || overlap >= window {
            return Err(Error::InvalidWindow { window, overlap });
        }
        Ok(Self {
            events,
            window,
            hop: window - overlap,
            next_start: events.first().map_or(0, |e| e.t),
            done: events.is_empty(),
        })
    }
}

impl Iterator for TimeWindows<'_> {
    type Item = Window;

    fn next(&mut self) -> Option<Window> {
        if self.done {
            return None;
        }
        let last_t = self.events[self.events.len() - 1].t;
        let t0 = self.next_start;
        let t1 = t0 + self.window;
        let lo = self.events.partition_point(|e| e.t < t0);
        let hi = self.events.partition_point(|e| e.t < t1);
        self.next_start += self.hop;
        if t1 > last_t || self.next_start > last_t {
            self.done = true;
        }
        Some(Window { t0, t1, range: lo..hi })
    }
}

/// Splits a time-sorted event stream into overlapping fixed-duration packets.
pub fn packetize(events: &[Event], window: Nanos, overlap: Nanos) -> Result<Vec<EventPacket>> {
    Ok(TimeWindows::new(events, window, overlap)?
        .map(|w| EventPacket { t0: w.t0, t1: w.t1, events: events[w.range].to_vec() })
        .collect())
}

/// Fixed-count alternative: packets of `count` events advancing by `count - overlap`.
///
/// Window bounds are the first and last contained timestamps.
pub fn packetize_by_count(events: &[Event], count: usize, overlap: usize) -> Result<Vec<EventPacket>> {
    if count == 0 || overlap >= count {
        return Err(Error::InvalidWindow { window: count as i64, overlap: overlap as i64 });
    }
    let hop = count - overlap;
    let mut packets = Vec::new();
    let mut start = 0;
    while start < events.len() {
        let end = (start + count).min(events.len());
        let slice = &events[start..end];
        packets.push(EventPacket { t0: slice[0].t, t1: slice[slice.len() - 1].t, events: slice.to_vec() });
        if end == events.len() {
            break;
        }
        start += hop;
    }
    Ok(packets)
}

/// Integrates gyro readings over `[ta, tb]` with zero-order hold between samples.
///
/// Requires a sample at or before `ta` and one at or after `tb`.
pub fn integrate_gyro(imu: &[ImuSample], ta: Nanos, tb: Nanos) -> Result<Rotation> {
    let covered = imu.first().is_some_and(|s| s.t <= ta) && imu.last().is_some_and(|s| s.t >= tb);
    if !covered || tb < ta {
        return Err(Error::ImuGap { t0: ta, t1: tb });
    }
    let mut idx = imu.partition_point(|s| s.t <= ta) - 1;
    let mut rot = Rotation::identity();
    let mut t = ta;
    while t < tb {
        let seg_end = imu.get(idx + 1).map_or(tb, |s| s.t.min(tb));
        let dt = (seg_end - t) as f64 * 1e-9;
        if dt > 0.0 {
            rot = rot * Rotation::exp(&(imu[idx].gyro * dt));
        }
        t = seg_end;
        idx += 1;
    }
    Ok(rot)
}

/// Attaches the IMU samples of the packet window and the gyro rotation prior.
pub fn sync_imu(packet: EventPacket, imu: &[ImuSample]) -> Result<AugmentedPacket> {
    let rotation_prior = integrate_gyro(imu, packet.t0, packet.t1)?;
    let lo = imu.partition_point(|s| s.t < packet.t0);
    let hi = imu.partition_point(|s| s.t <= packet.t1);
    Ok(AugmentedPacket { imu: imu[lo..hi].to_vec(), packet, rotation_prior })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MS: i64 = 1_000_000;

    fn ev(t: i64) -> Event {
        Event::new(t, 0, 0, Polarity::Positive)
    }

    #[test]
    fn parses_a_single_line() {
        let got = ingest_events("0.123456 45 67 1\n".as_bytes(), 346, 260).unwrap();
        assert_eq!(got, vec![Event::new(123_456_000, 45, 67, Polarity::Positive)]);
        let got = ingest_events("1.5 0 0 0".as_bytes(), 346, 260).unwrap();
        assert_eq!(got[0].polarity, Polarity::Negative);
        assert_eq!(got[0].t, 1_500_000_000);
    }

    #[test]
    fn rejects_out_of_bounds_and_bad_lines() {
        let err = ingest_events("0.1 500 10 1".as_bytes(), 346, 260).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = ingest_events("0.1 1 1 1\n0.2 1 1 2\n".as_bytes(), 346, 260).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = ingest_events("0.1 1 1".as_bytes(), 346, 260).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn rejects_backwards_time() {
        let err = ingest_events("0.2 1 1 1\n0.2 1 1 1\n0.1 1 1 1\n".as_bytes(), 346, 260).unwrap_err();
        assert!(matches!(err, Error::NonMonotonicTimestamp { line: 3 }));
    }

    #[test]
    fn empty_input_gives_no_events() {
        assert!(ingest_events("".as_bytes(), 346, 260).unwrap().is_empty());
        assert!(ingest_events("\n\n".as_bytes(), 346, 260).unwrap().is_empty());
    }

    #[test]
    fn seconds_round_half_even() {
        assert_eq!(parse_seconds("0.0000000005"), Some(0));
        assert_eq!(parse_seconds("0.0000000015"), Some(2));
        assert_eq!(parse_seconds("0.00000000150001"), Some(2));
        assert_eq!(parse_seconds("0.0000000025"), Some(2));
        assert_eq!(parse_seconds("0.0000000026"), Some(3));
        assert_eq!(parse_seconds("12"), Some(12 * NANOS_PER_SEC));
        assert_eq!(parse_seconds(".5"), Some(500_000_000));
        assert_eq!(parse_seconds("1e-3"), Some(1_000_000));
        assert_eq!(parse_seconds("abc"), None);
        assert_eq!(parse_seconds("-1"), None);
    }

    #[test]
    fn packet_example() {
        let events: Vec<_> = [0, 10, 20, 30].iter().map(|&t| ev(t * MS)).collect();
        let packets = packetize(&events, 20 * MS, 10 * MS).unwrap();
        let summary: Vec<(i64, i64, Vec<i64>)> = packets
            .iter()
            .map(|p| (p.t0 / MS, p.t1 / MS, p.events.iter().map(|e| e.t / MS).collect()))
            .collect();
        assert_eq!(
            summary,
            vec![(0, 20, vec![0, 10]), (10, 30, vec![10, 20]), (20, 40, vec![20, 30])]
        );
    }

    #[test]
    fn zero_overlap_partitions() {
        let events: Vec<_> = (0..97).map(|i| ev(i * 3 * MS)).collect();
        let packets = packetize(&events, 20 * MS, 0).unwrap();
        let total: usize = packets.iter().map(|p| p.len()).sum();
        assert_eq!(total, events.len());
    }

    #[test]
    fn no_events_no_packets() {
        assert!(packetize(&[], 20 * MS, 10 * MS).unwrap().is_empty());
    }

    #[test]
    fn invalid_window() {
        assert!(matches!(packetize(&[ev(0)], 10, 10), Err(Error::InvalidWindow { .. })));
        assert!(matches!(packetize_by_count(&[ev(0)], 4, 4), Err(Error::InvalidWindow { .. })));
    }

    #[test]
    fn count_packets() {
        let events: Vec<_> = (0..10).map(|i| ev(i * MS)).collect();
        let packets = packetize_by_count(&events, 4, 2).unwrap();
        let sizes: Vec<usize> = packets.iter().map(|p| p.len()).collect();
        assert_eq!(sizes, vec![4, 4, 4, 4]);
        assert_eq!(packets[3].t0, 6 * MS);
        assert_eq!(packets[3].t1, 9 * MS);
    }

    proptest! {
        #[test]
        fn packet_coverage_and_multiplicity(
            mut ts in proptest::collection::vec(0i64..1_000_000, 1..200),
            window in 1i64..50_000,
            overlap_frac in 0.0f64..0.95,
        ) {
            ts.sort();
            let events: Vec<_> = ts.iter().map(|&t| ev(t)).collect();
            let overlap = ((window as f64) * overlap_frac) as i64;
            prop_assume!(overlap < window);
            let packets = packetize(&events, window, overlap).unwrap();
            let hop = window - overlap;
            let max_mult = (window + hop - 1) / hop;
            // union covers [first, last]
            prop_assert_eq!(packets[0].t0, ts[0]);
            prop_assert!(packets.last().unwrap().t1 > *ts.last().unwrap());
            for w in packets.windows(2) {
                prop_assert!(w[1].t0 <= w[0].t1);
            }
            for (i, e) in events.iter().enumerate() {
                let expected = packets.iter().filter(|p| p.t0 <= e.t && e.t < p.t1).count();
                // count occurrences of this index among packets, using multiplicity of equal events
                let dup = events.iter().filter(|o| o.t == e.t).count();
                let seen = packets.iter().map(|p| p.events.iter().filter(|o| o.t == e.t).count()).sum::<usize>();
                prop_assert_eq!(seen, expected * dup);
                prop_assert!(expected >= 1 && expected as i64 <= max_mult, "event {} in {} packets", i, expected);
            }
            for p in &packets {
                prop_assert!(p.events.iter().all(|e| p.t0 <= e.t && e.t <= p.t1));
            }
        }

        #[test]
        fn serialization_roundtrip(
            mut raw in proptest::collection::vec((0i64..50_000_000_000, 0u16..346, 0u16..260, proptest::bool::ANY), 0..100)
        ) {
            raw.sort_by_key(|r| r.0);
            let events: Vec<_> = raw
                .iter()
                .map(|&(t, x, y, p)| Event::new(t, x, y, if p { Polarity::Positive } else { Polarity::Negative }))
                .collect();
            let mut buf = Vec::new();
            write_events(&mut buf, &events).unwrap();
            let back = ingest_events(buf.as_slice(), 346, 260).unwrap();
            prop_assert_eq!(&back, &events);
            let mut again = Vec::new();
            write_events(&mut again, &back).unwrap();
            prop_assert_eq!(buf, again);
        }
    }

    fn imu_at(t: i64, gyro: Vec3) -> ImuSample {
        ImuSample { t, accel: Vec3::zeros(), gyro }
    }

    #[test]
    fn constant_yaw_rate() {
        let imu: Vec<_> = (0..=10).map(|i| imu_at(i * 100 * MS, Vec3::new(0.0, 0.0, 1.0))).collect();
        let packet = EventPacket { t0: 200 * MS, t1: 700 * MS, events: vec![] };
        let ap = sync_imu(packet, &imu).unwrap();
        let phi = ap.rotation_prior.log();
        assert!((phi - Vec3::new(0.0, 0.0, 0.5)).norm() < 1e-6);
        assert_eq!(ap.imu.len(), 6);
    }

    #[test]
    fn zero_gyro_gives_identity() {
        let imu: Vec<_> = (0..=10).map(|i| imu_at(i * MS, Vec3::zeros())).collect();
        let r = integrate_gyro(&imu, 2 * MS, 9 * MS).unwrap();
        assert_eq!(r, Rotation::identity());
    }

    #[test]
    fn imu_gap_detected() {
        let imu: Vec<_> = (1..=10).map(|i| imu_at(i * MS, Vec3::zeros())).collect();
        assert!(matches!(integrate_gyro(&imu, 0, 5 * MS), Err(Error::ImuGap { .. })));
        assert!(matches!(integrate_gyro(&imu, 2 * MS, 11 * MS), Err(Error::ImuGap { .. })));
    }

    /// Fine-step (1 µs) integration of an arbitrary rate signal.
    fn fine_step(rate: impl Fn(i64) -> Vec3, ta: i64, tb: i64) -> Rotation {
        let step = 1_000;
        let mut r = Rotation::identity();
        let mut t = ta;
        while t < tb {
            let dt = step.min(tb - t);
            r = r * Rotation::exp(&(rate(t) * (dt as f64 * 1e-9)));
            t += dt;
        }
        r
    }

    #[test]
    fn piecewise_constant_matches_fine_step() {
        let a = Vec3::new(0.3, -0.5, 1.2);
        let b = Vec3::new(-0.8, 0.4, 0.1);
        let imu = vec![imu_at(0, a), imu_at(13 * MS, b), imu_at(40 * MS, b)];
        let zoh = |t: i64| if t < 13 * MS { a } else { b };
        let oracle = fine_step(zoh, 2 * MS, 35 * MS);
        let got = integrate_gyro(&imu, 2 * MS, 35 * MS).unwrap();
        assert!(got.angle_to(&oracle) < 1e-6);
    }

    #[test]
    fn error_halves_as_rate_doubles() {
        let signal = |t: i64| {
            let s = t as f64 * 1e-9;
            Vec3::new((3.0 * s).sin(), 0.5 * (2.0 * s).cos(), 0.8 + 0.3 * (5.0 * s).sin())
        };
        let truth = fine_step(signal, 0, NANOS_PER_SEC);
        let err_at = |hz: i64| {
            let dt = NANOS_PER_SEC / hz;
            let imu: Vec<_> = (0..=hz).map(|k| imu_at(k * dt, signal(k * dt))).collect();
            integrate_gyro(&imu, 0, NANOS_PER_SEC).unwrap().angle_to(&truth)
        };
        for hz in [100, 200, 400] {
            let ratio = err_at(hz) / err_at(2 * hz);
            assert!((1.7..2.3).contains(&ratio), "rate {hz}: ratio {ratio}");
        }
    }
}
