//! Loading a dataset directory: `events.txt`, `imu.txt`, `groundtruth.txt`,
//! `calib.txt` and an optional `depth/` folder.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluation::{read_trajectory, TrajectoryFile};
use crate::event_stream::{ingest_events, ingest_imu, Event, ImuSample};
use crate::geometry::Camera;
use crate::simulator::{CALIB_FILE, DEPTH_DIR, EVENTS_FILE, GROUNDTRUTH_FILE, IMU_FILE};

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub camera: Camera,
    pub events: Vec<Event>,
    /// Empty when the dataset has no `imu.txt`.
    pub imu: Vec<ImuSample>,
    pub groundtruth: Option<TrajectoryFile>,
}

impl Dataset {
    pub fn depth_dir(&self) -> PathBuf {
        self.dir.join(DEPTH_DIR)
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

/// Reads `calib.txt`. The sensor size comes from a `# sensor W H` comment
/// when present, else the default 346×260.
pub fn read_calib(path: impl AsRef<Path>) -> Result<Camera> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let default = Camera::default();
    let (mut w, mut h) = (default.width, default.height);
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.trim().strip_prefix('#') else { continue };
        let f: Vec<&str> = rest.split_whitespace().collect();
        if f.first() == Some(&"sensor") {
            let parse = |s: Option<&&str>| s.and_then(|s| s.parse::<u32>().ok());
            match (parse(f.get(1)), parse(f.get(2))) {
                (Some(a), Some(b)) => (w, h) = (a, b),
                _ => return Err(Error::parse(i + 1, "expected `# sensor W H`").in_file(path)),
            }
        }
    }
    Camera::from_calib_str(&text, w, h).map_err(|e| e.in_file(path))
}

pub fn read_events_file(path: impl AsRef<Path>, cam: &Camera) -> Result<Vec<Event>> {
    let path = path.as_ref();
    ingest_events(open(path)?, cam.width, cam.height).map_err(|e| e.in_file(path))
}

pub fn read_imu_file(path: impl AsRef<Path>) -> Result<Vec<ImuSample>> {
    let path = path.as_ref();
    ingest_imu(open(path)?).map_err(|e| e.in_file(path))
}

pub fn read_trajectory_file(path: impl AsRef<Path>) -> Result<TrajectoryFile> {
    let path = path.as_ref();
    read_trajectory(open(path)?).map_err(|e| e.in_file(path))
}

/// Loads a dataset directory. `events.txt` and `calib.txt` are required.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref().to_path_buf();
    let camera = read_calib(dir.join(CALIB_FILE))?;
    let events = read_events_file(dir.join(EVENTS_FILE), &camera)?;
    let imu_path = dir.join(IMU_FILE);
    let imu = if imu_path.exists() { read_imu_file(&imu_path)? } else { Vec::new() };
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let groundtruth = if gt_path.exists() { Some(read_trajectory_file(&gt_path)?) } else { None };
    Ok(Dataset { dir, camera, events, imu, groundtruth })
}
