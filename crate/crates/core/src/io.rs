//! KITTI scans, poses and calibration, trajectory output and PLY map export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{Point, Pose, Scan};
use crate::mapping::VoxelIntensityMap;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("scan of {0} bytes is not a whole number of 16-byte records")]
    MalformedScan(usize),
    #[error("pose line {line}: {message}")]
    MalformedPoseLine { line: usize, message: String },
    #[error("calibration file has no `Tr` entry")]
    MissingCalibration,
    #[error("nothing to write: empty trajectory")]
    EmptyTrajectory,
    #[error("malformed PLY: {0}")]
    MalformedPly(String),
    #[error("no scans found in {0}")]
    NoScans(PathBuf),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Decoded scan plus the number of records dropped for non-finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedScan {
    pub scan: Scan,
    pub dropped: usize,
}

/// Decodes little-endian `(x, y, z, intensity)` f32 records.
pub fn read_kitti_scan(bytes: &[u8]) -> Result<DecodedScan, IoError> {
    if bytes.len() % 16 != 0 {
        return Err(IoError::MalformedScan(bytes.len()));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut dropped = 0;
    for rec in bytes.chunks_exact(16) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        let (x, y, z, i) = (f(0), f(1), f(2), f(3));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && i.is_finite()) {
            dropped += 1;
            continue;
        }
        points.push(Point::new(x, y, z, i.max(0.0)));
    }
    Ok(DecodedScan {
        scan: Scan::new(points, 0.0, 0),
        dropped,
    })
}

pub fn write_kitti_scan(scan: &Scan) -> Vec<u8> {
    let mut out = Vec::with_capacity(scan.len() * 16);
    for p in &scan.points {
        for v in [p.position.x, p.position.y, p.position.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn parse_3x4(values: &[f64]) -> Result<Pose, String> {
    let r = Matrix3::new(
        values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9], values[10],
    );
    let t = Vector3::new(values[3], values[7], values[11]);
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err >= 1e-3 || r.determinant() <= 0.0 {
        return Err(format!("rotation is not orthonormal (error {err:.2e})"));
    }
    Ok(Pose::from_rotation_matrix(&r, t))
}

/// One pose per non-empty line, 12 numbers of a row-major 3×4 matrix.
/// Rotations off by less than 1e-3 are re-orthonormalized.
pub fn read_kitti_poses(text: &str) -> Result<Vec<Pose>, IoError> {
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| IoError::MalformedPoseLine { line: n + 1, message };
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| err(format!("`{v}` is not a number"))))
            .collect::<Result<_, _>>()?;
        if values.len() != 12 {
            return Err(err(format!("expected 12 values, found {}", values.len())));
        }
        poses.push(parse_3x4(&values).map_err(err)?);
    }
    Ok(poses)
}

fn format_3x4(p: &Pose) -> String {
    let m = p.to_homogeneous();
    let mut s = String::new();
    for r in 0..3 {
        for c in 0..4 {
            if !s.is_empty() {
                s.push(' ');
            }
            let _ = write!(s, "{}", m[(r, c)]);
        }
    }
    s
}

pub fn write_trajectory(poses: &[Pose]) -> Result<String, IoError> {
    if poses.is_empty() {
        return Err(IoError::EmptyTrajectory);
    }
    let mut out = String::new();
    for p in poses {
        out.push_str(&format_3x4(p));
        out.push('\n');
    }
    Ok(out)
}

/// The `Tr` (LiDAR to camera) transform of a KITTI `calib.txt`.
pub fn read_calib_tr(text: &str) -> Result<Pose, IoError> {
    for (n, line) in text.lines().enumerate() {
        let Some(rest) = line.trim().strip_prefix("Tr:") else {
            continue;
        };
        let values: Vec<f64> = rest
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| IoError::MalformedPoseLine {
                line: n + 1,
                message: "bad number in Tr".into(),
            })?;
        if values.len() != 12 {
            return Err(IoError::MalformedPoseLine {
                line: n + 1,
                message: format!("Tr needs 12 values, found {}", values.len()),
            });
        }
        return parse_3x4(&values).map_err(|message| IoError::MalformedPoseLine { line: n + 1, message });
    }
    Err(IoError::MissingCalibration)
}

/// Converts camera-frame ground truth into LiDAR-frame poses:
/// `Tr⁻¹ T_cam Tr`.
pub fn camera_to_lidar(poses: &[Pose], tr: &Pose) -> Vec<Pose> {
    let tr_inv = tr.inverse();
    poses.iter().map(|p| tr_inv * *p * *tr).collect()
}

/// ASCII PLY with one vertex per observed cell centre.
pub fn export_ply(map: &VoxelIntensityMap) -> String {
    let cells = map.sorted_cells();
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty float intensity\nend_header\n",
        cells.len()
    );
    for (idx, cell) in cells {
        let c = map.cell_center(&idx);
        let _ = writeln!(out, "{} {} {} {}", c.x, c.y, c.z, cell.mean);
    }
    out
}

/// Reads the vertices of an ASCII PLY written by [`export_ply`].
pub fn import_ply(text: &str) -> Result<Vec<(Vector3<f64>, f64)>, IoError> {
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(IoError::MalformedPly("missing magic".into()));
    }
    let mut count = None;
    for line in lines.by_ref() {
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = n.trim().parse::<usize>().ok();
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| IoError::MalformedPly("no vertex count".into()))?;
    let vertices: Vec<(Vector3<f64>, f64)> = lines
        .take(count)
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().filter_map(|x| x.parse().ok()).collect();
            (v.len() == 4)
                .then(|| (Vector3::new(v[0], v[1], v[2]), v[3]))
                .ok_or_else(|| IoError::MalformedPly(format!("bad vertex `{l}`")))
        })
        .collect::<Result<_, _>>()?;
    if vertices.len() != count {
        return Err(IoError::MalformedPly("fewer vertices than declared".into()));
    }
    Ok(vertices)
}

/// Scan files and optional ground truth of one sequence directory.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSource {
    pub scan_paths: Vec<PathBuf>,
    /// LiDAR-frame ground truth, if a pose file was found.
    pub ground_truth: Option<Vec<Pose>>,
    pub sensor_to_body: Pose,
}

impl SequenceSource {
    /// Reads scan `k` and stamps it with its frame index and `k · dt`.
    pub fn load_scan(&self, k: usize, dt: f64) -> Result<DecodedScan, IoError> {
        let path = &self.scan_paths[k];
        let bytes = fs::read(path).map_err(file_err(path))?;
        let mut decoded = read_kitti_scan(&bytes)?;
        decoded.scan.frame_index = k;
        decoded.scan.timestamp = k as f64 * dt;
        Ok(decoded)
    }
}

/// Opens a sequence laid out as `<dir>/velodyne/*.bin` (or `<dir>/*.bin`),
/// with optional `<dir>/poses.txt` and `<dir>/calib.txt`. `ground_truth`
/// overrides the pose file location. Camera-frame poses are converted with the
/// calibration's `Tr` when present.
pub fn open_sequence(dir: &Path, ground_truth: Option<&Path>) -> Result<SequenceSource, IoError> {
    let scan_dir = if dir.join("velodyne").is_dir() {
        dir.join("velodyne")
    } else {
        dir.to_path_buf()
    };
    let mut scan_paths: Vec<PathBuf> = fs::read_dir(&scan_dir)
        .map_err(file_err(&scan_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    scan_paths.sort();
    if scan_paths.is_empty() {
        return Err(IoError::NoScans(dir.to_path_buf()));
    }
    let calib = dir.join("calib.txt");
    let tr = if calib.is_file() {
        Some(read_calib_tr(&fs::read_to_string(&calib).map_err(file_err(&calib))?)?)
    } else {
        None
    };
    let pose_path = ground_truth
        .map(Path::to_path_buf)
        .or_else(|| Some(dir.join("poses.txt")).filter(|p| p.is_file()));
    let ground_truth = match pose_path {
        Some(p) => {
            let poses = read_kitti_poses(&fs::read_to_string(&p).map_err(file_err(&p))?)?;
            Some(match &tr {
                Some(tr) => camera_to_lidar(&poses, tr),
                None => poses,
            })
        }
        None => None,
    };
    Ok(SequenceSource {
        scan_paths,
        ground_truth,
        sensor_to_body: tr.unwrap_or_default(),
    })
}

/// Writes scans as `velodyne/NNNNNN.bin` and the poses as `poses.txt`.
pub fn write_sequence(dir: &Path, scans: &[Scan], poses: &[Pose]) -> Result<(), IoError> {
    let vel = dir.join("velodyne");
    fs::create_dir_all(&vel).map_err(file_err(&vel))?;
    for (k, scan) in scans.iter().enumerate() {
        let path = vel.join(format!("{k:06}.bin"));
        fs::write(&path, write_kitti_scan(scan)).map_err(file_err(&path))?;
    }
    let path = dir.join("poses.txt");
    fs::write(&path, write_trajectory(poses)?).map_err(file_err(&path))?;
    Ok(())
}
