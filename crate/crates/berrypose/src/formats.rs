//! On-disk JSON schemas and their validation.
//!
//! A dataset is a directory of per-sample subdirectories plus a manifest:
//!
//! ```text
//! dataset/
//!   manifest.json          split assignment, mean size over the train split
//!   sample_00000/
//!     rgb.png              8-bit RGB
//!     depth.png            16-bit grayscale, millimeters, 0 = no reading
//!     mask.png             16-bit instance ids, 0 = background
//!     ann.json             intrinsics + per-instance pose/size/maturity
//!   ...
//! ```
//!
//! All floating-point values are serialized at full double precision.
//! Poses are camera-frame; quaternions are `[w, x, y, z]` with `w >= 0`;
//! sizes are `[h, w, l]` meters.

use berrypose_core::geometry::{CameraIntrinsics, OrientedBox3D, Pose, Rotation, Size3D};
use berrypose_core::math::Vec3;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {field}: {reason}")]
    Invalid {
        path: String,
        field: String,
        reason: String,
    },
}

impl FormatError {
    pub fn invalid(path: &Path, field: impl Into<String>, reason: impl Into<String>) -> Self {
        FormatError::Invalid {
            path: path.display().to_string(),
            field: field.into(),
            reason: reason.into(),
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> FormatError {
    FormatError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IntrinsicsDto {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl From<&CameraIntrinsics> for IntrinsicsDto {
    fn from(k: &CameraIntrinsics) -> Self {
        IntrinsicsDto { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy, width: k.width, height: k.height }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InstanceDto {
    /// Camera-frame translation, meters.
    pub translation: [f64; 3],
    /// Unit quaternion, w first, canonicalized to w >= 0.
    pub rotation_wxyz: [f64; 4],
    /// Height (symmetry axis), width, length in meters.
    pub size_hwl: [f64; 3],
    /// Ripeness in [0, 1]; annotated but not predicted.
    pub maturity: f64,
    /// Fraction of this instance's unoccluded silhouette that survived
    /// occlusion; 0 marks a fully hidden instance.
    pub visible_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotationFile {
    pub intrinsics: IntrinsicsDto,
    pub instances: Vec<InstanceDto>,
}

/// A validated annotation: the box, maturity and visible fraction.
#[derive(Debug, Clone)]
pub struct ValidatedAnnotations {
    pub intrinsics: CameraIntrinsics,
    pub instances: Vec<(OrientedBox3D, f64, f64)>,
}

impl AnnotationFile {
    pub fn from_instances(
        k: &CameraIntrinsics,
        instances: impl IntoIterator<Item = (OrientedBox3D, f64, f64)>,
    ) -> AnnotationFile {
        AnnotationFile {
            intrinsics: k.into(),
            instances: instances
                .into_iter()
                .map(|(b, maturity, visible)| {
                    let (w, x, y, z) = b.pose.rotation.wxyz();
                    InstanceDto {
                        translation: [
                            b.pose.translation.x,
                            b.pose.translation.y,
                            b.pose.translation.z,
                        ],
                        rotation_wxyz: [w, x, y, z],
                        size_hwl: [b.size.h, b.size.w, b.size.l],
                        maturity,
                        visible_fraction: visible,
                    }
                })
                .collect(),
        }
    }

    /// Schema validation with field-path errors: positive sizes, quaternion
    /// norm within 1e-3 of unit, positive depth for annotated instances.
    pub fn validate(&self, path: &Path) -> Result<ValidatedAnnotations, FormatError> {
        let k = CameraIntrinsics::new(
            self.intrinsics.fx,
            self.intrinsics.fy,
            self.intrinsics.cx,
            self.intrinsics.cy,
            self.intrinsics.width,
            self.intrinsics.height,
        )
        .map_err(|e| FormatError::invalid(path, "intrinsics", e.to_string()))?;

        let mut instances = Vec::with_capacity(self.instances.len());
        for (i, inst) in self.instances.iter().enumerate() {
            let [h, w, l] = inst.size_hwl;
            let size = Size3D::new(h, w, l).map_err(|e| {
                FormatError::invalid(path, format!("instances[{i}].size_hwl"), e.to_string())
            })?;
            let [qw, qx, qy, qz] = inst.rotation_wxyz;
            let norm = (qw * qw + qx * qx + qy * qy + qz * qz).sqrt();
            if (norm - 1.0).abs() > 1e-3 {
                return Err(FormatError::invalid(
                    path,
                    format!("instances[{i}].rotation_wxyz"),
                    format!("quaternion norm {norm} is off unit by more than 1e-3"),
                ));
            }
            let rotation = Rotation::from_wxyz(qw, qx, qy, qz).map_err(|e| {
                FormatError::invalid(path, format!("instances[{i}].rotation_wxyz"), e.to_string())
            })?;
            let t = inst.translation;
            if t[2] <= 0.0 {
                return Err(FormatError::invalid(
                    path,
                    format!("instances[{i}].translation"),
                    "annotated instance must lie in front of the camera (z > 0)",
                ));
            }
            if !(0.0..=1.0).contains(&inst.visible_fraction) {
                return Err(FormatError::invalid(
                    path,
                    format!("instances[{i}].visible_fraction"),
                    "must lie in [0, 1]",
                ));
            }
            instances.push((
                OrientedBox3D::new(
                    Pose::new(rotation, Vec3::new(t[0], t[1], t[2])),
                    size,
                ),
                inst.maturity,
                inst.visible_fraction,
            ));
        }
        Ok(ValidatedAnnotations { intrinsics: k, instances })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub dir: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    pub seed: u64,
    pub count: usize,
    pub image_width: u32,
    pub image_height: u32,
    /// Arithmetic mean of instance sizes over the train split, `[h, w, l]`.
    pub mean_size_hwl: [f64; 3],
    pub samples: Vec<SampleEntry>,
}

impl ManifestFile {
    pub fn validate(&self, path: &Path) -> Result<(), FormatError> {
        if self.samples.len() != self.count {
            return Err(FormatError::invalid(
                path,
                "count",
                format!("{} entries but count = {}", self.samples.len(), self.count),
            ));
        }
        if self.mean_size_hwl.iter().any(|&v| v <= 0.0) {
            return Err(FormatError::invalid(path, "mean_size_hwl", "must be positive"));
        }
        Ok(())
    }

    pub fn split_count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseDto {
    pub rotation_wxyz: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseDto {
    fn from(p: &Pose) -> Self {
        let (w, x, y, z) = p.rotation.wxyz();
        PoseDto {
            rotation_wxyz: [w, x, y, z],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl PoseDto {
    pub fn to_pose(&self, path: &Path, field: &str) -> Result<Pose, FormatError> {
        let [w, x, y, z] = self.rotation_wxyz;
        let rotation = Rotation::from_wxyz(w, x, y, z)
            .map_err(|e| FormatError::invalid(path, field, e.to_string()))?;
        Ok(Pose::new(
            rotation,
            Vec3::new(self.translation[0], self.translation[1], self.translation[2]),
        ))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionDto {
    /// Nine image keypoints, center first, pixels.
    pub keypoints: [[f64; 2]; 9],
    pub size_hwl: [f64; 3],
    pub confidence: f64,
    /// Present when PnP succeeded.
    pub pose: Option<PoseDto>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub image: String,
    pub detections: Vec<DetectionDto>,
}

impl DetectionsFile {
    pub fn validate(&self, path: &Path) -> Result<(), FormatError> {
        for (i, d) in self.detections.iter().enumerate() {
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(FormatError::invalid(
                    path,
                    format!("detections[{i}].confidence"),
                    "must lie in [0, 1]",
                ));
            }
            if d.size_hwl.iter().any(|&v| v <= 0.0) {
                return Err(FormatError::invalid(
                    path,
                    format!("detections[{i}].size_hwl"),
                    "must be positive",
                ));
            }
            if let Some(p) = &d.pose {
                p.to_pose(path, &format!("detections[{i}].pose"))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApEntry {
    pub threshold: String,
    /// Percent in [0, 100]; absent when the dataset has no ground truth.
    pub ap_percent: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReportFile {
    /// AP of symmetric 3D IoU at thresholds 0.5 / 0.6 / 0.7 / 0.8.
    pub ap_iou3d: Vec<ApEntry>,
    /// AP of pose error at (2cm,20deg) / (2cm,10deg) / (1cm,20deg) / (1cm,10deg).
    pub ap_pose: Vec<ApEntry>,
    pub mean_latency_ms: f64,
    pub fps: f64,
    pub images: usize,
    pub detections: usize,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| FormatError::Json {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| FormatError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}
