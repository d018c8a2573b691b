//! `cameras.json`: an array of
//! `{id, width, height, fx, fy, cx, cy, rotation: [9, row-major], translation: [3], z_near?, z_far?}`
//! with world-to-camera extrinsics `x_cam = R x + T`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Camera, Mat3, Vec3, DEFAULT_Z_FAR, DEFAULT_Z_NEAR};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum CameraId {
    Text(String),
    Number(i64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    id: CameraId,
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z_near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z_far: Option<f64>,
}

impl CameraRecord {
    fn into_camera(self) -> Camera {
        Camera {
            id: match self.id {
                CameraId::Text(s) => s,
                CameraId::Number(n) => n.to_string(),
            },
            rotation: Mat3::from_row_slice(&self.rotation),
            translation: Vec3::from(self.translation),
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            z_near: self.z_near.unwrap_or(DEFAULT_Z_NEAR),
            z_far: self.z_far.unwrap_or(DEFAULT_Z_FAR),
        }
    }

    fn from_camera(c: &Camera) -> Self {
        let r = c.rotation;
        CameraRecord {
            id: CameraId::Text(c.id.clone()),
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: std::array::from_fn(|i| r[(i / 3, i % 3)]),
            translation: [c.translation.x, c.translation.y, c.translation.z],
            z_near: Some(c.z_near),
            z_far: Some(c.z_far),
        }
    }
}

pub fn parse_cameras(text: &str) -> Result<Vec<Camera>> {
    let records: Vec<CameraRecord> =
        serde_json::from_str(text).map_err(|e| Error::format(format!("camera JSON: {e}")))?;
    let cams: Vec<Camera> = records.into_iter().map(CameraRecord::into_camera).collect();
    for (i, c) in cams.iter().enumerate() {
        c.validate()?;
        if cams[..i].iter().any(|o| o.id == c.id) {
            return Err(Error::InvalidCamera {
                id: c.id.clone(),
                reason: "duplicate id".into(),
            });
        }
    }
    Ok(cams)
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cameras(&text).map_err(|e| super::ply::with_path(e, path))
}

pub fn encode_cameras(cams: &[Camera]) -> String {
    let records: Vec<CameraRecord> = cams.iter().map(CameraRecord::from_camera).collect();
    serde_json::to_string_pretty(&records).expect("camera records serialize")
}

pub fn save_cameras(cams: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_cameras(cams) + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const IDENTITY: &str = r#"[{"id": 0, "width": 64, "height": 48, "fx": 50, "fy": 50, "cx": 32, "cy": 24,
        "rotation": [1,0,0, 0,1,0, 0,0,1], "translation": [0,0,0]}]"#;

    #[test]
    fn identity_camera_looks_down_z() {
        let cams = parse_cameras(IDENTITY).unwrap();
        let c = &cams[0];
        assert_eq!(c.id, "0");
        assert_eq!(c.center(), Vec3::zeros());
        assert_eq!(c.forward(), Vec3::z());
        assert_eq!((c.z_near, c.z_far), (DEFAULT_Z_NEAR, DEFAULT_Z_FAR));
        assert_eq!(c.project(&Vec3::new(0.0, 0.0, 1.0)), (32.0, 24.0));
    }

    #[test]
    fn reflection_and_skew_rejected() {
        let flipped = IDENTITY.replace("0,0,1]", "0,0,-1]");
        assert!(matches!(parse_cameras(&flipped), Err(Error::InvalidCamera { .. })));
        let skew = IDENTITY.replace("[1,0,0,", "[1,0.001,0,");
        match parse_cameras(&skew) {
            Err(Error::InvalidCamera { id, .. }) => assert_eq!(id, "0"),
            other => panic!("{other:?}"),
        }
        let slight = IDENTITY.replace("[1,0,0,", "[1,0.00001,0,");
        assert!(parse_cameras(&slight).is_ok());
        assert!(parse_cameras(&IDENTITY.replace("\"fx\": 50", "\"fx\": -50")).is_err());
        assert!(parse_cameras("{").is_err());
    }

    #[test]
    fn round_trip_preserves_fields() {
        let mut cam = Camera::look_at(Vec3::new(0.3, -1.2, 4.0), Vec3::new(0.1, 0.2, 0.0), Vec3::z(), 321.5, 300.25, 640, 480);
        cam.id = "view_7".into();
        cam.cx = 319.7;
        cam.z_far = 55.0;
        let back = parse_cameras(&encode_cameras(std::slice::from_ref(&cam))).unwrap();
        let b = &back[0];
        assert_eq!(b.id, cam.id);
        assert!((b.rotation - cam.rotation).abs().max() < 1e-9);
        assert!((b.translation - cam.translation).abs().max() < 1e-9);
        for (x, y) in [(b.fx, cam.fx), (b.fy, cam.fy), (b.cx, cam.cx), (b.cy, cam.cy), (b.z_near, cam.z_near), (b.z_far, cam.z_far)] {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!((b.width, b.height), (640, 480));
    }
}
