//! Browser bindings: synthesize a virtual IMU track, inspect a placement
//! on the body, and measure the angle between two rotations.

use std::sync::OnceLock;

use imucoco::body_model::{build_canonical_body, BodyConfig, BodyModel, JOINT_NAMES};
use imucoco::eval::rotation_angle_deg;
use imucoco::math::{Quat, Vec3};
use imucoco::matchmaker::nearest_vertex;
use imucoco::motion_gen::{generate_motion, MotionKind};
use imucoco::net::standardize_coordinate;
use imucoco::vimu_synth::{encode_channels, synthesize_mesh_imu, CHANNELS};
use wasm_bindgen::prelude::*;

fn body() -> &'static BodyModel {
    static BODY: OnceLock<BodyModel> = OnceLock::new();
    BODY.get_or_init(|| build_canonical_body(&BodyConfig::default()).expect("default body config is valid"))
}

/// Flattened `T × 9` channels of a mesh IMU at `vertex` for a generated motion.
pub fn track_channels(kind: &str, seed: u64, seconds: f64, vertex: usize) -> Result<Vec<f64>, String> {
    let kind: MotionKind = kind.parse().map_err(|e: imucoco::Error| e.to_string())?;
    let motion = generate_motion(seed, seconds, kind).map_err(|e| e.to_string())?;
    let track = synthesize_mesh_imu(body(), &motion, vertex).map_err(|e| e.to_string())?;
    Ok(encode_channels(&track))
}

/// Nearest vertex, its region and the coordinate relative to that region's joint.
pub fn describe_placement(x: f64, y: f64, z: f64) -> Result<String, String> {
    let b = body();
    let r = Vec3::new(x, y, z);
    let v = nearest_vertex(b, r).map_err(|e| e.to_string())?;
    let region = b.mesh.region[v];
    let st = standardize_coordinate(r, region, b);
    Ok(format!(
        "vertex {v}, region {} ({region}), standardized ({:.3}, {:.3}, {:.3})",
        JOINT_NAMES[region],
        st.x(),
        st.y(),
        st.z()
    ))
}

/// Geodesic angle in degrees between two `w x y z` quaternions.
pub fn quaternion_angle_deg(a: &[f64], b: &[f64]) -> Result<f64, String> {
    let quat = |q: &[f64]| -> Result<Quat, String> {
        let q: [f64; 4] = q.try_into().map_err(|_| format!("expected 4 components, got {}", q.len()))?;
        let q = Quat::from_array(q);
        if q.norm() < 1e-12 {
            return Err("zero quaternion".into());
        }
        Ok(q.normalized())
    };
    Ok(rotation_angle_deg(&quat(a)?.to_mat3(), &quat(b)?.to_mat3()))
}

#[wasm_bindgen(js_name = trackChannels)]
pub fn track_channels_js(kind: &str, seed: u32, seconds: f64, vertex: u32) -> Result<Vec<f64>, JsValue> {
    track_channels(kind, seed as u64, seconds, vertex as usize).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = describePlacement)]
pub fn describe_placement_js(x: f64, y: f64, z: f64) -> Result<String, JsValue> {
    describe_placement(x, y, z).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = quaternionAngleDeg)]
pub fn quaternion_angle_deg_js(a: Vec<f64>, b: Vec<f64>) -> Result<f64, JsValue> {
    quaternion_angle_deg(&a, &b).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = channelCount)]
pub fn channel_count() -> u32 {
    CHANNELS as u32
}

#[wasm_bindgen(js_name = vertexCount)]
pub fn vertex_count() -> u32 {
    body().vertex_count() as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idle_track_is_static() {
        let c = track_channels("idle", 0, 1.0, 100).unwrap();
        assert_eq!(c.len() % CHANNELS, 0);
        for row in c.chunks(CHANNELS) {
            let want = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
            assert!(row.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12), "{row:?}");
        }
        assert!(track_channels("jog", 0, 1.0, 100).is_err());
        assert!(track_channels("walk", 0, 1.0, 1_000_000).is_err());
    }

    #[test]
    fn placement_names_region() {
        let p = body().tpose_joint_pos[15];
        let text = describe_placement(p.x(), p.y(), p.z()).unwrap();
        assert!(text.contains("region"), "{text}");
        assert!(describe_placement(50.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn quaternion_angles() {
        let half = std::f64::consts::FRAC_1_SQRT_2;
        let a = quaternion_angle_deg(&[1.0, 0.0, 0.0, 0.0], &[half, 0.0, 0.0, half]).unwrap();
        assert!((a - 90.0).abs() < 1e-9);
        assert!(quaternion_angle_deg(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]).is_err());
        assert!(quaternion_angle_deg(&[0.0; 4], &[1.0, 0.0, 0.0, 0.0]).is_err());
    }
}
