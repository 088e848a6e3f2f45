//! Camera extrinsics, rigs, spherical placement, epipolar constructions and
//! pose-error metrics.
//!
//! Convention: world-to-camera, `x_cam = R * X + t`, camera axes x right,
//! y down, z forward. Pixel coordinates address pixel centers, so pixel
//! `(u, v)` covers `[u - 0.5, u + 0.5) x [v - 0.5, v + 0.5)`.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Orthonormality tolerance for accepting a rotation as-is.
pub const ROTATION_TOL: f64 = 1e-6;
/// Rotations within this deviation are re-orthonormalized instead of rejected.
pub const REPAIR_TOL: f64 = 1e-3;

const WORLD_UP: Vector3<f64> = Vector3::new(0.0, 0.0, 1.0);

/// Rigid world-to-camera transform `[R | t]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraExtrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraExtrinsics {
    /// Builds extrinsics, repairing a slightly drifted rotation by polar
    /// decomposition and rejecting anything further off.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let rotation = validate_rotation(rotation)?;
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::Constraint("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera looking from `center` towards `target`.
    pub fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> Result<Self> {
        let forward = target - center;
        let dist = forward.norm();
        if dist < 1e-12 {
            return Err(Error::DegenerateGeometry(
                "camera center coincides with look-at target".into(),
            ));
        }
        let forward = forward / dist;
        let mut right = forward.cross(&WORLD_UP);
        if right.norm() < 1e-9 {
            // looking straight up or down
            right = forward.cross(&Vector3::new(0.0, 1.0, 0.0));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * center);
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Projects a world point; `None` when it lies behind the camera.
    pub fn project(&self, k: &CameraIntrinsics, world: &Vector3<f64>) -> Option<(f64, f64)> {
        let p = self.to_camera(world);
        if p.z <= 1e-9 {
            return None;
        }
        Some((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
    }

    /// World-space unit direction of the ray through pixel `(u, v)`.
    pub fn ray_direction(&self, k: &CameraIntrinsics, u: f64, v: f64) -> Vector3<f64> {
        let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        (self.rotation.transpose() * dir_cam).normalize()
    }

    /// `self` expressed relative to `anchor`: `(R R_a^T, t - R R_a^T t_a)`.
    pub fn relative_to(&self, anchor: &CameraExtrinsics) -> CameraExtrinsics {
        let r = self.rotation * anchor.rotation.transpose();
        let t = self.translation - r * anchor.translation;
        CameraExtrinsics::from_parts_unchecked(r, t)
    }

    /// Applies `self` after `first`: maps world through `first`, then `self`.
    pub fn compose(&self, first: &CameraExtrinsics) -> CameraExtrinsics {
        CameraExtrinsics::from_parts_unchecked(
            self.rotation * first.rotation,
            self.rotation * first.translation + self.translation,
        )
    }

    /// Row-major `[R row0, R row1, R row2, t]`.
    pub fn flatten(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::CountMismatch {
                what: "extrinsic values",
                expected: 12,
                got: v.len(),
            });
        }
        let rotation = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        Self::new(rotation, Vector3::new(v[9], v[10], v[11]))
    }

    /// 12 little-endian `f64` values, row-major `R` then `t`.
    pub fn to_le_bytes(&self) -> [u8; 96] {
        let mut out = [0u8; 96];
        for (chunk, x) in out.chunks_exact_mut(8).zip(self.flatten()) {
            chunk.copy_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 96 {
            return Err(Error::Format(format!(
                "extrinsics need 96 bytes, got {}",
                bytes.len()
            )));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_flat(&vals)
    }
}

fn orthonormality_deviation(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

fn validate_rotation(r: Matrix3<f64>) -> Result<Matrix3<f64>> {
    if !r.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidRotation {
            deviation: f64::INFINITY,
        });
    }
    let deviation = orthonormality_deviation(&r);
    let det = r.determinant();
    if deviation < ROTATION_TOL && det > 0.0 {
        return Ok(r);
    }
    if deviation < REPAIR_TOL && det > 0.0 {
        let svd = r.svd(true, true);
        let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
        let repaired = u * v_t;
        if repaired.determinant() > 0.0 {
            return Ok(repaired);
        }
    }
    Err(Error::InvalidRotation { deviation })
}

pub fn rot_x(deg: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), deg.to_radians()).into_inner()
}

pub fn rot_y(deg: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), deg.to_radians()).into_inner()
}

pub fn rot_z(deg: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), deg.to_radians()).into_inner()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }

    /// Pinhole with the given horizontal field of view, principal point at
    /// the image center.
    pub fn from_fov(h: usize, w: usize, fov_deg: f64) -> Self {
        let f = (w as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
        Self {
            fx: f,
            fy: f,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Constraint("focal lengths must be positive".into()));
        }
        if !(0.0..w as f64).contains(&self.cx) || !(0.0..h as f64).contains(&self.cy) {
            return Err(Error::Constraint(format!(
                "principal point ({}, {}) outside {w}x{h} image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// An ordered set of cameras sharing one intrinsic calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<CameraExtrinsics>,
    pub intrinsics: CameraIntrinsics,
}

impl CameraRig {
    pub fn new(cameras: Vec<CameraExtrinsics>, intrinsics: CameraIntrinsics) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::Constraint("a rig needs at least one camera".into()));
        }
        Ok(Self {
            cameras,
            intrinsics,
        })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> CameraRig {
        CameraRig {
            cameras: indices.iter().map(|&i| self.cameras[i]).collect(),
            intrinsics: self.intrinsics,
        }
    }

    pub fn is_normalized(&self) -> bool {
        self.cameras[0] == CameraExtrinsics::identity()
    }
}

/// Re-expresses every camera relative to camera 0, which becomes `[I | 0]`.
pub fn normalize_rig(rig: &CameraRig) -> Result<CameraRig> {
    if rig.cameras.is_empty() {
        return Err(Error::Constraint("a rig needs at least one camera".into()));
    }
    for cam in &rig.cameras {
        let deviation = orthonormality_deviation(cam.rotation());
        if deviation >= ROTATION_TOL || cam.rotation().determinant() <= 0.0 {
            return Err(Error::InvalidRotation { deviation });
        }
    }
    let anchor = rig.cameras[0];
    let mut cameras: Vec<CameraExtrinsics> = rig.cameras.iter().map(|c| c.relative_to(&anchor)).collect();
    cameras[0] = CameraExtrinsics::identity();
    Ok(CameraRig {
        cameras,
        intrinsics: rig.intrinsics,
    })
}

/// Camera placement on a sphere around a look-at target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphericalPose {
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
    pub target: Vector3<f64>,
}

impl SphericalPose {
    pub fn center(&self) -> Vector3<f64> {
        let (az, el) = (self.azimuth.to_radians(), self.elevation.to_radians());
        self.target
            + self.distance * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }

    pub fn to_extrinsics(&self) -> Result<CameraExtrinsics> {
        if !(self.distance > 0.0) {
            return Err(Error::Constraint("distance must be positive".into()));
        }
        CameraExtrinsics::look_at(self.center(), self.target)
    }

    pub fn from_extrinsics(cam: &CameraExtrinsics, target: Vector3<f64>) -> Result<Self> {
        let offset = cam.center() - target;
        let distance = offset.norm();
        if distance < 1e-12 {
            return Err(Error::UndefinedAzimuth);
        }
        let elevation = (offset.z / distance).clamp(-1.0, 1.0).asin().to_degrees();
        Ok(Self {
            azimuth: azimuth_of(cam, &target)?,
            elevation,
            distance,
            target,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraConstraints {
    pub dist_min: f64,
    pub dist_max: f64,
    pub elev_min: f64,
    pub elev_max: f64,
}

impl Default for CameraConstraints {
    fn default() -> Self {
        Self {
            dist_min: 3.5,
            dist_max: 9.0,
            elev_min: 0.0,
            elev_max: 45.0,
        }
    }
}

impl CameraConstraints {
    pub fn validate(&self) -> Result<()> {
        if !(self.dist_min > 0.0 && self.dist_min <= self.dist_max) {
            return Err(Error::Constraint(format!(
                "distance range [{}, {}] is empty or non-positive",
                self.dist_min, self.dist_max
            )));
        }
        if !(0.0 <= self.elev_min && self.elev_min <= self.elev_max && self.elev_max <= 90.0) {
            return Err(Error::Constraint(format!(
                "elevation range [{}, {}] must be a non-empty subset of [0, 90]",
                self.elev_min, self.elev_max
            )));
        }
        Ok(())
    }
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn sample_spherical_pose<R: Rng + ?Sized>(
    constraints: &CameraConstraints,
    target: Vector3<f64>,
    rng: &mut R,
) -> Result<SphericalPose> {
    constraints.validate()?;
    let azimuth = rng.random_range(0.0..360.0);
    let elevation = uniform_in(rng, constraints.elev_min, constraints.elev_max);
    let distance = uniform_in(rng, constraints.dist_min, constraints.dist_max);
    Ok(SphericalPose {
        azimuth,
        elevation,
        distance,
        target,
    })
}

/// Samples a camera on the constrained spherical shell, aimed at `target`.
pub fn sample_camera<R: Rng + ?Sized>(
    constraints: &CameraConstraints,
    target: Vector3<f64>,
    rng: &mut R,
) -> Result<CameraExtrinsics> {
    sample_spherical_pose(constraints, target, rng)?.to_extrinsics()
}

/// Azimuth of the camera center around `target`, degrees in `[0, 360)`.
pub fn azimuth_of(cam: &CameraExtrinsics, target: &Vector3<f64>) -> Result<f64> {
    let offset = cam.center() - target;
    if offset.x.hypot(offset.y) < 1e-9 {
        return Err(Error::UndefinedAzimuth);
    }
    let az = offset.y.atan2(offset.x).to_degrees().rem_euclid(360.0);
    // rem_euclid can round up to exactly 360
    Ok(if az >= 360.0 { 0.0 } else { az })
}

/// Wrapped absolute azimuth difference in `[0, 180]`.
pub fn azimuth_difference(a: &CameraExtrinsics, b: &CameraExtrinsics, target: &Vector3<f64>) -> Result<f64> {
    Ok(wrapped_angle_difference(azimuth_of(a, target)?, azimuth_of(b, target)?))
}

pub fn wrapped_angle_difference(a_deg: f64, b_deg: f64) -> f64 {
    let d = (a_deg - b_deg).abs().rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Per-pixel Plücker rays `(d, o x d)` as an `h x w x 6` tensor.
pub fn plucker_rays(cam: &CameraExtrinsics, k: &CameraIntrinsics, h: usize, w: usize) -> Tensor {
    let o = cam.center();
    let mut data = Vec::with_capacity(h * w * 6);
    for v in 0..h {
        for u in 0..w {
            let d = cam.ray_direction(k, u as f64, v as f64);
            let m = o.cross(&d);
            data.extend_from_slice(&[d.x, d.y, d.z, m.x, m.y, m.z]);
        }
    }
    Tensor::new(vec![h, w, 6], data).expect("ray map size")
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Essential matrix with `x_b^T E x_a = 0` in normalized coordinates.
pub fn essential_matrix(a: &CameraExtrinsics, b: &CameraExtrinsics) -> Result<Matrix3<f64>> {
    let rel = b.relative_to(a);
    if rel.translation().norm() <= 1e-9 {
        return Err(Error::DegenerateGeometry(
            "zero baseline between cameras".into(),
        ));
    }
    Ok(skew(rel.translation()) * rel.rotation())
}

/// Fundamental matrix with `x_b^T F x_a = 0` in pixels, unit Frobenius norm.
pub fn fundamental_matrix(
    a: &CameraExtrinsics,
    b: &CameraExtrinsics,
    k: &CameraIntrinsics,
) -> Result<Matrix3<f64>> {
    let e = essential_matrix(a, b)?;
    let k_inv = k.inverse_matrix();
    let f = k_inv.transpose() * e * k_inv;
    Ok(f / f.norm())
}

/// Geodesic angle between two rotations, degrees.
pub fn rot_err(r_est: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    let cos = (((r_gt.transpose() * r_est).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

/// Distance between the unit directions of two translations, in `[0, 2]`.
pub fn trans_err(t_est: &Vector3<f64>, t_gt: &Vector3<f64>) -> Result<f64> {
    let (ne, ng) = (t_est.norm(), t_gt.norm());
    if ne < 1e-12 || ng < 1e-12 {
        return Err(Error::UndefinedDirection);
    }
    Ok((t_est / ne - t_gt / ng).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_camera(rng: &mut ChaCha8Rng) -> CameraExtrinsics {
        sample_camera(&CameraConstraints::default(), Vector3::new(0.0, 0.0, 0.5), rng).unwrap()
    }

    /// Rotation best aligning `src` onto `dst` (Kabsch), used as an
    /// independent oracle for relative poses.
    fn procrustes(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Matrix3<f64> {
        let n = src.len() as f64;
        let cs = src.iter().sum::<Vector3<f64>>() / n;
        let cd = dst.iter().sum::<Vector3<f64>>() / n;
        let mut h = Matrix3::zeros();
        for (s, d) in src.iter().zip(dst) {
            h += (s - cs) * (d - cd).transpose();
        }
        let svd = h.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut fix = Matrix3::identity();
        fix[(2, 2)] = (v_t.transpose() * u.transpose()).determinant().signum();
        v_t.transpose() * fix * u.transpose()
    }

    fn rig_of(cams: Vec<CameraExtrinsics>) -> CameraRig {
        CameraRig::new(cams, CameraIntrinsics::from_fov(32, 32, 60.0)).unwrap()
    }

    #[test]
    fn normalize_identical_cameras_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_camera(&mut rng);
        let out = normalize_rig(&rig_of(vec![c, c, c])).unwrap();
        for cam in &out.cameras {
            assert!((cam.rotation() - Matrix3::identity()).amax() < 1e-12);
            assert!(cam.translation().norm() < 1e-12);
        }
    }

    #[test]
    fn normalize_keeps_rig_anchored_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rig = rig_of(vec![CameraExtrinsics::identity(), random_camera(&mut rng), random_camera(&mut rng)]);
        assert_eq!(normalize_rig(&rig).unwrap(), rig);
    }

    #[test]
    fn normalize_relative_rotation_matches_procrustes_oracle() {
        let c0 = CameraExtrinsics::new(rot_z(30.0), Vector3::zeros()).unwrap();
        let c1 = CameraExtrinsics::new(rot_z(75.0), Vector3::zeros()).unwrap();
        let out = normalize_rig(&rig_of(vec![c0, c1])).unwrap();
        // points seen in camera-0 coordinates vs camera-1 coordinates
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let world: Vec<Vector3<f64>> = (0..10)
            .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect();
        let in0: Vec<_> = world.iter().map(|x| c0.to_camera(x)).collect();
        let in1: Vec<_> = world.iter().map(|x| c1.to_camera(x)).collect();
        let oracle = procrustes(&in0, &in1);
        assert!((out.cameras[1].rotation() - oracle).amax() < 1e-9);
        assert!((oracle - rot_z(45.0)).amax() < 1e-9);
    }

    #[test]
    fn normalize_composition_reproduces_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rig = rig_of((0..5).map(|_| random_camera(&mut rng)).collect());
        let out = normalize_rig(&rig).unwrap();
        for (orig, rel) in rig.cameras.iter().zip(&out.cameras) {
            let back = rel.compose(&rig.cameras[0]);
            assert!((back.rotation() - orig.rotation()).amax() < 1e-6);
            assert!((back.translation() - orig.translation()).amax() < 1e-6);
        }
    }

    #[test]
    fn normalize_rejects_non_rotation() {
        let bad = CameraExtrinsics::from_parts_unchecked(Matrix3::identity() * 2.0, Vector3::zeros());
        assert!(matches!(
            normalize_rig(&rig_of(vec![bad])),
            Err(Error::InvalidRotation { .. })
        ));
    }

    #[test]
    fn slightly_drifted_rotation_is_repaired() {
        let mut r = rot_z(20.0);
        r[(0, 1)] += 1e-5;
        let cam = CameraExtrinsics::new(r, Vector3::zeros()).unwrap();
        assert!(orthonormality_deviation(cam.rotation()) < 1e-12);
        let mut far = rot_z(20.0);
        far[(0, 1)] += 0.1;
        assert!(CameraExtrinsics::new(far, Vector3::zeros()).is_err());
        // reflection
        let mut refl = Matrix3::identity();
        refl[(2, 2)] = -1.0;
        assert!(CameraExtrinsics::new(refl, Vector3::zeros()).is_err());
    }

    #[test]
    fn sample_camera_default_constraints() {
        let c = CameraConstraints::default();
        assert_eq!((c.dist_min, c.dist_max, c.elev_min, c.elev_max), (3.5, 9.0, 0.0, 45.0));
    }

    #[test]
    fn sample_camera_collapsed_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = CameraConstraints {
            dist_min: 5.0,
            dist_max: 5.0,
            ..Default::default()
        };
        let target = Vector3::new(1.0, -2.0, 0.5);
        for _ in 0..200 {
            let cam = sample_camera(&c, target, &mut rng).unwrap();
            assert!(((cam.center() - target).norm() - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sample_camera_rejects_empty_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bad = [
            CameraConstraints { dist_min: 5.0, dist_max: 4.0, ..Default::default() },
            CameraConstraints { dist_min: 0.0, ..Default::default() },
            CameraConstraints { elev_min: 50.0, elev_max: 40.0, ..Default::default() },
            CameraConstraints { elev_max: 95.0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(sample_camera(&c, Vector3::zeros(), &mut rng), Err(Error::Constraint(_))));
        }
    }

    #[test]
    fn sampled_camera_looks_at_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = CameraIntrinsics::from_fov(32, 32, 60.0);
        let target = Vector3::new(0.0, 0.0, 0.5);
        for _ in 0..100 {
            let cam = sample_camera(&CameraConstraints::default(), target, &mut rng).unwrap();
            let (u, v) = cam.project(&k, &target).unwrap();
            assert!((u - k.cx).abs() < 1e-9 && (v - k.cy).abs() < 1e-9);
        }
    }

    #[test]
    fn spherical_pose_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let target = Vector3::new(0.3, 0.2, 0.5);
        for _ in 0..200 {
            let pose = sample_spherical_pose(&CameraConstraints::default(), target, &mut rng).unwrap();
            let back = SphericalPose::from_extrinsics(&pose.to_extrinsics().unwrap(), target).unwrap();
            assert!(wrapped_angle_difference(back.azimuth, pose.azimuth) < 1e-6);
            assert!((back.elevation - pose.elevation).abs() < 1e-6);
            assert!((back.distance - pose.distance).abs() < 1e-6);
        }
    }

    #[test]
    fn azimuth_difference_cases() {
        let target = Vector3::new(0.0, 0.0, 0.5);
        let pose = |az: f64| {
            SphericalPose { azimuth: az, elevation: 20.0, distance: 5.0, target }
                .to_extrinsics()
                .unwrap()
        };
        let a = pose(30.0);
        assert_eq!(azimuth_difference(&a, &a, &target).unwrap(), 0.0);
        assert!((azimuth_difference(&pose(350.0), &pose(10.0), &target).unwrap() - 20.0).abs() < 1e-9);
        assert!((azimuth_difference(&a, &pose(150.0), &target).unwrap() - 120.0).abs() < 1e-9);
        let at_target = CameraExtrinsics::look_at(Vector3::new(0.0, 0.0, 3.0), target).unwrap();
        assert!(matches!(azimuth_difference(&a, &at_target, &target), Err(Error::UndefinedAzimuth)));
    }

    #[test]
    fn flatten_layout() {
        assert_eq!(
            CameraExtrinsics::identity().flatten(),
            [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
        );
        let cam = CameraExtrinsics::new(Matrix3::identity(), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        assert_eq!(&cam.flatten()[9..], &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn flatten_and_bytes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let cam = random_camera(&mut rng);
            assert_eq!(CameraExtrinsics::from_flat(&cam.flatten()).unwrap(), cam);
            assert_eq!(CameraExtrinsics::from_le_bytes(&cam.to_le_bytes()).unwrap(), cam);
        }
    }

    #[test]
    fn plucker_properties() {
        let k = CameraIntrinsics::from_fov(8, 10, 60.0);
        let origin_cam = CameraExtrinsics::new(rot_y(25.0), Vector3::zeros()).unwrap();
        let rays = plucker_rays(&origin_cam, &k, 8, 10);
        assert!(rays.data().chunks(6).all(|r| r[3..].iter().all(|m| m.abs() < 1e-15)));

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cam = random_camera(&mut rng);
        let k = CameraIntrinsics::new(9.0, 9.0, 4.0, 3.0);
        let rays = plucker_rays(&cam, &k, 7, 9);
        let o = cam.center();
        for r in rays.data().chunks(6) {
            let d = Vector3::new(r[0], r[1], r[2]);
            let m = Vector3::new(r[3], r[4], r[5]);
            assert!((d.norm() - 1.0).abs() < 1e-12);
            assert!(d.dot(&m).abs() < 1e-9);
            assert!((m - o.cross(&d)).norm() < 1e-6);
        }
        // principal pixel (4, 3) looks down the optical axis
        let px = &rays.data()[(3 * 9 + 4) * 6..(3 * 9 + 4) * 6 + 3];
        let fwd = cam.forward();
        assert!((Vector3::new(px[0], px[1], px[2]) - fwd).norm() < 1e-6);
    }

    #[test]
    fn fundamental_matrix_epipolar_residual_and_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = CameraIntrinsics::from_fov(32, 32, 60.0);
        let (a, b) = (random_camera(&mut rng), random_camera(&mut rng));
        let f = fundamental_matrix(&a, &b, &k).unwrap();
        let mut checked = 0;
        while checked < 50 {
            let x = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(0.0..1.5));
            if let (Some(pa), Some(pb)) = (a.project(&k, &x), b.project(&k, &x)) {
                let r = Vector3::new(pb.0, pb.1, 1.0).dot(&(f * Vector3::new(pa.0, pa.1, 1.0)));
                assert!(r.abs() < 1e-6, "residual {r}");
                checked += 1;
            }
        }
        let sv = f.singular_values();
        let (mx, mn) = (sv.max(), sv.min());
        assert!(mn < 1e-8 * mx);
        assert!(matches!(fundamental_matrix(&a, &a, &k), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn pose_errors() {
        let r = rot_x(33.0) * rot_y(-12.0);
        assert_eq!(rot_err(&r, &r), 0.0);
        assert!((rot_err(&(rot_z(10.0) * r), &r) - 10.0).abs() < 1e-6);
        let t = Vector3::new(0.5, -1.0, 2.0);
        assert!(trans_err(&(2.0 * t), &t).unwrap() < 1e-15);
        assert!(matches!(trans_err(&Vector3::zeros(), &t), Err(Error::UndefinedDirection)));
        assert!((trans_err(&-t, &t).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rot_err_is_a_metric_on_sampled_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut random_rotation = || {
            let axis = nalgebra::Unit::new_normalize(Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ));
            Rotation3::from_axis_angle(&axis, rng.random_range(0.0..std::f64::consts::PI)).into_inner()
        };
        for _ in 0..1000 {
            let (a, b, c) = (random_rotation(), random_rotation(), random_rotation());
            assert!((rot_err(&a, &b) - rot_err(&b, &a)).abs() < 1e-6);
            assert!(rot_err(&a, &c) <= rot_err(&a, &b) + rot_err(&b, &c) + 1e-6);
        }
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn normalize_is_idempotent(seed in any::<u64>(), n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cams = (0..n)
                .map(|_| sample_camera(&CameraConstraints::default(), Vector3::new(0.0, 0.0, 0.5), &mut rng).unwrap())
                .collect();
            let rig = CameraRig::new(cams, CameraIntrinsics::from_fov(32, 32, 60.0)).unwrap();
            let once = normalize_rig(&rig).unwrap();
            let twice = normalize_rig(&once).unwrap();
            for (a, b) in once.cameras.iter().zip(&twice.cameras) {
                prop_assert!((a.rotation() - b.rotation()).amax() < 1e-9);
                prop_assert!((a.translation() - b.translation()).amax() < 1e-9);
            }
        }

        #[test]
        fn azimuth_difference_is_symmetric(a in 0.0f64..360.0, b in 0.0f64..360.0) {
            let target = Vector3::new(0.0, 0.0, 0.5);
            let cam = |az| SphericalPose { azimuth: az, elevation: 10.0, distance: 4.0, target }.to_extrinsics().unwrap();
            let (ca, cb) = (cam(a), cam(b));
            let ab = azimuth_difference(&ca, &cb, &target).unwrap();
            prop_assert_eq!(ab, azimuth_difference(&cb, &ca, &target).unwrap());
            prop_assert!((0.0..=180.0).contains(&ab));
        }
    }
}
