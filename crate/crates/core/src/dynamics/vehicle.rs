use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::real::{Dual, Real};
use super::{ControlAffine, ControlSet, DynamicsError, SafetyCorridor, StateBox, TrackGeometry};

/// State layout of the single-track model.
pub mod vehicle_index {
    pub const S: usize = 0;
    pub const E: usize = 1;
    pub const DPHI: usize = 2;
    pub const V: usize = 3;
    pub const R: usize = 4;
    pub const BETA: usize = 5;
    pub const DELTA: usize = 6;
    pub const TAU: usize = 7;
    pub const GAMMA: usize = 8;
    pub const DIM: usize = 9;
}

use vehicle_index as ix;

const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub mass: f64,
    pub yaw_inertia: f64,
    /// CoM to front axle (m).
    pub a: f64,
    /// CoM to rear axle (m).
    pub b: f64,
    pub wheel_radius: f64,
    /// Share of total longitudinal force on the front axle.
    pub front_drive_fraction: f64,
    /// Lower speed bound keeping the `1/(mV)` sideslip term finite.
    pub v_min: f64,
    pub steer_max: f64,
    pub steer_rate_max: f64,
    pub torque_max: f64,
    pub torque_rate_max: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 2000.0,
            yaw_inertia: 3200.0,
            a: 1.3,
            b: 1.5,
            wheel_radius: 0.33,
            front_drive_fraction: 0.5,
            v_min: 1.0,
            steer_max: 0.71,
            steer_rate_max: 1.0,
            torque_max: 4000.0,
            torque_rate_max: 8000.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let pos = [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("a", self.a),
            ("b", self.b),
            ("wheel_radius", self.wheel_radius),
            ("v_min", self.v_min),
            ("steer_max", self.steer_max),
            ("steer_rate_max", self.steer_rate_max),
            ("torque_max", self.torque_max),
            ("torque_rate_max", self.torque_rate_max),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DynamicsError::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.front_drive_fraction) {
            return Err(DynamicsError::InvalidParameter(
                "front_drive_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Derated brush (Fiala) tire model, one entry per axle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TireModel {
    pub mu: f64,
    pub cornering_stiffness_front: f64,
    pub cornering_stiffness_rear: f64,
    /// Longitudinal coupling derate in `sqrt((μFz)² − ζFx²)`.
    pub zeta: f64,
    pub normal_load_front: f64,
    pub normal_load_rear: f64,
}

impl TireModel {
    /// Static axle loads from the vehicle's weight distribution.
    pub fn with_static_loads(params: &VehicleParams, mu: f64, cf: f64, cr: f64) -> Self {
        let w = params.mass * GRAVITY;
        let l = params.a + params.b;
        Self {
            mu,
            cornering_stiffness_front: cf,
            cornering_stiffness_rear: cr,
            zeta: 0.99,
            normal_load_front: w * params.b / l,
            normal_load_rear: w * params.a / l,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let pos = [
            self.mu,
            self.cornering_stiffness_front,
            self.cornering_stiffness_rear,
            self.zeta,
            self.normal_load_front,
            self.normal_load_rear,
        ];
        if pos.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(DynamicsError::InvalidParameter(
                "tire parameters must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Maximum lateral force after derating by the longitudinal force.
    pub fn max_lateral_force<T: Real>(&self, fz: f64, fx: T) -> Result<T, DynamicsError> {
        let limit = (self.mu * fz).powi(2);
        let coupled = fx * fx * T::cst(self.zeta);
        if coupled.re() >= limit {
            return Err(DynamicsError::TireSaturation {
                coupled: coupled.re(),
                limit,
            });
        }
        Ok((T::cst(limit) - coupled).sqrt())
    }

    /// Lateral force for slip angle `alpha` (odd, monotone non-increasing,
    /// saturating at the derated limit).
    pub fn lateral_force<T: Real>(
        &self,
        alpha: T,
        fx: T,
        fz: f64,
        stiffness: f64,
    ) -> Result<T, DynamicsError> {
        let fmax = self.max_lateral_force(fz, fx)?;
        let c = T::cst(stiffness);
        let t = alpha.tan();
        let slide = (fmax.scale(3.0) / c).atan();
        if alpha.abs().re() < slide.re() {
            let three = T::cst(3.0);
            let tabs = t.abs();
            Ok(-(c * t) + c * c / (three * fmax) * tabs * t
                - c * c * c / (T::cst(27.0) * fmax * fmax) * t * t * t)
        } else if alpha.re() > 0.0 {
            Ok(-fmax)
        } else {
            Ok(fmax)
        }
    }
}

/// Single-track racing model in path coordinates, dynamically extended with
/// steering angle and total torque, plus a virtual discount-rate state.
///
/// State `[s, e, Δφ, V, r, β, δ, τ, γ]`, input `[δ̇, τ̇]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleTrackModel {
    pub params: VehicleParams,
    pub tire: TireModel,
    pub track: TrackGeometry,
    region: StateBox,
    controls: ControlSet,
}

pub fn single_track_model(
    params: VehicleParams,
    tire: TireModel,
    track: TrackGeometry,
) -> Result<SingleTrackModel, DynamicsError> {
    SingleTrackModel::new(params, tire, track)
}

impl SingleTrackModel {
    pub fn new(
        params: VehicleParams,
        tire: TireModel,
        track: TrackGeometry,
    ) -> Result<Self, DynamicsError> {
        params.validate()?;
        tire.validate()?;
        track.validate()?;
        let hw = track.half_width;
        let region = StateBox::new(
            vec![
                0.0,
                -(hw + 0.5),
                -0.6,
                params.v_min.max(4.0),
                -1.5,
                -0.2,
                -params.steer_max,
                -params.torque_max,
                0.05,
            ],
            vec![
                track.total_length(),
                hw + 0.5,
                0.6,
                16.0,
                1.5,
                0.2,
                params.steer_max,
                params.torque_max,
                1.0,
            ],
        )?;
        let controls =
            ControlSet::symmetric_box(vec![params.steer_rate_max, params.torque_rate_max])?;
        Ok(Self {
            params,
            tire,
            track,
            region,
            controls,
        })
    }

    pub fn with_sampling_region(mut self, region: StateBox) -> Result<Self, DynamicsError> {
        if region.dim() != ix::DIM {
            return Err(DynamicsError::DimensionMismatch {
                expected: ix::DIM,
                got: region.dim(),
            });
        }
        self.region = region;
        Ok(self)
    }

    /// Longitudinal force per axle from total torque.
    fn axle_forces<T: Real>(&self, tau: T) -> (T, T) {
        let total = tau.scale(1.0 / self.params.wheel_radius);
        let front = total.scale(self.params.front_drive_fraction);
        (front, total - front)
    }

    fn drift_generic<T: Real>(&self, x: &[T]) -> Result<[T; ix::DIM], DynamicsError> {
        if x.len() != ix::DIM {
            return Err(DynamicsError::DimensionMismatch {
                expected: ix::DIM,
                got: x.len(),
            });
        }
        let p = &self.params;
        let (e, dphi, v, r, beta, delta, tau) = (
            x[ix::E],
            x[ix::DPHI],
            x[ix::V],
            x[ix::R],
            x[ix::BETA],
            x[ix::DELTA],
            x[ix::TAU],
        );
        if v.re() <= p.v_min {
            return Err(DynamicsError::Domain(format!(
                "speed {} at or below v_min {}",
                v.re(),
                p.v_min
            )));
        }
        let kappa = self.track.kappa_ref(x[ix::S].re());
        let den = T::cst(1.0) - e.scale(kappa);
        if den.re() <= 0.0 {
            return Err(DynamicsError::Domain(format!(
                "1 - kappa*e = {} is not positive",
                den.re()
            )));
        }

        let (fxf, fxr) = self.axle_forces(tau);
        let vx = v * beta.cos();
        let vy = v * beta.sin();
        let alpha_f = ((vy + r.scale(p.a)) / vx).atan() - delta;
        let alpha_r = ((vy - r.scale(p.b)) / vx).atan();
        let fyf = self.tire.lateral_force(
            alpha_f,
            fxf,
            self.tire.normal_load_front,
            self.tire.cornering_stiffness_front,
        )?;
        let fyr = self.tire.lateral_force(
            alpha_r,
            fxr,
            self.tire.normal_load_rear,
            self.tire.cornering_stiffness_rear,
        )?;

        let db = delta - beta;
        let (sdb, cdb) = (db.sin(), db.cos());
        let (sb, cb) = (beta.sin(), beta.cos());
        let m = T::cst(p.mass);

        let path_rate = v * dphi.cos() / den;
        let beta_dot = (fxf * sdb + fyf * cdb - fxr * sb + fyr * cb) / (m * v) - r;
        let v_dot = (fxf * cdb - fyf * sdb + fxr * cb + fyr * sb) / m;
        let r_dot = ((fxf * delta.sin() + fyf * delta.cos()).scale(p.a) - fyr.scale(p.b))
            .scale(1.0 / p.yaw_inertia);

        let zero = T::cst(0.0);
        Ok([
            path_rate,
            v * dphi.sin(),
            beta_dot + r - path_rate.scale(kappa),
            v_dot,
            r_dot,
            beta_dot,
            zero,
            zero,
            zero,
        ])
    }
}

impl ControlAffine for SingleTrackModel {
    fn name(&self) -> String {
        format!(
            "single_track(m={},mu={},L={},R={})",
            self.params.mass, self.tire.mu, self.track.straight_length, self.track.turn_radius
        )
    }

    fn state_dim(&self) -> usize {
        ix::DIM
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        Ok(DVector::from_row_slice(&self.drift_generic(x.as_slice())?))
    }

    fn input_matrix(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        if x.len() != ix::DIM {
            return Err(DynamicsError::DimensionMismatch {
                expected: ix::DIM,
                got: x.len(),
            });
        }
        let mut g = DMatrix::zeros(ix::DIM, 2);
        g[(ix::DELTA, 0)] = 1.0;
        g[(ix::TAU, 1)] = 1.0;
        Ok(g)
    }

    fn drift_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        let duals: Vec<Dual<{ ix::DIM }>> = x
            .iter()
            .enumerate()
            .map(|(i, v)| Dual::variable(*v, i))
            .collect();
        let f = self.drift_generic(&duals)?;
        Ok(DMatrix::from_fn(ix::DIM, ix::DIM, |i, k| f[i].eps[k]))
    }

    fn input_jacobian(&self, x: &DVector<f64>) -> Result<Vec<DMatrix<f64>>, DynamicsError> {
        if x.len() != ix::DIM {
            return Err(DynamicsError::DimensionMismatch {
                expected: ix::DIM,
                got: x.len(),
            });
        }
        Ok(vec![DMatrix::zeros(ix::DIM, 2); ix::DIM])
    }

    fn control_set(&self) -> &ControlSet {
        &self.controls
    }

    fn constraint(&self, x: &DVector<f64>) -> f64 {
        self.corridor().margin(x.as_slice())
    }

    fn constraint_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.corridor().gradient(x.as_slice())
    }

    fn sampling_region(&self) -> &StateBox {
        &self.region
    }

    fn safety_corridor(&self) -> Option<SafetyCorridor> {
        Some(self.corridor())
    }

    fn discount_index(&self) -> Option<usize> {
        Some(ix::GAMMA)
    }
}

impl SingleTrackModel {
    fn corridor(&self) -> SafetyCorridor {
        SafetyCorridor {
            axis: ix::E,
            half_width: self.track.half_width,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> SingleTrackModel {
        let p = VehicleParams::default();
        let tire = TireModel::with_static_loads(&p, 0.9, 120_000.0, 150_000.0);
        single_track_model(p, tire, TrackGeometry::default()).unwrap()
    }

    fn cruise(v: f64) -> DVector<f64> {
        let mut x = DVector::zeros(ix::DIM);
        x[ix::S] = 5.0;
        x[ix::V] = v;
        x[ix::GAMMA] = 0.1;
        x
    }

    #[test]
    fn straight_cruise_equilibrium() {
        let m = model();
        let d = m.drift(&cruise(12.0)).unwrap();
        assert_eq!(d[ix::E], 0.0);
        assert_eq!(d[ix::DPHI], 0.0);
        assert_eq!(d[ix::V], 0.0);
        assert_eq!(d[ix::R], 0.0);
        assert!((d[ix::S] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn input_matrix_selects_rates() {
        let m = model();
        let mut x = cruise(10.0);
        x[ix::E] = 1.2;
        x[ix::BETA] = 0.05;
        let u = DVector::from_vec(vec![0.3, -150.0]);
        let gu = m.input_matrix(&x).unwrap() * &u;
        let mut expected = DVector::zeros(ix::DIM);
        expected[ix::DELTA] = 0.3;
        expected[ix::TAU] = -150.0;
        assert_eq!(gu, expected);
    }

    #[test]
    fn speed_constant_without_forces() {
        let p = VehicleParams::default();
        // huge stiffness would not matter: zero slip gives zero lateral force
        let tire = TireModel::with_static_loads(&p, 0.9, 1.0, 1.0);
        let m = single_track_model(p, tire, TrackGeometry::default()).unwrap();
        let mut x = cruise(9.0);
        x[ix::E] = 0.4;
        x[ix::DPHI] = 0.1;
        assert_eq!(m.drift(&x).unwrap()[ix::V], 0.0);
    }

    #[test]
    fn domain_errors() {
        let m = model();
        assert!(matches!(
            m.drift(&cruise(0.5)),
            Err(DynamicsError::Domain(_))
        ));
        let mut x = cruise(10.0);
        x[ix::S] = 25.0;
        x[ix::E] = 12.0;
        assert!(matches!(m.drift(&x), Err(DynamicsError::Domain(_))));
    }

    #[test]
    fn tire_force_properties() {
        let p = VehicleParams::default();
        let t = TireModel::with_static_loads(&p, 0.9, 120_000.0, 150_000.0);
        let fz = t.normal_load_front;
        let fx = 2000.0;
        let fmax = t.max_lateral_force(fz, fx).unwrap();
        assert!((fmax - ((0.9 * fz).powi(2) - 0.99 * fx * fx).sqrt()).abs() < 1e-9);
        let mut prev = f64::INFINITY;
        for i in -200..=200 {
            let a = i as f64 * 0.002;
            let f = t.lateral_force(a, fx, fz, 120_000.0).unwrap();
            let g = t.lateral_force(-a, fx, fz, 120_000.0).unwrap();
            assert!((f + g).abs() < 1e-9 * fmax, "odd symmetry");
            assert!(f.abs() <= fmax * (1.0 + 1e-12));
            assert!(f <= prev + 1e-9, "monotone");
            prev = f;
        }
        assert!(matches!(
            t.max_lateral_force(fz, 0.9 * fz / 0.99f64.sqrt() * 1.01),
            Err(DynamicsError::TireSaturation { .. })
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut x = m.sampling_region().sample(&mut rng);
            // keep away from the piecewise curvature jumps in s
            x[ix::S] = rng.random_range(1.0..19.0) + if rng.random_bool(0.5) { 30.0 } else { 0.0 };
            let fd = fd_drift_jacobian(&m, &x, 1e-6);
            let j = m.drift_jacobian(&x).unwrap();
            let err = rel_err(&j, &fd);
            assert!(err <= 1e-5, "rel err {err}");
            let gfd = fd_input_jacobian(&m, &x, 1e-6);
            for g in &gfd {
                assert_eq!(g.norm(), 0.0);
            }
        }
    }

    #[test]
    fn repeat_evaluation_is_bit_identical() {
        let m = model();
        let mut x = cruise(11.0);
        x[ix::DELTA] = 0.2;
        x[ix::R] = 0.3;
        assert_eq!(m.drift(&x).unwrap(), m.drift(&x).unwrap());
    }
}
