//! Recursive planar kinematics: link poses, velocities, Jacobians and the
//! velocity-product (bias) accelerations needed by the equations of motion.
//!
//! Vectors are `(x, z)` with z up; angles are counter-clockwise about the
//! axis pointing out of the x–z plane. `perp(r) = (−r_z, r_x)`.

use nalgebra::{DMatrix, DVector};

use super::model::{BaseKind, JointKind, Model};

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Frame {
    pub angle: f64,
    pub cos: f64,
    pub sin: f64,
    pub origin: [f64; 2],
    pub omega: f64,
    pub vel: [f64; 2],
    pub acc_bias: [f64; 2],
    pub alpha_bias: f64,
}

impl Frame {
    fn world() -> Self {
        Self {
            cos: 1.0,
            ..Self::default()
        }
    }

    #[inline]
    pub fn rotate(&self, local: [f64; 2]) -> [f64; 2] {
        [
            self.cos * local[0] - self.sin * local[1],
            self.sin * local[0] + self.cos * local[1],
        ]
    }
}

#[inline]
fn perp(r: [f64; 2]) -> [f64; 2] {
    [-r[1], r[0]]
}

pub(crate) struct Kinematics {
    nv: usize,
    pub frames: Vec<Frame>,
    /// Per link, three rows of length nv: origin x, origin z, angle.
    jac: Vec<f64>,
}

impl Kinematics {
    pub fn compute(model: &Model, q: &DVector<f64>, v: &DVector<f64>) -> Self {
        let spec = model.spec();
        let nv = model.nv();
        let n_links = spec.links.len();
        let mut frames = Vec::with_capacity(n_links);
        let mut jac = vec![0.0; n_links * 3 * nv];
        let base = model.base_dofs();
        let roots = spec.root_links();

        if spec.base == BaseKind::Planar {
            let (sin, cos) = q[2].sin_cos();
            frames.push(Frame {
                angle: q[2],
                cos,
                sin,
                origin: [q[0], q[1]],
                omega: v[2],
                vel: [v[0], v[1]],
                acc_bias: [0.0, 0.0],
                alpha_bias: 0.0,
            });
            jac[0] = 1.0;
            jac[nv + 1] = 1.0;
            jac[2 * nv + 2] = 1.0;
        }

        for (j, joint) in spec.joints.iter().enumerate() {
            let child = j + roots;
            let coord = base + j;
            let parent_link = match joint.parent {
                Some(p) => Some(p),
                None if spec.base == BaseKind::Planar => Some(0),
                None => None,
            };
            let parent = parent_link.map_or_else(Frame::world, |p| frames[p]);
            let (qj, vj) = (q[coord], v[coord]);

            // Child rows start from the parent rows.
            if let Some(p) = parent_link {
                let (src, dst) = (p * 3 * nv, child * 3 * nv);
                jac.copy_within(src..src + 3 * nv, dst);
            }
            let row = child * 3 * nv;
            let w = parent.omega;
            let frame = match joint.kind {
                JointKind::Revolute => {
                    let r = parent.rotate(joint.anchor);
                    for col in 0..nv {
                        let jphi = jac[row + 2 * nv + col];
                        jac[row + col] -= r[1] * jphi;
                        jac[row + nv + col] += r[0] * jphi;
                    }
                    jac[row + 2 * nv + coord] += 1.0;
                    let angle = parent.angle + qj;
                    let (sin, cos) = angle.sin_cos();
                    let pr = perp(r);
                    Frame {
                        angle,
                        cos,
                        sin,
                        origin: [parent.origin[0] + r[0], parent.origin[1] + r[1]],
                        omega: w + vj,
                        vel: [parent.vel[0] + w * pr[0], parent.vel[1] + w * pr[1]],
                        acc_bias: [
                            parent.acc_bias[0] + parent.alpha_bias * pr[0] - w * w * r[0],
                            parent.acc_bias[1] + parent.alpha_bias * pr[1] - w * w * r[1],
                        ],
                        alpha_bias: parent.alpha_bias,
                    }
                }
                JointKind::Prismatic => {
                    let local = [
                        joint.anchor[0] + joint.axis[0] * qj,
                        joint.anchor[1] + joint.axis[1] * qj,
                    ];
                    let r = parent.rotate(local);
                    let e = parent.rotate(joint.axis);
                    for col in 0..nv {
                        let jphi = jac[row + 2 * nv + col];
                        jac[row + col] -= r[1] * jphi;
                        jac[row + nv + col] += r[0] * jphi;
                    }
                    jac[row + coord] += e[0];
                    jac[row + nv + coord] += e[1];
                    let pr = perp(r);
                    let pe = perp(e);
                    Frame {
                        angle: parent.angle,
                        cos: parent.cos,
                        sin: parent.sin,
                        origin: [parent.origin[0] + r[0], parent.origin[1] + r[1]],
                        omega: w,
                        vel: [
                            parent.vel[0] + w * pr[0] + e[0] * vj,
                            parent.vel[1] + w * pr[1] + e[1] * vj,
                        ],
                        acc_bias: [
                            parent.acc_bias[0] + parent.alpha_bias * pr[0] - w * w * r[0]
                                + 2.0 * w * vj * pe[0],
                            parent.acc_bias[1] + parent.alpha_bias * pr[1] - w * w * r[1]
                                + 2.0 * w * vj * pe[1],
                        ],
                        alpha_bias: parent.alpha_bias,
                    }
                }
            };
            frames.push(frame);
        }
        Self { nv, frames, jac }
    }

    #[inline]
    fn rows(&self, link: usize) -> (&[f64], &[f64], &[f64]) {
        let nv = self.nv;
        let base = link * 3 * nv;
        (
            &self.jac[base..base + nv],
            &self.jac[base + nv..base + 2 * nv],
            &self.jac[base + 2 * nv..base + 3 * nv],
        )
    }

    /// Local centre-of-mass offset of a link.
    pub fn com_offset(model: &Model, link: usize) -> [f64; 2] {
        if link < model.spec().root_links() {
            [0.0, 0.0]
        } else {
            [0.0, -0.5 * model.spec().links[link].length]
        }
    }

    pub fn point_position(&self, link: usize, offset: [f64; 2]) -> [f64; 2] {
        let f = &self.frames[link];
        let r = f.rotate(offset);
        [f.origin[0] + r[0], f.origin[1] + r[1]]
    }

    pub fn point_velocity(&self, link: usize, offset: [f64; 2]) -> [f64; 2] {
        let f = &self.frames[link];
        let pr = perp(f.rotate(offset));
        [f.vel[0] + f.omega * pr[0], f.vel[1] + f.omega * pr[1]]
    }

    /// 2×nv Jacobian of a point's world position.
    pub fn point_jacobian(&self, _model: &Model, link: usize, offset: [f64; 2]) -> DMatrix<f64> {
        let r = self.frames[link].rotate(offset);
        let (jx, jz, jphi) = self.rows(link);
        DMatrix::from_fn(2, self.nv, |row, col| {
            if row == 0 {
                jx[col] - r[1] * jphi[col]
            } else {
                jz[col] + r[0] * jphi[col]
            }
        })
    }

    /// Adds `Jᵀ f` for a world-frame force `f` applied at a point on `link`.
    pub fn add_point_force(
        &self,
        link: usize,
        offset: [f64; 2],
        force: [f64; 2],
        generalized: &mut DVector<f64>,
    ) {
        let r = self.frames[link].rotate(offset);
        let (jx, jz, jphi) = self.rows(link);
        for col in 0..self.nv {
            generalized[col] +=
                force[0] * (jx[col] - r[1] * jphi[col]) + force[1] * (jz[col] + r[0] * jphi[col]);
        }
    }

    pub fn mass_matrix(&self, model: &Model) -> DMatrix<f64> {
        let nv = self.nv;
        let mut m = DMatrix::zeros(nv, nv);
        let mut cx = vec![0.0; nv];
        let mut cz = vec![0.0; nv];
        for (link, spec) in model.spec().links.iter().enumerate() {
            let r = self.frames[link].rotate(Self::com_offset(model, link));
            let (jx, jz, jphi) = self.rows(link);
            for col in 0..nv {
                cx[col] = jx[col] - r[1] * jphi[col];
                cz[col] = jz[col] + r[0] * jphi[col];
            }
            for a in 0..nv {
                if cx[a] == 0.0 && cz[a] == 0.0 && jphi[a] == 0.0 {
                    continue;
                }
                for b in a..nv {
                    let val = spec.mass * (cx[a] * cx[b] + cz[a] * cz[b])
                        + spec.inertia * jphi[a] * jphi[b];
                    m[(a, b)] += val;
                }
            }
        }
        for a in 0..nv {
            for b in 0..a {
                m[(a, b)] = m[(b, a)];
            }
        }
        m
    }

    /// Velocity-product plus gravity terms `h(q, v) − Q_g(q)`, so that the
    /// equations of motion read `M v̇ = τ − bias`.
    pub fn bias_forces(&self, model: &Model) -> DVector<f64> {
        let nv = self.nv;
        let g = model.spec().gravity;
        let mut h = DVector::zeros(nv);
        for (link, spec) in model.spec().links.iter().enumerate() {
            let f = &self.frames[link];
            let r = f.rotate(Self::com_offset(model, link));
            let pr = perp(r);
            let w = f.omega;
            let ax = f.acc_bias[0] + f.alpha_bias * pr[0] - w * w * r[0];
            let az = f.acc_bias[1] + f.alpha_bias * pr[1] - w * w * r[1] + g;
            let (jx, jz, jphi) = self.rows(link);
            for col in 0..nv {
                let cx = jx[col] - r[1] * jphi[col];
                let cz = jz[col] + r[0] * jphi[col];
                h[col] += spec.mass * (cx * ax + cz * az) + spec.inertia * jphi[col] * f.alpha_bias;
            }
        }
        h
    }

    /// Whole-system centre of mass position and velocity.
    pub fn center_of_mass(&self, model: &Model) -> ([f64; 2], [f64; 2]) {
        let mut total = 0.0;
        let mut p = [0.0; 2];
        let mut vel = [0.0; 2];
        for (link, spec) in model.spec().links.iter().enumerate() {
            let off = Self::com_offset(model, link);
            let pos = self.point_position(link, off);
            let v = self.point_velocity(link, off);
            total += spec.mass;
            for k in 0..2 {
                p[k] += spec.mass * pos[k];
                vel[k] += spec.mass * v[k];
            }
        }
        for k in 0..2 {
            p[k] /= total;
            vel[k] /= total;
        }
        (p, vel)
    }

    /// Kinetic plus gravitational potential energy.
    pub fn energy(&self, model: &Model) -> f64 {
        let g = model.spec().gravity;
        model
            .spec()
            .links
            .iter()
            .enumerate()
            .map(|(link, spec)| {
                let off = Self::com_offset(model, link);
                let pos = self.point_position(link, off);
                let v = self.point_velocity(link, off);
                let w = self.frames[link].omega;
                0.5 * spec.mass * (v[0] * v[0] + v[1] * v[1])
                    + 0.5 * spec.inertia * w * w
                    + spec.mass * g * pos[1]
            })
            .sum()
    }
}
