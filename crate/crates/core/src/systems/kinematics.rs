//! Forward kinematics of the benchmark mechanisms, written once over a
//! generic scalar so that the same code yields values (`f64`) and exact
//! first/second derivatives (hyper-dual numbers).

use num_dual::DualNum;

use super::{MechSystem, Parameterization, SystemKind, FOURBAR_PIVOT_SPACING};

pub trait Scalar: DualNum<Primitive = f64> + Copy {}
impl<T: DualNum<Primitive = f64> + Copy> Scalar for T {}

#[inline]
fn cst<D: Scalar>(v: f64) -> D {
    D::from(v)
}

/// Planar orientation carried as (sin, cos) plus an angle whose derivative is
/// consistent with the pair.
#[derive(Clone, Copy, Debug)]
pub struct Rot<D> {
    pub s: D,
    pub c: D,
    pub angle: D,
}

impl<D: Scalar> Rot<D> {
    pub fn from_angle(angle: D) -> Self {
        let (s, c) = angle.sin_cos();
        Rot { s, c, angle }
    }

    /// Orientation from an embedded unit-circle point.
    pub fn from_sin_cos(s: D, c: D) -> Self {
        Rot {
            s,
            c,
            angle: angle_of(s, c),
        }
    }

    pub fn fixed() -> Self {
        Rot {
            s: cst(0.0),
            c: cst(1.0),
            angle: cst(0.0),
        }
    }

    pub fn then(self, rel: Rot<D>) -> Self {
        Rot {
            s: self.s * rel.c + self.c * rel.s,
            c: self.c * rel.c - self.s * rel.s,
            angle: self.angle + rel.angle,
        }
    }

    /// Unit vector along a link at this orientation; angle zero hangs straight down.
    pub fn dir(&self) -> [D; 2] {
        [self.s, -self.c]
    }
}

/// `atan2(s, c)` with derivatives taken from the local branch. The naive
/// `atan(s / c)` chain rule breaks down where `c` crosses zero.
pub fn angle_of<D: Scalar>(s: D, c: D) -> D {
    let base = s.re().atan2(c.re());
    let (sb, cb) = base.sin_cos();
    let s_rot = s * cb - c * sb;
    let c_rot = c * cb + s * sb;
    (s_rot / c_rot).atan() + base
}

#[derive(Clone, Copy, Debug)]
pub struct Link<D> {
    pub com: [D; 2],
    pub rot: Rot<D>,
    pub half_length: f64,
}

impl<D: Scalar> Link<D> {
    fn hanging_from(proximal: [D; 2], rot: Rot<D>, length: f64) -> Self {
        let d = rot.dir();
        Link {
            com: [proximal[0] + d[0] * (0.5 * length), proximal[1] + d[1] * (0.5 * length)],
            rot,
            half_length: 0.5 * length,
        }
    }

    pub fn proximal(&self) -> [D; 2] {
        let d = self.rot.dir();
        [
            self.com[0] - d[0] * self.half_length,
            self.com[1] - d[1] * self.half_length,
        ]
    }

    pub fn distal(&self) -> [D; 2] {
        let d = self.rot.dir();
        [
            self.com[0] + d[0] * self.half_length,
            self.com[1] + d[1] * self.half_length,
        ]
    }
}

pub struct KinOut<D> {
    pub bodies: Vec<Link<D>>,
    /// Joint coordinates (relative joint angles, cart position) used for friction.
    pub joints: Vec<D>,
    pub constraints: Vec<D>,
}

impl<D: Scalar> KinOut<D> {
    /// Flat output layout: `[com_x, com_y, angle]` per body, then joints, then constraints.
    pub fn flatten(self) -> Vec<D> {
        let mut out = Vec::with_capacity(3 * self.bodies.len() + self.joints.len() + self.constraints.len());
        for b in &self.bodies {
            out.extend([b.com[0], b.com[1], b.rot.angle]);
        }
        out.extend(self.joints);
        out.extend(self.constraints);
        out
    }
}

fn pin<D: Scalar>(out: &mut Vec<D>, a: [D; 2], b: [D; 2]) {
    out.push(a[0] - b[0]);
    out.push(a[1] - b[1]);
}

fn origin<D: Scalar>() -> [D; 2] {
    [cst(0.0), cst(0.0)]
}

fn second_pivot<D: Scalar>() -> [D; 2] {
    [cst(FOURBAR_PIVOT_SPACING), cst(0.0)]
}

impl MechSystem {
    /// Serial forward kinematics from per-joint orientations (and the cart
    /// position for the cartpole). Shared by the minimal and sin/cos maps.
    fn chain<D: Scalar>(&self, cart: D, rots: &[Rot<D>]) -> (Vec<Link<D>>, Vec<D>) {
        let len = &self.params.link_lengths;
        let mut constraints = Vec::new();
        let bodies = match self.kind {
            SystemKind::Pendulum => vec![Link::hanging_from(origin(), rots[0], len[0])],
            SystemKind::Cartpole => {
                let cart_link = Link {
                    com: [cart, cst(0.0)],
                    rot: Rot::fixed(),
                    half_length: 0.0,
                };
                let pole = Link::hanging_from(cart_link.com, rots[0], len[1]);
                vec![cart_link, pole]
            }
            SystemKind::DoublePendulum => {
                let l1 = Link::hanging_from(origin(), rots[0], len[0]);
                let l2 = Link::hanging_from(l1.distal(), rots[0].then(rots[1]), len[1]);
                vec![l1, l2]
            }
            SystemKind::Fourbar => {
                let l1 = Link::hanging_from(origin(), rots[0], len[0]);
                let l2 = Link::hanging_from(l1.distal(), rots[0].then(rots[1]), len[1]);
                let l3 = Link::hanging_from(second_pivot(), rots[2], len[2]);
                let l4 = Link::hanging_from(l3.distal(), rots[2].then(rots[3]), len[3]);
                pin(&mut constraints, l2.distal(), l4.distal());
                vec![l1, l2, l3, l4]
            }
        };
        (bodies, constraints)
    }

    pub fn kinematics<D: Scalar>(&self, x: &[D]) -> KinOut<D> {
        match self.parameterization {
            Parameterization::Minimal => {
                let (cart, angles) = match self.kind {
                    SystemKind::Cartpole => (x[0], &x[1..]),
                    _ => (cst(0.0), x),
                };
                let rots: Vec<_> = angles.iter().map(|&a| Rot::from_angle(a)).collect();
                let (bodies, constraints) = self.chain(cart, &rots);
                KinOut {
                    bodies,
                    joints: x.to_vec(),
                    constraints,
                }
            }
            Parameterization::SinCos => {
                let (cart, embedded) = match self.kind {
                    SystemKind::Cartpole => (Some(x[0]), &x[1..]),
                    _ => (None, x),
                };
                let rots: Vec<_> = embedded
                    .chunks_exact(2)
                    .map(|sc| Rot::from_sin_cos(sc[0], sc[1]))
                    .collect();
                let (bodies, closure) = self.chain(cart.unwrap_or(cst(0.0)), &rots);
                let mut joints: Vec<D> = cart.into_iter().collect();
                joints.extend(rots.iter().map(|r| r.angle));
                let mut constraints: Vec<D> = rots
                    .iter()
                    .map(|r| r.s * r.s + r.c * r.c - 1.0)
                    .collect();
                constraints.extend(closure);
                KinOut {
                    bodies,
                    joints,
                    constraints,
                }
            }
            Parameterization::Maximal => self.maximal_kinematics(x),
        }
    }

    fn maximal_kinematics<D: Scalar>(&self, x: &[D]) -> KinOut<D> {
        let len = &self.params.link_lengths;
        let bodies: Vec<Link<D>> = x
            .chunks_exact(3)
            .enumerate()
            .map(|(b, p)| Link {
                com: [p[0], p[1]],
                rot: Rot::from_angle(p[2]),
                half_length: if self.kind == SystemKind::Cartpole && b == 0 {
                    0.0
                } else {
                    0.5 * len[b]
                },
            })
            .collect();
        let angle = |b: usize| bodies[b].rot.angle;
        let mut constraints = Vec::new();
        let joints = match self.kind {
            SystemKind::Pendulum => {
                pin(&mut constraints, bodies[0].proximal(), origin());
                vec![angle(0)]
            }
            SystemKind::Cartpole => {
                constraints.push(bodies[0].com[1]);
                constraints.push(angle(0));
                pin(&mut constraints, bodies[0].com, bodies[1].proximal());
                vec![bodies[0].com[0], angle(1) - angle(0)]
            }
            SystemKind::DoublePendulum => {
                pin(&mut constraints, bodies[0].proximal(), origin());
                pin(&mut constraints, bodies[0].distal(), bodies[1].proximal());
                vec![angle(0), angle(1) - angle(0)]
            }
            SystemKind::Fourbar => {
                pin(&mut constraints, bodies[0].proximal(), origin());
                pin(&mut constraints, bodies[0].distal(), bodies[1].proximal());
                pin(&mut constraints, bodies[2].proximal(), second_pivot());
                pin(&mut constraints, bodies[2].distal(), bodies[3].proximal());
                pin(&mut constraints, bodies[1].distal(), bodies[3].distal());
                vec![angle(0), angle(1) - angle(0), angle(2), angle(3) - angle(2)]
            }
        };
        KinOut {
            bodies,
            joints,
            constraints,
        }
    }
}
