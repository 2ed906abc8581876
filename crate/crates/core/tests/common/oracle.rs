//! Scalar Euler reference. Written from the scheme definition with plain
//! `f64` arithmetic and the same operation order as the library, plus an
//! explicit count of every addition and subtraction it performs.

#![allow(dead_code)]

pub type W = [f64; 3];

pub struct Oracle {
    pub gamma: f64,
    pub adds: u64,
}

impl Oracle {
    pub fn new(gamma: f64) -> Self {
        Self { gamma, adds: 0 }
    }

    fn add(&mut self, a: f64, b: f64) -> f64 {
        self.adds += 1;
        a + b
    }

    fn sub(&mut self, a: f64, b: f64) -> f64 {
        self.adds += 1;
        a - b
    }

    /// (u, p, |u| + c)
    pub fn prim(&mut self, w: W) -> (f64, f64, f64) {
        let [rho, m, e] = w;
        assert!(rho > 0.0);
        let u = m / rho;
        let p = (self.gamma - 1.0) * self.sub(e, 0.5 * m * u);
        assert!(p > 0.0);
        let c = (self.gamma * p / rho).sqrt();
        let s = self.add(u.abs(), c);
        (u, p, s)
    }

    pub fn phys(&mut self, w: W, u: f64, p: f64) -> W {
        let mom = self.add(w[1] * u, p);
        let ene = self.add(w[2], p) * u;
        [w[1], mom, ene]
    }

    /// Face flux and the face speed.
    pub fn face(&mut self, l: W, r: W) -> (W, f64) {
        let (ul, pl, sl) = self.prim(l);
        let (ur, pr, sr) = self.prim(r);
        let fl = self.phys(l, ul, pl);
        let fr = self.phys(r, ur, pr);
        (self.rusanov(l, r, fl, fr, sl, sr), if sl > sr { sl } else { sr })
    }

    fn rusanov(&mut self, l: W, r: W, fl: W, fr: W, sl: f64, sr: f64) -> W {
        let s = if sl > sr { sl } else { sr };
        let hs = 0.5 * s;
        let mut out = [0.0; 3];
        for k in 0..3 {
            let avg = 0.5 * self.add(fl[k], fr[k]);
            let jump = self.sub(r[k], l[k]);
            out[k] = self.sub(avg, hs * jump);
        }
        out
    }

    /// One step on cells `u` (periodic); cells evaluate both their faces.
    pub fn step(&mut self, u: &[W], time: f64, dx: f64, cfl: f64, max_dt: f64) -> (Vec<W>, f64, f64) {
        let n = u.len();
        let mut net = Vec::with_capacity(n);
        let mut smax = 0.0;
        for i in 0..n {
            let w = u[(i + n - 1) % n];
            let c = u[i];
            let e = u[(i + 1) % n];
            let (uw, pw, sw) = self.prim(w);
            let (uc, pc, sc) = self.prim(c);
            let (ue, pe, se) = self.prim(e);
            let fw = self.phys(w, uw, pw);
            let fc = self.phys(c, uc, pc);
            let fe = self.phys(e, ue, pe);
            let west = self.rusanov(w, c, fw, fc, sw, sc);
            let sww = if sw > sc { sw } else { sc };
            let east = self.rusanov(c, e, fc, fe, sc, se);
            let see = if sc > se { sc } else { se };
            net.push([
                self.sub(east[0], west[0]),
                self.sub(east[1], west[1]),
                self.sub(east[2], west[2]),
            ]);
            if sww > smax {
                smax = sww;
            }
            if see > smax {
                smax = see;
            }
        }
        let dt = (cfl * dx / smax).min(max_dt);
        let lambda = dt / dx;
        let t = self.add(time, dt);
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let v = [
                self.sub(u[i][0], lambda * net[i][0]),
                self.sub(u[i][1], lambda * net[i][1]),
                self.sub(u[i][2], lambda * net[i][2]),
            ];
            // Positivity check of the updated cell.
            let p = (self.gamma - 1.0) * self.sub(v[2], 0.5 * v[1] * (v[1] / v[0]));
            assert!(v[0] > 0.0 && p > 0.0);
            next.push(v);
        }
        (next, dt, t)
    }

    pub fn totals(&mut self, u: &[W], dx: f64) -> W {
        let mut s = [0.0; 3];
        for w in u {
            for k in 0..3 {
                s[k] = self.add(s[k], w[k]);
            }
        }
        [s[0] * dx, s[1] * dx, s[2] * dx]
    }
}

/// Shock-tube cells.
pub fn sod_cells(n: usize, gamma: f64) -> Vec<W> {
    (0..n)
        .map(|i| {
            let (rho, p) = if i < n / 2 { (1.0, 1.0) } else { (0.125, 0.1) };
            [rho, 0.0, p / (gamma - 1.0)]
        })
        .collect()
}

/// Dump in the documented layout.
pub fn dump(u: &[W]) -> Vec<u8> {
    let mut out = b"RHSTATE1".to_vec();
    out.extend_from_slice(&(u.len() as u64).to_le_bytes());
    for k in 0..3 {
        for w in u {
            out.extend_from_slice(&w[k].to_le_bytes());
        }
    }
    out
}
