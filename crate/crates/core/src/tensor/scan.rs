//! Selective state-space scan kernels.
//!
//! Per channel `c` and state index `n`:
//!
//! ```text
//! Ā_t = exp(Δ_t[c] · A[c,n])            (zero-order hold)
//! B̄_t = Δ_t[c] · B_t[n]                 (Euler)
//! h_t = Ā_t · h_{t-1} + B̄_t · x_t[c],   h_0 = 0
//! y_t[c] = Σ_n C_t[n] · h_t[c,n] + D[c] · x_t[c]
//! ```
//!
//! Layouts are row-major: `x`, `delta` are `len × channels`; `a` is
//! `channels × state`; `b`, `c` are `len × state`; hidden states are
//! `len × channels × state`.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a, F> {
    pub x: &'a [F],
    pub delta: &'a [F],
    pub a: &'a [F],
    pub b: &'a [F],
    pub c: &'a [F],
    pub d: &'a [F],
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

#[derive(Clone, Debug)]
pub struct ScanOutput<F> {
    pub y: Vec<F>,
    pub states: Vec<F>,
}

#[derive(Clone, Debug)]
pub struct ScanGrads<F> {
    pub x: Vec<F>,
    pub delta: Vec<F>,
    pub a: Vec<F>,
    pub b: Vec<F>,
    pub c: Vec<F>,
    pub d: Vec<F>,
}

impl<F: Scalar> ScanInputs<'_, F> {
    fn readout(&self, states: &[F]) -> Vec<F> {
        let (ch, ns) = (self.channels, self.state);
        let mut y = vec![F::zero(); self.len * ch];
        for t in 0..self.len {
            let ct = &self.c[t * ns..(t + 1) * ns];
            for k in 0..ch {
                let h = &states[(t * ch + k) * ns..(t * ch + k + 1) * ns];
                let mut acc = F::zero();
                for (hv, cv) in h.iter().zip(ct) {
                    acc = acc + *hv * *cv;
                }
                y[t * ch + k] = acc + self.d[k] * self.x[t * ch + k];
            }
        }
        y
    }

    #[inline]
    fn step(&self, t: usize, k: usize, n: usize, prev: F) -> F {
        let (ch, ns) = (self.channels, self.state);
        let dt = self.delta[t * ch + k];
        let abar = (dt * self.a[k * ns + n]).exp();
        abar * prev + dt * self.b[t * ns + n] * self.x[t * ch + k]
    }
}

/// Reference sequential recurrence.
pub fn scan_sequential<F: Scalar>(inp: &ScanInputs<'_, F>) -> ScanOutput<F> {
    let (ch, ns) = (inp.channels, inp.state);
    let mut states = vec![F::zero(); inp.len * ch * ns];
    for t in 0..inp.len {
        for k in 0..ch {
            for n in 0..ns {
                let prev = if t == 0 {
                    F::zero()
                } else {
                    states[((t - 1) * ch + k) * ns + n]
                };
                states[(t * ch + k) * ns + n] = inp.step(t, k, n, prev);
            }
        }
    }
    let y = inp.readout(&states);
    ScanOutput { y, states }
}

/// Two-level blocked scan: independent local scans per block (each with
/// zero initial state and a running product of `Ā`), a sequential carry
/// pass over block boundaries, then a fix-up `h_t = local_t + P_t · carry`.
pub fn scan_blocked<F: Scalar>(inp: &ScanInputs<'_, F>, block: usize) -> ScanOutput<F> {
    let block = block.max(1);
    let (ch, ns) = (inp.channels, inp.state);
    let width = ch * ns;
    let mut local = vec![F::zero(); inp.len * width];
    let mut prod = vec![F::one(); inp.len * width];

    for start in (0..inp.len).step_by(block) {
        let end = (start + block).min(inp.len);
        for t in start..end {
            for k in 0..ch {
                let dt = inp.delta[t * ch + k];
                for n in 0..ns {
                    let idx = t * width + k * ns + n;
                    let abar = (dt * inp.a[k * ns + n]).exp();
                    let (prev_h, prev_p) = if t == start {
                        (F::zero(), F::one())
                    } else {
                        (local[idx - width], prod[idx - width])
                    };
                    local[idx] = abar * prev_h + dt * inp.b[t * ns + n] * inp.x[t * ch + k];
                    prod[idx] = abar * prev_p;
                }
            }
        }
    }

    let mut states = local;
    let mut carry = vec![F::zero(); width];
    for start in (0..inp.len).step_by(block) {
        let end = (start + block).min(inp.len);
        for t in start..end {
            let row = t * width;
            for j in 0..width {
                states[row + j] = states[row + j] + prod[row + j] * carry[j];
            }
        }
        carry.copy_from_slice(&states[(end - 1) * width..end * width]);
    }

    let y = inp.readout(&states);
    ScanOutput { y, states }
}

/// Reverse-mode gradients of the scan given upstream `gy` (`len × channels`).
pub fn scan_backward<F: Scalar>(inp: &ScanInputs<'_, F>, states: &[F], gy: &[F]) -> ScanGrads<F> {
    let (len, ch, ns) = (inp.len, inp.channels, inp.state);
    let mut g = ScanGrads {
        x: vec![F::zero(); len * ch],
        delta: vec![F::zero(); len * ch],
        a: vec![F::zero(); ch * ns],
        b: vec![F::zero(); len * ns],
        c: vec![F::zero(); len * ns],
        d: vec![F::zero(); ch],
    };
    // gh carries dL/dh_t for the current t, per (channel, state)
    let mut gh = vec![F::zero(); ch * ns];
    for t in (0..len).rev() {
        for k in 0..ch {
            let gyv = gy[t * ch + k];
            let xv = inp.x[t * ch + k];
            let dt = inp.delta[t * ch + k];
            g.d[k] = g.d[k] + gyv * xv;
            let mut gx = gyv * inp.d[k];
            let mut gdt = F::zero();
            for n in 0..ns {
                let si = (t * ch + k) * ns + n;
                let h = states[si];
                g.c[t * ns + n] = g.c[t * ns + n] + gyv * h;
                let j = k * ns + n;
                // gh currently holds Ā_{t+1}·gh_{t+1}
                let ght = gh[j] + gyv * inp.c[t * ns + n];
                let av = inp.a[j];
                let abar = (dt * av).exp();
                let prev = if t == 0 {
                    F::zero()
                } else {
                    states[si - ch * ns]
                };
                let bn = inp.b[t * ns + n];
                gdt = gdt + ght * (prev * abar * av + bn * xv);
                g.a[j] = g.a[j] + ght * prev * abar * dt;
                g.b[t * ns + n] = g.b[t * ns + n] + ght * dt * xv;
                gx = gx + ght * dt * bn;
                gh[j] = ght * abar;
            }
            g.x[t * ch + k] = gx;
            g.delta[t * ch + k] = gdt;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `(x, delta, a, b, c, d)`.
    fn toy() -> [Vec<f64>; 6] {
        // len 3, channels 2, state 2
        let x = vec![0.5, -1.0, 1.5, 0.25, -0.75, 2.0];
        let delta = vec![0.1, 0.2, 0.3, 0.05, 0.15, 0.25];
        let a = vec![-1.0, -2.0, -0.5, -3.0];
        let b = vec![1.0, 0.5, -0.5, 2.0, 0.3, 0.7];
        let c = vec![0.2, -0.4, 1.1, 0.6, -0.9, 0.3];
        let d = vec![1.0, 0.5];
        [x, delta, a, b, c, d]
    }

    #[test]
    fn single_step_has_no_recurrence() {
        let [x, delta, a, b, c, d] = toy();
        let inp = ScanInputs {
            x: &x[..2],
            delta: &delta[..2],
            a: &a,
            b: &b[..2],
            c: &c[..2],
            d: &d,
            len: 1,
            channels: 2,
            state: 2,
        };
        let out = scan_sequential(&inp);
        for k in 0..2 {
            let want: f64 =
                (0..2).map(|n| c[n] * delta[k] * b[n] * x[k]).sum::<f64>() + d[k] * x[k];
            assert!((out.y[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn blocked_matches_sequential_on_toy() {
        let [x, delta, a, b, c, d] = toy();
        let inp = ScanInputs {
            x: &x,
            delta: &delta,
            a: &a,
            b: &b,
            c: &c,
            d: &d,
            len: 3,
            channels: 2,
            state: 2,
        };
        let s = scan_sequential(&inp);
        for block in 1..=4 {
            let p = scan_blocked(&inp, block);
            for (u, v) in s.y.iter().zip(&p.y) {
                assert!((u - v).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_state_matrix_gives_weighted_cumsum() {
        let [x, delta, _, b, c, _] = toy();
        let a = vec![0.0; 4];
        let d = vec![0.0; 2];
        let inp = ScanInputs {
            x: &x,
            delta: &delta,
            a: &a,
            b: &b,
            c: &c,
            d: &d,
            len: 3,
            channels: 2,
            state: 2,
        };
        let out = scan_sequential(&inp);
        for t in 0..3 {
            for k in 0..2 {
                for n in 0..2 {
                    let want: f64 = (0..=t)
                        .map(|s| delta[s * 2 + k] * b[s * 2 + n] * x[s * 2 + k])
                        .sum();
                    assert!((out.states[(t * 2 + k) * 2 + n] - want).abs() < 1e-14);
                }
            }
        }
    }
}
