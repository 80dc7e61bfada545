//! Dormand–Prince 5(4) integrator for small, fixed-size real systems.
//!
//! The master-equation state is 34 reals (a 4×4 complex density matrix plus
//! two accumulated scalars), so everything lives on the stack.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
    /// Smallest accepted step before the integration is declared failed.
    pub min_step: f64,
    pub max_steps: usize,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            abs: 1e-10,
            rel: 1e-10,
            min_step: 1e-18,
            max_steps: 5_000_000,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("step size underflow at t = {t:e} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("exceeded {0} steps without reaching the end of the interval")]
    TooManySteps(usize),
    #[error("non-finite state at t = {0:e}")]
    NonFinite(f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// fifth-order minus embedded fourth-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn combine<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (coef, k) in terms {
        if *coef == 0.0 {
            continue;
        }
        for (o, ki) in out.iter_mut().zip(k.iter()) {
            *o += h * coef * ki;
        }
    }
    out
}

type Rhs<'a, const N: usize> = Box<dyn Fn(f64, &[f64; N]) -> [f64; N] + 'a>;

/// Adaptive Dormand–Prince integrator that stops exactly on the requested
/// output times and hands every accepted step to `on_step`.
pub struct DormandPrince<'a, const N: usize> {
    rhs: Rhs<'a, N>,
    tol: Tolerance,
}

impl<'a, const N: usize> DormandPrince<'a, N> {
    pub fn new(rhs: impl Fn(f64, &[f64; N]) -> [f64; N] + 'a, tol: Tolerance) -> Self {
        Self {
            rhs: Box::new(rhs),
            tol,
        }
    }

    /// Integrates from `outputs[0]` through every time in `outputs` (which
    /// must be increasing), returning the state at each of them.
    ///
    /// `on_step(t, y)` is called after every accepted step; returning an
    /// error aborts the integration.
    pub fn integrate<E>(
        &self,
        y0: [f64; N],
        outputs: &[f64],
        mut on_step: impl FnMut(f64, &[f64; N]) -> Result<(), E>,
    ) -> Result<(Vec<[f64; N]>, StepStats), E>
    where
        E: From<OdeError>,
    {
        let mut stats = StepStats::default();
        let mut states = Vec::with_capacity(outputs.len());
        let Some(&t_start) = outputs.first() else {
            return Ok((states, stats));
        };
        let t_end = *outputs.last().unwrap();
        let mut t = t_start;
        let mut y = y0;
        states.push(y);

        let mut k1 = (self.rhs)(t, &y);
        let mut h = self.initial_step(t, &y, &k1, t_end - t_start);
        let mut steps = 0usize;

        for &target in &outputs[1..] {
            while t < target {
                steps += 1;
                if steps > self.tol.max_steps {
                    return Err(OdeError::TooManySteps(self.tol.max_steps).into());
                }
                let remaining = target - t;
                let last = h >= remaining;
                let step = if last { remaining } else { h };

                let (y_new, k7, err) = self.try_step(t, &y, &k1, step);
                if !err.is_finite() {
                    return Err(OdeError::NonFinite(t).into());
                }
                if err <= 1.0 {
                    t = if last { target } else { t + step };
                    y = y_new;
                    k1 = k7;
                    stats.accepted += 1;
                    on_step(t, &y)?;
                    let grow = if err == 0.0 {
                        5.0
                    } else {
                        (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                    };
                    // don't let the clipped final step shrink the running step
                    h = if last { h.max(step * grow) } else { step * grow };
                } else {
                    stats.rejected += 1;
                    h = step * (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
                    if h < self.tol.min_step {
                        return Err(OdeError::StepUnderflow { t, h }.into());
                    }
                }
            }
            states.push(y);
        }
        Ok((states, stats))
    }

    fn initial_step(&self, t: f64, y: &[f64; N], f0: &[f64; N], span: f64) -> f64 {
        let scale = |yi: f64| self.tol.abs + self.tol.rel * yi.abs();
        let d0 = rms(y.iter().map(|&yi| yi / scale(yi)));
        let d1 = rms(y.iter().zip(f0).map(|(&yi, &fi)| fi / scale(yi)));
        let h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6 * span
        } else {
            0.01 * d0 / d1
        };
        let y1 = combine(y, h0, &[(1.0, f0)]);
        let f1 = (self.rhs)(t + h0, &y1);
        let d2 = rms(
            y.iter()
                .zip(f0.iter().zip(&f1))
                .map(|(&yi, (&a, &b))| (b - a) / scale(yi)),
        ) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6 * span)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(span)
    }

    fn try_step(&self, t: f64, y: &[f64; N], k1: &[f64; N], h: f64) -> ([f64; N], [f64; N], f64) {
        let f = &self.rhs;
        let k2 = f(t + C2 * h, &combine(y, h, &[(A21, k1)]));
        let k3 = f(t + C3 * h, &combine(y, h, &[(A31, k1), (A32, &k2)]));
        let k4 = f(
            t + C4 * h,
            &combine(y, h, &[(A41, k1), (A42, &k2), (A43, &k3)]),
        );
        let k5 = f(
            t + C5 * h,
            &combine(y, h, &[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
        );
        let k6 = f(
            t + h,
            &combine(
                y,
                h,
                &[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
            ),
        );
        let y_new = combine(
            y,
            h,
            &[(B1, k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)],
        );
        let k7 = f(t + h, &y_new);

        let mut err = 0.0f64;
        for i in 0..N {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = self.tol.abs + self.tol.rel * y[i].abs().max(y_new[i].abs());
            err = err.max((e / sc).abs());
        }
        (y_new, k7, err)
    }
}

fn rms(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_hits_outputs() {
        let solver = DormandPrince::<1>::new(|_, y| [-2.0 * y[0]], Tolerance::default());
        let outputs: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        let (states, stats) = solver
            .integrate(
                [1.0],
                &outputs,
                |_, _| -> Result<(), OdeError> { Ok(()) },
            )
            .unwrap();
        for (t, y) in outputs.iter().zip(&states) {
            assert!((y[0] - (-2.0 * t).exp()).abs() < 1e-9, "t={t}");
        }
        assert!(stats.accepted > 0);
    }

    #[test]
    fn harmonic_oscillator_conserves_energy() {
        let solver =
            DormandPrince::<2>::new(|_, y| [y[1], -y[0]], Tolerance::default());
        let outputs = [0.0, 10.0 * std::f64::consts::PI];
        let (states, _) = solver
            .integrate([1.0, 0.0], &outputs, |_, _| -> Result<(), OdeError> {
                Ok(())
            })
            .unwrap();
        let y = states[1];
        assert!((y[0] - 1.0).abs() < 1e-8);
        assert!(y[1].abs() < 1e-8);
    }

    #[test]
    fn callback_error_aborts() {
        #[derive(Debug)]
        struct Stop;
        impl From<OdeError> for Stop {
            fn from(_: OdeError) -> Self {
                Stop
            }
        }
        let solver = DormandPrince::<1>::new(|_, y| [y[0]], Tolerance::default());
        let res = solver.integrate([1.0], &[0.0, 1.0], |t, _| {
            if t > 0.5 {
                Err(Stop)
            } else {
                Ok(())
            }
        });
        assert!(res.is_err());
    }

    #[test]
    fn step_cap_reports_failure() {
        let tol = Tolerance {
            max_steps: 3,
            ..Tolerance::default()
        };
        let solver = DormandPrince::<1>::new(|t, _| [(50.0 * t).sin()], tol);
        let res = solver.integrate([0.0], &[0.0, 100.0], |_, _| -> Result<(), OdeError> {
            Ok(())
        });
        assert_eq!(res.unwrap_err(), OdeError::TooManySteps(3));
    }
}
