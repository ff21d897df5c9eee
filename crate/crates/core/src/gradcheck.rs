//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward closure, so it stays
//! independent of every backward rule it is used to validate.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor for the relative error. It should sit at the
    /// resolution of the central difference: with `f32` forward passes each
    /// recomputed activation carries ~1e-7 relative rounding, which after
    /// division by a 2e-3 span leaves ~5e-4 absolute noise.
    pub floor: f64,
    /// Entries checked per input (all entries when `None`).
    pub samples_per_input: Option<usize>,
    /// A probe is non-smooth (a ReLU or max-pool switch lies inside
    /// `[x - step, x + step]`) when its one-sided slopes differ by more than
    /// this fraction of `max(|central|, floor)`. Such probes are reported
    /// but excluded from the error statistic. `None` disables the test.
    pub kink_rel: Option<f64>,
    /// Combine steps `h` and `h/2` as `(4·D(h/2) - D(h)) / 3`, cancelling the
    /// `h²` truncation term. Needed where activations are strongly curved
    /// (unit normalization of short vectors) and the step cannot shrink
    /// further without drowning in rounding noise.
    pub richardson: bool,
    pub seed: u64,
}

impl GradCheckOptions {
    /// Step 1e-3 for 32-bit, 1e-6 for 64-bit builds of the same graph.
    pub fn for_precision<T: Real>() -> Self {
        let wide = std::mem::size_of::<T>() == 8;
        Self {
            step: if wide { 1e-6 } else { 1e-3 },
            floor: if wide { 1e-8 } else { 5e-2 },
            samples_per_input: None,
            kink_rel: Some(if wide { 1e-4 } else { 1e-2 }),
            richardson: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub smooth: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    /// Largest relative error over smooth probes.
    pub fn max_rel_error(&self) -> f64 {
        self.checked().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.checked().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn checked(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.smooth)
    }

    pub fn checked_count(&self) -> usize {
        self.checked().count()
    }

    pub fn skipped_count(&self) -> usize {
        self.entries.len() - self.checked_count()
    }
}

fn eval<T: Real, F>(inputs: &[Tensor<T>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    ensure!(v.numel() == 1, "gradcheck: closure must return a scalar");
    Ok(v.data()[0].to_f64().unwrap())
}

/// Compares the tape gradient of `f` with respect to each of `inputs`
/// against central differences of `f` itself.
pub fn check<T: Real, F>(inputs: &[Tensor<T>], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| tape.grad(v).expect("param has grad")).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let center = match opts.kink_rel {
        Some(_) => eval(inputs, &f)?,
        None => 0.0,
    };
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = match opts.samples_per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in picks {
            let orig = input.data()[idx];
            let mut central = |step: f64| -> Result<(f64, f64, f64, f64, f64)> {
                let h = T::lit(step);
                work[i].data_mut()[idx] = orig + h;
                let plus = eval(&work, &f)?;
                work[i].data_mut()[idx] = orig - h;
                let minus = eval(&work, &f)?;
                work[i].data_mut()[idx] = orig;
                // the step actually applied after rounding to T
                let up = (orig + h).to_f64().unwrap() - orig.to_f64().unwrap();
                let down = orig.to_f64().unwrap() - (orig - h).to_f64().unwrap();
                Ok(((plus - minus) / (up + down), plus, minus, up, down))
            };
            let (coarse, plus, minus, up, down) = central(opts.step)?;
            let numeric = if opts.richardson { (4.0 * central(opts.step / 2.0)?.0 - coarse) / 3.0 } else { coarse };
            let a = analytic[i].data()[idx].to_f64().unwrap();
            let smooth = match opts.kink_rel {
                Some(tol) => {
                    let slope_gap = ((plus - center) / up - (center - minus) / down).abs();
                    slope_gap <= tol * numeric.abs().max(opts.floor)
                }
                None => true,
            };
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            report.entries.push(GradCheckEntry {
                input: i,
                index: idx,
                analytic: a,
                numeric,
                rel_error: (a - numeric).abs() / denom,
                smooth,
            });
        }
    }
    Ok(report)
}
